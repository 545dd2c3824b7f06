//! Training corpora: a bundled synthetic generator and WAV directories.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::Rng;

use crate::audio::read_wav;
use crate::config::RunConfig;
use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::features::{features_tensor, pseudo_ssl, ConditionalFeature};
use crate::prior::noise_tensor;
use crate::rng::{derive_seed, rng, standard_normal, stream};

/// A waveform cropped to whole feature frames and its aligned features.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub name: String,
    pub waveform: Waveform,
    pub features: ConditionalFeature,
}

impl Utterance {
    /// Crops `w` to whole frames and extracts the built-in features.
    pub fn from_waveform(name: impl Into<String>, w: &Waveform, cfg: &RunConfig) -> Result<Self> {
        let spf = cfg.samples_per_frame();
        let frames = w.len() / spf;
        if frames == 0 {
            return Err(Error::Argument(format!(
                "utterance of {} samples is shorter than one {spf}-sample frame",
                w.len()
            )));
        }
        let waveform = w.truncated(frames * spf);
        let features = pseudo_ssl(&waveform, cfg.features.n_mels, &cfg.features.stft)?.fit_frames(frames)?;
        Ok(Self {
            name: name.into(),
            waveform,
            features,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.features.n_frames()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    pub fn new(utterances: Vec<Utterance>) -> Result<Self> {
        if utterances.is_empty() {
            return Err(Error::Argument("dataset is empty".into()));
        }
        Ok(Self { utterances })
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Every `*.wav` in `dir`, in file-name order.
    pub fn from_wav_dir(dir: impl AsRef<Path>, cfg: &RunConfig) -> Result<Self> {
        let dir = dir.as_ref();
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths: Vec<_> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
            .collect();
        paths.sort();
        let mut utterances = Vec::with_capacity(paths.len());
        for path in paths {
            let w = read_wav(&path)?;
            if w.sample_rate() != cfg.dsp.sample_rate {
                return Err(Error::Config(format!(
                    "{} is {} Hz, config expects {} Hz",
                    path.display(),
                    w.sample_rate(),
                    cfg.dsp.sample_rate
                )));
            }
            let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            utterances.push(Utterance::from_waveform(name, &w, cfg)?);
        }
        if utterances.is_empty() {
            return Err(Error::Argument(format!("no .wav files in {}", dir.display())));
        }
        Self::new(utterances)
    }

    /// `count` synthetic utterances of `secs` seconds.
    pub fn synthetic(count: usize, secs: f64, cfg: &RunConfig, seed: u64) -> Result<Self> {
        let len = (secs * cfg.dsp.sample_rate as f64).round() as usize;
        let utterances = (0..count)
            .map(|i| {
                let w = synthetic_utterance(len, cfg.dsp.sample_rate, derive_seed(seed, &[stream::CORPUS, i as u64]))?;
                Utterance::from_waveform(format!("synth{i:03}"), &w, cfg)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(utterances)
    }
}

/// A voiced, speech-like test signal: a gliding harmonic series with vibrato
/// and a syllabic envelope, plus a band of resonant noise. Peak 0.5.
pub fn synthetic_utterance(len: usize, sample_rate: u32, seed: u64) -> Result<Waveform> {
    let mut r = rng(seed);
    let sr = sample_rate as f64;
    let f0 = r.random_range(110.0..260.0);
    let glide = r.random_range(-0.15..0.15);
    let vibrato_rate = r.random_range(4.0..6.0);
    let syllable_rate = r.random_range(2.5..4.5);
    let harmonics: Vec<f64> = (1..=6).map(|h| r.random_range(0.5..1.0) / h as f64).collect();
    let noise_center = r.random_range(1500.0..4000.0);
    let noise = standard_normal(len, derive_seed(seed, &[1]));

    // two-pole resonator for the noise band
    let radius: f64 = 0.97;
    let theta = 2.0 * std::f64::consts::PI * noise_center / sr;
    let (a1, a2) = (2.0 * radius * theta.cos(), -radius * radius);
    let (mut n1, mut n2) = (0.0, 0.0);

    let fade = (0.03 * sr) as usize;
    let mut phase = 0.0f64;
    let mut out = Vec::with_capacity(len);
    for (i, eps) in noise.iter().enumerate() {
        let t = i as f64 / sr;
        let progress = i as f64 / len.max(1) as f64;
        let f = f0 * (1.0 + glide * progress) * (1.0 + 0.01 * (2.0 * std::f64::consts::PI * vibrato_rate * t).sin());
        phase += 2.0 * std::f64::consts::PI * f / sr;
        let voiced: f64 = harmonics
            .iter()
            .enumerate()
            .map(|(h, a)| a * ((h + 1) as f64 * phase).sin())
            .sum();
        let band = eps * (1.0 - radius) + a1 * n1 + a2 * n2;
        n2 = n1;
        n1 = band;
        let envelope = 0.6 + 0.4 * (2.0 * std::f64::consts::PI * syllable_rate * t).sin();
        let edge = (i.min(len - 1 - i) as f64 / fade as f64).min(1.0);
        out.push(edge * (envelope * voiced + 0.3 * band));
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    Waveform::new(out.iter().map(|v| (0.5 * v / peak) as f32).collect(), sample_rate)
}

/// One training batch of equal-length crops.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `(B, D)` target waveforms.
    pub x0: Tensor,
    /// `(B, K_c, C)` features.
    pub features: Tensor,
    /// `(B, D)` standard normal draws for the initial noise.
    pub noise: Tensor,
}

/// Draws `batch_size` crops of `segment_frames` frames. Everything depends
/// only on `(seed, counter)`, so a resumed run sees the same batches.
pub fn sample_batch(
    ds: &Dataset,
    batch_size: usize,
    segment_frames: usize,
    samples_per_frame: usize,
    seed: u64,
    counter: u64,
    device: &Device,
    dtype: DType,
) -> Result<Batch> {
    let mut r = rng(derive_seed(seed, &[stream::BATCH, counter]));
    let seg_len = segment_frames * samples_per_frame;
    let mut waves = Vec::with_capacity(batch_size * seg_len);
    let mut feats = Vec::with_capacity(batch_size);
    let mut seeds = Vec::with_capacity(batch_size);
    for b in 0..batch_size {
        let u = &ds.utterances[r.random_range(0..ds.len())];
        let frames = u.n_frames();
        if frames < segment_frames {
            return Err(Error::Argument(format!(
                "utterance {} has {frames} frames, segments need {segment_frames}",
                u.name
            )));
        }
        let start = r.random_range(0..=frames - segment_frames);
        let s = start * samples_per_frame;
        waves.extend_from_slice(&u.waveform.samples()[s..s + seg_len]);
        let rows = u.features.frames.slice(ndarray::s![start..start + segment_frames, ..]).to_owned();
        feats.push(ConditionalFeature::new(rows, u.features.frame_rate, u.features.source_tag.clone())?);
        seeds.push(derive_seed(seed, &[stream::NOISE, counter, b as u64]));
    }
    Ok(Batch {
        x0: Tensor::from_vec(waves, (batch_size, seg_len), device)?.to_dtype(dtype)?,
        features: features_tensor(&feats, device, dtype)?,
        noise: noise_tensor(seg_len, &seeds, device, dtype)?,
    })
}
