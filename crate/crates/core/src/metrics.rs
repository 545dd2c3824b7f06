//! Objective comparison between a reference and a generated waveform.
//!
//! Mel-cepstra are the orthonormal DCT-II of the log-mel amplitude, and the
//! pitch tracker is a normalized cross-correlation search, so absolute values
//! are only comparable with other runs of this crate.

use serde::{Deserialize, Serialize};

use crate::dsp::{mel_filterbank, power_spectrogram, StftConfig, Waveform};
use crate::error::{Error, Result};

/// Reported SNR when the signals are identical.
pub const SNR_CAP_DB: f64 = 120.0;
const MEL_LOG_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    /// Highest cepstral order kept (order 0 is always dropped).
    pub mcd_order: usize,
    pub n_mels: usize,
    pub stft: StftConfig,
    pub f0_min: f64,
    pub f0_max: f64,
    /// Minimum normalized correlation for a frame to count as voiced.
    pub voicing_threshold: f64,
    pub pitch_hop_secs: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            mcd_order: 13,
            n_mels: 40,
            stft: StftConfig {
                normalized: false,
                ..StftConfig::new(1024, 256, 1024)
            },
            f0_min: 60.0,
            f0_max: 500.0,
            voicing_threshold: 0.5,
            pitch_hop_secs: 0.01,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        if self.mcd_order == 0 || self.mcd_order >= self.n_mels {
            return Err(Error::Config(format!(
                "mcd_order must be in 1..{}, got {}",
                self.n_mels, self.mcd_order
            )));
        }
        if !(self.f0_min > 0.0 && self.f0_min < self.f0_max) {
            return Err(Error::Config("need 0 < f0_min < f0_max".into()));
        }
        if !(self.pitch_hop_secs > 0.0) {
            return Err(Error::Config("pitch_hop_secs must be positive".into()));
        }
        Ok(())
    }
}

fn aligned<'a>(x: &'a Waveform, y: &'a Waveform) -> Result<(&'a [f32], &'a [f32])> {
    if x.sample_rate() != y.sample_rate() {
        return Err(Error::Argument(format!(
            "sample rates differ: {} vs {}",
            x.sample_rate(),
            y.sample_rate()
        )));
    }
    let n = x.len().min(y.len());
    Ok((&x.samples()[..n], &y.samples()[..n]))
}

/// Orthonormal DCT-II of `v`, orders `0..count`.
fn dct_ortho(v: &[f64], count: usize) -> Vec<f64> {
    let n = v.len() as f64;
    (0..count)
        .map(|k| {
            let s: f64 = v
                .iter()
                .enumerate()
                .map(|(i, x)| x * (std::f64::consts::PI * k as f64 * (i as f64 + 0.5) / n).cos())
                .sum();
            let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            s * scale
        })
        .collect()
}

/// Mel-cepstra per frame, orders `0..=mcd_order`.
pub fn mel_cepstrum(w: &Waveform, cfg: &MetricsConfig) -> Result<Vec<Vec<f64>>> {
    let fb = mel_filterbank(cfg.n_mels, &cfg.stft, w.sample_rate())?;
    let mel = fb.dot(&power_spectrogram(w, &cfg.stft)?.bins);
    Ok(mel
        .columns()
        .into_iter()
        .map(|col| {
            let log_amp: Vec<f64> = col.iter().map(|p| 0.5 * (p + MEL_LOG_EPS).ln()).collect();
            dct_ortho(&log_amp, cfg.mcd_order + 1)
        })
        .collect())
}

/// Mel-cepstral distortion in dB.
pub fn mcd(x: &Waveform, y: &Waveform, cfg: &MetricsConfig) -> Result<f64> {
    let (xs, ys) = aligned(x, y)?;
    if xs.len() < cfg.stft.win_length {
        return Err(Error::Argument(format!(
            "{} samples is shorter than one {}-sample analysis frame",
            xs.len(),
            cfg.stft.win_length
        )));
    }
    let cx = mel_cepstrum(&Waveform::new(xs.to_vec(), x.sample_rate())?, cfg)?;
    let cy = mel_cepstrum(&Waveform::new(ys.to_vec(), y.sample_rate())?, cfg)?;
    let k = 10.0 * 2f64.sqrt() / std::f64::consts::LN_10;
    let total: f64 = cx
        .iter()
        .zip(&cy)
        .map(|(a, b)| a[1..].iter().zip(&b[1..]).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt())
        .sum();
    Ok(k * total / cx.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PitchFrame {
    /// Hz; 0 when unvoiced.
    pub f0: f64,
    pub voiced: bool,
}

/// Normalized cross-correlation pitch tracker with parabolic peak
/// refinement. Frames are one longest period long and start every
/// `pitch_hop_secs`.
pub fn pitch_track(w: &Waveform, cfg: &MetricsConfig) -> Result<Vec<PitchFrame>> {
    cfg.validate()?;
    let sr = w.sample_rate() as f64;
    if sr < 8000.0 {
        return Err(Error::Argument(format!("pitch tracking needs >= 8 kHz, got {sr}")));
    }
    let x: Vec<f64> = w.samples().iter().map(|&v| v as f64).collect();
    let lag_min = (sr / cfg.f0_max).floor() as usize;
    let lag_max = (sr / cfg.f0_min).ceil() as usize;
    let frame = lag_max;
    let hop = (cfg.pitch_hop_secs * sr).round().max(1.0) as usize;
    let span = frame + lag_max + 1;
    if x.len() < span {
        return Ok(Vec::new());
    }
    let n_frames = (x.len() - span) / hop + 1;
    let mut out = Vec::with_capacity(n_frames);
    let mut r = vec![0.0; lag_max + 2];
    for m in 0..n_frames {
        let start = m * hop;
        let seg = &x[start..start + span];
        let e0: f64 = seg[..frame].iter().map(|v| v * v).sum();
        if e0 <= 1e-12 {
            out.push(PitchFrame { f0: 0.0, voiced: false });
            continue;
        }
        // sliding energy of the lagged window
        let mut e_lag: f64 = seg[lag_min - 1..lag_min - 1 + frame].iter().map(|v| v * v).sum();
        for lag in lag_min - 1..=lag_max + 1 {
            if lag > lag_min - 1 {
                e_lag += seg[lag + frame - 1].powi(2) - seg[lag - 1].powi(2);
            }
            let cross: f64 = seg[..frame].iter().zip(&seg[lag..lag + frame]).map(|(a, b)| a * b).sum();
            r[lag] = if e_lag > 1e-12 { cross / (e0 * e_lag.max(0.0)).sqrt() } else { 0.0 };
        }
        let best = (lag_min..=lag_max).map(|l| r[l]).fold(f64::MIN, f64::max);
        // the shortest lag whose local peak is close to the best avoids
        // picking a multiple of the period
        let chosen = (lag_min..=lag_max).find(|&l| r[l] >= 0.9 * best && r[l] >= r[l - 1] && r[l] >= r[l + 1]);
        let frame_out = match chosen {
            Some(l) if r[l] >= cfg.voicing_threshold => {
                let (a, b, c) = (r[l - 1], r[l], r[l + 1]);
                let denom = a - 2.0 * b + c;
                let offset = if denom.abs() > 1e-12 { (0.5 * (a - c) / denom).clamp(-0.5, 0.5) } else { 0.0 };
                let f0 = sr / (l as f64 + offset);
                if (cfg.f0_min..=cfg.f0_max).contains(&f0) {
                    PitchFrame { f0, voiced: true }
                } else {
                    PitchFrame { f0: 0.0, voiced: false }
                }
            }
            _ => PitchFrame { f0: 0.0, voiced: false },
        };
        out.push(frame_out);
    }
    Ok(out)
}

/// RMSE of natural-log F0 over frames voiced in both signals; `None` when
/// no frame is voiced in both.
pub fn log_f0_rmse(x: &Waveform, y: &Waveform, cfg: &MetricsConfig) -> Result<Option<f64>> {
    let (xs, ys) = aligned(x, y)?;
    let px = pitch_track(&Waveform::new(xs.to_vec(), x.sample_rate())?, cfg)?;
    let py = pitch_track(&Waveform::new(ys.to_vec(), y.sample_rate())?, cfg)?;
    let diffs: Vec<f64> = px
        .iter()
        .zip(&py)
        .filter(|(a, b)| a.voiced && b.voiced)
        .map(|(a, b)| (a.f0.ln() - b.f0.ln()).powi(2))
        .collect();
    if diffs.is_empty() {
        return Ok(None);
    }
    Ok(Some((diffs.iter().sum::<f64>() / diffs.len() as f64).sqrt()))
}

/// `‖|X| - |Y|‖_F / ‖|X|‖_F` with `x` the reference; asymmetric.
pub fn spectral_convergence(x: &Waveform, y: &Waveform, cfg: &MetricsConfig) -> Result<f64> {
    let (xs, ys) = aligned(x, y)?;
    let px = power_spectrogram(&Waveform::new(xs.to_vec(), x.sample_rate())?, &cfg.stft)?;
    let py = power_spectrogram(&Waveform::new(ys.to_vec(), y.sample_rate())?, &cfg.stft)?;
    let reference: f64 = px.total();
    if reference <= 0.0 {
        return Err(Error::Argument("spectral convergence needs a nonzero reference".into()));
    }
    let diff: f64 = px
        .bins
        .iter()
        .zip(py.bins.iter())
        .map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2))
        .sum();
    Ok((diff / reference).sqrt())
}

/// Signal-to-noise ratio of `y` against reference `x`, capped at
/// [`SNR_CAP_DB`].
pub fn snr(x: &Waveform, y: &Waveform) -> Result<f64> {
    let (xs, ys) = aligned(x, y)?;
    let signal: f64 = xs.iter().map(|&v| (v as f64).powi(2)).sum();
    if signal <= 0.0 {
        return Err(Error::Argument("SNR needs a nonzero reference".into()));
    }
    let noise: f64 = xs.iter().zip(ys).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
    if noise == 0.0 {
        return Ok(SNR_CAP_DB);
    }
    Ok((10.0 * (signal / noise).log10()).min(SNR_CAP_DB))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceMetrics {
    pub name: String,
    pub mcd: f64,
    pub log_f0_rmse: Option<f64>,
    pub spectral_convergence: f64,
    pub snr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub count: usize,
    pub mcd: f64,
    /// Mean over utterances where it is defined.
    pub log_f0_rmse: Option<f64>,
    pub spectral_convergence: f64,
    pub snr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub utterances: Vec<UtteranceMetrics>,
    pub summary: MetricSummary,
}

pub fn utterance_metrics(name: &str, x: &Waveform, y: &Waveform, cfg: &MetricsConfig) -> Result<UtteranceMetrics> {
    Ok(UtteranceMetrics {
        name: name.to_string(),
        mcd: mcd(x, y, cfg)?,
        log_f0_rmse: log_f0_rmse(x, y, cfg)?,
        spectral_convergence: spectral_convergence(x, y, cfg)?,
        snr: snr(x, y)?,
    })
}

impl MetricReport {
    pub fn from_utterances(utterances: Vec<UtteranceMetrics>) -> Result<Self> {
        if utterances.is_empty() {
            return Err(Error::Argument("no utterances to report".into()));
        }
        let n = utterances.len() as f64;
        let mean = |f: fn(&UtteranceMetrics) -> f64| utterances.iter().map(f).sum::<f64>() / n;
        let f0: Vec<f64> = utterances.iter().filter_map(|u| u.log_f0_rmse).collect();
        let summary = MetricSummary {
            count: utterances.len(),
            mcd: mean(|u| u.mcd),
            log_f0_rmse: (!f0.is_empty()).then(|| f0.iter().sum::<f64>() / f0.len() as f64),
            spectral_convergence: mean(|u| u.spectral_convergence),
            snr: mean(|u| u.snr),
        };
        Ok(Self { utterances, summary })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tone(freq: f64, secs: f64, amp: f64) -> Waveform {
        let n = (16000.0 * secs) as usize;
        Waveform::new(
            (0..n).map(|i| (amp * (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0).sin()) as f32).collect(),
            16000,
        )
        .unwrap()
    }

    fn noise(n: usize, seed: u64) -> Waveform {
        crate::prior::gaussian_noise(n, 16000, seed).unwrap().scaled(0.1).unwrap()
    }

    #[test]
    fn identity_values() {
        let cfg = MetricsConfig::default();
        let x = tone(180.0, 0.5, 0.5);
        assert_eq!(mcd(&x, &x, &cfg).unwrap(), 0.0);
        assert_eq!(log_f0_rmse(&x, &x, &cfg).unwrap(), Some(0.0));
        assert_eq!(spectral_convergence(&x, &x, &cfg).unwrap(), 0.0);
        assert_eq!(snr(&x, &x).unwrap(), SNR_CAP_DB);
        let zero = Waveform::zeros(x.len(), 16000).unwrap();
        assert!((spectral_convergence(&x, &zero, &cfg).unwrap() - 1.0).abs() < 1e-12);
        assert!(spectral_convergence(&zero, &x, &cfg).is_err());
        assert!(snr(&zero, &x).is_err());
    }

    #[test]
    fn mcd_ignores_gain_and_is_symmetric() {
        let cfg = MetricsConfig::default();
        // broadband, so the log floor never binds and the gain lands in c0 only
        let n = noise(8000, 7);
        let x = n.samples().iter().enumerate().map(|(i, v)| (i as f32 * 0.05).sin() * 0.3 + v).collect();
        let x = Waveform::new(x, 16000).unwrap();
        let g = mcd(&x, &x.scaled(3.0).unwrap(), &cfg).unwrap();
        assert!(g < 1e-6, "{g}");
        let y = noise(8000, 3);
        let a = mcd(&x, &y, &cfg).unwrap();
        assert!(a > 1.0);
        assert!((a - mcd(&y, &x, &cfg).unwrap()).abs() < 1e-12);
        assert!(mcd(&x.truncated(100), &x.truncated(100), &cfg).is_err());
    }

    #[test]
    fn mcd_matches_direct_cepstrum_formula() {
        // signals whose log-mel amplitudes are fed through an explicit DCT
        let cfg = MetricsConfig::default();
        let x = noise(4096, 1);
        let y = tone(300.0, 4096.0 / 16000.0, 0.4);
        let fb = mel_filterbank(cfg.n_mels, &cfg.stft, 16000).unwrap();
        let ceps = |w: &Waveform| -> Vec<Vec<f64>> {
            let mel = fb.dot(&power_spectrogram(w, &cfg.stft).unwrap().bins);
            (0..mel.ncols())
                .map(|k| {
                    let l: Vec<f64> = (0..cfg.n_mels).map(|m| 0.5 * (mel[[m, k]] + 1e-10).ln()).collect();
                    (1..=cfg.mcd_order)
                        .map(|q| {
                            let n = cfg.n_mels as f64;
                            (2.0 / n).sqrt()
                                * (0..cfg.n_mels)
                                    .map(|m| l[m] * (std::f64::consts::PI * q as f64 * (2 * m + 1) as f64 / (2.0 * n)).cos())
                                    .sum::<f64>()
                        })
                        .collect()
                })
                .collect()
        };
        let (cx, cy) = (ceps(&x), ceps(&y));
        let mut total = 0.0;
        for (a, b) in cx.iter().zip(&cy) {
            total += a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        }
        let expect = 10.0 / 10f64.ln() * 2f64.sqrt() * total / cx.len() as f64;
        assert!((mcd(&x, &y, &cfg).unwrap() - expect).abs() < 1e-4);
    }

    #[test]
    fn pitch_of_pure_tones() {
        let cfg = MetricsConfig::default();
        let track = pitch_track(&tone(220.0, 1.0, 0.5), &cfg).unwrap();
        let interior = &track[2..track.len() - 2];
        let good = interior.iter().filter(|p| p.voiced && (p.f0 - 220.0).abs() <= 2.0).count();
        assert!(good as f64 >= 0.95 * interior.len() as f64, "{good}/{}", interior.len());

        let v = log_f0_rmse(&tone(200.0, 0.5, 0.5), &tone(220.0, 0.5, 0.5), &cfg).unwrap().unwrap();
        assert!((v - (220f64.ln() - 200f64.ln())).abs() < 2e-3, "{v}");
    }

    #[test]
    fn noise_and_silence_are_unvoiced() {
        let cfg = MetricsConfig::default();
        let track = pitch_track(&noise(16000, 5), &cfg).unwrap();
        let voiced = track.iter().filter(|p| p.voiced).count();
        assert!((voiced as f64) < 0.1 * track.len() as f64, "{voiced}/{}", track.len());
        let silent = Waveform::zeros(8000, 16000).unwrap();
        assert!(pitch_track(&silent, &cfg).unwrap().iter().all(|p| !p.voiced));
        assert_eq!(log_f0_rmse(&silent, &noise(8000, 1), &cfg).unwrap(), None);
    }

    #[test]
    fn diagnostics_match_naive_formulas() {
        let cfg = MetricsConfig::default();
        let mut r = crate::rng::rng(2);
        let x = Waveform::new((0..3000).map(|_| r.random_range(-1.0f32..1.0)).collect(), 16000).unwrap();
        let y = Waveform::new((0..3000).map(|_| r.random_range(-1.0f32..1.0)).collect(), 16000).unwrap();
        let sx: f64 = x.samples().iter().map(|&v| (v as f64).powi(2)).sum();
        let sn: f64 = x.samples().iter().zip(y.samples()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
        assert!((snr(&x, &y).unwrap() - 10.0 * (sx / sn).log10()).abs() < 1e-9);
        let px = power_spectrogram(&x, &cfg.stft).unwrap().bins;
        let py = power_spectrogram(&y, &cfg.stft).unwrap().bins;
        let mut num = 0.0;
        let mut den = 0.0;
        for (a, b) in px.iter().zip(py.iter()) {
            num += (a.sqrt() - b.sqrt()).powi(2);
            den += a;
        }
        assert!((spectral_convergence(&x, &y, &cfg).unwrap() - (num / den).sqrt()).abs() < 1e-9);
    }

    #[test]
    fn report_averages() {
        let u = |name: &str, m: f64, f: Option<f64>| UtteranceMetrics {
            name: name.into(),
            mcd: m,
            log_f0_rmse: f,
            spectral_convergence: m / 10.0,
            snr: m * 2.0,
        };
        let r = MetricReport::from_utterances(vec![u("a", 1.0, Some(0.2)), u("b", 3.0, None)]).unwrap();
        assert_eq!(r.summary.mcd, 2.0);
        assert_eq!(r.summary.log_f0_rmse, Some(0.2));
        assert_eq!(r.summary.snr, 4.0);
        assert!(MetricReport::from_utterances(vec![]).is_err());
    }
}
