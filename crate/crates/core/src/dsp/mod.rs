//! Short-time Fourier analysis shared by every other module.
//!
//! Framing convention: with `center_pad` the signal is reflect-padded by
//! `fft_size / 2` on the left and zero-padded on the right so that a signal
//! of `D` samples always yields `K = ceil(D / hop) + 1` frames. Synthesis is
//! windowed overlap-add normalized by the summed squared window, which makes
//! `istft(stft(w)) == w` for any COLA-valid configuration.
//!
//! Spectra are stored in `f64`; waveforms are `f32`.

pub mod tensor;

use std::f64::consts::PI;

use ndarray::Array2;
use realfft::num_complex::Complex64;
use realfft::RealFftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mono audio signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Argument("waveform must contain at least one sample".into()));
        }
        if sample_rate == 0 {
            return Err(Error::Argument("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite {
                component: format!("waveform sample {i}"),
            });
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Result<Self> {
        Self::new(vec![0.0; len], sample_rate)
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn max_abs(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|&s| (s as f64) * (s as f64)).sum()
    }

    /// Multiplies every sample by `gain`.
    pub fn scaled(&self, gain: f64) -> Result<Self> {
        Self::new(
            self.samples.iter().map(|&s| (s as f64 * gain) as f32).collect(),
            self.sample_rate,
        )
    }

    /// First `len` samples (or the whole signal if it is shorter).
    pub fn truncated(&self, len: usize) -> Self {
        let len = len.clamp(1, self.samples.len());
        Self {
            samples: self.samples[..len].to_vec(),
            sample_rate: self.sample_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    Hann,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub fft_size: usize,
    pub hop: usize,
    pub win_length: usize,
    pub window: WindowKind,
    pub center_pad: bool,
    /// Scale analysis by `1 / sqrt(sum(w^2))` so that a bin of unit white
    /// noise has unit expected power. Synthesis undoes the scale.
    pub normalized: bool,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            fft_size: 512,
            hop: 128,
            win_length: 512,
            window: WindowKind::Hann,
            center_pad: true,
            normalized: true,
        }
    }
}

impl StftConfig {
    pub fn new(fft_size: usize, hop: usize, win_length: usize) -> Self {
        Self {
            fft_size,
            hop,
            win_length,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fft_size < 2 || self.fft_size % 2 != 0 {
            return Err(Error::Config(format!(
                "fft_size must be even and >= 2, got {}",
                self.fft_size
            )));
        }
        if self.hop == 0 || self.hop > self.win_length || self.win_length > self.fft_size {
            return Err(Error::Config(format!(
                "need 0 < hop <= win_length <= fft_size, got hop={} win_length={} fft_size={}",
                self.hop, self.win_length, self.fft_size
            )));
        }
        if self.fft_size % self.hop != 0 {
            return Err(Error::Config(format!(
                "hop {} must divide fft_size {}",
                self.hop, self.fft_size
            )));
        }
        let envelope = self.periodic_envelope();
        let mean = envelope.iter().sum::<f64>() / envelope.len() as f64;
        let spread = envelope
            .iter()
            .map(|e| (e - mean).abs())
            .fold(0.0f64, f64::max);
        if mean <= 0.0 || spread > 1e-9 * mean {
            return Err(Error::Config(format!(
                "window/hop pair (win_length={}, hop={}) does not overlap-add to a constant",
                self.win_length, self.hop
            )));
        }
        Ok(())
    }

    /// Number of frequency bins `F`.
    pub fn n_freqs(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Number of frames `K` produced for a signal of `len` samples.
    pub fn n_frames(&self, len: usize) -> usize {
        if self.center_pad {
            len.div_ceil(self.hop) + 1
        } else if len <= self.fft_size {
            1
        } else {
            (len - self.fft_size).div_ceil(self.hop) + 1
        }
    }

    fn pad_left(&self) -> usize {
        if self.center_pad {
            self.fft_size / 2
        } else {
            0
        }
    }

    /// Analysis window zero-padded (centred) to `fft_size`.
    pub fn window(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.fft_size];
        let offset = (self.fft_size - self.win_length) / 2;
        let n = self.win_length as f64;
        for i in 0..self.win_length {
            out[offset + i] = match self.window {
                // periodic Hann
                WindowKind::Hann => 0.5 - 0.5 * (2.0 * PI * i as f64 / n).cos(),
            };
        }
        out
    }

    /// Analysis scale applied to every DFT bin.
    pub fn norm(&self) -> f64 {
        if self.normalized {
            self.window().iter().map(|w| w * w).sum::<f64>().sqrt()
        } else {
            1.0
        }
    }

    /// Sum of squared windows over one hop period.
    fn periodic_envelope(&self) -> Vec<f64> {
        let w = self.window();
        (0..self.hop)
            .map(|n| {
                (n..self.fft_size)
                    .step_by(self.hop)
                    .map(|i| w[i] * w[i])
                    .sum()
            })
            .collect()
    }

    /// Ratio between the total two-sided STFT power and the energy of a
    /// signal lying away from the edges.
    pub fn parseval_constant(&self) -> f64 {
        let sq: f64 = self.window().iter().map(|w| w * w).sum();
        self.fft_size as f64 * sq / (self.hop as f64 * self.norm().powi(2))
    }
}

/// `F x K` complex STFT grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub bins: Array2<Complex64>,
    pub config: StftConfig,
    /// Length in samples of the analysed signal.
    pub length: usize,
    pub sample_rate: u32,
}

impl ComplexSpectrogram {
    pub fn zeros(config: StftConfig, length: usize, sample_rate: u32) -> Self {
        Self {
            bins: Array2::zeros((config.n_freqs(), config.n_frames(length))),
            config,
            length,
            sample_rate,
        }
    }

    pub fn n_freqs(&self) -> usize {
        self.bins.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.bins.ncols()
    }

    pub fn power(&self) -> PowerSpectrogram {
        PowerSpectrogram {
            bins: self.bins.mapv(|c| c.norm_sqr()),
        }
    }
}

/// Nonnegative `F x K` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerSpectrogram {
    pub bins: Array2<f64>,
}

impl PowerSpectrogram {
    pub fn new(bins: Array2<f64>) -> Result<Self> {
        if bins.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Domain(
                "power spectrogram entries must be finite and nonnegative".into(),
            ));
        }
        Ok(Self { bins })
    }

    pub fn total(&self) -> f64 {
        self.bins.sum()
    }
}

pub(crate) fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Framed, padded view of a signal: index `j` of the padded signal.
pub(crate) fn padded_signal(samples: &[f32], cfg: &StftConfig) -> Vec<f64> {
    let len = samples.len();
    let k = cfg.n_frames(len);
    let total = (k - 1) * cfg.hop + cfg.fft_size;
    let left = cfg.pad_left() as isize;
    (0..total)
        .map(|j| {
            let i = j as isize - left;
            if cfg.center_pad && i < len as isize {
                samples[reflect_index(i, len)] as f64
            } else if i >= 0 && (i as usize) < len {
                samples[i as usize] as f64
            } else {
                0.0
            }
        })
        .collect()
}

pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    cfg.validate()?;
    let n = cfg.fft_size;
    let padded = padded_signal(w.samples(), cfg);
    let window = cfg.window();
    let scale = 1.0 / cfg.norm();
    let k = cfg.n_frames(w.len());

    let mut planner = RealFftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    let mut input = fft.make_input_vec();
    let mut output = fft.make_output_vec();
    let mut bins = Array2::zeros((cfg.n_freqs(), k));
    for frame in 0..k {
        let start = frame * cfg.hop;
        for (i, slot) in input.iter_mut().enumerate() {
            *slot = padded[start + i] * window[i];
        }
        fft.process(&mut input, &mut output)
            .map_err(|e| Error::Config(e.to_string()))?;
        for (f, c) in output.iter().enumerate() {
            bins[[f, frame]] = c * scale;
        }
    }
    Ok(ComplexSpectrogram {
        bins,
        config: *cfg,
        length: w.len(),
        sample_rate: w.sample_rate(),
    })
}

pub fn istft(spec: &ComplexSpectrogram) -> Result<Waveform> {
    let cfg = &spec.config;
    cfg.validate()?;
    let n = cfg.fft_size;
    let k = spec.n_frames();
    if spec.n_freqs() != cfg.n_freqs() || k != cfg.n_frames(spec.length) {
        return Err(Error::Shape(format!(
            "spectrogram is {}x{}, config expects {}x{}",
            spec.n_freqs(),
            k,
            cfg.n_freqs(),
            cfg.n_frames(spec.length)
        )));
    }
    let window = cfg.window();
    let scale = cfg.norm() / n as f64;
    let total = (k - 1) * cfg.hop + n;
    let mut acc = vec![0.0f64; total];
    let mut env = vec![0.0f64; total];

    let mut planner = RealFftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(n);
    let mut input = ifft.make_input_vec();
    let mut output = ifft.make_output_vec();
    for frame in 0..k {
        for (f, slot) in input.iter_mut().enumerate() {
            *slot = spec.bins[[f, frame]];
        }
        // irfft ignores the imaginary part of DC and Nyquist
        input[0].im = 0.0;
        input[n / 2].im = 0.0;
        ifft.process(&mut input, &mut output)
            .map_err(|e| Error::Config(e.to_string()))?;
        let start = frame * cfg.hop;
        for i in 0..n {
            acc[start + i] += output[i] * scale * window[i];
            env[start + i] += window[i] * window[i];
        }
    }
    let offset = cfg.pad_left();
    let samples = (0..spec.length)
        .map(|i| {
            let e = env[i + offset];
            if e > 1e-11 {
                (acc[i + offset] / e) as f32
            } else {
                0.0
            }
        })
        .collect();
    Waveform::new(samples, spec.sample_rate)
}

pub fn power_spectrogram(w: &Waveform, cfg: &StftConfig) -> Result<PowerSpectrogram> {
    Ok(stft(w, cfg)?.power())
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-mel filterbank, `n_mels x F`.
///
/// The first and last filters are flat towards DC and Nyquist so every bin
/// is covered. A filter narrower than one bin falls back to the bin nearest
/// its centre.
pub fn mel_filterbank(n_mels: usize, cfg: &StftConfig, sample_rate: u32) -> Result<Array2<f64>> {
    cfg.validate()?;
    let n_freqs = cfg.n_freqs();
    if n_mels == 0 || n_mels >= n_freqs {
        return Err(Error::Config(format!(
            "n_mels must be in 1..{n_freqs}, got {n_mels}"
        )));
    }
    let nyquist = sample_rate as f64 / 2.0;
    let mel_max = hz_to_mel(nyquist);
    let points: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = |f: usize| f as f64 * sample_rate as f64 / cfg.fft_size as f64;

    let mut fb = Array2::zeros((n_mels, n_freqs));
    for m in 0..n_mels {
        let (lo, centre, hi) = (points[m], points[m + 1], points[m + 2]);
        for f in 0..n_freqs {
            let hz = bin_hz(f);
            let rise = if m == 0 && hz <= centre {
                1.0
            } else {
                (hz - lo) / (centre - lo)
            };
            let fall = if m == n_mels - 1 && hz >= centre {
                1.0
            } else {
                (hi - hz) / (hi - centre)
            };
            fb[[m, f]] = rise.min(fall).max(0.0);
        }
        if fb.row(m).sum() <= 0.0 {
            let nearest = ((centre / nyquist) * (n_freqs - 1) as f64).round() as usize;
            fb[[m, nearest.min(n_freqs - 1)]] = 1.0;
        }
    }
    Ok(fb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..len).map(|_| rng.random_range(-1.0..1.0)).collect(), 16000).unwrap()
    }

    #[test]
    fn frame_count_follows_center_convention() {
        let cfg = StftConfig::default();
        assert_eq!(cfg.n_frames(1024), 9);
        assert_eq!(cfg.n_frames(1025), 10);
        let spec = stft(&noise(1000, 1), &cfg).unwrap();
        assert_eq!(spec.n_frames(), 1000usize.div_ceil(128) + 1);
        assert_eq!(spec.n_freqs(), 257);
    }

    #[test]
    fn zero_waveform_gives_zero_spectrogram() {
        let cfg = StftConfig::default();
        let spec = stft(&Waveform::zeros(777, 16000).unwrap(), &cfg).unwrap();
        assert!(spec.bins.iter().all(|c| c.norm() == 0.0));
        let back = istft(&spec).unwrap();
        assert!(back.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn impulse_frame_zero_is_window_centre() {
        let cfg = StftConfig {
            normalized: false,
            ..StftConfig::default()
        };
        let mut s = vec![0.0; 2048];
        s[0] = 1.0;
        let spec = stft(&Waveform::new(s, 16000).unwrap(), &cfg).unwrap();
        let centre = cfg.window()[cfg.fft_size / 2];
        for f in 0..spec.n_freqs() {
            assert!((spec.bins[[f, 0]].norm() - centre).abs() < 1e-12);
        }
    }

    #[test]
    fn sinusoid_at_bin_centre_concentrates() {
        let cfg = StftConfig::default();
        let sr = 16000.0;
        let bin = 40usize;
        let f0 = bin as f64 * sr / cfg.fft_size as f64;
        let s: Vec<f32> = (0..8192)
            .map(|n| (2.0 * PI * f0 * n as f64 / sr).sin() as f32)
            .collect();
        let spec = stft(&Waveform::new(s, 16000).unwrap(), &cfg).unwrap();
        for k in 4..spec.n_frames() - 4 {
            let col = spec.bins.column(k);
            let peak = (0..col.len())
                .max_by(|&a, &b| col[a].norm().partial_cmp(&col[b].norm()).unwrap())
                .unwrap();
            assert_eq!(peak, bin);
            // Hann main lobe spans +-1 bin; everything else is leakage-free
            let main: f64 = (bin - 1..=bin + 1).map(|f| col[f].norm_sqr()).sum();
            let all: f64 = col.iter().map(|c| c.norm_sqr()).sum();
            assert!(main / all > 0.999);
        }
    }

    #[test]
    fn round_trip_and_linearity() {
        let cfg = StftConfig::default();
        let a = noise(4 * cfg.fft_size, 3);
        let b = noise(4 * cfg.fft_size, 4);
        let back = istft(&stft(&a, &cfg).unwrap()).unwrap();
        let err = a
            .samples()
            .iter()
            .zip(back.samples())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(err < 1e-6 * a.max_abs());

        let mut sum = stft(&a, &cfg).unwrap();
        sum.bins = sum.bins + &stft(&b, &cfg).unwrap().bins;
        let lin = istft(&sum).unwrap();
        for i in 0..a.len() {
            let expect = a.samples()[i] + b.samples()[i];
            assert!((lin.samples()[i] - expect).abs() < 1e-5);
        }
    }

    #[test]
    fn short_signals_round_trip() {
        let cfg = StftConfig::default();
        for len in [1usize, 2, 7, 100, 255, 256, 257] {
            let w = noise(len, len as u64);
            let back = istft(&stft(&w, &cfg).unwrap()).unwrap();
            assert_eq!(back.len(), len);
            for (x, y) in w.samples().iter().zip(back.samples()) {
                assert!((x - y).abs() < 1e-6, "len {len}");
            }
        }
    }

    #[test]
    fn power_is_squared_magnitude_and_homogeneous() {
        let cfg = StftConfig::default();
        let w = noise(3000, 9);
        let spec = stft(&w, &cfg).unwrap();
        let p = power_spectrogram(&w, &cfg).unwrap();
        for (c, v) in spec.bins.iter().zip(p.bins.iter()) {
            assert_eq!(c.norm_sqr(), *v);
        }
        let p3 = power_spectrogram(&w.scaled(3.0).unwrap(), &cfg).unwrap();
        for (a, b) in p.bins.iter().zip(p3.bins.iter()) {
            assert!((9.0 * a - b).abs() <= 1e-9 * b.max(1e-12) + 1e-12);
        }
    }

    #[test]
    fn parseval_constant_is_stable() {
        let cfg = StftConfig::default();
        let n = cfg.fft_size;
        for seed in 0..5 {
            let mut s = noise(8192, 100 + seed).into_samples();
            s[..n].fill(0.0);
            s[8192 - n..].fill(0.0);
            let w = Waveform::new(s, 16000).unwrap();
            let spec = stft(&w, &cfg).unwrap();
            // two-sided total: interior bins appear twice
            let f_last = spec.n_freqs() - 1;
            let total: f64 = spec
                .bins
                .indexed_iter()
                .map(|((f, _), c)| {
                    let weight = if f == 0 || f == f_last { 1.0 } else { 2.0 };
                    weight * c.norm_sqr()
                })
                .sum();
            let ratio = total / w.energy();
            assert!((ratio / cfg.parseval_constant() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(StftConfig::new(512, 256, 512).validate().is_err());
        assert!(StftConfig::new(512, 100, 512).validate().is_err());
        assert!(StftConfig::new(512, 128, 1024).validate().is_err());
        assert!(StftConfig::new(511, 1, 511).validate().is_err());
        assert!(StftConfig::new(512, 100, 400).validate().is_err());
        assert!(StftConfig::new(1024, 100, 400).validate().is_err());
        assert!(StftConfig::new(8, 2, 8).validate().is_ok());
        assert!(StftConfig::new(960, 240, 960).validate().is_ok());
        let w = noise(100, 1);
        assert!(matches!(
            stft(&w, &StftConfig::new(512, 256, 512)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn mel_filterbank_covers_every_bin() {
        let cfg = StftConfig::default();
        let fb = mel_filterbank(40, &cfg, 16000).unwrap();
        assert_eq!(fb.dim(), (40, 257));
        assert!(fb.iter().all(|&v| v >= 0.0));
        for row in fb.rows() {
            assert!(row.sum() > 0.0);
        }
        for col in fb.columns() {
            assert!(col.sum() > 0.0);
        }
        // flat spectrum maps to a strictly positive vector (matrix-vector oracle)
        let flat = vec![1.0; 257];
        for row in fb.rows() {
            let dot: f64 = row.iter().zip(&flat).map(|(a, b)| a * b).sum();
            assert!(dot > 0.0);
        }
        assert!(mel_filterbank(257, &cfg, 16000).is_err());
        // crowded low end still yields nonzero rows
        let dense = mel_filterbank(200, &cfg, 16000).unwrap();
        assert!(dense.rows().into_iter().all(|r| r.sum() > 0.0));
    }

    #[test]
    fn stft_is_bit_deterministic() {
        let cfg = StftConfig::default();
        let w = noise(5000, 77);
        assert_eq!(stft(&w, &cfg).unwrap(), stft(&w, &cfg).unwrap());
    }
}
