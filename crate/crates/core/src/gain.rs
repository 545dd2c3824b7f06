//! Gain adjustment applied after every denoising step.
//!
//! Two operators: peak normalization to `beta_scale` ([`self_gain`]) and
//! energy matching against a variance map ([`reference_gain`]), which scales
//! `z` by `sqrt(E(Σ) / (E(|STFT(z)|²) + s))`.

use candle_core::Tensor;
use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::dsp::tensor::TensorStft;
use crate::dsp::{power_spectrogram, StftConfig, Waveform};
use crate::error::{Error, Result};
use crate::prior::VarianceMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainConfig {
    pub beta_scale: f64,
    /// Added to the denominator of the energy ratio.
    pub s: f64,
    pub stft_config: StftConfig,
}

impl Default for GainConfig {
    fn default() -> Self {
        Self {
            beta_scale: 0.95,
            s: 1e-8,
            stft_config: StftConfig::default(),
        }
    }
}

impl GainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_scale > 0.0 && self.beta_scale.is_finite()) {
            return Err(Error::Config(format!("beta_scale must be positive, got {}", self.beta_scale)));
        }
        if !(self.s > 0.0 && self.s.is_finite()) {
            return Err(Error::Config(format!("s must be positive, got {}", self.s)));
        }
        self.stft_config.validate()
    }
}

/// Sum of every entry of a time-frequency grid.
pub fn energy(grid: ArrayView2<'_, f64>) -> f64 {
    grid.sum()
}

/// Multiplier applied by [`self_gain`]; 1 for an all-zero input.
pub fn self_gain_factor(z: &Waveform, cfg: &GainConfig) -> f64 {
    let peak = z.max_abs() as f64;
    if peak == 0.0 {
        1.0
    } else {
        cfg.beta_scale / peak
    }
}

pub fn self_gain(z: &Waveform, cfg: &GainConfig) -> Result<Waveform> {
    let factor = self_gain_factor(z, cfg);
    if factor == 1.0 {
        return Ok(z.clone());
    }
    // scale in f64 and clamp the rounding of the peak sample onto beta_scale
    let beta = cfg.beta_scale as f32;
    let samples = z
        .samples()
        .iter()
        .map(|&v| ((v as f64 * factor) as f32).clamp(-beta, beta))
        .collect();
    Waveform::new(samples, z.sample_rate())
}

/// Multiplier applied by [`reference_gain`].
pub fn reference_gain_factor(z: &Waveform, sigma: &VarianceMap, cfg: &GainConfig) -> Result<f64> {
    if sigma.grid.config != cfg.stft_config || sigma.grid.length != z.len() {
        return Err(Error::Shape(format!(
            "variance map grid ({} samples) does not match a {}-sample waveform under the gain STFT",
            sigma.grid.length,
            z.len()
        )));
    }
    let p = power_spectrogram(z, &cfg.stft_config)?;
    Ok((sigma.energy() / (p.total() + cfg.s)).sqrt())
}

pub fn reference_gain(z: &Waveform, sigma: &VarianceMap, cfg: &GainConfig) -> Result<Waveform> {
    z.scaled(reference_gain_factor(z, sigma, cfg)?)
}

/// Per-row self-gain factor of `z: (B, D)`, shape `(B, 1)`; 1 for zero rows.
pub fn self_gain_factor_tensor(z: &Tensor, beta_scale: f64) -> Result<Tensor> {
    let peak = z.abs()?.max_keepdim(1)?;
    let is_zero = peak.eq(0.0)?;
    let ones = peak.ones_like()?;
    let safe = is_zero.where_cond(&ones, &peak)?;
    Ok(is_zero.where_cond(&ones, &(safe.recip()? * beta_scale)?)?)
}

/// Row-wise peak normalization of `z: (B, D)`; zero rows pass through.
pub fn self_gain_tensor(z: &Tensor, beta_scale: f64) -> Result<Tensor> {
    Ok(z.broadcast_mul(&self_gain_factor_tensor(z, beta_scale)?)?)
}

/// Per-row reference gain factor `sqrt(E(Σ) / (E(|STFT(z)|²) + s))`, shape
/// `(B, 1)`. Differentiable in both `z` and `sigma`.
pub fn reference_gain_factor_tensor(op: &TensorStft, z: &Tensor, sigma: &Tensor, s: f64) -> Result<Tensor> {
    let power = op.power(z)?;
    if power.dims() != sigma.dims() {
        return Err(Error::Shape(format!(
            "variance {:?} vs spectrogram {:?}",
            sigma.dims(),
            power.dims()
        )));
    }
    let e_sigma = sigma.flatten_from(1)?.sum_keepdim(1)?;
    let e_z = (power.flatten_from(1)?.sum_keepdim(1)? + s)?;
    Ok((e_sigma / e_z)?.sqrt()?)
}

pub fn reference_gain_tensor(op: &TensorStft, z: &Tensor, sigma: &Tensor, s: f64) -> Result<Tensor> {
    let factor = reference_gain_factor_tensor(op, z, sigma, s)?;
    Ok(z.broadcast_mul(&factor)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::SignalGrid;
    use candle_core::{DType, Device};
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::Rng;

    fn wave(v: Vec<f32>) -> Waveform {
        Waveform::new(v, 16000).unwrap()
    }

    fn random_wave(len: usize, seed: u64) -> Waveform {
        let mut r = crate::rng::rng(seed);
        wave((0..len).map(|_| r.random_range(-1.0f32..1.0)).collect())
    }

    #[test]
    fn energy_is_plain_sum() {
        assert_eq!(energy(Array2::<f64>::zeros((3, 4)).view()), 0.0);
        assert_eq!(energy(Array2::<f64>::ones((2, 2)).view()), 4.0);
        let mut r = crate::rng::rng(3);
        let g = Array2::from_shape_fn((17, 9), |_| r.random_range(0.0..5.0));
        let mut naive = 0.0;
        for i in 0..17 {
            for j in 0..9 {
                naive += g[[i, j]];
            }
        }
        assert!((energy(g.view()) - naive).abs() <= 1e-9 * naive);
    }

    #[test]
    fn self_gain_examples() {
        let cfg = GainConfig {
            beta_scale: 1.0,
            ..GainConfig::default()
        };
        assert_eq!(self_gain(&wave(vec![0.5, -0.25]), &cfg).unwrap().samples(), &[1.0, -0.5]);
        let at_peak = wave(vec![0.95, -0.3, 0.1]);
        assert_eq!(self_gain(&at_peak, &GainConfig::default()).unwrap(), at_peak);
        let zero = wave(vec![0.0; 5]);
        assert_eq!(self_gain(&zero, &cfg).unwrap(), zero);
    }

    #[test]
    fn reference_gain_examples() {
        let cfg = GainConfig::default();
        let z = random_wave(1000, 1);
        let grid = SignalGrid {
            config: cfg.stft_config,
            length: 1000,
            sample_rate: 16000,
        };
        let p = power_spectrogram(&z, &cfg.stft_config).unwrap();
        let matched = VarianceMap::constant(p.total() / (grid.shape().0 * grid.shape().1) as f64, grid).unwrap();
        let out = reference_gain(&z, &matched, &cfg).unwrap();
        for (a, b) in out.samples().iter().zip(z.samples()) {
            assert!((a - b).abs() < 1e-6);
        }
        let zero = wave(vec![0.0; 1000]);
        let out = reference_gain(&zero, &matched, &cfg).unwrap();
        assert!(out.samples().iter().all(|&v| v == 0.0));
        let short = wave(vec![0.1; 999]);
        assert!(reference_gain(&short, &matched, &cfg).is_err());
    }

    #[test]
    fn reference_gain_hits_target_energy() {
        let mut r = crate::rng::rng(8);
        for seed in 0..20 {
            let len = r.random_range(300..3000);
            let z = random_wave(len, seed);
            let cfg = GainConfig::default();
            let grid = SignalGrid {
                config: cfg.stft_config,
                length: len,
                sample_rate: 16000,
            };
            let sigma = VarianceMap::new(Array2::from_shape_fn(grid.shape(), |_| r.random_range(0.01..3.0)), grid).unwrap();
            let e_z = power_spectrogram(&z, &cfg.stft_config).unwrap().total();
            assert!(cfg.s <= 1e-8 * e_z);
            let out = reference_gain(&z, &sigma, &cfg).unwrap();
            let e_out = power_spectrogram(&out, &cfg.stft_config).unwrap().total();
            assert!((e_out / sigma.energy() - 1.0).abs() < 1e-3, "{e_out} vs {}", sigma.energy());
        }
    }

    #[test]
    fn tensor_forms_match() {
        let cfg = GainConfig::default();
        let len = 700;
        let z = random_wave(len, 4);
        let grid = SignalGrid {
            config: cfg.stft_config,
            length: len,
            sample_rate: 16000,
        };
        let mut r = crate::rng::rng(5);
        let sigma = VarianceMap::new(Array2::from_shape_fn(grid.shape(), |_| r.random_range(0.01..3.0)), grid).unwrap();
        let dev = Device::Cpu;
        let zt = Tensor::from_vec(z.samples().iter().map(|&v| v as f64).collect::<Vec<_>>(), (1, len), &dev).unwrap();
        let op = TensorStft::new(cfg.stft_config, &dev, DType::F64).unwrap();
        let st = sigma.to_tensor(&dev, DType::F64).unwrap();
        let f = reference_gain_factor_tensor(&op, &zt, &st, cfg.s).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()[0];
        let expect = reference_gain_factor(&z, &sigma, &cfg).unwrap();
        assert!((f - expect).abs() < 1e-6 * expect);

        let batch = Tensor::new(&[[0.5f64, -0.25, 0.0], [0.0, 0.0, 0.0]], &dev).unwrap();
        let out = self_gain_tensor(&batch, 1.0).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(out, vec![vec![1.0, -0.5, 0.0], vec![0.0, 0.0, 0.0]]);
    }

    proptest! {
        #[test]
        fn self_gain_peak_and_scale_invariance(
            v in proptest::collection::vec(-10.0f32..10.0, 1..200),
            alpha in 0.01f64..100.0,
        ) {
            prop_assume!(v.iter().any(|&x| x != 0.0));
            let cfg = GainConfig::default();
            let w = wave(v);
            let out = self_gain(&w, &cfg).unwrap();
            prop_assert_eq!(out.max_abs(), cfg.beta_scale as f32);
            let again = self_gain(&out, &cfg).unwrap();
            for (a, b) in again.samples().iter().zip(out.samples()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
            let scaled = self_gain(&w.scaled(alpha).unwrap(), &cfg).unwrap();
            for (a, b) in scaled.samples().iter().zip(out.samples()) {
                prop_assert!((a - b).abs() <= 1e-5);
            }
        }

        #[test]
        fn reference_gain_is_scale_covariant(seed in 0u64..1000, alpha in 0.05f64..20.0) {
            let cfg = GainConfig { s: f64::MIN_POSITIVE, ..GainConfig::default() };
            let z = random_wave(600, seed);
            let grid = SignalGrid { config: cfg.stft_config, length: 600, sample_rate: 16000 };
            let sigma = VarianceMap::constant(0.3, grid).unwrap();
            let a = reference_gain(&z, &sigma, &cfg).unwrap();
            let b = reference_gain(&z.scaled(alpha).unwrap(), &sigma, &cfg).unwrap();
            for (x, y) in a.samples().iter().zip(b.samples()) {
                prop_assert!((x - y).abs() <= 1e-5 * x.abs().max(1e-2));
            }
        }
    }
}
