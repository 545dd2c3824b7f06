//! Differentiable STFT / iSTFT on candle tensors.
//!
//! Same framing and normalization as the `f64` routines in [`crate::dsp`];
//! analysis is a frame gather followed by a matmul against a windowed DFT
//! basis, synthesis is the transposed basis followed by shifted-sum
//! overlap-add. Everything is built from ops with backward support.

use std::f64::consts::PI;

use candle_core::{DType, Device, Tensor};

use super::{reflect_index, StftConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct TensorStft {
    cfg: StftConfig,
    /// `(N, 2F)`: columns `0..F` real part, `F..2F` imaginary part.
    analysis_t: Tensor,
    /// `(2F, N)` inverse basis with window and normalization folded in.
    synthesis: Tensor,
    device: Device,
    dtype: DType,
}

impl TensorStft {
    pub fn new(cfg: StftConfig, device: &Device, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.fft_size;
        let f_bins = cfg.n_freqs();
        let window = cfg.window();
        let norm = cfg.norm();
        let mut analysis = vec![0.0f64; 2 * f_bins * n];
        let mut synthesis = vec![0.0f64; 2 * f_bins * n];
        for f in 0..f_bins {
            let weight = if f == 0 || f == n / 2 { 1.0 } else { 2.0 };
            for i in 0..n {
                let phase = 2.0 * PI * ((f * i) % n) as f64 / n as f64;
                let (s, c) = phase.sin_cos();
                analysis[f * n + i] = window[i] * c / norm;
                analysis[(f_bins + f) * n + i] = -window[i] * s / norm;
                synthesis[f * n + i] = weight * c * norm / n as f64 * window[i];
                synthesis[(f_bins + f) * n + i] = -weight * s * norm / n as f64 * window[i];
            }
        }
        let analysis_t = Tensor::from_vec(analysis, (2 * f_bins, n), device)?
            .t()?
            .contiguous()?
            .to_dtype(dtype)?;
        let synthesis = Tensor::from_vec(synthesis, (2 * f_bins, n), device)?.to_dtype(dtype)?;
        Ok(Self {
            cfg,
            analysis_t,
            synthesis,
            device: device.clone(),
            dtype,
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    /// `x: (B, D)` to `(re, im)`, each `(B, F, K)`.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (batch, len) = x.dims2()?;
        let n = self.cfg.fft_size;
        let k = self.cfg.n_frames(len);
        let total = (k - 1) * self.cfg.hop + n;
        let left = if self.cfg.center_pad { n / 2 } else { 0 } as isize;
        // index `len` points at an appended zero column
        let padded_index: Vec<u32> = (0..total)
            .map(|j| {
                let i = j as isize - left;
                if self.cfg.center_pad && i < len as isize {
                    reflect_index(i, len) as u32
                } else if i >= 0 && (i as usize) < len {
                    i as u32
                } else {
                    len as u32
                }
            })
            .collect();
        let frame_index: Vec<u32> = (0..k)
            .flat_map(|frame| {
                let start = frame * self.cfg.hop;
                padded_index[start..start + n].iter().copied()
            })
            .collect();
        let frame_index = Tensor::from_vec(frame_index, k * n, &self.device)?;
        let zeros = Tensor::zeros((batch, 1), self.dtype, &self.device)?;
        let extended = Tensor::cat(&[x, &zeros], 1)?;
        let frames = extended
            .index_select(&frame_index, 1)?
            .reshape((batch, k, n))?;
        // one flat (B K, N) x (N, 2F) product is far cheaper than a batched one
        let f_bins = self.cfg.n_freqs();
        let spec = frames
            .reshape((batch * k, n))?
            .matmul(&self.analysis_t)?
            .reshape((batch, k, 2 * f_bins))?
            .transpose(1, 2)?;
        Ok((spec.narrow(1, 0, f_bins)?, spec.narrow(1, f_bins, f_bins)?))
    }

    pub fn power(&self, x: &Tensor) -> Result<Tensor> {
        let (re, im) = self.forward(x)?;
        Ok((re.sqr()? + im.sqr()?)?)
    }

    /// `(re, im)`, each `(B, F, K)`, back to `(B, len)`.
    pub fn inverse(&self, re: &Tensor, im: &Tensor, len: usize) -> Result<Tensor> {
        let (batch, f_bins, k) = re.dims3()?;
        if f_bins != self.cfg.n_freqs() || k != self.cfg.n_frames(len) || im.dims3()? != (batch, f_bins, k) {
            return Err(Error::Shape(format!(
                "spectrogram {:?} does not match {}x{} grid for {len} samples",
                re.dims(),
                self.cfg.n_freqs(),
                self.cfg.n_frames(len)
            )));
        }
        let n = self.cfg.fft_size;
        let hop = self.cfg.hop;
        let ratio = n / hop;
        let spec = Tensor::cat(&[re, im], 1)?.transpose(1, 2)?.contiguous()?;
        // (B K, 2F) x (2F, N) -> (B, K, N)
        let frames = spec
            .reshape((batch * k, 2 * f_bins))?
            .matmul(&self.synthesis)?
            .reshape((batch, k, n))?;
        let frames = frames.reshape((batch, k, ratio, hop))?;
        let mut acc: Option<Tensor> = None;
        for i in 0..ratio {
            let chunk = frames.narrow(2, i, 1)?.squeeze(2)?;
            let shifted = chunk.pad_with_zeros(1, i, ratio - 1 - i)?;
            acc = Some(match acc {
                None => shifted,
                Some(a) => (a + shifted)?,
            });
        }
        let total = (k + ratio - 1) * hop;
        let summed = acc
            .expect("fft_size is a positive multiple of hop")
            .reshape((batch, total))?;

        let window = self.cfg.window();
        let mut env = vec![0.0f64; total];
        for frame in 0..k {
            for (i, w) in window.iter().enumerate() {
                env[frame * hop + i] += w * w;
            }
        }
        let inv_env: Vec<f64> = env
            .iter()
            .map(|&e| if e > 1e-11 { 1.0 / e } else { 0.0 })
            .collect();
        let inv_env = Tensor::from_vec(inv_env, (1, total), &self.device)?.to_dtype(self.dtype)?;
        let offset = if self.cfg.center_pad { n / 2 } else { 0 };
        Ok(summed.broadcast_mul(&inv_env)?.narrow(1, offset, len)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{istft, stft, Waveform};
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use realfft::num_complex::Complex64;

    fn random(len: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matches_fft_route() {
        for cfg in [StftConfig::default(), StftConfig::new(8, 2, 8), StftConfig::new(256, 32, 128)] {
            for len in [1usize, 5, 300, 1000] {
                let s = random(len, len as u64);
                let w = Waveform::new(s.clone(), 16000).unwrap();
                let reference = stft(&w, &cfg).unwrap();
                let op = TensorStft::new(cfg, &Device::Cpu, DType::F64).unwrap();
                let x = Tensor::from_vec(s.iter().map(|&v| v as f64).collect::<Vec<_>>(), (1, len), &Device::Cpu).unwrap();
                let (re, im) = op.forward(&x).unwrap();
                let re = re.squeeze(0).unwrap().to_vec2::<f64>().unwrap();
                let im = im.squeeze(0).unwrap().to_vec2::<f64>().unwrap();
                for f in 0..cfg.n_freqs() {
                    for k in 0..cfg.n_frames(len) {
                        let c = reference.bins[[f, k]];
                        assert!((c.re - re[f][k]).abs() < 1e-9, "{cfg:?} {len}");
                        assert!((c.im - im[f][k]).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn inverse_matches_fft_route_on_arbitrary_grids() {
        let cfg = StftConfig::new(16, 4, 16);
        let len = 37;
        let (f_bins, k) = (cfg.n_freqs(), cfg.n_frames(len));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let re: Vec<f64> = (0..f_bins * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let im: Vec<f64> = (0..f_bins * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bins = Array2::from_shape_fn((f_bins, k), |(f, j)| Complex64::new(re[f * k + j], im[f * k + j]));
        let spec = crate::dsp::ComplexSpectrogram { bins, config: cfg, length: len, sample_rate: 16000 };
        let reference = istft(&spec).unwrap();
        let op = TensorStft::new(cfg, &Device::Cpu, DType::F64).unwrap();
        let re_t = Tensor::from_vec(re, (1, f_bins, k), &Device::Cpu).unwrap();
        let im_t = Tensor::from_vec(im, (1, f_bins, k), &Device::Cpu).unwrap();
        let out = op.inverse(&re_t, &im_t, len).unwrap().squeeze(0).unwrap().to_vec1::<f64>().unwrap();
        for (a, b) in reference.samples().iter().zip(&out) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
    }

    #[test]
    fn batched_round_trip() {
        let cfg = StftConfig::default();
        let op = TensorStft::new(cfg, &Device::Cpu, DType::F64).unwrap();
        let len = 2048;
        let data: Vec<f64> = random(3 * len, 11).into_iter().map(f64::from).collect();
        let x = Tensor::from_vec(data.clone(), (3, len), &Device::Cpu).unwrap();
        let (re, im) = op.forward(&x).unwrap();
        let back = op.inverse(&re, &im, len).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (a, b) in data.iter().zip(&back) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
