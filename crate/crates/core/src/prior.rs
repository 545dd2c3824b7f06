//! Trainable variance priors and the time-frequency noise sampler.
//!
//! Both encoders are two-level real-valued U-Nets that emit an `F x K`
//! variance map `Σ = softplus(r) + σ_floor`. The prior encoder sees only the
//! conditional features; the posterior encoder additionally runs a second
//! U-Net over the target log-power spectrogram and adds its block outputs
//! into the feature branch at matching positions.
//!
//! Noise is drawn in the STFT domain: `y_T = iSTFT(Re(N)·Σ + i·Im(N)·Σ)`
//! with `N = STFT(ε)`, `ε ~ N(0, I)` of the target length.

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use realfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dsp::tensor::TensorStft;
use crate::dsp::{istft, stft, StftConfig, Waveform};
use crate::error::{Error, Result};
use crate::features::{fit_time_axis, ConditionalFeature, FreqAlign};
use crate::nn::{leaky_relu, softplus, Conv2d, ConvTranspose2d, LEAKY_SLOPE};
use crate::params::{Init, ParamStore};
use crate::rng::standard_normal;

/// Offset added after the softplus head.
pub const SIGMA_FLOOR: f64 = 1e-4;
/// Offset inside the log applied to the target power before the posterior.
pub const POWER_LOG_EPS: f64 = 1e-5;

/// STFT grid of a signal of known length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SignalGrid {
    pub config: StftConfig,
    pub length: usize,
    pub sample_rate: u32,
}

impl SignalGrid {
    pub fn shape(&self) -> (usize, usize) {
        (self.config.n_freqs(), self.config.n_frames(self.length))
    }
}

/// Positive `F x K` variance map.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceMap {
    pub sigma: Array2<f64>,
    pub grid: SignalGrid,
}

impl VarianceMap {
    pub fn new(sigma: Array2<f64>, grid: SignalGrid) -> Result<Self> {
        if sigma.dim() != grid.shape() {
            return Err(Error::Shape(format!(
                "variance map is {:?}, grid expects {:?}",
                sigma.dim(),
                grid.shape()
            )));
        }
        if sigma.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Domain("variance entries must be finite and positive".into()));
        }
        Ok(Self { sigma, grid })
    }

    pub fn constant(value: f64, grid: SignalGrid) -> Result<Self> {
        Self::new(Array2::from_elem(grid.shape(), value), grid)
    }

    /// Builds maps from a `(B, F, K)` tensor.
    pub fn from_tensor(t: &Tensor, grid: SignalGrid) -> Result<Vec<Self>> {
        let (b, f, k) = t.dims3()?;
        let flat = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        (0..b)
            .map(|i| {
                let data = flat[i * f * k..(i + 1) * f * k].to_vec();
                Self::new(Array2::from_shape_vec((f, k), data).expect("slice size"), grid)
            })
            .collect()
    }

    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        let (f, k) = self.sigma.dim();
        let data: Vec<f64> = self.sigma.iter().copied().collect();
        Ok(Tensor::from_vec(data, (1, f, k), device)?.to_dtype(dtype)?)
    }

    pub fn energy(&self) -> f64 {
        self.sigma.sum()
    }

    /// The map as a feature grid for WTFF export: one row per STFT frame,
    /// one channel per frequency bin, values rounded to `f32`.
    pub fn to_feature(&self, frame_rate: f64) -> Result<ConditionalFeature> {
        let frames = self.sigma.t().mapv(|v| v as f32);
        ConditionalFeature::new(frames, frame_rate, "sigma_prior")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub prior_channels: usize,
    pub posterior_channels: usize,
    /// Initial bias of the raw output head (before softplus).
    pub head_bias_init: f64,
}

impl EncoderConfig {
    pub fn desk() -> Self {
        Self {
            prior_channels: 16,
            posterior_channels: 12,
            head_bias_init: -4.0,
        }
    }

    pub fn paper() -> Self {
        Self {
            prior_channels: 45,
            posterior_channels: 32,
            head_bias_init: -4.0,
        }
    }
}

/// Two downsampling and two upsampling blocks with a skip connection at the
/// first level. Spatial dims must be multiples of 4.
#[derive(Debug, Clone)]
pub struct UNet {
    enc1: Conv2d,
    enc2: Conv2d,
    dec2: ConvTranspose2d,
    dec1: ConvTranspose2d,
    head: Option<Conv2d>,
}

pub const UNET_BLOCKS: usize = 4;

impl UNet {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        head_bias: Option<f64>,
    ) -> Result<Self> {
        let ch = channels;
        Ok(Self {
            enc1: Conv2d::new(store, &format!("{name}.enc1"), 1, ch, 3, 2, Init::Zeros)?,
            enc2: Conv2d::new(store, &format!("{name}.enc2"), ch, 2 * ch, 3, 2, Init::Zeros)?,
            dec2: ConvTranspose2d::new(store, &format!("{name}.dec2"), 2 * ch, ch)?,
            dec1: ConvTranspose2d::new(store, &format!("{name}.dec1"), 2 * ch, ch)?,
            head: head_bias
                .map(|b| Conv2d::new(store, &format!("{name}.head"), ch, 1, 1, 1, Init::Const(b)))
                .transpose()?,
        })
    }

    /// Returns the head output (if any) and the four block outputs, each
    /// already fused with the matching entry of `addends`.
    pub fn forward(&self, x: &Tensor, addends: Option<&[Tensor]>) -> Result<(Option<Tensor>, Vec<Tensor>)> {
        let fuse = |t: Tensor, i: usize| -> Result<Tensor> {
            match addends {
                Some(a) => Ok((t + &a[i])?),
                None => Ok(t),
            }
        };
        let e1 = fuse(leaky_relu(&self.enc1.forward(x)?, LEAKY_SLOPE)?, 0)?;
        let e2 = fuse(leaky_relu(&self.enc2.forward(&e1)?, LEAKY_SLOPE)?, 1)?;
        let d2 = fuse(leaky_relu(&self.dec2.forward(&e2)?, LEAKY_SLOPE)?, 2)?;
        let d1_in = Tensor::cat(&[&d2, &e1], 1)?;
        let d1 = fuse(leaky_relu(&self.dec1.forward(&d1_in)?, LEAKY_SLOPE)?, 3)?;
        let head = self.head.as_ref().map(|h| h.forward(&d1)).transpose()?;
        Ok((head, vec![e1, e2, d2, d1]))
    }
}

fn pad_to_multiple(x: &Tensor, multiple: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let ph = h.div_ceil(multiple) * multiple - h;
    let pw = w.div_ceil(multiple) * multiple - w;
    Ok(x.pad_with_zeros(2, 0, ph)?.pad_with_zeros(3, 0, pw)?)
}

/// `(B, 1, Hp, Wp)` raw head output to `(B, F, K)` variance.
fn variance_head(raw: &Tensor, f: usize, k: usize) -> Result<Tensor> {
    let raw = raw.narrow(2, 0, f)?.narrow(3, 0, k)?.squeeze(1)?;
    Ok((softplus(&raw)? + SIGMA_FLOOR)?)
}

#[derive(Debug, Clone)]
pub struct PriorEncoder {
    pub align: FreqAlign,
    pub unet: UNet,
}

impl PriorEncoder {
    pub fn new(store: &mut ParamStore, name: &str, feat_channels: usize, n_freqs: usize, cfg: &EncoderConfig) -> Result<Self> {
        Ok(Self {
            align: FreqAlign::new(store, &format!("{name}.align"), feat_channels, n_freqs)?,
            unet: UNet::new(store, &format!("{name}.unet"), cfg.prior_channels, Some(cfg.head_bias_init))?,
        })
    }

    /// `c_up: (B, M, C)` to `Σ_prior: (B, F, K)`.
    pub fn encode(&self, c_up: &Tensor, k: usize) -> Result<Tensor> {
        let aligned = fit_time_axis(&self.align.forward(c_up)?, k)?;
        self.encode_aligned(&aligned)
    }

    /// `aligned: (B, F, K)` to `(B, F, K)`.
    pub fn encode_aligned(&self, aligned: &Tensor) -> Result<Tensor> {
        let (_, f, k) = aligned.dims3()?;
        let x = pad_to_multiple(&aligned.unsqueeze(1)?, 4)?;
        let (head, _) = self.unet.forward(&x, None)?;
        variance_head(&head.expect("prior U-Net has a head"), f, k)
    }
}

#[derive(Debug, Clone)]
pub struct PosteriorEncoder {
    pub align: FreqAlign,
    pub feature_unet: UNet,
    pub spectrum_unet: UNet,
}

impl PosteriorEncoder {
    pub fn new(store: &mut ParamStore, name: &str, feat_channels: usize, n_freqs: usize, cfg: &EncoderConfig) -> Result<Self> {
        Ok(Self {
            align: FreqAlign::new(store, &format!("{name}.align"), feat_channels, n_freqs)?,
            feature_unet: UNet::new(
                store,
                &format!("{name}.feature_unet"),
                cfg.posterior_channels,
                Some(cfg.head_bias_init),
            )?,
            spectrum_unet: UNet::new(store, &format!("{name}.spectrum_unet"), cfg.posterior_channels, None)?,
        })
    }

    /// `c_up: (B, M, C)`, `x0_power: (B, F, K)` to `Σ_post: (B, F, K)`.
    pub fn encode(&self, c_up: &Tensor, x0_power: &Tensor) -> Result<Tensor> {
        let k = x0_power.dim(2)?;
        let aligned = fit_time_axis(&self.align.forward(c_up)?, k)?;
        self.encode_aligned(&aligned, x0_power)
    }

    pub fn encode_aligned(&self, aligned: &Tensor, x0_power: &Tensor) -> Result<Tensor> {
        let (b, f, k) = aligned.dims3()?;
        if x0_power.dims3()? != (b, f, k) {
            return Err(Error::Shape(format!(
                "features aligned to {:?} but target power is {:?}",
                aligned.dims(),
                x0_power.dims()
            )));
        }
        let spec_in = pad_to_multiple(&(x0_power + POWER_LOG_EPS)?.log()?.unsqueeze(1)?, 4)?;
        let (_, spec_blocks) = self.spectrum_unet.forward(&spec_in, None)?;
        let feat_in = pad_to_multiple(&aligned.unsqueeze(1)?, 4)?;
        let (head, _) = self.feature_unet.forward(&feat_in, Some(&spec_blocks))?;
        variance_head(&head.expect("feature U-Net has a head"), f, k)
    }
}

fn single_map(t: &Tensor, grid: SignalGrid) -> Result<VarianceMap> {
    Ok(VarianceMap::from_tensor(t, grid)?.remove(0))
}

fn check_aligned(c_aligned: &Array2<f64>, grid: &SignalGrid) -> Result<()> {
    if c_aligned.dim() != grid.shape() {
        return Err(Error::Shape(format!(
            "aligned features are {:?}, grid expects {:?}",
            c_aligned.dim(),
            grid.shape()
        )));
    }
    if c_aligned.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            component: "aligned features".into(),
        });
    }
    Ok(())
}

fn grid_tensor(a: &Array2<f64>, device: &Device, dtype: DType) -> Result<Tensor> {
    let (f, k) = a.dim();
    Ok(Tensor::from_vec(a.iter().copied().collect::<Vec<_>>(), (1, f, k), device)?.to_dtype(dtype)?)
}

/// `Σ_prior` for features already projected to the `F x K` grid.
pub fn prior_encode(c_aligned: &Array2<f64>, params: &PriorEncoder, grid: SignalGrid) -> Result<VarianceMap> {
    check_aligned(c_aligned, &grid)?;
    let w = &params.align.linear.weight;
    let sigma = params.encode_aligned(&grid_tensor(c_aligned, w.device(), w.dtype())?)?;
    single_map(&sigma, grid)
}

pub fn posterior_encode(
    c_aligned: &Array2<f64>,
    x0_power: &crate::dsp::PowerSpectrogram,
    params: &PosteriorEncoder,
    grid: SignalGrid,
) -> Result<VarianceMap> {
    if x0_power.bins.ncols() != c_aligned.ncols() {
        return Err(Error::Shape(format!(
            "feature frames {} != power frames {}",
            c_aligned.ncols(),
            x0_power.bins.ncols()
        )));
    }
    check_aligned(c_aligned, &grid)?;
    let w = &params.align.linear.weight;
    let a = grid_tensor(c_aligned, w.device(), w.dtype())?;
    let p = grid_tensor(&x0_power.bins, w.device(), w.dtype())?;
    single_map(&params.encode_aligned(&a, &p)?, grid)
}

/// Standard normal samples, deterministic in `seed`.
pub fn gaussian_noise(len: usize, sample_rate: u32, seed: u64) -> Result<Waveform> {
    if len == 0 {
        return Err(Error::Argument("noise length must be positive".into()));
    }
    Waveform::new(
        standard_normal(len, seed).into_iter().map(|v| v as f32).collect(),
        sample_rate,
    )
}

/// Scales the real and imaginary parts of `STFT(ε)` by `scale` and inverts.
pub(crate) fn shape_noise(scale: &Array2<f64>, grid: &SignalGrid, seed: u64) -> Result<Waveform> {
    let eps = gaussian_noise(grid.length, grid.sample_rate, seed)?;
    let mut spec = stft(&eps, &grid.config)?;
    if spec.bins.dim() != scale.dim() {
        return Err(Error::Shape(format!(
            "scale grid {:?} vs spectrogram {:?}",
            scale.dim(),
            spec.bins.dim()
        )));
    }
    ndarray::Zip::from(&mut spec.bins)
        .and(scale)
        .for_each(|c, &s| *c = Complex64::new(c.re * s, c.im * s));
    istft(&spec)
}

/// Draws `y_T` from the variance map.
pub fn sample_noise(sigma: &VarianceMap, seed: u64) -> Result<Waveform> {
    shape_noise(&sigma.sigma, &sigma.grid, seed)
}

/// Tensor form of [`sample_noise`]: `sigma: (B, F, K)`, `eps: (B, D)`.
/// Differentiable in `sigma`.
pub fn shape_noise_tensor(op: &TensorStft, sigma: &Tensor, eps: &Tensor) -> Result<Tensor> {
    let len = eps.dim(1)?;
    let (re, im) = op.forward(&eps.detach())?;
    op.inverse(&(re * sigma)?, &(im * sigma)?, len)
}

/// `(B, D)` standard normal tensor with one derived seed per row.
pub fn noise_tensor(len: usize, seeds: &[u64], device: &Device, dtype: DType) -> Result<Tensor> {
    let data: Vec<f64> = seeds.iter().flat_map(|&s| standard_normal(len, s)).collect();
    Ok(Tensor::from_vec(data, (seeds.len(), len), device)?.to_dtype(dtype)?)
}
