//! Training objectives.
//!
//! Every loss has a tensor form used for training and, where it makes sense,
//! an `f64` form over domain types used by tests, metrics and the CLI. The two
//! are cross-checked in the unit tests.

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dsp::tensor::TensorStft;
use crate::dsp::{power_spectrogram, PowerSpectrogram, StftConfig, Waveform};
use crate::error::{Error, Result};
use crate::nn::{leaky_relu, mean_pool_last, Conv1d, LEAKY_SLOPE};
use crate::params::ParamStore;
use crate::prior::VarianceMap;

/// Power floor under the square root when taking STFT magnitudes.
pub const MAG_POWER_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_s: f64,
    pub lambda_pm: f64,
    pub lambda_guide: f64,
    /// Weight of feature matching inside the adversarial generator term.
    pub lambda_fm: f64,
    /// Lower clamp on the target power in the guide ratio term.
    pub power_floor: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_s: 2.5,
            lambda_pm: 10.0,
            lambda_guide: 0.1,
            lambda_fm: 2.0,
            power_floor: 1e-8,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_s", self.lambda_s),
            ("lambda_pm", self.lambda_pm),
            ("lambda_guide", self.lambda_guide),
            ("lambda_fm", self.lambda_fm),
            ("power_floor", self.power_floor),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiResConfig {
    /// `(fft_size, hop, win_length)` triples.
    pub resolutions: Vec<[usize; 3]>,
}

impl Default for MultiResConfig {
    fn default() -> Self {
        Self {
            resolutions: vec![[512, 128, 512], [1024, 256, 1024], [256, 64, 256]],
        }
    }
}

impl MultiResConfig {
    /// Analysis configs; magnitudes are taken without window normalization.
    pub fn stft_configs(&self) -> Vec<StftConfig> {
        self.resolutions
            .iter()
            .map(|&[n, h, w]| StftConfig {
                normalized: false,
                ..StftConfig::new(n, h, w)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut distinct = self.resolutions.clone();
        distinct.sort_unstable();
        distinct.dedup();
        if distinct.len() < 2 {
            return Err(Error::Config("need at least two distinct STFT resolutions".into()));
        }
        self.stft_configs().iter().try_for_each(StftConfig::validate)
    }

    pub fn operators(&self, device: &Device, dtype: DType) -> Result<Vec<TensorStft>> {
        self.validate()?;
        self.stft_configs()
            .into_iter()
            .map(|c| TensorStft::new(c, device, dtype))
            .collect()
    }
}

fn magnitude(p: &Array2<f64>) -> Array2<f64> {
    p.mapv(|v| v.max(MAG_POWER_FLOOR).sqrt())
}

/// Spectral convergence plus mean absolute log-magnitude difference, summed
/// over resolutions. `x` is the reference.
pub fn stft_loss(x: &Waveform, y: &Waveform, cfg: &MultiResConfig) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("lengths differ: {} vs {}", x.len(), y.len())));
    }
    cfg.validate()?;
    let mut total = 0.0;
    for c in cfg.stft_configs() {
        let mx = magnitude(&power_spectrogram(x, &c)?.bins);
        let my = magnitude(&power_spectrogram(y, &c)?.bins);
        let diff: f64 = mx.iter().zip(my.iter()).map(|(a, b)| (a - b).powi(2)).sum();
        let reference: f64 = mx.iter().map(|a| a * a).sum();
        let log_mag: f64 = mx.iter().zip(my.iter()).map(|(a, b)| (a.ln() - b.ln()).abs()).sum::<f64>()
            / mx.len() as f64;
        total += (diff / reference).sqrt() + log_mag;
    }
    Ok(total)
}

/// Tensor form of [`stft_loss`] over `(B, D)` batches; spectral convergence
/// is computed per row and averaged.
pub fn stft_loss_tensor(ops: &[TensorStft], x: &Tensor, y: &Tensor) -> Result<Tensor> {
    if x.dims() != y.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", x.dims(), y.dims())));
    }
    let mut total: Option<Tensor> = None;
    for op in ops {
        let mx = op.power(x)?.maximum(MAG_POWER_FLOOR)?.sqrt()?;
        let my = op.power(y)?.maximum(MAG_POWER_FLOOR)?.sqrt()?;
        let diff = (&my - &mx)?.sqr()?.flatten_from(1)?.sum(1)?;
        let reference = mx.sqr()?.flatten_from(1)?.sum(1)?;
        let sc = (diff / reference)?.sqrt()?.mean_all()?;
        let log_mag = (my.log()? - mx.log()?)?.abs()?.mean_all()?;
        let term = (sc + log_mag)?;
        total = Some(match total {
            None => term,
            Some(t) => (t + term)?,
        });
    }
    total.ok_or_else(|| Error::Config("no STFT resolutions".into()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub scales: usize,
    /// Output channels of each conv layer before the 1-channel head.
    pub channels: Vec<usize>,
    pub first_kernel: usize,
    /// Kernel of the strided layers.
    pub kernel: usize,
    pub stride: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            scales: 3,
            channels: vec![16, 32, 64, 64],
            first_kernel: 15,
            kernel: 21,
            stride: 4,
        }
    }
}

#[derive(Debug, Clone)]
struct ScaleDiscriminator {
    layers: Vec<Conv1d>,
    head: Conv1d,
}

impl ScaleDiscriminator {
    fn forward(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut h = x.clone();
        let mut features = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            h = leaky_relu(&layer.forward(&h)?, LEAKY_SLOPE)?;
            features.push(h.clone());
        }
        Ok((self.head.forward(&h)?, features))
    }
}

/// Waveform discriminators at successively mean-pooled (×2) scales.
#[derive(Debug, Clone)]
pub struct Discriminator {
    scales: Vec<ScaleDiscriminator>,
}

/// Logits and intermediate activations of one scale.
pub type ScaleOutput = (Tensor, Vec<Tensor>);

impl Discriminator {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &DiscriminatorConfig) -> Result<Self> {
        if cfg.scales == 0 || cfg.channels.is_empty() {
            return Err(Error::Config("discriminator needs at least one scale and one layer".into()));
        }
        let mut scales = Vec::with_capacity(cfg.scales);
        for s in 0..cfg.scales {
            let mut layers = Vec::with_capacity(cfg.channels.len());
            let mut c_in = 1;
            for (i, &c_out) in cfg.channels.iter().enumerate() {
                let (kernel, stride) = if i == 0 { (cfg.first_kernel, 1) } else { (cfg.kernel, cfg.stride) };
                layers.push(Conv1d::new(store, &format!("{name}.s{s}.l{i}"), c_in, c_out, kernel, stride, 1)?);
                c_in = c_out;
            }
            let head = Conv1d::new(store, &format!("{name}.s{s}.head"), c_in, 1, 3, 1, 1)?;
            scales.push(ScaleDiscriminator { layers, head });
        }
        Ok(Self { scales })
    }

    pub fn n_scales(&self) -> usize {
        self.scales.len()
    }

    /// `x: (B, D)`.
    pub fn forward(&self, x: &Tensor) -> Result<Vec<ScaleOutput>> {
        let mut h = x.unsqueeze(1)?;
        let mut out = Vec::with_capacity(self.scales.len());
        for (i, scale) in self.scales.iter().enumerate() {
            if i > 0 {
                h = mean_pool_last(&h, 2)?;
            }
            out.push(scale.forward(&h)?);
        }
        Ok(out)
    }
}

fn sum_terms(terms: Vec<Tensor>) -> Result<Tensor> {
    let mut it = terms.into_iter();
    let first = it.next().ok_or_else(|| Error::Argument("empty loss sum".into()))?;
    it.try_fold(first, |acc, t| Ok((acc + t)?))
}

/// Least-squares discriminator loss `Σ_scales mean((D(x)-1)²) + mean(D(y)²)`.
pub fn discriminator_loss(disc: &Discriminator, real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    let r = disc.forward(real)?;
    let f = disc.forward(fake)?;
    let mut terms = Vec::new();
    for ((lr, _), (lf, _)) in r.iter().zip(&f) {
        terms.push((lr - 1.0)?.sqr()?.mean_all()?);
        terms.push(lf.sqr()?.mean_all()?);
    }
    sum_terms(terms)
}

/// Generator-side adversarial loss `Σ_scales mean((D(y)-1)²)` and feature
/// matching (mean L1 between activations, averaged over scales and layers,
/// with the real activations detached).
pub fn generator_adversarial(disc: &Discriminator, real: &Tensor, fake: &Tensor) -> Result<(Tensor, Tensor)> {
    let r = disc.forward(&real.detach())?;
    let f = disc.forward(fake)?;
    let mut adv = Vec::new();
    let mut fm = Vec::new();
    for ((_, fr), (lf, ff)) in r.iter().zip(&f) {
        adv.push((lf - 1.0)?.sqr()?.mean_all()?);
        for (a, b) in fr.iter().zip(ff) {
            fm.push((b - a.detach())?.abs()?.mean_all()?);
        }
    }
    let n_fm = fm.len() as f64;
    Ok((sum_terms(adv)?, (sum_terms(fm)? / n_fm)?))
}

/// Scalar GAN losses for a waveform pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GanLosses {
    /// Adversarial term plus `lambda_fm` times feature matching.
    pub gen_loss: f64,
    pub disc_loss: f64,
    pub feat_match: f64,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn wave_tensor(w: &Waveform, device: &Device, dtype: DType) -> Result<Tensor> {
    let v: Vec<f64> = w.samples().iter().map(|&s| s as f64).collect();
    Ok(Tensor::from_vec(v, (1, w.len()), device)?.to_dtype(dtype)?)
}

pub fn gan_losses(x: &Waveform, y: &Waveform, disc: &Discriminator, lambda_fm: f64, store: &ParamStore) -> Result<GanLosses> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("lengths differ: {} vs {}", x.len(), y.len())));
    }
    let xt = wave_tensor(x, store.device(), store.dtype())?;
    let yt = wave_tensor(y, store.device(), store.dtype())?;
    let (adv, fm) = generator_adversarial(disc, &xt, &yt)?;
    let fm = scalar(&fm)?;
    Ok(GanLosses {
        gen_loss: scalar(&adv)? + lambda_fm * fm,
        disc_loss: scalar(&discriminator_loss(disc, &xt, &yt)?)?,
        feat_match: fm,
    })
}

/// `Σ_{f,k} [ln(p/q) + q/p]` with `q = Σ_post`, `p = Σ_prior`.
pub fn prior_matching_loss(sigma_post: &VarianceMap, sigma_prior: &VarianceMap) -> Result<f64> {
    if sigma_post.sigma.dim() != sigma_prior.sigma.dim() {
        return Err(Error::Shape(format!(
            "{:?} vs {:?}",
            sigma_post.sigma.dim(),
            sigma_prior.sigma.dim()
        )));
    }
    let mut total = 0.0;
    for (&q, &p) in sigma_post.sigma.iter().zip(sigma_prior.sigma.iter()) {
        if !(q > 0.0 && p > 0.0) {
            return Err(Error::Domain(format!("variance entries must be positive, got {q} and {p}")));
        }
        total += (p / q).ln() + q / p;
    }
    Ok(total)
}

/// Tensor form over `(B, F, K)`, averaged over the batch.
pub fn prior_matching_loss_tensor(sigma_post: &Tensor, sigma_prior: &Tensor) -> Result<Tensor> {
    let b = sigma_post.dim(0)? as f64;
    let per_bin = ((sigma_prior.log()? - sigma_post.log()?)? + (sigma_post / sigma_prior)?)?;
    Ok((per_bin.sum_all()? / b)?)
}

/// `|E(Σ) - E(X)| + λ/(F·K) · Σ_{f,k} Σ / max(X, floor)`.
pub fn guide_loss(sigma_post: &VarianceMap, x0_power: &PowerSpectrogram, lambda_guide: f64, power_floor: f64) -> Result<f64> {
    if sigma_post.sigma.dim() != x0_power.bins.dim() {
        return Err(Error::Shape(format!(
            "{:?} vs {:?}",
            sigma_post.sigma.dim(),
            x0_power.bins.dim()
        )));
    }
    let n = sigma_post.sigma.len() as f64;
    let ratio: f64 = sigma_post
        .sigma
        .iter()
        .zip(x0_power.bins.iter())
        .map(|(&s, &x)| s / x.max(power_floor))
        .sum();
    let out = (sigma_post.energy() - x0_power.total()).abs() + lambda_guide / n * ratio;
    if out.is_nan() {
        return Err(Error::NonFinite {
            component: "guide loss".into(),
        });
    }
    Ok(out)
}

/// Tensor form over `(B, F, K)`, averaged over the batch.
pub fn guide_loss_tensor(sigma_post: &Tensor, x0_power: &Tensor, lambda_guide: f64, power_floor: f64) -> Result<Tensor> {
    let (b, f, k) = sigma_post.dims3()?;
    let x = x0_power.detach();
    let e_sigma = sigma_post.flatten_from(1)?.sum(1)?;
    let e_x = x.flatten_from(1)?.sum(1)?;
    let energy = (e_sigma - e_x)?.abs()?.sum_all()?;
    let ratio = (sigma_post / x.maximum(power_floor)?)?.sum_all()?;
    Ok(((energy + (ratio * (lambda_guide / (f * k) as f64))?)? / b as f64)?)
}

/// Generator- and discriminator-side totals of the iteration loss, each the
/// mean over the intermediate outputs.
#[derive(Debug, Clone)]
pub struct WaveFitTerms {
    pub gan_g: Tensor,
    pub feat_match: Tensor,
    pub stft: Tensor,
    /// `gan_g + λ_fm·feat_match + λ_S·stft`
    pub gen_total: Tensor,
}

/// `outputs` holds one `(B, D)` tensor per iteration step.
pub fn wavefit_generator_terms(
    x0: &Tensor,
    outputs: &[Tensor],
    disc: &Discriminator,
    ops: &[TensorStft],
    weights: &LossWeights,
) -> Result<WaveFitTerms> {
    if outputs.is_empty() {
        return Err(Error::Argument("iteration trace is empty".into()));
    }
    let t = outputs.len();
    // stacking along the batch keeps every mean equal to the mean over steps
    let fake = Tensor::cat(outputs, 0)?;
    let real = Tensor::cat(&vec![x0.clone(); t], 0)?;
    let (gan_g, feat_match) = generator_adversarial(disc, &real, &fake)?;
    let stft = stft_loss_tensor(ops, &real, &fake)?;
    let gen_total = ((&gan_g + (&feat_match * weights.lambda_fm)?)? + (&stft * weights.lambda_s)?)?;
    Ok(WaveFitTerms {
        gan_g,
        feat_match,
        stft,
        gen_total,
    })
}

/// Discriminator-side iteration loss; `outputs` should already be detached.
pub fn wavefit_discriminator_loss(x0: &Tensor, outputs: &[Tensor], disc: &Discriminator) -> Result<Tensor> {
    if outputs.is_empty() {
        return Err(Error::Argument("iteration trace is empty".into()));
    }
    let fake = Tensor::cat(outputs, 0)?;
    let real = Tensor::cat(&vec![x0.clone(); outputs.len()], 0)?;
    discriminator_loss(disc, &real, &fake)
}

/// Scalar breakdown of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub gan_g: f64,
    pub gan_d: f64,
    pub feat_match: f64,
    pub stft: f64,
    pub pm: f64,
    pub guide: f64,
    pub gen_total: f64,
    pub disc_total: f64,
}

impl LossReport {
    /// First non-finite component, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        [
            ("gan_g", self.gan_g),
            ("gan_d", self.gan_d),
            ("feat_match", self.feat_match),
            ("stft", self.stft),
            ("pm", self.pm),
            ("guide", self.guide),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Generator total `L_WF + λ_PM·L_PM + L_Guide`.
pub fn total_generator_loss(wavefit_gen: &Tensor, pm: &Tensor, guide: &Tensor, weights: &LossWeights) -> Result<Tensor> {
    Ok(((wavefit_gen + (pm * weights.lambda_pm)?)? + guide)?)
}
