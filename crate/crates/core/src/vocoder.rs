//! Denoising network and the fixed-point iteration
//! `y_{t-1} = G(y_t - F(y_t, c, t))`.
//!
//! `F` is a small WaveGrad-style network: the conditioning sequence is
//! upsampled by a stack of nearest-neighbour + conv blocks, each modulated
//! (FiLM) by a downsampling path that reads the current waveform `y_t`
//! together with a learned embedding of the step index.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::dsp::tensor::TensorStft;
use crate::dsp::{StftConfig, Waveform};
use crate::error::{Error, Result};
use crate::features::{features_tensor, ConditionalFeature, FeatureUpsampler};
use crate::gain::{reference_gain_factor_tensor, self_gain_factor_tensor, GainConfig};
use crate::nn::{leaky_relu, mean_pool_last, repeat_last, Conv1d, LEAKY_SLOPE};
use crate::params::{Init, ParamStore};
use crate::prior::{noise_tensor, shape_noise_tensor, EncoderConfig, PosteriorEncoder, PriorEncoder, SignalGrid, VarianceMap};
use crate::rng::{derive_seed, stream};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocoderConfig {
    /// Upsampling factor of each up block, applied after the 2x feature
    /// upsampler.
    pub factors: Vec<usize>,
    /// Width at the conditioning input followed by the width after each up
    /// block (`factors.len() + 1` entries).
    pub up_channels: Vec<usize>,
    /// Width of the waveform path at each resolution, finest first
    /// (`factors.len()` entries).
    pub down_channels: Vec<usize>,
    /// Number of step embeddings, i.e. the largest usable `T`.
    pub steps: usize,
}

impl VocoderConfig {
    pub fn desk() -> Self {
        Self {
            factors: vec![4, 4, 8],
            up_channels: vec![48, 32, 24, 16],
            down_channels: vec![8, 16, 24],
            steps: 5,
        }
    }

    pub fn paper() -> Self {
        Self {
            factors: vec![5, 4, 3, 2, 2],
            up_channels: vec![256, 192, 128, 96, 64, 48],
            down_channels: vec![32, 48, 64, 96, 128],
            steps: 5,
        }
    }

    /// Output samples per upsampled feature frame.
    pub fn hop(&self) -> usize {
        self.factors.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.factors.len();
        if n == 0 || self.factors.contains(&0) {
            return Err(Error::Config("vocoder needs at least one nonzero upsampling factor".into()));
        }
        if self.up_channels.len() != n + 1 || self.down_channels.len() != n {
            return Err(Error::Config(format!(
                "{n} factors need {} up_channels and {n} down_channels, got {} and {}",
                n + 1,
                self.up_channels.len(),
                self.down_channels.len()
            )));
        }
        if self.up_channels.contains(&0) || self.down_channels.contains(&0) || self.steps == 0 {
            return Err(Error::Config("channel widths and steps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct DownBlock {
    factor: usize,
    conv: Conv1d,
    skip: Conv1d,
}

#[derive(Debug, Clone)]
struct UpBlock {
    factor: usize,
    conv_a: Conv1d,
    conv_b: Conv1d,
    skip: Conv1d,
    film: Conv1d,
    /// `(steps, down width)`
    step_embedding: Tensor,
}

/// The noise estimator `F(y_t, c, t)`.
#[derive(Debug, Clone)]
pub struct Vocoder {
    cfg: VocoderConfig,
    cond_in: Conv1d,
    wave_in: Conv1d,
    downs: Vec<DownBlock>,
    ups: Vec<UpBlock>,
    out: Conv1d,
}

impl Vocoder {
    pub fn new(store: &mut ParamStore, name: &str, feat_channels: usize, cfg: &VocoderConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.factors.len();
        let up = &cfg.up_channels;
        let down = &cfg.down_channels;
        let cond_in = Conv1d::new(store, &format!("{name}.cond_in"), feat_channels, up[0], 3, 1, 1)?;
        let wave_in = Conv1d::new(store, &format!("{name}.wave_in"), 1, down[0], 5, 1, 1)?;
        let mut downs = Vec::with_capacity(n - 1);
        for j in 0..n - 1 {
            let p = format!("{name}.down{j}");
            downs.push(DownBlock {
                factor: cfg.factors[n - 1 - j],
                conv: Conv1d::new(store, &format!("{p}.conv"), down[j], down[j + 1], 3, 1, 1)?,
                skip: Conv1d::new(store, &format!("{p}.skip"), down[j], down[j + 1], 1, 1, 1)?,
            });
        }
        let mut ups = Vec::with_capacity(n);
        for i in 0..n {
            let p = format!("{name}.up{i}");
            // the up block at level i is modulated by the waveform path at
            // the same resolution, which is down level n-1-i
            let d = down[n - 1 - i];
            ups.push(UpBlock {
                factor: cfg.factors[i],
                conv_a: Conv1d::new(store, &format!("{p}.conv_a"), up[i], up[i + 1], 3, 1, 1)?,
                conv_b: Conv1d::new(store, &format!("{p}.conv_b"), up[i + 1], up[i + 1], 3, 1, 2)?,
                skip: Conv1d::new(store, &format!("{p}.skip"), up[i], up[i + 1], 1, 1, 1)?,
                film: Conv1d::new(store, &format!("{p}.film"), d, 2 * up[i + 1], 3, 1, 1)?,
                step_embedding: store.get(&format!("{p}.step_embedding"), &[cfg.steps, d], Init::Uniform(0.5))?,
            });
        }
        let out = Conv1d::new(store, &format!("{name}.out"), up[n], 1, 3, 1, 1)?;
        Ok(Self {
            cfg: cfg.clone(),
            cond_in,
            wave_in,
            downs,
            ups,
            out,
        })
    }

    pub fn config(&self) -> &VocoderConfig {
        &self.cfg
    }

    /// `y: (B, D)`, `cond: (B, C, M)` with `D = M * hop`, step `t` in
    /// `1..=steps`. Returns the noise estimate `(B, D)`.
    pub fn forward(&self, y: &Tensor, cond: &Tensor, t: usize) -> Result<Tensor> {
        let (b, d) = y.dims2()?;
        let (bc, _, m) = cond.dims3()?;
        if bc != b || d != m * self.cfg.hop() {
            return Err(Error::Shape(format!(
                "waveform {:?} does not match {m} conditioning frames x {} samples",
                y.dims(),
                self.cfg.hop()
            )));
        }
        if t == 0 || t > self.cfg.steps {
            return Err(Error::Argument(format!("step {t} outside 1..={}", self.cfg.steps)));
        }
        let mut level = leaky_relu(&self.wave_in.forward(&y.unsqueeze(1)?)?, LEAKY_SLOPE)?;
        let mut levels = vec![level.clone()];
        for block in &self.downs {
            let pooled = mean_pool_last(&level, block.factor)?;
            level = (leaky_relu(&block.conv.forward(&pooled)?, LEAKY_SLOPE)? + block.skip.forward(&pooled)?)?;
            levels.push(level.clone());
        }
        let n = self.ups.len();
        let mut h = self.cond_in.forward(cond)?;
        for (i, block) in self.ups.iter().enumerate() {
            let wave = &levels[n - 1 - i];
            let emb = block.step_embedding.narrow(0, t - 1, 1)?.unsqueeze(2)?;
            let film = block.film.forward(&leaky_relu(&wave.broadcast_add(&emb)?, LEAKY_SLOPE)?)?;
            let width = film.dim(1)? / 2;
            let scale = film.narrow(1, 0, width)?;
            let shift = film.narrow(1, width, width)?;
            let hu = repeat_last(&h, block.factor)?;
            let a = leaky_relu(&block.conv_a.forward(&hu)?, LEAKY_SLOPE)?;
            let a = ((&a * (scale + 1.0)?)? + shift)?;
            let bb = block.conv_b.forward(&leaky_relu(&a, LEAKY_SLOPE)?)?;
            h = (bb + block.skip.forward(&hu)?)?;
        }
        Ok(self.out.forward(&leaky_relu(&h, LEAKY_SLOPE)?)?.squeeze(1)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub sample_rate: u32,
    pub feature_channels: usize,
    /// Grid on which variance maps, noise sampling and the reference gain live.
    pub sigma_stft: StftConfig,
    pub vocoder: VocoderConfig,
    pub encoders: EncoderConfig,
}

impl ModelConfig {
    /// Waveform samples per (non-upsampled) feature frame.
    pub fn samples_per_frame(&self) -> usize {
        2 * self.vocoder.hop()
    }

    pub fn grid(&self, len: usize) -> SignalGrid {
        SignalGrid {
            config: self.sigma_stft,
            length: len,
            sample_rate: self.sample_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vocoder.validate()?;
        self.sigma_stft.validate()?;
        if self.sample_rate == 0 || self.feature_channels == 0 {
            return Err(Error::Config("sample_rate and feature_channels must be positive".into()));
        }
        Ok(())
    }
}

/// Every generator-side module: feature upsampler, `F`, and both encoders.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub upsampler: FeatureUpsampler,
    pub vocoder: Vocoder,
    pub prior: PriorEncoder,
    pub posterior: PosteriorEncoder,
}

impl Model {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let f = cfg.sigma_stft.n_freqs();
        let c = cfg.feature_channels;
        Ok(Self {
            cfg: cfg.clone(),
            upsampler: FeatureUpsampler::new(store, "upsampler")?,
            vocoder: Vocoder::new(store, "vocoder", c, &cfg.vocoder)?,
            prior: PriorEncoder::new(store, "prior", c, f, &cfg.encoders)?,
            posterior: PosteriorEncoder::new(store, "posterior", c, f, &cfg.encoders)?,
        })
    }

    fn device(&self) -> &Device {
        self.upsampler.kernel.device()
    }

    fn dtype(&self) -> DType {
        self.upsampler.kernel.dtype()
    }

    /// `(B, K_c, C)` features to the `(B, 2K_c, C)` upsampled sequence.
    pub fn upsample(&self, c: &Tensor) -> Result<Tensor> {
        self.upsampler.forward(c)
    }

    /// Upsampled `(B, M, C)` features in the layout the vocoder consumes.
    pub fn conditioning(c_up: &Tensor) -> Result<Tensor> {
        Ok(c_up.transpose(1, 2)?.contiguous()?)
    }

    pub fn stft(&self) -> Result<TensorStft> {
        TensorStft::new(self.cfg.sigma_stft, self.device(), self.dtype())
    }

    /// Features of one utterance as a batch of one.
    pub fn feature_batch(&self, c: &ConditionalFeature) -> Result<Tensor> {
        if c.n_channels() != self.cfg.feature_channels {
            return Err(Error::Shape(format!(
                "model expects {} feature channels, got {}",
                self.cfg.feature_channels,
                c.n_channels()
            )));
        }
        features_tensor(std::slice::from_ref(c), self.device(), self.dtype())
    }

    fn wave_tensor(&self, w: &Waveform) -> Result<Tensor> {
        let v: Vec<f32> = w.samples().to_vec();
        Ok(Tensor::from_vec(v, (1, w.len()), self.device())?.to_dtype(self.dtype())?)
    }

    /// `Σ_prior` on the grid of a `len`-sample signal, `(B, F, K)`.
    pub fn prior_sigma(&self, c_up: &Tensor, len: usize) -> Result<Tensor> {
        self.prior.encode(c_up, self.cfg.sigma_stft.n_frames(len))
    }
}

fn to_waveform(t: &Tensor, sample_rate: u32) -> Result<Waveform> {
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Waveform::new(v, sample_rate)
}

/// Single application of `F` to one utterance.
pub fn f_theta(y_t: &Waveform, c: &ConditionalFeature, t: usize, model: &Model) -> Result<Waveform> {
    let c_up = model.upsample(&model.feature_batch(c)?)?;
    let out = model.vocoder.forward(&model.wave_tensor(y_t)?, &Model::conditioning(&c_up)?, t)?;
    to_waveform(&out, y_t.sample_rate())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GainMode {
    /// Peak normalization (baseline initialized from white noise).
    #[serde(rename = "self")]
    SelfGain,
    /// Energy matching against a variance map.
    Reference,
}

/// Tensor-level gain operator.
pub enum GainOp<'a> {
    SelfGain { beta_scale: f64 },
    Reference { op: &'a TensorStft, sigma: &'a Tensor, s: f64 },
}

impl GainOp<'_> {
    /// `(B, 1)` multiplier for `z: (B, D)`.
    pub fn factor(&self, z: &Tensor) -> Result<Tensor> {
        match self {
            GainOp::SelfGain { beta_scale } => self_gain_factor_tensor(z, *beta_scale),
            GainOp::Reference { op, sigma, s } => reference_gain_factor_tensor(op, z, sigma, *s),
        }
    }
}

/// Outputs `y_{T-1} .. y_0` and the gain factors that produced them.
#[derive(Debug, Clone)]
pub struct TensorTrace {
    pub outputs: Vec<Tensor>,
    pub gains: Vec<Tensor>,
}

/// Runs `steps` iterations starting from `y_t: (B, D)`.
pub fn iterate_tensor(vocoder: &Vocoder, y_t: &Tensor, cond: &Tensor, steps: usize, gain: &GainOp<'_>) -> Result<TensorTrace> {
    if steps == 0 {
        return Err(Error::Argument("need at least one iteration".into()));
    }
    let mut y = y_t.clone();
    let mut outputs = Vec::with_capacity(steps);
    let mut gains = Vec::with_capacity(steps);
    for t in (1..=steps).rev() {
        let z = (&y - vocoder.forward(&y, cond, t)?)?;
        let g = gain.factor(&z)?;
        y = z.broadcast_mul(&g)?;
        outputs.push(y.clone());
        gains.push(g);
    }
    Ok(TensorTrace { outputs, gains })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub t: usize,
    pub waveform: Waveform,
    /// Gain factor applied to produce this waveform; 1 for the initial noise.
    pub gain: f64,
}

/// `y_T, y_{T-1}, .., y_0` with their gain factors.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationTrace {
    pub steps: Vec<TraceStep>,
}

impl IterationTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn final_waveform(&self) -> &Waveform {
        &self.steps.last().expect("trace holds at least the initial noise").waveform
    }

    fn from_tensors(y_t: &Waveform, trace: &TensorTrace) -> Result<Self> {
        let steps_n = trace.outputs.len();
        let mut steps = vec![TraceStep {
            t: steps_n,
            waveform: y_t.clone(),
            gain: 1.0,
        }];
        for (i, (y, g)) in trace.outputs.iter().zip(&trace.gains).enumerate() {
            steps.push(TraceStep {
                t: steps_n - 1 - i,
                waveform: to_waveform(y, y_t.sample_rate())?,
                gain: g.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0],
            });
        }
        Ok(Self { steps })
    }
}

/// Fixed-point iteration from `y_T` for one utterance.
pub fn iterate(
    y_t: &Waveform,
    c: &ConditionalFeature,
    steps: usize,
    mode: GainMode,
    sigma: Option<&VarianceMap>,
    model: &Model,
    gain_cfg: &GainConfig,
) -> Result<IterationTrace> {
    let c_up = model.upsample(&model.feature_batch(c)?)?;
    let cond = Model::conditioning(&c_up)?;
    let y = model.wave_tensor(y_t)?;
    let op;
    let sigma_t;
    let gain = match mode {
        GainMode::SelfGain => GainOp::SelfGain {
            beta_scale: gain_cfg.beta_scale,
        },
        GainMode::Reference => {
            let sigma = sigma.ok_or_else(|| Error::Argument("reference gain needs a variance map".into()))?;
            if sigma.grid.config != gain_cfg.stft_config || sigma.grid.length != y_t.len() {
                return Err(Error::Shape("variance map grid does not match the waveform".into()));
            }
            op = TensorStft::new(gain_cfg.stft_config, model.device(), model.dtype())?;
            sigma_t = sigma.to_tensor(model.device(), model.dtype())?;
            GainOp::Reference {
                op: &op,
                sigma: &sigma_t,
                s: gain_cfg.s,
            }
        }
    };
    let trace = iterate_tensor(&model.vocoder, &y, &cond, steps, &gain)?;
    IterationTrace::from_tensors(y_t, &trace)
}

/// Seed of the initial noise for a synthesis seed.
pub fn noise_seed(seed: u64) -> u64 {
    derive_seed(seed, &[stream::SYNTH])
}

/// Initial noise and the variance map it was drawn from (reference mode).
pub fn initial_noise(c: &ConditionalFeature, mode: GainMode, model: &Model, seed: u64) -> Result<(Waveform, Option<VarianceMap>)> {
    let len = c.n_frames() * model.cfg.samples_per_frame();
    let eps = noise_tensor(len, &[noise_seed(seed)], model.device(), model.dtype())?;
    match mode {
        GainMode::SelfGain => Ok((to_waveform(&eps, model.cfg.sample_rate)?, None)),
        GainMode::Reference => {
            let c_up = model.upsample(&model.feature_batch(c)?)?;
            let sigma = model.prior_sigma(&c_up, len)?;
            let y = shape_noise_tensor(&model.stft()?, &sigma, &eps)?;
            let map = VarianceMap::from_tensor(&sigma, model.cfg.grid(len))?.remove(0);
            Ok((to_waveform(&y, model.cfg.sample_rate)?, Some(map)))
        }
    }
}

/// Full inference path. Reference mode samples `y_T` from the prior and
/// gain-matches to it; self mode starts from white noise with peak
/// normalization.
pub fn synthesize(
    c: &ConditionalFeature,
    steps: usize,
    mode: GainMode,
    model: &Model,
    gain_cfg: &GainConfig,
    seed: u64,
) -> Result<(Waveform, IterationTrace)> {
    let (y_t, sigma) = initial_noise(c, mode, model, seed)?;
    let trace = iterate(&y_t, c, steps, mode, sigma.as_ref(), model, gain_cfg)?;
    Ok((trace.final_waveform().clone(), trace))
}
