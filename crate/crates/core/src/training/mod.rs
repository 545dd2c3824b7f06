//! Joint training of the vocoder, both variance encoders and the
//! discriminator.
//!
//! Each step runs the generator once, updates the discriminator on the
//! detached outputs, then updates every generator-side module against the
//! freshly updated discriminator.

pub mod checkpoint;
pub mod data;

use std::io::Write;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dsp::tensor::TensorStft;
use crate::error::{Error, Result};
use crate::losses::{
    guide_loss_tensor, prior_matching_loss_tensor, total_generator_loss, wavefit_discriminator_loss,
    wavefit_generator_terms, Discriminator, LossReport, WaveFitTerms,
};
use crate::params::{Adam, AdamConfig, ParamStore};
use crate::prior::shape_noise_tensor;
use crate::vocoder::{iterate_tensor, GainMode, GainOp, Model};

pub use data::{sample_batch, synthetic_utterance, Batch, Dataset, Utterance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    /// Iterations `T` unrolled during training.
    pub iterations: usize,
    /// Crop length in feature frames.
    pub segment_frames: usize,
    pub lr_gen: f64,
    pub lr_disc: f64,
    /// Both rates follow a cosine from their initial value down to this
    /// fraction of it at `steps`.
    pub lr_final_ratio: f64,
    /// `reference`: trainable prior and reference gain. `self`: white-noise
    /// start with peak normalization.
    pub mode: GainMode,
    pub seed: u64,
    /// Steps between validation records (0 disables them).
    pub validate_every: u64,
    pub adam: AdamConfig,
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            batch_size: 2,
            steps: 1150,
            iterations: 5,
            segment_frames: 16,
            lr_gen: 1e-3,
            lr_disc: 2e-4,
            lr_final_ratio: 0.1,
            mode: GainMode::Reference,
            seed: 1234,
            validate_every: 100,
            adam: AdamConfig::default(),
        }
    }

    pub fn paper() -> Self {
        Self {
            batch_size: 8,
            steps: 400_000,
            segment_frames: 64,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.iterations == 0 || self.segment_frames == 0 {
            return Err(Error::Config("batch_size, iterations and segment_frames must be positive".into()));
        }
        if !(self.lr_gen > 0.0 && self.lr_disc > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lr_final_ratio) {
            return Err(Error::Config("lr_final_ratio must be in [0, 1]".into()));
        }
        Ok(())
    }

    /// Cosine-decayed `(gen, disc)` learning rates at `step`.
    pub fn learning_rates(&self, step: u64) -> (f64, f64) {
        let progress = if self.steps == 0 {
            1.0
        } else {
            (step as f64 / self.steps as f64).min(1.0)
        };
        let factor = self.lr_final_ratio + (1.0 - self.lr_final_ratio) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        (self.lr_gen * factor, self.lr_disc * factor)
    }
}

/// One JSON-lines log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr_gen: f64,
    pub lr_disc: f64,
    pub losses: LossReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_stft: Option<f64>,
}

/// Tensors produced by one generator pass.
#[derive(Debug, Clone)]
pub struct GeneratorForward {
    /// `y_{T-1} .. y_0`, each `(B, D)`.
    pub outputs: Vec<Tensor>,
    pub sigma_post: Option<Tensor>,
    pub sigma_prior: Option<Tensor>,
    /// `|X_0|²` on the variance grid, `(B, F, K)`.
    pub x0_power: Tensor,
}

#[derive(Debug, Clone)]
pub struct GeneratorLosses {
    pub wavefit: WaveFitTerms,
    pub pm: Tensor,
    pub guide: Tensor,
    pub total: Tensor,
}

/// All trainable state.
pub struct Trainer {
    pub cfg: RunConfig,
    pub gen_store: ParamStore,
    pub disc_store: ParamStore,
    pub model: Model,
    pub disc: Discriminator,
    pub gen_opt: Adam,
    pub disc_opt: Adam,
    /// Completed steps.
    pub step: u64,
    loss_ops: Vec<TensorStft>,
    sigma_op: TensorStft,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn check_finite(component: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            component: component.into(),
        })
    }
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        Self::with_dtype(cfg, DType::F32)
    }

    pub fn with_dtype(cfg: RunConfig, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let device = Device::Cpu;
        let seed = cfg.training.seed;
        let mut gen_store = ParamStore::new(seed, &device, dtype);
        let mut disc_store = ParamStore::new(crate::rng::derive_seed(seed, &[crate::rng::stream::INIT]), &device, dtype);
        let model = Model::new(&mut gen_store, &cfg.model_config())?;
        let disc = Discriminator::new(&mut disc_store, "disc", &cfg.losses.discriminator)?;
        let loss_ops = cfg.losses.multires.operators(&device, dtype)?;
        let sigma_op = TensorStft::new(cfg.dsp.sigma_stft, &device, dtype)?;
        Ok(Self {
            gen_opt: Adam::new(cfg.training.adam),
            disc_opt: Adam::new(cfg.training.adam),
            cfg,
            gen_store,
            disc_store,
            model,
            disc,
            step: 0,
            loss_ops,
            sigma_op,
        })
    }

    pub fn batch(&self, ds: &Dataset, counter: u64) -> Result<Batch> {
        let t = &self.cfg.training;
        sample_batch(
            ds,
            t.batch_size,
            t.segment_frames,
            self.cfg.samples_per_frame(),
            t.seed,
            counter,
            self.gen_store.device(),
            self.gen_store.dtype(),
        )
    }

    /// Encoders, noise sampling and the unrolled iteration.
    pub fn forward_generator(&self, batch: &Batch) -> Result<GeneratorForward> {
        let len = batch.x0.dim(1)?;
        let c_up = self.model.upsample(&batch.features)?;
        let cond = Model::conditioning(&c_up)?;
        let x0_power = self.sigma_op.power(&batch.x0)?.detach();
        let steps = self.cfg.training.iterations;
        match self.cfg.training.mode {
            GainMode::Reference => {
                let sigma_post = self.model.posterior.encode(&c_up, &x0_power)?;
                let sigma_prior = self.model.prior_sigma(&c_up, len)?;
                let y_t = shape_noise_tensor(&self.sigma_op, &sigma_post, &batch.noise)?;
                let gain = GainOp::Reference {
                    op: &self.sigma_op,
                    sigma: &sigma_post,
                    s: self.cfg.gain.s,
                };
                let trace = iterate_tensor(&self.model.vocoder, &y_t, &cond, steps, &gain)?;
                Ok(GeneratorForward {
                    outputs: trace.outputs,
                    sigma_post: Some(sigma_post),
                    sigma_prior: Some(sigma_prior),
                    x0_power,
                })
            }
            GainMode::SelfGain => {
                let gain = GainOp::SelfGain {
                    beta_scale: self.cfg.gain.beta_scale,
                };
                let trace = iterate_tensor(&self.model.vocoder, &batch.noise, &cond, steps, &gain)?;
                Ok(GeneratorForward {
                    outputs: trace.outputs,
                    sigma_post: None,
                    sigma_prior: None,
                    x0_power,
                })
            }
        }
    }

    /// Generator-side objective against the current discriminator.
    pub fn generator_losses(&self, batch: &Batch, fwd: &GeneratorForward) -> Result<GeneratorLosses> {
        let weights = &self.cfg.losses.weights;
        let wavefit = wavefit_generator_terms(&batch.x0, &fwd.outputs, &self.disc, &self.loss_ops, weights)?;
        let zero = || Tensor::new(0f32, self.gen_store.device())?.to_dtype(self.gen_store.dtype());
        let (pm, guide) = match (&fwd.sigma_post, &fwd.sigma_prior) {
            (Some(post), Some(prior)) => (
                prior_matching_loss_tensor(post, prior)?,
                guide_loss_tensor(post, &fwd.x0_power, weights.lambda_guide, weights.power_floor)?,
            ),
            _ => (zero()?, zero()?),
        };
        let total = total_generator_loss(&wavefit.gen_total, &pm, &guide, weights)?;
        Ok(GeneratorLosses {
            wavefit,
            pm,
            guide,
            total,
        })
    }

    /// Discriminator half-step on detached generator outputs.
    pub fn update_discriminator(&mut self, batch: &Batch, fwd: &GeneratorForward, lr: f64) -> Result<f64> {
        let fakes: Vec<Tensor> = fwd.outputs.iter().map(Tensor::detach).collect();
        let loss = wavefit_discriminator_loss(&batch.x0, &fakes, &self.disc)?;
        let value = check_finite("gan_d", scalar(&loss)?)?;
        let grads = loss.backward()?;
        self.disc_opt.step(&self.disc_store, &grads, lr)?;
        Ok(value)
    }

    /// Generator half-step; returns the scalar components.
    pub fn update_generator(&mut self, batch: &Batch, fwd: &GeneratorForward, lr: f64) -> Result<(GeneratorLosses, [f64; 6])> {
        let losses = self.generator_losses(batch, fwd)?;
        let values = [
            check_finite("gan_g", scalar(&losses.wavefit.gan_g)?)?,
            check_finite("feat_match", scalar(&losses.wavefit.feat_match)?)?,
            check_finite("stft", scalar(&losses.wavefit.stft)?)?,
            check_finite("pm", scalar(&losses.pm)?)?,
            check_finite("guide", scalar(&losses.guide)?)?,
            check_finite("gen_total", scalar(&losses.total)?)?,
        ];
        let grads = losses.total.backward()?;
        self.gen_opt.step(&self.gen_store, &grads, lr)?;
        Ok((losses, values))
    }

    /// One full optimization step on `batch`.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepRecord> {
        let (lr_gen, lr_disc) = self.cfg.training.learning_rates(self.step);
        let fwd = self.forward_generator(batch)?;
        let gan_d = self.update_discriminator(batch, &fwd, lr_disc)?;
        let (_, [gan_g, feat_match, stft, pm, guide, gen_total]) = self.update_generator(batch, &fwd, lr_gen)?;
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            lr_gen,
            lr_disc,
            losses: LossReport {
                gan_g,
                gan_d,
                feat_match,
                stft,
                pm,
                guide,
                gen_total,
                disc_total: gan_d,
            },
            validation_stft: None,
        })
    }

    /// Multi-resolution STFT term on a fixed held-out draw, without updates.
    pub fn validation_stft(&self, ds: &Dataset) -> Result<f64> {
        let batch = self.batch(ds, u64::MAX)?;
        let fwd = self.forward_generator(&batch)?;
        let outputs: Vec<Tensor> = fwd.outputs.iter().map(Tensor::detach).collect();
        let terms = wavefit_generator_terms(&batch.x0, &outputs, &self.disc, &self.loss_ops, &self.cfg.losses.weights)?;
        scalar(&terms.stft)
    }

    /// Trains until `until` completed steps, writing one JSON line per step.
    pub fn run(&mut self, ds: &Dataset, until: u64, mut log: Option<&mut dyn Write>) -> Result<Vec<StepRecord>> {
        let mut records = Vec::new();
        while self.step < until {
            let batch = self.batch(ds, self.step)?;
            let mut record = self.train_step(&batch)?;
            let every = self.cfg.training.validate_every;
            if every > 0 && record.step % every == 0 {
                record.validation_stft = Some(self.validation_stft(ds)?);
            }
            if let Some(w) = log.as_deref_mut() {
                let line = serde_json::to_string(&record)?;
                writeln!(w, "{line}").map_err(|e| Error::io("training log", e))?;
            }
            log::debug!("step {} stft {:.4} pm {:.1} guide {:.3}", record.step, record.losses.stft, record.losses.pm, record.losses.guide);
            records.push(record);
        }
        Ok(records)
    }
}

impl Trainer {
    /// Reference synthesis needs a prior trained alongside the vocoder; a
    /// self-gain run leaves it at its initialization.
    pub fn check_inference_mode(&self, mode: GainMode) -> Result<()> {
        if mode == GainMode::Reference && self.cfg.training.mode != GainMode::Reference {
            return Err(Error::Argument(
                "checkpoint was trained with self gain and has no trained prior; use --mode self".into(),
            ));
        }
        Ok(())
    }
}

/// Trains a fresh model for `cfg.training.steps` steps.
pub fn train(ds: &Dataset, cfg: RunConfig, log: Option<&mut dyn Write>) -> Result<Trainer> {
    if ds.is_empty() {
        return Err(Error::Argument("dataset is empty".into()));
    }
    let mut trainer = Trainer::new(cfg)?;
    let steps = trainer.cfg.training.steps;
    trainer.run(ds, steps, log)?;
    Ok(trainer)
}
