//! Run configuration covering every module, with `desk` and `paper` presets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dsp::StftConfig;
use crate::error::{Error, Result};
use crate::gain::GainConfig;
use crate::losses::{DiscriminatorConfig, LossWeights, MultiResConfig};
use crate::metrics::MetricsConfig;
use crate::params::AdamConfig;
use crate::prior::EncoderConfig;
use crate::training::TrainConfig;
use crate::vocoder::{GainMode, ModelConfig, VocoderConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected desk or paper)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DspSection {
    pub sample_rate: u32,
    /// Grid of variance maps, noise sampling and the reference gain.
    pub sigma_stft: StftConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSection {
    /// Channels of the built-in log-mel features.
    pub n_mels: usize,
    /// Analysis for the built-in features; its hop is the feature frame hop.
    pub stft: StftConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainSection {
    pub beta_scale: f64,
    pub s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub weights: LossWeights,
    pub multires: MultiResConfig,
    pub discriminator: DiscriminatorConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocoderSection {
    pub network: VocoderConfig,
    /// Default number of iterations `T`.
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub dsp: DspSection,
    pub features: FeatureSection,
    pub prior: EncoderConfig,
    pub gain: GainSection,
    pub losses: LossSection,
    pub vocoder: VocoderSection,
    pub training: TrainConfig,
    pub metrics: MetricsConfig,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    /// 16 kHz, 256 samples per feature frame, small networks.
    pub fn desk() -> Self {
        Self {
            preset: Preset::Desk,
            dsp: DspSection {
                sample_rate: 16000,
                sigma_stft: StftConfig::new(512, 128, 512),
            },
            features: FeatureSection {
                n_mels: 40,
                stft: StftConfig::new(1024, 256, 1024),
            },
            prior: EncoderConfig::desk(),
            gain: GainSection {
                beta_scale: 0.95,
                s: 1e-8,
            },
            losses: LossSection {
                weights: LossWeights::default(),
                multires: MultiResConfig::default(),
                discriminator: DiscriminatorConfig {
                    scales: 3,
                    channels: vec![8, 16, 32],
                    first_kernel: 15,
                    kernel: 11,
                    stride: 4,
                },
            },
            vocoder: VocoderSection {
                network: VocoderConfig::desk(),
                iterations: 5,
            },
            training: TrainConfig::desk(),
            metrics: MetricsConfig::default(),
        }
    }

    /// 24 kHz, 480 samples per feature frame (2 x 240), batch 8, 400k steps.
    pub fn paper() -> Self {
        Self {
            preset: Preset::Paper,
            dsp: DspSection {
                sample_rate: 24000,
                sigma_stft: StftConfig::new(960, 240, 960),
            },
            features: FeatureSection {
                n_mels: 80,
                stft: StftConfig::new(1920, 480, 1920),
            },
            prior: EncoderConfig::paper(),
            gain: GainSection {
                beta_scale: 0.95,
                s: 1e-8,
            },
            losses: LossSection {
                weights: LossWeights::default(),
                multires: MultiResConfig {
                    resolutions: vec![[960, 240, 960], [1920, 480, 1920], [480, 120, 480]],
                },
                discriminator: DiscriminatorConfig::default(),
            },
            vocoder: VocoderSection {
                network: VocoderConfig::paper(),
                iterations: 5,
            },
            training: TrainConfig::paper(),
            metrics: MetricsConfig {
                stft: StftConfig {
                    normalized: false,
                    ..StftConfig::new(1920, 480, 1920)
                },
                ..MetricsConfig::default()
            },
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            sample_rate: self.dsp.sample_rate,
            feature_channels: self.features.n_mels,
            sigma_stft: self.dsp.sigma_stft,
            vocoder: self.vocoder.network.clone(),
            encoders: self.prior,
        }
    }

    pub fn gain_config(&self) -> GainConfig {
        GainConfig {
            beta_scale: self.gain.beta_scale,
            s: self.gain.s,
            stft_config: self.dsp.sigma_stft,
        }
    }

    pub fn samples_per_frame(&self) -> usize {
        self.model_config().samples_per_frame()
    }

    pub fn adam(&self) -> AdamConfig {
        self.training.adam
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.gain_config().validate()?;
        self.features.stft.validate()?;
        self.losses.weights.validate()?;
        self.losses.multires.validate()?;
        self.metrics.validate()?;
        self.training.validate()?;
        let spf = self.samples_per_frame();
        if self.features.stft.hop != spf {
            return Err(Error::Config(format!(
                "feature hop {} must equal the vocoder's {spf} samples per frame",
                self.features.stft.hop
            )));
        }
        if spf % self.dsp.sigma_stft.hop != 0 {
            return Err(Error::Config(format!(
                "sigma_stft hop {} must divide {spf} samples per frame",
                self.dsp.sigma_stft.hop
            )));
        }
        if self.vocoder.iterations == 0 || self.vocoder.iterations > self.vocoder.network.steps {
            return Err(Error::Config(format!(
                "iterations must be in 1..={}",
                self.vocoder.network.steps
            )));
        }
        if self.training.mode == GainMode::Reference && self.training.iterations > self.vocoder.network.steps {
            return Err(Error::Config("training iterations exceed the step embedding table".into()));
        }
        if self.preset == Preset::Paper {
            let t = &self.training;
            let w = &self.losses.weights;
            if t.batch_size != 8 || t.steps != 400_000 || t.iterations != 5 || w.lambda_guide != 0.1 || w.lambda_pm != 10.0 {
                return Err(Error::Config(
                    "paper preset pins batch_size=8, steps=400000, T=5, lambda_guide=0.1, lambda_pm=10".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for cfg in [RunConfig::desk(), RunConfig::paper()] {
            cfg.validate().unwrap();
            let text = cfg.to_toml_string().unwrap();
            assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
        }
        let p = RunConfig::paper();
        assert_eq!(p.training.batch_size, 8);
        assert_eq!(p.training.steps, 400_000);
        assert_eq!(p.vocoder.iterations, 5);
        assert_eq!(p.losses.weights.lambda_guide, 0.1);
        assert_eq!(p.losses.weights.lambda_pm, 10.0);
        assert_eq!(p.vocoder.network.factors, vec![5, 4, 3, 2, 2]);
        assert_eq!(p.samples_per_frame(), 480);
        assert_eq!((p.prior.prior_channels, p.prior.posterior_channels), (45, 32));
    }

    #[test]
    fn unknown_keys_and_broken_presets_are_rejected() {
        let text = RunConfig::desk().to_toml_string().unwrap();
        let extra = text.replacen("[dsp]\n", "[dsp]\nmystery = 1\n", 1);
        assert!(matches!(RunConfig::from_toml_str(&extra), Err(Error::Config(_))));
        let mut p = RunConfig::paper();
        p.training.batch_size = 4;
        assert!(p.validate().is_err());
        let mut d = RunConfig::desk();
        d.features.stft.hop = 128;
        assert!(d.validate().is_err());
    }
}
