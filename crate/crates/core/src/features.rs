//! Conditional features: file ingestion, the pseudo-SSL log-mel adapter, 2x
//! temporal upsampling and projection onto the spectrogram frequency axis.
//!
//! # WTFF layout (little-endian)
//!
//! | offset | size | field                      |
//! |--------|------|----------------------------|
//! | 0      | 4    | magic `b"WTFF"`            |
//! | 4      | 4    | version (`u32`, = 1)       |
//! | 8      | 4    | frames `K_c` (`u32`)       |
//! | 12     | 4    | channels `C` (`u32`)       |
//! | 16     | 8    | frame rate (`f64`, Hz)     |
//! | 24     | 4·K_c·C | row-major `f32` payload |

use std::path::Path;

use candle_core::{Device, Tensor};
use ndarray::Array2;

use crate::dsp::{mel_filterbank, power_spectrogram, StftConfig, Waveform};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{Init, ParamStore};

pub const WTFF_MAGIC: &[u8; 4] = b"WTFF";
pub const WTFF_VERSION: u32 = 1;
const WTFF_HEADER_LEN: usize = 24;

/// Floor inside the pseudo-SSL log compression.
pub const LOG_EPS: f64 = 1e-5;

/// `K_c x C` feature sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalFeature {
    pub frames: Array2<f32>,
    pub frame_rate: f64,
    pub source_tag: String,
}

impl ConditionalFeature {
    pub fn new(frames: Array2<f32>, frame_rate: f64, source_tag: impl Into<String>) -> Result<Self> {
        if frames.nrows() == 0 || frames.ncols() == 0 {
            return Err(Error::Shape("feature matrix must be at least 1x1".into()));
        }
        if !(frame_rate > 0.0 && frame_rate.is_finite()) {
            return Err(Error::Argument(format!("invalid frame rate {frame_rate}")));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                component: "conditional feature".into(),
            });
        }
        Ok(Self {
            frames,
            frame_rate,
            source_tag: source_tag.into(),
        })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn n_channels(&self) -> usize {
        self.frames.ncols()
    }

    /// Crops trailing frames or repeats the last one to reach `n` frames.
    pub fn fit_frames(&self, n: usize) -> Result<Self> {
        let k = self.n_frames();
        let frames = Array2::from_shape_fn((n, self.n_channels()), |(i, c)| {
            self.frames[[i.min(k - 1), c]]
        });
        Self::new(frames, self.frame_rate, self.source_tag.clone())
    }

    /// `(1, K_c, C)` tensor.
    pub fn to_tensor(&self, store: &ParamStore) -> Result<Tensor> {
        features_tensor(std::slice::from_ref(self), store.device(), store.dtype())
    }
}

/// Stacks equally-sized features into `(B, K_c, C)`.
pub fn features_tensor(
    features: &[ConditionalFeature],
    device: &Device,
    dtype: candle_core::DType,
) -> Result<Tensor> {
    let first = features
        .first()
        .ok_or_else(|| Error::Argument("empty feature batch".into()))?;
    let (k, c) = first.frames.dim();
    let mut data = Vec::with_capacity(features.len() * k * c);
    for f in features {
        if f.frames.dim() != (k, c) {
            return Err(Error::Shape(format!(
                "feature batch mixes {:?} and {:?}",
                (k, c),
                f.frames.dim()
            )));
        }
        data.extend(f.frames.iter().copied());
    }
    Ok(Tensor::from_vec(data, (features.len(), k, c), device)?.to_dtype(dtype)?)
}

pub fn encode_feature_file(feature: &ConditionalFeature) -> Vec<u8> {
    let (k, c) = feature.frames.dim();
    let mut out = Vec::with_capacity(WTFF_HEADER_LEN + 4 * k * c);
    out.extend_from_slice(WTFF_MAGIC);
    out.extend_from_slice(&WTFF_VERSION.to_le_bytes());
    out.extend_from_slice(&(k as u32).to_le_bytes());
    out.extend_from_slice(&(c as u32).to_le_bytes());
    out.extend_from_slice(&feature.frame_rate.to_le_bytes());
    for v in feature.frames.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_feature_file(bytes: &[u8], source_tag: &str) -> Result<ConditionalFeature> {
    let format = |offset: usize, message: String| Error::Format {
        offset: offset as u64,
        message,
    };
    if bytes.len() < WTFF_HEADER_LEN {
        return Err(format(
            bytes.len(),
            format!("truncated header ({} of {WTFF_HEADER_LEN} bytes)", bytes.len()),
        ));
    }
    if &bytes[0..4] != WTFF_MAGIC {
        return Err(format(0, "bad magic, expected \"WTFF\"".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != WTFF_VERSION {
        return Err(format(4, format!("unsupported version {version}")));
    }
    let k = u32_at(8) as usize;
    let c = u32_at(12) as usize;
    if k == 0 || c == 0 {
        return Err(format(8, format!("empty dimensions {k}x{c}")));
    }
    let frame_rate = f64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes"));
    let expected = k
        .checked_mul(c)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| format(8, "dimension overflow".into()))?;
    let payload = &bytes[WTFF_HEADER_LEN..];
    if payload.len() != expected {
        return Err(format(
            WTFF_HEADER_LEN + payload.len().min(expected),
            format!(
                "payload is {} bytes, header declares {k}x{c} ({expected} bytes)",
                payload.len()
            ),
        ));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(format(WTFF_HEADER_LEN + 4 * i, "non-finite value".into()));
    }
    let frames = Array2::from_shape_vec((k, c), values).expect("length checked");
    ConditionalFeature::new(frames, frame_rate, source_tag)
        .map_err(|e| format(16, e.to_string()))
}

pub fn write_feature_file(path: impl AsRef<Path>, feature: &ConditionalFeature) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_feature_file(feature)).map_err(|e| Error::io(path, e))
}

/// Loads a WTFF file; the source tag is `external:<file stem>`.
pub fn load_feature_file(path: impl AsRef<Path>) -> Result<ConditionalFeature> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_feature_file(&bytes, &format!("external:{stem}"))
}

/// Log-mel spectrogram standing in for self-supervised features.
pub fn pseudo_ssl(w: &Waveform, n_mels: usize, cfg: &StftConfig) -> Result<ConditionalFeature> {
    let fb = mel_filterbank(n_mels, cfg, w.sample_rate())?;
    let power = power_spectrogram(w, cfg)?;
    // (n_mels x F)(F x K) -> transpose to K x n_mels
    let mel = fb.dot(&power.bins);
    let frames = mel.t().mapv(|v| (v + LOG_EPS).ln() as f32);
    ConditionalFeature::new(
        frames,
        w.sample_rate() as f64 / cfg.hop as f64,
        "pseudo-mel",
    )
}

/// Learned 2x temporal upsampler: a transposed convolution with kernel
/// `(4, 1)`, stride `(2, 1)` and padding `(1, 0)` over the `(time, channel)`
/// plane, one input and one output channel.
#[derive(Debug, Clone)]
pub struct FeatureUpsampler {
    /// 4 taps
    pub kernel: Tensor,
    /// scalar
    pub bias: Tensor,
}

/// Taps that make the transposed convolution a linear interpolator.
pub const INTERPOLATING_KERNEL: [f64; 4] = [0.5, 1.0, 0.5, 0.0];

impl FeatureUpsampler {
    pub fn new(store: &mut ParamStore, name: &str) -> Result<Self> {
        let kernel = store.get(
            &format!("{name}.kernel"),
            &[4],
            Init::Values(INTERPOLATING_KERNEL.to_vec()),
        )?;
        let bias = store.get(&format!("{name}.bias"), &[1], Init::Zeros)?;
        Ok(Self { kernel, bias })
    }

    /// `(B, M, C)` to `(B, 2M, C)`.
    ///
    /// Output frame `o` collects `kernel[k] * x[i]` for every `o = 2i + k - 1`:
    /// even frames use taps 1 and 3, odd frames taps 0 and 2.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, m, c) = x.dims3()?;
        let tap = |i: usize| self.kernel.narrow(0, i, 1);
        let prev = x.pad_with_zeros(1, 1, 0)?.narrow(1, 0, m)?;
        let next = x.pad_with_zeros(1, 0, 1)?.narrow(1, 1, m)?;
        let even = (x.broadcast_mul(&tap(1)?)? + prev.broadcast_mul(&tap(3)?)?)?;
        let odd = (x.broadcast_mul(&tap(2)?)? + next.broadcast_mul(&tap(0)?)?)?;
        let out = Tensor::stack(&[even, odd], 2)?.reshape((b, 2 * m, c))?;
        Ok(out.broadcast_add(&self.bias)?)
    }
}

pub enum UpsampleMode<'a> {
    Linear,
    Learned(&'a FeatureUpsampler),
}

pub fn upsample_2x(c: &ConditionalFeature, mode: UpsampleMode<'_>) -> Result<ConditionalFeature> {
    let (k, ch) = c.frames.dim();
    let frames = match mode {
        UpsampleMode::Linear => Array2::from_shape_fn((2 * k, ch), |(o, j)| {
            let i = o / 2;
            if o % 2 == 0 {
                c.frames[[i, j]]
            } else {
                let next = c.frames[[(i + 1).min(k - 1), j]];
                0.5 * (c.frames[[i, j]] + next)
            }
        }),
        UpsampleMode::Learned(up) => {
            let x = features_tensor(std::slice::from_ref(c), up.kernel.device(), up.kernel.dtype())?;
            let y = up.forward(&x)?.squeeze(0)?.to_dtype(candle_core::DType::F32)?;
            Array2::from_shape_vec((2 * k, ch), y.flatten_all()?.to_vec1::<f32>()?)
                .expect("upsampler preserves channel count")
        }
    };
    ConditionalFeature::new(frames, 2.0 * c.frame_rate, c.source_tag.clone())
}

/// Per-frame linear projection of `C` feature channels onto `F` frequency rows.
#[derive(Debug, Clone)]
pub struct FreqAlign {
    pub linear: Linear,
}

impl FreqAlign {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, n_freqs: usize) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(store, name, channels, n_freqs)?,
        })
    }

    pub fn n_freqs(&self) -> usize {
        self.linear.weight.dims()[0]
    }

    /// `(B, M, C)` to `(B, F, M)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c_in = self.linear.weight.dims()[1];
        let c = x.dims3()?.2;
        if c != c_in {
            return Err(Error::Config(format!(
                "alignment expects {c_in} feature channels, got {c}"
            )));
        }
        Ok(self.linear.forward(x)?.transpose(1, 2)?.contiguous()?)
    }
}

/// Projects `c` to an `F x K_c` grid.
pub fn align_to_freq(c: &ConditionalFeature, n_freqs: usize, params: &FreqAlign) -> Result<Array2<f64>> {
    if params.n_freqs() != n_freqs {
        return Err(Error::Config(format!(
            "alignment maps to {} rows, requested {n_freqs}",
            params.n_freqs()
        )));
    }
    let w = &params.linear.weight;
    let x = features_tensor(std::slice::from_ref(c), w.device(), w.dtype())?;
    let y = params.forward(&x)?.squeeze(0)?.to_dtype(candle_core::DType::F64)?;
    let k = c.n_frames();
    let out = Array2::from_shape_vec((n_freqs, k), y.flatten_all()?.to_vec1::<f64>()?)
        .expect("projection shape");
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            component: "aligned features".into(),
        });
    }
    Ok(out)
}

/// Fits `(B, F, M)` to `K` frames along the last axis by cropping or
/// repeating the final frame.
pub fn fit_time_axis(x: &Tensor, k: usize) -> Result<Tensor> {
    let m = x.dim(2)?;
    if m == k {
        Ok(x.clone())
    } else if m > k {
        Ok(x.narrow(2, 0, k)?)
    } else {
        let (b, f, _) = x.dims3()?;
        let last = x.narrow(2, m - 1, 1)?.broadcast_as((b, f, k - m))?;
        Ok(Tensor::cat(&[x, &last], 2)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn feature(k: usize, c: usize, seed: u64) -> ConditionalFeature {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = Array2::from_shape_fn((k, c), |_| rng.random_range(-3.0f32..3.0));
        ConditionalFeature::new(frames, 62.5, "test").unwrap()
    }

    #[test]
    fn decodes_format_definition() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"WTFF");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&50.0f64.to_le_bytes());
        for v in 0..6 {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let f = decode_feature_file(&bytes, "x").unwrap();
        assert_eq!(f.frames, ndarray::arr2(&[[0.0f32, 1.0, 2.0], [3.0, 4.0, 5.0]]));
        assert_eq!(f.frame_rate, 50.0);

        let truncated = &bytes[..bytes.len() - 3];
        match decode_feature_file(truncated, "x") {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 24 + 21),
            other => panic!("{other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_feature_file(&bad, "x"), Err(Error::Format { offset: 0, .. })));
        let mut longer = bytes.clone();
        longer.extend_from_slice(&[0, 0, 0, 0]);
        assert!(decode_feature_file(&longer, "x").is_err());
        assert!(decode_feature_file(&bytes[..10], "x").is_err());
    }

    #[test]
    fn file_round_trip_sets_tag() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("utt01.wtff");
        let f = feature(7, 5, 1);
        write_feature_file(&path, &f).unwrap();
        let back = load_feature_file(&path).unwrap();
        assert_eq!(back.frames, f.frames);
        assert_eq!(back.source_tag, "external:utt01");
    }

    proptest! {
        #[test]
        fn wtff_round_trip_is_bitwise(k in 1usize..12, c in 1usize..9, seed in any::<u64>(), rate in 1.0f64..1000.0) {
            let mut f = feature(k, c, seed);
            f.frame_rate = rate;
            let back = decode_feature_file(&encode_feature_file(&f), "t").unwrap();
            prop_assert_eq!(back.frame_rate.to_bits(), rate.to_bits());
            for (a, b) in f.frames.iter().zip(back.frames.iter()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn pseudo_ssl_silence_and_gain() {
        let cfg = StftConfig::new(1024, 256, 1024);
        let silence = Waveform::zeros(4096, 16000).unwrap();
        let f = pseudo_ssl(&silence, 40, &cfg).unwrap();
        assert_eq!(f.n_frames(), cfg.n_frames(4096));
        assert_eq!(f.frame_rate, 62.5);
        let floor = (LOG_EPS).ln() as f32;
        assert!(f.frames.iter().all(|&v| v == floor));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s: Vec<f32> = (0..4096).map(|_| rng.random_range(-0.5f32..0.5)).collect();
        let quiet = Waveform::new(s, 16000).unwrap();
        let loud = quiet.scaled(10.0).unwrap();
        let a = pseudo_ssl(&quiet, 40, &cfg).unwrap();
        let b = pseudo_ssl(&loud, 40, &cfg).unwrap();
        let shift = 100f64.ln();
        for (x, y) in a.frames.iter().zip(b.frames.iter()) {
            // mel energies here are >= 0.2, so eps perturbs by < 1e-4
            assert!(((y - x) as f64 - shift).abs() < 1e-3, "{x} {y}");
        }
    }

    #[test]
    fn linear_upsampling() {
        let c = ConditionalFeature::new(ndarray::arr2(&[[0.0f32], [2.0]]), 10.0, "t").unwrap();
        let up = upsample_2x(&c, UpsampleMode::Linear).unwrap();
        assert_eq!(up.frames, ndarray::arr2(&[[0.0f32], [1.0], [2.0], [2.0]]));
        assert_eq!(up.frame_rate, 20.0);
        let one = ConditionalFeature::new(ndarray::arr2(&[[1.5f32, -1.0]]), 10.0, "t").unwrap();
        let up = upsample_2x(&one, UpsampleMode::Linear).unwrap();
        assert_eq!(up.frames, ndarray::arr2(&[[1.5f32, -1.0], [1.5, -1.0]]));
    }

    /// Scatter form of a stride-2, padding-1 transposed convolution.
    fn transposed_conv_oracle(x: &Array2<f32>, kernel: &[f64; 4], bias: f64) -> Array2<f64> {
        let (m, c) = x.dim();
        let mut out = Array2::from_elem((2 * m, c), bias);
        for i in 0..m {
            for (k, w) in kernel.iter().enumerate() {
                let o = 2 * i as isize + k as isize - 1;
                if o >= 0 && (o as usize) < 2 * m {
                    for j in 0..c {
                        out[[o as usize, j]] += w * x[[i, j]] as f64;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn learned_upsampling_matches_scatter_oracle() {
        let mut store = ParamStore::new(0, &Device::Cpu, DType::F64);
        let up = FeatureUpsampler::new(&mut store, "up").unwrap();
        let c = feature(6, 3, 8);
        let out = upsample_2x(&c, UpsampleMode::Learned(&up)).unwrap();
        let oracle = transposed_conv_oracle(&c.frames, &INTERPOLATING_KERNEL, 0.0);
        for i in 0..6 {
            for j in 0..3 {
                assert_eq!(out.frames[[2 * i, j]], c.frames[[i, j]]);
            }
        }
        for (a, b) in out.frames.iter().zip(oracle.iter()) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }

        let kernel = [0.3, -0.7, 1.1, 0.25];
        store.set("up.kernel", &Tensor::new(&kernel, &Device::Cpu).unwrap()).unwrap();
        store.set("up.bias", &Tensor::new(&[0.4f64], &Device::Cpu).unwrap()).unwrap();
        let out = upsample_2x(&c, UpsampleMode::Learned(&up)).unwrap();
        let oracle = transposed_conv_oracle(&c.frames, &kernel, 0.4);
        for (a, b) in out.frames.iter().zip(oracle.iter()) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
    }

    #[test]
    fn alignment_identity_zero_and_matmul_oracle() {
        let dev = Device::Cpu;
        let c = feature(5, 4, 2);

        let mut store = ParamStore::new(0, &dev, DType::F64);
        let align = FreqAlign::new(&mut store, "a", 4, 4).unwrap();
        store.set("a.weight", &Tensor::eye(4, DType::F64, &dev).unwrap()).unwrap();
        let out = align_to_freq(&c, 4, &align).unwrap();
        for f in 0..4 {
            for k in 0..5 {
                assert_eq!(out[[f, k]], c.frames[[k, f]] as f64);
            }
        }
        store.zero_all().unwrap();
        assert!(align_to_freq(&c, 4, &align).unwrap().iter().all(|&v| v == 0.0));

        let mut store = ParamStore::new(9, &dev, DType::F64);
        let align = FreqAlign::new(&mut store, "a", 4, 7).unwrap();
        let out = align_to_freq(&c, 7, &align).unwrap();
        let w = align.linear.weight.to_vec2::<f64>().unwrap();
        for f in 0..7 {
            for k in 0..5 {
                let mut acc = 0.0;
                for j in 0..4 {
                    acc += w[f][j] * c.frames[[k, j]] as f64;
                }
                assert!((out[[f, k]] - acc).abs() < 1e-6);
            }
        }
        assert!(matches!(align_to_freq(&c, 8, &align), Err(Error::Config(_))));
        assert!(matches!(align_to_freq(&feature(5, 3, 1), 7, &align), Err(Error::Config(_))));
    }

    #[test]
    fn fit_frames_and_time_axis() {
        let c = feature(3, 2, 4);
        let longer = c.fit_frames(5).unwrap();
        assert_eq!(longer.frames.row(4), c.frames.row(2));
        assert_eq!(c.fit_frames(2).unwrap().frames.row(1), c.frames.row(1));
        let x = Tensor::arange(0.0f64, 6.0, &Device::Cpu).unwrap().reshape((1, 2, 3)).unwrap();
        let y = fit_time_axis(&x, 5).unwrap().to_vec3::<f64>().unwrap();
        assert_eq!(y[0][1], vec![3.0, 4.0, 5.0, 5.0, 5.0]);
        assert_eq!(fit_time_axis(&x, 2).unwrap().dims(), &[1, 2, 2]);
    }
}
