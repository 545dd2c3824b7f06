//! Binary checkpoints holding the run config, every parameter and both
//! optimizer states.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"WTFC" | u32 version | u32 header_len | header JSON
//! u32 tensor_count
//! per tensor: u32 name_len | name | u32 ndim | u32 dims[ndim] | f32 data[]
//! u64 FNV-1a of every preceding byte
//! ```
//!
//! Tensor names carry a prefix: `gen/`, `disc/`, `gen_adam_m/`, `gen_adam_v/`,
//! `disc_adam_m/`, `disc_adam_v/`. Maps are name-ordered, so the same state
//! always produces the same bytes.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::Trainer;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::{Adam, ParamStore};

pub const MAGIC: &[u8; 4] = b"WTFC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub config: RunConfig,
    pub step: u64,
    pub gen_adam_steps: u64,
    pub disc_adam_steps: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: BTreeMap<String, StoredTensor>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn stored(t: &Tensor) -> Result<StoredTensor> {
    Ok(StoredTensor {
        dims: t.dims().to_vec(),
        data: t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?,
    })
}

fn collect_store(out: &mut BTreeMap<String, StoredTensor>, prefix: &str, store: &ParamStore) -> Result<()> {
    for (name, var) in store.iter() {
        out.insert(format!("{prefix}/{name}"), stored(var.as_tensor())?);
    }
    Ok(())
}

fn collect_adam(out: &mut BTreeMap<String, StoredTensor>, prefix: &str, opt: &Adam) -> Result<()> {
    for (name, m) in &opt.first {
        out.insert(format!("{prefix}_adam_m/{name}"), stored(m)?);
    }
    for (name, v) in &opt.second {
        out.insert(format!("{prefix}_adam_v/{name}"), stored(v)?);
    }
    Ok(())
}

/// Bounds-checked little-endian reader.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Format {
            offset: self.pos as u64,
            message: format!("truncated while reading {what}"),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        collect_store(&mut tensors, "gen", &t.gen_store)?;
        collect_store(&mut tensors, "disc", &t.disc_store)?;
        collect_adam(&mut tensors, "gen", &t.gen_opt)?;
        collect_adam(&mut tensors, "disc", &t.disc_opt)?;
        Ok(Self {
            header: CheckpointHeader {
                config: t.cfg.clone(),
                step: t.step,
                gen_adam_steps: t.gen_opt.steps,
                disc_adam_steps: t.disc_opt.steps,
            },
            tensors,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for &d in &t.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "not a checkpoint (bad magic)".into(),
            });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        if bytes.len() < 8 {
            return Err(Error::Format {
                offset: bytes.len() as u64,
                message: "missing checksum".into(),
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored_sum = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        // A short file fails on the checksum; report truncation first when the
        // structure itself runs out of bytes.
        let mut r = Reader { bytes: body, pos: 8 };
        let header_len = r.u32("header length")? as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(r.take(header_len, "header")?).map_err(|e| Error::Corrupt(format!("header: {e}")))?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32("rank")? as usize;
            let dims = (0..ndim).map(|_| r.u32("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Corrupt(format!("{name}: size overflow")))?, "tensor data")?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            tensors.insert(name, StoredTensor { dims, data });
        }
        if r.pos != body.len() {
            return Err(Error::Format {
                offset: r.pos as u64,
                message: format!("{} trailing bytes", body.len() - r.pos),
            });
        }
        if fnv1a(body) != stored_sum {
            return Err(Error::Corrupt("checksum mismatch".into()));
        }
        header.config.validate()?;
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn tensor(&self, name: &str, device: &Device, dtype: DType) -> Result<Tensor> {
        let t = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::Corrupt(format!("missing tensor {name}")))?;
        Ok(Tensor::from_vec(t.data.clone(), t.dims.as_slice(), device)?.to_dtype(dtype)?)
    }

    fn restore_store(&self, prefix: &str, store: &ParamStore) -> Result<()> {
        let expected = self.tensors.keys().filter(|k| k.starts_with(&format!("{prefix}/"))).count();
        if expected != store.len() {
            return Err(Error::Corrupt(format!(
                "{prefix}: checkpoint has {expected} parameters, model has {}",
                store.len()
            )));
        }
        for name in store.names() {
            let t = self.tensor(&format!("{prefix}/{name}"), store.device(), store.dtype())?;
            store.set(name, &t)?;
        }
        Ok(())
    }

    fn restore_adam(&self, prefix: &str, store: &ParamStore, steps: u64) -> Result<Adam> {
        let mut opt = Adam::new(self.header.config.adam());
        opt.steps = steps;
        for (key, moments) in [("m", &mut opt.first), ("v", &mut opt.second)] {
            let tag = format!("{prefix}_adam_{key}/");
            for name in self.tensors.keys().filter_map(|k| k.strip_prefix(&tag)) {
                if store.var(name).is_none() {
                    return Err(Error::Corrupt(format!("optimizer state for unknown parameter {name}")));
                }
                moments.insert(name.to_string(), self.tensor(&format!("{tag}{name}"), store.device(), store.dtype())?);
            }
        }
        Ok(opt)
    }

    /// Rebuilds a trainer that continues exactly where this one stopped.
    pub fn into_trainer(self) -> Result<Trainer> {
        let mut t = Trainer::new(self.header.config.clone())?;
        self.restore_store("gen", &t.gen_store)?;
        self.restore_store("disc", &t.disc_store)?;
        t.gen_opt = self.restore_adam("gen", &t.gen_store, self.header.gen_adam_steps)?;
        t.disc_opt = self.restore_adam("disc", &t.disc_store, self.header.disc_adam_steps)?;
        t.step = self.header.step;
        Ok(t)
    }
}

impl Trainer {
    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        Checkpoint::from_trainer(self)?.save(path)
    }

    pub fn from_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::load(path)?.into_trainer()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::Dataset;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::desk();
        cfg.training.batch_size = 1;
        cfg.training.segment_frames = 4;
        cfg.training.iterations = 2;
        cfg.training.validate_every = 0;
        cfg
    }

    #[test]
    fn bytes_are_deterministic_and_round_trip() {
        let cfg = tiny();
        let ds = Dataset::synthetic(1, 0.25, &cfg, 3).unwrap();
        let mut t = Trainer::new(cfg).unwrap();
        t.run(&ds, 1, None).unwrap();
        let a = Checkpoint::from_trainer(&t).unwrap().to_bytes().unwrap();
        let b = Checkpoint::from_trainer(&t).unwrap().to_bytes().unwrap();
        assert_eq!(a, b);
        let back = Checkpoint::from_bytes(&a).unwrap();
        assert_eq!(back.to_bytes().unwrap(), a);
        assert!(back.tensors.keys().any(|k| k.starts_with("gen_adam_v/")));
        assert!(back.tensors.keys().any(|k| k.starts_with("disc/")));
    }

    #[test]
    fn damaged_files_are_rejected() {
        let t = Trainer::new(tiny()).unwrap();
        let bytes = Checkpoint::from_trainer(&t).unwrap().to_bytes().unwrap();
        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut flipped = bytes.clone();
        let mid = flipped.len() - 100;
        flipped[mid] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Corrupt(_))));
        let mut versioned = bytes.clone();
        versioned[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&versioned), Err(Error::Version { found: 9, .. })));
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&magic), Err(Error::Format { .. })));
    }

    #[test]
    fn resumed_training_matches_uninterrupted() {
        let cfg = tiny();
        let ds = Dataset::synthetic(2, 0.25, &cfg, 4).unwrap();
        let mut straight = Trainer::new(cfg.clone()).unwrap();
        straight.run(&ds, 3, None).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.wtfc");
        let mut first = Trainer::new(cfg).unwrap();
        first.run(&ds, 2, None).unwrap();
        first.save_checkpoint(&path).unwrap();
        let mut resumed = Trainer::from_checkpoint(&path).unwrap();
        assert_eq!(resumed.step, 2);
        resumed.run(&ds, 3, None).unwrap();

        assert_eq!(resumed.gen_store.fingerprint().unwrap(), straight.gen_store.fingerprint().unwrap());
        assert_eq!(resumed.disc_store.fingerprint().unwrap(), straight.disc_store.fingerprint().unwrap());
    }
}
