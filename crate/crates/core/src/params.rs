//! Named trainable parameters and the Adam optimizer that updates them.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, hash_name, rng, stream};

#[derive(Debug, Clone)]
pub enum Init {
    Zeros,
    Const(f64),
    /// `U(-bound, bound)`
    Uniform(f64),
    Values(Vec<f64>),
}

/// A flat, name-ordered collection of trainable tensors.
///
/// Initial values are derived from `(seed, name)` only, so two stores built
/// with the same seed hold identical parameters regardless of creation order.
#[derive(Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    device: Device,
    dtype: DType,
    seed: u64,
}

impl ParamStore {
    pub fn new(seed: u64, device: &Device, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            device: device.clone(),
            dtype,
            seed,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(var) = self.vars.get(name) {
            if var.dims() != shape {
                return Err(Error::Shape(format!(
                    "parameter {name} has shape {:?}, requested {shape:?}",
                    var.dims()
                )));
            }
            return Ok(var.as_tensor().clone());
        }
        let count: usize = shape.iter().product();
        let values = match init {
            Init::Zeros => vec![0.0; count],
            Init::Const(v) => vec![v; count],
            Init::Uniform(bound) => {
                let mut r = rng(derive_seed(self.seed, &[stream::INIT, hash_name(name)]));
                (0..count).map(|_| r.random_range(-bound..=bound)).collect()
            }
            Init::Values(v) => {
                if v.len() != count {
                    return Err(Error::Shape(format!(
                        "{name}: {} initial values for shape {shape:?}",
                        v.len()
                    )));
                }
                v
            }
        };
        let tensor = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&tensor)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites a parameter in place; modules holding it see the change.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Argument(format!("unknown parameter {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::Shape(format!(
                "parameter {name} has shape {:?}, got {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    pub fn zero_all(&self) -> Result<()> {
        for var in self.vars.values() {
            var.set(&var.zeros_like()?)?;
        }
        Ok(())
    }

    /// Order-sensitive hash over every parameter's bytes.
    pub fn fingerprint(&self) -> Result<u64> {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for (name, var) in &self.vars {
            h = derive_seed(h, &[hash_name(name)]);
            for v in var.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()? {
                h = derive_seed(h, &[v.to_bits()]);
            }
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.8,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

#[derive(Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub steps: u64,
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            steps: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// One update of every parameter in `store` that received a gradient.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        self.steps += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bias1 = 1.0 - beta1.powi(self.steps as i32);
        let bias2 = 1.0 - beta2.powi(self.steps as i32);
        for (name, var) in store.iter() {
            let Some(grad) = grads.get(var.as_tensor()) else {
                continue;
            };
            // candle gradients keep their op graph; holding them in the
            // moments would retain every step's forward pass
            let grad = &grad.detach();
            let m = match self.first.get(name) {
                Some(m) => ((m * beta1)? + (grad * (1.0 - beta1))?)?,
                None => (grad * (1.0 - beta1))?,
            };
            let v = match self.second.get(name) {
                Some(v) => ((v * beta2)? + (grad.sqr()? * (1.0 - beta2))?)?,
                None => (grad.sqr()? * (1.0 - beta2))?,
            };
            let update = ((&m / bias1)? / ((&v / bias2)?.sqrt()? + eps)?)?;
            var.set(&(var.as_tensor() - (update * lr)?)?)?;
            self.first.insert(name.to_string(), m.detach());
            self.second.insert(name.to_string(), v.detach());
        }
        Ok(())
    }
}
