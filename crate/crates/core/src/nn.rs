//! Thin layer wrappers over candle ops, parameterized from a [`ParamStore`].

use candle_core::Tensor;

use crate::error::Result;
use crate::params::{Init, ParamStore};

pub const LEAKY_SLOPE: f64 = 0.2;

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok((x.relu()? - (x.neg()?.relu()? * slope)?)?)
}

/// `ln(1 + e^x)` written so both branches stay finite.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

fn fan_in_bound(fan_in: usize) -> Init {
    Init::Uniform(1.0 / (fan_in as f64).sqrt())
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub padding: usize,
    pub stride: usize,
    pub dilation: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
    ) -> Result<Self> {
        let weight = store.get(
            &format!("{name}.weight"),
            &[c_out, c_in, kernel],
            fan_in_bound(c_in * kernel),
        )?;
        let bias = store.get(&format!("{name}.bias"), &[c_out], Init::Zeros)?;
        let padding = if stride == 1 {
            dilation * (kernel - 1) / 2
        } else {
            kernel / 2
        };
        Ok(Self {
            weight,
            bias,
            padding,
            stride,
            dilation,
        })
    }

    /// `(B, C_in, L)` to `(B, C_out, L')`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv1d(&self.weight, self.padding, self.stride, self.dilation, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub padding: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        bias_init: Init,
    ) -> Result<Self> {
        let weight = store.get(
            &format!("{name}.weight"),
            &[c_out, c_in, kernel, kernel],
            fan_in_bound(c_in * kernel * kernel),
        )?;
        let bias = store.get(&format!("{name}.bias"), &[c_out], bias_init)?;
        Ok(Self {
            weight,
            bias,
            padding: kernel / 2,
            stride,
        })
    }

    /// `(B, C_in, H, W)` to `(B, C_out, H', W')`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }
}

/// Kernel 4, stride 2, padding 1: doubles both spatial dimensions.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvTranspose2d {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        let weight = store.get(
            &format!("{name}.weight"),
            &[c_in, c_out, 4, 4],
            fan_in_bound(c_in * 4),
        )?;
        let bias = store.get(&format!("{name}.bias"), &[c_out], Init::Zeros)?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv_transpose2d(&self.weight, 1, 0, 2, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }
}

/// Applies `W x + b` to the last dimension.
#[derive(Debug, Clone)]
pub struct Linear {
    /// `(out, in)`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let weight = store.get(&format!("{name}.weight"), &[d_out, d_in], fan_in_bound(d_in))?;
        let bias = store.get(&format!("{name}.bias"), &[d_out], Init::Zeros)?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(y.broadcast_add(&self.bias)?)
    }
}

/// Nearest-neighbour upsampling along the last axis of `(B, C, L)`.
pub fn repeat_last(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (b, c, l) = x.dims3()?;
    Ok(x
        .unsqueeze(3)?
        .broadcast_as((b, c, l, factor))?
        .reshape((b, c, l * factor))?)
}

/// Mean pooling with window = stride = `factor` along the last axis.
pub fn mean_pool_last(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (b, c, l) = x.dims3()?;
    let l = l / factor * factor;
    Ok(x
        .narrow(2, 0, l)?
        .reshape((b, c, l / factor, factor))?
        .mean(3)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn activations_match_closed_forms() {
        let x = Tensor::new(&[-30.0f64, -1.0, 0.0, 2.0, 40.0], &Device::Cpu).unwrap();
        let sp = softplus(&x).unwrap().to_vec1::<f64>().unwrap();
        for (v, s) in [-30.0f64, -1.0, 0.0, 2.0, 40.0].iter().zip(sp) {
            assert!((s - (1.0 + v.exp()).ln()).abs() < 1e-12);
        }
        let lr = leaky_relu(&x, 0.2).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(lr, vec![-6.0, -0.2, 0.0, 2.0, 40.0]);
    }

    #[test]
    fn pooling_and_repeat() {
        let x = Tensor::arange(0.0f64, 6.0, &Device::Cpu).unwrap().reshape((1, 1, 6)).unwrap();
        let up = repeat_last(&x, 2).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(up, vec![0., 0., 1., 1., 2., 2., 3., 3., 4., 4., 5., 5.]);
        let down = mean_pool_last(&x, 3).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(down, vec![1.0, 4.0]);
        let mut store = ParamStore::new(0, &Device::Cpu, DType::F64);
        let t = ConvTranspose2d::new(&mut store, "t", 2, 3).unwrap();
        let y = t.forward(&Tensor::ones((1, 2, 5, 7), DType::F64, &Device::Cpu).unwrap()).unwrap();
        assert_eq!(y.dims(), &[1, 3, 10, 14]);
    }
}
