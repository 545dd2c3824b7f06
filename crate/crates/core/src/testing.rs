//! Plain-loop reference implementations used as test oracles.

use candle_core::{DType, Tensor};
use ndarray::{Array2, Array3};

/// `C x H x W` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid3(pub Array3<f64>);

impl Grid3 {
    pub fn from_matrix_padded(m: &Array2<f64>, h: usize, w: usize) -> Self {
        let mut g = Array3::zeros((1, h, w));
        for ((i, j), &v) in m.indexed_iter() {
            g[[0, i, j]] = v;
        }
        Self(g)
    }

    pub fn at(&self, c: usize, i: usize, j: usize) -> f64 {
        self.0[[c, i, j]]
    }

    pub fn add(&self, other: &Grid3) -> Grid3 {
        Grid3(&self.0 + &other.0)
    }

    pub fn concat(&self, other: &Grid3) -> Grid3 {
        Grid3(ndarray::concatenate(ndarray::Axis(0), &[self.0.view(), other.0.view()]).unwrap())
    }
}

fn values4(t: &Tensor) -> (Vec<f64>, [usize; 4]) {
    let (a, b, c, d) = t.dims4().unwrap();
    let v = t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    (v, [a, b, c, d])
}

fn values1(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

/// Weight layout `(C_out, C_in, k, k)`.
pub fn conv2d_naive(x: &Grid3, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Grid3 {
    let (wv, [co, ci, kh, kw]) = values4(w);
    let bv = values1(b);
    let (c, h, wd) = x.0.dim();
    assert_eq!(c, ci);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Array3::zeros((co, oh, ow));
    for o in 0..co {
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = bv[o];
                for i in 0..ci {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (y * stride + ky) as isize - pad as isize;
                            let ix = (xx * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            acc += x.0[[i, iy as usize, ix as usize]]
                                * wv[((o * ci + i) * kh + ky) * kw + kx];
                        }
                    }
                }
                out[[o, y, xx]] = acc;
            }
        }
    }
    Grid3(out)
}

/// Kernel 4, stride 2, padding 1. Weight layout `(C_in, C_out, 4, 4)`.
pub fn conv_transpose2d_naive(x: &Grid3, w: &Tensor, b: &Tensor) -> Grid3 {
    let (wv, [ci, co, kh, kw]) = values4(w);
    let bv = values1(b);
    let (c, h, wd) = x.0.dim();
    assert_eq!(c, ci);
    let (oh, ow) = (2 * h, 2 * wd);
    let mut out = Array3::zeros((co, oh, ow));
    for o in 0..co {
        out.index_axis_mut(ndarray::Axis(0), o).fill(bv[o]);
    }
    for i in 0..ci {
        for iy in 0..h {
            for ix in 0..wd {
                let v = x.0[[i, iy, ix]];
                for o in 0..co {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let y = (2 * iy + ky) as isize - 1;
                            let xx = (2 * ix + kx) as isize - 1;
                            if y < 0 || xx < 0 || y >= oh as isize || xx >= ow as isize {
                                continue;
                            }
                            out[[o, y as usize, xx as usize]] +=
                                v * wv[((i * co + o) * kh + ky) * kw + kx];
                        }
                    }
                }
            }
        }
    }
    Grid3(out)
}

pub fn leaky(x: &Grid3) -> Grid3 {
    Grid3(x.0.mapv(|v| if v >= 0.0 { v } else { 0.2 * v }))
}

pub fn softplus_f64(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

/// `x: C_in x L`, weight `(C_out, C_in, k)`, symmetric zero padding.
pub fn conv1d_naive(
    x: &Array2<f64>,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    pad: usize,
    dilation: usize,
) -> Array2<f64> {
    let (co, ci, k) = w.dims3().unwrap();
    let wv = values1(w);
    let bv = values1(b);
    let (c, l) = x.dim();
    assert_eq!(c, ci);
    let span = dilation * (k - 1) + 1;
    let ol = (l + 2 * pad - span) / stride + 1;
    Array2::from_shape_fn((co, ol), |(o, t)| {
        let mut acc = bv[o];
        for i in 0..ci {
            for j in 0..k {
                let idx = (t * stride + j * dilation) as isize - pad as isize;
                if idx >= 0 && (idx as usize) < l {
                    acc += x[[i, idx as usize]] * wv[(o * ci + i) * k + j];
                }
            }
        }
        acc
    })
}

/// Central finite-difference derivative of `f` with respect to `x[i]`.
pub fn finite_difference(x: &[f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let mut p = x.to_vec();
    p[i] += h;
    let up = f(&p);
    p[i] -= 2.0 * h;
    let down = f(&p);
    (up - down) / (2.0 * h)
}
