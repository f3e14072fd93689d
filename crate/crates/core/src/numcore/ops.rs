//! Forward kernels for the dense ops. These are the single source of truth:
//! the tape calls them for forward evaluation and the standalone API exposes
//! them directly.

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Affine map parameters: weight is (out, in), bias is (out).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams<F: Scalar> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

impl<F: Scalar> LinearParams<F> {
    pub fn new(weight: Tensor<F>, bias: Tensor<F>) -> Result<Self> {
        if weight.shape().len() != 2 {
            return Err(Error::shape("linear weight must be 2-D"));
        }
        if bias.len() != weight.shape()[0] {
            return Err(Error::shape("bias length must equal weight rows"));
        }
        if !weight.all_finite() || !bias.all_finite() {
            return Err(Error::shape("non-finite linear parameters"));
        }
        Ok(Self { weight, bias })
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn zeros(out: usize, inp: usize) -> Self {
        Self { weight: Tensor::zeros(&[out, inp]), bias: Tensor::zeros(&[out]) }
    }
}

pub fn matmul_fwd<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, ka) = (a.outer(), a.last_dim());
    if b.shape().len() != 2 {
        return Err(Error::shape("matmul rhs must be 2-D"));
    }
    let (kb, n) = (b.shape()[0], b.shape()[1]);
    if ka != kb {
        return Err(Error::shape(format!("matmul inner dims {ka} vs {kb}")));
    }
    let mut out = vec![F::zero(); m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        for k in 0..ka {
            let aik = ad[i * ka + k];
            let row = &bd[k * n..(k + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + aik * row[j];
            }
        }
    }
    Tensor::new(&[m, n], out)
}

/// y = x W^T + b over the last dimension.
pub fn linear_fwd<F: Scalar>(x: &Tensor<F>, p: &LinearParams<F>) -> Result<Tensor<F>> {
    let inp = p.in_dim();
    let out = p.out_dim();
    if x.last_dim() != inp {
        return Err(Error::shape(format!(
            "linear expects last dim {inp}, got {}",
            x.last_dim()
        )));
    }
    let rows = x.outer();
    let mut y = vec![F::zero(); rows * out];
    let xd = x.data();
    let wd = p.weight.data();
    let bd = p.bias.data();
    for r in 0..rows {
        let xrow = &xd[r * inp..(r + 1) * inp];
        let yrow = &mut y[r * out..(r + 1) * out];
        for o in 0..out {
            let wrow = &wd[o * inp..(o + 1) * inp];
            let mut acc = bd[o];
            for i in 0..inp {
                acc = acc + xrow[i] * wrow[i];
            }
            yrow[o] = acc;
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = out;
    Tensor::new(&shape, y)
}

/// Per-row zero-mean unit-variance normalization followed by an affine map.
pub fn layer_norm_fwd<F: Scalar>(
    x: &Tensor<F>,
    gain: &Tensor<F>,
    shift: &Tensor<F>,
    eps: F,
) -> Result<Tensor<F>> {
    let d = x.last_dim();
    if d == 0 || gain.len() != d || shift.len() != d {
        return Err(Error::shape("layer_norm gain/shift must match last dim"));
    }
    if eps <= F::zero() {
        return Err(Error::shape("layer_norm eps must be positive"));
    }
    let rows = x.outer();
    let mut y = vec![F::zero(); x.len()];
    let nd = F::from_usize(d).unwrap();
    for r in 0..rows {
        let xr = &x.data()[r * d..(r + 1) * d];
        let mean = xr.iter().fold(F::zero(), |a, &b| a + b) / nd;
        let var = xr.iter().fold(F::zero(), |a, &b| a + (b - mean) * (b - mean)) / nd;
        let rstd = (var + eps).sqrt().recip();
        for i in 0..d {
            y[r * d + i] = (xr[i] - mean) * rstd * gain.data()[i] + shift.data()[i];
        }
    }
    Tensor::new(x.shape(), y)
}

/// Max-subtracted softmax over the last dimension.
pub fn softmax_fwd<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let d = x.last_dim();
    let rows = x.outer();
    let mut y = vec![F::zero(); x.len()];
    for r in 0..rows {
        let xr = &x.data()[r * d..(r + 1) * d];
        let mx = xr.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        let mut sum = F::zero();
        for i in 0..d {
            let e = (xr[i] - mx).exp();
            y[r * d + i] = e;
            sum = sum + e;
        }
        for i in 0..d {
            y[r * d + i] = y[r * d + i] / sum;
        }
    }
    Tensor::new(x.shape(), y)
}

/// Exact-erf GELU.
pub fn gelu_scalar<F: Scalar>(x: F) -> F {
    let xf = x.to_f64_();
    F::from_f64_(0.5 * xf * (1.0 + libm::erf(xf / std::f64::consts::SQRT_2)))
}

pub fn gelu_grad_scalar<F: Scalar>(x: F) -> F {
    let xf = x.to_f64_();
    let phi_big = 0.5 * (1.0 + libm::erf(xf / std::f64::consts::SQRT_2));
    let phi_small = (-0.5 * xf * xf).exp() / (2.0 * std::f64::consts::PI).sqrt();
    F::from_f64_(phi_big + xf * phi_small)
}

pub fn softplus_scalar<F: Scalar>(x: F) -> F {
    // max(x, 0) + ln(1 + exp(-|x|))
    let z = x.max(F::zero());
    z + (F::one() + (-x.abs()).exp()).ln()
}

pub fn sigmoid_scalar<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        (F::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Multi-head scaled dot-product attention. `d` must divide into `heads`;
/// each head computes softmax(Q Kᵀ / sqrt(d/heads)) V and heads concatenate.
pub fn attention_fwd<F: Scalar>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    heads: usize,
) -> Result<Tensor<F>> {
    let d = q.last_dim();
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape(format!("model dim {d} not divisible by {heads} heads")));
    }
    if k.last_dim() != d || v.last_dim() != d {
        return Err(Error::shape("attention q/k/v dims must agree"));
    }
    let lq = q.outer();
    let lk = k.outer();
    if lk == 0 || v.outer() != lk {
        return Err(Error::shape("attention k/v lengths must agree and be >= 1"));
    }
    let dh = d / heads;
    let scale = F::from_f64_(1.0 / (dh as f64).sqrt());
    let mut out = vec![F::zero(); lq * d];
    let mut scores = vec![F::zero(); lk];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..lq {
            let qrow = &q.data()[i * d + off..i * d + off + dh];
            let mut mx = F::neg_infinity();
            for (j, s) in scores.iter_mut().enumerate() {
                let krow = &k.data()[j * d + off..j * d + off + dh];
                let mut dot = F::zero();
                for t in 0..dh {
                    dot = dot + qrow[t] * krow[t];
                }
                *s = dot * scale;
                mx = mx.max(*s);
            }
            let mut sum = F::zero();
            for s in scores.iter_mut() {
                *s = (*s - mx).exp();
                sum = sum + *s;
            }
            let orow = &mut out[i * d + off..i * d + off + dh];
            for (j, s) in scores.iter().enumerate() {
                let a = *s / sum;
                let vrow = &v.data()[j * d + off..j * d + off + dh];
                for t in 0..dh {
                    orow[t] = orow[t] + a * vrow[t];
                }
            }
        }
    }
    Tensor::new(&[lq, d], out)
}

/// linear -> GELU -> linear.
pub fn mlp_fwd<F: Scalar>(
    x: &Tensor<F>,
    p1: &LinearParams<F>,
    p2: &LinearParams<F>,
) -> Result<Tensor<F>> {
    let h = linear_fwd(x, p1)?;
    let h = h.map(gelu_scalar);
    linear_fwd(&h, p2)
}
