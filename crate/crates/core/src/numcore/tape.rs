//! Reverse-mode gradient tape over dense tensors.
//!
//! Each recorded node stores its forward value; `backward` walks the tape in
//! reverse and accumulates gradients for every node, matching the analytic
//! derivations that the finite-difference harness verifies.

use super::ops;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use std::rc::Rc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Hand-written op plugged into the tape (used by the differentiable
/// splatting renderer). Forward value is computed by the caller.
pub trait CustomOp<F: Scalar>: std::fmt::Debug {
    /// Per-input gradients given upstream grad of the output.
    fn backward(&self, inputs: &[&Tensor<F>], grad_out: &Tensor<F>) -> Vec<Tensor<F>>;
}

#[derive(Debug)]
enum Op<F: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddScalar(Var, F),
    Matmul(Var, Var),
    Linear { x: Var, w: Var, b: Var },
    LayerNorm { x: Var, gain: Var, shift: Var, eps: F },
    Softmax(Var),
    Gelu(Var),
    Softplus(Var),
    Sigmoid(Var),
    Exp(Var),
    ClampMax(Var, F),
    Attention { q: Var, k: Var, v: Var, heads: usize },
    ConcatRows(Vec<Var>),
    NarrowCols { x: Var, start: usize, len: usize },
    SumAll(Var),
    MeanAll(Var),
    Custom { inputs: Vec<Var>, op: Rc<dyn CustomOp<F>> },
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op<F>,
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip(self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip(self.value(b), |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: F) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::matmul_fwd(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Matmul(a, b)))
    }

    /// y = x W^T + b, with w: (out, in), b: (out).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let p = ops::LinearParams::new(self.value(w).clone(), self.value(b).clone())?;
        let v = ops::linear_fwd(self.value(x), &p)?;
        Ok(self.push(v, Op::Linear { x, w, b }))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: F) -> Result<Var> {
        let v = ops::layer_norm_fwd(self.value(x), self.value(gain), self.value(shift), eps)?;
        Ok(self.push(v, Op::LayerNorm { x, gain, shift, eps }))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = ops::softmax_fwd(self.value(x))?;
        Ok(self.push(v, Op::Softmax(x)))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(ops::gelu_scalar);
        self.push(v, Op::Gelu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.value(x).map(ops::softplus_scalar);
        self.push(v, Op::Softplus(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(ops::sigmoid_scalar);
        self.push(v, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|t| t.exp());
        self.push(v, Op::Exp(x))
    }

    pub fn clamp_max(&mut self, x: Var, c: F) -> Var {
        let v = self.value(x).map(|t| t.min(c));
        self.push(v, Op::ClampMax(x, c))
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let out = ops::attention_fwd(self.value(q), self.value(k), self.value(v), heads)?;
        Ok(self.push(out, Op::Attention { q, k, v, heads }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat of zero tensors"));
        }
        let d = self.value(parts[0]).last_dim();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.last_dim() != d {
                return Err(Error::shape("concat_rows: mismatched last dims"));
            }
            rows += t.outer();
            data.extend_from_slice(t.data());
        }
        let v = Tensor::new(&[rows, d], data)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn narrow_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        if start + len > d {
            return Err(Error::shape("narrow_cols out of range"));
        }
        let rows = t.outer();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&t.data()[r * d + start..r * d + start + len]);
        }
        let v = Tensor::new(&[rows, len], data)?;
        Ok(self.push(v, Op::NarrowCols { x, start, len }))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(F::zero(), |a, &b| a + b);
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().fold(F::zero(), |a, &b| a + b) / F::from_usize(t.len()).unwrap();
        self.push(Tensor::scalar(s), Op::MeanAll(x))
    }

    pub fn custom(&mut self, inputs: &[Var], value: Tensor<F>, op: Rc<dyn CustomOp<F>>) -> Var {
        self.push(value, Op::Custom { inputs: inputs.to_vec(), op })
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor<F>) -> Result<Var> {
        let tgt = self.constant(target.clone());
        let diff = self.sub(pred, tgt)?;
        let sq = self.mul(diff, diff)?;
        Ok(self.mean_all(sq))
    }

    /// Closed-form KL of a diagonal Gaussian posterior against N(0, I),
    /// summed over all elements: sum of (mu^2 + e^lv - 1 - lv) / 2.
    pub fn kl_standard_normal(&mut self, mean: Var, logvar: Var) -> Result<Var> {
        if self.value(mean).shape() != self.value(logvar).shape() {
            return Err(Error::shape("kl: mean/logvar shape mismatch"));
        }
        let mu2 = self.mul(mean, mean)?;
        let ev = self.exp(logvar);
        let a = self.add(mu2, ev)?;
        let b = self.sub(a, logvar)?;
        let c = self.add_scalar(b, -F::one());
        let s = self.sum_all(c);
        Ok(self.scale(s, F::from_f64_(0.5)))
    }

    /// Accumulate gradients of a scalar `loss` for every tape node.
    pub fn backward(&self, loss: Var) -> Result<Grads<F>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward target must be scalar"));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(F::one()));
        for idx in (0..self.nodes.len()).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn accumulate(grads: &mut [Option<Tensor<F>>], v: Var, delta: Tensor<F>) {
        match &mut grads[v.0] {
            Some(g) => {
                let sum = g.zip(&delta, |a, b| a + b).expect("gradient shape mismatch");
                *g = sum;
            }
            slot @ None => *slot = Some(delta),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(&self, idx: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) -> Result<()> {
        let _two = F::from_f64_(2.0);
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                Self::accumulate(grads, *a, g.clone());
                Self::accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                Self::accumulate(grads, *a, g.clone());
                Self::accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let ga = g.zip(self.value(*b), |x, y| x * y)?;
                let gb = g.zip(self.value(*a), |x, y| x * y)?;
                Self::accumulate(grads, *a, ga);
                Self::accumulate(grads, *b, gb);
            }
            Op::Scale(a, c) => {
                let c = *c;
                Self::accumulate(grads, *a, g.map(|x| x * c));
            }
            Op::AddScalar(a, _) => Self::accumulate(grads, *a, g.clone()),
            Op::Matmul(a, b) => {
                // y = A B: dA = G B^T, dB = A^T G
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, kk) = (av.outer(), av.last_dim());
                let n = bv.shape()[1];
                let mut da = vec![F::zero(); m * kk];
                let mut db = vec![F::zero(); kk * n];
                for i in 0..m {
                    for j in 0..n {
                        let gij = g.data()[i * n + j];
                        for t in 0..kk {
                            da[i * kk + t] = da[i * kk + t] + gij * bv.data()[t * n + j];
                            db[t * n + j] = db[t * n + j] + av.data()[i * kk + t] * gij;
                        }
                    }
                }
                Self::accumulate(grads, *a, Tensor::new(av.shape(), da)?);
                Self::accumulate(grads, *b, Tensor::new(bv.shape(), db)?);
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let rows = xv.outer();
                let inp = xv.last_dim();
                let out = wv.shape()[0];
                let mut gx = vec![F::zero(); xv.len()];
                let mut gw = vec![F::zero(); wv.len()];
                let mut gb = vec![F::zero(); out];
                for r in 0..rows {
                    for o in 0..out {
                        let go = g.data()[r * out + o];
                        gb[o] = gb[o] + go;
                        for i in 0..inp {
                            gx[r * inp + i] = gx[r * inp + i] + go * wv.data()[o * inp + i];
                            gw[o * inp + i] = gw[o * inp + i] + go * xv.data()[r * inp + i];
                        }
                    }
                }
                Self::accumulate(grads, *x, Tensor::new(xv.shape(), gx)?);
                Self::accumulate(grads, *w, Tensor::new(wv.shape(), gw)?);
                Self::accumulate(grads, *b, Tensor::new(&[out], gb)?);
            }
            Op::LayerNorm { x, gain, shift, eps } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let d = xv.last_dim();
                let rows = xv.outer();
                let nd = F::from_usize(d).unwrap();
                let mut gx = vec![F::zero(); xv.len()];
                let mut ggain = vec![F::zero(); d];
                let mut gshift = vec![F::zero(); d];
                for r in 0..rows {
                    let xr = &xv.data()[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let mean = xr.iter().fold(F::zero(), |a, &b| a + b) / nd;
                    let var =
                        xr.iter().fold(F::zero(), |a, &b| a + (b - mean) * (b - mean)) / nd;
                    let rstd = (var + *eps).sqrt().recip();
                    // dxhat_i = g_i * gain_i; dx via standard layernorm backward
                    let mut sum_dxhat = F::zero();
                    let mut sum_dxhat_xhat = F::zero();
                    for i in 0..d {
                        let xhat = (xr[i] - mean) * rstd;
                        let dxhat = gr[i] * gv.data()[i];
                        sum_dxhat = sum_dxhat + dxhat;
                        sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                        ggain[i] = ggain[i] + gr[i] * xhat;
                        gshift[i] = gshift[i] + gr[i];
                    }
                    for i in 0..d {
                        let xhat = (xr[i] - mean) * rstd;
                        let dxhat = gr[i] * gv.data()[i];
                        gx[r * d + i] = rstd * (dxhat - sum_dxhat / nd - xhat * sum_dxhat_xhat / nd);
                    }
                }
                Self::accumulate(grads, *x, Tensor::new(xv.shape(), gx)?);
                Self::accumulate(grads, *gain, Tensor::new(&[d], ggain)?);
                Self::accumulate(grads, *shift, Tensor::new(&[d], gshift)?);
            }
            Op::Softmax(x) => {
                let yv = &self.nodes[idx].value;
                let d = yv.last_dim();
                let rows = yv.outer();
                let mut gx = vec![F::zero(); yv.len()];
                for r in 0..rows {
                    let yr = &yv.data()[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let dot = yr.iter().zip(gr).fold(F::zero(), |a, (&y, &gg)| a + y * gg);
                    for i in 0..d {
                        gx[r * d + i] = yr[i] * (gr[i] - dot);
                    }
                }
                Self::accumulate(grads, *x, Tensor::new(yv.shape(), gx)?);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let gx = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xi, &gi)| gi * ops::gelu_grad_scalar(xi))
                    .collect();
                Self::accumulate(grads, *x, Tensor::new(xv.shape(), gx)?);
            }
            Op::Softplus(x) => {
                let xv = self.value(*x);
                let gx = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xi, &gi)| gi * ops::sigmoid_scalar(xi))
                    .collect();
                Self::accumulate(grads, *x, Tensor::new(xv.shape(), gx)?);
            }
            Op::Sigmoid(x) => {
                let yv = &self.nodes[idx].value;
                let gx = yv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&yi, &gi)| gi * yi * (F::one() - yi))
                    .collect();
                Self::accumulate(grads, *x, Tensor::new(yv.shape(), gx)?);
            }
            Op::Exp(x) => {
                let yv = &self.nodes[idx].value;
                let gx = yv.data().iter().zip(g.data()).map(|(&yi, &gi)| gi * yi).collect();
                Self::accumulate(grads, *x, Tensor::new(yv.shape(), gx)?);
            }
            Op::ClampMax(x, c) => {
                let xv = self.value(*x);
                let gx = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xi, &gi)| if xi < *c { gi } else { F::zero() })
                    .collect();
                Self::accumulate(grads, *x, Tensor::new(xv.shape(), gx)?);
            }
            Op::Attention { q, k, v, heads } => {
                let (gq, gk, gv) =
                    attention_backward(self.value(*q), self.value(*k), self.value(*v), *heads, g);
                Self::accumulate(grads, *q, gq);
                Self::accumulate(grads, *k, gk);
                Self::accumulate(grads, *v, gv);
            }
            Op::ConcatRows(parts) => {
                let d = self.nodes[idx].value.last_dim();
                let mut row = 0;
                for &p in parts {
                    let rows = self.value(p).outer();
                    let slice = g.data()[row * d..(row + rows) * d].to_vec();
                    Self::accumulate(grads, p, Tensor::new(self.value(p).shape(), slice)?);
                    row += rows;
                }
            }
            Op::NarrowCols { x, start, len } => {
                let xv = self.value(*x);
                let d = xv.last_dim();
                let rows = xv.outer();
                let mut gx = vec![F::zero(); xv.len()];
                for r in 0..rows {
                    for i in 0..*len {
                        gx[r * d + start + i] = g.data()[r * len + i];
                    }
                }
                Self::accumulate(grads, *x, Tensor::new(xv.shape(), gx)?);
            }
            Op::SumAll(x) => {
                let xv = self.value(*x);
                Self::accumulate(grads, *x, Tensor::full(xv.shape(), g.item()));
            }
            Op::MeanAll(x) => {
                let xv = self.value(*x);
                let c = g.item() / F::from_usize(xv.len()).unwrap();
                Self::accumulate(grads, *x, Tensor::full(xv.shape(), c));
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor<F>> = inputs.iter().map(|&i| self.value(i)).collect();
                let gs = op.backward(&vals, g);
                debug_assert_eq!(gs.len(), inputs.len());
                for (inp, gi) in inputs.iter().zip(gs) {
                    Self::accumulate(grads, *inp, gi);
                }
            }
        }
        Ok(())
    }
}

pub struct Grads<F: Scalar> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Grads<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of a leaf, zeros if the loss does not depend on it.
    pub fn of(&self, v: Var, shape: &[usize]) -> Tensor<F> {
        self.grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn attention_backward<F: Scalar>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    heads: usize,
    g: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let d = q.last_dim();
    let dh = d / heads;
    let lq = q.outer();
    let lk = k.outer();
    let scale = F::from_f64_(1.0 / (dh as f64).sqrt());
    let mut gq = vec![F::zero(); q.len()];
    let mut gk = vec![F::zero(); k.len()];
    let mut gv = vec![F::zero(); v.len()];
    let mut att = vec![F::zero(); lk];
    let mut ds = vec![F::zero(); lk];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..lq {
            let qrow = &q.data()[i * d + off..i * d + off + dh];
            // recompute softmax row
            let mut mx = F::neg_infinity();
            for (j, a) in att.iter_mut().enumerate() {
                let krow = &k.data()[j * d + off..j * d + off + dh];
                let mut dot = F::zero();
                for t in 0..dh {
                    dot = dot + qrow[t] * krow[t];
                }
                *a = dot * scale;
                mx = mx.max(*a);
            }
            let mut sum = F::zero();
            for a in att.iter_mut() {
                *a = (*a - mx).exp();
                sum = sum + *a;
            }
            for a in att.iter_mut() {
                *a = *a / sum;
            }
            let grow = &g.data()[i * d + off..i * d + off + dh];
            // dA_j = grow . v_j ; dV_j += A_j * grow
            let mut dot_da_a = F::zero();
            for j in 0..lk {
                let vrow = &v.data()[j * d + off..j * d + off + dh];
                let mut da = F::zero();
                for t in 0..dh {
                    da = da + grow[t] * vrow[t];
                    gv[j * d + off + t] = gv[j * d + off + t] + att[j] * grow[t];
                }
                ds[j] = da;
                dot_da_a = dot_da_a + da * att[j];
            }
            // softmax backward: dS_j = A_j (dA_j - sum_t dA_t A_t), then scale
            for j in 0..lk {
                let dsj = att[j] * (ds[j] - dot_da_a) * scale;
                let krow = &k.data()[j * d + off..j * d + off + dh];
                for t in 0..dh {
                    gq[i * d + off + t] = gq[i * d + off + t] + dsj * krow[t];
                    gk[j * d + off + t] = gk[j * d + off + t] + dsj * qrow[t];
                }
            }
        }
    }
    (
        Tensor::new(q.shape(), gq).unwrap(),
        Tensor::new(k.shape(), gk).unwrap(),
        Tensor::new(v.shape(), gv).unwrap(),
    )
}
