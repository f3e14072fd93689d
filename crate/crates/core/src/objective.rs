//! Training loss: reconstruction term plus a beta-weighted KL pulling the
//! latent posterior toward a standard normal prior.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Scalar, Tape, Tensor, Var};

/// Default KL weight.
pub const DEFAULT_BETA: f64 = 1e-5;

/// Scalar breakdown of one loss evaluation. `total = task + beta * kl`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossReport {
    pub task: f64,
    pub kl: f64,
    pub beta: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(task: f64, kl: f64, beta: f64) -> Self {
        LossReport { task, kl, beta, total: task + beta * kl }
    }
}

/// Closed-form KL(N(mu, diag(exp(logvar))) || N(0, I)), summed over elements
/// and averaged over the batch (first) dimension. Rank-1 inputs count as a
/// single batch row.
///
/// Per element: 0.5 * (mu^2 + exp(lv) - 1 - lv). Non-negative, zero iff the
/// posterior equals the prior.
pub fn kl_diag_gaussian<F: Scalar>(mean: &Tensor<F>, logvar: &Tensor<F>) -> Result<f64> {
    if mean.shape() != logvar.shape() {
        return Err(Error::shape(format!(
            "kl_diag_gaussian: mean shape {:?} != logvar shape {:?}",
            mean.shape(),
            logvar.shape()
        )));
    }
    let mut acc = 0.0;
    for (&m, &lv) in mean.data().iter().zip(logvar.data()) {
        let m = m.to_f64_();
        let lv = lv.to_f64_();
        acc += 0.5 * (m * m + lv.exp() - 1.0 - lv);
    }
    let batch = if mean.shape().len() >= 2 { mean.shape()[0] } else { 1 };
    Ok(acc / batch as f64)
}

/// Reconstruction losses. Only MSE for now.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Mse,
}

/// Mean squared error over all elements.
pub fn task_loss<F: Scalar>(pred: &Tensor<F>, target: &Tensor<F>, kind: TaskKind) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!(
            "task_loss: pred shape {:?} != target shape {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    match kind {
        TaskKind::Mse => {
            let mut acc = 0.0;
            for (&p, &t) in pred.data().iter().zip(target.data()) {
                let d = p.to_f64_() - t.to_f64_();
                acc += d * d;
            }
            Ok(acc / pred.len() as f64)
        }
    }
}

/// Combined objective on plain tensors (reporting path, no gradients).
pub fn ib_loss<F: Scalar>(
    pred: &Tensor<F>,
    target: &Tensor<F>,
    posterior_mean: &Tensor<F>,
    posterior_logvar: &Tensor<F>,
    beta: f64,
) -> Result<LossReport> {
    if beta < 0.0 {
        return Err(Error::invalid("ib_loss: beta must be >= 0"));
    }
    let task = task_loss(pred, target, TaskKind::Mse)?;
    let kl = kl_diag_gaussian(posterior_mean, posterior_logvar)?;
    Ok(LossReport::new(task, kl, beta))
}

/// Tape-building variant: returns (total, task, kl) vars so the caller can
/// backprop through `total` and still read the parts.
pub fn ib_loss_tape<F: Scalar>(
    tape: &mut Tape<F>,
    pred: Var,
    target: &Tensor<F>,
    posterior_mean: Var,
    posterior_logvar: Var,
    beta: f64,
) -> Result<(Var, Var, Var)> {
    if beta < 0.0 {
        return Err(Error::invalid("ib_loss_tape: beta must be >= 0"));
    }
    let task = tape.mse(pred, target)?;
    let kl = tape.kl_standard_normal(posterior_mean, posterior_logvar)?;
    let scaled = tape.scale(kl, F::from_f64_(beta));
    let total = tape.add(task, scaled)?;
    Ok((total, task, kl))
}
