//! Central finite-difference verification of tape gradients, always in f64.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub n_checked: usize,
    pub tol: f64,
    pub failures: Vec<String>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compare analytic gradients of `build`'s scalar output against central
/// differences (f(p+h) - f(p-h)) / 2h for every entry of every parameter.
///
/// Relative error uses max(|analytic|, |fd|, 1) as the denominator so that
/// near-zero gradients are compared absolutely on the O(1) activation scale.
pub fn grad_check<B>(build: B, params: &[Tensor<f64>], h: f64, tol: f64) -> Result<GradReport>
where
    B: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let eval = |params: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        let v = tape.value(loss).item();
        if !v.is_finite() {
            return Err(Error::CheckFailed(format!("non-finite objective value {v}")));
        }
        Ok(v)
    };
    // analytic pass
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    if !tape.value(loss).item().is_finite() {
        return Err(Error::CheckFailed("non-finite objective value".into()));
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.of(v, p.shape()))
        .collect();

    let mut max_rel = 0.0f64;
    let mut failures = Vec::new();
    let mut n = 0;
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for e in 0..p.len() {
            let orig = p.data()[e];
            work[pi].data_mut()[e] = orig + h;
            let fp = eval(&work)?;
            work[pi].data_mut()[e] = orig - h;
            let fm = eval(&work)?;
            work[pi].data_mut()[e] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let a = analytic[pi].data()[e];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
            max_rel = max_rel.max(rel);
            n += 1;
            if rel > tol {
                failures.push(format!(
                    "param {pi} entry {e}: analytic {a:.6e} vs fd {fd:.6e} (rel {rel:.3e})"
                ));
            }
        }
    }
    Ok(GradReport { max_rel_err: max_rel, n_checked: n, tol, failures })
}
