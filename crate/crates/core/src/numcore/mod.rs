//! Minimal dense-tensor numerical kernel: linear maps, layer norm, softmax,
//! multi-head attention and MLPs, all differentiable through a reverse-mode
//! tape that a finite-difference harness verifies.

pub mod archive;
pub mod gradcheck;
pub mod ops;
pub mod tape;
pub mod tensor;

pub use archive::{load_archive, read_archive, save_archive, write_archive};
pub use gradcheck::{grad_check, GradReport};
pub use ops::LinearParams;
pub use tape::{CustomOp, Grads, Tape, Var};
pub use tensor::{live_tensor_bytes, peak_tensor_bytes, reset_peak_tensor_bytes, Scalar, Tensor};

#[cfg(test)]
mod grad_tests {
    use super::*;
    use crate::error::Result;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use std::rc::Rc;

    pub(crate) fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn linear_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..3 {
            let params = vec![
                rand_tensor(&mut rng, &[3, 4]), // x
                rand_tensor(&mut rng, &[2, 4]), // w
                rand_tensor(&mut rng, &[2]),    // b
            ];
            let rep = grad_check(
                |t, v| {
                    let y = t.linear(v[0], v[1], v[2])?;
                    let sq = t.mul(y, y)?;
                    Ok(t.sum_all(sq))
                },
                &params,
                1e-5,
                1e-3,
            )
            .unwrap();
            assert!(rep.passed(), "{:?}", rep.failures);
        }
    }

    #[test]
    fn linear_in_params_is_exact() {
        // f = sum(linear(x)): linear in W and b, FD is exact to ~1e-9
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = vec![
            rand_tensor(&mut rng, &[2, 3]),
            rand_tensor(&mut rng, &[4, 3]),
            rand_tensor(&mut rng, &[4]),
        ];
        let rep = grad_check(
            |t, v| {
                let y = t.linear(v[0], v[1], v[2])?;
                Ok(t.sum_all(y))
            },
            &params,
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(rep.passed(), "{:?}", rep.failures);
    }

    #[test]
    fn layer_norm_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..3 {
            let params = vec![
                rand_tensor(&mut rng, &[4, 5]),
                rand_tensor(&mut rng, &[5]),
                rand_tensor(&mut rng, &[5]),
            ];
            let rep = grad_check(
                |t, v| {
                    let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                    let w = t.mul(y, y)?;
                    Ok(t.sum_all(w))
                },
                &params,
                1e-5,
                1e-3,
            )
            .unwrap();
            assert!(rep.passed(), "{:?}", rep.failures);
        }
    }

    #[test]
    fn softmax_attention_mlp_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..3 {
            let params = vec![
                rand_tensor(&mut rng, &[3, 4]), // q
                rand_tensor(&mut rng, &[5, 4]), // k
                rand_tensor(&mut rng, &[5, 4]), // v
            ];
            let rep = grad_check(
                |t, v| {
                    let a = t.attention(v[0], v[1], v[2], 2)?;
                    let sm = t.softmax(a)?;
                    let sq = t.mul(sm, a)?;
                    Ok(t.sum_all(sq))
                },
                &params,
                1e-5,
                1e-3,
            )
            .unwrap();
            assert!(rep.passed(), "{:?}", rep.failures);
        }
    }

    #[test]
    fn elementwise_activations_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = vec![rand_tensor(&mut rng, &[4, 4])];
        let rep = grad_check(
            |t, v| {
                let a = t.gelu(v[0]);
                let b = t.softplus(a);
                let c = t.sigmoid(b);
                let d = t.exp(c);
                let e = t.clamp_max(d, 2.0);
                Ok(t.sum_all(e))
            },
            &params,
            1e-5,
            1e-3,
        )
        .unwrap();
        assert!(rep.passed(), "{:?}", rep.failures);
    }

    #[test]
    fn mlp_composition_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = vec![
            rand_tensor(&mut rng, &[3, 4]),  // x
            rand_tensor(&mut rng, &[8, 4]),  // w1
            rand_tensor(&mut rng, &[8]),     // b1
            rand_tensor(&mut rng, &[4, 8]),  // w2
            rand_tensor(&mut rng, &[4]),     // b2
        ];
        let rep = grad_check(
            |t, v| {
                let h = t.linear(v[0], v[1], v[2])?;
                let h = t.gelu(h);
                let y = t.linear(h, v[3], v[4])?;
                let sq = t.mul(y, y)?;
                Ok(t.sum_all(sq))
            },
            &params,
            1e-5,
            1e-3,
        )
        .unwrap();
        assert!(rep.passed(), "{:?}", rep.failures);
    }

    #[test]
    fn concat_narrow_kl_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = vec![rand_tensor(&mut rng, &[2, 6]), rand_tensor(&mut rng, &[3, 6])];
        let rep = grad_check(
            |t, v| {
                let c = t.concat_rows(&[v[0], v[1]])?;
                let mean = t.narrow_cols(c, 0, 3)?;
                let logvar = t.narrow_cols(c, 3, 3)?;
                t.kl_standard_normal(mean, logvar)
            },
            &params,
            1e-5,
            1e-3,
        )
        .unwrap();
        assert!(rep.passed(), "{:?}", rep.failures);
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        #[derive(Debug)]
        struct BadSquare;
        impl CustomOp<f64> for BadSquare {
            fn backward(&self, inputs: &[&Tensor<f64>], grad_out: &Tensor<f64>) -> Vec<Tensor<f64>> {
                // deliberately wrong: 3x instead of 2x
                vec![inputs[0]
                    .zip(grad_out, |x, g| 3.0 * x * g)
                    .unwrap()]
            }
        }
        let params = vec![Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap()];
        let rep = grad_check(
            |t, v| -> Result<Var> {
                let val = t.value(v[0]).map(|x| x * x);
                let sq = t.custom(&[v[0]], val, Rc::new(BadSquare));
                Ok(t.sum_all(sq))
            },
            &params,
            1e-5,
            1e-3,
        )
        .unwrap();
        assert!(!rep.passed());
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let params = vec![Tensor::new(&[1], vec![800.0]).unwrap()];
        let r = grad_check(
            |t, v| {
                let e = t.exp(v[0]); // overflows to inf
                Ok(t.sum_all(e))
            },
            &params,
            1e-5,
            1e-3,
        );
        assert!(r.is_err());
    }

    #[test]
    fn tape_forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_tensor(&mut rng, &[4, 4]);
        let run = || {
            let mut t = Tape::new();
            let v = t.leaf(x.clone());
            let a = t.softmax(v).unwrap();
            let b = t.attention(a, v, a, 2).unwrap();
            t.value(b).clone()
        };
        assert_eq!(run(), run());
    }
}
