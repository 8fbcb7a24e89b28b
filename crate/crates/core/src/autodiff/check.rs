//! Central finite-difference gradient checks.

use alloc::format;
use alloc::vec::Vec;

use super::tape::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compares reverse-mode gradients of a scalar function of several inputs
/// against central differences with step `h`.
///
/// Returns the largest `|autodiff - fd| / max(1, |fd|)` over all coordinates.
pub fn finite_diff_check_many<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    if h <= 0.0 {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = values.iter().map(|v| tape.param(v.clone())).collect();
        let out = f(&mut tape, &ids)?;
        let value = tape.value(out);
        if value.len() != 1 {
            return Err(Error::NonScalarRoot { rows: value.rows(), cols: value.cols() });
        }
        Ok(value.item())
    };

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|v| tape.param(v.clone())).collect();
    let out = f(&mut tape, &ids)?;
    if !tape.value(out).item().is_finite() {
        return Err(Error::NonFinite(format!("f(x) = {}", tape.value(out).item())));
    }
    let grads = tape.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut shifted: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(ids[k], input);
        for idx in 0..input.len() {
            let orig = input.data()[idx];
            shifted[k].data_mut()[idx] = orig + h;
            let up = eval(&shifted)?;
            shifted[k].data_mut()[idx] = orig - h;
            let down = eval(&shifted)?;
            shifted[k].data_mut()[idx] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite(format!("f(x +- h) at input {k}, coordinate {idx}")));
            }
            let fd = (up - down) / (2.0 * h);
            let err = libm::fabs(analytic.data()[idx] - fd) / libm::fmax(1.0, libm::fabs(fd));
            worst = libm::fmax(worst, err);
        }
    }
    Ok(worst)
}

/// Single-input form of [`finite_diff_check_many`].
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    finite_diff_check_many(|tape, ids| f(tape, ids[0]), core::slice::from_ref(x), h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Primitive;
    use crate::seeding::{stream_rng, Stream};
    use proptest::prelude::*;
    use rand::Rng as _;

    const H: f64 = 1e-6;

    fn random(rng: &mut crate::seeding::Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
        Tensor::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
    }

    /// Values in `[-2, 2]` kept at least `gap` away from zero.
    fn away_from_zero(rng: &mut crate::seeding::Rng, rows: usize, cols: usize, gap: f64) -> Tensor {
        Tensor::from_fn(rows, cols, |_, _| {
            let m: f64 = rng.random_range(gap..2.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
    }

    /// Reduces any output to a scalar with fixed random weights.
    fn reduce(tape: &mut Tape, out: NodeId, weights: &Tensor) -> Result<NodeId> {
        let w = tape.constant(weights.clone());
        tape.dot(out, w)
    }

    fn check_primitive(op: Primitive, seed: u64) -> f64 {
        let mut rng = stream_rng(seed, Stream::Init);
        let (m, n, k) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
        let inputs: Vec<Tensor> = match &op {
            Primitive::MatMul => vec![random(&mut rng, m, k, -2.0, 2.0), random(&mut rng, k, n, -2.0, 2.0)],
            Primitive::Add | Primitive::Sub | Primitive::Hadamard | Primitive::Dot => {
                vec![random(&mut rng, m, n, -2.0, 2.0), random(&mut rng, m, n, -2.0, 2.0)]
            }
            Primitive::ConcatRows => vec![random(&mut rng, m, n, -2.0, 2.0), random(&mut rng, k, n, -2.0, 2.0)],
            Primitive::Outer => vec![random(&mut rng, m, 1, -2.0, 2.0), random(&mut rng, n, 1, -2.0, 2.0)],
            Primitive::Reciprocal => vec![away_from_zero(&mut rng, m, n, 0.5)],
            Primitive::Sqrt => vec![random(&mut rng, m, n, 0.5, 2.0)],
            Primitive::Relu | Primitive::ReluIndicator => vec![away_from_zero(&mut rng, m, n, 0.01)],
            Primitive::DiagFromVector => vec![random(&mut rng, m, 1, -2.0, 2.0)],
            Primitive::IdentityMinus => vec![random(&mut rng, m, m, -2.0, 2.0)],
            Primitive::Slice { .. } => vec![random(&mut rng, 4, n, -2.0, 2.0)],
            _ => vec![random(&mut rng, m, n, -2.0, 2.0)],
        };
        let out_shape = {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = inputs.iter().map(|t| tape.param(t.clone())).collect();
            let out = tape.apply(op.clone(), &ids).unwrap();
            tape.value(out).shape()
        };
        let weights = random(&mut rng, out_shape[0], out_shape[1], -1.0, 1.0);
        finite_diff_check_many(
            |tape, ids| {
                let out = tape.apply(op.clone(), ids)?;
                reduce(tape, out, &weights)
            },
            &inputs,
            H,
        )
        .unwrap()
    }

    fn all_primitives() -> Vec<Primitive> {
        vec![
            Primitive::MatMul,
            Primitive::Add,
            Primitive::Sub,
            Primitive::Hadamard,
            Primitive::Scale(-1.7),
            Primitive::ConcatRows,
            Primitive::Slice { start: 1, end: 3 },
            Primitive::Transpose,
            Primitive::Sum,
            Primitive::Dot,
            Primitive::SqNorm,
            Primitive::Outer,
            Primitive::Reciprocal,
            Primitive::Sqrt,
            Primitive::Relu,
            Primitive::Silu,
            Primitive::SiluPrime,
            Primitive::ReluIndicator,
            Primitive::DiagFromVector,
            Primitive::IdentityMinus,
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn every_primitive_matches_finite_differences(seed in any::<u64>()) {
            for op in all_primitives() {
                let tol = if op == Primitive::SiluPrime { 1e-4 } else { 1e-5 };
                let err = check_primitive(op.clone(), seed);
                prop_assert!(err <= tol, "{}: {err:e}", op.tag());
            }
        }

        #[test]
        fn replay_is_bit_identical(seed in any::<u64>()) {
            let mut rng = stream_rng(seed, Stream::Init);
            let x = random(&mut rng, 3, 2, -2.0, 2.0);
            let w = random(&mut rng, 4, 3, -2.0, 2.0);
            let run = || {
                let mut tape = Tape::new();
                let (xi, wi) = (tape.param(x.clone()), tape.param(w.clone()));
                let z = tape.matmul(wi, xi).unwrap();
                let a = tape.silu(z).unwrap();
                let l = tape.sqnorm(a).unwrap();
                let g = tape.backward(l).unwrap();
                (tape.value(l).clone(), g.get(wi).unwrap().clone())
            };
            prop_assert_eq!(run(), run());
        }
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut rng = stream_rng(2, Stream::Init);
        let x = random(&mut rng, 10, 1, -2.0, 2.0);
        let err = finite_diff_check(|tape, x| tape.sqnorm(x), &x, H).unwrap();
        assert!(err <= 1e-7, "{err:e}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::column(&[1.0, -2.0, 3.0]);
        let mut tape = Tape::new();
        let xi = tape.param(x.clone());
        let zero = tape.scale(xi, 0.0).unwrap();
        let s = tape.sum(zero).unwrap();
        let five = tape.constant(Tensor::scalar(5.0));
        let out = tape.add(s, five).unwrap();
        let g = tape.backward(out).unwrap();
        assert!(g.get_or_zeros(xi, &x).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn three_layer_composite() {
        let mut rng = stream_rng(11, Stream::Init);
        let inputs = vec![
            random(&mut rng, 5, 3, -1.0, 1.0),
            random(&mut rng, 5, 1, -1.0, 1.0),
            random(&mut rng, 4, 5, -1.0, 1.0),
            random(&mut rng, 2, 4, -1.0, 1.0),
            random(&mut rng, 3, 6, -2.0, 2.0),
        ];
        let err = finite_diff_check_many(
            |tape, p| {
                let z = tape.matmul(p[0], p[4])?;
                let z = tape.add_bias(z, p[1])?;
                let h = tape.silu(z)?;
                let z = tape.matmul(p[2], h)?;
                let h = tape.silu_prime(z)?;
                let out = tape.matmul(p[3], h)?;
                tape.sqnorm(out)
            },
            &inputs,
            H,
        )
        .unwrap();
        assert!(err <= 1e-5, "{err:e}");
    }

    #[test]
    fn rejects_bad_step_and_non_finite_values() {
        let x = Tensor::column(&[1.0]);
        assert!(finite_diff_check(|tape, x| tape.sum(x), &x, 0.0).is_err());
        let zero = Tensor::column(&[0.0]);
        let r = finite_diff_check(
            |tape, x| {
                let r = tape.reciprocal(x)?;
                tape.sum(r)
            },
            &zero,
            H,
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
