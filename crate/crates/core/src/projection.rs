//! Differentiable Householder QR and the projection of `sdot0` onto the
//! orthogonal complement of the constants' gradients.
//!
//! Everything is batched: a matrix `A` (`n_s x m`) is held as `m` column
//! nodes, each `n_s x B` with one sample per tensor column. Each reflector is
//! built from tape primitives, so gradients flow through `Q` and `R`.

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sub-pivot norms below this use the identity reflector.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Thin QR of a batch of `n_s x m` matrices.
#[derive(Clone, Debug)]
pub struct QrResult {
    /// The input columns.
    pub columns: Vec<NodeId>,
    /// Orthonormal columns of `Q`, each `n_s x B`.
    pub q: Vec<NodeId>,
    /// Upper-triangular entries: `r[i][j - i]` holds `R[i][j]` for `j >= i`, each `1 x B`.
    pub r: Vec<Vec<NodeId>>,
    n_s: usize,
}

impl QrResult {
    pub fn n_cols(&self) -> usize {
        self.q.len()
    }

    /// `R[i][j]` node for `j >= i`.
    pub fn r_entry(&self, i: usize, j: usize) -> Option<NodeId> {
        if j < i {
            None
        } else {
            self.r.get(i).and_then(|row| row.get(j - i)).copied()
        }
    }

    /// `Q` of one sample as an `n_s x m` matrix.
    pub fn q_value(&self, tape: &Tape, sample: usize) -> Tensor {
        Tensor::from_fn(self.n_s, self.q.len(), |i, j| tape.value(self.q[j]).get(i, sample))
    }

    /// `R` of one sample as an `m x m` matrix; entries below the diagonal are exactly zero.
    pub fn r_value(&self, tape: &Tape, sample: usize) -> Tensor {
        let m = self.q.len();
        Tensor::from_fn(m, m, |i, j| match self.r_entry(i, j) {
            Some(id) => tape.value(id).get(0, sample),
            None => 0.0,
        })
    }
}

/// Columns of `A = [grad c_1, ..., grad c_nc, sdot0]`.
pub fn assemble_a(tape: &Tape, gradients: &[NodeId], sdot0: NodeId) -> Result<Vec<NodeId>> {
    let [n_s, batch] = tape.value(sdot0).shape();
    if gradients.len() >= n_s {
        return Err(Error::Config(format!(
            "number of constants ({}) must be smaller than the state dimension ({n_s})",
            gradients.len()
        )));
    }
    for &g in gradients {
        if tape.value(g).shape() != [n_s, batch] {
            return Err(Error::Shape {
                op: "assemble_a",
                detail: format!("gradient is {:?}, sdot0 is {n_s}x{batch}", tape.value(g).shape()),
            });
        }
    }
    let mut cols = gradients.to_vec();
    cols.push(sdot0);
    Ok(cols)
}

/// Single-sample form: `J` is `n_c x n_s`, `sdot0` is `n_s x 1`; returns `A` as
/// an `n_s x (n_c + 1)` node.
pub fn assemble_a_matrix(tape: &mut Tape, jacobian: NodeId, sdot0: NodeId) -> Result<NodeId> {
    let [n_c, n_s] = tape.value(jacobian).shape();
    let [rows, cols] = tape.value(sdot0).shape();
    if rows != n_s || cols != 1 {
        return Err(Error::Shape { op: "assemble_a", detail: format!("J is {n_c}x{n_s}, sdot0 is {rows}x{cols}") });
    }
    if n_c >= n_s {
        return Err(Error::Config(format!(
            "number of constants ({n_c}) must be smaller than the state dimension ({n_s})"
        )));
    }
    let s_t = tape.transpose(sdot0)?;
    let stacked = tape.concat_rows(&[jacobian, s_t])?;
    tape.transpose(stacked)
}

/// Splits an `n_s x m` single-sample matrix node into `m` column nodes.
pub fn matrix_columns(tape: &mut Tape, a: NodeId) -> Result<Vec<NodeId>> {
    let m = tape.value(a).cols();
    let a_t = tape.transpose(a)?;
    (0..m)
        .map(|j| {
            let row = tape.slice_rows(a_t, j, j + 1)?;
            tape.transpose(row)
        })
        .collect()
}

struct Reflector {
    v: NodeId,
    coef: NodeId,
}

impl Reflector {
    /// `y - v * (coef * v^T y)` column by column.
    fn apply(&self, tape: &mut Tape, y: NodeId) -> Result<NodeId> {
        let n_s = tape.value(y).rows();
        let vy = tape.hadamard(self.v, y)?;
        let proj = tape.column_sums(vy)?;
        let scaled = tape.hadamard(proj, self.coef)?;
        let spread = tape.broadcast_row(scaled, n_s)?;
        let update = tape.hadamard(self.v, spread)?;
        tape.sub(y, update)
    }
}

/// Thin Householder QR of the batched matrix given by `columns`.
///
/// The reflector for column `k` is `v = x_sub + sign(x_k) ||x_sub|| e_k` with
/// `sign(0) = +1`; samples whose sub-pivot norm is below [`DEGENERATE_NORM`]
/// use the identity instead.
pub fn householder_qr(tape: &mut Tape, columns: &[NodeId]) -> Result<QrResult> {
    let m = columns.len();
    if m == 0 {
        return Err(Error::Shape { op: "householder_qr", detail: "no columns".into() });
    }
    let [n_s, batch] = tape.value(columns[0]).shape();
    if m > n_s {
        return Err(Error::Shape { op: "householder_qr", detail: format!("{m} columns exceed {n_s} rows") });
    }
    for &c in columns {
        if tape.value(c).shape() != [n_s, batch] {
            return Err(Error::Shape { op: "householder_qr", detail: "columns differ in shape".into() });
        }
    }

    let mut work = columns.to_vec();
    let mut reflectors = Vec::with_capacity(m);
    for k in 0..m {
        let x = work[k];
        let mask = tape.constant(Tensor::from_fn(n_s, batch, |i, _| if i >= k { 1.0 } else { 0.0 }));
        let x_sub = tape.hadamard(x, mask)?;
        let sq = tape.hadamard(x_sub, x_sub)?;
        let norm_sq = tape.column_sums(sq)?;

        let (degenerate, sign): (Vec<f64>, Vec<f64>) = {
            let ns = tape.value(norm_sq);
            let xv = tape.value(x);
            (0..batch)
                .map(|b| {
                    let deg = if libm::sqrt(ns.get(0, b)) < DEGENERATE_NORM { 1.0 } else { 0.0 };
                    let sign = if xv.get(k, b) >= 0.0 { 1.0 } else { -1.0 };
                    (deg, sign)
                })
                .unzip()
        };
        let live: Vec<f64> = degenerate.iter().map(|d| 2.0 * (1.0 - d)).collect();
        let degenerate = tape.constant(Tensor::row(&degenerate));
        let sign = tape.constant(Tensor::row(&sign));
        let live = tape.constant(Tensor::row(&live));

        let safe_sq = tape.add(norm_sq, degenerate)?;
        let norm = tape.sqrt(safe_sq)?;
        let signed = tape.hadamard(norm, sign)?;
        let e_k = tape.constant(Tensor::from_fn(n_s, 1, |i, _| if i == k { 1.0 } else { 0.0 }));
        let shift = tape.matmul(e_k, signed)?;
        let v = tape.add(x_sub, shift)?;

        let vv = tape.hadamard(v, v)?;
        let v_sq = tape.column_sums(vv)?;
        let safe_v_sq = tape.add(v_sq, degenerate)?;
        let inv = tape.reciprocal(safe_v_sq)?;
        let coef = tape.hadamard(inv, live)?;

        let reflector = Reflector { v, coef };
        for col in work.iter_mut().skip(k) {
            *col = reflector.apply(tape, *col)?;
        }
        reflectors.push(reflector);
    }

    let mut r = Vec::with_capacity(m);
    for i in 0..m {
        let mut row = Vec::with_capacity(m - i);
        for &col in work.iter().skip(i) {
            row.push(tape.slice_rows(col, i, i + 1)?);
        }
        r.push(row);
    }

    let mut q = Vec::with_capacity(m);
    for j in 0..m {
        let mut col = tape.constant(Tensor::from_fn(n_s, batch, |i, _| if i == j { 1.0 } else { 0.0 }));
        for reflector in reflectors.iter().rev() {
            col = reflector.apply(tape, col)?;
        }
        q.push(col);
    }

    Ok(QrResult { columns: columns.to_vec(), q, r, n_s })
}

/// `sdot = Q[:, n_c] * R[n_c][n_c]`; the identity when `n_c = 0`.
pub fn project_sdot(tape: &mut Tape, qr: &QrResult, n_c: usize) -> Result<NodeId> {
    if qr.n_cols() != n_c + 1 {
        return Err(Error::Shape {
            op: "project_sdot",
            detail: format!("QR has {} columns, expected n_c + 1 = {}", qr.n_cols(), n_c + 1),
        });
    }
    if n_c == 0 {
        return Ok(qr.columns[0]);
    }
    let r_last = qr.r_entry(n_c, n_c).expect("diagonal entry");
    let n_s = qr.n_s;
    let spread = tape.broadcast_row(r_last, n_s)?;
    tape.hadamard(qr.q[n_c], spread)
}

/// Full chain: assemble `A`, factor it, project. With no constants this is
/// `sdot0` itself and no QR is built.
pub fn constrained_derivative(tape: &mut Tape, gradients: &[NodeId], sdot0: NodeId) -> Result<NodeId> {
    let cols = assemble_a(tape, gradients, sdot0)?;
    if gradients.is_empty() {
        return Ok(sdot0);
    }
    let qr = householder_qr(tape, &cols)?;
    project_sdot(tape, &qr, gradients.len())
}

/// Plain-value form of [`constrained_derivative`] for a single sample.
pub fn project_values(gradients: &[Vec<f64>], sdot0: &[f64]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let g: Vec<NodeId> = gradients.iter().map(|g| tape.constant(Tensor::column(g))).collect();
    let s = tape.constant(Tensor::column(sdot0));
    let out = constrained_derivative(&mut tape, &g, s)?;
    Ok(tape.value(out).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check_many;
    use crate::seeding::{stream_rng, Stream};
    use proptest::prelude::*;
    use rand::Rng as _;

    fn qr_of(a: &Tensor) -> (Tensor, Tensor) {
        let mut tape = Tape::new();
        let node = tape.param(a.clone());
        let cols = matrix_columns(&mut tape, node).unwrap();
        let qr = householder_qr(&mut tape, &cols).unwrap();
        (qr.q_value(&tape, 0), qr.r_value(&tape, 0))
    }

    fn frob(m: &Tensor) -> f64 {
        m.norm()
    }

    /// `(I - P) sdot0` via Gram-Schmidt on the gradients, twice for stability.
    fn complement_oracle(grads: &[Vec<f64>], sdot0: &[f64]) -> Vec<f64> {
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for g in grads {
            let mut u = g.clone();
            for _ in 0..2 {
                for b in &basis {
                    let d: f64 = u.iter().zip(b).map(|(x, y)| x * y).sum();
                    u.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
                }
            }
            let n = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            basis.push(u.into_iter().map(|x| x / n).collect());
        }
        let mut out = sdot0.to_vec();
        for b in &basis {
            let d: f64 = out.iter().zip(b).map(|(x, y)| x * y).sum();
            out.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        out
    }

    #[test]
    fn assemble_examples() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::column(&[4.0, 5.0, 6.0]));
        assert_eq!(assemble_a(&tape, &[], s).unwrap(), vec![s]);
        let j = tape.constant(Tensor::row(&[1.0, 0.0, 0.0]));
        let a = assemble_a_matrix(&mut tape, j, s).unwrap();
        assert_eq!(tape.value(a).data(), &[1.0, 4.0, 0.0, 5.0, 0.0, 6.0]);

        let s2 = tape.constant(Tensor::column(&[2.0, 3.0]));
        let j2 = tape.constant(Tensor::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        assert!(assemble_a_matrix(&mut tape, j2, s2).is_err());
        let g1 = tape.constant(Tensor::column(&[1.0, 0.0]));
        let g2 = tape.constant(Tensor::column(&[0.0, 1.0]));
        assert!(matches!(assemble_a(&tape, &[g1, g2], s2), Err(Error::Config(_))));
    }

    #[test]
    fn orthonormal_input() {
        let a = Tensor::from_fn(3, 2, |i, j| if i == j { 1.0 } else { 0.0 });
        let (q, r) = qr_of(&a);
        for j in 0..2 {
            assert!((r.get(j, j).abs() - 1.0).abs() < 1e-15);
            for i in 0..3 {
                assert!((q.get(i, j).abs() - a.get(i, j)).abs() < 1e-15);
            }
        }
        assert_eq!(r.get(1, 0), 0.0);
        assert!(r.get(0, 1).abs() < 1e-15);
    }

    #[test]
    fn two_by_two_hand_example() {
        let a = Tensor::new(2, 2, vec![1.0, 0.3, 0.0, 0.7]).unwrap();
        let (q, r) = qr_of(&a);
        assert!((r.get(1, 1).abs() - 0.7).abs() < 1e-15);
        assert!(q.get(0, 1).abs() < 1e-15);
        assert!((q.get(1, 1).abs() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project_values(&[], &[0.3, 0.7]).unwrap(), vec![0.3, 0.7]);
        let p = project_values(&[vec![1.0, 0.0]], &[0.3, 0.7]).unwrap();
        assert!(p[0].abs() < 1e-15 && (p[1] - 0.7).abs() < 1e-15);
        let p = project_values(&[vec![1.0, 0.0, 0.0]], &[0.0, 0.4, -2.0]).unwrap();
        assert!((p[1] - 0.4).abs() < 1e-10 && (p[2] + 2.0).abs() < 1e-10 && p[0].abs() < 1e-10);
    }

    #[test]
    fn zero_gradient_uses_identity_reflector() {
        let mut tape = Tape::new();
        let g = tape.param(Tensor::column(&[0.0, 0.0, 0.0]));
        let s = tape.param(Tensor::column(&[1.0, 2.0, 2.0]));
        let out = constrained_derivative(&mut tape, &[g], s).unwrap();
        assert!(tape.value(out).is_finite());
        let l = tape.sqnorm(out).unwrap();
        let grads = tape.backward(l).unwrap();
        assert!(grads.get(g).unwrap().is_finite() && grads.get(s).unwrap().is_finite());
    }

    #[test]
    fn random_qr_suite() {
        let mut rng = stream_rng(2024, Stream::Data);
        for case in 0..1000 {
            let n_s = rng.random_range(2..=8);
            let n_c = rng.random_range(0..n_s);
            let a = Tensor::from_fn(n_s, n_c + 1, |_, _| rng.random_range(-2.0..2.0));
            let (q, r) = qr_of(&a);
            let qtq = q.t_matmul(&q).zip_map(&Tensor::identity(n_c + 1), |x, y| x - y);
            assert!(frob(&qtq) <= 1e-10, "case {case}: Q^T Q");
            let recon = q.matmul(&r).zip_map(&a, |x, y| x - y);
            assert!(frob(&recon) <= 1e-10, "case {case}: QR - A");
            for i in 0..=n_c {
                for j in 0..i {
                    assert_eq!(r.get(i, j), 0.0);
                }
            }

            let grads: Vec<Vec<f64>> = (0..n_c).map(|j| a.column_values(j)).collect();
            let sdot0 = a.column_values(n_c);
            let sdot = project_values(&grads, &sdot0).unwrap();
            let s_norm = sdot0.iter().map(|x| x * x).sum::<f64>().sqrt();
            for g in &grads {
                let dot: f64 = g.iter().zip(&sdot).map(|(x, y)| x * y).sum();
                let g_norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!(dot.abs() <= 1e-9 * g_norm * s_norm, "case {case}: perpendicularity");
            }
            let oracle = complement_oracle(&grads, &sdot0);
            let err: f64 = oracle.iter().zip(&sdot).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            assert!(err <= 1e-9, "case {case}: (I - P) oracle {err:e}");
        }
    }

    #[test]
    fn batched_matches_single_sample() {
        let mut rng = stream_rng(5, Stream::Data);
        let (n_s, batch) = (5, 7);
        let g = Tensor::from_fn(n_s, batch, |_, _| rng.random_range(-1.0..1.0));
        let s = Tensor::from_fn(n_s, batch, |_, _| rng.random_range(-1.0..1.0));
        let mut tape = Tape::new();
        let (gi, si) = (tape.constant(g.clone()), tape.constant(s.clone()));
        let out = constrained_derivative(&mut tape, &[gi], si).unwrap();
        for b in 0..batch {
            let single = project_values(&[g.column_values(b)], &s.column_values(b)).unwrap();
            assert_eq!(tape.value(out).column_values(b), single);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn projection_gradient_matches_finite_differences(seed in any::<u64>()) {
            let mut rng = stream_rng(seed, Stream::Data);
            let n_s = rng.random_range(2..=6);
            let n_c = rng.random_range(1..n_s);
            let a = Tensor::from_fn(n_s, n_c + 1, |_, _| rng.random_range(-2.0..2.0));
            let w = Tensor::from_fn(n_s, 1, |_, _| rng.random_range(-1.0..1.0));
            let err = finite_diff_check_many(
                |tape, ids| {
                    let cols = matrix_columns(tape, ids[0])?;
                    let (grads, sdot0) = cols.split_at(n_c);
                    let sdot = constrained_derivative(tape, grads, sdot0[0])?;
                    let wn = tape.constant(w.clone());
                    let lin = tape.dot(sdot, wn)?;
                    let sq = tape.sqnorm(sdot)?;
                    tape.add(lin, sq)
                },
                core::slice::from_ref(&a),
                1e-6,
            )
            .unwrap();
            prop_assert!(err <= 1e-5, "{err:e}");
        }

        #[test]
        fn already_perpendicular_is_a_fixed_point(seed in any::<u64>()) {
            let mut rng = stream_rng(seed, Stream::Data);
            let n_s = rng.random_range(2..=8);
            let n_c = rng.random_range(1..n_s);
            let grads: Vec<Vec<f64>> = (0..n_c)
                .map(|_| (0..n_s).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let raw: Vec<f64> = (0..n_s).map(|_| rng.random_range(-1.0..1.0)).collect();
            let sdot0 = complement_oracle(&grads, &raw);
            let sdot = project_values(&grads, &sdot0).unwrap();
            for (x, y) in sdot.iter().zip(&sdot0) {
                prop_assert!((x - y).abs() <= 1e-10);
            }
        }
    }
}
