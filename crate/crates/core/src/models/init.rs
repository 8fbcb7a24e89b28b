use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal, Uniform};

use super::DenseParams;
use crate::seeding::Rng;
use crate::tensor::Tensor;

/// Fan-in uniform weights in `(-1/sqrt(n_in), 1/sqrt(n_in))`, zero bias.
pub(crate) fn dense(rng: &mut Rng, n_out: usize, n_in: usize) -> DenseParams {
    let a = 1.0 / libm::sqrt(n_in.max(1) as f64);
    let dist = Uniform::new(-a, a).expect("finite bound");
    let weight = Tensor::from_fn(n_out, n_in, |_, _| dist.sample(rng));
    DenseParams { weight, bias: Tensor::zeros(n_out, 1) }
}

/// Singular values drawn from `U(0.5, 1.5)`.
pub(crate) fn singular_values(rng: &mut Rng, rank: usize) -> Tensor {
    Tensor::from_fn(rank, 1, |_, _| rng.random_range(0.5..1.5))
}

/// A `rows x cols` matrix with orthonormal columns: a Gaussian draw passed
/// through modified Gram-Schmidt twice.
pub fn random_semi_orthogonal(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    assert!(cols <= rows, "semi-orthogonal matrix needs cols <= rows");
    loop {
        let mut m = Tensor::from_fn(rows, cols, |_, _| StandardNormal.sample(rng));
        if orthonormalize_columns(&mut m) {
            return m;
        }
    }
}

/// In-place MGS with one re-orthogonalization pass. Returns false on a
/// (numerically) dependent column.
fn orthonormalize_columns(m: &mut Tensor) -> bool {
    let (rows, cols) = (m.rows(), m.cols());
    for j in 0..cols {
        for _pass in 0..2 {
            for k in 0..j {
                let dot: f64 = (0..rows).map(|i| m.get(i, j) * m.get(i, k)).sum();
                for i in 0..rows {
                    let v = m.get(i, j) - dot * m.get(i, k);
                    m.set(i, j, v);
                }
            }
        }
        let norm = libm::sqrt((0..rows).map(|i| m.get(i, j) * m.get(i, j)).sum());
        if norm < 1e-8 {
            return false;
        }
        for i in 0..rows {
            let v = m.get(i, j) / norm;
            m.set(i, j, v);
        }
    }
    true
}

/// `||M^T M - I||_F`.
pub fn semi_orthogonality_residual(m: &Tensor) -> f64 {
    let gram = m.t_matmul(m);
    let n = gram.rows();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            let d = gram.get(i, j) - if i == j { 1.0 } else { 0.0 };
            acc += d * d;
        }
    }
    libm::sqrt(acc)
}
