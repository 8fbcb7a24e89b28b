//! Training objectives. Every loss is a batch mean over samples.

use alloc::vec::Vec;

use rand_distr::{Distribution, Uniform};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::models::{input_batch, CometMlpParams, Model, TwinNetParams};
use crate::projection::constrained_derivative;
use crate::seeding::Rng;
use crate::tensor::Tensor;

/// Amplitude of the one-sided uniform perturbation used in the constraint term.
pub const NOISE_AMPLITUDE: f64 = 0.1;

/// Samples as columns: states and targets are `n_s x B`, forces `n_f x B`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub states: Tensor,
    pub targets: Tensor,
    pub forces: Option<Tensor>,
}

impl Batch {
    pub fn new(states: Tensor, targets: Tensor, forces: Option<Tensor>) -> Result<Self> {
        if states.shape() != targets.shape() {
            return Err(Error::Shape {
                op: "batch",
                detail: alloc::format!("states {:?} vs targets {:?}", states.shape(), targets.shape()),
            });
        }
        if let Some(f) = &forces {
            if f.cols() != states.cols() {
                return Err(Error::Shape { op: "batch", detail: "force column count differs".into() });
            }
        }
        Ok(Self { states, targets, forces })
    }

    pub fn len(&self) -> usize {
        self.states.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.states.cols() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Weight of the unprojected term in the phase-2 loss.
    pub w0: f64,
    pub w1_comet: f64,
    pub w2_comet: f64,
    /// Semi-orthogonality weights; `None` means `1 / r^2`.
    pub w1_ortho: Option<f64>,
    pub w2_ortho: Option<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w0: 1.0, w1_comet: 1.0, w2_comet: 1.0, w1_ortho: None, w2_ortho: None }
    }
}

impl LossWeights {
    pub fn ortho_weights(&self, rank: usize) -> (f64, f64) {
        let default = 1.0 / (rank * rank) as f64;
        (self.w1_ortho.unwrap_or(default), self.w2_ortho.unwrap_or(default))
    }
}

/// One perturbation vector with coordinates i.i.d. in `[0, 0.1)`.
pub fn sample_constraint_noise(rng: &mut Rng, n_s: usize) -> Vec<f64> {
    let dist = Uniform::new(0.0, NOISE_AMPLITUDE).expect("valid range");
    (0..n_s).map(|_| dist.sample(rng)).collect()
}

/// Perturbation for a whole batch, drawn sample by sample; `n_s x B`.
pub fn constraint_noise_batch(rng: &mut Rng, n_s: usize, batch: usize, amplitude: f64) -> Tensor {
    let mut out = Tensor::zeros(n_s, batch);
    if amplitude == 0.0 {
        return out;
    }
    let dist = Uniform::new(0.0, amplitude).expect("valid range");
    for b in 0..batch {
        for i in 0..n_s {
            out.set(i, b, dist.sample(rng));
        }
    }
    out
}

fn zero_scalar(tape: &mut Tape) -> NodeId {
    tape.constant(Tensor::scalar(0.0))
}

/// `mean_b sum_i (grad c_i . sdot0)^2` at states shifted by fresh noise.
pub fn ortho_residual<M: Model>(
    tape: &mut Tape,
    model: &M,
    params: &[NodeId],
    batch: &Batch,
    rng: &mut Rng,
    amplitude: f64,
) -> Result<NodeId> {
    if model.config().n_c == 0 {
        return Ok(zero_scalar(tape));
    }
    let n = batch.len();
    let noise = constraint_noise_batch(rng, model.config().n_s, n, amplitude);
    let shifted = batch.states.zip_map(&noise, |s, e| s + e);
    let x = input_batch(tape, &shifted, batch.forces.as_ref())?;
    let out = model.evaluate(tape, params, x, true)?;
    let mut dots = Vec::with_capacity(out.gradients.len());
    for &g in &out.gradients {
        let prod = tape.hadamard(g, out.sdot0)?;
        dots.push(tape.column_sums(prod)?);
    }
    let stacked = tape.concat_rows(&dots)?;
    let total = tape.sqnorm(stacked)?;
    tape.scale(total, 1.0 / n as f64)
}

/// `sum_l w1 ||S^T S - I||_F^2 + w2 ||D^T D - I||_F^2`.
pub fn semi_orthogonality_penalty(tape: &mut Tape, factors: &[(NodeId, NodeId)], w1: f64, w2: f64) -> Result<NodeId> {
    let mut total = zero_scalar(tape);
    for &(s, d) in factors {
        for (m, w) in [(s, w1), (d, w2)] {
            let m_t = tape.transpose(m)?;
            let gram = tape.matmul(m_t, m)?;
            let resid = tape.identity_minus(gram)?;
            let sq = tape.sqnorm(resid)?;
            let weighted = tape.scale(sq, w)?;
            total = tape.add(total, weighted)?;
        }
    }
    Ok(total)
}

/// Phase-1 objective with its two parts kept visible.
#[derive(Clone, Copy, Debug)]
pub struct Phase1Terms {
    pub total: NodeId,
    pub residual: NodeId,
    pub penalty: NodeId,
}

pub fn phase1_loss(
    tape: &mut Tape,
    model: &TwinNetParams,
    params: &[NodeId],
    batch: &Batch,
    rng: &mut Rng,
    weights: &LossWeights,
    amplitude: f64,
) -> Result<Phase1Terms> {
    let residual = ortho_residual(tape, model, params, batch, rng, amplitude)?;
    let (w1, w2) = weights.ortho_weights(model.config.rank);
    let factors = model.factor_nodes(params);
    let penalty = semi_orthogonality_penalty(tape, &factors, w1, w2)?;
    let total = tape.add(residual, penalty)?;
    Ok(Phase1Terms { total, residual, penalty })
}

/// Regression terms shared by the phase-2 and COMET losses.
#[derive(Clone, Copy, Debug)]
pub struct RegressionTerms {
    /// `mean ||sdot - target||^2` with the projected derivative.
    pub projected: NodeId,
    /// `mean ||sdot0 - target||^2`.
    pub unprojected: NodeId,
}

pub fn regression_terms<M: Model>(tape: &mut Tape, model: &M, params: &[NodeId], batch: &Batch) -> Result<RegressionTerms> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::Dataset("empty batch".into()));
    }
    let x = input_batch(tape, &batch.states, batch.forces.as_ref())?;
    let out = model.evaluate(tape, params, x, true)?;
    let sdot = constrained_derivative(tape, &out.gradients, out.sdot0)?;
    let target = tape.constant(batch.targets.clone());
    let diff = tape.sub(sdot, target)?;
    let sq = tape.sqnorm(diff)?;
    let projected = tape.scale(sq, 1.0 / n as f64)?;
    let diff0 = tape.sub(out.sdot0, target)?;
    let sq0 = tape.sqnorm(diff0)?;
    let unprojected = tape.scale(sq0, 1.0 / n as f64)?;
    Ok(RegressionTerms { projected, unprojected })
}

/// Phase-2 objective: projected error plus `w0` times the unprojected error.
pub fn phase2_loss<M: Model>(
    tape: &mut Tape,
    model: &M,
    params: &[NodeId],
    batch: &Batch,
    weights: &LossWeights,
) -> Result<(NodeId, RegressionTerms)> {
    let terms = regression_terms(tape, model, params, batch)?;
    let weighted = tape.scale(terms.unprojected, weights.w0)?;
    let total = tape.add(terms.projected, weighted)?;
    Ok((total, terms))
}

/// Single-network objective of the baseline: both regression terms plus the
/// noisy perpendicularity term.
pub fn comet_loss(
    tape: &mut Tape,
    model: &CometMlpParams,
    params: &[NodeId],
    batch: &Batch,
    rng: &mut Rng,
    weights: &LossWeights,
    amplitude: f64,
) -> Result<NodeId> {
    let terms = regression_terms(tape, model, params, batch)?;
    let second = tape.scale(terms.unprojected, weights.w1_comet)?;
    let partial = tape.add(terms.projected, second)?;
    let ortho = ortho_residual(tape, model, params, batch, rng, amplitude)?;
    let third = tape.scale(ortho, weights.w2_comet)?;
    tape.add(partial, third)
}

/// Mean squared error of the projected derivative; evaluation only.
pub fn residual_l1<M: Model>(model: &M, batch: &Batch) -> Result<f64> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape);
    let terms = regression_terms(&mut tape, model, &params, batch)?;
    Ok(tape.value(terms.projected).item())
}
