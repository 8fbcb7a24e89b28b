//! Network parameter containers and forward passes.
//!
//! Two model families share one interface ([`Model`]):
//!
//! * [`TwinNetParams`]: two paths (`sdot0` and constants `c`) with separate
//!   boundary dense layers and shared low-rank hidden factors `S diag(v) D^T`.
//!   The `c` path ignores `v`.
//! * [`CometMlpParams`]: a plain five-layer MLP whose output is split into
//!   `sdot0` and `c`.
//!
//! Both produce the Jacobian rows `grad c_i` with respect to the state as tape
//! nodes, built from activation derivatives, so the projection and the losses
//! stay differentiable end to end.

mod comet;
mod init;
mod twin;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

pub use comet::CometMlpParams;
pub use init::{random_semi_orthogonal, semi_orthogonality_residual};
pub use twin::{LowRankLayerParams, TwinNetParams};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_WIDTH: usize = 250;
pub const DEFAULT_DEPTH: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    MetaComet,
    Comet,
}

impl ModelKind {
    pub fn tag(self) -> &'static str {
        match self {
            ModelKind::MetaComet => "meta-comet",
            ModelKind::Comet => "comet",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "meta-comet" | "twin" => Ok(ModelKind::MetaComet),
            "comet" => Ok(ModelKind::Comet),
            other => Err(Error::Config(format!("unknown model kind `{other}` (expected meta-comet or comet)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Silu,
    Relu,
}

impl Activation {
    pub fn tag(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
            Activation::Relu => "relu",
        }
    }

    pub(crate) fn apply(self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        match self {
            Activation::Silu => tape.silu(x),
            Activation::Relu => tape.relu(x),
        }
    }

    pub(crate) fn derivative(self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        match self {
            Activation::Silu => tape.silu_prime(x),
            Activation::Relu => tape.relu_indicator(x),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "silu" => Ok(Activation::Silu),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

/// Shape of a network. `rank` and `depth_hidden` only apply to the twin model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NetworkConfig {
    pub n_s: usize,
    pub n_c: usize,
    pub n_f: usize,
    pub width: usize,
    pub depth_hidden: usize,
    pub rank: usize,
    pub activation: Activation,
}

impl NetworkConfig {
    pub fn new(n_s: usize, n_c: usize, rank: usize) -> Self {
        Self {
            n_s,
            n_c,
            n_f: 0,
            width: DEFAULT_WIDTH,
            depth_hidden: DEFAULT_DEPTH,
            rank,
            activation: Activation::Silu,
        }
    }

    pub fn with_force(mut self, n_f: usize) -> Self {
        self.n_f = n_f;
        self
    }

    pub fn with_width(mut self, width: usize) -> Self {
        self.width = width;
        self
    }

    pub fn with_depth(mut self, depth: usize) -> Self {
        self.depth_hidden = depth;
        self
    }

    /// Input width: state plus force.
    pub fn n_in(&self) -> usize {
        self.n_s + self.n_f
    }

    pub fn validate(&self, kind: ModelKind) -> Result<()> {
        if self.n_s == 0 {
            return Err(Error::Config("n_s must be at least 1".into()));
        }
        if self.n_c >= self.n_s {
            return Err(Error::Config(format!("n_c must be < n_s (got n_c = {}, n_s = {})", self.n_c, self.n_s)));
        }
        if self.width == 0 {
            return Err(Error::Config("width must be at least 1".into()));
        }
        if kind == ModelKind::MetaComet {
            if self.rank == 0 {
                return Err(Error::Config("rank must be at least 1".into()));
            }
            if self.width < self.rank {
                return Err(Error::Config(format!("width {} is smaller than rank {}", self.width, self.rank)));
            }
        }
        Ok(())
    }
}

/// Exact number of scalar parameters.
pub fn count_params(config: &NetworkConfig, kind: ModelKind) -> usize {
    let w = config.width;
    let n_in = config.n_in();
    let (n_s, n_c) = (config.n_s, config.n_c);
    match kind {
        ModelKind::MetaComet => {
            2 * (n_in * w + w) + (w * n_s + n_s) + (w * n_c + n_c) + config.depth_hidden * (2 * w * config.rank + config.rank)
        }
        ModelKind::Comet => (n_in * w + w) + 3 * (w * w + w) + (w * (n_s + n_c) + (n_s + n_c)),
    }
}

/// Weight (`out x in`) and bias (`out x 1`) of an affine layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl DenseParams {
    pub fn zeros(n_out: usize, n_in: usize) -> Self {
        Self { weight: Tensor::zeros(n_out, n_in), bias: Tensor::zeros(n_out, 1) }
    }

    pub fn n_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn n_out(&self) -> usize {
        self.weight.rows()
    }
}

/// Flat access to a model's named parameter tensors, in a fixed order.
pub trait Parameters {
    fn named_tensors(&self) -> Vec<(String, &Tensor)>;

    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    /// Per-tensor frozen flags, aligned with [`Parameters::named_tensors`].
    fn frozen_mask(&self) -> Vec<bool>;

    fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Puts every tensor on the tape; frozen ones as constants.
    fn bind(&self, tape: &mut Tape) -> Vec<NodeId> {
        let frozen = self.frozen_mask();
        self.named_tensors()
            .into_iter()
            .zip(frozen)
            .map(|((_, t), f)| if f { tape.constant(t.clone()) } else { tape.param(t.clone()) })
            .collect()
    }
}

/// Tape nodes of one batched forward pass.
#[derive(Clone, Debug)]
pub struct Evaluated {
    /// Unconstrained derivative, `n_s x B`.
    pub sdot0: NodeId,
    /// Constants of motion, `n_c x B`.
    pub constants: NodeId,
    /// `grad_s c_i` for each constant, each `n_s x B`. Empty unless requested.
    pub gradients: Vec<NodeId>,
}

/// A model that predicts `sdot0` and constants of motion from `[s, F]`.
pub trait Model: Parameters + Clone {
    fn config(&self) -> &NetworkConfig;

    fn kind(&self) -> ModelKind;

    /// Batched forward pass on `x` (`n_in x B`) using parameter nodes from
    /// [`Parameters::bind`]. With `with_gradients`, also builds `grad_s c_i`.
    fn evaluate(&self, tape: &mut Tape, params: &[NodeId], x: NodeId, with_gradients: bool) -> Result<Evaluated>;
}

/// Builds the `n_in x B` input node `[s; F]` from column-major sample slices.
pub fn input_batch(tape: &mut Tape, states: &Tensor, forces: Option<&Tensor>) -> Result<NodeId> {
    let s = tape.constant(states.clone());
    match forces {
        Some(f) if f.rows() > 0 => {
            let f = tape.constant(f.clone());
            tape.concat_rows(&[s, f])
        }
        _ => Ok(s),
    }
}

/// Single-sample input column `[s; F]`.
pub fn input_column(tape: &mut Tape, s: &[f64], force: &[f64]) -> NodeId {
    let mut v = s.to_vec();
    v.extend_from_slice(force);
    tape.constant(Tensor::column(&v))
}

/// Checks an input node against a config.
pub(crate) fn check_input(tape: &Tape, x: NodeId, config: &NetworkConfig, model: &'static str) -> Result<()> {
    let rows = tape.value(x).rows();
    if rows != config.n_in() {
        return Err(Error::Shape {
            op: model,
            detail: format!("input has {rows} rows, expected n_s + n_f = {}", config.n_in()),
        });
    }
    Ok(())
}

/// The `n_c x n_s` Jacobian `dc/ds` for a single sample, as one tape node.
pub fn constants_input_gradient<M: Model>(tape: &mut Tape, model: &M, params: &[NodeId], x: NodeId) -> Result<NodeId> {
    let cols = tape.value(x).cols();
    if cols != 1 {
        return Err(Error::Shape { op: "constants_input_gradient", detail: format!("expected one sample, got {cols}") });
    }
    let out = model.evaluate(tape, params, x, true)?;
    let n_s = model.config().n_s;
    if out.gradients.is_empty() {
        return Ok(tape.constant(Tensor::zeros(0, n_s)));
    }
    let rows = out
        .gradients
        .iter()
        .map(|&g| tape.transpose(g))
        .collect::<Result<Vec<_>>>()?;
    tape.concat_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reproduces_parameter_table() {
        // (n_s, n_c, rank, twin, comet)
        let rows = [
            (2, 1, 10, 12273, 189753),  // mass-spring
            (4, 3, 10, 14277, 191257),  // 2d pendulum
            (4, 2, 10, 14026, 191006),  // damped pendulum
            (8, 7, 20, 28305, 194265),  // two body
            (4, 2, 30, 34066, 191006),  // nonlinear spring 2d
            (2, 1, 10, 12273, 189753),  // Lotka-Volterra
        ];
        for (n_s, n_c, r, twin, comet) in rows {
            let cfg = NetworkConfig::new(n_s, n_c, r);
            assert_eq!(count_params(&cfg, ModelKind::MetaComet), twin, "twin n_s={n_s}");
            assert_eq!(count_params(&cfg, ModelKind::Comet), comet, "comet n_s={n_s}");
        }
    }

    #[test]
    fn config_validation() {
        let ok = NetworkConfig::new(2, 1, 10);
        assert!(ok.validate(ModelKind::MetaComet).is_ok());
        assert!(NetworkConfig::new(2, 2, 10).validate(ModelKind::MetaComet).is_err());
        assert!(NetworkConfig::new(2, 1, 0).validate(ModelKind::MetaComet).is_err());
        assert!(NetworkConfig::new(2, 1, 300).validate(ModelKind::MetaComet).is_err());
        assert!(NetworkConfig::new(2, 1, 300).validate(ModelKind::Comet).is_ok());
    }

    #[test]
    fn kind_tags_round_trip() {
        for k in [ModelKind::MetaComet, ModelKind::Comet] {
            assert_eq!(k.tag().parse::<ModelKind>().unwrap(), k);
        }
        assert!("mlp".parse::<ModelKind>().is_err());
    }
}
