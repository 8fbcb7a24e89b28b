//! Optimizer, learning-rate schedule, and the training drivers.
//!
//! Meta-COMET trains in two phases. Phase 1 fits everything to the
//! perpendicularity objective plus the semi-orthogonality penalty. Phase 2
//! keeps the learned `S`, `D` frozen, redraws the remaining parameters, and
//! regresses the projected derivative with early stopping on validation loss.
//! The baseline trains once on its combined loss.

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::SliceRandom;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::losses::{comet_loss, phase1_loss, phase2_loss, residual_l1, Batch, LossWeights, NOISE_AMPLITUDE};
use crate::models::{CometMlpParams, Model, ModelKind, NetworkConfig, Parameters, TwinNetParams};
use crate::seeding::{indexed_rng, Rng, Stream};
use crate::systems::{split_indices, Dataset};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Phase-2 early stopping; `None` disables it.
    pub patience: Option<usize>,
    pub val_fraction: f64,
    pub seed: u64,
    pub noise_amplitude: f64,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_phase1: 1000,
            epochs_phase2: 1000,
            batch_size: 512,
            lr_max: 1e-3,
            lr_min: 1e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            patience: Some(100),
            val_fraction: 0.2,
            seed: 0,
            noise_amplitude: NOISE_AMPLITUDE,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return bad("need 0 < lr_min <= lr_max");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        if self.patience == Some(0) {
            return bad("patience must be at least 1");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction must lie in (0, 1)");
        }
        if !(self.noise_amplitude >= 0.0) {
            return bad("noise_amplitude must be >= 0");
        }
        let w = &self.weights;
        let ortho = [w.w1_ortho, w.w2_ortho].into_iter().flatten();
        if [w.w0, w.w1_comet, w.w2_comet].into_iter().chain(ortho).any(|v| !(v >= 0.0)) {
            return bad("loss weights must be >= 0");
        }
        Ok(())
    }
}

/// `lr_min + (lr_max - lr_min) (1 + cos(pi epoch / (total - 1))) / 2`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total_epochs < 2 {
        return lr_max;
    }
    let frac = epoch.min(total_epochs - 1) as f64 / (total_epochs - 1) as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + libm::cos(PI * frac))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamHyper {
    fn from(c: &TrainConfig) -> Self {
        Self { beta1: c.adam_beta1, beta2: c.adam_beta2, eps: c.adam_eps }
    }
}

/// Adam moments for every trainable tensor; frozen tensors hold `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first: Vec<Option<Tensor>>,
    pub second: Vec<Option<Tensor>>,
    pub step: u64,
}

impl AdamState {
    pub fn new<P: Parameters>(params: &P) -> Self {
        let (first, second) = params
            .named_tensors()
            .iter()
            .zip(params.frozen_mask())
            .map(|((_, t), frozen)| {
                if frozen {
                    (None, None)
                } else {
                    (Some(Tensor::zeros(t.rows(), t.cols())), Some(Tensor::zeros(t.rows(), t.cols())))
                }
            })
            .unzip();
        Self { first, second, step: 0 }
    }
}

/// One bias-corrected Adam update. `grads` is aligned with
/// [`Parameters::named_tensors`]; entries for frozen tensors are ignored.
pub fn adam_step<P: Parameters>(
    state: &mut AdamState,
    params: &mut P,
    grads: &[Option<Tensor>],
    lr: f64,
    hyper: &AdamHyper,
) -> Result<()> {
    let names: Vec<_> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    if grads.len() != names.len() || state.first.len() != names.len() {
        return Err(Error::Shape {
            op: "adam_step",
            detail: format!("{} gradients and {} moments for {} tensors", grads.len(), state.first.len(), names.len()),
        });
    }
    for (name, (g, m)) in names.iter().zip(grads.iter().zip(&state.first)) {
        if let (Some(g), Some(_)) = (g, m) {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - libm::pow(hyper.beta1, t as f64);
    let c2 = 1.0 - libm::pow(hyper.beta2, t as f64);
    for (k, theta) in params.tensors_mut().into_iter().enumerate() {
        let (Some(m), Some(v)) = (state.first[k].as_mut(), state.second[k].as_mut()) else {
            continue;
        };
        let zero;
        let g = match &grads[k] {
            Some(g) => g,
            None => {
                zero = Tensor::zeros(theta.rows(), theta.cols());
                &zero
            }
        };
        let (md, vd, gd) = (m.data_mut(), v.data_mut(), g.data());
        for (i, p) in theta.data_mut().iter_mut().enumerate() {
            md[i] = hyper.beta1 * md[i] + (1.0 - hyper.beta1) * gd[i];
            vd[i] = hyper.beta2 * vd[i] + (1.0 - hyper.beta2) * gd[i] * gd[i];
            let m_hat = md[i] / c1;
            let v_hat = vd[i] / c2;
            *p -= lr * m_hat / (libm::sqrt(v_hat) + hyper.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Sample-weighted mean of the minibatch losses.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (best validation, or the last epoch).
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl History {
    pub fn train_losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.train_loss).collect()
    }

    pub fn val_losses(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.val_loss).collect()
    }
}

/// Counts epochs without improvement and reports when to stop.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    patience: Option<usize>,
    best: f64,
    best_epoch: Option<usize>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: Option<usize>) -> Self {
        Self { patience, best: f64::INFINITY, best_epoch: None, stale: 0 }
    }

    /// Records `loss` for `epoch`; returns whether it is a new best.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = Some(epoch);
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        matches!(self.patience, Some(p) if self.stale >= p)
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

/// Training and validation sample indices for a dataset under `config`.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl DataSplit {
    pub fn new(dataset: &Dataset, config: &TrainConfig) -> Result<Self> {
        let (train, val) = split_indices(dataset.len(), config.val_fraction, config.seed)?;
        Ok(Self { train, val })
    }
}

#[derive(Clone, Copy)]
enum Phase {
    One = 1,
    Two = 2,
    Comet = 3,
}

impl Phase {
    fn name(self) -> &'static str {
        match self {
            Phase::One => "phase 1",
            Phase::Two => "phase 2",
            Phase::Comet => "comet",
        }
    }
}

fn check_dataset(dataset: &Dataset, net: &NetworkConfig) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Dataset("dataset is empty".into()));
    }
    if dataset.n_s() != net.n_s || dataset.n_f() != net.n_f {
        return Err(Error::Config(format!(
            "dataset {} has n_s = {}, n_f = {} but the network expects n_s = {}, n_f = {}",
            dataset.system,
            dataset.n_s(),
            dataset.n_f(),
            net.n_s,
            net.n_f
        )));
    }
    Ok(())
}

/// One pass of minibatch Adam. `loss` builds the scalar objective on a tape.
fn run_epoch<M, L>(
    model: &mut M,
    adam: &mut AdamState,
    hyper: &AdamHyper,
    dataset: &Dataset,
    order: &[usize],
    batch_size: usize,
    lr: f64,
    rng: &mut Rng,
    loss: &L,
) -> Result<f64>
where
    M: Model,
    L: Fn(&mut Tape, &M, &[NodeId], &Batch, &mut Rng) -> Result<NodeId>,
{
    let mut total = 0.0;
    for chunk in order.chunks(batch_size) {
        let batch = dataset.batch(chunk)?;
        let mut tape = Tape::new();
        let ids = model.bind(&mut tape);
        let root = loss(&mut tape, model, &ids, &batch, rng)?;
        let value = tape.value(root).item();
        if !value.is_finite() {
            return Ok(f64::NAN);
        }
        total += value * chunk.len() as f64;
        let mut grads = tape.backward(root)?;
        let g: Vec<Option<Tensor>> = ids.iter().map(|&id| grads.take(id)).collect();
        adam_step(adam, model, &g, lr, hyper)?;
    }
    Ok(total / order.len() as f64)
}

fn phase_rngs(config: &TrainConfig, phase: Phase) -> (Rng, Rng) {
    (
        indexed_rng(config.seed, Stream::Shuffle, phase as u64),
        indexed_rng(config.seed, Stream::ConstraintNoise, phase as u64),
    )
}

/// Phase 1: all parameters trainable, objective = perpendicularity residual +
/// semi-orthogonality penalty, on the training split.
pub fn train_phase1(config: &TrainConfig, net: &NetworkConfig, dataset: &Dataset) -> Result<(TwinNetParams, History)> {
    config.validate()?;
    check_dataset(dataset, net)?;
    let split = DataSplit::new(dataset, config)?;
    let mut model = TwinNetParams::init(*net, config.seed)?;
    let mut adam = AdamState::new(&model);
    let hyper = AdamHyper::from(config);
    let (mut shuffle, mut noise) = phase_rngs(config, Phase::One);
    let mut order = split.train.clone();
    let mut history = History::default();
    let (weights, amplitude) = (config.weights, config.noise_amplitude);
    let loss = |tape: &mut Tape, m: &TwinNetParams, ids: &[NodeId], b: &Batch, rng: &mut Rng| {
        Ok(phase1_loss(tape, m, ids, b, rng, &weights, amplitude)?.total)
    };
    for epoch in 0..config.epochs_phase1 {
        let lr = cosine_lr(epoch, config.epochs_phase1, config.lr_max, config.lr_min);
        order.shuffle(&mut shuffle);
        let train_loss =
            run_epoch(&mut model, &mut adam, &hyper, dataset, &order, config.batch_size, lr, &mut noise, &loss)?;
        if !train_loss.is_finite() {
            return Err(Error::Diverged { phase: Phase::One.name(), epoch });
        }
        history.records.push(EpochRecord { epoch, lr, train_loss, val_loss: None });
    }
    history.best_epoch = config.epochs_phase1.checked_sub(1);
    Ok((model, history))
}

fn validation_l2<M: Model>(model: &M, val: &Batch, weights: &LossWeights) -> Result<f64> {
    let mut tape = Tape::new();
    let ids = model.bind(&mut tape);
    let (total, _) = phase2_loss(&mut tape, model, &ids, val, weights)?;
    Ok(tape.value(total).item())
}

/// Phase 2: reinitializes everything except the (now frozen) factors and
/// regresses the projected derivative. Returns the best-validation parameters.
pub fn train_phase2(config: &TrainConfig, phase1: &TwinNetParams, dataset: &Dataset) -> Result<(TwinNetParams, History)> {
    config.validate()?;
    check_dataset(dataset, &phase1.config)?;
    let split = DataSplit::new(dataset, config)?;
    let val = dataset.batch(&split.val)?;
    let mut model = phase1.reinit_for_phase2(config.seed);
    let mut adam = AdamState::new(&model);
    let hyper = AdamHyper::from(config);
    let (mut shuffle, mut noise) = phase_rngs(config, Phase::Two);
    let mut order = split.train.clone();
    let mut history = History::default();
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = model.clone();
    let weights = config.weights;
    let loss = |tape: &mut Tape, m: &TwinNetParams, ids: &[NodeId], b: &Batch, _: &mut Rng| {
        Ok(phase2_loss(tape, m, ids, b, &weights)?.0)
    };
    for epoch in 0..config.epochs_phase2 {
        let lr = cosine_lr(epoch, config.epochs_phase2, config.lr_max, config.lr_min);
        order.shuffle(&mut shuffle);
        let train_loss =
            run_epoch(&mut model, &mut adam, &hyper, dataset, &order, config.batch_size, lr, &mut noise, &loss)?;
        let val_loss = validation_l2(&model, &val, &weights)?;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::Diverged { phase: Phase::Two.name(), epoch });
        }
        history.records.push(EpochRecord { epoch, lr, train_loss, val_loss: Some(val_loss) });
        if stopper.observe(epoch, val_loss) {
            best = model.clone();
        }
        if stopper.should_stop() {
            history.stopped_early = true;
            break;
        }
    }
    history.best_epoch = stopper.best_epoch();
    Ok((best, history))
}

/// Result of the full two-phase procedure.
#[derive(Clone, Debug)]
pub struct MetaCometRun {
    pub model: TwinNetParams,
    pub phase1: History,
    pub phase2: History,
}

pub fn train_meta_comet(config: &TrainConfig, net: &NetworkConfig, dataset: &Dataset) -> Result<MetaCometRun> {
    let (p1, phase1) = train_phase1(config, net, dataset)?;
    let (model, phase2) = train_phase2(config, &p1, dataset)?;
    Ok(MetaCometRun { model, phase1, phase2 })
}

/// Single-phase training of the baseline on its combined loss, keeping the
/// best-validation parameters.
pub fn train_comet(config: &TrainConfig, net: &NetworkConfig, dataset: &Dataset) -> Result<(CometMlpParams, History)> {
    config.validate()?;
    net.validate(ModelKind::Comet)?;
    check_dataset(dataset, net)?;
    let split = DataSplit::new(dataset, config)?;
    let val = dataset.batch(&split.val)?;
    let mut model = CometMlpParams::init(*net, config.seed)?;
    let mut adam = AdamState::new(&model);
    let hyper = AdamHyper::from(config);
    let (mut shuffle, mut noise) = phase_rngs(config, Phase::Comet);
    let mut order = split.train.clone();
    let mut history = History::default();
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = model.clone();
    let (weights, amplitude) = (config.weights, config.noise_amplitude);
    let loss = |tape: &mut Tape, m: &CometMlpParams, ids: &[NodeId], b: &Batch, rng: &mut Rng| {
        comet_loss(tape, m, ids, b, rng, &weights, amplitude)
    };
    let epochs = config.epochs_phase2;
    for epoch in 0..epochs {
        let lr = cosine_lr(epoch, epochs, config.lr_max, config.lr_min);
        order.shuffle(&mut shuffle);
        let train_loss =
            run_epoch(&mut model, &mut adam, &hyper, dataset, &order, config.batch_size, lr, &mut noise, &loss)?;
        // validation uses the noise-free regression terms only
        let l1 = residual_l1(&model, &val)?;
        if !train_loss.is_finite() || !l1.is_finite() {
            return Err(Error::Diverged { phase: Phase::Comet.name(), epoch });
        }
        history.records.push(EpochRecord { epoch, lr, train_loss, val_loss: Some(l1) });
        if stopper.observe(epoch, l1) {
            best = model.clone();
        }
        if stopper.should_stop() {
            history.stopped_early = true;
            break;
        }
    }
    history.best_epoch = stopper.best_epoch();
    Ok((best, history))
}

/// Residual L1 of `model` on the validation split used during training.
pub fn validation_residual<M: Model>(model: &M, dataset: &Dataset, config: &TrainConfig) -> Result<f64> {
    let split = DataSplit::new(dataset, config)?;
    residual_l1(model, &dataset.batch(&split.val)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::semi_orthogonality_residual;
    use crate::systems::{generate_dataset, SystemKind};

    fn hash(params: &TwinNetParams) -> Vec<u64> {
        params
            .hidden
            .iter()
            .flat_map(|l| l.left.data().iter().chain(l.right.data()).map(|v| v.to_bits()))
            .collect()
    }

    fn small_config(epochs: usize) -> TrainConfig {
        TrainConfig { epochs_phase1: epochs, epochs_phase2: epochs, batch_size: 64, ..TrainConfig::default() }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 1000, 1e-3, 1e-5), 1e-3);
        assert!((cosine_lr(999, 1000, 1e-3, 1e-5) - 1e-5).abs() < 1e-18);
        assert!((cosine_lr(50, 101, 1e-3, 1e-5) - 0.5 * (1e-3 + 1e-5)).abs() < 1e-15);
        assert_eq!(cosine_lr(0, 1, 1e-3, 1e-5), 1e-3);
    }

    #[derive(Clone)]
    struct Scalar {
        theta: Tensor,
        frozen: bool,
    }

    impl Parameters for Scalar {
        fn named_tensors(&self) -> Vec<(alloc::string::String, &Tensor)> {
            alloc::vec![("theta".into(), &self.theta)]
        }
        fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
            alloc::vec![&mut self.theta]
        }
        fn frozen_mask(&self) -> Vec<bool> {
            alloc::vec![self.frozen]
        }
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let hyper = AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let mut p = Scalar { theta: Tensor::scalar(2.0), frozen: false };
        let mut state = AdamState::new(&p);
        adam_step(&mut state, &mut p, &[Some(Tensor::scalar(1.0))], 1e-3, &hyper).unwrap();
        // m_hat = v_hat = 1 after bias correction
        assert!((p.theta.item() - (2.0 - 1e-3 / (1.0 + 1e-8))).abs() < 1e-15);

        let mut q = Scalar { theta: Tensor::scalar(2.0), frozen: false };
        let mut state = AdamState::new(&q);
        for _ in 0..10 {
            adam_step(&mut state, &mut q, &[Some(Tensor::scalar(0.0))], 1e-3, &hyper).unwrap();
        }
        assert_eq!(q.theta.item(), 2.0);
    }

    #[test]
    fn adam_skips_frozen_and_rejects_non_finite() {
        let hyper = AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let mut p = Scalar { theta: Tensor::scalar(2.0), frozen: true };
        let mut state = AdamState::new(&p);
        assert!(state.first[0].is_none());
        adam_step(&mut state, &mut p, &[Some(Tensor::scalar(5.0))], 1e-1, &hyper).unwrap();
        assert_eq!(p.theta.item(), 2.0);

        let mut q = Scalar { theta: Tensor::scalar(2.0), frozen: false };
        let mut state = AdamState::new(&q);
        let err = adam_step(&mut state, &mut q, &[Some(Tensor::scalar(f64::NAN))], 1e-3, &hyper).unwrap_err();
        assert_eq!(err, Error::NonFiniteGradient("theta".into()));
    }

    #[test]
    fn early_stopping_counter() {
        let mut es = EarlyStopping::new(Some(3));
        let losses = [5.0, 4.0, 4.5, 4.2, 4.1, 3.0];
        let mut stopped_at = None;
        for (e, &l) in losses.iter().enumerate() {
            es.observe(e, l);
            if es.should_stop() {
                stopped_at = Some(e);
                break;
            }
        }
        assert_eq!(es.best_epoch(), Some(1));
        assert_eq!(stopped_at, Some(4));
        let mut never = EarlyStopping::new(None);
        for e in 0..1000 {
            never.observe(e, 1.0);
        }
        assert!(!never.should_stop());
    }

    #[test]
    fn phase1_without_constants_is_the_penalty_alone() {
        let sys = SystemKind::MassSpring.system();
        let ds = generate_dataset(&sys, 2, 10.0, 20, 0.0, 1).unwrap();
        let net = NetworkConfig::new(2, 0, 3).with_width(8);
        let (trained, history) = train_phase1(&small_config(50), &net, &ds).unwrap();
        assert!(history.records.last().unwrap().train_loss <= 1e-6);
        for l in &trained.hidden {
            assert!(semi_orthogonality_residual(&l.left) <= 1e-2);
            assert!(semi_orthogonality_residual(&l.right) <= 1e-2);
        }
    }

    #[test]
    fn phase2_keeps_factors_and_is_deterministic() {
        let sys = SystemKind::MassSpring.system();
        let ds = generate_dataset(&sys, 3, 10.0, 20, 0.05, 2).unwrap();
        let net = NetworkConfig::new(2, 1, 3).with_width(10);
        let config = small_config(5);
        let (p1, h1) = train_phase1(&config, &net, &ds).unwrap();
        let (p2, h2) = train_phase2(&config, &p1, &ds).unwrap();
        assert_eq!(hash(&p1), hash(&p2));
        assert!(p2.factors_frozen());
        let (q1, g1) = train_phase1(&config, &net, &ds).unwrap();
        let (q2, g2) = train_phase2(&config, &q1, &ds).unwrap();
        assert_eq!(p2, q2);
        assert_eq!(h1, g1);
        assert_eq!(h2, g2);
    }

    #[test]
    fn dataset_mismatch_is_rejected() {
        let ds = generate_dataset(&SystemKind::TwoBody.system(), 1, 1.0, 5, 0.0, 0).unwrap();
        let net = NetworkConfig::new(2, 1, 2).with_width(4);
        assert!(matches!(train_phase1(&small_config(1), &net, &ds), Err(Error::Config(_))));
    }
}
