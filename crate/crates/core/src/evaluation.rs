//! Rollouts of learned models, RMSE statistics, constant drift, contour
//! grids, and the number-of-constants scan.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::models::{input_batch, Model, NetworkConfig};
use crate::projection::constrained_derivative;
use crate::seeding::{indexed_rng, Stream};
use crate::systems::{integrate, linspace, Dataset, ForceCoefficients, Method, SystemDef, Trajectory};
use crate::tensor::Tensor;
use crate::training::{train_meta_comet, validation_residual, TrainConfig};

/// Tolerances used when integrating a learned field.
pub const ROLLOUT_METHOD: Method = Method::Rk45 { atol: 1e-8, rtol: 1e-8 };
/// Tolerances of the ground-truth integrations in the conservation check.
pub const REFERENCE_METHOD: Method = Method::Rk45 { atol: 1e-12, rtol: 1e-12 };
/// Default relative-L1 level separating "flat" from a jump.
pub const JUMP_THRESHOLD: f64 = 3.0;
/// `|mean|` below this switches [`constant_drift`] to absolute drift.
pub const ABSOLUTE_DRIFT_BELOW: f64 = 1e-12;

/// A time-independent vector field `(s, F) -> sdot`.
pub trait Field {
    fn n_s(&self) -> usize;

    fn derivative(&self, s: &[f64], force: &[f64]) -> Result<Vec<f64>>;
}

/// The exact dynamics of a system.
#[derive(Clone, Copy, Debug)]
pub struct TrueField(pub SystemDef);

impl Field for TrueField {
    fn n_s(&self) -> usize {
        self.0.n_s()
    }

    fn derivative(&self, s: &[f64], force: &[f64]) -> Result<Vec<f64>> {
        self.0.derivative(s, 0.0, force)
    }
}

/// A trained model as a vector field: `sdot0` projected away from the
/// gradients of its constants.
#[derive(Clone, Copy, Debug)]
pub struct LearnedField<'a, M> {
    pub model: &'a M,
}

fn bind_constants<M: Model>(model: &M, tape: &mut Tape) -> Vec<NodeId> {
    model.named_tensors().into_iter().map(|(_, t)| tape.constant(t.clone())).collect()
}

impl<'a, M: Model> LearnedField<'a, M> {
    pub fn new(model: &'a M) -> Self {
        Self { model }
    }

    fn input(&self, tape: &mut Tape, states: &Tensor, forces: Option<&Tensor>) -> Result<NodeId> {
        let cfg = self.model.config();
        if states.rows() != cfg.n_s {
            return Err(Error::Shape {
                op: "learned field",
                detail: format!("state has {} entries, model expects {}", states.rows(), cfg.n_s),
            });
        }
        let n_f = forces.map_or(0, |f| f.rows());
        if n_f != cfg.n_f {
            return Err(Error::Shape {
                op: "learned field",
                detail: format!("force has {n_f} entries, model expects {}", cfg.n_f),
            });
        }
        input_batch(tape, states, forces)
    }

    /// Unprojected `sdot0` at one state.
    pub fn unconstrained(&self, s: &[f64], force: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let params = bind_constants(self.model, &mut tape);
        let f = Tensor::column(force);
        let x = self.input(&mut tape, &Tensor::column(s), (!force.is_empty()).then_some(&f))?;
        let out = self.model.evaluate(&mut tape, &params, x, false)?;
        Ok(tape.value(out.sdot0).data().to_vec())
    }

    /// Learned constants at each column of `states` (`n_s x B`); returns `n_c x B`.
    pub fn constants(&self, states: &Tensor, forces: Option<&Tensor>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = bind_constants(self.model, &mut tape);
        let x = self.input(&mut tape, states, forces)?;
        let out = self.model.evaluate(&mut tape, &params, x, false)?;
        Ok(tape.value(out.constants).clone())
    }
}

impl<M: Model> Field for LearnedField<'_, M> {
    fn n_s(&self) -> usize {
        self.model.config().n_s
    }

    fn derivative(&self, s: &[f64], force: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let params = bind_constants(self.model, &mut tape);
        let f = Tensor::column(force);
        let x = self.input(&mut tape, &Tensor::column(s), (!force.is_empty()).then_some(&f))?;
        let out = self.model.evaluate(&mut tape, &params, x, true)?;
        let sdot = constrained_derivative(&mut tape, &out.gradients, out.sdot0)?;
        Ok(tape.value(sdot).data().to_vec())
    }
}

/// Integrates `field` from `s0` and samples `n_points` evenly on `[0, t_end]`.
pub fn rollout_model<F: Field>(
    field: &F,
    s0: &[f64],
    t_end: f64,
    n_points: usize,
    force: &ForceCoefficients,
    method: Method,
) -> Result<Trajectory> {
    if s0.len() != field.n_s() {
        return Err(Error::Shape {
            op: "rollout",
            detail: format!("initial state has {} entries, field expects {}", s0.len(), field.n_s()),
        });
    }
    let times = linspace(0.0, t_end, n_points);
    let forced = *force != ForceCoefficients::NONE;
    integrate(
        |t, s| {
            let f = if forced { force.at(t) } else { Vec::new() };
            field.derivative(s, &f)
        },
        s0,
        &times,
        method,
    )
}

/// Linear-interpolation percentile (`p` in `[0, 100]`) of sorted values.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let pos = (p / 100.0).clamp(0.0, 1.0) * (n - 1) as f64;
            let lo = libm::floor(pos) as usize;
            let hi = (lo + 1).min(n - 1);
            let frac = pos - lo as f64;
            if frac == 0.0 || sorted[lo] == sorted[hi] {
                sorted[lo]
            } else {
                sorted[lo] + frac * (sorted[hi] - sorted[lo])
            }
        }
    }
}

/// RMSE summary over a set of simulations.
#[derive(Clone, Debug, PartialEq)]
pub struct RmseStats {
    /// One entry per simulation; failed rollouts are `+inf`.
    pub per_sim: Vec<f64>,
    pub median: f64,
    pub p2_5: f64,
    pub p97_5: f64,
    pub failures: usize,
}

impl RmseStats {
    pub fn from_values(per_sim: Vec<f64>) -> Result<Self> {
        if per_sim.is_empty() {
            return Err(Error::Config("no simulations".into()));
        }
        let failures = per_sim.iter().filter(|v| !v.is_finite()).count();
        if failures == per_sim.len() {
            return Err(Error::AllRolloutsFailed(failures));
        }
        let mut sorted = per_sim.clone();
        sorted.sort_by(f64::total_cmp);
        Ok(Self {
            median: percentile(&sorted, 50.0),
            p2_5: percentile(&sorted, 2.5),
            p97_5: percentile(&sorted, 97.5),
            failures,
            per_sim,
        })
    }
}

/// Root mean squared difference over every time and state entry.
pub fn trajectory_rmse(a: &Trajectory, b: &Trajectory) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (x, y) in a.states.iter().zip(&b.states) {
        for (u, v) in x.iter().zip(y) {
            total += (u - v) * (u - v);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        libm::sqrt(total / count as f64)
    }
}

/// Initial state, force and exact trajectory of simulation `index`. Ground
/// truth attempts that fail are redrawn from the next sub-index.
pub fn reference_simulation(system: &SystemDef, seed: u64, index: u64, t_end: f64, n_points: usize) -> Result<(Vec<f64>, ForceCoefficients, Trajectory)> {
    let truth = TrueField(*system);
    let mut last = None;
    for attempt in 0..16u64 {
        let mut rng = indexed_rng(seed, Stream::Rollout, (index << 8) | attempt);
        let s0 = system.sample_initial(&mut rng);
        let coeffs = if system.forced() { ForceCoefficients::sample(&mut rng) } else { ForceCoefficients::NONE };
        match rollout_model(&truth, &s0, t_end, n_points, &coeffs, Method::DATA) {
            Ok(tr) => return Ok((s0, coeffs, tr)),
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap_or(Error::AllRolloutsFailed(0)))
}

/// One simulation of [`rmse_stats`]: `+inf` if the learned rollout fails.
pub fn simulation_rmse<F: Field>(field: &F, system: &SystemDef, index: usize, t_end: f64, n_points: usize, seed: u64) -> Result<f64> {
    let (s0, coeffs, truth) = reference_simulation(system, seed, index as u64, t_end, n_points)?;
    Ok(match rollout_model(field, &s0, t_end, n_points, &coeffs, ROLLOUT_METHOD) {
        Ok(tr) => {
            let e = trajectory_rmse(&tr, &truth);
            if e.is_finite() { e } else { f64::INFINITY }
        }
        Err(_) => f64::INFINITY,
    })
}

/// Rolls `field` out from `n_sims` random initial states and compares each
/// against the exact trajectory from the same state.
pub fn rmse_stats<F: Field>(field: &F, system: &SystemDef, n_sims: usize, t_end: f64, n_points: usize, seed: u64) -> Result<RmseStats> {
    if n_sims == 0 {
        return Err(Error::Config("n_sims must be at least 1".into()));
    }
    let per_sim = (0..n_sims)
        .map(|i| simulation_rmse(field, system, i, t_end, n_points, seed))
        .collect::<Result<Vec<_>>>()?;
    RmseStats::from_values(per_sim)
}

/// Values of a quantity along a trajectory and their spread.
#[derive(Clone, Debug, PartialEq)]
pub struct DriftSeries {
    pub values: Vec<f64>,
    /// `(max - min) / |mean|`, or `max - min` when `absolute` is set.
    pub drift: f64,
    pub absolute: bool,
}

pub fn drift_of(values: Vec<f64>) -> Result<DriftSeries> {
    if values.is_empty() {
        return Err(Error::Config("empty trajectory".into()));
    }
    let (min, max) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let spread = max - min;
    let absolute = libm::fabs(mean) < ABSOLUTE_DRIFT_BELOW;
    let drift = if absolute { spread } else { spread / libm::fabs(mean) };
    Ok(DriftSeries { values, drift, absolute })
}

/// Evaluates `rule` at every state of `trajectory`.
pub fn constant_drift(rule: impl Fn(&[f64]) -> Result<f64>, trajectory: &Trajectory) -> Result<DriftSeries> {
    drift_of(trajectory.states.iter().map(|s| rule(s)).collect::<Result<Vec<_>>>()?)
}

/// All learned constants along a trajectory, one series per constant.
pub fn learned_drift<M: Model>(model: &M, trajectory: &Trajectory, force: &ForceCoefficients) -> Result<Vec<DriftSeries>> {
    let field = LearnedField::new(model);
    let n_s = model.config().n_s;
    let states = Tensor::from_fn(n_s, trajectory.states.len(), |i, j| trajectory.states[j][i]);
    let forces = (model.config().n_f > 0)
        .then(|| {
            let cols: Vec<Vec<f64>> = trajectory.times.iter().map(|&t| force.at(t)).collect();
            Tensor::from_fn(model.config().n_f, cols.len(), |i, j| cols[j][i])
        });
    let c = field.constants(&states, forces.as_ref())?;
    (0..c.rows()).map(|k| drift_of(c.row_slice(k).to_vec())).collect()
}

/// Square grid over two state coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub dims: (usize, usize),
    pub bounds: ((f64, f64), (f64, f64)),
    pub resolution: usize,
    /// Values of the other coordinates (full state; the two grid entries are overwritten).
    pub base: Vec<f64>,
}

impl GridSpec {
    pub fn validate(&self, n_s: usize) -> Result<()> {
        if self.resolution < 2 {
            return Err(Error::Config(format!("grid resolution must be at least 2, got {}", self.resolution)));
        }
        let (i, j) = self.dims;
        if i >= n_s || j >= n_s || i == j {
            return Err(Error::Config(format!("grid dims ({i}, {j}) invalid for {n_s} states")));
        }
        if self.base.len() != n_s {
            return Err(Error::Config(format!("grid base has {} entries, expected {n_s}", self.base.len())));
        }
        Ok(())
    }

    /// Every grid state as an `n_s x resolution^2` tensor, row-major over `(a, b)`.
    pub fn states(&self) -> Tensor {
        let (i, j) = self.dims;
        let n = self.resolution;
        let xs = linspace(self.bounds.0 .0, self.bounds.0 .1, n);
        let ys = linspace(self.bounds.1 .0, self.bounds.1 .1, n);
        Tensor::from_fn(self.base.len(), n * n, |k, col| {
            if k == i {
                xs[col / n]
            } else if k == j {
                ys[col % n]
            } else {
                self.base[k]
            }
        })
    }

    pub fn axes(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.resolution;
        (linspace(self.bounds.0 .0, self.bounds.0 .1, n), linspace(self.bounds.1 .0, self.bounds.1 .1, n))
    }
}

/// Learned constant `index` over the grid; entry `(a, b)` sits at the `a`-th
/// value of the first coordinate and the `b`-th of the second.
pub fn contour_grid<M: Model>(model: &M, grid: &GridSpec, index: usize) -> Result<Tensor> {
    let cfg = model.config();
    grid.validate(cfg.n_s)?;
    if index >= cfg.n_c {
        return Err(Error::Config(format!("constant index {index} out of range (n_c = {})", cfg.n_c)));
    }
    let states = grid.states();
    let forces = (cfg.n_f > 0).then(|| Tensor::zeros(cfg.n_f, states.cols()));
    let c = LearnedField::new(model).constants(&states, forces.as_ref())?;
    let n = grid.resolution;
    Ok(Tensor::from_fn(n, n, |a, b| c.get(index, a * n + b)))
}

/// Least-squares `y ~ scale * x + shift`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineFit {
    pub scale: f64,
    pub shift: f64,
    /// Pearson correlation of `x` and `y`.
    pub correlation: f64,
}

impl AffineFit {
    pub fn apply(&self, x: f64) -> f64 {
        self.scale * x + self.shift
    }
}

pub fn affine_fit(x: &[f64], y: &[f64]) -> Result<AffineFit> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Config(format!("affine fit needs two equal series of length >= 2, got {} and {}", x.len(), y.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    let scale = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let correlation = if sxx > 0.0 && syy > 0.0 { sxy / libm::sqrt(sxx * syy) } else { 0.0 };
    Ok(AffineFit { scale, shift: my - scale * mx, correlation })
}

/// Relative drift of every true constant along `n_ics` exact trajectories on
/// `[0, t_end]` (forced systems under a random force): for each constant the largest `(max - min) / max(|mean|, floor)`.
pub fn conservation_drift(system: &SystemDef, n_ics: usize, t_end: f64, seed: u64, floor: f64) -> Result<Vec<f64>> {
    let mut worst = vec![0.0f64; system.n_c_true()];
    let times = linspace(0.0, t_end, 201);
    for i in 0..n_ics {
        let mut rng = indexed_rng(seed, Stream::Rollout, i as u64);
        let s0 = system.sample_initial(&mut rng);
        let coeffs = if system.forced() { ForceCoefficients::sample(&mut rng) } else { ForceCoefficients::NONE };
        let traj = integrate(|t, s| system.derivative(s, t, &coeffs.at(t)), &s0, &times, REFERENCE_METHOD)?;
        let values = traj.states.iter().map(|s| system.true_constants(s)).collect::<Result<Vec<_>>>()?;
        for (k, w) in worst.iter_mut().enumerate() {
            let series: Vec<f64> = values.iter().map(|v| v[k]).collect();
            let (min, max) = series.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            let mean = series.iter().sum::<f64>() / series.len() as f64;
            *w = w.max((max - min) / libm::fabs(mean).max(floor));
        }
    }
    Ok(worst)
}

/// One training of the scan.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanCell {
    pub n_c: usize,
    pub seed_index: usize,
    pub seed: u64,
}

/// Outcome of one scan cell.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanRun {
    pub cell: ScanCell,
    /// Residual L1 on the validation split of the returned model.
    pub l1: f64,
    /// Phase-2 validation loss per epoch.
    pub curve: Vec<f64>,
}

/// Aggregated scan.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanResult {
    pub n_c: Vec<usize>,
    pub mean: Vec<f64>,
    /// Population standard deviation over seeds.
    pub std: Vec<f64>,
    pub relative: Vec<f64>,
    pub relative_std: Vec<f64>,
    pub threshold: f64,
    pub detected: usize,
    pub runs: Vec<ScanRun>,
}

/// The cells of a scan over `n_c = 0..=nc_max` with `n_seeds` seeds each;
/// seed `k` is `root + k`.
pub fn scan_cells(system: &SystemDef, nc_max: usize, n_seeds: usize, root_seed: u64) -> Result<Vec<ScanCell>> {
    if nc_max >= system.n_s() {
        return Err(Error::Config(format!(
            "n_c range 0..={nc_max} exceeds n_s - 1 = {} for {}",
            system.n_s() - 1,
            system.name()
        )));
    }
    if n_seeds == 0 {
        return Err(Error::Config("scan needs at least one seed".into()));
    }
    Ok((0..=nc_max)
        .flat_map(|n_c| {
            (0..n_seeds).map(move |k| ScanCell { n_c, seed_index: k, seed: root_seed.wrapping_add(k as u64) })
        })
        .collect())
}

/// Trains one cell with the full two-phase procedure.
pub fn run_scan_cell(cell: ScanCell, template: &NetworkConfig, config: &TrainConfig, dataset: &Dataset) -> Result<ScanRun> {
    let net = NetworkConfig { n_c: cell.n_c, ..*template };
    let cfg = TrainConfig { seed: cell.seed, ..*config };
    let run = train_meta_comet(&cfg, &net, dataset)?;
    let l1 = validation_residual(&run.model, dataset, &cfg)?;
    Ok(ScanRun { cell, l1, curve: run.phase2.val_losses() })
}

/// Means, spreads, relative values and the detected count.
pub fn aggregate_scan(runs: Vec<ScanRun>, threshold: f64) -> Result<ScanResult> {
    let mut n_c: Vec<usize> = runs.iter().map(|r| r.cell.n_c).collect();
    n_c.sort_unstable();
    n_c.dedup();
    if n_c.first() != Some(&0) {
        return Err(Error::Config("scan must include n_c = 0".into()));
    }
    let mut mean = Vec::with_capacity(n_c.len());
    let mut std = Vec::with_capacity(n_c.len());
    for &k in &n_c {
        let v: Vec<f64> = runs.iter().filter(|r| r.cell.n_c == k).map(|r| r.l1).collect();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
        mean.push(m);
        std.push(libm::sqrt(var));
    }
    let base = mean[0];
    let relative: Vec<f64> = mean.iter().map(|m| m / base).collect();
    let relative_std: Vec<f64> = std.iter().map(|s| s / base).collect();
    let mut detected = 0;
    for (i, &k) in n_c.iter().enumerate() {
        if relative[i] <= threshold {
            detected = k;
        } else {
            break;
        }
    }
    Ok(ScanResult { n_c, mean, std, relative, relative_std, threshold, detected, runs })
}

/// Sequential scan; see [`scan_cells`] for the seeds.
pub fn scan_num_constants(
    dataset: &Dataset,
    template: &NetworkConfig,
    config: &TrainConfig,
    nc_max: usize,
    n_seeds: usize,
    threshold: f64,
) -> Result<ScanResult> {
    let system = dataset.system.system();
    let runs = scan_cells(&system, nc_max, n_seeds, config.seed)?
        .into_iter()
        .map(|cell| run_scan_cell(cell, template, config, dataset))
        .collect::<Result<Vec<_>>>()?;
    aggregate_scan(runs, threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{CometMlpParams, TwinNetParams};
    use crate::systems::SystemKind;

    #[test]
    fn percentile_hand_oracle() {
        let v: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        assert!((percentile(&v, 2.5) - 3.475).abs() < 1e-12);
        assert!((percentile(&v, 97.5) - 97.525).abs() < 1e-12);
        assert_eq!(percentile(&v, 50.0), 50.5);
        assert_eq!(percentile(&[4.0], 2.5), 4.0);
    }

    #[test]
    fn single_simulation_stats_are_degenerate() {
        let s = RmseStats::from_values(vec![0.3]).unwrap();
        assert_eq!((s.median, s.p2_5, s.p97_5), (0.3, 0.3, 0.3));
    }

    #[test]
    fn failures_count_as_infinite() {
        let s = RmseStats::from_values(vec![1.0, f64::INFINITY, 2.0]).unwrap();
        assert_eq!(s.failures, 1);
        assert_eq!(s.median, 2.0);
        assert_eq!(s.p97_5, f64::INFINITY);
        assert!(s.p2_5 <= s.median);
        assert_eq!(
            RmseStats::from_values(vec![f64::INFINITY; 3]),
            Err(Error::AllRolloutsFailed(3))
        );
    }

    #[test]
    fn median_monotone_under_domination() {
        let a = vec![0.5, 0.1, 0.9, 0.3, 0.7];
        let b: Vec<f64> = a.iter().map(|v| v * 0.8).collect();
        let (sa, sb) = (RmseStats::from_values(a).unwrap(), RmseStats::from_values(b).unwrap());
        assert!(sb.median <= sa.median);
    }

    #[test]
    fn perfect_field_has_tiny_rmse() {
        let sys = SystemKind::MassSpring.system();
        let stats = rmse_stats(&TrueField(sys), &sys, 5, 20.0, 200, 3).unwrap();
        assert!(stats.median <= 1e-5, "{stats:?}");
        assert_eq!(stats.per_sim.len(), 5);
        assert!(stats.p2_5 <= stats.median && stats.median <= stats.p97_5);
        let again = rmse_stats(&TrueField(sys), &sys, 5, 20.0, 200, 3).unwrap();
        assert_eq!(stats, again);
    }

    #[test]
    fn zero_model_rolls_out_constant() {
        let model = TwinNetParams::zeros(NetworkConfig::new(2, 1, 3).with_width(5));
        let tr = rollout_model(&LearnedField::new(&model), &[0.4, -0.2], 5.0, 11, &ForceCoefficients::NONE, ROLLOUT_METHOD).unwrap();
        assert!(tr.states.iter().all(|s| s == &[0.4, -0.2]));
    }

    #[test]
    fn learned_field_without_constants_is_sdot0() {
        let model = TwinNetParams::init(NetworkConfig::new(2, 0, 3).with_width(6), 5).unwrap();
        let field = LearnedField::new(&model);
        let s = [0.3, -0.7];
        assert_eq!(field.derivative(&s, &[]).unwrap(), field.unconstrained(&s, &[]).unwrap());
        let via_field = rollout_model(&field, &s, 2.0, 5, &ForceCoefficients::NONE, ROLLOUT_METHOD).unwrap();
        let direct = integrate(|_, x| field.unconstrained(x, &[]), &s, &linspace(0.0, 2.0, 5), ROLLOUT_METHOD).unwrap();
        assert_eq!(via_field, direct);
    }

    #[test]
    fn learned_field_respects_its_constants() {
        let model = TwinNetParams::init(NetworkConfig::new(4, 2, 3).with_width(8), 2).unwrap();
        let field = LearnedField::new(&model);
        let s = [0.1, 0.5, -0.3, 0.8];
        let sdot = field.derivative(&s, &[]).unwrap();
        // directional derivative of each constant along sdot vanishes
        let h = 1e-6;
        let plus: Vec<f64> = s.iter().zip(&sdot).map(|(a, b)| a + h * b).collect();
        let minus: Vec<f64> = s.iter().zip(&sdot).map(|(a, b)| a - h * b).collect();
        let c = field.constants(&Tensor::from_fn(4, 2, |i, j| if j == 0 { plus[i] } else { minus[i] }), None).unwrap();
        for k in 0..2 {
            assert!(((c.get(k, 0) - c.get(k, 1)) / (2.0 * h)).abs() < 1e-6);
        }
    }

    #[test]
    fn comet_field_runs() {
        let model = CometMlpParams::init(NetworkConfig::new(2, 1, 0).with_width(6), 1).unwrap();
        let v = LearnedField::new(&model).derivative(&[0.2, 0.1], &[]).unwrap();
        assert_eq!(v.len(), 2);
    }

    #[test]
    fn field_rejects_wrong_state() {
        let model = TwinNetParams::zeros(NetworkConfig::new(2, 1, 3).with_width(5));
        assert!(LearnedField::new(&model).derivative(&[0.0; 3], &[]).is_err());
    }

    #[test]
    fn drift_of_constant_rule_is_zero() {
        let sys = SystemKind::MassSpring.system();
        let tr = rollout_model(&TrueField(sys), &[1.0, 0.0], 10.0, 101, &ForceCoefficients::NONE, Method::DATA).unwrap();
        let d = constant_drift(|_| Ok(5.0), &tr).unwrap();
        assert_eq!(d.drift, 0.0);
        assert!(!d.absolute);
        let e = constant_drift(|s| Ok(sys.true_constants(s)?[0]), &tr).unwrap();
        assert!(e.drift <= 1e-6, "{}", e.drift);
        let z = drift_of(vec![-1e-3, 1e-3]).unwrap();
        assert!(z.absolute && (z.drift - 2e-3).abs() < 1e-18);
    }

    #[test]
    fn contour_grid_shape_and_uniformity() {
        let model = TwinNetParams::zeros(NetworkConfig::new(2, 1, 3).with_width(5));
        let grid = GridSpec { dims: (0, 1), bounds: ((-1.0, 1.0), (-2.0, 2.0)), resolution: 7, base: vec![0.0, 0.0] };
        let g = contour_grid(&model, &grid, 0).unwrap();
        assert_eq!(g.shape(), [7, 7]);
        assert!(g.data().iter().all(|&v| v == g.get(0, 0)));
        let bad = GridSpec { resolution: 1, ..grid.clone() };
        assert!(contour_grid(&model, &bad, 0).is_err());
        assert!(contour_grid(&model, &grid, 1).is_err());
    }

    #[test]
    fn grid_states_follow_axes() {
        let grid = GridSpec { dims: (2, 0), bounds: ((0.0, 1.0), (10.0, 20.0)), resolution: 3, base: vec![7.0, 8.0, 9.0] };
        let s = grid.states();
        // column a * n + b
        assert_eq!(s.column_values(5), vec![20.0, 8.0, 0.5]);
    }

    #[test]
    fn affine_fit_recovers_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| -2.0 * v + 1.0).collect();
        let fit = affine_fit(&x, &y).unwrap();
        assert!((fit.scale + 2.0).abs() < 1e-12 && (fit.shift - 1.0).abs() < 1e-12);
        assert!((fit.correlation + 1.0).abs() < 1e-12);
        assert!(affine_fit(&x, &y[..2]).is_err());
    }

    #[test]
    fn conservation_mass_spring_and_lotka_volterra() {
        for kind in [SystemKind::MassSpring, SystemKind::LotkaVolterra] {
            let d = conservation_drift(&kind.system(), 5, 10.0, 1, 1e-3).unwrap();
            assert!(d.iter().all(|&v| v <= 1e-6), "{kind:?}: {d:?}");
        }
    }

    #[test]
    fn scan_cells_cover_range() {
        let sys = SystemKind::DampedPendulum.system();
        let cells = scan_cells(&sys, 3, 2, 10).unwrap();
        assert_eq!(cells.len(), 8);
        assert_eq!(cells[3], ScanCell { n_c: 1, seed_index: 1, seed: 11 });
        assert!(scan_cells(&sys, 4, 1, 0).is_err());
        assert!(scan_cells(&sys, 1, 0, 0).is_err());
    }

    fn run(n_c: usize, l1: f64) -> ScanRun {
        ScanRun { cell: ScanCell { n_c, seed_index: 0, seed: 0 }, l1, curve: Vec::new() }
    }

    #[test]
    fn aggregate_detects_last_flat_value() {
        let runs = vec![run(0, 1.0), run(0, 3.0), run(1, 2.0), run(1, 4.0), run(2, 20.0), run(3, 2.0)];
        let r = aggregate_scan(runs, 3.0).unwrap();
        assert_eq!(r.n_c, vec![0, 1, 2, 3]);
        assert_eq!(r.relative[0], 1.0);
        assert_eq!(r.mean[0], 2.0);
        assert_eq!(r.std[0], 1.0);
        assert_eq!(r.relative[1], 1.5);
        assert_eq!(r.detected, 1);
        assert!(aggregate_scan(vec![run(1, 1.0)], 3.0).is_err());
    }

    #[test]
    fn single_cell_scan_is_one() {
        let sys = SystemKind::MassSpring.system();
        let ds = crate::systems::generate_dataset(&sys, 2, 5.0, 20, 0.0, 1).unwrap();
        let net = NetworkConfig::new(2, 0, 3).with_width(8);
        let cfg = TrainConfig { epochs_phase1: 2, epochs_phase2: 2, batch_size: 16, ..TrainConfig::default() };
        let r = scan_num_constants(&ds, &net, &cfg, 0, 1, JUMP_THRESHOLD).unwrap();
        assert_eq!(r.relative, vec![1.0]);
        assert_eq!(r.detected, 0);
        assert_eq!(r.runs[0].curve.len(), 2);
    }
}
