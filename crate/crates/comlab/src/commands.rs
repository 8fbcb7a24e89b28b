//! The run commands behind the CLI. Each writes its artifacts and a manifest
//! into `out_dir`.

use std::path::{Path, PathBuf};

use comlab_core::evaluation::{
    affine_fit, aggregate_scan, drift_of, learned_drift, reference_simulation, run_scan_cell, scan_cells,
    simulation_rmse, contour_grid, GridSpec, LearnedField, RmseStats, ScanResult,
};
use comlab_core::models::{count_params, semi_orthogonality_residual, Model, ModelKind, NetworkConfig};
use comlab_core::systems::{generate_dataset, Dataset, SystemDef, SystemKind};
use comlab_core::training::{train_comet, train_meta_comet, validation_residual, History};

use crate::checkpoint::{load_checkpoint, to_bytes, TrainedModel};
use crate::config::RunConfig;
use crate::data;
use crate::error::{Error, Result};
use crate::manifest::{hash_file, sha256_hex, Manifest};
use crate::parallel::parallel_map;
use crate::report::{
    contour_csv, history_csv, scan_curves_csv, table_csv, to_toml, AlignmentSection, DriftEntry, EvalReport,
    RmseSection, ScanReport, TrainMetrics,
};

pub const DATASET_FILE: &str = "dataset.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const METRICS_FILE: &str = "metrics.toml";
pub const REPORT_FILE: &str = "report.toml";
pub const SCAN_FILE: &str = "scan.toml";

/// What a command produced.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub dir: PathBuf,
    pub manifest: Manifest,
    /// Short human-readable summary.
    pub summary: String,
}

struct Writer {
    dir: PathBuf,
    manifest: Manifest,
}

impl Writer {
    fn new(command: &str, cfg: &RunConfig) -> Result<Self> {
        std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
        Ok(Self { dir: cfg.out_dir.clone(), manifest: Manifest::new(command, cfg) })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.manifest.artifacts.insert(name.into(), sha256_hex(bytes));
        Ok(())
    }

    fn finish(self, summary: String) -> Result<Outcome> {
        self.manifest.save(&self.dir)?;
        Ok(Outcome { dir: self.dir, manifest: self.manifest, summary })
    }
}

/// Loads `cfg.dataset` (checking it belongs to the configured system) or
/// generates one from the `system` section.
fn resolve_dataset(cfg: &RunConfig, writer: &mut Writer) -> Result<Dataset> {
    let system = cfg.system()?;
    match &cfg.dataset {
        Some(path) => {
            let ds = data::load_dataset(path)?;
            if ds.system != system.kind {
                return Err(Error::Mismatch(format!(
                    "dataset {} holds {} samples but the configured system is {}",
                    path.display(),
                    ds.system.name(),
                    system.name()
                )));
            }
            writer.manifest.inputs.insert("dataset".into(), hash_file(path)?);
            Ok(ds)
        }
        None => {
            let s = &cfg.system;
            let ds = generate_dataset(&system, s.n_traj, s.t_end, s.n_points, s.sigma, cfg.seed)?;
            writer.write(DATASET_FILE, data::to_string(&ds)?.as_bytes())?;
            Ok(ds)
        }
    }
}

pub fn generate(cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate()?;
    let mut w = Writer::new("generate", cfg)?;
    let cfg = RunConfig { dataset: None, ..cfg.clone() };
    let ds = resolve_dataset(&cfg, &mut w)?;
    let summary = format!(
        "{} samples of {} (sigma = {}, seed = {}, {} failed trajectories redrawn)",
        ds.len(),
        ds.system.name(),
        ds.sigma,
        ds.seed,
        ds.failures
    );
    w.finish(summary)
}

fn semi_orthogonality(model: &TrainedModel) -> Vec<[f64; 2]> {
    match model {
        TrainedModel::MetaComet(m) => m
            .hidden
            .iter()
            .map(|l| [semi_orthogonality_residual(&l.left), semi_orthogonality_residual(&l.right)])
            .collect(),
        TrainedModel::Comet(_) => Vec::new(),
    }
}

/// Trains the configured model and returns it with its phase histories.
pub fn train_model(cfg: &RunConfig, net: &NetworkConfig, ds: &Dataset) -> Result<(TrainedModel, Vec<(&'static str, History)>)> {
    let train = cfg.train_config()?;
    Ok(match cfg.model_kind()? {
        ModelKind::MetaComet => {
            let run = train_meta_comet(&train, net, ds)?;
            (TrainedModel::MetaComet(run.model), vec![("history_phase1.csv", run.phase1), ("history_phase2.csv", run.phase2)])
        }
        ModelKind::Comet => {
            let (model, history) = train_comet(&train, net, ds)?;
            (TrainedModel::Comet(model), vec![("history.csv", history)])
        }
    })
}

pub fn train(cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate()?;
    let mut w = Writer::new("train", cfg)?;
    let ds = resolve_dataset(cfg, &mut w)?;
    let system = cfg.system()?;
    let net = cfg.network(&system)?;
    let (model, histories) = train_model(cfg, &net, &ds)?;
    w.write(CHECKPOINT_FILE, &to_bytes(&model)?)?;
    for (name, h) in &histories {
        w.write(name, history_csv(h).as_bytes())?;
    }
    let train_cfg = cfg.train_config()?;
    let val = match &model {
        TrainedModel::MetaComet(m) => validation_residual(m, &ds, &train_cfg)?,
        TrainedModel::Comet(m) => validation_residual(m, &ds, &train_cfg)?,
    };
    let last = &histories.last().expect("at least one phase").1;
    let metrics = TrainMetrics {
        model: model.kind().tag().into(),
        num_params: model.num_params(),
        val_residual_l1: val,
        best_epoch: last.best_epoch,
        stopped_early: last.stopped_early,
        epochs_run: last.records.len(),
        semi_orthogonality: semi_orthogonality(&model),
    };
    w.write(METRICS_FILE, to_toml(&metrics)?.as_bytes())?;
    let summary = format!(
        "{} on {} with n_c = {}: {} parameters, validation residual L1 {:.4e}",
        model.kind(),
        system.name(),
        net.n_c,
        model.num_params(),
        val
    );
    w.finish(summary)
}

fn check_checkpoint(cfg: &RunConfig, system: &SystemDef, model: &TrainedModel) -> Result<()> {
    let c = model.config();
    if c.n_s != system.n_s() || c.n_f != system.n_f() {
        return Err(Error::Mismatch(format!(
            "checkpoint has n_s = {}, n_f = {} but {} needs n_s = {}, n_f = {}",
            c.n_s,
            c.n_f,
            system.name(),
            system.n_s(),
            system.n_f()
        )));
    }
    if let Some(n_c) = cfg.net.n_c {
        if n_c != c.n_c {
            return Err(Error::Mismatch(format!("config asks for n_c = {n_c}, checkpoint has n_c = {}", c.n_c)));
        }
    }
    Ok(())
}

struct EvalOutput {
    report: EvalReport,
    drift_csv: String,
    contour_csv: Option<String>,
}

fn evaluate_model<M: Model + Sync>(cfg: &RunConfig, system: &SystemDef, model: &M) -> Result<EvalOutput> {
    let e = &cfg.eval;
    let field = LearnedField::new(model);
    let indices: Vec<usize> = (0..e.n_sims).collect();
    let per_sim = parallel_map(cfg.jobs, &indices, |&i| simulation_rmse(&field, system, i, e.t_end, e.n_points, cfg.seed))
        .into_iter()
        .collect::<comlab_core::Result<Vec<f64>>>()?;
    let stats = RmseStats::from_values(per_sim)?;

    let (_, force, truth) = reference_simulation(system, cfg.seed, 0, e.t_end, e.n_points)?;
    let true_values = truth.states.iter().map(|s| system.true_constants(s)).collect::<comlab_core::Result<Vec<_>>>()?;
    let learned = learned_drift(model, &truth, &force)?;
    let mut drift = Vec::new();
    let names = system.constant_names();
    for (k, name) in names.iter().enumerate() {
        let d = drift_of(true_values.iter().map(|v| v[k]).collect())?;
        drift.push(DriftEntry { name: (*name).into(), learned: false, drift: d.drift, absolute: d.absolute });
    }
    for (k, d) in learned.iter().enumerate() {
        drift.push(DriftEntry { name: format!("c_{k}"), learned: true, drift: d.drift, absolute: d.absolute });
    }
    let mut header = vec!["t".to_string()];
    header.extend(names.iter().map(|n| n.to_string()));
    header.extend((0..learned.len()).map(|k| format!("c_{k}")));
    let rows: Vec<Vec<f64>> = truth
        .times
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let mut row = vec![t];
            row.extend(&true_values[i]);
            row.extend(learned.iter().map(|d| d.values[i]));
            row
        })
        .collect();
    let drift_csv = table_csv(&header, &rows);

    let n_c = model.config().n_c;
    let (mut alignment, mut contour) = (None, None);
    if n_c > 0 {
        let [i, j] = e.grid_dims;
        let grid = GridSpec {
            dims: (i, j),
            bounds: ((-e.grid_extent, e.grid_extent), (-e.grid_extent, e.grid_extent)),
            resolution: e.grid_resolution,
            base: vec![0.0; system.n_s()],
        };
        let values = contour_grid(model, &grid, 0)?;
        let (xs, ys) = grid.axes();
        contour = Some(contour_csv(&xs, &ys, &values, &format!("s_{i}"), &format!("s_{j}")));
        let states = grid.states();
        let reference: Option<Vec<f64>> = (0..states.cols())
            .map(|col| system.true_constants(&states.column_values(col)).ok().map(|v| v[0]).filter(|v| v.is_finite()))
            .collect();
        if let Some(reference) = reference {
            let fit = affine_fit(values.data(), &reference)?;
            let aligned = drift_of(learned[0].values.iter().map(|&v| fit.apply(v)).collect())?;
            alignment = Some(AlignmentSection {
                against: names[0].into(),
                correlation: fit.correlation,
                scale: fit.scale,
                shift: fit.shift,
                aligned_drift: aligned.drift,
            });
        }
    }
    let report = EvalReport {
        system: system.name().into(),
        model: model.kind().tag().into(),
        n_c,
        rmse: RmseSection::new(&stats, e.t_end, e.n_points),
        drift,
        alignment,
    };
    Ok(EvalOutput { report, drift_csv, contour_csv: contour })
}

/// Evaluation of an in-memory model with the `eval` section of `cfg`.
pub fn evaluate(cfg: &RunConfig, model: &TrainedModel) -> Result<EvalReport> {
    let system = cfg.system()?;
    check_checkpoint(cfg, &system, model)?;
    Ok(match model {
        TrainedModel::MetaComet(m) => evaluate_model(cfg, &system, m)?.report,
        TrainedModel::Comet(m) => evaluate_model(cfg, &system, m)?.report,
    })
}

pub fn eval(cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate()?;
    let path = cfg.checkpoint.as_ref().ok_or_else(|| Error::Config("eval needs a checkpoint".into()))?;
    let model = load_checkpoint(path)?;
    let system = cfg.system()?;
    check_checkpoint(cfg, &system, &model)?;
    let mut w = Writer::new("eval", cfg)?;
    w.manifest.inputs.insert("checkpoint".into(), hash_file(path)?);
    let started = std::time::Instant::now();
    let out = match &model {
        TrainedModel::MetaComet(m) => evaluate_model(cfg, &system, m)?,
        TrainedModel::Comet(m) => evaluate_model(cfg, &system, m)?,
    };
    w.write(REPORT_FILE, to_toml(&out.report)?.as_bytes())?;
    w.write("drift.csv", out.drift_csv.as_bytes())?;
    if let Some(c) = &out.contour_csv {
        w.write("contour.csv", c.as_bytes())?;
    }
    let timing = format!("wall_clock_seconds = {}\n", started.elapsed().as_secs_f64());
    let timing_path = w.dir.join("timing.toml");
    std::fs::write(&timing_path, timing).map_err(|e| Error::io(&timing_path, e))?;
    let r = &out.report.rmse;
    let summary = format!(
        "{} simulations: median RMSE {:.4e} [{:.4e}, {:.4e}], {} failed",
        r.n_sims, r.median, r.p2_5, r.p97_5, r.failures
    );
    w.finish(summary)
}

/// Runs every scan cell on up to `cfg.jobs` threads.
pub fn run_scan(cfg: &RunConfig, ds: &Dataset) -> Result<ScanResult> {
    let system = cfg.system()?;
    let template = cfg.network(&system)?;
    let train = cfg.train_config()?;
    let cells = scan_cells(&system, cfg.nc_max(&system), cfg.scan.seeds, cfg.seed)?;
    let runs = parallel_map(cfg.jobs, &cells, |&cell| run_scan_cell(cell, &template, &train, ds))
        .into_iter()
        .collect::<comlab_core::Result<Vec<_>>>()?;
    Ok(aggregate_scan(runs, cfg.scan.threshold)?)
}

pub fn scan(cfg: &RunConfig) -> Result<Outcome> {
    let mut cfg = cfg.clone();
    cfg.net.n_c = Some(0);
    cfg.validate()?;
    let mut w = Writer::new("scan", &cfg)?;
    let ds = resolve_dataset(&cfg, &mut w)?;
    let result = run_scan(&cfg, &ds)?;
    let report = ScanReport::new(ds.system.name(), &result);
    w.write(SCAN_FILE, to_toml(&report)?.as_bytes())?;
    w.write("curves.csv", scan_curves_csv(&result).as_bytes())?;
    let rel: Vec<String> = result.relative.iter().map(|v| format!("{v:.3}")).collect();
    let summary = format!("relative L1 by n_c: [{}]; detected n_c = {}", rel.join(", "), result.detected);
    w.finish(summary)
}

pub fn run(command: &str, cfg: &RunConfig) -> Result<Outcome> {
    match command {
        "generate" => generate(cfg),
        "train" => train(cfg),
        "eval" => eval(cfg),
        "scan" => scan(cfg),
        other => Err(Error::Config(format!("unknown command `{other}`"))),
    }
}

/// Result of replaying a manifest.
#[derive(Clone, Debug)]
pub struct Rerun {
    pub outcome: Outcome,
    /// Artifacts whose hashes differ from the original run.
    pub differences: Vec<String>,
    /// Inputs whose current hash differs from the recorded one.
    pub changed_inputs: Vec<String>,
}

/// Runs the command recorded in `manifest_path` again into `out_dir` and
/// compares artifact hashes.
pub fn rerun(manifest_path: &Path, out_dir: &Path) -> Result<Rerun> {
    let original = Manifest::load(manifest_path)?;
    let mut cfg = original.config.clone();
    if out_dir == cfg.out_dir {
        return Err(Error::Config("rerun needs an output directory different from the original run".into()));
    }
    cfg.out_dir = out_dir.to_path_buf();
    let outcome = run(&original.command, &cfg)?;
    let changed_inputs = original
        .inputs
        .iter()
        .filter(|(k, v)| outcome.manifest.inputs.get(*k) != Some(*v))
        .map(|(k, _)| k.clone())
        .collect();
    let differences = original.artifact_differences(&outcome.manifest);
    Ok(Rerun { outcome, differences, changed_inputs })
}

/// Parameter counts of both models for every system at its default rank.
pub fn params_table() -> String {
    let mut out = format!("{:<22} {:>4} {:>4} {:>5} {:>11} {:>8}\n", "system", "n_s", "n_c", "rank", "meta-comet", "comet");
    for kind in SystemKind::ALL {
        let sys = kind.system();
        let net = NetworkConfig::new(sys.n_s(), sys.n_c_true(), sys.default_rank()).with_force(sys.n_f());
        out.push_str(&format!(
            "{:<22} {:>4} {:>4} {:>5} {:>11} {:>8}\n",
            sys.name(),
            sys.n_s(),
            sys.n_c_true(),
            sys.default_rank(),
            count_params(&net, ModelKind::MetaComet),
            count_params(&net, ModelKind::Comet)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::MANIFEST_FILE;

    fn tiny(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.out_dir = dir.to_path_buf();
        cfg.system.n_traj = 2;
        cfg.system.n_points = 20;
        cfg.net.width = 12;
        cfg.net.rank = Some(3);
        cfg.train.epochs_phase1 = 2;
        cfg.train.epochs_phase2 = 2;
        cfg.train.batch_size = 16;
        cfg.eval.n_sims = 2;
        cfg.eval.t_end = 2.0;
        cfg.eval.n_points = 11;
        cfg.eval.grid_resolution = 5;
        cfg.scan.seeds = 1;
        cfg
    }

    #[test]
    fn params_table_has_every_system() {
        let t = params_table();
        assert_eq!(t.lines().count(), 1 + SystemKind::ALL.len());
        assert!(t.contains("12273") && t.contains("189753"));
    }

    #[test]
    fn train_then_eval_then_rerun() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny(&tmp.path().join("train"));
        let trained = train(&cfg).unwrap();
        for f in [CHECKPOINT_FILE, "history_phase1.csv", "history_phase2.csv", METRICS_FILE, DATASET_FILE, MANIFEST_FILE] {
            assert!(trained.dir.join(f).exists(), "{f}");
        }
        let again = rerun(&trained.dir.join(MANIFEST_FILE), &tmp.path().join("again")).unwrap();
        assert!(again.differences.is_empty(), "{:?}", again.differences);

        let mut ecfg = tiny(&tmp.path().join("eval"));
        ecfg.checkpoint = Some(trained.dir.join(CHECKPOINT_FILE));
        let evaluated = eval(&ecfg).unwrap();
        let report: EvalReport = toml::from_str(&std::fs::read_to_string(evaluated.dir.join(REPORT_FILE)).unwrap()).unwrap();
        assert_eq!(report.rmse.per_sim.len(), 2);
        assert!(evaluated.dir.join("contour.csv").exists());

        let mut wrong = ecfg.clone();
        wrong.system.name = "2d-pendulum".into();
        assert!(matches!(eval(&wrong), Err(Error::Mismatch(_))));
    }

    #[test]
    fn dataset_system_mismatch_is_an_error() {
        let tmp = tempfile::tempdir().unwrap();
        let gen = generate(&tiny(&tmp.path().join("gen"))).unwrap();
        let mut cfg = tiny(&tmp.path().join("train"));
        cfg.dataset = Some(gen.dir.join(DATASET_FILE));
        cfg.system.name = "lotka-volterra".into();
        assert!(matches!(train(&cfg), Err(Error::Mismatch(_))));
    }

    #[test]
    fn single_cell_scan() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = tiny(&tmp.path().join("scan"));
        cfg.scan.nc_max = Some(0);
        cfg.jobs = 2;
        let out = scan(&cfg).unwrap();
        let report: ScanReport = toml::from_str(&std::fs::read_to_string(out.dir.join(SCAN_FILE)).unwrap()).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.rows[0].relative, 1.0);
    }
}
