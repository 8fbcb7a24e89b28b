//! Run configuration, read from TOML. Unknown keys are rejected. Command-line
//! flags override file values, and `COMLAB_SEED` overrides the root seed.

use std::path::{Path, PathBuf};

use comlab_core::losses::LossWeights;
use comlab_core::models::{Activation, ModelKind, NetworkConfig, DEFAULT_DEPTH, DEFAULT_WIDTH};
use comlab_core::systems::{SystemDef, SystemKind};
use comlab_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SEED_ENV: &str = "COMLAB_SEED";

/// Largest root seed; TOML integers are signed 64-bit.
pub const MAX_SEED: u64 = i64::MAX as u64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed for every random stream.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Worker threads for scan cells and rollouts.
    pub jobs: usize,
    /// Existing dataset file; when absent the `system` section generates one.
    pub dataset: Option<PathBuf>,
    /// Checkpoint evaluated by `eval`.
    pub checkpoint: Option<PathBuf>,
    pub system: SystemSection,
    pub net: NetSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub scan: ScanSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            jobs: 1,
            dataset: None,
            checkpoint: None,
            system: SystemSection::default(),
            net: NetSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            scan: ScanSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemSection {
    pub name: String,
    pub sigma: f64,
    pub n_traj: usize,
    pub t_end: f64,
    pub n_points: usize,
}

impl Default for SystemSection {
    fn default() -> Self {
        Self { name: "mass-spring".into(), sigma: 0.05, n_traj: 20, t_end: 10.0, n_points: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetSection {
    pub model: String,
    /// Number of learned constants; defaults to the system's true count.
    pub n_c: Option<usize>,
    /// Low-rank factor rank; defaults to the system's table value.
    pub rank: Option<usize>,
    pub width: usize,
    pub depth: usize,
    pub activation: String,
}

impl Default for NetSection {
    fn default() -> Self {
        Self {
            model: ModelKind::MetaComet.tag().into(),
            n_c: None,
            rank: None,
            width: DEFAULT_WIDTH,
            depth: DEFAULT_DEPTH,
            activation: Activation::Silu.tag().into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Early-stopping patience in epochs; 0 disables it.
    pub patience: usize,
    pub val_fraction: f64,
    pub noise_amplitude: f64,
    pub w0: f64,
    pub w1_comet: f64,
    pub w2_comet: f64,
    /// Semi-orthogonality weights; absent means `1 / rank^2`.
    pub w1_ortho: Option<f64>,
    pub w2_ortho: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        let w = t.weights;
        Self {
            epochs_phase1: t.epochs_phase1,
            epochs_phase2: t.epochs_phase2,
            batch_size: t.batch_size,
            lr_max: t.lr_max,
            lr_min: t.lr_min,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_eps: t.adam_eps,
            patience: t.patience.unwrap_or(0),
            val_fraction: t.val_fraction,
            noise_amplitude: t.noise_amplitude,
            w0: w.w0,
            w1_comet: w.w1_comet,
            w2_comet: w.w2_comet,
            w1_ortho: w.w1_ortho,
            w2_ortho: w.w2_ortho,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub n_sims: usize,
    pub t_end: f64,
    pub n_points: usize,
    /// Contour grid points per axis.
    pub grid_resolution: usize,
    /// Half-width of the contour grid around the origin.
    pub grid_extent: f64,
    /// State coordinates spanned by the contour grid.
    pub grid_dims: [usize; 2],
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { n_sims: 100, t_end: 100.0, n_points: 1000, grid_resolution: 51, grid_extent: 1.0, grid_dims: [0, 1] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScanSection {
    /// Largest `n_c` scanned; defaults to `n_s - 1`.
    pub nc_max: Option<usize>,
    pub seeds: usize,
    pub threshold: f64,
}

impl Default for ScanSection {
    fn default() -> Self {
        Self { nc_max: None, seeds: 5, threshold: comlab_core::evaluation::JUMP_THRESHOLD }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `COMLAB_SEED` when it is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got `{v}`")))?;
        }
        Ok(())
    }

    pub fn system(&self) -> Result<SystemDef> {
        Ok(SystemDef::by_name(&self.system.name)?)
    }

    pub fn model_kind(&self) -> Result<ModelKind> {
        Ok(self.net.model.parse()?)
    }

    /// Network shape for `system`, filling `n_c` and `rank` from its defaults.
    pub fn network(&self, system: &SystemDef) -> Result<NetworkConfig> {
        let rank = match self.model_kind()? {
            ModelKind::MetaComet => self.net.rank.unwrap_or(system.default_rank()),
            ModelKind::Comet => self.net.rank.unwrap_or(0),
        };
        let mut cfg = NetworkConfig::new(system.n_s(), self.net.n_c.unwrap_or(system.n_c_true()), rank)
            .with_force(system.n_f())
            .with_width(self.net.width)
            .with_depth(self.net.depth);
        cfg.activation = self.net.activation.parse()?;
        cfg.validate(self.model_kind()?)?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let cfg = TrainConfig {
            epochs_phase1: t.epochs_phase1,
            epochs_phase2: t.epochs_phase2,
            batch_size: t.batch_size,
            lr_max: t.lr_max,
            lr_min: t.lr_min,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_eps: t.adam_eps,
            patience: (t.patience > 0).then_some(t.patience),
            val_fraction: t.val_fraction,
            seed: self.seed,
            noise_amplitude: t.noise_amplitude,
            weights: LossWeights {
                w0: t.w0,
                w1_comet: t.w1_comet,
                w2_comet: t.w2_comet,
                w1_ortho: t.w1_ortho,
                w2_ortho: t.w2_ortho,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks the sections every command relies on.
    pub fn validate(&self) -> Result<()> {
        let system = self.system()?;
        let s = &self.system;
        if !(s.sigma >= 0.0 && s.sigma.is_finite()) {
            return Err(Error::Config(format!("system.sigma must be a finite value >= 0, got {}", s.sigma)));
        }
        if s.n_traj == 0 || s.n_points == 0 || !(s.t_end > 0.0) {
            return Err(Error::Config("system.n_traj, system.n_points and system.t_end must be positive".into()));
        }
        if self.seed.saturating_add(self.scan.seeds as u64) > MAX_SEED {
            return Err(Error::Config(format!("seed must be below {MAX_SEED} (minus scan.seeds), got {}", self.seed)));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        let e = &self.eval;
        if e.n_sims == 0 || e.n_points < 2 || !(e.t_end > 0.0) {
            return Err(Error::Config("eval.n_sims >= 1, eval.n_points >= 2 and eval.t_end > 0 required".into()));
        }
        if e.grid_resolution < 2 || !(e.grid_extent > 0.0) {
            return Err(Error::Config("eval.grid_resolution >= 2 and eval.grid_extent > 0 required".into()));
        }
        if self.scan.seeds == 0 || !(self.scan.threshold > 0.0) {
            return Err(Error::Config("scan.seeds >= 1 and scan.threshold > 0 required".into()));
        }
        if let Some(k) = self.scan.nc_max {
            if k >= system.n_s() {
                return Err(Error::Config(format!("scan.nc_max = {k} exceeds n_s - 1 = {} for {}", system.n_s() - 1, system.name())));
            }
        }
        self.network(&system)?;
        self.train_config()?;
        Ok(())
    }

    pub fn nc_max(&self, system: &SystemDef) -> usize {
        self.scan.nc_max.unwrap_or(system.n_s() - 1)
    }
}

/// Parses a system name, listing the valid ones on failure.
pub fn parse_system(name: &str) -> Result<SystemKind> {
    Ok(name.parse()?)
}
