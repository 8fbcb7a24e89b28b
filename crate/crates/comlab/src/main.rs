use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use comlab::commands::{self, params_table};
use comlab::config::RunConfig;
use comlab::{data, Error, Result};

/// Learning constants of motion: data generation, training, evaluation and
/// the number-of-constants scan.
#[derive(Parser, Debug)]
#[command(name = "comlab", version)]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed (overrides the file and COMLAB_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for scan cells and rollouts.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a system and write a noisy dataset.
    Generate(SystemArgs),
    /// Train Meta-COMET (two phases) or the COMET baseline.
    Train {
        #[command(flatten)]
        system: SystemArgs,
        #[command(flatten)]
        net: NetArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Roll out a checkpoint and report RMSE, drift and contour data.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        system: Option<String>,
        #[arg(long)]
        nc: Option<usize>,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Train over n_c = 0..=nc_max and locate the jump in relative L1.
    Scan {
        #[command(flatten)]
        system: SystemArgs,
        #[command(flatten)]
        net: NetArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        nc_max: Option<usize>,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Print parameter counts for every system.
    Params,
    /// Replay the run recorded in a manifest and compare artifact hashes.
    Rerun {
        manifest: PathBuf,
    },
}

#[derive(Args, Debug)]
struct SystemArgs {
    #[arg(long)]
    system: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    sigma: Option<f64>,
    #[arg(long)]
    n_traj: Option<usize>,
    #[arg(long)]
    t_end: Option<f64>,
    #[arg(long)]
    n_points: Option<usize>,
    /// Existing dataset file (train and scan).
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct NetArgs {
    /// meta-comet or comet.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    nc: Option<usize>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    epochs_phase1: Option<usize>,
    #[arg(long)]
    epochs_phase2: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_max: Option<f64>,
    #[arg(long)]
    lr_min: Option<f64>,
    /// 0 disables early stopping.
    #[arg(long)]
    patience: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    n_sims: Option<usize>,
    #[arg(long)]
    t_end: Option<f64>,
    #[arg(long)]
    n_points: Option<usize>,
    #[arg(long)]
    grid_resolution: Option<usize>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl SystemArgs {
    fn apply(self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(path) = self.dataset {
            if self.system.is_none() {
                cfg.system.name = data::load_dataset(&path)?.system.name().to_string();
            }
            cfg.dataset = Some(path);
        }
        set(&mut cfg.system.name, self.system);
        set(&mut cfg.system.sigma, self.sigma);
        set(&mut cfg.system.n_traj, self.n_traj);
        set(&mut cfg.system.t_end, self.t_end);
        set(&mut cfg.system.n_points, self.n_points);
        Ok(())
    }
}

impl NetArgs {
    fn apply(self, cfg: &mut RunConfig) {
        set(&mut cfg.net.model, self.model);
        cfg.net.n_c = self.nc.or(cfg.net.n_c);
        cfg.net.rank = self.rank.or(cfg.net.rank);
        set(&mut cfg.net.width, self.width);
        set(&mut cfg.net.depth, self.depth);
    }
}

impl TrainArgs {
    fn apply(self, cfg: &mut RunConfig) {
        set(&mut cfg.train.epochs_phase1, self.epochs_phase1);
        set(&mut cfg.train.epochs_phase2, self.epochs_phase2);
        set(&mut cfg.train.batch_size, self.batch_size);
        set(&mut cfg.train.lr_max, self.lr_max);
        set(&mut cfg.train.lr_min, self.lr_min);
        set(&mut cfg.train.patience, self.patience);
    }
}

fn resolve(cli: Cli) -> Result<Option<(&'static str, RunConfig)>> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_env()?;
    set(&mut cfg.seed, cli.seed);
    set(&mut cfg.out_dir, cli.out.clone());
    set(&mut cfg.jobs, cli.jobs);
    let name = match cli.command {
        Command::Params => {
            print!("{}", params_table());
            return Ok(None);
        }
        Command::Rerun { manifest } => {
            let out = cli.out.ok_or_else(|| Error::Config("rerun needs --out for the replayed artifacts".into()))?;
            let rerun = commands::rerun(&manifest, &out)?;
            println!("{}", rerun.outcome.summary);
            for input in &rerun.changed_inputs {
                println!("input changed since the original run: {input}");
            }
            if rerun.differences.is_empty() {
                println!("all {} artifacts identical", rerun.outcome.manifest.artifacts.len());
                return Ok(None);
            }
            return Err(Error::Mismatch(format!("artifacts differ from the original run: {}", rerun.differences.join(", "))));
        }
        Command::Generate(system) => {
            system.apply(&mut cfg)?;
            cfg.dataset = None;
            "generate"
        }
        Command::Train { system, net, train } => {
            system.apply(&mut cfg)?;
            net.apply(&mut cfg);
            train.apply(&mut cfg);
            "train"
        }
        Command::Eval { checkpoint, system, nc, eval } => {
            cfg.checkpoint = checkpoint.or(cfg.checkpoint);
            set(&mut cfg.system.name, system);
            cfg.net.n_c = nc.or(cfg.net.n_c);
            set(&mut cfg.eval.n_sims, eval.n_sims);
            set(&mut cfg.eval.t_end, eval.t_end);
            set(&mut cfg.eval.n_points, eval.n_points);
            set(&mut cfg.eval.grid_resolution, eval.grid_resolution);
            "eval"
        }
        Command::Scan { system, net, train, nc_max, seeds, threshold } => {
            system.apply(&mut cfg)?;
            net.apply(&mut cfg);
            train.apply(&mut cfg);
            cfg.scan.nc_max = nc_max.or(cfg.scan.nc_max);
            set(&mut cfg.scan.seeds, seeds);
            set(&mut cfg.scan.threshold, threshold);
            "scan"
        }
    };
    Ok(Some((name, cfg)))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = resolve(cli).and_then(|resolved| {
        if let Some((name, cfg)) = resolved {
            eprintln!("resolved configuration:\n{}", cfg.to_toml()?);
            let outcome = commands::run(name, &cfg)?;
            println!("{}", outcome.summary);
            println!("wrote {}", outcome.dir.display());
        }
        Ok(())
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
