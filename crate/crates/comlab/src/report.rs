//! Structured-text reports and CSV series.

use std::fmt::Write as _;

use comlab_core::evaluation::{RmseStats, ScanResult};
use comlab_core::training::History;
use comlab_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-epoch history: `epoch,lr,train_loss,val_loss` (empty when not measured).
pub fn history_csv(history: &History) -> String {
    let mut out = String::from("epoch,lr,train_loss,val_loss\n");
    for r in &history.records {
        let val = r.val_loss.map(|v| format!("{v:?}")).unwrap_or_default();
        let _ = writeln!(out, "{},{:?},{:?},{val}", r.epoch, r.lr, r.train_loss);
    }
    out
}

/// Columns named by `header`, one row per entry of `rows`.
pub fn table_csv(header: &[String], rows: &[Vec<f64>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Grid values as `x,y,c` rows.
pub fn contour_csv(xs: &[f64], ys: &[f64], grid: &Tensor, x_name: &str, y_name: &str) -> String {
    let mut out = format!("{x_name},{y_name},c\n");
    for (a, x) in xs.iter().enumerate() {
        for (b, y) in ys.iter().enumerate() {
            let _ = writeln!(out, "{x:?},{y:?},{:?}", grid.get(a, b));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainMetrics {
    pub model: String,
    pub num_params: usize,
    /// Residual L1 of the returned model on the validation split.
    pub val_residual_l1: f64,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub epochs_run: usize,
    /// `||S^T S - I||_F` and `||D^T D - I||_F` per hidden layer after phase 1.
    pub semi_orthogonality: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RmseSection {
    pub n_sims: usize,
    pub t_end: f64,
    pub n_points: usize,
    pub median: f64,
    pub p2_5: f64,
    pub p97_5: f64,
    pub failures: usize,
    /// Per-simulation RMSE; failed rollouts are written as `inf`.
    pub per_sim: Vec<f64>,
    pub reference: String,
}

impl RmseSection {
    pub fn new(stats: &RmseStats, t_end: f64, n_points: usize) -> Self {
        Self {
            n_sims: stats.per_sim.len(),
            t_end,
            n_points,
            median: stats.median,
            p2_5: stats.p2_5,
            p97_5: stats.p97_5,
            failures: stats.failures,
            per_sim: stats.per_sim.clone(),
            reference: "clean ground-truth trajectories from the same initial state".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftEntry {
    pub name: String,
    pub learned: bool,
    pub drift: f64,
    pub absolute: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentSection {
    /// True constant the first learned constant is compared with.
    pub against: String,
    pub correlation: f64,
    pub scale: f64,
    pub shift: f64,
    /// Drift of the affinely aligned learned constant along the drift trajectory.
    pub aligned_drift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub system: String,
    pub model: String,
    pub n_c: usize,
    pub rmse: RmseSection,
    pub drift: Vec<DriftEntry>,
    pub alignment: Option<AlignmentSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanRow {
    pub n_c: usize,
    pub mean_l1: f64,
    pub std_l1: f64,
    pub relative: f64,
    pub relative_std: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanReport {
    pub system: String,
    pub seeds: Vec<u64>,
    pub threshold: f64,
    pub detected: usize,
    pub l1_split: String,
    pub rows: Vec<ScanRow>,
}

impl ScanReport {
    pub fn new(system: &str, result: &ScanResult) -> Self {
        let mut seeds: Vec<u64> = result.runs.iter().map(|r| r.cell.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        let rows = result
            .n_c
            .iter()
            .enumerate()
            .map(|(i, &k)| ScanRow {
                n_c: k,
                mean_l1: result.mean[i],
                std_l1: result.std[i],
                relative: result.relative[i],
                relative_std: result.relative_std[i],
                per_seed: result.runs.iter().filter(|r| r.cell.n_c == k).map(|r| r.l1).collect(),
            })
            .collect();
        Self {
            system: system.into(),
            seeds,
            threshold: result.threshold,
            detected: result.detected,
            l1_split: "validation".into(),
            rows,
        }
    }
}

/// Phase-2 validation curves, one column per `(n_c, seed)` run.
pub fn scan_curves_csv(result: &ScanResult) -> String {
    let header: Vec<String> = std::iter::once("epoch".to_string())
        .chain(result.runs.iter().map(|r| format!("nc{}_seed{}", r.cell.n_c, r.cell.seed)))
        .collect();
    let longest = result.runs.iter().map(|r| r.curve.len()).max().unwrap_or(0);
    let mut out = header.join(",");
    out.push('\n');
    for e in 0..longest {
        let mut cells = vec![e.to_string()];
        cells.extend(result.runs.iter().map(|r| r.curve.get(e).map(|v| format!("{v:?}")).unwrap_or_default()));
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| Error::Config(format!("serializing report: {e}")))
}
