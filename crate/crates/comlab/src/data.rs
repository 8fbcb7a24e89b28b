//! Dataset files: `#`-prefixed TOML header lines, then CSV with columns
//! `t, s_0.., sdot_0.., F_0..`. Floats are written in shortest round-trip
//! form, so a save/load cycle is exact.

use std::path::Path;

use comlab_core::systems::{Dataset, Sample, SystemKind};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &str = "# comlab-dataset";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub system: String,
    pub sigma: f64,
    pub seed: u64,
    pub n_traj: usize,
    pub n_points: usize,
    pub t_end: f64,
    pub failures: usize,
    pub n_s: usize,
    pub n_f: usize,
}

impl DatasetHeader {
    pub fn of(ds: &Dataset) -> Self {
        Self {
            system: ds.system.name().to_string(),
            sigma: ds.sigma,
            seed: ds.seed,
            n_traj: ds.n_traj,
            n_points: ds.n_points,
            t_end: ds.t_end,
            failures: ds.failures,
            n_s: ds.n_s(),
            n_f: ds.n_f(),
        }
    }
}

pub fn column_names(n_s: usize, n_f: usize) -> Vec<String> {
    let mut cols = vec!["t".to_string()];
    cols.extend((0..n_s).map(|i| format!("s_{i}")));
    cols.extend((0..n_s).map(|i| format!("sdot_{i}")));
    cols.extend((0..n_f).map(|i| format!("F_{i}")));
    cols
}

pub fn to_string(ds: &Dataset) -> Result<String> {
    if ds.seed > crate::config::MAX_SEED {
        return Err(Error::Config(format!("dataset seed {} exceeds {}", ds.seed, crate::config::MAX_SEED)));
    }
    let header = toml::to_string(&DatasetHeader::of(ds)).map_err(|e| Error::Config(format!("dataset header: {e}")))?;
    let mut out = String::from(MAGIC);
    out.push('\n');
    for line in header.lines() {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Config(format!("csv: {e}"));
    w.write_record(column_names(ds.n_s(), ds.n_f())).map_err(csv_err)?;
    for s in &ds.samples {
        let row = std::iter::once(&s.t).chain(&s.state).chain(&s.target).chain(&s.force).map(|v| format!("{v:?}"));
        w.write_record(row).map_err(csv_err)?;
    }
    let body = w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))?;
    out.push_str(std::str::from_utf8(&body).expect("csv output is UTF-8"));
    Ok(out)
}

pub fn from_str(text: &str, path: &Path) -> Result<Dataset> {
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(Error::format(path, "not a comlab dataset (missing magic line)"));
    }
    let header_text: String = text
        .lines()
        .skip(1)
        .take_while(|l| l.starts_with('#'))
        .map(|l| format!("{}\n", l.trim_start_matches('#').trim_start()))
        .collect();
    let header: DatasetHeader = toml::from_str(&header_text).map_err(|e| Error::format(path, format!("header: {e}")))?;
    let kind: SystemKind = header.system.parse().map_err(|e| Error::format(path, format!("field system: {e}")))?;
    let system = kind.system();
    if header.n_s != system.n_s() || header.n_f != system.n_f() {
        return Err(Error::format(
            path,
            format!("field n_s/n_f: {}/{} do not match system {} ({}/{})", header.n_s, header.n_f, kind.name(), system.n_s(), system.n_f()),
        ));
    }
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let expected = column_names(header.n_s, header.n_f);
    let found: Vec<String> = reader
        .headers()
        .map_err(|e| Error::format(path, format!("columns: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    if found != expected {
        return Err(Error::format(path, format!("columns: expected {}, found {}", expected.join(","), found.join(","))));
    }
    let (n_s, n_f) = (header.n_s, header.n_f);
    let mut samples = Vec::with_capacity(header.n_traj * header.n_points);
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::format(path, format!("row {}: {e}", row + 1)))?;
        let values = record
            .iter()
            .enumerate()
            .map(|(j, v)| {
                v.parse::<f64>().map_err(|_| Error::format(path, format!("row {}, column {}: bad number `{v}`", row + 1, expected[j])))
            })
            .collect::<Result<Vec<f64>>>()?;
        samples.push(Sample {
            trajectory: row / header.n_points.max(1),
            t: values[0],
            state: values[1..1 + n_s].to_vec(),
            target: values[1 + n_s..1 + 2 * n_s].to_vec(),
            force: values[1 + 2 * n_s..1 + 2 * n_s + n_f].to_vec(),
        });
    }
    if samples.len() != header.n_traj * header.n_points {
        return Err(Error::format(
            path,
            format!("{} rows, header promises n_traj * n_points = {}", samples.len(), header.n_traj * header.n_points),
        ));
    }
    Ok(Dataset {
        system: kind,
        sigma: header.sigma,
        seed: header.seed,
        n_traj: header.n_traj,
        n_points: header.n_points,
        t_end: header.t_end,
        failures: header.failures,
        samples,
    })
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, to_string(ds)?).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_str(&text, path)
}
