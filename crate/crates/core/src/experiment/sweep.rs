//! Grid sweeps over `key=value` overrides with replicates.
//!
//! Replicate 0 runs with the configured seed and replicate `r > 0` with a
//! seed derived from it, shared by every cell so cells are compared on
//! common random numbers.

use std::path::Path;

use super::{execute, ExperimentConfig};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, tag};

#[derive(Debug, Clone, PartialEq)]
pub struct SweepAxis {
    pub key: String,
    pub values: Vec<String>,
}

/// Parses `alpha=0.01,0.05,0.1`.
pub fn parse_axis(spec: &str) -> Result<SweepAxis> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("sweep parameter {spec:?} is not key=v1,v2,...")))?;
    let values: Vec<String> = values
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(str::to_string)
        .collect();
    if key.trim().is_empty() || values.is_empty() {
        return Err(Error::Config(format!("sweep parameter {spec:?} has no values")));
    }
    Ok(SweepAxis {
        key: key.trim().to_string(),
        values,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub cell: usize,
    pub settings: Vec<(String, String)>,
    pub replicate: usize,
    pub seed: u64,
    pub outcome: std::result::Result<SweepCellResult, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCellResult {
    pub final_median_log_rmse: f64,
    pub final_min_log_rmse: f64,
    pub iterations_used: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub keys: Vec<String>,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// Final median Log-RMSE of each replicate of `cell`, `None` where the
    /// run failed.
    pub fn cell_values(&self, cell: usize) -> Vec<Option<f64>> {
        self.rows
            .iter()
            .filter(|r| r.cell == cell)
            .map(|r| r.outcome.as_ref().ok().map(|o| o.final_median_log_rmse))
            .collect()
    }
}

pub fn replicate_seed(base: u64, replicate: usize) -> u64 {
    if replicate == 0 {
        base
    } else {
        derive_seed(base, &[tag::SWEEP, replicate as u64])
    }
}

/// Runs every cell of the Cartesian product of `axes`, `replicates` times.
/// A failed run is recorded in its row and the sweep continues.
pub fn sweep(cfg: &ExperimentConfig, axes: &[SweepAxis], replicates: usize) -> Result<SweepTable> {
    if axes.is_empty() || replicates == 0 {
        return Err(Error::Config("sweep needs at least one axis and one replicate".into()));
    }
    let mut cells: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for axis in axes {
        cells = cells
            .into_iter()
            .flat_map(|prefix| {
                axis.values.iter().map(move |v| {
                    let mut c = prefix.clone();
                    c.push((axis.key.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    // Reject bad keys and values before running anything.
    for settings in &cells {
        let mut probe = cfg.clone();
        for (k, v) in settings {
            probe.set(k, v)?;
        }
    }
    let mut rows = Vec::new();
    for (cell, settings) in cells.into_iter().enumerate() {
        for replicate in 0..replicates {
            let mut c = cfg.clone();
            for (k, v) in &settings {
                c.set(k, v)?;
            }
            c.seed = replicate_seed(cfg.seed, replicate);
            let outcome = match execute(&c) {
                Ok(out) => Ok(SweepCellResult {
                    final_median_log_rmse: out.summary.final_median_log_rmse(),
                    final_min_log_rmse: out.summary.final_min_log_rmse(),
                    iterations_used: out.summary.iterations_used,
                }),
                Err(e) => {
                    log::warn!("sweep cell {cell} replicate {replicate} failed: {e}");
                    Err(e.to_string())
                }
            };
            rows.push(SweepRow {
                cell,
                settings: settings.clone(),
                replicate,
                seed: c.seed,
                outcome,
            });
        }
    }
    Ok(SweepTable {
        keys: axes.iter().map(|a| a.key.clone()).collect(),
        rows,
    })
}

pub fn write_sweep_csv(path: &Path, table: &SweepTable) -> Result<()> {
    let err = |e: csv::Error| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(err)?;
    let mut header: Vec<String> = vec!["cell".into()];
    header.extend(table.keys.iter().cloned());
    header.extend(
        [
            "replicate",
            "seed",
            "status",
            "final_median_log_rmse",
            "final_min_log_rmse",
            "iterations_used",
            "error",
        ]
        .map(String::from),
    );
    w.write_record(&header).map_err(err)?;
    for row in &table.rows {
        let mut rec = vec![row.cell.to_string()];
        rec.extend(row.settings.iter().map(|(_, v)| v.clone()));
        rec.push(row.replicate.to_string());
        rec.push(row.seed.to_string());
        match &row.outcome {
            Ok(o) => rec.extend([
                "ok".to_string(),
                format!("{:?}", o.final_median_log_rmse),
                format!("{:?}", o.final_min_log_rmse),
                o.iterations_used.to_string(),
                String::new(),
            ]),
            Err(e) => rec.extend([
                "failed".to_string(),
                String::new(),
                String::new(),
                String::new(),
                e.clone(),
            ]),
        }
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
