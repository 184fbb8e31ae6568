//! Result rows, their CSV form and the per-row detail records.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use lth_core::earlybird::ProbeRecord;
use lth_core::masking::CountRow;
use lth_core::tasks::BreakdownRow;
use lth_core::train::EvalPoint;

use crate::error::{HarnessError, Result};

/// Fixed CSV header. Every recipe emits exactly these columns.
pub const COLUMNS: [&str; 17] = [
    "recipe",
    "cell_id",
    "seed",
    "p_target",
    "sparsity_exact",
    "rounds",
    "scope",
    "rewind_iter",
    "groups",
    "task",
    "metric_name",
    "metric_value",
    "bytes",
    "macs_adjusted",
    "error",
    "wall_time_s",
    "detail",
];

/// One (cell, seed) outcome. Numeric fields are empty when the cell failed
/// or does not apply (the dense baseline has no prune target).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub recipe: String,
    pub cell_id: String,
    pub seed: u64,
    pub p_target: Option<f64>,
    /// From the final mask's bit counts.
    pub sparsity_exact: Option<f64>,
    pub rounds: Option<usize>,
    pub scope: String,
    pub rewind_iter: Option<usize>,
    /// Pruned groups joined with `+`.
    pub groups: String,
    pub task: String,
    pub metric_name: String,
    pub metric_value: Option<f64>,
    pub bytes: Option<usize>,
    pub macs_adjusted: Option<f64>,
    pub error: String,
    pub wall_time_s: f64,
    /// Path of the detail JSON, relative to the results directory.
    pub detail: String,
}

impl ResultRow {
    pub fn is_ok(&self) -> bool {
        self.error.is_empty()
    }
}

/// Side data for plots and breakdowns, one file per row.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CellDetail {
    pub history: Vec<EvalPoint>,
    /// Same-seed dense baseline curve, where the cell compares against it.
    pub dense_history: Vec<EvalPoint>,
    pub per_class: Vec<BreakdownRow>,
    pub per_size: Vec<BreakdownRow>,
    pub layers: Vec<CountRow>,
    pub probes: Vec<ProbeRecord>,
    pub extra: BTreeMap<String, f64>,
}

pub fn write_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(COLUMNS)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))?;
    Ok(())
}

/// Read a results CSV, rejecting any header other than [`COLUMNS`].
pub fn read_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != COLUMNS {
        return Err(HarnessError::Aggregation(format!(
            "{}: unexpected columns {header:?}",
            path.display()
        )));
    }
    Ok(r.deserialize().collect::<std::result::Result<Vec<ResultRow>, _>>()?)
}
