//! Aggregating results CSVs into mean ± sample std per cell.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::plot::mean_std;
use crate::results::{read_csv, ResultRow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub recipe: String,
    pub cell_id: String,
    pub task: String,
    pub metric_name: String,
    /// Successful replicates.
    pub n: usize,
    pub errors: usize,
    pub mean: Option<f64>,
    /// Sample standard deviation; 0 when only one replicate succeeded.
    pub std: Option<f64>,
    /// Set when `std` is 0 by convention rather than measured.
    pub single_replicate: bool,
    pub sparsity_mean: Option<f64>,
}

/// Every `results.csv` under `dir`, depth first, sorted by path.
pub fn find_results(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = std::fs::read_dir(&d).map_err(|e| HarnessError::io(&d, e))?;
        for e in entries {
            let path = e.map_err(|e| HarnessError::io(&d, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == "results.csv") {
                found.push(path);
            }
        }
    }
    found.sort();
    Ok(found)
}

/// Group by (recipe, cell, task, metric) in first-seen order.
pub fn aggregate(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, String, String, String)> = Vec::new();
    let mut members: Vec<Vec<&ResultRow>> = Vec::new();
    for r in rows {
        let k = (r.recipe.clone(), r.cell_id.clone(), r.task.clone(), r.metric_name.clone());
        match keys.iter().position(|x| *x == k) {
            Some(i) => members[i].push(r),
            None => {
                keys.push(k);
                members.push(vec![r]);
            }
        }
    }
    keys.into_iter()
        .zip(members)
        .map(|((recipe, cell_id, task, metric_name), rs)| {
            let ok: Vec<&&ResultRow> = rs.iter().filter(|r| r.is_ok()).collect();
            let vals: Vec<f64> = ok.iter().filter_map(|r| r.metric_value).collect();
            let sps: Vec<f64> = ok.iter().filter_map(|r| r.sparsity_exact).collect();
            let (mean, std) = if vals.is_empty() {
                (None, None)
            } else {
                let (m, s) = mean_std(&vals);
                (Some(m), Some(s))
            };
            SummaryRow {
                recipe,
                cell_id,
                task,
                metric_name,
                n: vals.len(),
                errors: rs.len() - ok.len(),
                mean,
                std,
                single_replicate: vals.len() == 1,
                sparsity_mean: (!sps.is_empty()).then(|| mean_std(&sps).0),
            }
        })
        .collect()
}

pub fn to_markdown(summary: &[SummaryRow]) -> String {
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    let mut s = String::from(
        "| recipe | cell | task | metric | n | errors | mean | std | sparsity |\n|---|---|---|---|---|---|---|---|---|\n",
    );
    for r in summary {
        let std = match (r.std, r.single_replicate) {
            (Some(v), true) => format!("{v:.4}*"),
            (v, _) => cell(v),
        };
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} |",
            r.recipe,
            r.cell_id,
            r.task,
            r.metric_name,
            r.n,
            r.errors,
            cell(r.mean),
            std,
            cell(r.sparsity_mean)
        );
    }
    if summary.iter().any(|r| r.single_replicate) {
        s.push_str("\n\\* single replicate: std is 0 by convention.\n");
    }
    s
}

/// Aggregate every results CSV under `dir` and write `summary.md` and
/// `summary.csv` there.
pub fn report(dir: &Path) -> Result<Vec<SummaryRow>> {
    let files = find_results(dir)?;
    if files.is_empty() {
        return Err(HarnessError::Aggregation(format!(
            "no results.csv under {}",
            dir.display()
        )));
    }
    let mut rows = Vec::new();
    for f in &files {
        rows.extend(read_csv(f)?);
    }
    let summary = aggregate(&rows);
    let md = dir.join("summary.md");
    std::fs::write(&md, to_markdown(&summary)).map_err(|e| HarnessError::io(&md, e))?;
    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    for r in &summary {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| HarnessError::io(dir.join("summary.csv"), e))?;
    Ok(summary)
}
