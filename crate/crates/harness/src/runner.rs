//! Expanding a config into cells and executing them per replicate seed.
//!
//! All cells of one seed run in a single job that owns a cache of dense
//! runs, so every cell with the same seed and task prunes and compares
//! against the same bitwise-identical baseline. Jobs run in parallel.

use std::collections::{BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use lth_core::earlybird::{early_bird_run, EarlyBirdConfig};
use lth_core::masking::{full_mask, sparsity, PruneMask};
use lth_core::metrics::{cost_report, predicted_size};
use lth_core::nn::ParameterSet;
use lth_core::pruning::{dense_run, fine_tune, imp_from, train_ticket, DenseRun, PruneConfig, Ticket};
use lth_core::tasks::{evaluate, load_or_generate, ShapesDataset, SplitKind, TaskKind};
use lth_core::train::{EvalPoint, Workload};
use lth_core::transfer::{cross_task_transfer, mask_transfer, ticket_transfer, GroupMapping};

use crate::config::{ExperimentConfig, Recipe};
use crate::error::{HarnessError, Result};
use crate::modules::module_grid;
use crate::presets;
use crate::results::{write_csv, CellDetail, ResultRow};

#[derive(Debug, Clone, PartialEq)]
pub enum CellKind {
    Dense,
    /// IMP ticket trained on the cell's task.
    Ticket(PruneConfig),
    EarlyBird(PruneConfig),
    /// Source ticket's mask and rewind weights on the shared groups.
    TicketTransfer(PruneConfig),
    /// Top-magnitude mask of the dense source weights, no source retraining.
    MaskTransfer(PruneConfig),
    CrossTask(PruneConfig),
    /// Ticket whose metric is the first epoch its validation loss reaches
    /// the same-seed dense run's final validation loss.
    Convergence(PruneConfig),
}

impl CellKind {
    pub fn prune(&self) -> Option<&PruneConfig> {
        match self {
            CellKind::Dense => None,
            CellKind::Ticket(c)
            | CellKind::EarlyBird(c)
            | CellKind::TicketTransfer(c)
            | CellKind::MaskTransfer(c)
            | CellKind::CrossTask(c)
            | CellKind::Convergence(c) => Some(c),
        }
    }

    fn tag(&self) -> &'static str {
        match self {
            CellKind::Dense => "dense",
            CellKind::Ticket(_) => "ticket",
            CellKind::EarlyBird(_) => "early_bird",
            CellKind::TicketTransfer(_) => "ticket_transfer",
            CellKind::MaskTransfer(_) => "mask_transfer",
            CellKind::CrossTask(_) => "cross_task",
            CellKind::Convergence(_) => "convergence",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub id: String,
    pub task: TaskKind,
    /// Task whose ticket or weights are transferred.
    pub source: Option<TaskKind>,
    pub kind: CellKind,
}

fn cell(kind: CellKind, task: TaskKind, source: Option<TaskKind>, label: Option<String>) -> Cell {
    let id = match (kind.prune(), label) {
        (_, Some(l)) => format!("{}:{l}", kind.tag()),
        (None, None) => kind.tag().to_string(),
        (Some(c), None) => format!(
            "{}:p={}:T={}:{}:j={}:{}",
            kind.tag(),
            c.target,
            c.rounds,
            c.scope.name(),
            c.rewind_iter,
            c.groups.join("+")
        ),
    };
    let mut id = id;
    if let Some(s) = source {
        id += &format!(":from={}", s.name());
    }
    if task != TaskKind::Classify {
        id += &format!("@{}", task.name());
    }
    Cell {
        id,
        task,
        source,
        kind,
    }
}

fn prune_configs(cfg: &ExperimentConfig) -> Vec<PruneConfig> {
    let g = &cfg.grid;
    let mut out = Vec::with_capacity(g.size());
    for groups in &g.groups {
        for &scope in &g.scope {
            for &rounds in &g.rounds {
                for &rewind_iter in &g.rewind_iter {
                    for &target in &g.p {
                        out.push(PruneConfig {
                            target,
                            rounds,
                            scope,
                            groups: groups.clone(),
                            rewind_iter,
                            train_iters: None,
                        });
                    }
                }
            }
        }
    }
    out
}

/// The ordered list of cells a config runs. Each recipe includes the dense
/// baseline of its (target) task.
pub fn expand(cfg: &ExperimentConfig) -> Result<Vec<Cell>> {
    cfg.validate()?;
    let grid = prune_configs(cfg);
    let mut cells = Vec::new();
    match cfg.recipe {
        Recipe::SparsitySweep | Recipe::ResettingSweep | Recipe::RoundsSweep | Recipe::ScopeCompare => {
            for &t in &cfg.tasks {
                cells.push(cell(CellKind::Dense, t, None, None));
                for c in &grid {
                    cells.push(cell(CellKind::Ticket(c.clone()), t, None, None));
                }
            }
        }
        Recipe::ModulePruning => {
            let task = cfg.tasks[0];
            let spec = presets::network(cfg.network, task, cfg.data.image_size, cfg.data.grid);
            let params = lth_core::nn::init_network(&spec, 0)?;
            let groups = cfg.grid.groups.first().cloned().unwrap_or_default();
            let subsets = module_grid(&groups, &params)?;
            cells.push(cell(CellKind::Dense, task, None, Some("none|0.00%".into())));
            for s in subsets.iter().filter(|s| !s.groups.is_empty()) {
                for c in grid.iter().filter(|c| c.groups == groups) {
                    let pc = PruneConfig {
                        groups: s.groups.clone(),
                        ..c.clone()
                    };
                    let label = format!("{}|{:.2}%", s.label(), s.param_pct);
                    let label = if grid.len() > 1 {
                        format!("{label}:p={}", c.target)
                    } else {
                        label
                    };
                    cells.push(cell(CellKind::Ticket(pc), task, None, Some(label)));
                }
            }
        }
        Recipe::EarlyBird => {
            for &t in &cfg.tasks {
                cells.push(cell(CellKind::Dense, t, None, None));
                for c in &grid {
                    cells.push(cell(CellKind::EarlyBird(c.clone()), t, None, None));
                    cells.push(cell(CellKind::Ticket(c.clone()), t, None, None));
                }
            }
        }
        Recipe::TransferCompare => {
            let (s, t) = (cfg.tasks[0], cfg.tasks[1]);
            cells.push(cell(CellKind::Dense, t, None, None));
            for c in &grid {
                cells.push(cell(CellKind::Ticket(c.clone()), t, None, None));
                cells.push(cell(CellKind::TicketTransfer(c.clone()), t, Some(s), None));
                cells.push(cell(CellKind::MaskTransfer(c.clone()), t, Some(s), None));
            }
        }
        Recipe::CrossTask => {
            let (s, t) = (cfg.tasks[0], cfg.tasks[1]);
            cells.push(cell(CellKind::Dense, t, None, None));
            for c in &grid {
                cells.push(cell(CellKind::Ticket(c.clone()), t, None, None));
                cells.push(cell(CellKind::CrossTask(c.clone()), t, Some(s), None));
            }
        }
        Recipe::Convergence => {
            for &t in &cfg.tasks {
                cells.push(cell(CellKind::Dense, t, None, None));
                for c in &grid {
                    cells.push(cell(CellKind::Convergence(c.clone()), t, None, None));
                }
            }
        }
    }
    Ok(cells)
}

/// Everything one seed's job shares across its cells.
struct SeedJob<'a> {
    cfg: &'a ExperimentConfig,
    data: Arc<ShapesDataset>,
    seed: u64,
    captures: Vec<usize>,
    dense: HashMap<TaskKind, std::result::Result<DenseRun, String>>,
}

struct CellOutcome {
    metric_name: String,
    metric_value: f64,
    params: ParameterSet,
    mask: PruneMask,
    workload: Workload,
    detail: CellDetail,
}

impl<'a> SeedJob<'a> {
    fn workload(&self, task: TaskKind) -> lth_core::Result<Workload> {
        presets::workload(self.cfg.network, task, self.data.clone(), self.cfg.train.clone())
    }

    fn dense(&mut self, task: TaskKind) -> lth_core::Result<&DenseRun> {
        if !self.dense.contains_key(&task) {
            let w = self.workload(task)?;
            let run = dense_run(&w, self.seed, w.train.iterations, &self.captures).map_err(|e| e.to_string());
            self.dense.insert(task, run);
        }
        self.dense[&task]
            .as_ref()
            .map_err(|e| lth_core::Error::Config(format!("dense baseline failed: {e}")))
    }

    fn source_ticket(&mut self, source: TaskKind, pc: &PruneConfig) -> lth_core::Result<Ticket> {
        let w = self.workload(source)?;
        let seed = self.seed;
        let dense = self.dense(source)?;
        Ok(imp_from(&w, pc, seed, dense)?.ticket)
    }

    fn finish(
        &self,
        workload: Workload,
        params: ParameterSet,
        mask: PruneMask,
        history: Vec<EvalPoint>,
    ) -> lth_core::Result<CellOutcome> {
        let ev = evaluate(&params, Some(&mask), &workload.spec, &workload.task, &self.data, SplitKind::Val)?;
        let report = sparsity(&mask, None)?;
        Ok(CellOutcome {
            metric_name: ev.metric.name().to_string(),
            metric_value: ev.value,
            detail: CellDetail {
                history,
                per_class: ev.per_class,
                per_size: ev.per_size,
                layers: report.layers,
                ..CellDetail::default()
            },
            params,
            mask,
            workload,
        })
    }

    fn run_cell(&mut self, cell: &Cell) -> lth_core::Result<CellOutcome> {
        let w = self.workload(cell.task)?;
        let seed = self.seed;
        let mapping_for = |params: &ParameterSet, pc: &PruneConfig| {
            let groups: Vec<&str> = pc.groups.iter().map(String::as_str).collect();
            GroupMapping::by_groups(params, &groups)
        };
        match &cell.kind {
            CellKind::Dense => {
                let d = self.dense(cell.task)?;
                let (params, history) = (d.state.params.clone(), d.history.clone());
                let mask = full_mask(&w.spec, &params)?;
                self.finish(w, params, mask, history)
            }
            CellKind::Ticket(pc) => {
                let out = imp_from(&w, pc, seed, self.dense(cell.task)?)?;
                let run = train_ticket(&w, &out.ticket, seed)?;
                let mut o = self.finish(w, run.state.params, out.ticket.mask, run.history)?;
                o.detail.dense_history = out.dense_history;
                o.detail
                    .extra
                    .insert("floor_residual".into(), out.ticket.provenance.residual() as f64);
                Ok(o)
            }
            CellKind::EarlyBird(pc) => {
                let eb = &self.cfg.early_bird;
                let mut ecfg = EarlyBirdConfig::new(w.train.iterations, pc.target, pc.groups.clone());
                if let Some(k) = eb.probe_interval {
                    ecfg.probe_interval = k;
                }
                ecfg.iou_threshold = eb.iou_threshold;
                ecfg.stable_window = eb.stable_window;
                ecfg.scope = pc.scope;
                ecfg.rewind_iter = pc.rewind_iter;
                ecfg.track_final = true;
                let out = early_bird_run(&w, &ecfg, seed)?;
                let run = train_ticket(&w, &out.ticket, seed)?;
                let total = w.train.iterations as f64;
                let first = out
                    .report
                    .history
                    .iter()
                    .find(|r| r.iou_prev.is_some_and(|v| v > ecfg.iou_threshold))
                    .map_or(f64::INFINITY, |r| r.iteration as f64);
                let mut o = self.finish(w, run.state.params, out.ticket.mask, run.history)?;
                o.detail.probes = out.report.history;
                o.detail.dense_history = self.dense(cell.task)?.history.clone();
                let x = &mut o.detail.extra;
                x.insert("stop_iteration".into(), out.stop_iteration as f64);
                x.insert("stop_fraction".into(), out.stop_iteration as f64 / total);
                x.insert("first_above_threshold".into(), first);
                x.insert("first_above_fraction".into(), first / total);
                Ok(o)
            }
            CellKind::TicketTransfer(pc) => {
                let source = cell.source.expect("transfer cell has a source");
                let ticket = self.source_ticket(source, pc)?;
                let mapping = mapping_for(&ticket.rewind_weights, pc)?;
                let (params, mask) = ticket_transfer(&ticket, &w.spec, &mapping, seed)?;
                let run = fine_tune(&w, params, &mask, seed)?;
                self.finish(w, run.state.params, mask, run.history)
            }
            CellKind::MaskTransfer(pc) => {
                let source = cell.source.expect("transfer cell has a source");
                let pretrained = self.dense(source)?.state.params.clone();
                let mapping = mapping_for(&pretrained, pc)?;
                let (params, mask) = mask_transfer(&pretrained, &w.spec, pc.target, &mapping, false, seed)?;
                let run = fine_tune(&w, params, &mask, seed)?;
                self.finish(w, run.state.params, mask, run.history)
            }
            CellKind::CrossTask(pc) => {
                let source = cell.source.expect("transfer cell has a source");
                let ticket = self.source_ticket(source, pc)?;
                let mapping = mapping_for(&ticket.rewind_weights, pc)?;
                let init = cross_task_transfer(&ticket, &w.spec, &mapping, seed)?;
                let run = fine_tune(&w, init.params, &init.mask, seed)?;
                let mut o = self.finish(w, run.state.params, init.mask, run.history)?;
                let x = &mut o.detail.extra;
                x.insert("trunk_sparsity".into(), init.trunk_sparsity);
                x.insert("trunk_fraction".into(), init.trunk_fraction);
                x.insert("init_network_sparsity".into(), init.network_sparsity);
                Ok(o)
            }
            CellKind::Convergence(pc) => {
                let dense = self.dense(cell.task)?;
                let dense_history = dense.history.clone();
                let out = imp_from(&w, pc, seed, dense)?;
                let run = train_ticket(&w, &out.ticket, seed)?;
                let target = dense_history.last().map_or(f64::NAN, |e| e.val_loss);
                let epochs = epochs_to_reach(&run.history, target);
                let dense_epochs = dense_history.last().map_or(f64::NAN, |e| e.epoch);
                let mut o = self.finish(w, run.state.params, out.ticket.mask, run.history)?;
                o.detail.extra.insert("final_metric".into(), o.metric_value);
                o.detail.extra.insert("dense_epochs".into(), dense_epochs);
                o.detail.dense_history = dense_history;
                o.metric_name = "epochs_to_dense_loss".into();
                o.metric_value = epochs;
                Ok(o)
            }
        }
    }
}

/// First evaluated epoch whose validation loss is at most `target`;
/// infinity when the curve never gets there.
pub fn epochs_to_reach(history: &[EvalPoint], target: f64) -> f64 {
    history
        .iter()
        .find(|e| e.val_loss <= target)
        .map_or(f64::INFINITY, |e| e.epoch)
}

fn base_row(cfg: &ExperimentConfig, cell: &Cell, seed: u64) -> ResultRow {
    let pc = cell.kind.prune();
    ResultRow {
        recipe: cfg.recipe.name().into(),
        cell_id: cell.id.clone(),
        seed,
        p_target: pc.map(|c| c.target),
        sparsity_exact: None,
        rounds: pc.map(|c| c.rounds),
        scope: pc.map(|c| c.scope.name().to_string()).unwrap_or_default(),
        rewind_iter: pc.map(|c| c.rewind_iter),
        groups: pc.map(|c| c.groups.join("+")).unwrap_or_default(),
        task: cell.task.name().into(),
        metric_name: cell.task.metric().name().into(),
        metric_value: None,
        bytes: None,
        macs_adjusted: None,
        error: String::new(),
        wall_time_s: 0.0,
        detail: String::new(),
    }
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "panic".into())
}

fn run_seed(
    cfg: &ExperimentConfig,
    data: Arc<ShapesDataset>,
    cells: &[Cell],
    seed: u64,
) -> Vec<(usize, ResultRow, Option<CellDetail>)> {
    let captures: BTreeSet<usize> = cfg.grid.rewind_iter.iter().copied().collect();
    let mut job = SeedJob {
        cfg,
        data,
        seed,
        captures: captures.into_iter().collect(),
        dense: HashMap::new(),
    };
    let mut out = Vec::with_capacity(cells.len());
    for (i, c) in cells.iter().enumerate() {
        let started = Instant::now();
        let mut row = base_row(cfg, c, seed);
        let result = catch_unwind(AssertUnwindSafe(|| job.run_cell(c)))
            .unwrap_or_else(|p| Err(lth_core::Error::Contract(panic_message(p))));
        row.wall_time_s = started.elapsed().as_secs_f64();
        let detail = match result.and_then(|o| {
            let bytes = predicted_size(&o.params, Some(&o.mask))?;
            let cost = cost_report(&o.workload.spec, &o.workload.task.head, &o.params, &o.mask)?;
            let s = sparsity(&o.mask, None)?;
            Ok((o, bytes, cost.adjusted_macs, s.network_sparsity))
        }) {
            Ok((o, bytes, macs, s)) => {
                row.metric_name = o.metric_name;
                row.metric_value = Some(o.metric_value);
                row.sparsity_exact = Some(s);
                row.bytes = Some(bytes);
                row.macs_adjusted = Some(macs);
                Some(o.detail)
            }
            Err(e) => {
                row.error = e.to_string();
                None
            }
        };
        out.push((i, row, detail));
    }
    out
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub rows: Vec<ResultRow>,
    pub details: Vec<Option<CellDetail>>,
    pub cells: Vec<Cell>,
}

/// Execute the grid times replicates. Failed cells become rows with an
/// error message; nothing here aborts the grid once the dataset exists.
pub fn execute(cfg: &ExperimentConfig, data: Arc<ShapesDataset>) -> Result<RunOutput> {
    let cells = expand(cfg)?;
    let seeds: Vec<u64> = cfg.seeds().collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| HarnessError::Aggregation(format!("worker pool: {e}")))?;
    let per_seed: Vec<Vec<(usize, ResultRow, Option<CellDetail>)>> = pool.install(|| {
        use rayon::prelude::*;
        seeds
            .par_iter()
            .map(|&s| run_seed(cfg, data.clone(), &cells, s))
            .collect()
    });
    // cell-major, seed-minor order
    let mut all: Vec<(usize, usize, ResultRow, Option<CellDetail>)> = per_seed
        .into_iter()
        .enumerate()
        .flat_map(|(si, v)| v.into_iter().map(move |(ci, r, d)| (ci, si, r, d)))
        .collect();
    all.sort_by_key(|(ci, si, _, _)| (*ci, *si));
    let (mut rows, mut details) = (Vec::new(), Vec::new());
    for (ci, _, mut r, d) in all {
        if d.is_some() {
            r.detail = format!("cells/{ci:03}-s{}.json", r.seed);
        }
        rows.push(r);
        details.push(d);
    }
    Ok(RunOutput {
        rows,
        details,
        cells,
    })
}

/// [`execute`], then write `results.csv`, detail files, the resolved config
/// and the recipe's SVG into the output directory.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let dir = cfg.output_dir();
    let cells_dir = dir.join("cells");
    std::fs::create_dir_all(&cells_dir).map_err(|e| HarnessError::io(&cells_dir, e))?;
    let data = Arc::new(load_or_generate(&cfg.data, cfg.data_seed, &data_cache_dir())?);
    let out = execute(cfg, data)?;
    write_outputs(cfg, &dir, &out)?;
    Ok(out)
}

pub fn data_cache_dir() -> std::path::PathBuf {
    crate::config::output_root().join("data")
}

pub fn write_outputs(cfg: &ExperimentConfig, dir: &Path, out: &RunOutput) -> Result<()> {
    let write = |path: &Path, s: &str| std::fs::write(path, s).map_err(|e| HarnessError::io(path, e));
    for (r, d) in out.rows.iter().zip(&out.details) {
        if let Some(d) = d {
            write(&dir.join(&r.detail), &serde_json::to_string(d)?)?;
        }
    }
    write_csv(&dir.join("results.csv"), &out.rows)?;
    write(&dir.join("config.json"), &cfg.to_json()?)?;
    let svg = crate::plot::recipe_figure(cfg.recipe, &out.rows, &out.details);
    write(&dir.join(format!("{}.svg", cfg.recipe.name())), &svg)?;
    Ok(())
}
