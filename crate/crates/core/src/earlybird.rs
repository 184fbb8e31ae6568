//! Early-bird tickets: probe one-shot magnitude masks during dense training
//! and stop once consecutive probes agree.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{full_mask, PruneMask};
use crate::nn::{NetworkSpec, ParameterSet};
use crate::pruning::{
    magnitude_mask, pruned_over, rewind_masked, selected_ids, CheckpointStore, Provenance, Scope,
    Ticket,
};
use crate::train::{run_training, Control, TrainState, Workload};

/// IoU of the zero-sets of two masks over maskable ids. Two masks without
/// any zeros have IoU 1.
pub fn mask_iou(a: &PruneMask, b: &PruneMask) -> Result<f64> {
    a.check_same_layout(b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for ((id, ba), (_, bb)) in a.iter().zip(b.iter()) {
        if !a.is_maskable(id) {
            continue;
        }
        let (i, u) = ba.zero_overlap(bb);
        inter += i;
        union += u;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// One-shot magnitude mask of the current weights. Reads `params` only.
pub fn probe_mask(
    spec: &NetworkSpec,
    params: &ParameterSet,
    p: f64,
    scope: Scope,
    groups: &[String],
) -> Result<PruneMask> {
    let full = full_mask(spec, params)?;
    magnitude_mask(params, &full, p, scope, groups)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyBirdConfig {
    /// Iterations between probes; zero disables probing.
    pub probe_interval: usize,
    pub iou_threshold: f64,
    pub stable_window: usize,
    pub prune_fraction: f64,
    pub scope: Scope,
    pub groups: Vec<String>,
    pub rewind_iter: usize,
    /// Keep training after the stop so the report can compare every probe
    /// with the end-of-training mask. The ticket is unaffected.
    pub track_final: bool,
}

impl EarlyBirdConfig {
    /// Defaults: probe every 5% of training, threshold 0.95, window 3.
    pub fn new(total_iters: usize, prune_fraction: f64, groups: Vec<String>) -> Self {
        Self {
            probe_interval: (total_iters / 20).max(1),
            iou_threshold: 0.95,
            stable_window: 3,
            prune_fraction,
            scope: Scope::Global,
            groups,
            rewind_iter: 0,
            track_final: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold >= 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::Config(format!("IoU threshold {}", self.iou_threshold)));
        }
        if self.stable_window == 0 {
            return Err(Error::Config("stable window must be >= 1".into()));
        }
        if !(self.prune_fraction > 0.0 && self.prune_fraction < 1.0) {
            return Err(Error::Range(format!(
                "prune fraction {} outside (0, 1)",
                self.prune_fraction
            )));
        }
        if self.groups.is_empty() {
            return Err(Error::Config("no groups selected for pruning".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub iteration: usize,
    /// IoU with the previous probe; `None` for the first.
    pub iou_prev: Option<f64>,
    /// IoU with the end-of-training mask, when it is known.
    pub iou_final: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MaskIoUReport {
    pub history: Vec<ProbeRecord>,
}

impl MaskIoUReport {
    /// `iteration,iou_prev,iou_final` with empty cells for unknown values.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,iou_prev,iou_final\n");
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in &self.history {
            let _ = writeln!(s, "{},{},{}", r.iteration, cell(r.iou_prev), cell(r.iou_final));
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct EarlyBirdOutcome {
    pub ticket: Ticket,
    pub report: MaskIoUReport,
    pub stop_iteration: usize,
    /// End-of-training mask, when training reached the end.
    pub final_mask: Option<PruneMask>,
}

/// Train densely while probing masks; emit a ticket once `stable_window`
/// consecutive probe pairs reach `iou_threshold`, or at the end.
pub fn early_bird_run(workload: &Workload, cfg: &EarlyBirdConfig, seed: u64) -> Result<EarlyBirdOutcome> {
    workload.validate()?;
    cfg.validate()?;
    let total = workload.train.iterations;
    if cfg.rewind_iter >= total {
        return Err(Error::Config(format!(
            "rewind iteration {} not before {total}",
            cfg.rewind_iter
        )));
    }
    let spec = &workload.spec;
    let mut state = TrainState::fresh(workload, seed)?;
    let dense_mask = full_mask(spec, &state.params)?;
    let selected = selected_ids(&dense_mask, &cfg.groups)?;
    let mut store = CheckpointStore::new(&state);

    let mut masks: Vec<(usize, PruneMask)> = Vec::new();
    let mut history: Vec<ProbeRecord> = Vec::new();
    let mut streak = 0usize;
    let mut stop: Option<(usize, PruneMask)> = None;
    let result = run_training(workload, &mut state, &dense_mask, seed, total, &mut |s| {
        if s.iteration == cfg.rewind_iter {
            store.capture(s);
        }
        let probing = cfg.probe_interval > 0 && s.iteration % cfg.probe_interval == 0;
        if !probing || (stop.is_some() && !cfg.track_final) {
            return Ok(Control::Continue);
        }
        let m = probe_mask(spec, &s.params, cfg.prune_fraction, cfg.scope, &cfg.groups)?;
        let iou_prev = match masks.last() {
            Some((_, prev)) => Some(mask_iou(prev, &m)?),
            None => None,
        };
        history.push(ProbeRecord {
            iteration: s.iteration,
            iou_prev,
            iou_final: None,
        });
        if stop.is_none() {
            if iou_prev.is_some_and(|v| v >= cfg.iou_threshold) {
                streak += 1;
            } else {
                streak = 0;
            }
            if streak >= cfg.stable_window {
                stop = Some((s.iteration, m.clone()));
            }
        }
        masks.push((s.iteration, m));
        if stop.is_some() && !cfg.track_final {
            Ok(Control::Stop)
        } else {
            Ok(Control::Continue)
        }
    });
    if let Err(e) = result {
        let last_stable = history
            .iter()
            .rev()
            .find(|r| r.iou_prev.is_some_and(|v| v >= cfg.iou_threshold))
            .map(|r| r.iteration.to_string())
            .unwrap_or_else(|| "none".into());
        return Err(match e {
            Error::Training {
                round,
                iteration,
                reason,
            } => Error::Training {
                round,
                iteration,
                reason: format!("{reason} (last stable probe: {last_stable})"),
            },
            other => other,
        });
    }

    let final_mask = if state.iteration == total {
        Some(match masks.last() {
            Some((it, m)) if *it == total => m.clone(),
            _ => probe_mask(spec, &state.params, cfg.prune_fraction, cfg.scope, &cfg.groups)?,
        })
    } else {
        None
    };
    if let Some(fm) = &final_mask {
        for (rec, (_, m)) in history.iter_mut().zip(&masks) {
            rec.iou_final = Some(mask_iou(m, fm)?);
        }
    }
    let (stop_iteration, mask) = match stop {
        Some(s) => s,
        None => (total, final_mask.clone().expect("ran to the end")),
    };
    let rewound = rewind_masked(&store, cfg.rewind_iter, &mask)?;
    let (pruned, selected_total) = pruned_over(&mask, &selected)?;
    let ticket = Ticket {
        mask,
        rewind_weights: rewound.params,
        rewind_opt: rewound.opt,
        provenance: Provenance {
            source_task: workload.task.kind.name().to_string(),
            p: cfg.prune_fraction,
            rounds: 1,
            scope: cfg.scope,
            groups: cfg.groups.clone(),
            rewind_iter: cfg.rewind_iter,
            seed,
            creation_iter: stop_iteration,
            pruned,
            selected_total,
        },
    };
    Ok(EarlyBirdOutcome {
        ticket,
        report: MaskIoUReport { history },
        stop_iteration,
        final_mask,
    })
}
