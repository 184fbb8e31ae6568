//! Magnitude pruning, checkpoint rewinding and iterative magnitude pruning.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{apply_mask, full_mask, Bits, PruneMask};
use crate::nn::{group_of, OptimizerState, ParameterSet};
use crate::train::{run_training, Control, EvalPoint, TrainState, Workload};

/// Guard against `r * n` landing a hair below an integer.
const FLOOR_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Global,
    Layerwise,
}

impl Scope {
    pub fn name(self) -> &'static str {
        match self {
            Scope::Global => "global",
            Scope::Layerwise => "layerwise",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(Scope::Global),
            "layerwise" => Ok(Scope::Layerwise),
            _ => Err(Error::Config(format!("unknown scope {s}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    /// Total fraction of the selected weights to prune.
    pub target: f64,
    pub rounds: usize,
    pub scope: Scope,
    pub groups: Vec<String>,
    pub rewind_iter: usize,
    /// Each round trains up to this iteration; `None` means the end of the
    /// workload's schedule.
    #[serde(default)]
    pub train_iters: Option<usize>,
}

impl PruneConfig {
    pub fn one_shot(target: f64, groups: Vec<String>) -> Self {
        Self {
            target,
            rounds: 1,
            scope: Scope::Global,
            groups,
            rewind_iter: 0,
            train_iters: None,
        }
    }

    pub fn validate(&self, total_iters: usize) -> Result<()> {
        if !(self.target > 0.0 && self.target < 1.0) {
            return Err(Error::Range(format!("prune target {} outside (0, 1)", self.target)));
        }
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be >= 1".into()));
        }
        if self.groups.is_empty() {
            return Err(Error::Config("no groups selected for pruning".into()));
        }
        let n = self.train_iters.unwrap_or(total_iters);
        if n == 0 || n > total_iters {
            return Err(Error::Config(format!(
                "train_iters {n} outside 1..={total_iters}"
            )));
        }
        if self.rewind_iter >= n {
            return Err(Error::Config(format!(
                "rewind iteration {} not before round end {n}",
                self.rewind_iter
            )));
        }
        Ok(())
    }
}

/// Per-round prune fraction `r = 1 - (1 - p)^(1/T)`, so `T` rounds that each
/// prune `r` of the survivors remove `p` overall.
pub fn per_round_keep(p: f64, rounds: usize) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Range(format!("prune fraction {p} outside (0, 1)")));
    }
    if rounds == 0 {
        return Err(Error::Range("rounds must be >= 1".into()));
    }
    Ok(1.0 - (1.0 - p).powf(1.0 / rounds as f64))
}

/// Number of survivors to prune at rate `r`.
pub fn prune_count(r: f64, survivors: usize) -> usize {
    ((r * survivors as f64 + FLOOR_EPS).floor() as usize).min(survivors)
}

/// Maskable ids of `mask` that fall in the named groups, in mask order.
pub fn selected_ids(mask: &PruneMask, groups: &[String]) -> Result<Vec<String>> {
    if groups.is_empty() {
        return Err(Error::Config("no groups selected for pruning".into()));
    }
    let known: BTreeSet<&str> = mask.iter().map(|(id, _)| group_of(id)).collect();
    if let Some(bad) = groups.iter().find(|g| !known.contains(g.as_str())) {
        return Err(Error::Lookup(format!("group {bad}")));
    }
    Ok(mask
        .iter()
        .map(|(id, _)| id)
        .filter(|id| mask.is_maskable(id) && groups.iter().any(|g| g == group_of(id)))
        .map(str::to_string)
        .collect())
}

#[derive(Clone, Copy)]
struct Candidate<'a> {
    mag: f32,
    id: &'a str,
    index: usize,
}

fn by_magnitude(a: &Candidate, b: &Candidate) -> Ordering {
    a.mag
        .total_cmp(&b.mag)
        .then_with(|| a.id.cmp(b.id))
        .then_with(|| a.index.cmp(&b.index))
}

fn prune_smallest(mut cands: Vec<Candidate>, count: usize, mask: &mut BTreeMap<String, Bits>) {
    if count == 0 {
        return;
    }
    if count < cands.len() {
        cands.select_nth_unstable_by(count - 1, by_magnitude);
    }
    for c in &cands[..count] {
        mask.get_mut(c.id).unwrap().set(c.index, false);
    }
}

/// Zero the `floor(r * survivors)` smallest-magnitude surviving weights of
/// the selected groups. Ties break by ascending parameter id, then flat
/// index.
pub fn magnitude_mask(
    params: &ParameterSet,
    current: &PruneMask,
    r: f64,
    scope: Scope,
    groups: &[String],
) -> Result<PruneMask> {
    let ids = selected_ids(current, groups)?;
    magnitude_mask_ids(params, current, r, scope, &ids)
}

/// [`magnitude_mask`] over an explicit list of maskable ids.
pub fn magnitude_mask_ids(
    params: &ParameterSet,
    current: &PruneMask,
    r: f64,
    scope: Scope,
    ids: &[String],
) -> Result<PruneMask> {
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::Range(format!("prune fraction {r} outside (0, 1)")));
    }
    if !current.is_satisfied_by(params)? {
        return Err(Error::Contract(
            "parameters have non-zero values at pruned positions".into(),
        ));
    }
    if let Some(id) = ids.iter().find(|id| !current.is_maskable(id)) {
        return Err(Error::Contract(format!("{id} is not maskable")));
    }
    let mut new_bits: BTreeMap<String, Bits> = ids
        .iter()
        .map(|id| Ok((id.clone(), current.get(id)?.clone())))
        .collect::<Result<_>>()?;
    let mut per_tensor: Vec<Vec<Candidate>> = Vec::with_capacity(ids.len());
    for id in ids {
        let bits = current.get(id)?;
        let data = params.get(id)?.data();
        per_tensor.push(
            data.iter()
                .enumerate()
                .filter(|&(i, _)| bits.get(i))
                .map(|(i, v)| Candidate {
                    mag: v.abs(),
                    id: id.as_str(),
                    index: i,
                })
                .collect(),
        );
    }
    let survivors: usize = per_tensor.iter().map(Vec::len).sum();
    if survivors == 0 {
        return Err(Error::EmptyDomain(format!("{} selected tensors are fully pruned", ids.len())));
    }
    match scope {
        Scope::Global => {
            let count = prune_count(r, survivors);
            let all: Vec<Candidate> = per_tensor.into_iter().flatten().collect();
            prune_smallest(all, count, &mut new_bits);
        }
        Scope::Layerwise => {
            for cands in per_tensor {
                let count = prune_count(r, cands.len());
                prune_smallest(cands, count, &mut new_bits);
            }
        }
    }
    let mut out = current.clone();
    for (id, bits) in new_bits {
        out.set_bits(&id, bits)?;
    }
    Ok(out)
}

/// Snapshots of (weights, momentum) keyed by completed iterations.
#[derive(Debug, Clone, Default)]
pub struct CheckpointStore {
    snaps: BTreeMap<usize, (ParameterSet, OptimizerState)>,
}

impl CheckpointStore {
    /// A store holding the initial state as iteration 0.
    pub fn new(initial: &TrainState) -> Self {
        let mut s = Self::default();
        s.snaps
            .insert(0, (initial.params.clone(), initial.opt.clone()));
        s
    }

    pub fn capture(&mut self, state: &TrainState) {
        self.snaps.insert(
            state.iteration,
            (state.params.clone(), state.opt.clone()),
        );
    }

    pub fn contains(&self, iteration: usize) -> bool {
        self.snaps.contains_key(&iteration)
    }

    pub fn iterations(&self) -> impl Iterator<Item = usize> + '_ {
        self.snaps.keys().copied()
    }
}

/// Bit-exact copy of the snapshot taken after `j` iterations.
pub fn rewind(store: &CheckpointStore, j: usize) -> Result<(ParameterSet, OptimizerState)> {
    store
        .snaps
        .get(&j)
        .cloned()
        .ok_or_else(|| Error::Lookup(format!("no checkpoint at iteration {j}")))
}

/// Rewind and restrict to `mask`: weights and momentum at pruned positions
/// become zero.
pub fn rewind_masked(store: &CheckpointStore, j: usize, mask: &PruneMask) -> Result<TrainState> {
    let (mut params, mut opt) = rewind(store, j)?;
    apply_mask(&mut params, mask)?;
    apply_mask(&mut opt.momentum, mask)?;
    Ok(TrainState {
        params,
        opt,
        iteration: j,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_task: String,
    pub p: f64,
    #[serde(rename = "T")]
    pub rounds: usize,
    pub scope: Scope,
    pub groups: Vec<String>,
    pub rewind_iter: usize,
    pub seed: u64,
    /// Iteration whose weights produced the final mask.
    pub creation_iter: usize,
    /// Pruned elements in the selected groups and their total.
    pub pruned: usize,
    pub selected_total: usize,
}

impl Provenance {
    /// `pruned - round(p * selected_total)`: the floor residual.
    pub fn residual(&self) -> i64 {
        self.pruned as i64 - (self.p * self.selected_total as f64).round() as i64
    }
}

/// A mask with the weights (and momentum) to restart training from.
#[derive(Debug, Clone)]
pub struct Ticket {
    pub mask: PruneMask,
    pub rewind_weights: ParameterSet,
    pub rewind_opt: OptimizerState,
    pub provenance: Provenance,
}

impl Ticket {
    pub fn validate(&self) -> Result<()> {
        if !self.mask.is_satisfied_by(&self.rewind_weights)? {
            return Err(Error::Contract("rewind weights violate the ticket mask".into()));
        }
        if !self.mask.is_satisfied_by(&self.rewind_opt.momentum)? {
            return Err(Error::Contract("rewind momentum violates the ticket mask".into()));
        }
        Ok(())
    }

    pub fn rewind_state(&self) -> TrainState {
        TrainState {
            params: self.rewind_weights.clone(),
            opt: self.rewind_opt.clone(),
            iteration: self.provenance.rewind_iter,
        }
    }
}

/// Ticket plus the by-products of the run that made it.
#[derive(Debug, Clone)]
pub struct ImpOutcome {
    pub ticket: Ticket,
    /// Fully trained dense network from round 0.
    pub dense: TrainState,
    pub dense_history: Vec<EvalPoint>,
    /// Mask after each round.
    pub masks: Vec<PruneMask>,
}

fn with_round(e: Error, round: usize) -> Error {
    match e {
        Error::Training {
            iteration, reason, ..
        } => Error::Training {
            round,
            iteration,
            reason,
        },
        other => other,
    }
}

pub(crate) fn pruned_over(mask: &PruneMask, ids: &[String]) -> Result<(usize, usize)> {
    let mut pruned = 0;
    let mut total = 0;
    for id in ids {
        let b = mask.get(id)?;
        pruned += b.count_zeros();
        total += b.len();
    }
    Ok((pruned, total))
}

/// Dense training run with snapshots kept for later rewinding.
#[derive(Debug, Clone)]
pub struct DenseRun {
    pub store: CheckpointStore,
    pub state: TrainState,
    pub history: Vec<EvalPoint>,
}

/// Train densely for `until` iterations, snapshotting after each iteration
/// listed in `capture` (iteration 0 is always kept).
pub fn dense_run(workload: &Workload, seed: u64, until: usize, capture: &[usize]) -> Result<DenseRun> {
    workload.validate()?;
    let mut state = TrainState::fresh(workload, seed)?;
    let mask = full_mask(&workload.spec, &state.params)?;
    let mut store = CheckpointStore::new(&state);
    let history = run_training(workload, &mut state, &mask, seed, until, &mut |s| {
        if capture.contains(&s.iteration) {
            store.capture(s);
        }
        Ok(Control::Continue)
    })
    .map_err(|e| with_round(e, 0))?;
    Ok(DenseRun {
        store,
        state,
        history,
    })
}

/// Iterative magnitude pruning: train, prune `r` of the survivors, rewind
/// to `rewind_iter` under the new mask, repeat `rounds` times.
pub fn imp(workload: &Workload, config: &PruneConfig, seed: u64) -> Result<ImpOutcome> {
    workload.validate()?;
    config.validate(workload.train.iterations)?;
    let n = config.train_iters.unwrap_or(workload.train.iterations);
    let dense = dense_run(workload, seed, n, &[config.rewind_iter])?;
    imp_from(workload, config, seed, &dense)
}

/// [`imp`] reusing an existing round-0 run, which must have trained for the
/// configured length and hold a snapshot at the rewind iteration. The
/// result is bit-identical to [`imp`] with the same seed.
pub fn imp_from(workload: &Workload, config: &PruneConfig, seed: u64, dense: &DenseRun) -> Result<ImpOutcome> {
    workload.validate()?;
    config.validate(workload.train.iterations)?;
    let n = config.train_iters.unwrap_or(workload.train.iterations);
    let j = config.rewind_iter;
    let r = per_round_keep(config.target, config.rounds)?;
    if dense.state.iteration != n || !dense.store.contains(j) {
        return Err(Error::Contract(format!(
            "dense run at iteration {} lacks the {n}-iteration end or a snapshot at {j}",
            dense.state.iteration
        )));
    }
    let store = &dense.store;
    let mut state = dense.state.clone();
    let mut mask = full_mask(&workload.spec, &state.params)?;
    let selected = selected_ids(&mask, &config.groups)?;
    let mut masks = Vec::with_capacity(config.rounds);
    for round in 0..config.rounds {
        if round > 0 {
            state = rewind_masked(store, j, &mask)?;
            run_training(workload, &mut state, &mask, seed, n, &mut |_| Ok(Control::Continue))
                .map_err(|e| with_round(e, round))?;
        }
        mask = magnitude_mask(&state.params, &mask, r, config.scope, &config.groups)?;
        masks.push(mask.clone());
    }
    let rewound = rewind_masked(store, j, &mask)?;
    let (pruned, selected_total) = pruned_over(&mask, &selected)?;
    let ticket = Ticket {
        mask,
        rewind_weights: rewound.params,
        rewind_opt: rewound.opt,
        provenance: Provenance {
            source_task: workload.task.kind.name().to_string(),
            p: config.target,
            rounds: config.rounds,
            scope: config.scope,
            groups: config.groups.clone(),
            rewind_iter: j,
            seed,
            creation_iter: n,
            pruned,
            selected_total,
        },
    };
    Ok(ImpOutcome {
        ticket,
        dense: dense.state.clone(),
        dense_history: dense.history.clone(),
        masks,
    })
}

#[derive(Debug, Clone)]
pub struct TicketRun {
    pub state: TrainState,
    pub history: Vec<EvalPoint>,
}

/// Masked training of a ticket from its rewind point to the end of the
/// schedule, with batches drawn from `seed`'s order.
pub fn train_ticket(workload: &Workload, ticket: &Ticket, seed: u64) -> Result<TicketRun> {
    workload.validate()?;
    ticket.validate()?;
    let mut state = ticket.rewind_state();
    let history = run_training(
        workload,
        &mut state,
        &ticket.mask,
        seed,
        workload.train.iterations,
        &mut |_| Ok(Control::Continue),
    )?;
    Ok(TicketRun { state, history })
}

/// Fine-tune transferred parameters from iteration 0 with fresh momentum.
pub fn fine_tune(
    workload: &Workload,
    params: ParameterSet,
    mask: &PruneMask,
    seed: u64,
) -> Result<TicketRun> {
    workload.validate()?;
    let mut state = TrainState::from_params(workload, params);
    if !mask.is_satisfied_by(&state.params)? {
        return Err(Error::Contract("transferred weights violate the mask".into()));
    }
    let history = run_training(
        workload,
        &mut state,
        mask,
        seed,
        workload.train.iterations,
        &mut |_| Ok(Control::Continue),
    )?;
    Ok(TicketRun { state, history })
}
