//! Deterministic masked training loop shared by every pruning protocol.
//!
//! The minibatch at iteration `i` depends only on `(seed, i)`: each epoch
//! draws a fresh permutation of the training split from a ChaCha stream
//! keyed by the epoch number. Resuming from a snapshot therefore replays the
//! original data order exactly.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{full_mask, masked_train_step, PruneMask};
use crate::nn::{init_network, lr_at, LrSchedule, NetworkSpec, OptimizerState, ParameterSet};
use crate::tasks::{evaluate, ShapesDataset, SplitKind, TaskSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Iterations between validation passes; the final iteration is always
    /// evaluated. Zero evaluates only at the end.
    pub eval_interval: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::Config("iterations and batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "momentum {} / weight decay {}",
                self.momentum, self.weight_decay
            )));
        }
        self.schedule.validate()
    }
}

/// Everything a training run needs besides its seed.
#[derive(Debug, Clone)]
pub struct Workload {
    pub spec: NetworkSpec,
    pub task: TaskSpec,
    pub data: Arc<ShapesDataset>,
    pub train: TrainConfig,
}

impl Workload {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.train.validate()?;
        let out = self.spec.output_shape(&self.task.head)?.numel();
        let want = self.task.kind.output_dim(self.data.config.grid);
        if out != want {
            return Err(Error::Spec(format!(
                "head {} emits {out} outputs, task {} needs {want}",
                self.task.head, self.task.kind
            )));
        }
        if self.train.batch_size > self.data.train.len() {
            return Err(Error::Config(format!(
                "batch {} larger than training split {}",
                self.train.batch_size,
                self.data.train.len()
            )));
        }
        Ok(())
    }

    pub fn iters_per_epoch(&self) -> usize {
        (self.data.train.len() / self.train.batch_size).max(1)
    }

    pub fn with_task(&self, task: TaskSpec) -> Self {
        Self {
            task,
            ..self.clone()
        }
    }
}

/// Parameters, optimizer buffers and the number of completed iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ParameterSet,
    pub opt: OptimizerState,
    pub iteration: usize,
}

impl TrainState {
    pub fn fresh(workload: &Workload, seed: u64) -> Result<Self> {
        let params = init_network(&workload.spec, seed)?;
        Ok(Self::from_params(workload, params))
    }

    pub fn from_params(workload: &Workload, params: ParameterSet) -> Self {
        let opt = OptimizerState::new(&params, workload.train.momentum, workload.train.weight_decay);
        Self {
            params,
            opt,
            iteration: 0,
        }
    }

    pub fn bit_eq(&self, other: &TrainState) -> bool {
        self.iteration == other.iteration
            && self.params.bit_eq(&other.params)
            && self.opt.bit_eq(&other.opt)
    }
}

/// Seeded per-epoch permutation of the training rows.
#[derive(Debug, Clone)]
pub struct BatchOrder {
    n: usize,
    batch: usize,
    seed: u64,
    epoch: Option<(usize, Vec<usize>)>,
}

impl BatchOrder {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        Self {
            n,
            batch,
            seed,
            epoch: None,
        }
    }

    pub fn iters_per_epoch(&self) -> usize {
        (self.n / self.batch).max(1)
    }

    /// Rows used at iteration `iter`.
    pub fn rows(&mut self, iter: usize) -> &[usize] {
        let per = self.iters_per_epoch();
        let epoch = iter / per;
        if self.epoch.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(epoch as u64);
            let mut perm: Vec<usize> = (0..self.n).collect();
            perm.shuffle(&mut rng);
            self.epoch = Some((epoch, perm));
        }
        let start = (iter % per) * self.batch;
        let perm = &self.epoch.as_ref().unwrap().1;
        &perm[start..(start + self.batch).min(self.n)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub iteration: usize,
    pub epoch: f64,
    /// Mean minibatch loss since the previous evaluation.
    pub train_loss: f64,
    pub val_loss: f64,
    pub metric: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Train `state` under `mask` until `until` completed iterations.
///
/// `observer` runs after every step with the updated state and may stop
/// the run early. Evaluation happens every `eval_interval` iterations and at
/// the configured final iteration.
pub fn run_training(
    workload: &Workload,
    state: &mut TrainState,
    mask: &PruneMask,
    seed: u64,
    until: usize,
    observer: &mut dyn FnMut(&TrainState) -> Result<Control>,
) -> Result<Vec<EvalPoint>> {
    let cfg = &workload.train;
    if until > cfg.iterations {
        return Err(Error::Range(format!(
            "training until {until} exceeds the {}-iteration schedule",
            cfg.iterations
        )));
    }
    let loss = workload.task.loss();
    let data = &workload.data;
    let mut order = BatchOrder::new(data.train.len(), cfg.batch_size, seed);
    let per_epoch = order.iters_per_epoch() as f64;
    let mut history = Vec::new();
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);
    let diverged = |iteration: usize, reason: String| Error::Training {
        round: 0,
        iteration,
        reason,
    };
    while state.iteration < until {
        let it = state.iteration;
        let rows = order.rows(it);
        let inputs = data.train.images.rows(rows);
        let targets = workload.task.kind.targets(&data.train.labels, rows);
        let lr = lr_at(&cfg.schedule, it);
        let value = masked_train_step(
            &mut state.params,
            mask,
            &workload.spec,
            &workload.task.head,
            &inputs,
            &targets,
            loss,
            &mut state.opt,
            lr,
        )
        .map_err(|e| match e {
            Error::NonFinite(r) => diverged(it, r),
            other => other,
        })?;
        if !state.params.is_finite() {
            return Err(diverged(it, "non-finite weights".into()));
        }
        state.iteration += 1;
        loss_sum += value;
        loss_n += 1;
        let done = state.iteration;
        if done == cfg.iterations || (cfg.eval_interval > 0 && done % cfg.eval_interval == 0) {
            let ev = evaluate(
                &state.params,
                None,
                &workload.spec,
                &workload.task,
                data,
                SplitKind::Val,
            )
            .map_err(|e| match e {
                Error::NonFinite(r) => diverged(done, r),
                other => other,
            })?;
            history.push(EvalPoint {
                iteration: done,
                epoch: done as f64 / per_epoch,
                train_loss: loss_sum / loss_n as f64,
                val_loss: ev.loss,
                metric: ev.value,
            });
            loss_sum = 0.0;
            loss_n = 0;
        }
        if observer(state)? == Control::Stop {
            break;
        }
    }
    Ok(history)
}

/// Plain dense training from initialisation to the end of the schedule.
pub fn train_dense(workload: &Workload, seed: u64) -> Result<(TrainState, Vec<EvalPoint>)> {
    workload.validate()?;
    let mut state = TrainState::fresh(workload, seed)?;
    let mask = full_mask(&workload.spec, &state.params)?;
    let history = run_training(
        workload,
        &mut state,
        &mask,
        seed,
        workload.train.iterations,
        &mut |_| Ok(Control::Continue),
    )?;
    Ok((state, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_order_is_a_pure_function_of_iteration() {
        let mut a = BatchOrder::new(100, 32, 5);
        let mut b = BatchOrder::new(100, 32, 5);
        let late: Vec<usize> = a.rows(7).to_vec();
        for i in 0..7 {
            b.rows(i);
        }
        assert_eq!(b.rows(7), &late[..]);
        // one epoch covers distinct rows
        let mut seen: Vec<usize> = (0..3).flat_map(|i| a.rows(i).to_vec()).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 96);
    }
}
