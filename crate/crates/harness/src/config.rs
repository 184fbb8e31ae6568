//! Experiment configuration: a recipe, a pruning grid and replicate seeds.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use lth_core::pruning::Scope;
use lth_core::tasks::{DatasetConfig, TaskKind};
use lth_core::train::TrainConfig;
use lth_core::{Error, Result};

use crate::presets::{self, NetSize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[clap(rename_all = "snake_case")]
pub enum Recipe {
    SparsitySweep,
    ResettingSweep,
    ModulePruning,
    RoundsSweep,
    ScopeCompare,
    EarlyBird,
    TransferCompare,
    CrossTask,
    Convergence,
}

impl Recipe {
    pub const ALL: [Recipe; 9] = [
        Recipe::SparsitySweep,
        Recipe::ResettingSweep,
        Recipe::ModulePruning,
        Recipe::RoundsSweep,
        Recipe::ScopeCompare,
        Recipe::EarlyBird,
        Recipe::TransferCompare,
        Recipe::CrossTask,
        Recipe::Convergence,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Recipe::SparsitySweep => "sparsity_sweep",
            Recipe::ResettingSweep => "resetting_sweep",
            Recipe::ModulePruning => "module_pruning",
            Recipe::RoundsSweep => "rounds_sweep",
            Recipe::ScopeCompare => "scope_compare",
            Recipe::EarlyBird => "early_bird",
            Recipe::TransferCompare => "transfer_compare",
            Recipe::CrossTask => "cross_task",
            Recipe::Convergence => "convergence",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Recipe::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown recipe {s}")))
    }

    /// Source and target for the two transfer recipes.
    pub fn is_transfer(self) -> bool {
        matches!(self, Recipe::TransferCompare | Recipe::CrossTask)
    }
}

/// Cartesian product of pruning settings. Every combination is one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneGrid {
    pub p: Vec<f64>,
    pub rounds: Vec<usize>,
    pub scope: Vec<Scope>,
    pub rewind_iter: Vec<usize>,
    pub groups: Vec<Vec<String>>,
}

impl PruneGrid {
    pub fn size(&self) -> usize {
        self.p.len() * self.rounds.len() * self.scope.len() * self.rewind_iter.len() * self.groups.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyBirdSettings {
    /// `None` probes every 5% of training.
    pub probe_interval: Option<usize>,
    pub iou_threshold: f64,
    pub stable_window: usize,
}

impl Default for EarlyBirdSettings {
    fn default() -> Self {
        Self {
            probe_interval: None,
            iou_threshold: 0.95,
            stable_window: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub recipe: Recipe,
    pub network: NetSize,
    /// One task per run, or `[source, target]` for the transfer recipes.
    pub tasks: Vec<TaskKind>,
    pub grid: PruneGrid,
    pub replicates: usize,
    /// Replicate `r` uses seed `base_seed + r` for init and data order.
    pub base_seed: u64,
    /// The dataset is shared by all replicates.
    pub data_seed: u64,
    pub data: DatasetConfig,
    pub train: TrainConfig,
    pub early_bird: EarlyBirdSettings,
    pub workers: usize,
    /// Defaults to `<output root>/<recipe>`.
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// The desk-scale default for `recipe`.
    pub fn for_recipe(recipe: Recipe) -> Self {
        let n = presets::DESK_ITERATIONS;
        let train = presets::desk_train(n);
        let j = presets::default_rewind(n);
        let milestone = train.schedule.decay_milestones.first().copied().unwrap_or(n / 2);
        let mut grid = PruneGrid {
            p: vec![0.8],
            rounds: vec![1],
            scope: vec![Scope::Global],
            rewind_iter: vec![j],
            groups: vec![presets::default_groups()],
        };
        let mut tasks = vec![TaskKind::Classify];
        match recipe {
            Recipe::SparsitySweep => grid.p = vec![0.5, 0.8, 0.9],
            Recipe::ResettingSweep => grid.rewind_iter = vec![0, n / 10, 3 * n / 10, milestone + 1],
            Recipe::ModulePruning => {}
            Recipe::RoundsSweep => grid.rounds = vec![1, 2, 4],
            Recipe::ScopeCompare => {
                grid.p = vec![0.8, 0.9];
                grid.scope = vec![Scope::Global, Scope::Layerwise];
            }
            Recipe::EarlyBird => {}
            Recipe::TransferCompare | Recipe::CrossTask => {
                grid.p = vec![0.67];
                grid.groups = vec![presets::SHARED.map(String::from).to_vec()];
                tasks = vec![TaskKind::Classify, TaskKind::DetectGrid];
            }
            Recipe::Convergence => {
                // the iterative ticket: one-shot tickets train too slowly at desk scale
                grid.rounds = vec![4];
                tasks = TaskKind::ALL.to_vec();
            }
        }
        Self {
            recipe,
            network: NetSize::Small,
            tasks,
            grid,
            replicates: 5,
            base_seed: 0,
            data_seed: 7,
            data: presets::desk_data(),
            train,
            early_bird: EarlyBirdSettings::default(),
            workers: 1,
            output_dir: None,
        }
    }

    /// Parse JSON: `recipe` is required and every other field falls back to
    /// the recipe's default. Nested objects merge one level deep, so
    /// `{"recipe": "sparsity_sweep", "grid": {"p": [0.7]}}` keeps the
    /// default rounds, scope and groups.
    pub fn from_json(s: &str) -> Result<Self> {
        let given: Value = serde_json::from_str(s)?;
        let obj = given
            .as_object()
            .ok_or_else(|| Error::Config("config must be a JSON object".into()))?;
        let recipe = obj
            .get("recipe")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Config("config needs a \"recipe\" string".into()))?;
        let mut merged = serde_json::to_value(Self::for_recipe(Recipe::parse(recipe)?))?;
        let base = merged.as_object_mut().expect("struct serialises to an object");
        for (k, v) in obj {
            match (base.get_mut(k), v) {
                (Some(Value::Object(dst)), Value::Object(src)) => {
                    for (kk, vv) in src {
                        dst.insert(kk.clone(), vv.clone());
                    }
                }
                _ => {
                    base.insert(k.clone(), v.clone());
                }
            }
        }
        let cfg: Self = serde_json::from_value(merged)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be >= 1".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        if self.grid.size() == 0 {
            return Err(Error::Config("empty pruning grid".into()));
        }
        if let Some(p) = self.grid.p.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
            return Err(Error::Config(format!("prune fraction {p} outside (0, 1)")));
        }
        if self.grid.rounds.contains(&0) {
            return Err(Error::Config("rounds must be >= 1".into()));
        }
        let n = self.train.iterations;
        if let Some(j) = self.grid.rewind_iter.iter().find(|j| **j >= n) {
            return Err(Error::Config(format!("rewind iteration {j} not before {n}")));
        }
        let want = if self.recipe.is_transfer() { Some(2) } else { None };
        match want {
            Some(k) if self.tasks.len() != k || self.tasks[0] == self.tasks[1] => {
                return Err(Error::Config(format!(
                    "{} needs distinct [source, target] tasks",
                    self.recipe.name()
                )))
            }
            None if self.tasks.is_empty() => return Err(Error::Config("no tasks".into())),
            _ => {}
        }
        self.data.validate()?;
        self.train.validate()
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .unwrap_or_else(|| output_root().join(self.recipe.name()))
    }

    pub fn seeds(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.replicates as u64).map(|r| self.base_seed + r)
    }
}

/// Environment variable naming the output root.
pub const OUTPUT_ENV: &str = "LTH_OUTPUT";

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("lth-out"))
}
