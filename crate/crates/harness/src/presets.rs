//! Desk-scale networks and training defaults.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use lth_core::nn::{GroupSpec, HeadSpec, LayerSpec, LrSchedule, NetworkSpec};
use lth_core::tasks::{DatasetConfig, ShapesDataset, TaskKind, TaskSpec};
use lth_core::train::{TrainConfig, Workload};
use lth_core::Result;

/// Backbone depth. `Large` has twice the conv layers and twice the channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum NetSize {
    Small,
    Large,
}

impl NetSize {
    pub fn name(self) -> &'static str {
        match self {
            NetSize::Small => "small",
            NetSize::Large => "large",
        }
    }
}

pub const DESK_IMAGE: usize = 16;
/// Width of the dense layer between trunk and head. A wide neck keeps the
/// network overparameterised enough for 80% pruning to be harmless.
pub const NECK_WIDTH: usize = 96;
pub const HEAD_WIDTH: usize = 32;
pub const DESK_ITERATIONS: usize = 600;

/// Every group. The task output layer inside `head` is never maskable, so
/// pruning these leaves it dense.
pub fn default_groups() -> Vec<String> {
    GROUPS.map(String::from).to_vec()
}

pub const GROUPS: [&str; 4] = ["base", "top", "neck", "head"];

/// Groups whose shapes do not depend on the task; transfer maps these.
pub const SHARED: [&str; 3] = ["base", "top", "neck"];

/// Default rewind point: 5% into training.
pub fn default_rewind(iterations: usize) -> usize {
    iterations / 20
}

fn conv(i: usize, o: usize) -> LayerSpec {
    LayerSpec::Conv2d {
        in_channels: i,
        out_channels: o,
        kernel: 3,
    }
}

/// Backbone groups `base` and `top`, then a head named after the task with
/// groups `neck` and `head`. Only the last layer depends on the task.
pub fn network(size: NetSize, task: TaskKind, image: usize, grid: usize) -> NetworkSpec {
    use LayerSpec::{Maxpool2x2 as Pool, Relu};
    let (c1, c2) = match size {
        NetSize::Small => (8, 16),
        NetSize::Large => (16, 32),
    };
    let (base, top) = match size {
        NetSize::Small => (
            vec![conv(3, c1), Relu, Pool, conv(c1, c1), Relu, Pool],
            vec![conv(c1, c2), Relu, Pool, conv(c2, c2), Relu],
        ),
        NetSize::Large => (
            vec![
                conv(3, c1),
                Relu,
                conv(c1, c1),
                Relu,
                Pool,
                conv(c1, c1),
                Relu,
                conv(c1, c1),
                Relu,
                Pool,
            ],
            vec![
                conv(c1, c2),
                Relu,
                conv(c2, c2),
                Relu,
                Pool,
                conv(c2, c2),
                Relu,
                conv(c2, c2),
                Relu,
            ],
        ),
    };
    let side = image / 8;
    let flat = c2 * side * side;
    NetworkSpec {
        input: [3, image, image],
        backbone: vec![GroupSpec::new("base", base), GroupSpec::new("top", top)],
        heads: vec![HeadSpec {
            name: task.name().into(),
            groups: vec![
                GroupSpec::new(
                    "neck",
                    vec![
                        LayerSpec::Flatten,
                        LayerSpec::Dense {
                            in_features: flat,
                            out_features: NECK_WIDTH,
                        },
                        Relu,
                    ],
                ),
                GroupSpec::new(
                    "head",
                    vec![
                        LayerSpec::Dense {
                            in_features: NECK_WIDTH,
                            out_features: HEAD_WIDTH,
                        },
                        Relu,
                        LayerSpec::Dense {
                            in_features: HEAD_WIDTH,
                            out_features: task.output_dim(grid),
                        },
                    ],
                ),
            ],
        }],
    }
}

pub fn desk_data() -> DatasetConfig {
    DatasetConfig {
        image_size: DESK_IMAGE,
        n_train: 1024,
        n_val: 512,
        ..DatasetConfig::default()
    }
}

/// SGD with momentum, short warmup and one step decay at 70%.
pub fn desk_train(iterations: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        batch_size: 32,
        schedule: LrSchedule {
            base_lr: 0.02,
            warmup_iters: (iterations / 50).max(1),
            decay_milestones: vec![iterations * 7 / 10],
            decay_factor: 0.1,
        },
        momentum: 0.9,
        weight_decay: 5e-4,
        eval_interval: (iterations / 20).max(1),
    }
}

pub fn workload(
    size: NetSize,
    task: TaskKind,
    data: Arc<ShapesDataset>,
    train: TrainConfig,
) -> Result<Workload> {
    let spec = network(size, task, data.config.image_size, data.config.grid);
    let w = Workload {
        spec,
        task: TaskSpec::new(task),
        data,
        train,
    };
    w.validate()?;
    Ok(w)
}
