#![allow(dead_code)]

use std::sync::Arc;

use lth_core::nn::{GroupSpec, HeadSpec, LayerSpec, LrSchedule, NetworkSpec};
use lth_core::tasks::{generate, DatasetConfig, TaskKind, TaskSpec};
use lth_core::train::{TrainConfig, Workload};

pub fn conv(i: usize, o: usize) -> LayerSpec {
    LayerSpec::Conv2d {
        in_channels: i,
        out_channels: o,
        kernel: 3,
    }
}

pub fn dense(i: usize, o: usize) -> LayerSpec {
    LayerSpec::Dense {
        in_features: i,
        out_features: o,
    }
}

/// 8x8 input, two conv groups, a neck and a task head.
pub fn tiny_spec(kind: TaskKind) -> NetworkSpec {
    NetworkSpec {
        input: [3, 8, 8],
        backbone: vec![
            GroupSpec::new("base", vec![conv(3, 4), LayerSpec::Relu, LayerSpec::Maxpool2x2]),
            GroupSpec::new("top", vec![conv(4, 8), LayerSpec::Relu, LayerSpec::Maxpool2x2]),
        ],
        heads: vec![HeadSpec {
            name: kind.name().into(),
            groups: vec![
                GroupSpec::new("neck", vec![LayerSpec::Flatten, dense(32, 16), LayerSpec::Relu]),
                GroupSpec::new("head", vec![dense(16, kind.output_dim(4))]),
            ],
        }],
    }
}

pub fn tiny_data_config() -> DatasetConfig {
    DatasetConfig {
        image_size: 8,
        n_train: 256,
        n_val: 128,
        ..DatasetConfig::default()
    }
}

pub fn tiny_workload(kind: TaskKind, iterations: usize) -> Workload {
    let data = generate(&tiny_data_config(), 11).unwrap();
    Workload {
        spec: tiny_spec(kind),
        task: TaskSpec::new(kind),
        data: Arc::new(data),
        train: TrainConfig {
            iterations,
            batch_size: 16,
            schedule: LrSchedule {
                base_lr: 0.05,
                warmup_iters: 5,
                decay_milestones: vec![iterations * 3 / 4],
                decay_factor: 0.1,
            },
            momentum: 0.9,
            weight_decay: 1e-4,
            eval_interval: 10,
        },
    }
}

pub fn all_groups() -> Vec<String> {
    ["base", "top", "neck"].map(String::from).to_vec()
}
