//! Desk pilot: mask stability across training and how tickets made from
//! mid-training masks retrain. `cargo run --release --example probe`.

use std::sync::Arc;

use lth_core::earlybird::{mask_iou, probe_mask};
use lth_core::pruning::{dense_run, rewind_masked, train_ticket, Provenance, Ticket};
use lth_core::tasks::{generate, TaskKind};
use lth_harness::presets::{default_groups, default_rewind, desk_data, desk_train, workload, NetSize, DESK_ITERATIONS};

fn main() {
    let n = DESK_ITERATIONS;
    let p = 0.8;
    let step = n / 20;
    let j = default_rewind(n);
    let data = Arc::new(generate(&desk_data(), 7).unwrap());
    let w = workload(NetSize::Small, TaskKind::Classify, data, desk_train(n)).unwrap();
    let groups = default_groups();
    let scope = lth_core::pruning::Scope::parse(&std::env::var("SCOPE").unwrap_or("global".into())).unwrap();
    let at: Vec<usize> = (1..=20).map(|k| k * step).collect();
    for seed in 0..5u64 {
        let mut capture = at.clone();
        capture.push(j);
        let d = dense_run(&w, seed, n, &capture).unwrap();
        let masks: Vec<_> = at
            .iter()
            .map(|&i| {
                let (params, _) = lth_core::pruning::rewind(&d.store, i).unwrap();
                probe_mask(&w.spec, &params, p, scope, &groups).unwrap()
            })
            .collect();
        for lag in 1..=4 {
            let ious: Vec<String> = (lag..masks.len())
                .step_by(lag)
                .map(|k| format!("{}:{:.3}", at[k], mask_iou(&masks[k - lag], &masks[k]).unwrap()))
                .collect();
            println!("seed {seed} lag {lag} {}", ious.join(" "));
        }
        let mut line = format!("seed {seed} dense {:.4}", d.history.last().unwrap().metric);
        for k in [3usize, 5, 7, 9, 11, 19] {
            let mask = masks[k].clone();
            let state = rewind_masked(&d.store, j, &mask).unwrap();
            let ticket = Ticket {
                mask: mask.clone(),
                rewind_weights: state.params,
                rewind_opt: state.opt,
                provenance: Provenance {
                    rounds: 1,
                    scope,
                    groups: groups.clone(),
                    rewind_iter: j,
                    seed,
                    creation_iter: at[k],
                    pruned: mask.pruned(),
                    selected_total: mask.numel(),
                    p,
                    source_task: "classify".into(),
                },
            };
            let run = train_ticket(&w, &ticket, seed).unwrap();
            line += &format!(" m@{} {:.4}", at[k], run.history.last().unwrap().metric);
        }
        println!("{line}");
    }
}
