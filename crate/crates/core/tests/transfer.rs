mod common;

use lth_core::masking::{apply_mask, full_mask, sparsity};
use lth_core::metrics::project_sparsity;
use lth_core::nn::{init_network, GroupSpec, HeadSpec, LayerSpec, NetworkSpec, ParameterSet, Tensor};
use lth_core::pruning::{fine_tune, imp, magnitude_mask, PruneConfig, Scope};
use lth_core::tasks::TaskKind;
use lth_core::transfer::*;
use lth_core::Error;

use common::*;

fn ticket_on(kind: TaskKind, p: f64, seed: u64) -> lth_core::pruning::Ticket {
    let w = tiny_workload(kind, 20);
    imp(&w, &PruneConfig::one_shot(p, all_groups()), seed).unwrap().ticket
}

#[test]
fn identity_mapping_reproduces_ticket() {
    let t = ticket_on(TaskKind::Classify, 0.7, 1);
    let spec = tiny_spec(TaskKind::Classify);
    let ids = init_network(&spec, 0).unwrap();
    let mapping = GroupMapping::new(ids.ids().map(|i| (i.to_string(), i.to_string())).collect()).unwrap();
    let (params, mask) = ticket_transfer(&t, &spec, &mapping, 99).unwrap();
    assert!(params.bit_eq(&t.rewind_weights));
    assert_eq!(mask, t.mask);
}

/// Flat network whose backbone weight holds 35120 of 100000 parameters.
fn table_spec() -> NetworkSpec {
    NetworkSpec {
        input: [439, 1, 1],
        backbone: vec![GroupSpec::new("bb", vec![LayerSpec::Flatten, dense(439, 80)])],
        heads: vec![HeadSpec {
            name: "out".into(),
            groups: vec![GroupSpec::new("hd", vec![dense(80, 800)])],
        }],
    }
}

#[test]
fn backbone_ticket_projects_network_sparsity() {
    let spec = table_spec();
    let params = init_network(&spec, 3).unwrap();
    assert_eq!(params.numel(), 100_000);
    let full = full_mask(&spec, &params).unwrap();
    let mask = magnitude_mask(&params, &full, 0.9, Scope::Global, &["bb".to_string()]).unwrap();
    let mut rewind = params.clone();
    apply_mask(&mut rewind, &mask).unwrap();
    let ticket = lth_core::pruning::Ticket {
        rewind_opt: lth_core::nn::OptimizerState::new(&rewind, 0.9, 0.0),
        rewind_weights: rewind,
        mask,
        provenance: serde_json::from_str(
            r#"{"source_task":"classify","p":0.9,"T":1,"scope":"global","groups":["bb"],
                "rewind_iter":0,"seed":3,"creation_iter":0,"pruned":31608,"selected_total":35120}"#,
        )
        .unwrap(),
    };
    let mapping = GroupMapping::by_groups(&params, &["bb"]).unwrap();
    let (target, tmask) = ticket_transfer(&ticket, &spec, &mapping, 7).unwrap();
    let report = sparsity(&tmask, None).unwrap();
    assert_eq!(report.pruned, 31_608);
    assert!((report.network_sparsity - 0.3161).abs() < 5e-5);
    // unmapped head: fresh init, all ones
    let fresh = init_network(&spec, 7).unwrap();
    assert!(target.get("hd/0/weight").unwrap().bit_eq(fresh.get("hd/0/weight").unwrap()));
    assert_eq!(tmask.get("hd/0/weight").unwrap().count_zeros(), 0);
    assert_eq!(mapping.fresh(&target), vec!["hd/0/weight", "hd/0/bias"]);
}

#[test]
fn shape_mismatch_is_mapping_error() {
    let t = ticket_on(TaskKind::Classify, 0.5, 1);
    let mapping = GroupMapping::new(vec![("base/0/weight".into(), "top/0/weight".into())]).unwrap();
    let r = ticket_transfer(&t, &tiny_spec(TaskKind::Keypoint), &mapping, 0);
    assert!(matches!(r, Err(Error::Mapping(_))));
    let missing = GroupMapping::new(vec![("nope".into(), "base/0/weight".into())]).unwrap();
    assert!(matches!(
        ticket_transfer(&t, &tiny_spec(TaskKind::Keypoint), &missing, 0),
        Err(Error::Mapping(_))
    ));
}

#[test]
fn mapping_json_round_trip_and_validation() {
    let m = GroupMapping::new(vec![("a".into(), "b".into()), ("c".into(), "d".into())]).unwrap();
    let json = m.to_json().unwrap();
    assert_eq!(GroupMapping::from_json(&json).unwrap(), m);
    assert!(GroupMapping::from_json(r#"[["a","b"],["c","b"]]"#).is_err());
    assert!(GroupMapping::new(vec![("a".into(), "b".into()), ("a".into(), "c".into())]).is_err());
}

#[test]
fn mask_transfer_keeps_top_magnitudes() {
    let mut pre = ParameterSet::new();
    pre.insert("c/0/weight", Tensor::new(vec![1, 1, 2, 2], vec![0.3, -0.9, 0.05, 0.4]).unwrap());
    pre.insert("d/0/weight", Tensor::from_vec(vec![0.1, 0.2]));
    let target = ParameterSet::zeros_like(&pre);
    let maskable = ["c/0/weight", "d/0/weight"].map(String::from).into();
    let mapping = GroupMapping::by_groups(&pre, &["c", "d"]).unwrap();
    let (p, m) = mask_transfer_into(&pre, target.clone(), maskable, 0.5, &mapping, true).unwrap();
    assert_eq!(p.get("c/0/weight").unwrap().data(), &[0.0, -0.9, 0.0, 0.4]);
    assert_eq!(m.get("d/0/weight").unwrap().count_zeros(), 0, "dense tensor left unmasked");
    let maskable = ["c/0/weight", "d/0/weight"].map(String::from).into();
    let (_, m) = mask_transfer_into(&pre, target, maskable, 0.5, &mapping, false).unwrap();
    assert_eq!(m.get("d/0/weight").unwrap().count_zeros(), 1);
}

#[test]
fn mask_transfer_limits_and_ordering() {
    let src = ticket_on(TaskKind::Classify, 0.5, 2).rewind_weights;
    let spec = tiny_spec(TaskKind::DetectGrid);
    let mapping = GroupMapping::by_groups(&src, &["base", "top"]).unwrap();
    let (p0, m0) = mask_transfer(&src, &spec, 0.0, &mapping, true, 4).unwrap();
    assert_eq!(m0.pruned(), 0);
    assert!(p0.get("base/0/weight").unwrap().bit_eq(src.get("base/0/weight").unwrap()));
    let mut last = 0.0;
    for p in [0.5, 0.8, 0.9] {
        let (params, m) = mask_transfer(&src, &spec, p, &mapping, true, 4).unwrap();
        let s = sparsity(&m, None).unwrap().network_sparsity;
        assert!(s > last);
        last = s;
        assert!(m.is_satisfied_by(&params).unwrap());
        assert_eq!(m.get("neck/1/weight").unwrap().count_zeros(), 0);
    }
    assert!(matches!(
        mask_transfer(&src, &spec, 1.0, &mapping, true, 4),
        Err(Error::Range(_))
    ));
}

#[test]
fn cross_task_bookkeeping_and_persistence() {
    let t = ticket_on(TaskKind::Classify, 0.8, 3);
    let spec = tiny_spec(TaskKind::Keypoint);
    let trunk = GroupMapping::by_groups(&t.rewind_weights, &["base", "top", "neck"]).unwrap();
    let init = cross_task_transfer(&t, &spec, &trunk, 5).unwrap();
    let exact = init.mask.pruned() as f64 / init.mask.numel() as f64;
    assert_eq!(init.network_sparsity, exact);
    assert!((init.trunk_sparsity * init.trunk_fraction - exact).abs() < 1e-15);
    assert!(init.network_sparsity < init.trunk_sparsity);

    let w = tiny_workload(TaskKind::Keypoint, 20);
    let run = fine_tune(&w, init.params.clone(), &init.mask, 5).unwrap();
    assert!(init.mask.is_satisfied_by(&run.state.params).unwrap());
    assert!(!run.state.params.bit_eq(&init.params));

    let partial = GroupMapping::new(vec![("base/0/weight".into(), "base/0/weight".into())]).unwrap();
    assert!(matches!(cross_task_transfer(&t, &spec, &partial, 5), Err(Error::Mapping(_))));
}

#[test]
fn same_task_cross_transfer_recovers_ticket() {
    let t = ticket_on(TaskKind::Classify, 0.6, 4);
    let spec = tiny_spec(TaskKind::Classify);
    let all = GroupMapping::by_groups(&t.rewind_weights, &["base", "top", "neck", "head"]).unwrap();
    let init = cross_task_transfer(&t, &spec, &all, 0).unwrap();
    assert!(init.params.bit_eq(&t.rewind_weights));
    assert_eq!(init.mask, t.mask);
}

#[test]
fn trunk_share_arithmetic() {
    assert!((project_sparsity(0.8, 0.626) - 0.5008).abs() < 1e-12);
}
