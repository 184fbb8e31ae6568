mod common;

use std::collections::BTreeSet;

use lth_core::masking::{apply_mask, full_mask, Bits, PruneMask};
use lth_core::metrics::*;
use lth_core::nn::{init_network, LayerSpec, ParameterSet, Tensor};
use lth_core::pruning::{magnitude_mask, Scope};
use lth_core::tasks::TaskKind;
use lth_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

#[test]
fn transferred_backbone_table_cells() {
    // (prune fraction, group fraction, reported network sparsity)
    let cells = [
        (0.9, 0.3512, 0.3161), (0.8, 0.3513, 0.2810), (0.5, 0.3514, 0.1757),
        (0.9, 0.3512, 0.3161), (0.8, 0.3513, 0.2810), (0.5, 0.3514, 0.1757),
        (0.9, 0.2386, 0.2147), (0.8, 0.2386, 0.1909), (0.5, 0.2388, 0.1194),
        (0.9, 0.8832, 0.7949), (0.8, 0.8832, 0.7066), (0.5, 0.8832, 0.4416),
        (0.9, 0.4666, 0.4199), (0.8, 0.4666, 0.3733),
        (0.9, 0.4666, 0.4199), (0.8, 0.4666, 0.3733),
        (0.9, 0.3499, 0.3149), (0.8, 0.3500, 0.2800),
        (0.9, 0.7263, 0.6537), (0.8, 0.7264, 0.5811),
    ];
    for (p, f, s) in cells {
        assert_eq!(round4(project_sparsity(p, f)), s, "({p}, {f})");
    }
}

#[test]
fn module_table_cells_within_rounding() {
    // group parameter share is only reported to two decimals of a percent
    let rows = [
        (0.0065, 0.0052), (0.0971, 0.0777), (0.1036, 0.0829), (0.2193, 0.1755),
        (0.2259, 0.1807), (0.3164, 0.2531), (0.3229, 0.2583), (0.6639, 0.5311),
        (0.6704, 0.5363), (0.7609, 0.6088), (0.7675, 0.6140), (0.8832, 0.7066),
        (0.8897, 0.7118), (0.9803, 0.7842), (0.9868, 0.7894),
    ];
    for (f, s) in rows {
        assert!((project_sparsity(0.8, f) - s).abs() <= 1e-4 + 1e-12, "{f}");
    }
}

#[test]
fn projection_arithmetic() {
    assert!((project_sparsity(0.8, 0.5) - 0.4).abs() < 1e-15);
    for x in [0.0, 0.3, 0.77, 1.0] {
        assert_eq!(project_sparsity(x, 1.0), x);
    }
}

#[test]
fn mac_counts() {
    let conv = LayerSpec::Conv2d {
        in_channels: 1,
        out_channels: 2,
        kernel: 3,
    };
    assert_eq!(mac_count(&conv, (4, 4), 0.0), (288, 288.0));
    let fc = LayerSpec::Dense {
        in_features: 128,
        out_features: 10,
    };
    let (d, a) = mac_count(&fc, (1, 1), 0.8);
    assert_eq!(d, 1280);
    assert!((a - 256.0).abs() < 1e-9);
    assert_eq!(mac_count(&LayerSpec::Relu, (4, 4), 0.5), (0, 0.0));
}

fn masked_tensor(n: usize, kept: usize, seed: u64) -> (ParameterSet, PruneMask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParameterSet::new();
    p.insert("w", Tensor::from_vec((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()));
    let maskable: BTreeSet<String> = ["w".to_string()].into();
    let mut m = PruneMask::full(&p, maskable).unwrap();
    let bools: Vec<bool> = (0..n).map(|i| i < kept).collect();
    m.set_bits("w", Bits::from_bools(&bools)).unwrap();
    apply_mask(&mut p, &m).unwrap();
    (p, m)
}

#[test]
fn storage_mode_thresholds() {
    let (_, m) = masked_tensor(1000, 100, 0);
    assert_eq!(choose_storage(Some(m.get("w").unwrap())), StorageMode::Sparse);
    let (_, m) = masked_tensor(1000, 500, 0);
    assert_eq!(choose_storage(Some(m.get("w").unwrap())), StorageMode::Dense);
    let (_, m) = masked_tensor(1000, 499, 0);
    assert_eq!(choose_storage(Some(m.get("w").unwrap())), StorageMode::Sparse);
    let (_, m) = masked_tensor(1000, 1000, 0);
    assert_eq!(choose_storage(Some(m.get("w").unwrap())), StorageMode::Dense);
    assert_eq!(choose_storage(None), StorageMode::Dense);
}

#[test]
fn ninety_percent_sparse_million_element_file() {
    let (p, m) = masked_tensor(1_000_000, 100_000, 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.ltht");
    let written = store(&path, &p, Some(&m)).unwrap();
    let size = std::fs::metadata(&path).unwrap().len() as usize;
    assert_eq!(written, size);
    assert_eq!(predicted_size(&p, Some(&m)).unwrap(), size);
    let header = 12;
    assert!(size.abs_diff(header + 8 * 100_000) <= 64, "{size}");
    assert!(size < 4 * 1_000_000);
    let back = load(&path).unwrap();
    assert!(back.params().bit_eq(&p));
    assert_eq!(back.mask().unwrap(), m);
    assert_eq!(back.tensors[0].mode, StorageMode::Sparse);
}

#[test]
fn network_round_trip_both_modes() {
    let spec = tiny_spec(TaskKind::Classify);
    let params = init_network(&spec, 1).unwrap();
    let full = full_mask(&spec, &params).unwrap();
    let mask = magnitude_mask(&params, &full, 0.8, Scope::Layerwise, &all_groups()).unwrap();
    let mut pruned = params.clone();
    apply_mask(&mut pruned, &mask).unwrap();
    for (p, m) in [(&params, &full), (&pruned, &mask)] {
        let bytes = encode(p, Some(m)).unwrap();
        assert_eq!(bytes.len(), predicted_size(p, Some(m)).unwrap());
        let ck = decode(&bytes).unwrap();
        assert!(ck.params().bit_eq(p));
        assert_eq!(&ck.mask().unwrap(), m);
    }
    let modes: Vec<StorageMode> = decode(&encode(&pruned, Some(&mask)).unwrap())
        .unwrap()
        .tensors
        .iter()
        .map(|t| t.mode)
        .collect();
    assert!(modes.contains(&StorageMode::Sparse) && modes.contains(&StorageMode::Dense));
}

#[test]
fn negative_zero_survives_at_kept_positions() {
    let mut p = ParameterSet::new();
    p.insert("w", Tensor::from_vec(vec![-0.0, 1.0, 0.0, 0.0, 0.0]));
    let maskable: BTreeSet<String> = ["w".to_string()].into();
    let mut m = PruneMask::full(&p, maskable).unwrap();
    m.set_bits("w", Bits::from_bools(&[true, true, false, false, false])).unwrap();
    let back = decode(&encode(&p, Some(&m)).unwrap()).unwrap();
    assert!(back.params().bit_eq(&p));
    // a pruned position must hold +0.0
    p.get_mut("w").unwrap().data_mut()[3] = -0.0;
    assert!(matches!(encode(&p, Some(&m)), Err(Error::Contract(_))));
}

#[test]
fn corrupt_inputs_are_rejected() {
    let (p, m) = masked_tensor(100, 10, 2);
    let bytes = encode(&p, Some(&m)).unwrap();
    for cut in [0, 3, 11, 20, bytes.len() - 1] {
        assert!(matches!(decode(&bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode(&bad), Err(Error::Format { tensor, .. }) if tensor == "<header>"));
    let mut bad = bytes.clone();
    bad[4] = 2;
    assert!(decode(&bad).is_err());
    // swap two indices so they are no longer increasing
    let idx0 = 12 + 4 + 1 + 4 + 4 + 2 + 4;
    let mut bad = bytes.clone();
    let (a, b) = (bad[idx0..idx0 + 4].to_vec(), bad[idx0 + 4..idx0 + 8].to_vec());
    bad[idx0..idx0 + 4].copy_from_slice(&b);
    bad[idx0 + 4..idx0 + 8].copy_from_slice(&a);
    match decode(&bad) {
        Err(Error::Format { tensor, reason }) => {
            assert_eq!(tensor, "w");
            assert!(reason.contains("increasing"));
        }
        other => panic!("{other:?}"),
    }
    let mut long = bytes;
    long.push(0);
    assert!(decode(&long).is_err());
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load(&dir.path().join("missing")), Err(Error::Io { .. })));
}

#[test]
fn randomized_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..2000 {
        let n_tensors = rng.gen_range(1..5);
        let mut p = ParameterSet::new();
        for t in 0..n_tensors {
            let dims: Vec<usize> = (0..rng.gen_range(1..4)).map(|_| rng.gen_range(1..7)).collect();
            let n: usize = dims.iter().product();
            let data = (0..n).map(|_| f32::from_bits(rng.gen::<u32>() & 0xbf7f_ffff)).collect();
            p.insert(format!("t{t}"), Tensor::new(dims, data).unwrap());
        }
        let maskable: BTreeSet<String> = p.ids().filter(|_| rng.gen_bool(0.7)).map(String::from).collect();
        let mut m = PruneMask::full(&p, maskable.clone()).unwrap();
        let keep = rng.gen_range(0.0..1.0);
        for id in &maskable {
            let n = p.get(id).unwrap().len();
            let bools: Vec<bool> = (0..n).map(|_| rng.gen_bool(keep)).collect();
            m.set_bits(id, Bits::from_bools(&bools)).unwrap();
        }
        apply_mask(&mut p, &m).unwrap();
        let bytes = encode(&p, Some(&m)).unwrap();
        assert_eq!(bytes.len(), predicted_size(&p, Some(&m)).unwrap());
        let ck = decode(&bytes).unwrap();
        assert!(ck.params().bit_eq(&p));
        assert_eq!(ck.mask().unwrap(), m);
    }
}

#[test]
fn bytes_fall_with_sparsity_once_sparse() {
    let mut last = usize::MAX;
    for kept in (0..500).rev().step_by(25) {
        let (p, m) = masked_tensor(1000, kept, 3);
        let size = predicted_size(&p, Some(&m)).unwrap();
        assert!(size <= last);
        last = size;
    }
}

#[test]
fn cost_report_matches_serialised_size() {
    let spec = tiny_spec(TaskKind::DetectGrid);
    let params = init_network(&spec, 1).unwrap();
    let full = full_mask(&spec, &params).unwrap();
    let mask = magnitude_mask(&params, &full, 0.9, Scope::Global, &all_groups()).unwrap();
    let mut pruned = params.clone();
    apply_mask(&mut pruned, &mask).unwrap();
    let r = cost_report(&spec, "detect_grid", &pruned, &mask).unwrap();
    assert_eq!(r.bytes, encode(&pruned, Some(&mask)).unwrap().len());
    assert_eq!(r.layers.len(), 4);
    assert_eq!(r.layers[0].dense_macs, 8 * 8 * 4 * 3 * 9);
    assert!(r.layers.iter().all(|l| l.adjusted_macs <= l.dense_macs as f64));
    assert!(r.adjusted_macs < r.dense_macs as f64);
    let dense = cost_report(&spec, "detect_grid", &params, &full).unwrap();
    assert_eq!(dense.adjusted_macs, dense.dense_macs as f64);
    assert!(r.bytes < dense.bytes);
    assert!(r.to_csv().starts_with("weight_id,dense_macs,adjusted_macs,weight_sparsity\n"));
}
