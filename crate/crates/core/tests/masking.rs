mod common;

use std::collections::BTreeSet;

use indexmap::IndexMap;
use lth_core::masking::*;
use lth_core::nn::{self, init_network, OptimizerState, ParameterSet, Tensor};
use lth_core::tasks::TaskKind;
use lth_core::train::{run_training, Control, TrainState};
use lth_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;

fn single(id: &str, data: Vec<f32>) -> ParameterSet {
    let mut p = ParameterSet::new();
    p.insert(id, Tensor::from_vec(data));
    p
}

fn maskable(ids: &[&str]) -> BTreeSet<String> {
    ids.iter().map(|s| s.to_string()).collect()
}

fn random_mask(params: &ParameterSet, keep: f64, seed: u64) -> PruneMask {
    let spec = tiny_spec(TaskKind::Classify);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = full_mask(&spec, params).unwrap();
    for id in mask.maskable().clone() {
        let n = params.get(&id).unwrap().len();
        let bools: Vec<bool> = (0..n).map(|_| rng.gen_bool(keep)).collect();
        mask.set_bits(&id, Bits::from_bools(&bools)).unwrap();
    }
    mask
}

#[test]
fn full_mask_is_identity_with_zero_sparsity() {
    let spec = tiny_spec(TaskKind::Classify);
    let params = init_network(&spec, 3).unwrap();
    let mask = full_mask(&spec, &params).unwrap();
    assert_eq!(sparsity(&mask, None).unwrap().network_sparsity, 0.0);
    let mut masked = params.clone();
    apply_mask(&mut masked, &mask).unwrap();
    assert!(masked.bit_eq(&params));
    let expected = maskable(&["base/0/weight", "top/0/weight", "neck/1/weight"]);
    assert_eq!(mask.maskable(), &expected);
}

#[test]
fn apply_mask_zeroes_pruned_positions() {
    let mut p = single("g/0/weight", vec![1.5, -2.0, 0.3]);
    let mut m = PruneMask::full(&p, maskable(&["g/0/weight"])).unwrap();
    m.set_bits("g/0/weight", Bits::from_bools(&[true, false, true]))
        .unwrap();
    apply_mask(&mut p, &m).unwrap();
    let d = p.get("g/0/weight").unwrap().data();
    assert_eq!(d, &[1.5, 0.0, 0.3]);
    assert_eq!(d[1].to_bits(), 0, "positive zero");
}

#[test]
fn misaligned_mask_is_rejected() {
    let mut p = single("g/0/weight", vec![1.0, 2.0]);
    let other = single("g/0/weight", vec![1.0, 2.0, 3.0]);
    let m = PruneMask::full(&other, BTreeSet::new()).unwrap();
    assert!(matches!(apply_mask(&mut p, &m), Err(Error::Alignment(_))));
}

#[test]
fn non_maskable_bits_must_be_ones() {
    let mut bits = IndexMap::new();
    bits.insert("g/0/bias".to_string(), Bits::from_bools(&[true, false]));
    assert!(matches!(
        PruneMask::from_parts(bits, BTreeSet::new()),
        Err(Error::Contract(_))
    ));
}

#[test]
fn zero_mask_leaves_bias_only_network() {
    let spec = tiny_spec(TaskKind::Classify);
    let mut params = init_network(&spec, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (id, t) in params.iter_mut() {
        if id.ends_with("bias") {
            for v in t.data_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
    }
    let mut mask = full_mask(&spec, &params).unwrap();
    for id in mask.maskable().clone() {
        let n = params.get(&id).unwrap().len();
        mask.set_bits(&id, Bits::zeros(n)).unwrap();
    }
    apply_mask(&mut params, &mask).unwrap();
    let batch = Tensor::new(
        vec![2, 3, 8, 8],
        (0..384).map(|i| (i as f32 * 0.37).sin()).collect(),
    )
    .unwrap();
    let out = nn::predict(&params, &spec, &batch, "classify").unwrap();
    // every masked layer emits relu(bias); only the head output layer remains
    let neck_b = params.get("neck/1/bias").unwrap().data();
    let w = params.get("head/0/weight").unwrap();
    let b = params.get("head/0/bias").unwrap().data();
    for row in 0..2 {
        for k in 0..4 {
            let mut y = b[k] as f64;
            for (j, &nb) in neck_b.iter().enumerate() {
                y += w.data()[k * 16 + j] as f64 * nb.max(0.0) as f64;
            }
            let got = out.data()[row * 4 + k] as f64;
            assert!((got - y).abs() < 1e-5, "{got} vs {y}");
        }
    }
}

fn step_inputs() -> (Tensor, Tensor) {
    let batch = Tensor::new(
        vec![4, 3, 8, 8],
        (0..768).map(|i| ((i * 7 % 13) as f32 / 13.0) - 0.4).collect(),
    )
    .unwrap();
    (batch, Tensor::from_vec(vec![0.0, 1.0, 2.0, 3.0]))
}

#[test]
fn masked_step_keeps_pruned_weights_zero() {
    let spec = tiny_spec(TaskKind::Classify);
    let mut params = init_network(&spec, 2).unwrap();
    let mask = random_mask(&params, 0.5, 9);
    apply_mask(&mut params, &mask).unwrap();
    let (x, t) = step_inputs();
    // the gradient at pruned positions is generally non-zero
    let (y, cache) = nn::forward(&params, &spec, &x, "classify").unwrap();
    let (_, dy) = nn::Loss::CrossEntropy.value_and_grad(&y, &t).unwrap();
    let grads = nn::backward(cache, &dy).unwrap();
    let bits = mask.get("base/0/weight").unwrap();
    let g = grads.get("base/0/weight").unwrap().data();
    assert!((0..g.len()).any(|i| !bits.get(i) && g[i] != 0.0));

    let mut opt = OptimizerState::new(&params, 0.9, 1e-3);
    for _ in 0..5 {
        masked_train_step(
            &mut params, &mask, &spec, "classify", &x, &t, nn::Loss::CrossEntropy, &mut opt, 0.1,
        )
        .unwrap();
        assert!(mask.is_satisfied_by(&params).unwrap());
        assert!(mask.is_satisfied_by(&opt.momentum).unwrap());
    }
}

#[test]
fn all_ones_masked_step_equals_plain_sgd() {
    let spec = tiny_spec(TaskKind::Classify);
    let params = init_network(&spec, 4).unwrap();
    let mask = full_mask(&spec, &params).unwrap();
    let (x, t) = step_inputs();

    let mut a = params.clone();
    let mut opt_a = OptimizerState::new(&a, 0.9, 1e-3);
    for _ in 0..3 {
        masked_train_step(&mut a, &mask, &spec, "classify", &x, &t, nn::Loss::CrossEntropy, &mut opt_a, 0.1)
            .unwrap();
    }
    let mut b = params;
    let mut opt_b = OptimizerState::new(&b, 0.9, 1e-3);
    for _ in 0..3 {
        let (y, cache) = nn::forward(&b, &spec, &x, "classify").unwrap();
        let (_, dy) = nn::Loss::CrossEntropy.value_and_grad(&y, &t).unwrap();
        let g = nn::backward(cache, &dy).unwrap();
        nn::sgd_step(&mut b, &g, &mut opt_b, 0.1).unwrap();
    }
    assert!(a.bit_eq(&b));
    assert!(opt_a.bit_eq(&opt_b));
}

#[test]
fn masked_step_checks_precondition() {
    let spec = tiny_spec(TaskKind::Classify);
    let params = init_network(&spec, 4).unwrap();
    let mask = random_mask(&params, 0.5, 1);
    let mut p = params.clone();
    let mut opt = OptimizerState::new(&p, 0.9, 0.0);
    let (x, t) = step_inputs();
    let r = masked_train_step(&mut p, &mask, &spec, "classify", &x, &t, nn::Loss::CrossEntropy, &mut opt, 0.1);
    assert!(matches!(r, Err(Error::Contract(_))));
}

#[test]
fn thousand_masked_steps_preserve_zero_count() {
    let w = tiny_workload(TaskKind::Classify, 1000);
    let mut state = TrainState::fresh(&w, 1).unwrap();
    let mask = random_mask(&state.params, 0.4, 3);
    apply_mask(&mut state.params, &mask).unwrap();
    let zeros_at_masked = |p: &ParameterSet| -> usize {
        mask.iter()
            .filter(|(id, _)| mask.is_maskable(id))
            .map(|(id, b)| {
                let d = p.get(id).unwrap().data();
                (0..d.len()).filter(|&i| !b.get(i) && d[i].to_bits() == 0).count()
            })
            .sum()
    };
    let expected = mask.pruned();
    assert_eq!(zeros_at_masked(&state.params), expected);
    let mut steps = 0;
    run_training(&w, &mut state, &mask, 1, 1000, &mut |s| {
        assert_eq!(zeros_at_masked(&s.params), expected);
        assert!(mask.is_satisfied_by(&s.opt.momentum).unwrap());
        steps += 1;
        Ok(Control::Continue)
    })
    .unwrap();
    assert_eq!(steps, 1000);
}

fn two_group_mask(g_total: usize, h_total: usize, g_pruned: usize) -> PruneMask {
    let mut p = ParameterSet::new();
    p.insert("g/0/weight", Tensor::zeros(&[g_total]));
    p.insert("h/0/weight", Tensor::zeros(&[h_total]));
    let mut m = PruneMask::full(&p, maskable(&["g/0/weight", "h/0/weight"])).unwrap();
    let bools: Vec<bool> = (0..g_total).map(|i| i >= g_pruned).collect();
    m.set_bits("g/0/weight", Bits::from_bools(&bools)).unwrap();
    m
}

#[test]
fn group_share_projects_network_sparsity() {
    // 90% of a group holding 35.12% of all parameters
    let m = two_group_mask(35_120, 64_880, 31_608);
    let r = sparsity(&m, None).unwrap();
    assert_eq!(r.pruned, 31_608);
    assert!((r.network_sparsity - 0.3161).abs() < 5e-5);
    let g = sparsity(&m, Some(&["g"])).unwrap();
    assert!((g.network_sparsity - 0.9).abs() < 1e-12);
}

#[test]
fn sparsity_filter_errors() {
    let m = two_group_mask(10, 10, 5);
    assert!(matches!(sparsity(&m, Some(&[])), Err(Error::Lookup(_))));
    assert!(matches!(sparsity(&m, Some(&["nope"])), Err(Error::Lookup(_))));
}

#[test]
fn half_of_single_tensor() {
    let p = single("g/0/weight", vec![0.0; 10]);
    let mut m = PruneMask::full(&p, maskable(&["g/0/weight"])).unwrap();
    let bools: Vec<bool> = (0..10).map(|i| i % 2 == 0).collect();
    m.set_bits("g/0/weight", Bits::from_bools(&bools)).unwrap();
    assert_eq!(sparsity(&m, None).unwrap().network_sparsity, 0.5);
}

#[test]
fn bits_bytes_round_trip_and_padding() {
    let b = Bits::from_bools(&[true, false, true, true, false, false, false, false, true, true]);
    let bytes = b.to_bytes();
    assert_eq!(bytes, vec![0b0000_1101, 0b0000_0011]);
    assert_eq!(Bits::from_bytes(&bytes, 10), Some(b));
    assert_eq!(Bits::from_bytes(&[0xff, 0xff], 10), None);
}

fn arb_mask() -> impl Strategy<Value = (ParameterSet, PruneMask, Vec<Vec<bool>>)> {
    (1usize..40, 1usize..40, 1usize..6, any::<u64>()).prop_map(|(a, b, c, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParameterSet::new();
        for (id, n) in [("a/0/weight", a), ("a/0/bias", c), ("b/0/weight", b)] {
            p.insert(id, Tensor::from_vec((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()));
        }
        let mut m = PruneMask::full(&p, maskable(&["a/0/weight", "b/0/weight"])).unwrap();
        let mut raw = Vec::new();
        for (id, n) in [("a/0/weight", a), ("b/0/weight", b)] {
            let bools: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.6)).collect();
            m.set_bits(id, Bits::from_bools(&bools)).unwrap();
            raw.push(bools);
        }
        (p, m, raw)
    })
}

proptest! {
    #[test]
    fn mask_is_idempotent((p, m, _) in arb_mask()) {
        let mut once = p.clone();
        apply_mask(&mut once, &m).unwrap();
        let mut twice = once.clone();
        apply_mask(&mut twice, &m).unwrap();
        prop_assert!(once.bit_eq(&twice));
        prop_assert!(m.is_satisfied_by(&once).unwrap());
    }

    #[test]
    fn sparsity_is_additive_over_groups((_, m, _) in arb_mask()) {
        let all = sparsity(&m, None).unwrap();
        let weighted: usize = all.groups.iter().map(|g| g.pruned).sum();
        prop_assert_eq!(weighted, all.pruned);
        let total: usize = all.groups.iter().map(|g| g.total).sum();
        prop_assert_eq!(total, all.total);
        let recomposed: f64 = all.groups.iter()
            .map(|g| g.sparsity() * g.total as f64 / all.total as f64).sum();
        prop_assert!((recomposed - all.network_sparsity).abs() < 1e-12);
    }

    #[test]
    fn refinement_never_lowers_sparsity((_, m, raw) in arb_mask(), drop in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(drop);
        let mut finer = m.clone();
        for (id, bools) in ["a/0/weight", "b/0/weight"].iter().zip(&raw) {
            let refined: Vec<bool> = bools.iter().map(|&k| k && rng.gen_bool(0.7)).collect();
            finer.set_bits(id, Bits::from_bools(&refined)).unwrap();
        }
        prop_assert!(finer.is_refinement_of(&m));
        prop_assert!(sparsity(&finer, None).unwrap().network_sparsity
            >= sparsity(&m, None).unwrap().network_sparsity);
    }
}
