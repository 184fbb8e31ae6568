use lth_core::nn::*;
use lth_core::Error;
use proptest::prelude::*;

fn conv(i: usize, o: usize) -> LayerSpec {
    LayerSpec::Conv2d {
        in_channels: i,
        out_channels: o,
        kernel: 3,
    }
}

fn dense(i: usize, o: usize) -> LayerSpec {
    LayerSpec::Dense {
        in_features: i,
        out_features: o,
    }
}

fn flat_net(layers: Vec<LayerSpec>, input: usize) -> NetworkSpec {
    NetworkSpec {
        input: [input, 1, 1],
        backbone: vec![GroupSpec::new("body", vec![LayerSpec::Flatten])],
        heads: vec![HeadSpec {
            name: "out".into(),
            groups: vec![GroupSpec::new("fc", layers)],
        }],
    }
}

fn conv_net() -> NetworkSpec {
    NetworkSpec {
        input: [2, 8, 8],
        backbone: vec![
            GroupSpec::new(
                "base",
                vec![conv(2, 4), LayerSpec::Relu, LayerSpec::Maxpool2x2],
            ),
            GroupSpec::new(
                "top",
                vec![conv(4, 6), LayerSpec::Relu, LayerSpec::Maxpool2x2],
            ),
        ],
        heads: vec![
            HeadSpec {
                name: "cls".into(),
                groups: vec![GroupSpec::new(
                    "cls_fc",
                    vec![LayerSpec::Flatten, dense(24, 10), LayerSpec::Relu, dense(10, 3)],
                )],
            },
            HeadSpec {
                name: "reg".into(),
                groups: vec![GroupSpec::new(
                    "reg_fc",
                    vec![LayerSpec::Flatten, dense(24, 2)],
                )],
            },
        ],
    }
}

fn wave(n: usize, phase: f32) -> Vec<f32> {
    (0..n).map(|i| ((i as f32) * 0.731 + phase).sin()).collect()
}

#[test]
fn init_is_deterministic_and_seed_sensitive() {
    let spec = conv_net();
    let a = init_network(&spec, 7).unwrap();
    let b = init_network(&spec, 7).unwrap();
    let c = init_network(&spec, 8).unwrap();
    assert!(a.bit_eq(&b));
    assert!(!a.bit_eq(&c));
    for (id, t) in a.iter() {
        if id.ends_with("bias") {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn init_respects_fan_bound() {
    let spec = flat_net(vec![dense(4, 4)], 4);
    for seed in 0..20 {
        let p = init_network(&spec, seed).unwrap();
        let bound = (6.0f32 / 8.0).sqrt();
        assert!(p
            .get("fc/0/weight")
            .unwrap()
            .data()
            .iter()
            .all(|w| w.abs() <= bound));
    }
}

#[test]
fn init_rejects_inconsistent_spec() {
    let spec = flat_net(vec![dense(5, 4)], 4);
    assert!(matches!(init_network(&spec, 0), Err(Error::Spec(_))));
}

#[test]
fn relu_zeroes_non_positive() {
    let spec = flat_net(vec![dense(3, 3), LayerSpec::Relu], 3);
    let mut p = init_network(&spec, 0).unwrap();
    let w = p.get_mut("fc/0/weight").unwrap().data_mut();
    w.fill(0.0);
    for i in 0..3 {
        w[i * 3 + i] = 1.0;
    }
    let x = Tensor::new(vec![1, 3, 1, 1], vec![-1.0, 0.0, 2.0]).unwrap();
    let y = predict(&p, &spec, &x, "out").unwrap();
    assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn identity_dense_is_passthrough() {
    let spec = flat_net(vec![dense(4, 4)], 4);
    let mut p = init_network(&spec, 3).unwrap();
    let w = p.get_mut("fc/0/weight").unwrap().data_mut();
    w.fill(0.0);
    for i in 0..4 {
        w[i * 4 + i] = 1.0;
    }
    let x = Tensor::new(vec![2, 4, 1, 1], wave(8, 0.3)).unwrap();
    let y = predict(&p, &spec, &x, "out").unwrap();
    assert_eq!(y.data(), x.data());
}

#[test]
fn conv_same_padding_by_hand() {
    let spec = NetworkSpec {
        input: [1, 4, 4],
        backbone: vec![GroupSpec::new("c", vec![conv(1, 1)])],
        heads: vec![HeadSpec {
            name: "h".into(),
            groups: vec![GroupSpec::new("f", vec![LayerSpec::Flatten, dense(16, 1)])],
        }],
    };
    let mut p = init_network(&spec, 0).unwrap();
    p.get_mut("c/0/weight").unwrap().data_mut().fill(1.0);
    // read the conv output through a one-hot dense readout per position
    let x = Tensor::filled(&[1, 1, 4, 4], 1.0);
    let mut got = Vec::new();
    for pos in 0..16 {
        let w = p.get_mut("f/1/weight").unwrap().data_mut();
        w.fill(0.0);
        w[pos] = 1.0;
        got.push(predict(&p, &spec, &x, "h").unwrap().data()[0]);
    }
    let expected = [
        4., 6., 6., 4., //
        6., 9., 9., 6., //
        6., 9., 9., 6., //
        4., 6., 6., 4.,
    ];
    assert_eq!(got, expected);
}

#[test]
fn forward_rejects_bad_batch_and_head() {
    let spec = conv_net();
    let p = init_network(&spec, 0).unwrap();
    let bad = Tensor::zeros(&[2, 3, 8, 8]);
    assert!(matches!(
        forward(&p, &spec, &bad, "cls"),
        Err(Error::Shape(_))
    ));
    let ok = Tensor::zeros(&[2, 2, 8, 8]);
    assert!(forward(&p, &spec, &ok, "nope").is_err());
}

#[test]
fn zero_loss_gradient_gives_zero_grads() {
    let spec = conv_net();
    let p = init_network(&spec, 1).unwrap();
    let x = Tensor::new(vec![3, 2, 8, 8], wave(3 * 128, 0.0)).unwrap();
    let (y, cache) = forward(&p, &spec, &x, "cls").unwrap();
    let g = backward(cache, &Tensor::zeros(y.shape())).unwrap();
    assert!(g.same_layout(&p));
    assert!(g.iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn stale_shape_gradient_is_usage_error() {
    let spec = conv_net();
    let p = init_network(&spec, 1).unwrap();
    let x = Tensor::new(vec![3, 2, 8, 8], wave(3 * 128, 0.0)).unwrap();
    let (_, cache) = forward(&p, &spec, &x, "cls").unwrap();
    assert!(matches!(
        backward(cache, &Tensor::zeros(&[2, 3])),
        Err(Error::Usage(_))
    ));
}

#[test]
fn dense_squared_error_closed_form() {
    // y = Wx, L = sum (y - t)^2  =>  dL/dW = 2 (y - t) x^T
    let spec = flat_net(vec![dense(3, 2)], 3);
    let p = init_network(&spec, 5).unwrap();
    let xv = vec![0.5f32, -1.0, 2.0];
    let x = Tensor::new(vec![1, 3, 1, 1], xv.clone()).unwrap();
    let t = Tensor::new(vec![1, 2], vec![0.25, -0.75]).unwrap();
    let (y, cache) = forward(&p, &spec, &x, "out").unwrap();
    let (_, dl) = Loss::SquaredError.value_and_grad(&y, &t).unwrap();
    let g = backward(cache, &dl).unwrap();
    let gw = g.get("fc/0/weight").unwrap().data();
    for o in 0..2 {
        let r = y.data()[o] - t.data()[o];
        for i in 0..3 {
            let expect = 2.0 * r * xv[i];
            assert!((gw[o * 3 + i] - expect).abs() < 1e-6);
        }
    }
    // other heads' parameters would be zero; biases get 2(y - t)
    let gb = g.get("fc/0/bias").unwrap().data();
    assert!((gb[0] - 2.0 * (y.data()[0] - t.data()[0])).abs() < 1e-6);
}

#[test]
fn unused_head_gets_zero_gradient() {
    let spec = conv_net();
    let p = init_network(&spec, 2).unwrap();
    let x = Tensor::new(vec![2, 2, 8, 8], wave(256, 1.0)).unwrap();
    let (y, cache) = forward(&p, &spec, &x, "cls").unwrap();
    let t = Tensor::from_vec(vec![0.0, 2.0]);
    let (_, dl) = Loss::CrossEntropy.value_and_grad(&y, &t).unwrap();
    let g = backward(cache, &dl).unwrap();
    assert!(g.get("reg_fc/1/weight").unwrap().data().iter().all(|&v| v == 0.0));
    assert!(g.get("base/0/weight").unwrap().data().iter().any(|&v| v != 0.0));
}

#[test]
fn grad_check_linear_model_is_exact() {
    let spec = flat_net(vec![dense(6, 3)], 6);
    let p = init_network(&spec, 9).unwrap();
    let x = Tensor::new(vec![4, 6, 1, 1], wave(24, 0.2)).unwrap();
    let t = Tensor::new(vec![4, 3], wave(12, 2.0)).unwrap();
    let r = grad_check(&spec, &p, "out", &x, &t, Loss::SquaredError, 1e-3, 1).unwrap();
    assert_eq!(r.checked, 21);
    assert!(r.max_rel_error <= 1e-6, "{r:?}");
}

#[test]
fn grad_check_every_layer_kind() {
    let spec = conv_net();
    let p = init_network(&spec, 4).unwrap();
    let x = Tensor::new(vec![4, 2, 8, 8], wave(4 * 128, 0.5)).unwrap();
    let labels = Tensor::from_vec(vec![0.0, 1.0, 2.0, 1.0]);
    let r = grad_check(&spec, &p, "cls", &x, &labels, Loss::CrossEntropy, 1e-3, 11).unwrap();
    assert!(r.checked >= MIN_COORDS);
    assert!(r.max_rel_error <= 1e-3, "{r:?}");

    let coords = Tensor::new(vec![4, 2], wave(8, 0.9)).unwrap();
    let r = grad_check(&spec, &p, "reg", &x, &coords, Loss::SquaredError, 1e-3, 12).unwrap();
    assert!(r.max_rel_error <= 1e-3, "{r:?}");

    let bits = Tensor::new(vec![4, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
    let r = grad_check(&spec, &p, "reg", &x, &bits, Loss::BinaryCrossEntropy, 1e-3, 13).unwrap();
    assert!(r.max_rel_error <= 1e-3, "{r:?}");
}

#[test]
fn grad_check_rejects_non_positive_eps() {
    let spec = flat_net(vec![dense(2, 1)], 2);
    let p = init_network(&spec, 0).unwrap();
    let x = Tensor::zeros(&[1, 2, 1, 1]);
    let t = Tensor::zeros(&[1, 1]);
    for eps in [0.0, -1e-3] {
        assert!(matches!(
            grad_check(&spec, &p, "out", &x, &t, Loss::SquaredError, eps, 0),
            Err(Error::Range(_))
        ));
    }
}

#[test]
fn training_is_bit_reproducible() {
    let spec = conv_net();
    let x = Tensor::new(vec![4, 2, 8, 8], wave(4 * 128, 0.1)).unwrap();
    let t = Tensor::from_vec(vec![0.0, 1.0, 2.0, 0.0]);
    let run = || {
        let mut p = init_network(&spec, 21).unwrap();
        let mut opt = OptimizerState::new(&p, 0.9, 5e-4);
        for it in 0..25 {
            let (y, cache) = forward(&p, &spec, &x, "cls").unwrap();
            let (_, dl) = Loss::CrossEntropy.value_and_grad(&y, &t).unwrap();
            let g = backward(cache, &dl).unwrap();
            sgd_step(&mut p, &g, &mut opt, 0.05 + it as f32 * 1e-3).unwrap();
        }
        p
    };
    let a = run();
    assert!(a.is_finite());
    assert!(a.bit_eq(&run()));
}

proptest! {
    #[test]
    fn schedule_is_non_increasing_after_warmup(
        base in 0.001f32..1.0,
        warmup in 0usize..50,
        mut ms in proptest::collection::btree_set(1usize..500, 0..4),
        factor in 0.05f32..=1.0,
        a in 0usize..600,
        b in 0usize..600,
    ) {
        let milestones: Vec<usize> = std::mem::take(&mut ms).into_iter().collect();
        let s = LrSchedule { base_lr: base, warmup_iters: warmup, decay_milestones: milestones, decay_factor: factor };
        prop_assert!(s.validate().is_ok());
        let (lo, hi) = (a.min(b).max(warmup), a.max(b).max(warmup));
        prop_assert!(s.lr_at(hi) <= s.lr_at(lo));
    }
}
