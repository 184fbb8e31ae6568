use std::time::Instant;
use lth_core::nn::*;

fn main() {
    let conv = |i, o| LayerSpec::Conv2d { in_channels: i, out_channels: o, kernel: 3 };
    let size: usize = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(16);
    let spec = NetworkSpec {
        input: [3, size, size],
        backbone: vec![
            GroupSpec::new("base", vec![conv(3, 8), LayerSpec::Relu, LayerSpec::Maxpool2x2, conv(8, 16), LayerSpec::Relu, LayerSpec::Maxpool2x2]),
            GroupSpec::new("top", vec![conv(16, 16), LayerSpec::Relu, conv(16, 32), LayerSpec::Relu, LayerSpec::Maxpool2x2]),
        ],
        heads: vec![HeadSpec { name: "classify".into(), groups: vec![
            GroupSpec::new("neck", vec![LayerSpec::Flatten, LayerSpec::Dense { in_features: 32 * (size/8)*(size/8), out_features: 32 }, LayerSpec::Relu]),
            GroupSpec::new("head", vec![LayerSpec::Dense { in_features: 32, out_features: 4 }]),
        ]}],
    };
    let params = init_network(&spec, 1).unwrap();
    let b = 32;
    let x = Tensor::new(vec![b, 3, size, size], (0..b*3*size*size).map(|i| ((i * 7919) % 1000) as f32 / 1000.0).collect()).unwrap();
    let t = Tensor::from_vec((0..b).map(|i| (i % 4) as f32).collect());
    let start = Instant::now();
    let n = 50;
    for _ in 0..n {
        let (y, cache) = forward(&params, &spec, &x, "classify").unwrap();
        let (_, g) = Loss::CrossEntropy.value_and_grad(&y, &t).unwrap();
        let _grads = backward(cache, &g).unwrap();
    }
    let dt = start.elapsed().as_secs_f64() / n as f64;
    println!("params {} : {:.3} ms / batch of {b} ({:.3} ms/sample)", params.numel(), dt * 1e3, dt * 1e3 / b as f64);
}
