use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::Loss;
use super::net::{self, activation_pattern, run_backward, run_forward, widen, WideParams};
use super::params::ParameterSet;
use super::spec::NetworkSpec;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Minimum number of sampled coordinates (all of them when fewer exist).
pub const MIN_COORDS: usize = 200;

/// Gradients below this magnitude are compared absolutely.
const DENOM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates rejected because a perturbation crossed a relu or pooling kink.
    pub skipped_kinks: usize,
}

/// Compare backpropagated gradients against central differences on a seeded
/// sample of parameter coordinates.
///
/// Both sides run the network's generic kernels in `f64` so the comparison
/// measures the derivation, not `f32` rounding. Coordinates whose `+eps` or
/// `-eps` perturbation changes any relu sign or pooling choice are
/// resampled, keeping the comparison on smooth pieces.
#[allow(clippy::too_many_arguments)]
pub fn grad_check(
    spec: &NetworkSpec,
    params: &ParameterSet,
    head: &str,
    batch: &Tensor,
    targets: &Tensor,
    loss: Loss,
    eps: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(eps > 0.0) {
        return Err(Error::Range(format!(
            "finite-difference eps {eps} must be > 0"
        )));
    }
    // shape validation through the regular path
    let outputs = net::predict(params, spec, batch, head)?;
    loss.value(&outputs, targets)?;

    let steps = net::plan(spec, head)?;
    let on_path: Vec<&str> = steps
        .iter()
        .flat_map(|s| [s.weight_id.as_deref(), s.bias_id.as_deref()])
        .flatten()
        .collect();
    let mut weights = WideParams::from_params(params, &on_path)?;
    let b = batch.shape()[0];
    let k = outputs.shape()[1];
    let x64: Vec<f64> = widen(batch.data());

    let (y, saved) = run_forward(&weights, &steps, x64.clone(), b, true)?;
    let base_pattern = activation_pattern(&saved, &steps);
    let mut dy = vec![0.0f64; y.len()];
    loss.eval_into::<f64>(&y, targets.data(), b, k, Some(&mut dy));
    let analytic = run_backward(&weights, &steps, &saved, dy, b)?;

    let eval = |weights: &WideParams| -> Result<(f64, Vec<u32>)> {
        let (y, saved) = run_forward(weights, &steps, x64.clone(), b, true)?;
        let value = loss.eval_into::<f64>(&y, targets.data(), b, k, None);
        Ok((value, activation_pattern(&saved, &steps)))
    };

    let sizes: Vec<usize> = weights.0.iter().map(|(_, v)| v.len()).collect();
    let total: usize = sizes.iter().sum();
    let locate = |mut flat: usize| -> (usize, usize) {
        for (t, &n) in sizes.iter().enumerate() {
            if flat < n {
                return (t, flat);
            }
            flat -= n;
        }
        unreachable!("flat index within total")
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = sample(&mut rng, total, total).into_vec();
    let want = MIN_COORDS.min(total);
    let mut checked = 0;
    let mut skipped = 0;
    let mut max_rel = 0.0f64;
    for flat in order {
        if checked == want {
            break;
        }
        let (t, i) = locate(flat);
        let orig = weights.0[t].1[i];
        weights.0[t].1[i] = orig + eps;
        let (lp, pp) = eval(&weights)?;
        weights.0[t].1[i] = orig - eps;
        let (lm, pm) = eval(&weights)?;
        weights.0[t].1[i] = orig;
        if pp != base_pattern || pm != base_pattern {
            skipped += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * eps);
        let id = &weights.0[t].0;
        let a = analytic
            .iter()
            .find(|(k, _)| k == id)
            .map(|(_, g)| g[i])
            .unwrap_or(0.0);
        let denom = a.abs().max(numeric.abs()).max(DENOM_FLOOR);
        max_rel = max_rel.max((a - numeric).abs() / denom);
        checked += 1;
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        checked,
        skipped_kinks: skipped,
    })
}
