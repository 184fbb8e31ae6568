use super::layers::{self, ConvGeom, Scalar};
use super::params::ParameterSet;
use super::spec::{param_id, ActShape, LayerSpec, NetworkSpec};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// One layer of the path from input to a head output.
#[derive(Debug, Clone)]
pub(crate) struct Step {
    pub layer: LayerSpec,
    pub weight_id: Option<String>,
    pub bias_id: Option<String>,
    pub input: ActShape,
    pub output: ActShape,
}

pub(crate) fn plan(spec: &NetworkSpec, head: &str) -> Result<Vec<Step>> {
    let head_spec = spec.head(head)?;
    let mut steps = Vec::new();
    let mut shape = ActShape::Spatial {
        c: spec.input[0],
        h: spec.input[1],
        w: spec.input[2],
    };
    let groups = spec.backbone.iter().chain(head_spec.groups.iter());
    for g in groups {
        for (i, l) in g.layers.iter().enumerate() {
            let out = l.output_shape(shape)?;
            let (weight_id, bias_id) = if l.has_params() {
                (
                    Some(param_id(&g.name, i, "weight")),
                    Some(param_id(&g.name, i, "bias")),
                )
            } else {
                (None, None)
            };
            steps.push(Step {
                layer: *l,
                weight_id,
                bias_id,
                input: shape,
                output: out,
            });
            shape = out;
        }
    }
    Ok(steps)
}

fn conv_geom(step: &Step) -> ConvGeom {
    match (step.layer, step.input) {
        (
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
            },
            ActShape::Spatial { h, w, .. },
        ) => ConvGeom {
            cin: in_channels,
            cout: out_channels,
            h,
            w,
            k: kernel,
        },
        _ => unreachable!("conv step"),
    }
}

fn check_batch(spec: &NetworkSpec, batch: &Tensor) -> Result<usize> {
    let s = batch.shape();
    if s.len() != 4 || s[1..] != spec.input[..] {
        return Err(Error::Shape(format!(
            "batch shape {s:?} does not match [B, {}, {}, {}]",
            spec.input[0], spec.input[1], spec.input[2]
        )));
    }
    Ok(s[0])
}

/// Read access to layer parameters in some float type.
pub(crate) trait Weights<T> {
    fn weight(&self, id: &str) -> Result<&[T]>;
}

impl Weights<f32> for ParameterSet {
    fn weight(&self, id: &str) -> Result<&[f32]> {
        Ok(self.get(id)?.data())
    }
}

/// Parameters widened to `f64` for reference computations.
pub(crate) struct WideParams(pub Vec<(String, Vec<f64>)>);

impl WideParams {
    pub fn from_params(params: &ParameterSet, ids: &[&str]) -> Result<Self> {
        ids.iter()
            .map(|id| Ok((id.to_string(), widen(params.get(id)?.data()))))
            .collect::<Result<_>>()
            .map(WideParams)
    }
}

impl Weights<f64> for WideParams {
    fn weight(&self, id: &str) -> Result<&[f64]> {
        self.0
            .iter()
            .find(|(k, _)| k == id)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| Error::Lookup(format!("parameter {id}")))
    }
}

pub(crate) enum Saved<T> {
    None,
    Input(Vec<T>),
    Col(Vec<T>),
    Argmax(Vec<u32>),
}

/// Activations retained by [`forward`] for one [`backward`] pass.
///
/// The cache borrows the parameters it was computed with, so they cannot be
/// modified while it is alive, and `backward` consumes it.
pub struct ForwardCache<'a> {
    params: &'a ParameterSet,
    steps: Vec<Step>,
    saved: Vec<Saved<f32>>,
    batch: usize,
    output_shape: Vec<usize>,
}

/// Evaluate `head` on `batch` (`[B, C, H, W]`). Outputs are `[B, K]`.
pub fn forward<'a>(
    params: &'a ParameterSet,
    spec: &NetworkSpec,
    batch: &Tensor,
    head: &str,
) -> Result<(Tensor, ForwardCache<'a>)> {
    let b = check_batch(spec, batch)?;
    let steps = plan(spec, head)?;
    let (act, saved) = run_forward(params, &steps, batch.data().to_vec(), b, true)?;
    let output_shape = vec![b, steps.last().map(|s| s.output.numel()).unwrap_or(0)];
    let out = Tensor::new(output_shape.clone(), act)?;
    if !out.is_finite() {
        return Err(Error::NonFinite(format!("output of head {head}")));
    }
    Ok((
        out,
        ForwardCache {
            params,
            steps,
            saved,
            batch: b,
            output_shape,
        },
    ))
}

/// Evaluate without retaining a cache.
pub fn predict(
    params: &ParameterSet,
    spec: &NetworkSpec,
    batch: &Tensor,
    head: &str,
) -> Result<Tensor> {
    let b = check_batch(spec, batch)?;
    let steps = plan(spec, head)?;
    let (act, _) = run_forward(params, &steps, batch.data().to_vec(), b, false)?;
    let out_n = steps.last().map(|s| s.output.numel()).unwrap_or(0);
    Tensor::new(vec![b, out_n], act)
}

fn param<'p, T, W: Weights<T>>(w: &'p W, id: &Option<String>, numel: usize) -> Result<&'p [T]> {
    let id = id.as_deref().expect("param step");
    let data = w.weight(id)?;
    if data.len() != numel {
        return Err(Error::Shape(format!(
            "parameter {id} has {} elements, layer needs {numel}",
            data.len()
        )));
    }
    Ok(data)
}

pub(crate) fn run_forward<T: Scalar, W: Weights<T>>(
    weights: &W,
    steps: &[Step],
    mut act: Vec<T>,
    b: usize,
    keep: bool,
) -> Result<(Vec<T>, Vec<Saved<T>>)> {
    let mut saved = Vec::with_capacity(if keep { steps.len() } else { 0 });
    for step in steps {
        let in_n = step.input.numel();
        let out_n = step.output.numel();
        let (next, record) = match step.layer {
            LayerSpec::Conv2d { .. } => {
                let g = conv_geom(step);
                let weight = param(weights, &step.weight_id, g.cout * g.rows())?;
                let bias = param(weights, &step.bias_id, g.cout)?;
                let per = g.rows() * g.hw();
                let mut cols = vec![T::zero(); if keep { b * per } else { per }];
                let mut out = vec![T::zero(); b * out_n];
                for s in 0..b {
                    let col = if keep {
                        &mut cols[s * per..(s + 1) * per]
                    } else {
                        &mut cols[..]
                    };
                    layers::im2col(&act[s * in_n..(s + 1) * in_n], g, col);
                    layers::conv_forward(col, weight, bias, g, &mut out[s * out_n..(s + 1) * out_n]);
                }
                (out, Saved::Col(cols))
            }
            LayerSpec::Dense {
                in_features,
                out_features,
            } => {
                let weight = param(weights, &step.weight_id, in_features * out_features)?;
                let bias = param(weights, &step.bias_id, out_features)?;
                let mut out = vec![T::zero(); b * out_n];
                for s in 0..b {
                    layers::dense_forward(
                        &act[s * in_n..(s + 1) * in_n],
                        weight,
                        bias,
                        &mut out[s * out_n..(s + 1) * out_n],
                    );
                }
                (out, Saved::Input(act))
            }
            LayerSpec::Relu => {
                let mut out = act;
                layers::relu_forward(&mut out);
                // relu output doubles as its own activation record
                let record = if keep {
                    Saved::Input(out.clone())
                } else {
                    Saved::None
                };
                (out, record)
            }
            LayerSpec::Maxpool2x2 => {
                let ActShape::Spatial { c, h, w } = step.input else {
                    unreachable!("validated spec")
                };
                let mut out = vec![T::zero(); b * out_n];
                let mut arg = vec![0u32; b * out_n];
                for s in 0..b {
                    layers::maxpool_forward(
                        &act[s * in_n..(s + 1) * in_n],
                        c,
                        h,
                        w,
                        &mut out[s * out_n..(s + 1) * out_n],
                        &mut arg[s * out_n..(s + 1) * out_n],
                    );
                }
                (out, Saved::Argmax(arg))
            }
            LayerSpec::Flatten => (act, Saved::None),
        };
        act = next;
        if keep {
            saved.push(record);
        }
    }
    Ok((act, saved))
}

/// Backpropagate `loss_grad` (`dL/d outputs`) through the cached pass.
/// Returns a gradient for every parameter; parameters off the evaluated path
/// get zero gradients.
pub fn backward(cache: ForwardCache<'_>, loss_grad: &Tensor) -> Result<ParameterSet> {
    if loss_grad.shape() != cache.output_shape.as_slice() {
        return Err(Error::Usage(format!(
            "loss gradient shape {:?} does not match cached output {:?}",
            loss_grad.shape(),
            cache.output_shape
        )));
    }
    let ForwardCache {
        params,
        steps,
        saved,
        batch,
        ..
    } = cache;
    let path_grads = run_backward(params, &steps, &saved, loss_grad.data().to_vec(), batch)?;
    let mut grads = params.zeros_like();
    for (id, g) in path_grads {
        grads.get_mut(&id)?.data_mut().copy_from_slice(&g);
    }
    Ok(grads)
}

/// Gradients of on-path parameters, in no particular order.
pub(crate) fn run_backward<T: Scalar, W: Weights<T>>(
    weights: &W,
    steps: &[Step],
    saved: &[Saved<T>],
    mut g: Vec<T>,
    b: usize,
) -> Result<Vec<(String, Vec<T>)>> {
    let mut out = Vec::new();
    for (idx, (step, keep)) in steps.iter().zip(saved.iter()).enumerate().rev() {
        let need_input_grad = idx > 0;
        let in_n = step.input.numel();
        let out_n = step.output.numel();
        let mut gin = if need_input_grad && step.layer.has_params() {
            vec![T::zero(); b * in_n]
        } else {
            Vec::new()
        };
        match (step.layer, keep) {
            (LayerSpec::Conv2d { .. }, Saved::Col(cols)) => {
                let geom = conv_geom(step);
                let wid = step.weight_id.clone().unwrap();
                let weight = weights.weight(&wid)?;
                let per = geom.rows() * geom.hw();
                let mut gw = vec![T::zero(); weight.len()];
                let mut gb = vec![T::zero(); geom.cout];
                let mut gcol = vec![T::zero(); if need_input_grad { per } else { 0 }];
                for s in 0..b {
                    layers::conv_backward(
                        &cols[s * per..(s + 1) * per],
                        weight,
                        &g[s * out_n..(s + 1) * out_n],
                        geom,
                        &mut gw,
                        &mut gb,
                        need_input_grad.then_some(gcol.as_mut_slice()),
                    );
                    if need_input_grad {
                        layers::col2im(&gcol, geom, &mut gin[s * in_n..(s + 1) * in_n]);
                    }
                }
                out.push((wid, gw));
                out.push((step.bias_id.clone().unwrap(), gb));
                g = gin;
            }
            (LayerSpec::Dense { out_features, .. }, Saved::Input(x)) => {
                let wid = step.weight_id.clone().unwrap();
                let weight = weights.weight(&wid)?;
                let mut gw = vec![T::zero(); weight.len()];
                let mut gb = vec![T::zero(); out_features];
                for s in 0..b {
                    layers::dense_backward(
                        &x[s * in_n..(s + 1) * in_n],
                        weight,
                        &g[s * out_n..(s + 1) * out_n],
                        &mut gw,
                        &mut gb,
                        need_input_grad.then(|| &mut gin[s * in_n..(s + 1) * in_n]),
                    );
                }
                out.push((wid, gw));
                out.push((step.bias_id.clone().unwrap(), gb));
                g = gin;
            }
            (LayerSpec::Relu, Saved::Input(y)) => {
                for (gv, &yv) in g.iter_mut().zip(y) {
                    if !(yv > T::zero()) {
                        *gv = T::zero();
                    }
                }
            }
            (LayerSpec::Maxpool2x2, Saved::Argmax(arg)) => {
                let mut up = vec![T::zero(); b * in_n];
                for s in 0..b {
                    let dst = &mut up[s * in_n..(s + 1) * in_n];
                    for o in 0..out_n {
                        dst[arg[s * out_n + o] as usize] += g[s * out_n + o];
                    }
                }
                g = up;
            }
            (LayerSpec::Flatten, Saved::None) => {}
            _ => return Err(Error::Usage("corrupt activation cache".into())),
        }
    }
    Ok(out)
}

/// Relu signs and pooling choices of a forward pass, used to detect kink
/// crossings under perturbation.
pub(crate) fn activation_pattern<T: Scalar>(saved: &[Saved<T>], steps: &[Step]) -> Vec<u32> {
    let mut pattern = Vec::new();
    for (step, rec) in steps.iter().zip(saved) {
        match (step.layer, rec) {
            (LayerSpec::Relu, Saved::Input(y)) => {
                pattern.extend(y.iter().map(|&v| (v > T::zero()) as u32))
            }
            (LayerSpec::Maxpool2x2, Saved::Argmax(a)) => pattern.extend_from_slice(a),
            _ => {}
        }
    }
    pattern
}

pub(crate) fn widen<T: Scalar>(v: &[f32]) -> Vec<T> {
    v.iter().map(|&x| T::from_f32(x)).collect()
}
