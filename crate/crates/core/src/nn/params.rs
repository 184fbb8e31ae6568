use indexmap::IndexMap;
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::spec::NetworkSpec;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named parameter tensors in canonical spec order.
///
/// Ids have the form `group/layer_index/{weight,bias}`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet {
    tensors: IndexMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(id.into(), tensor);
    }

    pub fn get(&self, id: &str) -> Result<&Tensor> {
        self.tensors
            .get(id)
            .ok_or_else(|| Error::Lookup(format!("parameter {id}")))
    }

    pub fn get_mut(&mut self, id: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(id)
            .ok_or_else(|| Error::Lookup(format!("parameter {id}")))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.tensors.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total element count `n`.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// Same ids, same order, same shapes.
    pub fn same_layout(&self, other: &ParameterSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, a), (kb, b))| ka == kb && a.shape() == b.shape())
    }

    pub fn bit_eq(&self, other: &ParameterSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }
}

/// Initialize every parameter of `spec`: weights uniform in `[-b, b]` with
/// `b = sqrt(6 / (fan_in + fan_out))`, biases zero. Draws come from a
/// ChaCha8 stream seeded with `seed`, consumed in canonical layer order.
pub fn init_network(spec: &NetworkSpec, seed: u64) -> Result<ParameterSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParameterSet::new();
    for pl in spec.param_layers()? {
        let (wshape, bshape) = pl.layer.param_shapes().expect("param layer");
        let (fan_in, fan_out) = pl.layer.fans().expect("param layer");
        let bound = init_bound(fan_in, fan_out);
        let dist = Uniform::new_inclusive(-bound, bound);
        let numel: usize = wshape.iter().product();
        let data: Vec<f32> = (0..numel).map(|_| dist.sample(&mut rng)).collect();
        params.insert(pl.weight_id(), Tensor::new(wshape, data)?);
        params.insert(pl.bias_id(), Tensor::zeros(&bshape));
    }
    Ok(params)
}

/// Uniform bound used for a layer's weights.
pub fn init_bound(fan_in: usize, fan_out: usize) -> f32 {
    (6.0f64 / (fan_in + fan_out) as f64).sqrt() as f32
}
