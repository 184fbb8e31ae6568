//! Binary pruning masks and the masked-training contract: pruned weights
//! (and their momentum) are exactly `+0.0` after every step.

use std::collections::BTreeSet;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, group_of, Loss, NetworkSpec, OptimizerState, ParameterSet, Tensor};

/// Packed bit array, least significant bit first. `1` keeps, `0` prunes.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Bits {
    len: usize,
    words: Vec<u64>,
}

impl Bits {
    pub fn ones(len: usize) -> Self {
        let mut words = vec![u64::MAX; len.div_ceil(64)];
        if len % 64 != 0 {
            if let Some(last) = words.last_mut() {
                *last = (1u64 << (len % 64)) - 1;
            }
        }
        Self { len, words }
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            len,
            words: vec![0; len.div_ceil(64)],
        }
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        let mut b = Self::zeros(bits.len());
        for (i, &v) in bits.iter().enumerate() {
            b.set(i, v);
        }
        b
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, v: bool) {
        debug_assert!(i < self.len);
        let w = &mut self.words[i / 64];
        if v {
            *w |= 1 << (i % 64);
        } else {
            *w &= !(1 << (i % 64));
        }
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn count_zeros(&self) -> usize {
        self.len - self.count_ones()
    }

    /// `(|zeros(self) ∩ zeros(other)|, |zeros(self) ∪ zeros(other)|)`.
    pub fn zero_overlap(&self, other: &Bits) -> (usize, usize) {
        debug_assert_eq!(self.len, other.len);
        let mut union_ones = 0usize;
        let mut both_ones = 0usize;
        for (a, b) in self.words.iter().zip(&other.words) {
            union_ones += (a | b).count_ones() as usize;
            both_ones += (a & b).count_ones() as usize;
        }
        // zeros(a) ∩ zeros(b) = complement of ones(a) ∪ ones(b)
        (self.len - union_ones, self.len - both_ones)
    }

    /// Every kept bit of `self` is also kept in `other`.
    pub fn is_subset_of(&self, other: &Bits) -> bool {
        self.len == other.len
            && self
                .words
                .iter()
                .zip(&other.words)
                .all(|(a, b)| a & !b == 0)
    }

    /// Packed bytes, LSB first, `ceil(len / 8)` long.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.len.div_ceil(8);
        self.words
            .iter()
            .flat_map(|w| w.to_le_bytes())
            .take(n)
            .collect()
    }

    pub fn from_bytes(bytes: &[u8], len: usize) -> Option<Self> {
        if bytes.len() != len.div_ceil(8) {
            return None;
        }
        let mut words = vec![0u64; len.div_ceil(64)];
        for (i, &byte) in bytes.iter().enumerate() {
            words[i / 8] |= (byte as u64) << (8 * (i % 8));
        }
        let b = Self { len, words };
        // padding bits past `len` must be clear
        if len % 64 != 0 && b.words.last().map(|w| w >> (len % 64)) != Some(0) {
            return None;
        }
        Some(b)
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len).map(|i| self.get(i))
    }
}

/// A bit array per parameter, aligned one-to-one with a [`ParameterSet`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneMask {
    bits: IndexMap<String, Bits>,
    maskable: BTreeSet<String>,
}

/// Ids that may be pruned by default: weights of conv and dense layers,
/// excluding each head's output layer. Biases are never maskable.
pub fn default_maskable(spec: &NetworkSpec) -> Result<BTreeSet<String>> {
    Ok(spec
        .param_layers()?
        .into_iter()
        .filter(|l| !l.is_head_output)
        .map(|l| l.weight_id())
        .collect())
}

/// All-ones mask over `params` with the default maskable set of `spec`.
pub fn full_mask(spec: &NetworkSpec, params: &ParameterSet) -> Result<PruneMask> {
    PruneMask::full(params, default_maskable(spec)?)
}

impl PruneMask {
    /// All-ones mask with an explicit maskable set.
    pub fn full(params: &ParameterSet, maskable: BTreeSet<String>) -> Result<Self> {
        if let Some(id) = maskable.iter().find(|id| !params.contains(id)) {
            return Err(Error::Alignment(format!("maskable id {id} not in parameters")));
        }
        let bits = params
            .iter()
            .map(|(id, t)| (id.to_string(), Bits::ones(t.len())))
            .collect();
        Ok(Self { bits, maskable })
    }

    /// Build from explicit bit arrays. Non-maskable ids must be all ones.
    pub fn from_parts(bits: IndexMap<String, Bits>, maskable: BTreeSet<String>) -> Result<Self> {
        if let Some(id) = maskable.iter().find(|id| !bits.contains_key(*id)) {
            return Err(Error::Alignment(format!("maskable id {id} has no bits")));
        }
        for (id, b) in &bits {
            if !maskable.contains(id) && b.count_zeros() != 0 {
                return Err(Error::Contract(format!(
                    "non-maskable parameter {id} has pruned positions"
                )));
            }
        }
        Ok(Self { bits, maskable })
    }

    pub fn get(&self, id: &str) -> Result<&Bits> {
        self.bits
            .get(id)
            .ok_or_else(|| Error::Lookup(format!("mask for {id}")))
    }

    /// Replace the bits of a maskable parameter.
    pub fn set_bits(&mut self, id: &str, bits: Bits) -> Result<()> {
        if !self.maskable.contains(id) {
            return Err(Error::Contract(format!("{id} is not maskable")));
        }
        let slot = self
            .bits
            .get_mut(id)
            .ok_or_else(|| Error::Lookup(format!("mask for {id}")))?;
        if slot.len() != bits.len() {
            return Err(Error::Alignment(format!(
                "{id}: {} bits replaced by {}",
                slot.len(),
                bits.len()
            )));
        }
        *slot = bits;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Bits)> {
        self.bits.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn maskable(&self) -> &BTreeSet<String> {
        &self.maskable
    }

    pub fn is_maskable(&self, id: &str) -> bool {
        self.maskable.contains(id)
    }

    pub fn numel(&self) -> usize {
        self.bits.values().map(Bits::len).sum()
    }

    pub fn pruned(&self) -> usize {
        self.bits.values().map(Bits::count_zeros).sum()
    }

    /// Same ids in the same order with matching element counts.
    pub fn check_aligned(&self, params: &ParameterSet) -> Result<()> {
        if self.bits.len() != params.len() {
            return Err(Error::Alignment(format!(
                "mask has {} tensors, parameters have {}",
                self.bits.len(),
                params.len()
            )));
        }
        for ((mid, bits), (pid, t)) in self.bits.iter().zip(params.iter()) {
            if mid != pid {
                return Err(Error::Alignment(format!("mask id {mid} vs parameter id {pid}")));
            }
            if bits.len() != t.len() {
                return Err(Error::Alignment(format!(
                    "{mid}: {} bits for {} elements",
                    bits.len(),
                    t.len()
                )));
            }
        }
        Ok(())
    }

    pub fn check_same_layout(&self, other: &PruneMask) -> Result<()> {
        if self.maskable != other.maskable
            || self.bits.len() != other.bits.len()
            || self
                .bits
                .iter()
                .zip(&other.bits)
                .any(|((a, ba), (b, bb))| a != b || ba.len() != bb.len())
        {
            return Err(Error::Alignment("masks differ in layout".into()));
        }
        Ok(())
    }

    /// `self <= other` elementwise.
    pub fn is_refinement_of(&self, other: &PruneMask) -> bool {
        self.check_same_layout(other).is_ok()
            && self
                .bits
                .values()
                .zip(other.bits.values())
                .all(|(a, b)| a.is_subset_of(b))
    }

    /// Whether every pruned position of `params` is exactly `+0.0`.
    pub fn is_satisfied_by(&self, params: &ParameterSet) -> Result<bool> {
        self.check_aligned(params)?;
        Ok(self.bits.values().zip(params.iter()).all(|(b, (_, t))| {
            t.data()
                .iter()
                .enumerate()
                .all(|(i, v)| b.get(i) || v.to_bits() == 0)
        }))
    }
}

fn zero_masked(bits: &Bits, data: &mut [f32]) {
    if bits.count_zeros() == 0 {
        return;
    }
    for (i, v) in data.iter_mut().enumerate() {
        if !bits.get(i) {
            *v = 0.0;
        }
    }
}

/// Set every pruned position to `+0.0`; kept positions are untouched bitwise.
pub fn apply_mask(params: &mut ParameterSet, mask: &PruneMask) -> Result<()> {
    mask.check_aligned(params)?;
    for ((_, t), bits) in params.iter_mut().zip(mask.bits.values()) {
        zero_masked(bits, t.data_mut());
    }
    Ok(())
}

/// One SGD step on a batch followed by re-masking of weights and momentum.
///
/// Returns the batch loss. `params` must already satisfy `mask`.
#[allow(clippy::too_many_arguments)]
pub fn masked_train_step(
    params: &mut ParameterSet,
    mask: &PruneMask,
    spec: &NetworkSpec,
    head: &str,
    inputs: &Tensor,
    targets: &Tensor,
    loss: Loss,
    opt: &mut OptimizerState,
    lr: f32,
) -> Result<f64> {
    if !mask.is_satisfied_by(params)? {
        return Err(Error::Contract(
            "parameters have non-zero values at pruned positions".into(),
        ));
    }
    let (value, grads) = {
        let (outputs, cache) = nn::forward(params, spec, inputs, head)?;
        let (value, dloss) = loss.value_and_grad(&outputs, targets)?;
        (value, nn::backward(cache, &dloss)?)
    };
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss {value}")));
    }
    nn::sgd_step(params, &grads, opt, lr)?;
    for (((_, w), (_, v)), bits) in params
        .iter_mut()
        .zip(opt.momentum.iter_mut())
        .zip(mask.bits.values())
    {
        zero_masked(bits, w.data_mut());
        zero_masked(bits, v.data_mut());
    }
    Ok(value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountRow {
    pub name: String,
    pub pruned: usize,
    pub total: usize,
}

impl CountRow {
    pub fn sparsity(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.pruned as f64 / self.total as f64
        }
    }
}

/// Exact pruned/total counts from mask bits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub groups: Vec<CountRow>,
    pub layers: Vec<CountRow>,
    pub pruned: usize,
    pub total: usize,
    pub network_sparsity: f64,
}

/// Count pruned elements, optionally restricted to a set of groups.
/// Biases and other non-maskable tensors count toward the denominator.
pub fn sparsity(mask: &PruneMask, groups: Option<&[&str]>) -> Result<SparsityReport> {
    let mut group_rows: Vec<CountRow> = Vec::new();
    for (id, _) in mask.iter() {
        let g = group_of(id);
        if !group_rows.iter().any(|r| r.name == g) {
            group_rows.push(CountRow {
                name: g.to_string(),
                pruned: 0,
                total: 0,
            });
        }
    }
    if let Some(filter) = groups {
        if filter.is_empty() {
            return Err(Error::Lookup("empty group filter".into()));
        }
        if let Some(bad) = filter.iter().find(|f| !group_rows.iter().any(|r| r.name == **f)) {
            return Err(Error::Lookup(format!("group {bad}")));
        }
    }
    let selected = |g: &str| groups.is_none_or(|f| f.contains(&g));
    let mut layers = Vec::new();
    let (mut pruned, mut total) = (0usize, 0usize);
    for (id, bits) in mask.iter() {
        let g = group_of(id);
        if !selected(g) {
            continue;
        }
        let z = bits.count_zeros();
        let row = group_rows.iter_mut().find(|r| r.name == g).unwrap();
        row.pruned += z;
        row.total += bits.len();
        pruned += z;
        total += bits.len();
        if mask.is_maskable(id) {
            layers.push(CountRow {
                name: id.to_string(),
                pruned: z,
                total: bits.len(),
            });
        }
    }
    group_rows.retain(|r| selected(&r.name));
    Ok(SparsityReport {
        groups: group_rows,
        layers,
        pruned,
        total,
        network_sparsity: if total == 0 {
            0.0
        } else {
            pruned as f64 / total as f64
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bits_ones_have_clear_padding() {
        let b = Bits::ones(70);
        assert_eq!(b.count_ones(), 70);
        assert_eq!(Bits::from_bytes(&b.to_bytes(), 70), Some(b));
        let mut bytes = Bits::ones(3).to_bytes();
        bytes[0] |= 0x80;
        assert_eq!(Bits::from_bytes(&bytes, 3), None);
    }

    #[test]
    fn zero_overlap_counts() {
        let n = 6;
        let mut a = Bits::ones(n);
        let mut b = Bits::ones(n);
        for i in [1, 2, 3] {
            a.set(i, false);
        }
        for i in [2, 3, 4] {
            b.set(i, false);
        }
        assert_eq!(a.zero_overlap(&b), (2, 4));
    }

    #[test]
    fn subset_relation() {
        let a = Bits::from_bools(&[true, false, false]);
        let b = Bits::from_bools(&[true, true, false]);
        assert!(a.is_subset_of(&b));
        assert!(!b.is_subset_of(&a));
    }
}
