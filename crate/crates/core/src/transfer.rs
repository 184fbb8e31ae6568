//! Moving tickets and masks between networks that share a trunk.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{apply_mask, default_maskable, Bits, PruneMask};
use crate::nn::{group_of, init_network, NetworkSpec, ParameterSet};
use crate::pruning::{magnitude_mask_ids, Scope, Ticket};

/// Explicit source-id to target-id pairs. Target parameters that are not
/// listed are freshly initialised.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(String, String)>", into = "Vec<(String, String)>")]
pub struct GroupMapping {
    pairs: Vec<(String, String)>,
}

impl TryFrom<Vec<(String, String)>> for GroupMapping {
    type Error = Error;

    fn try_from(pairs: Vec<(String, String)>) -> Result<Self> {
        GroupMapping::new(pairs)
    }
}

impl From<GroupMapping> for Vec<(String, String)> {
    fn from(m: GroupMapping) -> Self {
        m.pairs
    }
}

impl GroupMapping {
    /// Rejects duplicate sources or targets.
    pub fn new(pairs: Vec<(String, String)>) -> Result<Self> {
        let mut src = HashSet::new();
        let mut dst = HashSet::new();
        for (s, d) in &pairs {
            if !src.insert(s.as_str()) {
                return Err(Error::Mapping(format!("source {s} mapped twice")));
            }
            if !dst.insert(d.as_str()) {
                return Err(Error::Mapping(format!("target {d} mapped twice")));
            }
        }
        Ok(Self { pairs })
    }

    /// Same-id pairs for every parameter of the listed groups.
    pub fn by_groups(params: &ParameterSet, groups: &[&str]) -> Result<Self> {
        if let Some(g) = groups
            .iter()
            .find(|g| !params.ids().any(|id| group_of(id) == **g))
        {
            return Err(Error::Mapping(format!("group {g} has no parameters")));
        }
        Self::new(
            params
                .ids()
                .filter(|id| groups.contains(&group_of(id)))
                .map(|id| (id.to_string(), id.to_string()))
                .collect(),
        )
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn targets(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|(_, d)| d.as_str())
    }

    /// Every pair names existing tensors of identical shape.
    pub fn validate(&self, source: &ParameterSet, target: &ParameterSet) -> Result<()> {
        for (s, d) in &self.pairs {
            let st = source
                .get(s)
                .map_err(|_| Error::Mapping(format!("source {s} does not exist")))?;
            let dt = target
                .get(d)
                .map_err(|_| Error::Mapping(format!("target {d} does not exist")))?;
            if st.shape() != dt.shape() {
                return Err(Error::Mapping(format!(
                    "{s} {:?} -> {d} {:?}",
                    st.shape(),
                    dt.shape()
                )));
            }
        }
        Ok(())
    }

    /// Target ids left unmapped.
    pub fn fresh<'a>(&self, target: &'a ParameterSet) -> Vec<&'a str> {
        let mapped: HashSet<&str> = self.targets().collect();
        target.ids().filter(|id| !mapped.contains(id)).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    TicketTransfer,
    MaskTransfer,
    CrossTask,
}

/// Copy a ticket's rewind weights and mask into a fresh target network.
///
/// Target maskable ids are the target's defaults plus every mapped id that
/// was maskable in the source.
pub fn ticket_transfer(
    source: &Ticket,
    target_spec: &NetworkSpec,
    mapping: &GroupMapping,
    seed: u64,
) -> Result<(ParameterSet, PruneMask)> {
    let mut params = init_network(target_spec, seed)?;
    mapping.validate(&source.rewind_weights, &params)?;
    let mut maskable = default_maskable(target_spec)?;
    for (s, d) in mapping.pairs() {
        if source.mask.is_maskable(s) {
            maskable.insert(d.clone());
        } else {
            maskable.remove(d);
        }
    }
    let mut bits = params
        .iter()
        .map(|(id, t)| (id.to_string(), Bits::ones(t.len())))
        .collect::<indexmap::IndexMap<_, _>>();
    for (s, d) in mapping.pairs() {
        *params.get_mut(d)? = source.rewind_weights.get(s)?.clone();
        bits[d.as_str()] = source.mask.get(s)?.clone();
    }
    let mask = PruneMask::from_parts(bits, maskable)?;
    apply_mask(&mut params, &mask)?;
    Ok((params, mask))
}

/// Keep the top `1 - p` of each mapped weight tensor by magnitude (conv
/// weights only when `conv_only`), copying pretrained values without any
/// source retraining. Unmapped target tensors are freshly initialised.
pub fn mask_transfer(
    pretrained: &ParameterSet,
    target_spec: &NetworkSpec,
    p: f64,
    mapping: &GroupMapping,
    conv_only: bool,
    seed: u64,
) -> Result<(ParameterSet, PruneMask)> {
    let target = init_network(target_spec, seed)?;
    let maskable = default_maskable(target_spec)?;
    mask_transfer_into(pretrained, target, maskable, p, mapping, conv_only)
}

/// [`mask_transfer`] onto an already initialised target.
pub fn mask_transfer_into(
    pretrained: &ParameterSet,
    mut target: ParameterSet,
    maskable: BTreeSet<String>,
    p: f64,
    mapping: &GroupMapping,
    conv_only: bool,
) -> Result<(ParameterSet, PruneMask)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Range(format!("prune fraction {p} outside [0, 1)")));
    }
    mapping.validate(pretrained, &target)?;
    for (s, d) in mapping.pairs() {
        *target.get_mut(d)? = pretrained.get(s)?.clone();
    }
    let mask = PruneMask::full(&target, maskable)?;
    if p == 0.0 {
        return Ok((target, mask));
    }
    let ids: Vec<String> = mapping
        .targets()
        .filter(|d| mask.is_maskable(d))
        .filter(|d| !conv_only || target.get(d).is_ok_and(|t| t.shape().len() == 4))
        .map(str::to_string)
        .collect();
    if ids.is_empty() {
        return Ok((target, mask));
    }
    let mask = magnitude_mask_ids(&target, &mask, p, Scope::Layerwise, &ids)?;
    apply_mask(&mut target, &mask)?;
    Ok((target, mask))
}

#[derive(Debug, Clone)]
pub struct CrossTaskInit {
    pub params: ParameterSet,
    pub mask: PruneMask,
    /// Pruned fraction of the mapped trunk.
    pub trunk_sparsity: f64,
    /// Trunk share of all target parameters.
    pub trunk_fraction: f64,
    pub network_sparsity: f64,
}

/// Ticket transfer restricted to a trunk that must cover whole groups.
pub fn cross_task_transfer(
    source: &Ticket,
    target_spec: &NetworkSpec,
    trunk: &GroupMapping,
    seed: u64,
) -> Result<CrossTaskInit> {
    if trunk.is_empty() {
        return Err(Error::Mapping("empty trunk mapping".into()));
    }
    let (params, mask) = ticket_transfer(source, target_spec, trunk, seed)?;
    let mapped: HashSet<&str> = trunk.targets().collect();
    let groups: HashSet<&str> = mapped.iter().map(|id| group_of(id)).collect();
    if let Some(id) = params
        .ids()
        .find(|id| groups.contains(group_of(id)) && !mapped.contains(id))
    {
        return Err(Error::Mapping(format!(
            "trunk covers group {} only partly: {id} unmapped",
            group_of(id)
        )));
    }
    let (mut trunk_pruned, mut trunk_total) = (0usize, 0usize);
    for id in &mapped {
        let b = mask.get(id)?;
        trunk_pruned += b.count_zeros();
        trunk_total += b.len();
    }
    let total = mask.numel();
    Ok(CrossTaskInit {
        trunk_sparsity: trunk_pruned as f64 / trunk_total as f64,
        trunk_fraction: trunk_total as f64 / total as f64,
        network_sparsity: mask.pruned() as f64 / total as f64,
        params,
        mask,
    })
}
