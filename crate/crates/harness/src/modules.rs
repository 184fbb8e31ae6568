//! Enumerating group subsets for module-wise pruning.

use lth_core::nn::{group_of, ParameterSet};
use lth_core::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ModuleSubset {
    /// Groups in their original order; empty for the dense baseline.
    pub groups: Vec<String>,
    /// Share of all network parameters held by these groups, in percent.
    pub param_pct: f64,
}

impl ModuleSubset {
    pub fn label(&self) -> String {
        if self.groups.is_empty() {
            "none".into()
        } else {
            self.groups.join("+")
        }
    }
}

/// Every subset of `groups`, the empty one first, ordered by bitmask with
/// the first group as the lowest bit.
pub fn module_grid(groups: &[String], params: &ParameterSet) -> Result<Vec<ModuleSubset>> {
    if groups.is_empty() || groups.len() > 6 {
        return Err(Error::Config(format!(
            "module grid takes 1 to 6 groups, got {}",
            groups.len()
        )));
    }
    let total = params.numel() as f64;
    let sizes: Vec<usize> = groups
        .iter()
        .map(|g| {
            let n: usize = params
                .iter()
                .filter(|(id, _)| group_of(id) == g)
                .map(|(_, t)| t.len())
                .sum();
            if n == 0 {
                Err(Error::Lookup(format!("group {g} has no parameters")))
            } else {
                Ok(n)
            }
        })
        .collect::<Result<_>>()?;
    Ok((0..1usize << groups.len())
        .map(|bits| {
            let mut chosen = Vec::new();
            let mut n = 0;
            for (i, g) in groups.iter().enumerate() {
                if bits >> i & 1 == 1 {
                    chosen.push(g.clone());
                    n += sizes[i];
                }
            }
            ModuleSubset {
                groups: chosen,
                param_pct: 100.0 * n as f64 / total,
            }
        })
        .collect())
}
