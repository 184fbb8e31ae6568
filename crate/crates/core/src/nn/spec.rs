use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One layer of a network. Convolutions are stride 1 with zero padding that
/// preserves the spatial size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    Relu,
    Maxpool2x2,
    Flatten,
}

impl LayerSpec {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    /// `[weight shape, bias shape]` for parameterised layers.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Dense {
                in_features,
                out_features,
            } => Some((vec![out_features, in_features], vec![out_features])),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => Some((
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
            )),
            _ => None,
        }
    }

    /// `(fan_in, fan_out)` used by the initializer.
    pub fn fans(&self) -> Option<(usize, usize)> {
        match *self {
            LayerSpec::Dense {
                in_features,
                out_features,
            } => Some((in_features, out_features)),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => Some((in_channels * kernel * kernel, out_channels * kernel * kernel)),
            _ => None,
        }
    }

    /// Output activation shape for a given input, or a spec error.
    pub fn output_shape(&self, input: ActShape) -> Result<ActShape> {
        match (*self, input) {
            (
                LayerSpec::Dense {
                    in_features,
                    out_features,
                },
                ActShape::Flat(n),
            ) => {
                if n != in_features {
                    return Err(Error::Spec(format!(
                        "dense layer expects {in_features} features, receives {n}"
                    )));
                }
                Ok(ActShape::Flat(out_features))
            }
            (LayerSpec::Dense { .. }, s) => Err(Error::Spec(format!(
                "dense layer applied to spatial activation {s:?}; insert flatten"
            ))),
            (
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                },
                ActShape::Spatial { c, h, w },
            ) => {
                if kernel % 2 == 0 || kernel == 0 {
                    return Err(Error::Spec(format!("conv kernel {kernel} must be odd")));
                }
                if c != in_channels {
                    return Err(Error::Spec(format!(
                        "conv expects {in_channels} input channels, receives {c}"
                    )));
                }
                Ok(ActShape::Spatial {
                    c: out_channels,
                    h,
                    w,
                })
            }
            (LayerSpec::Conv2d { .. }, s) => Err(Error::Spec(format!(
                "conv layer applied to flat activation {s:?}"
            ))),
            (LayerSpec::Relu, s) => Ok(s),
            (LayerSpec::Maxpool2x2, ActShape::Spatial { c, h, w }) => {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::Spec(format!(
                        "2x2 max pooling needs even spatial dims, got {h}x{w}"
                    )));
                }
                Ok(ActShape::Spatial {
                    c,
                    h: h / 2,
                    w: w / 2,
                })
            }
            (LayerSpec::Maxpool2x2, s) => {
                Err(Error::Spec(format!("max pooling applied to {s:?}")))
            }
            (LayerSpec::Flatten, s) => Ok(ActShape::Flat(s.numel())),
        }
    }
}

/// Per-sample activation shape flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActShape {
    Spatial { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl ActShape {
    pub fn numel(&self) -> usize {
        match *self {
            ActShape::Spatial { c, h, w } => c * h * w,
            ActShape::Flat(n) => n,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            ActShape::Spatial { c, h, w } => vec![c, h, w],
            ActShape::Flat(n) => vec![n],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub name: String,
    pub layers: Vec<LayerSpec>,
}

impl GroupSpec {
    pub fn new(name: impl Into<String>, layers: Vec<LayerSpec>) -> Self {
        Self {
            name: name.into(),
            layers,
        }
    }
}

/// A named output head: groups applied to the backbone output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub name: String,
    pub groups: Vec<GroupSpec>,
}

/// Backbone groups shared by every head, followed by one or more heads.
///
/// The backbone is a single block that may be split into several named
/// groups (for example `base` and `top`) so module-level pruning can select
/// them independently.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Input `[channels, height, width]`.
    pub input: [usize; 3],
    pub backbone: Vec<GroupSpec>,
    pub heads: Vec<HeadSpec>,
}

/// A parameterised layer located inside a spec.
#[derive(Debug, Clone)]
pub struct ParamLayer {
    pub group: String,
    pub layer_index: usize,
    pub layer: LayerSpec,
    /// `None` for backbone layers.
    pub head: Option<String>,
    /// True for the final parameterised layer of a head.
    pub is_head_output: bool,
    /// Spatial size of the layer input (`(1, 1)` for dense layers).
    pub input_hw: (usize, usize),
}

impl ParamLayer {
    pub fn weight_id(&self) -> String {
        param_id(&self.group, self.layer_index, "weight")
    }

    pub fn bias_id(&self) -> String {
        param_id(&self.group, self.layer_index, "bias")
    }
}

pub fn param_id(group: &str, layer_index: usize, name: &str) -> String {
    format!("{group}/{layer_index}/{name}")
}

/// Group name of a parameter id (`group/layer/param`).
pub fn group_of(id: &str) -> &str {
    id.split('/').next().unwrap_or(id)
}

impl NetworkSpec {
    fn input_shape(&self) -> ActShape {
        ActShape::Spatial {
            c: self.input[0],
            h: self.input[1],
            w: self.input[2],
        }
    }

    /// Check that dimensions chain and names are unique.
    pub fn validate(&self) -> Result<()> {
        if self.input.iter().any(|&d| d == 0) {
            return Err(Error::Spec(format!("input dims {:?}", self.input)));
        }
        if self.backbone.is_empty() {
            return Err(Error::Spec("backbone has no groups".into()));
        }
        if self.heads.is_empty() {
            return Err(Error::Spec("network has no heads".into()));
        }
        let mut names = HashSet::new();
        let all_groups = self
            .backbone
            .iter()
            .chain(self.heads.iter().flat_map(|h| h.groups.iter()));
        for g in all_groups {
            if g.name.is_empty() || g.name.contains('/') {
                return Err(Error::Spec(format!("bad group name {:?}", g.name)));
            }
            if !names.insert(g.name.as_str()) {
                return Err(Error::Spec(format!("duplicate group name {}", g.name)));
            }
        }
        let mut head_names = HashSet::new();
        for h in &self.heads {
            if !head_names.insert(h.name.as_str()) {
                return Err(Error::Spec(format!("duplicate head name {}", h.name)));
            }
        }
        let backbone_out = self.backbone_output()?;
        for h in &self.heads {
            let mut shape = backbone_out;
            let mut has_params = false;
            for g in &h.groups {
                for l in &g.layers {
                    shape = l.output_shape(shape)?;
                    has_params |= l.has_params();
                }
            }
            if !matches!(shape, ActShape::Flat(_)) {
                return Err(Error::Spec(format!("head {} must end flat", h.name)));
            }
            if !has_params {
                return Err(Error::Spec(format!("head {} has no parameters", h.name)));
            }
        }
        Ok(())
    }

    pub fn backbone_output(&self) -> Result<ActShape> {
        let mut shape = self.input_shape();
        for g in &self.backbone {
            for l in &g.layers {
                shape = l.output_shape(shape)?;
            }
        }
        Ok(shape)
    }

    pub fn head(&self, name: &str) -> Result<&HeadSpec> {
        self.heads
            .iter()
            .find(|h| h.name == name)
            .ok_or_else(|| Error::Lookup(format!("head {name}")))
    }

    pub fn output_shape(&self, head: &str) -> Result<ActShape> {
        let mut shape = self.backbone_output()?;
        for g in &self.head(head)?.groups {
            for l in &g.layers {
                shape = l.output_shape(shape)?;
            }
        }
        Ok(shape)
    }

    /// Every group name, backbone first, in spec order.
    pub fn group_names(&self) -> Vec<String> {
        self.backbone
            .iter()
            .chain(self.heads.iter().flat_map(|h| h.groups.iter()))
            .map(|g| g.name.clone())
            .collect()
    }

    pub fn backbone_group_names(&self) -> Vec<String> {
        self.backbone.iter().map(|g| g.name.clone()).collect()
    }

    /// Parameterised layers in canonical order: backbone, then heads.
    pub fn param_layers(&self) -> Result<Vec<ParamLayer>> {
        let mut out = Vec::new();
        let mut shape = self.input_shape();
        for g in &self.backbone {
            for (i, l) in g.layers.iter().enumerate() {
                if l.has_params() {
                    out.push(ParamLayer {
                        group: g.name.clone(),
                        layer_index: i,
                        layer: *l,
                        head: None,
                        is_head_output: false,
                        input_hw: hw(shape),
                    });
                }
                shape = l.output_shape(shape)?;
            }
        }
        let backbone_out = shape;
        for h in &self.heads {
            let start = out.len();
            let mut shape = backbone_out;
            for g in &h.groups {
                for (i, l) in g.layers.iter().enumerate() {
                    if l.has_params() {
                        out.push(ParamLayer {
                            group: g.name.clone(),
                            layer_index: i,
                            layer: *l,
                            head: Some(h.name.clone()),
                            is_head_output: false,
                            input_hw: hw(shape),
                        });
                    }
                    shape = l.output_shape(shape)?;
                }
            }
            if out.len() > start {
                out.last_mut().unwrap().is_head_output = true;
            }
        }
        Ok(out)
    }
}

fn hw(shape: ActShape) -> (usize, usize) {
    match shape {
        ActShape::Spatial { h, w, .. } => (h, w),
        ActShape::Flat(_) => (1, 1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetworkSpec {
        NetworkSpec {
            input: [1, 4, 4],
            backbone: vec![GroupSpec::new(
                "base",
                vec![
                    LayerSpec::Conv2d {
                        in_channels: 1,
                        out_channels: 2,
                        kernel: 3,
                    },
                    LayerSpec::Relu,
                    LayerSpec::Maxpool2x2,
                ],
            )],
            heads: vec![HeadSpec {
                name: "cls".into(),
                groups: vec![GroupSpec::new(
                    "out",
                    vec![
                        LayerSpec::Flatten,
                        LayerSpec::Dense {
                            in_features: 8,
                            out_features: 3,
                        },
                    ],
                )],
            }],
        }
    }

    #[test]
    fn valid_spec_chains() {
        let s = tiny();
        s.validate().unwrap();
        assert_eq!(s.output_shape("cls").unwrap(), ActShape::Flat(3));
        let layers = s.param_layers().unwrap();
        assert_eq!(layers.len(), 2);
        assert_eq!(layers[0].weight_id(), "base/0/weight");
        assert!(layers[1].is_head_output);
        assert_eq!(layers[0].input_hw, (4, 4));
    }

    #[test]
    fn rejects_bad_dims() {
        let mut s = tiny();
        s.heads[0].groups[0].layers[1] = LayerSpec::Dense {
            in_features: 9,
            out_features: 3,
        };
        assert!(matches!(s.validate(), Err(Error::Spec(_))));
    }

    #[test]
    fn rejects_even_kernel_and_duplicate_groups() {
        let mut s = tiny();
        s.backbone[0].layers[0] = LayerSpec::Conv2d {
            in_channels: 1,
            out_channels: 2,
            kernel: 2,
        };
        assert!(s.validate().is_err());
        let mut s = tiny();
        s.heads[0].groups[0].name = "base".into();
        assert!(s.validate().is_err());
    }
}
