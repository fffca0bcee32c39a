//! Network topology description and its validation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type LayerId = u32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Fc {
        in_features: usize,
        out_features: usize,
    },
    Relu,
    Maxpool {
        kernel: usize,
        stride: usize,
    },
    Avgpool {
        kernel: usize,
        stride: usize,
    },
    Flatten,
    /// Adds the output of layer `from` to the running activation.
    ResidualAdd {
        from: LayerId,
    },
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: LayerId,
    #[serde(flatten)]
    pub kind: LayerKind,
    #[serde(default)]
    pub prunable: bool,
}

impl LayerSpec {
    pub fn conv(id: LayerId, cin: usize, cout: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            id,
            kind: LayerKind::Conv { in_channels: cin, out_channels: cout, kernel, stride, padding },
            prunable: true,
        }
    }

    pub fn fc(id: LayerId, inputs: usize, outputs: usize) -> Self {
        Self { id, kind: LayerKind::Fc { in_features: inputs, out_features: outputs }, prunable: false }
    }

    pub fn simple(id: LayerId, kind: LayerKind) -> Self {
        Self { id, kind, prunable: false }
    }

    pub fn is_parameterized(&self) -> bool {
        matches!(self.kind, LayerKind::Conv { .. } | LayerKind::Fc { .. })
    }

    /// Number of output filters (conv) or units (fc).
    pub fn out_units(&self) -> Option<usize> {
        match self.kind {
            LayerKind::Conv { out_channels, .. } => Some(out_channels),
            LayerKind::Fc { out_features, .. } => Some(out_features),
            _ => None,
        }
    }
}

/// Activation shape flowing between layers (batch axis excluded).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActShape {
    Map { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl ActShape {
    pub fn numel(&self) -> usize {
        match *self {
            ActShape::Map { c, h, w } => c * h * w,
            ActShape::Flat(n) => n,
        }
    }

    /// Channels, height and width; a flat vector reads as `n x 1 x 1`.
    pub fn map_dims(&self) -> (usize, usize, usize) {
        match *self {
            ActShape::Map { c, h, w } => (c, h, w),
            ActShape::Flat(n) => (n, 1, 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    /// C x H x W
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub residual_groups: Vec<Vec<LayerId>>,
    #[serde(default)]
    pub full_precision_layers: Vec<LayerId>,
}

/// A spec that passed validation, with resolved shapes and channel wiring.
#[derive(Debug, Clone)]
pub struct Topology {
    /// Shape entering layer at position i is `shapes[i]`; `shapes[len]` is the output.
    pub shapes: Vec<ActShape>,
    pub position: BTreeMap<LayerId, usize>,
    /// For each parameterized layer, the prunable conv whose filters feed its input channels.
    pub input_producer: BTreeMap<LayerId, Option<LayerId>>,
    /// Prunable conv -> index of its residual group, if any.
    pub group_of: BTreeMap<LayerId, usize>,
}

impl NetworkSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: NetworkSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn num_classes(&self) -> Result<usize> {
        match self.topology()?.shapes.last() {
            Some(ActShape::Flat(n)) => Ok(*n),
            Some(ActShape::Map { c, h: 1, w: 1 }) => Ok(*c),
            other => Err(Error::validation(format!("network output {other:?} is not a class vector"))),
        }
    }

    pub fn layer(&self, id: LayerId) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn parameterized(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().filter(|l| l.is_parameterized())
    }

    /// Prunable conv layer ids in network order.
    pub fn prunable_ids(&self) -> Vec<LayerId> {
        self.layers.iter().filter(|l| l.prunable && matches!(l.kind, LayerKind::Conv { .. })).map(|l| l.id).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.topology().map(|_| ())
    }

    /// Validate and resolve shapes. Every problem found is reported with
    /// the offending layer ids.
    pub fn topology(&self) -> Result<Topology> {
        let mut problems: Vec<String> = Vec::new();
        let mut position = BTreeMap::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if position.insert(layer.id, i).is_some() {
                problems.push(format!("layer {}: duplicate id", layer.id));
            }
        }
        if self.input_shape.contains(&0) {
            problems.push(format!("input shape {:?} has a zero dimension", self.input_shape));
        }
        if self.layers.is_empty() {
            problems.push("network has no layers".into());
        }
        if !problems.is_empty() {
            return Err(Error::validation(problems.join("; ")));
        }

        let [c, h, w] = self.input_shape;
        let mut shapes = vec![ActShape::Map { c, h, w }];
        // prunable conv feeding the channels of the current activation
        let mut producers: Vec<Option<LayerId>> = vec![None];
        let mut input_producer = BTreeMap::new();

        for layer in &self.layers {
            let cur = *shapes.last().unwrap();
            let cur_producer = *producers.last().unwrap();
            let id = layer.id;
            if layer.prunable && !matches!(layer.kind, LayerKind::Conv { .. }) {
                problems.push(format!("layer {id}: only conv layers may be prunable"));
            }
            let (next, producer) = match (&layer.kind, cur) {
                (
                    &LayerKind::Conv { in_channels, out_channels, kernel, stride, padding },
                    ActShape::Map { c, h, w },
                ) => {
                    if in_channels != c {
                        problems.push(format!("layer {id}: conv expects {in_channels} input channels, receives {c}"));
                    }
                    if kernel == 0 || stride == 0 || out_channels == 0 {
                        problems.push(format!("layer {id}: kernel, stride and out_channels must be >= 1"));
                        (cur, cur_producer)
                    } else if h + 2 * padding < kernel || w + 2 * padding < kernel {
                        problems.push(format!("layer {id}: kernel {kernel} larger than padded input {h}x{w}"));
                        (cur, cur_producer)
                    } else {
                        input_producer.insert(id, cur_producer);
                        let ho = (h + 2 * padding - kernel) / stride + 1;
                        let wo = (w + 2 * padding - kernel) / stride + 1;
                        let prod = if layer.prunable { Some(id) } else { None };
                        (ActShape::Map { c: out_channels, h: ho, w: wo }, prod)
                    }
                }
                (&LayerKind::Fc { in_features, out_features }, shape) => {
                    if let ActShape::Map { .. } = shape {
                        problems.push(format!("layer {id}: fc needs a flatten before it"));
                    }
                    if in_features != shape.numel() {
                        problems
                            .push(format!("layer {id}: fc expects {in_features} features, receives {}", shape.numel()));
                    }
                    if out_features == 0 {
                        problems.push(format!("layer {id}: fc out_features must be >= 1"));
                    }
                    input_producer.insert(id, cur_producer);
                    (ActShape::Flat(out_features), None)
                }
                (LayerKind::Relu, shape) => (shape, cur_producer),
                (
                    &LayerKind::Maxpool { kernel, stride } | &LayerKind::Avgpool { kernel, stride },
                    ActShape::Map { c, h, w },
                ) => {
                    if kernel == 0 || stride == 0 || kernel > h || kernel > w {
                        problems.push(format!("layer {id}: pool kernel {kernel}/stride {stride} invalid for {h}x{w}"));
                        (cur, cur_producer)
                    } else {
                        let ho = (h - kernel) / stride + 1;
                        let wo = (w - kernel) / stride + 1;
                        (ActShape::Map { c, h: ho, w: wo }, cur_producer)
                    }
                }
                (LayerKind::Flatten, shape) => (ActShape::Flat(shape.numel()), cur_producer),
                (&LayerKind::ResidualAdd { from }, shape) => match position.get(&from) {
                    Some(&p) if p < position[&id] => {
                        if shapes[p + 1] != shape {
                            problems.push(format!(
                                "layer {id}: residual add joins {shape:?} with {:?} from layer {from}",
                                shapes[p + 1]
                            ));
                        }
                        let other = producers[p + 1];
                        if other != cur_producer && (other.is_some() || cur_producer.is_some()) {
                            let same_group = match (other, cur_producer) {
                                (Some(a), Some(b)) => {
                                    self.residual_groups.iter().any(|g| g.contains(&a) && g.contains(&b))
                                }
                                _ => false,
                            };
                            if !same_group {
                                problems.push(format!(
                                    "layer {id}: residual add joins channels of {other:?} and {cur_producer:?} which are not in one residual group"
                                ));
                            }
                        }
                        (shape, cur_producer)
                    }
                    _ => {
                        problems.push(format!("layer {id}: residual source {from} is not an earlier layer"));
                        (shape, cur_producer)
                    }
                },
                (kind, shape) => {
                    problems.push(format!("layer {id}: {kind:?} cannot consume {shape:?}"));
                    (shape, cur_producer)
                }
            };
            shapes.push(next);
            producers.push(producer);
        }

        let mut group_of = BTreeMap::new();
        for (g, group) in self.residual_groups.iter().enumerate() {
            let mut widths = BTreeSet::new();
            for &id in group {
                match self.layer(id) {
                    Some(l @ LayerSpec { kind: LayerKind::Conv { out_channels, .. }, .. }) if l.prunable => {
                        widths.insert(*out_channels);
                        if group_of.insert(id, g).is_some() {
                            problems.push(format!("layer {id}: member of more than one residual group"));
                        }
                    }
                    _ => problems.push(format!("layer {id}: residual group member must be a prunable conv")),
                }
            }
            if widths.len() > 1 {
                problems.push(format!("residual group {group:?}: members have different filter counts"));
            }
        }
        for &id in &self.full_precision_layers {
            if !self.layer(id).is_some_and(|l| l.is_parameterized()) {
                problems.push(format!("layer {id}: full-precision entry is not a conv/fc layer"));
            }
        }
        if self.parameterized().next().is_none() {
            problems.push("network has no conv/fc layers".into());
        }

        if problems.is_empty() {
            Ok(Topology { shapes, position, input_producer, group_of })
        } else {
            Err(Error::validation(problems.join("; ")))
        }
    }
}

impl Topology {
    pub fn input_of(&self, id: LayerId) -> ActShape {
        self.shapes[self.position[&id]]
    }

    pub fn output_of(&self, id: LayerId) -> ActShape {
        self.shapes[self.position[&id] + 1]
    }
}

/// The 4-conv / 1-fc network used by the desk-scale experiments:
/// 3x16x16 input, conv widths 16/16/32/32, `classes` outputs.
pub fn desk_network(classes: usize) -> NetworkSpec {
    use LayerKind::*;
    NetworkSpec {
        name: "desk4".into(),
        input_shape: [3, 16, 16],
        layers: vec![
            LayerSpec::conv(1, 3, 16, 3, 2, 1),
            LayerSpec::simple(2, Relu),
            LayerSpec::conv(3, 16, 16, 3, 1, 1),
            LayerSpec::simple(4, Relu),
            LayerSpec::conv(5, 16, 32, 3, 1, 1),
            LayerSpec::simple(6, Relu),
            LayerSpec::conv(7, 32, 32, 3, 1, 1),
            LayerSpec::simple(8, Relu),
            LayerSpec::simple(9, Maxpool { kernel: 2, stride: 2 }),
            LayerSpec::simple(10, Flatten),
            LayerSpec::fc(11, 32 * 4 * 4, classes),
        ],
        residual_groups: vec![],
        full_precision_layers: vec![],
    }
}
