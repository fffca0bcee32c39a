use std::collections::BTreeMap;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::spec::{LayerId, LayerKind, NetworkSpec};
use crate::tensor::{Real, Tensor};

/// Weight and bias of one conv/fc layer. Conv weights are `Co x Ci x K x K`,
/// fc weights are `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub type Params<T = f32> = BTreeMap<LayerId, LayerParams<T>>;

/// Trained parameters of a network plus the per-layer activation ranges
/// recorded for fake quantization.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub params: Params<f32>,
    /// Calibrated upper bound of each quantized layer's input activation.
    pub act_max: BTreeMap<LayerId, f32>,
    pub rng_seed: u64,
}

impl ModelState {
    pub fn check_against(&self, spec: &NetworkSpec) -> Result<()> {
        let mut problems = Vec::new();
        for layer in spec.parameterized() {
            let (wshape, bshape) = param_shapes(&layer.kind);
            match self.params.get(&layer.id) {
                None => problems.push(format!("layer {}: missing parameters", layer.id)),
                Some(p) if p.weight.shape() != wshape || p.bias.shape() != bshape => problems.push(format!(
                    "layer {}: parameter shapes {:?}/{:?}, expected {wshape:?}/{bshape:?}",
                    layer.id,
                    p.weight.shape(),
                    p.bias.shape()
                )),
                Some(_) => {}
            }
        }
        for id in self.params.keys() {
            if !spec.layer(*id).is_some_and(|l| l.is_parameterized()) {
                problems.push(format!("layer {id}: parameters for a layer the spec does not parameterize"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::validation(problems.join("; ")))
        }
    }

    pub fn cast_params<T: Real>(&self) -> Params<T> {
        cast_params(&self.params)
    }
}

pub fn cast_params<S: Real, T: Real>(params: &Params<S>) -> Params<T> {
    params.iter().map(|(&id, p)| (id, LayerParams { weight: p.weight.cast(), bias: p.bias.cast() })).collect()
}

pub(crate) fn param_shapes(kind: &LayerKind) -> (Vec<usize>, Vec<usize>) {
    match *kind {
        LayerKind::Conv { in_channels, out_channels, kernel, .. } => {
            (vec![out_channels, in_channels, kernel, kernel], vec![out_channels])
        }
        LayerKind::Fc { in_features, out_features } => (vec![out_features, in_features], vec![out_features]),
        _ => unreachable!("non-parameterized layer"),
    }
}

/// Fan-in scaled uniform initialization: weights and biases drawn from
/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, one seeded stream per model.
pub fn init_model(spec: &NetworkSpec, seed: u64) -> Result<ModelState> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = BTreeMap::new();
    for layer in spec.parameterized() {
        let (wshape, bshape) = param_shapes(&layer.kind);
        let fan_in: usize = wshape[1..].iter().product();
        let bound = 1.0 / (fan_in as f32).sqrt();
        let mut draw = |n: usize| -> Vec<f32> { (0..n).map(|_| rng.random_range(-bound..bound)).collect() };
        let weight = draw(wshape.iter().product());
        let bias = draw(bshape[0]);
        params.insert(layer.id, LayerParams { weight: Tensor::new(wshape, weight)?, bias: Tensor::new(bshape, bias)? });
    }
    Ok(ModelState { params, act_max: BTreeMap::new(), rng_seed: seed })
}
