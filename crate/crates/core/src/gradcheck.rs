//! Analytic-vs-finite-difference gradient verification in f64.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::engine::{Engine, EngineOptions, Exec, Grads};
use crate::error::{Error, Result};
use crate::model::{ModelState, Params};
use crate::spec::{LayerId, NetworkSpec};
use crate::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
pub const MAX_CHECKED: usize = 200;
/// Gradients smaller than this are compared in absolute terms.
const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter entries compared.
    pub checked: usize,
    /// Entries skipped because a ReLU or max-pool switched branch inside
    /// the difference stencil (the loss is not differentiable there).
    pub skipped_kinks: usize,
    pub tolerance: f64,
    pub passed: bool,
    /// (layer, is_bias, flat index) of the worst entry.
    pub worst: Option<(LayerId, bool, usize)>,
}

/// `|a - n| / max(|a|, |n|, 1e-4)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Parameter entry addressed by layer, tensor and flat index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamRef {
    pub layer: LayerId,
    pub bias: bool,
    pub index: usize,
}

/// Up to `max` entries sampled uniformly without replacement.
pub fn sample_entries(params: &Params<f64>, max: usize, seed: u64) -> Vec<ParamRef> {
    let all: Vec<ParamRef> = params
        .iter()
        .flat_map(|(&layer, p)| {
            (0..p.weight.len())
                .map(move |index| ParamRef { layer, bias: false, index })
                .chain((0..p.bias.len()).map(move |index| ParamRef { layer, bias: true, index }))
        })
        .collect();
    if all.len() <= max {
        return all;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, all.len(), max).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| all[i]).collect()
}

fn entry(params: &mut Params<f64>, r: ParamRef) -> &mut f64 {
    let p = params.get_mut(&r.layer).expect("sampled layer");
    let t = if r.bias { &mut p.bias } else { &mut p.weight };
    &mut t.data_mut()[r.index]
}

fn grad_of(grads: &Grads<f64>, r: ParamRef) -> f64 {
    let g = &grads[&r.layer];
    if r.bias {
        g.bias.data()[r.index]
    } else {
        g.weight.data()[r.index]
    }
}

/// Compare `analytic` against central differences of `loss` on `entries`.
/// `loss` returns the loss and a branch pattern; entries whose stencil
/// crosses a branch change are skipped.
pub fn check_gradients<F>(
    params: &Params<f64>,
    analytic: &Grads<f64>,
    entries: &[ParamRef],
    tolerance: f64,
    loss: F,
) -> GradCheckReport
where
    F: Fn(&Params<f64>) -> (f64, Vec<u32>),
{
    let (_, base_pattern) = loss(params);
    let mut work = params.clone();
    let mut max_rel = 0.0f64;
    let mut worst = None;
    let mut checked = 0;
    let mut skipped = 0;
    for &r in entries {
        let orig = *entry(&mut work, r);
        *entry(&mut work, r) = orig + FD_STEP;
        let (plus, pat_plus) = loss(&work);
        *entry(&mut work, r) = orig - FD_STEP;
        let (minus, pat_minus) = loss(&work);
        *entry(&mut work, r) = orig;
        if pat_plus != base_pattern || pat_minus != base_pattern {
            skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let err = relative_error(grad_of(analytic, r), numeric);
        checked += 1;
        if err > max_rel || err.is_nan() {
            max_rel = if err.is_nan() { f64::INFINITY } else { err };
            worst = Some((r.layer, r.bias, r.index));
        }
    }
    GradCheckReport {
        max_rel_error: max_rel,
        checked,
        skipped_kinks: skipped,
        tolerance,
        passed: max_rel < tolerance,
        worst,
    }
}

/// Gradient check of the softmax cross-entropy loss on `batch` in 64-bit
/// precision, over at most 200 randomly chosen parameters.
pub fn gradient_check(
    spec: &NetworkSpec,
    state: &ModelState,
    batch: &Tensor<f32>,
    labels: &[usize],
    tolerance: f64,
    exec: Exec<'_>,
) -> Result<GradCheckReport> {
    state.check_against(spec)?;
    let classes = spec.num_classes()?;
    if batch.shape()[0] != labels.len() || labels.iter().any(|&l| l >= classes) {
        return Err(Error::validation("labels do not match batch or class count"));
    }
    let params: Params<f64> = state.cast_params();
    let images: Vec<f64> = batch.data().iter().map(|&v| v as f64).collect();
    let options = || EngineOptions { calibrating: false };
    let engine = Engine::new(spec, &params, &state.act_max, exec, options())?;
    if images.len() != labels.len() * engine.input_len {
        return Err(Error::shape("batch does not match network input"));
    }
    let (_, analytic) = engine.loss_and_grads(&images, labels);
    let entries = sample_entries(&params, MAX_CHECKED, state.rng_seed);
    let loss = |p: &Params<f64>| {
        let e = Engine::new(spec, p, &state.act_max, exec, options()).expect("validated network");
        let mut total = 0.0;
        let mut pattern = Vec::new();
        for (i, &label) in labels.iter().enumerate() {
            let tape = e.forward_sample(&images[i * e.input_len..(i + 1) * e.input_len], true);
            total += crate::engine::softmax_xent(tape.acts.last().unwrap(), label).0;
            pattern.extend(e.branch_pattern(&tape));
        }
        (total / labels.len() as f64, pattern)
    };
    Ok(check_gradients(&params, &analytic, &entries, tolerance, loss))
}
