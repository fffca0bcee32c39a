//! SGD fine-tuning and accuracy evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::engine::{Engine, EngineOptions, Exec};
use crate::error::{Error, Result};
use crate::model::{ModelState, Params};
use crate::spec::NetworkSpec;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FineTuneConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub nesterov: bool,
    /// (fraction of steps, lr multiplier): from that fraction on, the base
    /// rate is scaled by the multiplier.
    #[serde(default)]
    pub lr_schedule: Vec<(f64, f64)>,
    #[serde(default)]
    pub seed: u64,
}

fn default_lr() -> f64 {
    0.01
}
fn default_batch() -> usize {
    16
}
fn default_wd() -> f64 {
    5e-4
}
fn default_momentum() -> f64 {
    0.9
}

impl FineTuneConfig {
    pub fn new(steps: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            steps,
            batch_size: default_batch(),
            weight_decay: default_wd(),
            momentum: default_momentum(),
            nesterov: false,
            lr_schedule: Vec::new(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.steps == 0 {
            problems.push("steps must be >= 1".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            problems.push(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            problems.push("batch size must be >= 1".into());
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            problems.push(format!("weight decay must be >= 0, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            problems.push(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        let mut prev = 0.0;
        for &(f, m) in &self.lr_schedule {
            if !(f > prev && f <= 1.0) {
                problems.push(format!("lr schedule fractions must increase within (0, 1], got {f} after {prev}"));
            }
            if !(m > 0.0 && m.is_finite()) {
                problems.push(format!("lr multiplier must be positive, got {m}"));
            }
            prev = f;
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::validation(problems.join("; ")))
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let progress = step as f64 / self.steps as f64;
        let mult = self.lr_schedule.iter().take_while(|(f, _)| progress >= *f).last().map_or(1.0, |&(_, m)| m);
        self.learning_rate * mult
    }
}

fn check_labels(spec: &NetworkSpec, data: &Dataset) -> Result<usize> {
    if data.is_empty() {
        return Err(Error::validation("dataset is empty"));
    }
    let classes = spec.num_classes()?;
    if let Some(&bad) = data.labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::validation(format!("label {bad} out of range for {classes} classes")));
    }
    let [c, h, w] = spec.input_shape;
    if (data.channels, data.height, data.width) != (c, h, w) {
        return Err(Error::shape(format!(
            "dataset images are {}x{}x{}, network expects {c}x{h}x{w}",
            data.channels, data.height, data.width
        )));
    }
    Ok(classes)
}

/// Exactly `config.steps` steps of SGD with momentum on mean softmax
/// cross-entropy. Pruned filters get no update; with quantization enabled,
/// gradients pass the rounding steps unchanged.
pub fn finetune(
    spec: &NetworkSpec,
    state: &ModelState,
    data: &Dataset,
    config: &FineTuneConfig,
    exec: Exec<'_>,
) -> Result<ModelState> {
    config.validate()?;
    check_labels(spec, data)?;
    state.check_against(spec)?;

    let mut params: Params<f32> = state.params.clone();
    let mut velocity: Params<f32> = params
        .iter()
        .map(|(&id, p)| {
            (
                id,
                crate::model::LayerParams {
                    weight: Tensor::zeros(p.weight.shape().to_vec()),
                    bias: Tensor::zeros(p.bias.shape().to_vec()),
                },
            )
        })
        .collect();
    let masks: std::collections::BTreeMap<_, Vec<bool>> =
        exec.plan.map(|plan| plan.layers.iter().map(|(&id, lp)| (id, lp.keep.clone())).collect()).unwrap_or_default();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let batch = config.batch_size.min(data.len());
    let mut images = Vec::with_capacity(batch * data.image_len());
    let mut labels = Vec::with_capacity(batch);

    for step in 0..config.steps {
        images.clear();
        labels.clear();
        for _ in 0..batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let i = order[cursor];
            cursor += 1;
            images.extend_from_slice(data.image(i));
            labels.push(data.labels[i] as usize);
        }
        let engine = Engine::new(spec, &params, &state.act_max, exec, EngineOptions { calibrating: false })?;
        let (loss, grads) = engine.loss_and_grads(&images, &labels);
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        drop(engine);

        let lr = config.lr_at(step) as f32;
        let mu = config.momentum as f32;
        let wd = config.weight_decay as f32;
        for (id, p) in params.iter_mut() {
            let g = &grads[id];
            let v = velocity.get_mut(id).unwrap();
            let keep = masks.get(id);
            let rows = p.weight.shape()[0];
            let row_len = p.weight.len() / rows;
            let tensors = [
                (p.weight.data_mut(), g.weight.data(), v.weight.data_mut(), row_len),
                (p.bias.data_mut(), g.bias.data(), v.bias.data_mut(), 1),
            ];
            for (w, g, v, row_len) in tensors {
                for (j, ((w, &g), v)) in w.iter_mut().zip(g).zip(v.iter_mut()).enumerate() {
                    if keep.is_some_and(|k| !k[j / row_len]) {
                        continue;
                    }
                    let d = g + wd * *w;
                    *v = mu * *v + d;
                    let step_dir = if config.nesterov { d + mu * *v } else { *v };
                    *w -= lr * step_dir;
                }
            }
        }
        if params.values().any(|p| !p.weight.all_finite() || !p.bias.all_finite()) {
            return Err(Error::Diverged { step });
        }
    }
    Ok(ModelState { params, act_max: state.act_max.clone(), rng_seed: state.rng_seed })
}

/// Predicted class per row: argmax with ties going to the lower index.
pub fn argmax_rows(logits: &[f32], classes: usize) -> Vec<usize> {
    logits
        .chunks(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

/// Fraction of images whose argmax prediction matches the label.
pub fn evaluate(spec: &NetworkSpec, state: &ModelState, data: &Dataset, exec: Exec<'_>) -> Result<f64> {
    let classes = check_labels(spec, data)?;
    state.check_against(spec)?;
    let engine = Engine::new(spec, &state.params, &state.act_max, exec, EngineOptions { calibrating: false })?;
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(128) {
        let batch = data.batch(chunk)?;
        let tapes = engine.run(&batch)?;
        for (tape, &i) in tapes.iter().zip(chunk) {
            let logits = tape.acts.last().unwrap();
            if logits.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("evaluation produced non-finite logits".into()));
            }
            if argmax_rows(logits, classes)[0] == data.labels[i] as usize {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}
