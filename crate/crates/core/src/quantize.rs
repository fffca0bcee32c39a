//! Bitwidth scheduling, sparsity-driven bitwidth assignment and the
//! weight/activation fake quantizers.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spec::{LayerId, NetworkSpec};
use crate::tensor::Real;

/// Bitwidth carried by layers that stay in full precision.
pub const FULL_PRECISION_BITS: u32 = 32;
pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 8;
/// Default penalty factor trading sparsity for bitwidth.
pub const DEFAULT_PENALTY: f64 = 1.0 / 6.0;

/// Available maximum weight/activation bitwidths per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitwidthSchedule {
    /// layer -> (N_W, N_A)
    pub max_bits: BTreeMap<LayerId, (u32, u32)>,
    pub penalty: f64,
    pub exempt: BTreeSet<LayerId>,
}

/// Pipeline-config form of a schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default = "default_first")]
    pub n_first: u32,
    #[serde(default = "default_last")]
    pub n_last: u32,
    #[serde(default = "default_penalty")]
    pub p: f64,
    #[serde(default)]
    pub exempt: Vec<LayerId>,
}

fn default_first() -> u32 {
    8
}
fn default_last() -> u32 {
    2
}
fn default_penalty() -> f64 {
    DEFAULT_PENALTY
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { n_first: 8, n_last: 2, p: DEFAULT_PENALTY, exempt: Vec::new() }
    }
}

impl ScheduleConfig {
    pub fn build(&self, spec: &NetworkSpec) -> Result<BitwidthSchedule> {
        let mut schedule = default_schedule(spec, self.n_first, self.n_last)?;
        if !(self.p > 0.0 && self.p.is_finite()) {
            return Err(Error::validation(format!("penalty factor must be positive, got {}", self.p)));
        }
        schedule.penalty = self.p;
        for &id in &self.exempt {
            if !spec.layer(id).is_some_and(|l| l.is_parameterized()) {
                return Err(Error::validation(format!("layer {id}: exempt entry is not a conv/fc layer")));
            }
            schedule.exempt.insert(id);
        }
        Ok(schedule)
    }
}

/// Per-layer assigned bitwidths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitwidthAssignment {
    /// layer -> (n_W, n_A)
    pub bits: BTreeMap<LayerId, (u32, u32)>,
}

/// Maximum bitwidth interpolated linearly from `n_first` at the first prunable
/// layer to `n_last` at the last one, rounded to nearest. Non-prunable
/// parameterized layers inherit the value of the closest preceding prunable
/// layer. The first and last parameterized layers, and any layer the spec
/// lists as full precision, are exempt.
pub fn default_schedule(spec: &NetworkSpec, n_first: u32, n_last: u32) -> Result<BitwidthSchedule> {
    if !(MIN_BITS <= n_last && n_last <= n_first && n_first <= MAX_BITS) {
        return Err(Error::validation(format!(
            "bitwidth bounds must satisfy {MIN_BITS} <= n_last <= n_first <= {MAX_BITS}, got n_first={n_first} n_last={n_last}"
        )));
    }
    spec.validate()?;
    let prunable = spec.prunable_ids();
    let depth = prunable.len();
    let interp = |k: usize| -> u32 {
        if depth <= 1 {
            return n_first;
        }
        let t = k as f64 / (depth - 1) as f64;
        (n_first as f64 + (n_last as f64 - n_first as f64) * t).round() as u32
    };

    let mut max_bits = BTreeMap::new();
    let mut current = n_first;
    let mut k = 0;
    for layer in spec.parameterized() {
        if prunable.get(k) == Some(&layer.id) {
            current = interp(k);
            k += 1;
        }
        max_bits.insert(layer.id, (current, current));
    }

    let params: Vec<LayerId> = spec.parameterized().map(|l| l.id).collect();
    let mut exempt: BTreeSet<LayerId> = spec.full_precision_layers.iter().copied().collect();
    exempt.insert(params[0]);
    exempt.insert(*params.last().unwrap());
    Ok(BitwidthSchedule { max_bits, penalty: DEFAULT_PENALTY, exempt })
}

impl BitwidthSchedule {
    pub fn check(&self, spec: &NetworkSpec) -> Result<()> {
        let mut problems = Vec::new();
        for layer in spec.parameterized() {
            match self.max_bits.get(&layer.id) {
                None => problems.push(format!("layer {}: no maximum bitwidth", layer.id)),
                Some(&(w, a)) if !self.exempt.contains(&layer.id) => {
                    if !(MIN_BITS..=MAX_BITS).contains(&w) || !(MIN_BITS..=MAX_BITS).contains(&a) {
                        problems.push(format!("layer {}: maximum bitwidth ({w}, {a}) outside 2..=8", layer.id));
                    }
                }
                Some(_) => {}
            }
        }
        if !(self.penalty > 0.0 && self.penalty.is_finite()) {
            problems.push(format!("penalty factor must be positive, got {}", self.penalty));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::validation(problems.join("; ")))
        }
    }

    /// Bits for one layer at sparsity `s` (kept fraction).
    pub fn bits_for(&self, layer: LayerId, s: f64) -> Result<(u32, u32)> {
        if self.exempt.contains(&layer) {
            return Ok((FULL_PRECISION_BITS, FULL_PRECISION_BITS));
        }
        let &(nw, na) = self
            .max_bits
            .get(&layer)
            .ok_or_else(|| Error::validation(format!("layer {layer}: no maximum bitwidth")))?;
        if !(s > 0.0 && s <= 1.0) {
            return Err(Error::validation(format!("layer {layer}: sparsity {s} outside (0, 1]")));
        }
        Ok((bits_from_sparsity(nw, self.penalty, s), bits_from_sparsity(na, self.penalty, s)))
    }
}

/// `ceil(N - p / S)` clamped to `[2, N]`.
pub fn bits_from_sparsity(max_bits: u32, penalty: f64, sparsity: f64) -> u32 {
    let raw = max_bits as f64 - penalty / sparsity;
    // absorb the last-ulp error of p/S so exact integers are not bumped up
    let n = (raw - 1e-9).ceil();
    (n.max(MIN_BITS as f64) as u32).min(max_bits)
}

pub fn assign_bitwidths(sparsity: &BTreeMap<LayerId, f64>, schedule: &BitwidthSchedule) -> Result<BitwidthAssignment> {
    let mut bits = BTreeMap::new();
    for &layer in schedule.max_bits.keys() {
        let s = if schedule.exempt.contains(&layer) {
            1.0
        } else {
            *sparsity.get(&layer).ok_or_else(|| Error::validation(format!("layer {layer}: missing sparsity")))?
        };
        bits.insert(layer, schedule.bits_for(layer, s)?);
    }
    Ok(BitwidthAssignment { bits })
}

/// Weight quantizer: `round(tanh(w) * 2^(n-1) / layer_max) / 2^(n-1)`, with
/// `layer_max = max |W|` over the layer's raw weights. A non-positive
/// `layer_max` (all-zero layer) passes zeros through.
pub fn quantize_weights<T: Real>(weights: &[T], bits: u32, layer_max: T) -> Vec<T> {
    assert!(bits >= MIN_BITS, "weight bitwidth must be >= 2");
    if !(layer_max > T::zero()) {
        return vec![T::zero(); weights.len()];
    }
    let levels = T::of_f64((1u64 << (bits - 1)) as f64);
    let scale = levels / layer_max;
    weights.iter().map(|&w| (w.tanh() * scale).round() / levels).collect()
}

/// Activation quantizer: `round(clamp(a, 0, 1) * 2^n) / 2^n`.
pub fn quantize_activations<T: Real>(acts: &[T], bits: u32) -> Vec<T> {
    acts.iter().map(|&a| quantize_activation(a, bits)).collect()
}

#[inline]
pub(crate) fn quantize_activation<T: Real>(a: T, bits: u32) -> T {
    let levels = T::of_f64((1u64 << bits) as f64);
    (a.max(T::zero()).min(T::one()) * levels).round() / levels
}

pub fn max_abs<T: Real>(values: &[T]) -> T {
    values.iter().fold(T::zero(), |m, v| m.max(v.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec::{desk_network, LayerSpec};

    #[test]
    fn eq17_worked_cases() {
        let p = 1.0 / 6.0;
        assert_eq!(bits_from_sparsity(8, p, 1.0), 8);
        assert_eq!(bits_from_sparsity(8, p, 1.0 / 12.0), 6);
        assert_eq!(bits_from_sparsity(4, p, 0.05), 2);
    }

    #[test]
    fn schedule_interpolates_and_exempts_ends() {
        let spec = desk_network(3);
        let s = default_schedule(&spec, 8, 2).unwrap();
        let maxes: Vec<u32> = [1, 3, 5, 7].iter().map(|id| s.max_bits[id].0).collect();
        assert_eq!(maxes, vec![8, 6, 4, 2]);
        assert_eq!(s.exempt.iter().copied().collect::<Vec<_>>(), vec![1, 11]);

        let flat = default_schedule(&spec, 8, 8).unwrap();
        assert!(flat.max_bits.values().all(|&(w, a)| w == 8 && a == 8));
    }

    #[test]
    fn seven_layer_schedule() {
        let mut layers = Vec::new();
        let mut id = 1;
        for _ in 0..7 {
            layers.push(LayerSpec::conv(id, 4, 4, 3, 1, 1));
            id += 1;
        }
        layers[0] = LayerSpec::conv(1, 3, 4, 3, 1, 1);
        layers.push(LayerSpec::simple(id, crate::spec::LayerKind::Flatten));
        layers.push(LayerSpec::fc(id + 1, 4 * 6 * 6, 2));
        let spec = NetworkSpec {
            name: "seven".into(),
            input_shape: [3, 6, 6],
            layers,
            residual_groups: vec![],
            full_precision_layers: vec![],
        };
        let s = default_schedule(&spec, 8, 2).unwrap();
        let maxes: Vec<u32> = (1..=7).map(|id| s.max_bits[&id].0).collect();
        assert_eq!(maxes, vec![8, 7, 6, 5, 4, 3, 2]);
        assert!(s.exempt.contains(&1) && s.exempt.contains(&9));
    }

    #[test]
    fn invalid_bounds() {
        let spec = desk_network(3);
        assert!(default_schedule(&spec, 2, 8).is_err());
        assert!(default_schedule(&spec, 9, 2).is_err());
        assert!(default_schedule(&spec, 8, 1).is_err());
    }

    #[test]
    fn exempt_layers_get_full_precision() {
        let spec = desk_network(3);
        let s = default_schedule(&spec, 8, 2).unwrap();
        let sparsity: BTreeMap<_, _> = [(3, 0.5), (5, 0.25), (7, 1.0)].into_iter().collect();
        let a = assign_bitwidths(&sparsity, &s).unwrap();
        assert_eq!(a.bits[&1], (32, 32));
        assert_eq!(a.bits[&11], (32, 32));
        assert_eq!(a.bits[&3], (6, 6));
        assert!(assign_bitwidths(&BTreeMap::new(), &s).is_err());
        let zero: BTreeMap<_, _> = [(3, 0.0), (5, 0.25), (7, 1.0)].into_iter().collect();
        assert!(assign_bitwidths(&zero, &s).is_err());
    }

    #[test]
    fn weight_quantizer_cases() {
        let q = quantize_weights(&[0.5f64, -1.0], 2, 1.0);
        assert_eq!(q, vec![0.5, -1.0]);
        assert_eq!(quantize_weights(&[0.0f64], 4, 0.3), vec![0.0]);
        assert_eq!(quantize_weights(&[0.0f64, 0.0], 4, 0.0), vec![0.0, 0.0]);
    }

    #[test]
    fn activation_quantizer_cases() {
        assert_eq!(quantize_activations(&[-0.5f64, 1.7, 0.3], 2), vec![0.0, 1.0, 0.25]);
    }
}
