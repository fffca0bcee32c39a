//! Multiply-accumulate and bit-operation accounting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::picplan::CompressionPlan;
use crate::quantize::FULL_PRECISION_BITS;
use crate::spec::{ActShape, LayerId, LayerKind, LayerSpec, NetworkSpec, Topology};

/// Bit operations of one conv/fc layer:
/// `kept_in * kept_out * K^2 * out_h * out_w * b_w * b_a`.
/// A fully connected layer is a 1x1 convolution over a 1x1 map.
pub fn layer_bops(layer: &LayerSpec, kept_in: u64, kept_out: u64, b_w: u32, b_a: u32, out_h: u64, out_w: u64) -> u64 {
    let k = match layer.kind {
        LayerKind::Conv { kernel, .. } => kernel as u64,
        _ => 1,
    };
    kept_in * kept_out * k * k * out_h * out_w * b_w as u64 * b_a as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: LayerId,
    pub kept_in: u64,
    pub kept_out: u64,
    pub n_w: u32,
    pub n_a: u32,
    pub flops: u64,
    pub bops: u64,
    pub baseline_flops: u64,
    pub baseline_bops: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub baseline: Option<f64>,
    pub pruned: Option<f64>,
    pub act_quantized: Option<f64>,
    pub fully_quantized: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub baseline_flops: u64,
    pub baseline_bops: u64,
    pub flops: u64,
    pub bops: u64,
    pub flops_ratio: f64,
    pub bops_ratio: f64,
    pub accuracy: AccuracyReport,
}

/// Geometry of one parameterized layer needed for cost evaluation.
#[derive(Debug, Clone)]
pub(crate) struct CostLayer {
    pub id: LayerId,
    pub spec: LayerSpec,
    pub in_total: u64,
    pub out_total: u64,
    pub out_h: u64,
    pub out_w: u64,
    /// Prunable conv whose filters feed this layer, and its filter count.
    pub producer: Option<(LayerId, u64)>,
}

pub(crate) fn cost_layers(spec: &NetworkSpec, topo: &Topology) -> Vec<CostLayer> {
    spec.parameterized()
        .map(|l| {
            let (in_total, out_total) = match l.kind {
                LayerKind::Conv { in_channels, out_channels, .. } => (in_channels as u64, out_channels as u64),
                LayerKind::Fc { in_features, out_features } => (in_features as u64, out_features as u64),
                _ => unreachable!(),
            };
            let (out_h, out_w) = match topo.output_of(l.id) {
                ActShape::Map { h, w, .. } => (h as u64, w as u64),
                ActShape::Flat(_) => (1, 1),
            };
            let producer = topo.input_producer[&l.id].map(|p| (p, spec.layer(p).unwrap().out_units().unwrap() as u64));
            CostLayer { id: l.id, spec: l.clone(), in_total, out_total, out_h, out_w, producer }
        })
        .collect()
}

impl CostLayer {
    /// Input channels/features still alive when the producer keeps `kept` filters.
    pub fn kept_in(&self, producer_kept: impl Fn(LayerId) -> u64) -> u64 {
        match self.producer {
            Some((p, total)) => self.in_total * producer_kept(p) / total,
            None => self.in_total,
        }
    }

    pub fn bops(&self, kept_in: u64, kept_out: u64, bw: u32, ba: u32) -> u64 {
        layer_bops(&self.spec, kept_in, kept_out, bw, ba, self.out_h, self.out_w)
    }
}

/// Baseline (unpruned, 32/32) bit operations of the network.
pub fn baseline_bops(spec: &NetworkSpec) -> Result<u64> {
    let topo = spec.topology()?;
    Ok(cost_layers(spec, &topo)
        .iter()
        .map(|l| l.bops(l.in_total, l.out_total, FULL_PRECISION_BITS, FULL_PRECISION_BITS))
        .sum())
}

/// Cost of running `spec` under `plan`, against the 32/32 unpruned baseline.
pub fn model_cost(spec: &NetworkSpec, plan: &CompressionPlan) -> Result<CostReport> {
    plan.check(spec)?;
    let topo = spec.topology()?;
    let layers = cost_layers(spec, &topo);
    let kept = |id: LayerId| plan.layers[&id].kept_count() as u64;
    let mut out = Vec::with_capacity(layers.len());
    for l in &layers {
        let lp = &plan.layers[&l.id];
        let (n_w, n_a) = if lp.exempt { (FULL_PRECISION_BITS, FULL_PRECISION_BITS) } else { (lp.n_w, lp.n_a) };
        let kept_in = l.kept_in(kept);
        let kept_out = kept(l.id);
        out.push(LayerCost {
            layer: l.id,
            kept_in,
            kept_out,
            n_w,
            n_a,
            flops: l.bops(kept_in, kept_out, 1, 1),
            bops: l.bops(kept_in, kept_out, n_w, n_a),
            baseline_flops: l.bops(l.in_total, l.out_total, 1, 1),
            baseline_bops: l.bops(l.in_total, l.out_total, FULL_PRECISION_BITS, FULL_PRECISION_BITS),
        });
    }
    let sum = |f: fn(&LayerCost) -> u64| out.iter().map(f).sum::<u64>();
    let (baseline_flops, baseline_bops) = (sum(|c| c.baseline_flops), sum(|c| c.baseline_bops));
    let (flops, bops) = (sum(|c| c.flops), sum(|c| c.bops));
    if flops == 0 || bops == 0 {
        return Err(Error::validation("plan leaves the network with zero cost"));
    }
    Ok(CostReport {
        layers: out,
        baseline_flops,
        baseline_bops,
        flops,
        bops,
        flops_ratio: baseline_flops as f64 / flops as f64,
        bops_ratio: baseline_bops as f64 / bops as f64,
        accuracy: AccuracyReport::default(),
    })
}

impl CostReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
