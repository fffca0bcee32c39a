//! Global filter importance from per-layer affine transforms of the filter
//! property, and budget-driven derivation of pruning masks and bitwidths.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cost::{cost_layers, CostLayer};
use crate::error::{Error, Result};
use crate::quantize::{BitwidthSchedule, FULL_PRECISION_BITS, MAX_BITS, MIN_BITS};
use crate::rankfp::FilterPropertyTable;
use crate::spec::{LayerId, NetworkSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AbPair {
    pub layer: LayerId,
    pub a: f64,
    pub b: f64,
}

/// Per-layer deformation scale `a` and relative shift `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbVector {
    pub pairs: Vec<AbPair>,
}

impl AbVector {
    /// `a = 1, b = 0` for every prunable layer.
    pub fn identity(spec: &NetworkSpec) -> Self {
        Self { pairs: spec.prunable_ids().into_iter().map(|layer| AbPair { layer, a: 1.0, b: 0.0 }).collect() }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn check(&self, spec: &NetworkSpec) -> Result<()> {
        let ids: Vec<LayerId> = self.pairs.iter().map(|p| p.layer).collect();
        if ids != spec.prunable_ids() {
            return Err(Error::validation(format!(
                "a-b vector covers layers {ids:?}, network prunes {:?}",
                spec.prunable_ids()
            )));
        }
        if self.pairs.iter().any(|p| !p.a.is_finite() || !p.b.is_finite()) {
            return Err(Error::validation("a-b vector contains non-finite values"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("a-b vector serializes")
    }
}

/// Importance of every prunable filter plus the global descending ranking.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceTable {
    pub values: BTreeMap<LayerId, Vec<f64>>,
    /// Most important first; ties go to the smaller (layer id, filter index).
    pub order: Vec<(LayerId, usize)>,
}

/// `I = a_l * FP + b_l` per filter, ranked globally.
pub fn importance(fp: &FilterPropertyTable, ab: &AbVector) -> Result<ImportanceTable> {
    if fp.values.len() != ab.pairs.len() || !ab.pairs.iter().all(|p| fp.values.contains_key(&p.layer)) {
        return Err(Error::validation(format!(
            "filter-property table covers {:?}, a-b vector covers {:?}",
            fp.values.keys().collect::<Vec<_>>(),
            ab.pairs.iter().map(|p| p.layer).collect::<Vec<_>>()
        )));
    }
    let values: BTreeMap<LayerId, Vec<f64>> =
        ab.pairs.iter().map(|p| (p.layer, fp.values[&p.layer].iter().map(|&f| p.a * f + p.b).collect())).collect();
    let mut order: Vec<(LayerId, usize)> =
        values.iter().flat_map(|(&l, v)| (0..v.len()).map(move |i| (l, i))).collect();
    order.sort_by(|x, y| values[&y.0][y.1].total_cmp(&values[&x.0][x.1]).then_with(|| x.cmp(y)));
    Ok(ImportanceTable { values, order })
}

/// Compression budget unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Currency {
    /// Pruning and mixed-precision quantization, measured in bit operations.
    #[default]
    Joint,
    /// Pruning only; bitwidths pinned at 32 so the ratio is a FLOPs ratio.
    PruneOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerPlan {
    pub keep: Vec<bool>,
    /// Fraction of filters kept.
    pub sparsity: f64,
    pub n_w: u32,
    pub n_a: u32,
    pub exempt: bool,
}

impl LayerPlan {
    pub fn kept_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn keep_indices(&self) -> Vec<usize> {
        self.keep.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i).collect()
    }

    pub fn is_quantized(&self) -> bool {
        !self.exempt && self.n_w < FULL_PRECISION_BITS
    }
}

/// Keep-masks and bitwidths for every conv/fc layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressionPlan {
    pub layers: BTreeMap<LayerId, LayerPlan>,
    pub currency: Currency,
    pub requested_ratio: f64,
    pub achieved_ratio: f64,
    pub achieved_bops: u64,
}

impl CompressionPlan {
    /// Keep everything, full precision.
    pub fn identity(spec: &NetworkSpec) -> Result<Self> {
        let topo = spec.topology()?;
        let layers = spec
            .parameterized()
            .map(|l| {
                let n = l.out_units().unwrap();
                (
                    l.id,
                    LayerPlan {
                        keep: vec![true; n],
                        sparsity: 1.0,
                        n_w: FULL_PRECISION_BITS,
                        n_a: FULL_PRECISION_BITS,
                        exempt: false,
                    },
                )
            })
            .collect();
        let baseline: u64 = cost_layers(spec, &topo)
            .iter()
            .map(|l| l.bops(l.in_total, l.out_total, FULL_PRECISION_BITS, FULL_PRECISION_BITS))
            .sum();
        Ok(Self {
            layers,
            currency: Currency::PruneOnly,
            requested_ratio: 1.0,
            achieved_ratio: 1.0,
            achieved_bops: baseline,
        })
    }

    pub fn check(&self, spec: &NetworkSpec) -> Result<()> {
        spec.validate()?;
        let mut problems = Vec::new();
        for layer in spec.parameterized() {
            let Some(lp) = self.layers.get(&layer.id) else {
                problems.push(format!("layer {}: missing from plan", layer.id));
                continue;
            };
            let n = layer.out_units().unwrap();
            if lp.keep.len() != n {
                problems.push(format!("layer {}: mask has {} entries, layer has {n} filters", layer.id, lp.keep.len()));
                continue;
            }
            let kept = lp.kept_count();
            if kept == 0 {
                problems.push(format!("layer {}: every filter pruned", layer.id));
            }
            if !layer.prunable && kept != n {
                problems.push(format!("layer {}: not prunable but plan prunes it", layer.id));
            }
            if (lp.sparsity - kept as f64 / n as f64).abs() > 1e-12 {
                problems.push(format!("layer {}: sparsity {} disagrees with mask", layer.id, lp.sparsity));
            }
            let bits_ok = |b: u32| (MIN_BITS..=MAX_BITS).contains(&b) || b == FULL_PRECISION_BITS;
            if !bits_ok(lp.n_w) || !bits_ok(lp.n_a) {
                problems.push(format!("layer {}: bitwidths ({}, {}) invalid", layer.id, lp.n_w, lp.n_a));
            }
            if lp.exempt && (lp.n_w != FULL_PRECISION_BITS || lp.n_a != FULL_PRECISION_BITS) {
                problems.push(format!("layer {}: exempt layer must stay at 32 bits", layer.id));
            }
        }
        for id in self.layers.keys() {
            if !spec.layer(*id).is_some_and(|l| l.is_parameterized()) {
                problems.push(format!("layer {id}: plan entry for a layer without parameters"));
            }
        }
        for group in &spec.residual_groups {
            let masks: Vec<_> = group.iter().filter_map(|id| self.layers.get(id).map(|l| &l.keep)).collect();
            if masks.windows(2).any(|w| w[0] != w[1]) {
                problems.push(format!("residual group {group:?}: members carry different masks"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::validation(problems.join("; ")))
        }
    }

    /// Sets of kept (layer, filter) pairs, for nesting comparisons.
    pub fn kept_set(&self) -> std::collections::BTreeSet<(LayerId, usize)> {
        self.layers.iter().flat_map(|(&l, lp)| lp.keep_indices().into_iter().map(move |i| (l, i))).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&PlanFile::from(self)).expect("plan serializes")
    }

    pub fn from_json(text: &str, spec: &NetworkSpec) -> Result<Self> {
        let file: PlanFile = serde_json::from_str(text)?;
        let plan = file.into_plan()?;
        plan.check(spec)?;
        Ok(plan)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanLayerFile {
    filters: usize,
    keep_indices: Vec<usize>,
    sparsity: f64,
    n_w: u32,
    n_a: u32,
    exempt: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanFile {
    mode: Currency,
    requested_ratio: f64,
    achieved_ratio: f64,
    achieved_bops: u64,
    layers: BTreeMap<LayerId, PlanLayerFile>,
}

impl From<&CompressionPlan> for PlanFile {
    fn from(plan: &CompressionPlan) -> Self {
        PlanFile {
            mode: plan.currency,
            requested_ratio: plan.requested_ratio,
            achieved_ratio: plan.achieved_ratio,
            achieved_bops: plan.achieved_bops,
            layers: plan
                .layers
                .iter()
                .map(|(&id, lp)| {
                    (
                        id,
                        PlanLayerFile {
                            filters: lp.keep.len(),
                            keep_indices: lp.keep_indices(),
                            sparsity: lp.sparsity,
                            n_w: lp.n_w,
                            n_a: lp.n_a,
                            exempt: lp.exempt,
                        },
                    )
                })
                .collect(),
        }
    }
}

impl PlanFile {
    fn into_plan(self) -> Result<CompressionPlan> {
        let mut layers = BTreeMap::new();
        for (id, lf) in self.layers {
            if lf.filters == 0 || lf.filters > 1 << 20 {
                return Err(Error::validation(format!("layer {id}: implausible filter count {}", lf.filters)));
            }
            let mut keep = vec![false; lf.filters];
            for i in lf.keep_indices {
                match keep.get_mut(i) {
                    Some(k) if !*k => *k = true,
                    Some(_) => return Err(Error::validation(format!("layer {id}: filter {i} listed twice"))),
                    None => return Err(Error::validation(format!("layer {id}: keep index {i} out of range"))),
                }
            }
            layers.insert(id, LayerPlan { keep, sparsity: lf.sparsity, n_w: lf.n_w, n_a: lf.n_a, exempt: lf.exempt });
        }
        Ok(CompressionPlan {
            layers,
            currency: self.mode,
            requested_ratio: self.requested_ratio,
            achieved_ratio: self.achieved_ratio,
            achieved_bops: self.achieved_bops,
        })
    }
}

/// Minimum kept filters per prunable layer: `max(1, ceil(0.0625 * filters))`.
pub fn default_floors(spec: &NetworkSpec) -> BTreeMap<LayerId, usize> {
    spec.prunable_ids()
        .into_iter()
        .map(|id| {
            let n = spec.layer(id).unwrap().out_units().unwrap();
            (id, ((0.0625 * n as f64).ceil() as usize).max(1))
        })
        .collect()
}

/// Kept fraction per layer.
pub fn layer_sparsity(plan: &CompressionPlan) -> BTreeMap<LayerId, f64> {
    plan.layers.iter().map(|(&id, lp)| (id, lp.kept_count() as f64 / lp.keep.len() as f64)).collect()
}

/// Total importance of the pruned filters.
pub fn objective_value(importance: &ImportanceTable, plan: &CompressionPlan) -> Result<f64> {
    let mut total = 0.0;
    for (id, values) in &importance.values {
        let lp = plan
            .layers
            .get(id)
            .filter(|lp| lp.keep.len() == values.len())
            .ok_or_else(|| Error::validation(format!("layer {id}: plan does not match importance table")))?;
        total += values.iter().zip(&lp.keep).filter(|(_, &k)| !k).map(|(v, _)| v).sum::<f64>();
    }
    Ok(total)
}

/// One greedy removal: filter `index` of every layer in `layers`.
struct Unit {
    layers: Vec<LayerId>,
    index: usize,
    importance: f64,
}

/// Incremental cost model used inside the greedy loop.
struct Budgeter<'a> {
    layers: Vec<CostLayer>,
    schedule: &'a BitwidthSchedule,
    currency: Currency,
    totals: BTreeMap<LayerId, usize>,
}

impl Budgeter<'_> {
    fn bits(&self, id: LayerId, kept: &BTreeMap<LayerId, usize>) -> Result<(u32, u32)> {
        match self.currency {
            Currency::PruneOnly => Ok((FULL_PRECISION_BITS, FULL_PRECISION_BITS)),
            Currency::Joint => {
                let s = kept.get(&id).map_or(1.0, |&k| k as f64 / self.totals[&id] as f64);
                self.schedule.bits_for(id, s)
            }
        }
    }

    fn bops(&self, kept: &BTreeMap<LayerId, usize>) -> Result<u64> {
        let mut total = 0;
        for l in &self.layers {
            let k = |id: LayerId| kept.get(&id).map_or(self.totals[&id] as u64, |&v| v as u64);
            let (bw, ba) = self.bits(l.id, kept)?;
            total += l.bops(l.kept_in(k), k(l.id), bw, ba);
        }
        Ok(total)
    }
}

/// Greedy budget-driven pruning: filters are removed least-important first
/// (residual groups jointly, by summed importance), skipping layers already
/// at their floor, until the compression ratio reaches `budget_ratio`.
/// Bitwidths follow the sparsity of each layer after every removal.
pub fn derive_masks(
    importance: &ImportanceTable,
    spec: &NetworkSpec,
    schedule: &BitwidthSchedule,
    budget_ratio: f64,
    floors: &BTreeMap<LayerId, usize>,
    currency: Currency,
) -> Result<CompressionPlan> {
    if !(budget_ratio >= 1.0) || !budget_ratio.is_finite() {
        return Err(Error::validation(format!("budget ratio must be >= 1, got {budget_ratio}")));
    }
    let topo = spec.topology()?;
    schedule.check(spec)?;
    let prunable = spec.prunable_ids();
    let totals: BTreeMap<LayerId, usize> = spec.parameterized().map(|l| (l.id, l.out_units().unwrap())).collect();
    for &id in &prunable {
        let floor = *floors.get(&id).ok_or_else(|| Error::validation(format!("layer {id}: no floor given")))?;
        if floor < 1 || floor > totals[&id] {
            return Err(Error::validation(format!("layer {id}: floor {floor} outside 1..={}", totals[&id])));
        }
        match importance.values.get(&id) {
            Some(v) if v.len() == totals[&id] => {}
            _ => return Err(Error::validation(format!("layer {id}: importance table does not match layer"))),
        }
    }
    if importance.values.len() != prunable.len() {
        return Err(Error::validation("importance table covers layers the network does not prune"));
    }

    // removal units, least important first
    let mut units = Vec::new();
    let mut grouped = std::collections::BTreeSet::new();
    for group in &spec.residual_groups {
        let mut members = group.clone();
        members.sort_unstable();
        grouped.extend(members.iter().copied());
        for index in 0..totals[&members[0]] {
            let importance = members.iter().map(|m| importance.values[m][index]).sum();
            units.push(Unit { layers: members.clone(), index, importance });
        }
    }
    for &id in prunable.iter().filter(|id| !grouped.contains(id)) {
        for (index, &importance) in importance.values[&id].iter().enumerate() {
            units.push(Unit { layers: vec![id], index, importance });
        }
    }
    units.sort_by(|x, y| {
        x.importance.total_cmp(&y.importance).then_with(|| (y.layers[0], y.index).cmp(&(x.layers[0], x.index)))
    });

    let budgeter = Budgeter { layers: cost_layers(spec, &topo), schedule, currency, totals: totals.clone() };
    let baseline: u64 =
        budgeter.layers.iter().map(|l| l.bops(l.in_total, l.out_total, FULL_PRECISION_BITS, FULL_PRECISION_BITS)).sum();
    let mut kept: BTreeMap<LayerId, usize> = prunable.iter().map(|&id| (id, totals[&id])).collect();
    let mut masks: BTreeMap<LayerId, Vec<bool>> = totals.iter().map(|(&id, &n)| (id, vec![true; n])).collect();

    let mut bops = budgeter.bops(&kept)?;
    let mut ratio = baseline as f64 / bops as f64;
    if ratio < budget_ratio {
        for unit in &units {
            if unit.layers.iter().any(|l| kept[l] <= floors[l]) {
                continue;
            }
            for l in &unit.layers {
                *kept.get_mut(l).unwrap() -= 1;
                masks.get_mut(l).unwrap()[unit.index] = false;
            }
            bops = budgeter.bops(&kept)?;
            ratio = baseline as f64 / bops as f64;
            if ratio >= budget_ratio {
                break;
            }
        }
    }
    if ratio < budget_ratio {
        return Err(Error::Infeasible { requested: budget_ratio, max_achievable: ratio });
    }

    let mut layers = BTreeMap::new();
    for (id, keep) in masks {
        let (n_w, n_a) = budgeter.bits(id, &kept)?;
        let sparsity = keep.iter().filter(|&&k| k).count() as f64 / keep.len() as f64;
        let exempt = schedule.exempt.contains(&id);
        layers.insert(id, LayerPlan { keep, sparsity, n_w, n_a, exempt });
    }
    Ok(CompressionPlan { layers, currency, requested_ratio: budget_ratio, achieved_ratio: ratio, achieved_bops: bops })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantize::default_schedule;
    use crate::spec::desk_network;

    fn table(values: &[(LayerId, Vec<f64>)]) -> FilterPropertyTable {
        FilterPropertyTable { values: values.iter().cloned().collect(), sample_count: 1, tolerance: 1e-6 }
    }

    fn ab(pairs: &[(LayerId, f64, f64)]) -> AbVector {
        AbVector { pairs: pairs.iter().map(|&(layer, a, b)| AbPair { layer, a, b }).collect() }
    }

    #[test]
    fn affine_importance() {
        let t = importance(&table(&[(1, vec![5.2])]), &ab(&[(1, 2.0, -1.0)])).unwrap();
        assert!((t.values[&1][0] - 9.4).abs() < 1e-12);
    }

    #[test]
    fn identity_keeps_fp_order() {
        let fp = table(&[(1, vec![3.0, 1.0, 2.0]), (2, vec![0.5, 4.0])]);
        let t = importance(&fp, &ab(&[(1, 1.0, 0.0), (2, 1.0, 0.0)])).unwrap();
        let l1: Vec<usize> = t.order.iter().filter(|(l, _)| *l == 1).map(|&(_, i)| i).collect();
        assert_eq!(l1, vec![0, 2, 1]);
    }

    #[test]
    fn shift_dominates() {
        let fp = table(&[(1, vec![3.0, 1.0]), (2, vec![2.5])]);
        let t = importance(&fp, &ab(&[(1, 1.0, 0.0), (2, 1.0, 10.0)])).unwrap();
        assert_eq!(t.order[0], (2, 0));
    }

    #[test]
    fn ties_break_by_layer_then_index() {
        let fp = table(&[(1, vec![1.0, 1.0]), (2, vec![1.0])]);
        let t = importance(&fp, &ab(&[(1, 1.0, 0.0), (2, 1.0, 0.0)])).unwrap();
        assert_eq!(t.order, vec![(1, 0), (1, 1), (2, 0)]);
    }

    #[test]
    fn length_mismatch() {
        let fp = table(&[(1, vec![1.0])]);
        assert!(importance(&fp, &ab(&[(1, 1.0, 0.0), (2, 1.0, 0.0)])).is_err());
    }

    fn desk_importance() -> ImportanceTable {
        let spec = desk_network(3);
        let fp = table(
            &spec
                .prunable_ids()
                .into_iter()
                .map(|id| {
                    let n = spec.layer(id).unwrap().out_units().unwrap();
                    (id, (0..n).map(|i| ((i * 7 + id as usize * 3) % 11) as f64 * 0.5 + 1.0).collect())
                })
                .collect::<Vec<_>>(),
        );
        importance(&fp, &AbVector::identity(&spec)).unwrap()
    }

    #[test]
    fn unit_budget_keeps_everything() {
        let spec = desk_network(3);
        let s = default_schedule(&spec, 8, 8).unwrap();
        let plan =
            derive_masks(&desk_importance(), &spec, &s, 1.0, &default_floors(&spec), Currency::PruneOnly).unwrap();
        assert_eq!(plan.achieved_ratio, 1.0);
        assert!(plan.layers.values().all(|l| l.kept_count() == l.keep.len()));
    }

    #[test]
    fn infeasible_reports_max_ratio() {
        let spec = desk_network(3);
        let s = default_schedule(&spec, 8, 2).unwrap();
        let err =
            derive_masks(&desk_importance(), &spec, &s, 1e6, &default_floors(&spec), Currency::Joint).unwrap_err();
        match err {
            Error::Infeasible { max_achievable, .. } => assert!(max_achievable > 1.0 && max_achievable < 1e6),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn sparsity_values() {
        let spec = desk_network(3);
        let mut plan = CompressionPlan::identity(&spec).unwrap();
        let lp = plan.layers.get_mut(&3).unwrap();
        for k in lp.keep.iter_mut().skip(8) {
            *k = false;
        }
        let lp7 = plan.layers.get_mut(&7).unwrap();
        for k in lp7.keep.iter_mut().skip(2) {
            *k = false;
        }
        let lp1 = plan.layers.get_mut(&1).unwrap();
        for k in lp1.keep.iter_mut().skip(1) {
            *k = false;
        }
        let s = layer_sparsity(&plan);
        assert_eq!(s[&3], 0.5);
        assert_eq!(s[&5], 1.0);
        assert_eq!(s[&7], 0.0625);
        assert_eq!(s[&1], 0.0625);
    }

    #[test]
    fn objective_counts_removed_importance() {
        let spec = desk_network(3);
        let imp = desk_importance();
        let mut plan = CompressionPlan::identity(&spec).unwrap();
        assert_eq!(objective_value(&imp, &plan).unwrap(), 0.0);
        plan.layers.get_mut(&3).unwrap().keep[0] = false;
        assert_eq!(objective_value(&imp, &plan).unwrap(), imp.values[&3][0]);

        let two = ImportanceTable { values: [(1, vec![2.0, 5.0])].into_iter().collect(), order: vec![(1, 1), (1, 0)] };
        let mut tiny = CompressionPlan::identity(&spec).unwrap();
        tiny.layers.retain(|&id, _| id == 1);
        tiny.layers.get_mut(&1).unwrap().keep = vec![false, true];
        assert_eq!(objective_value(&two, &tiny).unwrap(), 2.0);
    }

    #[test]
    fn plan_json_round_trip() {
        let spec = desk_network(3);
        let s = default_schedule(&spec, 8, 2).unwrap();
        let plan = derive_masks(&desk_importance(), &spec, &s, 12.0, &default_floors(&spec), Currency::Joint).unwrap();
        let back = CompressionPlan::from_json(&plan.to_json(), &spec).unwrap();
        assert_eq!(plan, back);
    }

    #[test]
    fn plan_json_rejects_bad_indices() {
        let spec = desk_network(3);
        let plan = CompressionPlan::identity(&spec).unwrap();
        let mut doc: serde_json::Value = serde_json::from_str(&plan.to_json()).unwrap();
        doc["layers"]["3"]["keep_indices"][0] = 99.into();
        assert!(CompressionPlan::from_json(&doc.to_string(), &spec).is_err());
        doc["layers"]["3"]["keep_indices"][0] = 1.into();
        assert!(CompressionPlan::from_json(&doc.to_string(), &spec).is_err());
    }
}
