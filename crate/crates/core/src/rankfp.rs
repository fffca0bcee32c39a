//! Filter property: the average numerical rank of each filter's
//! post-activation feature maps over sampled images.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::engine::{forward, Exec};
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::spec::{LayerId, NetworkSpec};
use crate::tensor::Tensor;

pub const DEFAULT_REL_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_BATCHES: usize = 6;
pub const DEFAULT_BATCH_SIZE: usize = 16;

const JACOBI_SWEEPS: usize = 60;
const JACOBI_EPS: f64 = 1e-15;

/// Singular values of a row-major `rows x cols` matrix, descending.
///
/// One-sided Jacobi rotations orthogonalize the columns of the orientation
/// with fewer columns; the final column norms are the singular values.
pub fn singular_values(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    assert_eq!(data.len(), rows * cols, "matrix data length");
    // store as column vectors over the longer dimension
    let (n, m) = if cols <= rows { (cols, rows) } else { (rows, cols) };
    let mut columns: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..m).map(|i| if cols <= rows { data[i * cols + j] } else { data[j * cols + i] }).collect())
        .collect();
    for _ in 0..JACOBI_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = columns[p]
                    .iter()
                    .zip(&columns[q])
                    .fold((0.0, 0.0, 0.0), |(a, b, g), (&x, &y)| (a + x * x, b + y * y, g + x * y));
                if gamma == 0.0 || gamma.abs() <= JACOBI_EPS * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (left, right) = columns.split_at_mut(q);
                for (x, y) in left[p].iter_mut().zip(right[0].iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = columns.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Number of singular values strictly above `rel_tolerance` times the
/// largest one. A zero matrix has rank 0.
pub fn numerical_rank(matrix: &Tensor<f64>, rel_tolerance: f64) -> Result<usize> {
    let [rows, cols] = matrix.shape() else {
        return Err(Error::shape(format!("numerical rank needs a 2-D matrix, got shape {:?}", matrix.shape())));
    };
    if !(rel_tolerance > 0.0) {
        return Err(Error::validation(format!("rank tolerance must be positive, got {rel_tolerance}")));
    }
    if !matrix.all_finite() {
        return Err(Error::NonFinite("matrix passed to numerical rank".into()));
    }
    Ok(rank_of(matrix.data(), *rows, *cols, rel_tolerance))
}

fn rank_of(data: &[f64], rows: usize, cols: usize, rel_tolerance: f64) -> usize {
    let sv = singular_values(data, rows, cols);
    match sv.first() {
        Some(&top) if top > 0.0 => sv.iter().filter(|&&s| s > rel_tolerance * top).count(),
        _ => 0,
    }
}

/// Per-filter average feature-map rank for every prunable layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterPropertyTable {
    pub values: BTreeMap<LayerId, Vec<f64>>,
    pub sample_count: usize,
    pub tolerance: f64,
}

impl FilterPropertyTable {
    pub fn check(&self, spec: &NetworkSpec) -> Result<()> {
        let topo = spec.topology()?;
        let expected = spec.prunable_ids();
        if self.values.keys().copied().collect::<Vec<_>>() != expected {
            return Err(Error::validation(format!(
                "filter property table covers layers {:?}, network prunes {:?}",
                self.values.keys().collect::<Vec<_>>(),
                expected
            )));
        }
        for (&id, fp) in &self.values {
            let (c, h, w) = topo.output_of(id).map_dims();
            if fp.len() != c {
                return Err(Error::validation(format!("layer {id}: {} filter properties for {c} filters", fp.len())));
            }
            let cap = h.min(w) as f64;
            if let Some(bad) = fp.iter().find(|&&v| !(0.0..=cap).contains(&v)) {
                return Err(Error::validation(format!("layer {id}: filter property {bad} outside [0, {cap}]")));
            }
        }
        if self.sample_count == 0 || !(self.tolerance > 0.0) {
            return Err(Error::validation("sample count and tolerance must be positive"));
        }
        Ok(())
    }

    /// Smallest and largest value over all filters of all layers.
    pub fn range(&self) -> (f64, f64) {
        self.values.values().flatten().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn to_json(&self) -> String {
        let mut map = Map::new();
        for (id, fp) in &self.values {
            map.insert(id.to_string(), Value::from(fp.clone()));
        }
        map.insert("sample_count".into(), Value::from(self.sample_count));
        map.insert("tolerance".into(), Value::from(self.tolerance));
        serde_json::to_string_pretty(&Value::Object(map)).expect("serializable")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let Value::Object(map) = serde_json::from_str::<Value>(text)? else {
            return Err(Error::format("filter property table must be a JSON object"));
        };
        let mut values = BTreeMap::new();
        let mut sample_count = None;
        let mut tolerance = None;
        for (key, value) in map {
            match key.as_str() {
                "sample_count" => {
                    sample_count = Some(
                        value
                            .as_u64()
                            .filter(|&n| n > 0)
                            .ok_or_else(|| Error::format("sample_count must be a positive integer"))?
                            as usize,
                    )
                }
                "tolerance" => {
                    tolerance = Some(
                        value
                            .as_f64()
                            .filter(|&t| t > 0.0)
                            .ok_or_else(|| Error::format("tolerance must be a positive number"))?,
                    )
                }
                _ => {
                    let id: LayerId = key.parse().map_err(|_| Error::format(format!("unexpected key {key:?}")))?;
                    let fp: Vec<f64> =
                        serde_json::from_value(value).map_err(|e| Error::format(format!("layer {id}: {e}")))?;
                    if fp.iter().any(|v| !v.is_finite() || *v < 0.0) {
                        return Err(Error::format(format!(
                            "layer {id}: filter properties must be finite and nonnegative"
                        )));
                    }
                    values.insert(id, fp);
                }
            }
        }
        Ok(Self {
            values,
            sample_count: sample_count.ok_or_else(|| Error::format("missing sample_count"))?,
            tolerance: tolerance.ok_or_else(|| Error::format("missing tolerance"))?,
        })
    }
}

/// Average rank over every image of every batch, on the dense network.
pub fn average_rank(
    spec: &NetworkSpec,
    state: &ModelState,
    batches: &[Tensor<f32>],
    rel_tolerance: f64,
) -> Result<FilterPropertyTable> {
    average_rank_with(spec, state, batches, rel_tolerance, Exec::dense())
}

/// As [`average_rank`], with masked filters (and quantization, if any)
/// applied as in `exec`.
pub fn average_rank_with(
    spec: &NetworkSpec,
    state: &ModelState,
    batches: &[Tensor<f32>],
    rel_tolerance: f64,
    exec: Exec<'_>,
) -> Result<FilterPropertyTable> {
    if batches.is_empty() {
        return Err(Error::validation("average rank needs at least one batch"));
    }
    if !(rel_tolerance > 0.0) {
        return Err(Error::validation(format!("rank tolerance must be positive, got {rel_tolerance}")));
    }
    let mut sums: BTreeMap<LayerId, Vec<u64>> = BTreeMap::new();
    let mut images = 0usize;
    for batch in batches {
        let out = forward(spec, state, batch, exec, true)?;
        let maps = out.feature_maps.expect("captured");
        for (id, map) in maps {
            let &[n, c, h, w] = map.shape() else { unreachable!() };
            let ranks: Vec<u64> = (0..n * c)
                .into_par_iter()
                .map(|k| {
                    let plane: Vec<f64> = map.data()[k * h * w..(k + 1) * h * w].iter().map(|&v| v as f64).collect();
                    rank_of(&plane, h, w, rel_tolerance) as u64
                })
                .collect();
            let acc = sums.entry(id).or_insert_with(|| vec![0; c]);
            for (k, r) in ranks.into_iter().enumerate() {
                acc[k % c] += r;
            }
        }
        images += batch.shape()[0];
    }
    let values =
        sums.into_iter().map(|(id, s)| (id, s.into_iter().map(|r| r as f64 / images as f64).collect())).collect();
    Ok(FilterPropertyTable { values, sample_count: images, tolerance: rel_tolerance })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerStability {
    pub spearman: f64,
    pub max_rel_diff: f64,
}

/// Agreement between two tables computed from different images.
pub fn stability_report(a: &FilterPropertyTable, b: &FilterPropertyTable) -> Result<BTreeMap<LayerId, LayerStability>> {
    if a.values.keys().ne(b.values.keys()) {
        return Err(Error::shape("stability report needs tables over the same layers"));
    }
    let mut out = BTreeMap::new();
    for (id, va) in &a.values {
        let vb = &b.values[id];
        if va.len() != vb.len() {
            return Err(Error::shape(format!("layer {id}: {} vs {} filters", va.len(), vb.len())));
        }
        let max_rel_diff = va.iter().zip(vb).map(|(x, y)| (x - y).abs() / x.max(*y).max(1.0)).fold(0.0, f64::max);
        out.insert(*id, LayerStability { spearman: spearman(va, vb), max_rel_diff });
    }
    Ok(out)
}

/// Average ranks (1-based), ties sharing the mean of their positions.
fn fractional_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start;
        while end + 1 < idx.len() && v[idx[end + 1]] == v[idx[start]] {
            end += 1;
        }
        let mean = (start + end) as f64 / 2.0 + 1.0;
        for &i in &idx[start..=end] {
            ranks[i] = mean;
        }
        start = end + 1;
    }
    ranks
}

/// Spearman correlation: Pearson correlation of the fractional ranks.
/// Two constant vectors agree perfectly (1); one constant vector carries
/// no ordering to agree with (0).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "spearman inputs differ in length");
    let (ra, rb) = (fractional_ranks(a), fractional_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    match (va > 0.0, vb > 0.0) {
        (true, true) => cov / (va * vb).sqrt(),
        (false, false) => 1.0,
        _ => 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;
    use crate::spec::desk_network;

    fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn identity_and_outer_product() {
        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 5] = 1.0;
        }
        assert_eq!(numerical_rank(&mat(4, 4, eye), 1e-6).unwrap(), 4);
        let (u, v) = ([1.0, -2.0, 3.0], [0.5, 4.0, -1.0, 2.0, 7.0]);
        let outer = u.iter().flat_map(|a| v.iter().map(move |b| a * b)).collect();
        assert_eq!(numerical_rank(&mat(3, 5, outer), 1e-6).unwrap(), 1);
        assert_eq!(numerical_rank(&mat(2, 3, vec![0.0; 6]), 1e-6).unwrap(), 0);
    }

    #[test]
    fn singular_values_of_diagonal_and_wide() {
        let sv = singular_values(&[3.0, 0.0, 0.0, -5.0], 2, 2);
        assert!((sv[0] - 5.0).abs() < 1e-12 && (sv[1] - 3.0).abs() < 1e-12);
        // [[1, 1, 0], [0, 0, 2]] has singular values 2 and sqrt(2)
        let sv = singular_values(&[1.0, 1.0, 0.0, 0.0, 0.0, 2.0], 2, 3);
        assert!((sv[0] - 2.0).abs() < 1e-12 && (sv[1] - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(numerical_rank(&mat(1, 2, vec![1.0, f64::NAN]), 1e-6).is_err());
    }

    #[test]
    fn spearman_cases() {
        let a = [1.0, 3.0, 2.0, 5.0];
        assert_eq!(spearman(&a, &a), 1.0);
        let rev: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((spearman(&a, &rev) + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&[2.0, 2.0], &[1.0, 1.0]), 1.0);
        assert_eq!(spearman(&[2.0, 2.0], &[1.0, 3.0]), 0.0);
        assert_eq!(fractional_ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn zero_filter_has_zero_property_and_bounds_hold() {
        let spec = desk_network(3);
        let mut state = init_model(&spec, 1).unwrap();
        let w = state.params.get_mut(&3).unwrap();
        let per = w.weight.len() / 16;
        w.weight.data_mut()[2 * per..3 * per].fill(0.0);
        w.bias.data_mut()[2] = 0.0;
        let batch =
            Tensor::new(vec![2, 3, 16, 16], (0..1536).map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0).collect()).unwrap();
        let fp = average_rank(&spec, &state, &[batch], DEFAULT_REL_TOLERANCE).unwrap();
        assert_eq!(fp.values[&3][2], 0.0);
        assert_eq!(fp.sample_count, 2);
        fp.check(&spec).unwrap();
    }

    #[test]
    fn json_round_trip() {
        let fp = FilterPropertyTable {
            values: [(1, vec![3.5, 0.0]), (3, vec![8.0])].into_iter().collect(),
            sample_count: 96,
            tolerance: 1e-6,
        };
        let text = fp.to_json();
        assert!(text.contains("\"sample_count\": 96"));
        assert_eq!(FilterPropertyTable::from_json(&text).unwrap(), fp);
        assert!(FilterPropertyTable::from_json("{\"x\": [1]}").is_err());
        assert!(FilterPropertyTable::from_json("{\"1\": [1]}").is_err());
    }
}
