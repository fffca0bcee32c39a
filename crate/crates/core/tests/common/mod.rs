//! Fixtures and independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use num_rational::Ratio;
use picpq::model::{LayerParams, ModelState};
use picpq::picplan::{derive_masks, importance, objective_value, AbVector, CompressionPlan, Currency};
use picpq::quantize::{BitwidthSchedule, ScheduleConfig};
use picpq::rankfp::FilterPropertyTable;
use picpq::spec::{LayerKind, LayerSpec, NetworkSpec};
use picpq::tensor::Tensor;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Rank by Gaussian elimination over exact rationals.
pub fn exact_rank(rows: usize, cols: usize, entries: &[i64]) -> usize {
    let mut m: Vec<Vec<Ratio<i128>>> =
        (0..rows).map(|r| (0..cols).map(|c| Ratio::from_integer(entries[r * cols + c] as i128)).collect()).collect();
    let mut rank = 0;
    for col in 0..cols {
        let Some(pivot) = (rank..rows).find(|&r| m[r][col] != Ratio::from_integer(0)) else {
            continue;
        };
        m.swap(rank, pivot);
        for r in 0..rows {
            if r != rank && m[r][col] != Ratio::from_integer(0) {
                let f = m[r][col] / m[rank][col];
                let pivot_row = m[rank].clone();
                for (x, p) in m[r].iter_mut().zip(pivot_row).skip(col) {
                    *x -= p * f;
                }
            }
        }
        rank += 1;
    }
    rank
}

/// Two prunable 8-filter convs feeding a classifier.
pub fn two_layer_fixture() -> NetworkSpec {
    NetworkSpec {
        name: "two-layer".into(),
        input_shape: [2, 6, 6],
        layers: vec![
            LayerSpec::conv(1, 2, 8, 3, 1, 1),
            LayerSpec::simple(2, LayerKind::Relu),
            LayerSpec::conv(3, 8, 8, 3, 1, 1),
            LayerSpec::simple(4, LayerKind::Relu),
            LayerSpec::simple(5, LayerKind::Flatten),
            LayerSpec::fc(6, 8 * 36, 3),
        ],
        residual_groups: vec![],
        full_precision_layers: vec![],
    }
}

/// Random chain of 1..=3 convs (random width, kernel, stride, padding,
/// optional pooling) and one fc.
pub fn tiny_net(rng: &mut ChaCha8Rng) -> NetworkSpec {
    let convs = rng.random_range(1..=3usize);
    let mut c = rng.random_range(1..=2usize);
    let mut h = rng.random_range(5..=7usize);
    let input_shape = [c, h, h];
    let mut layers = Vec::new();
    let mut id = 1;
    for _ in 0..convs {
        let out = rng.random_range(1..=3usize);
        let k = if h >= 3 { *[1usize, 3].get(rng.random_range(0..2usize)).unwrap() } else { 1 };
        let pad = if k == 3 { rng.random_range(0..=1usize) } else { 0 };
        let stride = if h - k + 2 * pad >= 2 { rng.random_range(1..=2usize) } else { 1 };
        layers.push(LayerSpec::conv(id, c, out, k, stride, pad));
        h = (h + 2 * pad - k) / stride + 1;
        c = out;
        id += 1;
        layers.push(LayerSpec::simple(id, LayerKind::Relu));
        id += 1;
        if h >= 4 && rng.random_bool(0.4) {
            let avg = rng.random_bool(0.5);
            let kind = if avg {
                LayerKind::Avgpool { kernel: 2, stride: 2 }
            } else {
                LayerKind::Maxpool { kernel: 2, stride: 2 }
            };
            layers.push(LayerSpec::simple(id, kind));
            h = (h - 2) / 2 + 1;
            id += 1;
        }
    }
    layers.push(LayerSpec::simple(id, LayerKind::Flatten));
    id += 1;
    layers.push(LayerSpec::fc(id, c * h * h, rng.random_range(2..=3usize)));
    NetworkSpec { name: "tiny".into(), input_shape, layers, residual_groups: vec![], full_precision_layers: vec![] }
}

pub fn random_batch(spec: &NetworkSpec, n: usize, seed: u64) -> Tensor<f32> {
    let [c, h, w] = spec.input_shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![n, c, h, w], (0..n * c * h * w).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

/// The network with pruned filters deleted: each conv keeps only its kept
/// output filters and the input channels its producer kept.
pub fn shrink(spec: &NetworkSpec, state: &ModelState, plan: &CompressionPlan) -> (NetworkSpec, ModelState) {
    let mut out_spec = spec.clone();
    let mut params = BTreeMap::new();
    let mut prev_keep: Option<Vec<usize>> = None;
    let mut flat_hw = 1;
    let mut hw = spec.input_shape[1] * spec.input_shape[2];
    let mut h = spec.input_shape[1];
    for layer in out_spec.layers.iter_mut() {
        match &mut layer.kind {
            LayerKind::Conv { in_channels, out_channels, kernel, stride, padding } => {
                let p = &state.params[&layer.id];
                let keep: Vec<usize> = plan.layers[&layer.id].keep_indices();
                let ins: Vec<usize> = prev_keep.clone().unwrap_or_else(|| (0..*in_channels).collect());
                let kk = *kernel * *kernel;
                let mut w = Vec::new();
                for &o in &keep {
                    for &i in &ins {
                        let base = (o * *in_channels + i) * kk;
                        w.extend_from_slice(&p.weight.data()[base..base + kk]);
                    }
                }
                let b: Vec<f32> = keep.iter().map(|&o| p.bias.data()[o]).collect();
                params.insert(
                    layer.id,
                    LayerParams {
                        weight: Tensor::new(vec![keep.len(), ins.len(), *kernel, *kernel], w).unwrap(),
                        bias: Tensor::new(vec![keep.len()], b).unwrap(),
                    },
                );
                *in_channels = ins.len();
                *out_channels = keep.len();
                h = (h + 2 * *padding - *kernel) / *stride + 1;
                hw = h * h;
                prev_keep = Some(keep);
            }
            LayerKind::Maxpool { kernel, stride } | LayerKind::Avgpool { kernel, stride } => {
                h = (h - *kernel) / *stride + 1;
                hw = h * h;
            }
            LayerKind::Flatten => flat_hw = hw,
            LayerKind::Fc { in_features, out_features } => {
                let p = &state.params[&layer.id];
                let ins: Vec<usize> = match &prev_keep {
                    Some(k) => k.iter().flat_map(|&c| c * flat_hw..(c + 1) * flat_hw).collect(),
                    None => (0..*in_features).collect(),
                };
                let w: Vec<f32> = (0..*out_features)
                    .flat_map(|o| ins.iter().map(move |&i| (o, i)))
                    .map(|(o, i)| p.weight.data()[o * *in_features + i])
                    .collect();
                params.insert(
                    layer.id,
                    LayerParams {
                        weight: Tensor::new(vec![*out_features, ins.len()], w).unwrap(),
                        bias: p.bias.clone(),
                    },
                );
                *in_features = ins.len();
                prev_keep = None;
            }
            _ => {}
        }
    }
    (out_spec, ModelState { params, act_max: BTreeMap::new(), rng_seed: state.rng_seed })
}

/// tanh from a Taylor series for exp with argument halving; shares no code
/// with the library's `tanh`.
pub fn oracle_tanh(x: f64) -> f64 {
    if x.abs() > 20.0 {
        return x.signum();
    }
    let y = 2.0 * x / 1024.0;
    let (mut term, mut sum) = (1.0f64, 1.0f64);
    for k in 1..30 {
        term *= y / k as f64;
        sum += term;
    }
    let e2x = (0..10).fold(sum, |v, _| v * v);
    (e2x - 1.0) / (e2x + 1.0)
}

/// Half-away-from-zero rounding by hand.
pub fn oracle_round(v: f64) -> f64 {
    let f = v.abs().floor();
    let r = if v.abs() - f >= 0.5 { f + 1.0 } else { f };
    r.copysign(v)
}

pub fn oracle_weight(w: f64, bits: u32, layer_max: f64) -> f64 {
    let levels = 2f64.powi(bits as i32 - 1);
    oracle_round(oracle_tanh(w) * levels / layer_max) / levels
}

pub fn oracle_activation(a: f64, bits: u32) -> f64 {
    let levels = 2f64.powi(bits as i32);
    oracle_round(a.clamp(0.0, 1.0) * levels) / levels
}

pub fn oracle_bits(max_bits: u32, p: f64, s: f64) -> u32 {
    // work in exact thirds-of-a-sixth where possible: n = ceil(N - p/S)
    let raw = max_bits as f64 - p / s;
    let mut n = raw.trunc() as i64;
    if (n as f64) < raw - 1e-12 {
        n += 1;
    }
    n.clamp(2, max_bits as i64) as u32
}

/// Per-layer spreadsheet for a conv/fc chain: each row is
/// (kept_in, kept_out, K, out_h * out_w, bits_w, bits_a), summed by hand.
pub fn spreadsheet_bops(rows: &[(u64, u64, u64, u64, u64, u64)]) -> u64 {
    let mut total = 0u64;
    for &(cin, cout, k, hw, bw, ba) in rows {
        let macs = cin * cout * k * k * hw;
        total += macs * bw * ba;
    }
    total
}

/// Two-layer fixture schedule with bits that move with sparsity:
/// N = 6 on conv3, p = 1.
pub fn fixture_schedule(spec: &NetworkSpec) -> BitwidthSchedule {
    ScheduleConfig { n_first: 8, n_last: 6, p: 1.0, exempt: vec![] }.build(spec).unwrap()
}

pub fn fixture_bits(kept3: u64) -> u64 {
    // ceil(6 - 1 / s) clamped to [2, 6], s = kept / 8
    let raw = 6.0 - 8.0 / kept3 as f64;
    (raw.ceil() as i64).clamp(2, 6) as u64
}

/// conv1 2->8 3x3 on 6x6 (32-bit), conv3 8->8 3x3 on 6x6, fc 288->3 (32-bit).
pub fn fixture_bops(k1: u64, k3: u64) -> u64 {
    let b = fixture_bits(k3);
    spreadsheet_bops(&[(2, k1, 3, 36, 32, 32), (k1, k3, 3, 36, b, b), (k3 * 36, 3, 1, 1, 32, 32)])
}

pub fn fixture_baseline() -> u64 {
    spreadsheet_bops(&[(2, 8, 3, 36, 32, 32), (8, 8, 3, 36, 32, 32), (288, 3, 1, 1, 32, 32)])
}

/// Every floor-respecting mask pair on the fixture with its BOPs and
/// total removed importance.
pub fn enumerate(imp: &[Vec<f64>; 2]) -> Vec<(u64, f64)> {
    let mut out = Vec::with_capacity(255 * 255);
    for m1 in 1u32..256 {
        for m3 in 1u32..256 {
            let bops = fixture_bops(m1.count_ones() as u64, m3.count_ones() as u64);
            let removed: f64 = (0..8).filter(|i| m1 & (1 << i) == 0).map(|i| imp[0][i]).sum::<f64>()
                + (0..8).filter(|i| m3 & (1 << i) == 0).map(|i| imp[1][i]).sum::<f64>();
            out.push((bops, removed));
        }
    }
    out
}

pub fn fixture_values() -> [Vec<f64>; 2] {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    [(0..8).map(|_| rng.random_range(0.5..8.0)).collect(), (0..8).map(|_| rng.random_range(0.5..8.0)).collect()]
}

pub fn fixture_plan(values: &[Vec<f64>; 2], budget: f64) -> (CompressionPlan, f64) {
    let spec = two_layer_fixture();
    let floors: BTreeMap<u32, usize> = [(1, 1), (3, 1)].into_iter().collect();
    let fp = FilterPropertyTable {
        values: [(1, values[0].clone()), (3, values[1].clone())].into_iter().collect(),
        sample_count: 96,
        tolerance: 1e-6,
    };
    let imp = importance(&fp, &AbVector::identity(&spec)).unwrap();
    let plan = derive_masks(&imp, &spec, &fixture_schedule(&spec), budget, &floors, Currency::Joint).unwrap();
    let removed = objective_value(&imp, &plan).unwrap();
    (plan, removed)
}

/// Entries in -3..=3; every third matrix is a product of 8xk and kx8
/// factors so low ranks are well represented.
pub fn small_int_matrix(rng: &mut ChaCha8Rng, i: usize) -> Vec<i64> {
    if i.is_multiple_of(3) {
        let k = rng.random_range(1..=7usize);
        let a: Vec<i64> = (0..8 * k).map(|_| rng.random_range(-3..=3)).collect();
        let b: Vec<i64> = (0..k * 8).map(|_| rng.random_range(-3..=3)).collect();
        (0..64).map(|e| (0..k).map(|t| a[(e / 8) * k + t] * b[t * 8 + e % 8]).sum()).collect()
    } else {
        (0..64).map(|_| rng.random_range(-3..=3)).collect()
    }
}
