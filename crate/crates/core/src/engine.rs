//! Forward and backward passes of chain/residual CNNs with in-graph filter
//! masking and fake quantization.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{LayerParams, ModelState, Params};
use crate::picplan::CompressionPlan;
use crate::quantize::{max_abs, quantize_activation, quantize_weights, FULL_PRECISION_BITS};
use crate::spec::{ActShape, LayerId, LayerKind, NetworkSpec, Topology};
use crate::tensor::{gemm, MatRef, Real, Tensor};

/// Which fake quantizers run during a pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QuantMode {
    #[default]
    Off,
    /// Activations quantized, weights real-valued.
    Activations,
    /// Weights and activations quantized.
    Full,
}

/// How a pass treats the network: optional pruning plan and quantizers.
#[derive(Debug, Clone, Copy, Default)]
pub struct Exec<'a> {
    pub plan: Option<&'a CompressionPlan>,
    pub quant: QuantMode,
}

impl<'a> Exec<'a> {
    pub fn dense() -> Self {
        Self::default()
    }

    pub fn pruned(plan: &'a CompressionPlan) -> Self {
        Self { plan: Some(plan), quant: QuantMode::Off }
    }

    pub fn quantized(plan: &'a CompressionPlan, quant: QuantMode) -> Self {
        Self { plan: Some(plan), quant }
    }
}

/// Per-layer gradients, indexed like [`Params`].
pub type Grads<T> = Params<T>;

pub(crate) enum Op<T> {
    Conv {
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        h: usize,
        w: usize,
        ho: usize,
        wo: usize,
        lin: Linear<T>,
        mask: Option<Vec<T>>,
    },
    Fc {
        inf: usize,
        outf: usize,
        lin: Linear<T>,
    },
    Relu,
    Pool {
        max: bool,
        k: usize,
        stride: usize,
        c: usize,
        h: usize,
        w: usize,
        ho: usize,
        wo: usize,
    },
    Flatten,
    Residual {
        src: usize,
    },
}

pub(crate) struct Linear<T> {
    id: LayerId,
    /// Effective (possibly fake-quantized) weight used by the pass.
    weight: Vec<T>,
    bias: Vec<T>,
    /// d(effective weight)/d(raw weight) under the straight-through rule.
    weight_grad_scale: Option<Vec<T>>,
    /// (bits, calibrated range) of the input activation quantizer.
    act_quant: Option<(u32, T)>,
}

enum Aux<T> {
    None,
    Linear { input: Vec<T>, cols: Vec<T>, in_pass: Option<Vec<bool>> },
    Pool { argmax: Vec<u32> },
}

pub(crate) struct Tape<T> {
    /// acts[0] is the input, acts[i + 1] the output of layer i.
    pub acts: Vec<Vec<T>>,
    aux: Vec<Aux<T>>,
}

/// A network bound to concrete parameters and an execution mode.
pub(crate) struct Engine<T> {
    pub ops: Vec<Op<T>>,
    pub topo: Topology,
    pub input_len: usize,
    pub classes: usize,
}

pub(crate) struct EngineOptions {
    /// Skip activation quantizers and keep raw activations (range calibration).
    pub calibrating: bool,
}

impl<T: Real> Engine<T> {
    pub fn new(
        spec: &NetworkSpec,
        params: &Params<T>,
        act_max: &BTreeMap<LayerId, f32>,
        exec: Exec<'_>,
        opts: EngineOptions,
    ) -> Result<Self> {
        let topo = spec.topology()?;
        if let Some(plan) = exec.plan {
            plan.check(spec)?;
        }
        let classes = spec.num_classes()?;
        let mut ops = Vec::with_capacity(spec.layers.len());
        for (pos, layer) in spec.layers.iter().enumerate() {
            let input = topo.shapes[pos];
            let output = topo.shapes[pos + 1];
            let layer_plan = exec.plan.and_then(|p| p.layers.get(&layer.id));
            let op = match layer.kind {
                LayerKind::Conv { in_channels, out_channels, kernel, stride, padding } => {
                    let (ActShape::Map { h, w, .. }, ActShape::Map { h: ho, w: wo, .. }) = (input, output) else {
                        unreachable!("validated conv shapes")
                    };
                    let mask = layer_plan
                        .filter(|_| layer.prunable)
                        .map(|lp| lp.keep.iter().map(|&k| if k { T::one() } else { T::zero() }).collect::<Vec<T>>());
                    let lin = linear(layer.id, params, act_max, exec, layer_plan, mask.as_deref(), &opts)?;
                    Op::Conv {
                        cin: in_channels,
                        cout: out_channels,
                        k: kernel,
                        stride,
                        pad: padding,
                        h,
                        w,
                        ho,
                        wo,
                        lin,
                        mask,
                    }
                }
                LayerKind::Fc { in_features, out_features } => Op::Fc {
                    inf: in_features,
                    outf: out_features,
                    lin: linear(layer.id, params, act_max, exec, layer_plan, None, &opts)?,
                },
                LayerKind::Relu => Op::Relu,
                LayerKind::Maxpool { kernel, stride } | LayerKind::Avgpool { kernel, stride } => {
                    let (ActShape::Map { c, h, w }, ActShape::Map { h: ho, w: wo, .. }) = (input, output) else {
                        unreachable!("validated pool shapes")
                    };
                    let max = matches!(layer.kind, LayerKind::Maxpool { .. });
                    Op::Pool { max, k: kernel, stride, c, h, w, ho, wo }
                }
                LayerKind::Flatten => Op::Flatten,
                LayerKind::ResidualAdd { from } => Op::Residual { src: topo.position[&from] + 1 },
            };
            ops.push(op);
        }
        let input_len = topo.shapes[0].numel();
        Ok(Self { ops, topo, input_len, classes })
    }

    pub fn forward_sample(&self, x: &[T], keep_aux: bool) -> Tape<T> {
        let mut acts: Vec<Vec<T>> = Vec::with_capacity(self.ops.len() + 1);
        let mut aux = Vec::with_capacity(self.ops.len());
        acts.push(x.to_vec());
        for op in &self.ops {
            let input = acts.last().unwrap();
            let (out, a) = match op {
                Op::Conv { cin, cout, k, stride, pad, h, w, ho, wo, lin, mask } => {
                    let (input, in_pass) = quantize_input(input, lin.act_quant);
                    let rows = cin * k * k;
                    let npix = ho * wo;
                    let mut cols = vec![T::zero(); rows * npix];
                    im2col(&input, *cin, *h, *w, *k, *stride, *pad, *ho, *wo, &mut cols);
                    let mut out = vec![T::zero(); cout * npix];
                    gemm(MatRef::new(&lin.weight, *cout, rows), MatRef::new(&cols, rows, npix), T::zero(), &mut out);
                    for (co, chunk) in out.chunks_mut(npix).enumerate() {
                        let b = lin.bias[co];
                        let m = mask.as_ref().map_or(T::one(), |m| m[co]);
                        for v in chunk.iter_mut() {
                            *v = (*v + b) * m;
                        }
                    }
                    let a = if keep_aux { Aux::Linear { input: Vec::new(), cols, in_pass } } else { Aux::None };
                    (out, a)
                }
                Op::Fc { inf, outf, lin } => {
                    let (input, in_pass) = quantize_input(input, lin.act_quant);
                    let mut out = lin.bias.clone();
                    gemm(MatRef::new(&lin.weight, *outf, *inf), MatRef::new(&input, *inf, 1), T::one(), &mut out);
                    let a = if keep_aux {
                        Aux::Linear { input: input.into_owned(), cols: Vec::new(), in_pass }
                    } else {
                        Aux::None
                    };
                    (out, a)
                }
                Op::Relu => (input.iter().map(|&v| v.max(T::zero())).collect(), Aux::None),
                Op::Pool { max, k, stride, c, h, w, ho, wo } => {
                    let (out, argmax) = pool_forward(input, *max, *k, *stride, *c, *h, *w, *ho, *wo);
                    let a = if keep_aux && *max { Aux::Pool { argmax } } else { Aux::None };
                    (out, a)
                }
                Op::Flatten => (input.clone(), Aux::None),
                Op::Residual { src } => {
                    let out = input.iter().zip(&acts[*src]).map(|(&a, &b)| a + b).collect();
                    (out, Aux::None)
                }
            };
            acts.push(out);
            aux.push(a);
        }
        Tape { acts, aux }
    }

    /// Accumulate parameter gradients of one sample given d(loss)/d(logits).
    pub fn backward_sample(&self, tape: &Tape<T>, dlogits: Vec<T>, grads: &mut Grads<T>) {
        let n = self.ops.len();
        let mut dacts: Vec<Option<Vec<T>>> = vec![None; n + 1];
        dacts[n] = Some(dlogits);
        for i in (0..n).rev() {
            let Some(dout) = dacts[i + 1].take() else { continue };
            let need_dx = i > 0;
            let dx: Option<Vec<T>> = match (&self.ops[i], &tape.aux[i]) {
                (
                    Op::Conv { cin, cout, k, stride, pad, h, w, ho, wo, lin, mask },
                    Aux::Linear { cols, in_pass, .. },
                ) => {
                    let mut dout = dout;
                    let npix = ho * wo;
                    if let Some(mask) = mask {
                        for (co, chunk) in dout.chunks_mut(npix).enumerate() {
                            if mask[co] == T::zero() {
                                chunk.iter_mut().for_each(|v| *v = T::zero());
                            }
                        }
                    }
                    let rows = cin * k * k;
                    let g = grads.get_mut(&lin.id).expect("gradient slot");
                    for (co, chunk) in dout.chunks(npix).enumerate() {
                        let s: T = chunk.iter().copied().sum();
                        let gb = &mut g.bias.data_mut()[co];
                        *gb = *gb + s;
                    }
                    gemm(
                        MatRef::new(&dout, *cout, npix),
                        MatRef::new(cols, rows, npix).t(),
                        T::one(),
                        g.weight.data_mut(),
                    );
                    if need_dx {
                        let mut dcols = vec![T::zero(); rows * npix];
                        gemm(
                            MatRef::new(&lin.weight, *cout, rows).t(),
                            MatRef::new(&dout, *cout, npix),
                            T::zero(),
                            &mut dcols,
                        );
                        let mut dx = vec![T::zero(); cin * h * w];
                        col2im(&dcols, *cin, *h, *w, *k, *stride, *pad, *ho, *wo, &mut dx);
                        apply_pass(&mut dx, in_pass.as_deref());
                        Some(dx)
                    } else {
                        None
                    }
                }
                (Op::Fc { inf, outf, lin }, Aux::Linear { input, in_pass, .. }) => {
                    let g = grads.get_mut(&lin.id).expect("gradient slot");
                    for (gb, &d) in g.bias.data_mut().iter_mut().zip(&dout) {
                        *gb = *gb + d;
                    }
                    gemm(MatRef::new(&dout, *outf, 1), MatRef::new(input, 1, *inf), T::one(), g.weight.data_mut());
                    if need_dx {
                        let mut dx = vec![T::zero(); *inf];
                        gemm(
                            MatRef::new(&lin.weight, *outf, *inf).t(),
                            MatRef::new(&dout, *outf, 1),
                            T::zero(),
                            &mut dx,
                        );
                        apply_pass(&mut dx, in_pass.as_deref());
                        Some(dx)
                    } else {
                        None
                    }
                }
                (Op::Relu, _) => Some(
                    dout.iter()
                        .zip(&tape.acts[i + 1])
                        .map(|(&d, &y)| if y > T::zero() { d } else { T::zero() })
                        .collect(),
                ),
                (Op::Pool { max: true, c, h, w, .. }, Aux::Pool { argmax }) => {
                    let mut dx = vec![T::zero(); c * h * w];
                    for (&d, &src) in dout.iter().zip(argmax) {
                        dx[src as usize] = dx[src as usize] + d;
                    }
                    Some(dx)
                }
                (Op::Pool { max: false, k, stride, c, h, w, ho, wo }, _) => {
                    Some(avgpool_backward(&dout, *k, *stride, *c, *h, *w, *ho, *wo))
                }
                (Op::Flatten, _) => Some(dout),
                (Op::Residual { src }, _) => {
                    accumulate(&mut dacts[*src], &dout);
                    Some(dout)
                }
                _ => unreachable!("tape recorded without auxiliary data"),
            };
            if let Some(dx) = dx {
                accumulate(&mut dacts[i], &dx);
            }
        }
    }

    /// Which ReLUs are active and which inputs win each max-pool window.
    /// Loss is smooth in the parameters while this pattern is unchanged.
    pub fn branch_pattern(&self, tape: &Tape<T>) -> Vec<u32> {
        let mut pattern = Vec::new();
        for (i, op) in self.ops.iter().enumerate() {
            match (op, &tape.aux[i]) {
                (Op::Relu, _) => pattern.extend(tape.acts[i].iter().map(|&v| u32::from(v > T::zero()))),
                (_, Aux::Pool { argmax }) => pattern.extend_from_slice(argmax),
                _ => {}
            }
        }
        pattern
    }

    pub fn zero_grads(&self) -> Grads<T> {
        self.ops
            .iter()
            .filter_map(|op| match op {
                Op::Conv { cin, cout, k, lin, .. } => Some((
                    lin.id,
                    LayerParams { weight: Tensor::zeros(vec![*cout, *cin, *k, *k]), bias: Tensor::zeros(vec![*cout]) },
                )),
                Op::Fc { inf, outf, lin } => Some((
                    lin.id,
                    LayerParams { weight: Tensor::zeros(vec![*outf, *inf]), bias: Tensor::zeros(vec![*outf]) },
                )),
                _ => None,
            })
            .collect()
    }

    fn check_batch(&self, batch: &Tensor<T>) -> Result<usize> {
        let shape = batch.shape();
        let expected = match self.topo.shapes[0] {
            ActShape::Map { c, h, w } => vec![c, h, w],
            ActShape::Flat(n) => vec![n],
        };
        if shape.len() != 4 || shape[1..] != expected[..] {
            return Err(Error::shape(format!("batch shape {shape:?} does not match input N x {expected:?}")));
        }
        Ok(shape[0])
    }

    /// Logits (and optionally every intermediate activation) for a batch.
    pub fn run(&self, batch: &Tensor<T>) -> Result<Vec<Tape<T>>> {
        let n = self.check_batch(batch)?;
        Ok((0..n).into_par_iter().map(|i| self.forward_sample(batch.outer(i), false)).collect())
    }

    /// Mean softmax cross-entropy over the batch and its parameter gradients.
    pub fn loss_and_grads(&self, images: &[T], labels: &[usize]) -> (T, Grads<T>) {
        const CHUNK: usize = 4;
        let n = labels.len();
        let inv_n = T::one() / T::of_f64(n as f64);
        let partials: Vec<(T, Grads<T>)> = labels
            .par_chunks(CHUNK)
            .enumerate()
            .map(|(c, chunk)| {
                let mut grads = self.zero_grads();
                let mut loss = T::zero();
                for (j, &label) in chunk.iter().enumerate() {
                    let i = c * CHUNK + j;
                    let x = &images[i * self.input_len..(i + 1) * self.input_len];
                    let tape = self.forward_sample(x, true);
                    let logits = tape.acts.last().unwrap();
                    let (l, mut d) = softmax_xent(logits, label);
                    loss = loss + l;
                    d.iter_mut().for_each(|v| *v = *v * inv_n);
                    self.backward_sample(&tape, d, &mut grads);
                }
                (loss, grads)
            })
            .collect();
        let mut iter = partials.into_iter();
        let (mut loss, mut grads) = iter.next().expect("non-empty batch");
        for (l, g) in iter {
            loss = loss + l;
            for (id, p) in grads.iter_mut() {
                add_into(p.weight.data_mut(), g[id].weight.data());
                add_into(p.bias.data_mut(), g[id].bias.data());
            }
        }
        for op in &self.ops {
            if let Op::Conv { lin, .. } | Op::Fc { lin, .. } = op {
                if let Some(scale) = &lin.weight_grad_scale {
                    let g = grads.get_mut(&lin.id).unwrap();
                    g.weight.data_mut().iter_mut().zip(scale).for_each(|(g, &s)| *g = *g * s);
                }
            }
        }
        (loss * inv_n, grads)
    }
}

fn linear<T: Real>(
    id: LayerId,
    params: &Params<T>,
    act_max: &BTreeMap<LayerId, f32>,
    exec: Exec<'_>,
    layer_plan: Option<&crate::picplan::LayerPlan>,
    mask: Option<&[T]>,
    opts: &EngineOptions,
) -> Result<Linear<T>> {
    let p = params.get(&id).ok_or_else(|| Error::validation(format!("layer {id}: missing parameters")))?;
    let mut weight = p.weight.data().to_vec();
    let mut weight_grad_scale = None;
    let mut act_quant = None;
    if let Some(lp) = layer_plan.filter(|lp| !lp.exempt) {
        if exec.quant == QuantMode::Full && lp.n_w < FULL_PRECISION_BITS {
            let row = weight.len() / p.weight.shape()[0];
            // range over the filters that survive pruning
            let layer_max = weight
                .chunks(row)
                .enumerate()
                .filter(|(i, _)| mask.is_none_or(|m| m[*i] != T::zero()))
                .fold(T::zero(), |m, (_, r)| m.max(max_abs(r)));
            let q = quantize_weights(&weight, lp.n_w, layer_max);
            weight_grad_scale = Some(weight.iter().map(|w| T::one() - w.tanh() * w.tanh()).collect());
            weight = q.into_iter().map(|v| v * layer_max).collect();
        }
        if exec.quant != QuantMode::Off && lp.n_a < FULL_PRECISION_BITS && !opts.calibrating {
            let range = *act_max
                .get(&id)
                .ok_or_else(|| Error::validation(format!("layer {id}: activation range not calibrated")))?;
            if !(range > 0.0 && range.is_finite()) {
                return Err(Error::validation(format!("layer {id}: calibrated activation range {range} invalid")));
            }
            act_quant = Some((lp.n_a, T::of_f64(range as f64)));
        }
    }
    Ok(Linear { id, weight, bias: p.bias.data().to_vec(), weight_grad_scale, act_quant })
}

/// Range-scaled activation quantization `r * Q(x / r)`; also returns which
/// entries fall inside `[0, r]` (where the straight-through gradient passes).
fn quantize_input<T: Real>(x: &[T], quant: Option<(u32, T)>) -> (std::borrow::Cow<'_, [T]>, Option<Vec<bool>>) {
    match quant {
        None => (std::borrow::Cow::Borrowed(x), None),
        Some((bits, range)) => {
            let q = x.iter().map(|&v| quantize_activation(v / range, bits) * range).collect();
            let pass = x.iter().map(|&v| v >= T::zero() && v <= range).collect();
            (std::borrow::Cow::Owned(q), Some(pass))
        }
    }
}

fn apply_pass<T: Real>(dx: &mut [T], pass: Option<&[bool]>) {
    if let Some(pass) = pass {
        dx.iter_mut().zip(pass).for_each(|(d, &p)| {
            if !p {
                *d = T::zero()
            }
        });
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, d: &[T]) {
    match slot {
        Some(v) => add_into(v, d),
        None => *slot = Some(d.to_vec()),
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(a, &b)| *a = *a + b);
}

/// Loss and d(loss)/d(logits) of softmax cross-entropy for one sample.
pub(crate) fn softmax_xent<T: Real>(logits: &[T], label: usize) -> (T, Vec<T>) {
    let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    let loss = sum.ln() - (logits[label] - max);
    let mut d: Vec<T> = exps.into_iter().map(|e| e / sum).collect();
    d[label] = d[label] - T::one();
    (loss, d)
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let npix = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * npix..][..npix];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let npix = ho * wo;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * npix..][..npix];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] = dst[ix as usize] + row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn pool_forward<T: Real>(
    x: &[T],
    max: bool,
    k: usize,
    stride: usize,
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
) -> (Vec<T>, Vec<u32>) {
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut argmax = Vec::with_capacity(if max { c * ho * wo } else { 0 });
    let area = T::of_f64((k * k) as f64);
    for ci in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_idx = 0;
                let mut sum = T::zero();
                for ky in 0..k {
                    for kx in 0..k {
                        let idx = ci * h * w + (oy * stride + ky) * w + ox * stride + kx;
                        let v = x[idx];
                        if v > best {
                            best = v;
                            best_idx = idx;
                        }
                        sum = sum + v;
                    }
                }
                if max {
                    out.push(best);
                    argmax.push(best_idx as u32);
                } else {
                    out.push(sum / area);
                }
            }
        }
    }
    (out, argmax)
}

#[allow(clippy::too_many_arguments)]
fn avgpool_backward<T: Real>(
    dout: &[T],
    k: usize,
    stride: usize,
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); c * h * w];
    let area = T::of_f64((k * k) as f64);
    for ci in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let g = dout[(ci * ho + oy) * wo + ox] / area;
                for ky in 0..k {
                    for kx in 0..k {
                        let idx = ci * h * w + (oy * stride + ky) * w + ox * stride + kx;
                        dx[idx] = dx[idx] + g;
                    }
                }
            }
        }
    }
    dx
}

/// Output of [`forward`].
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// N x classes
    pub logits: Tensor<f32>,
    /// Post-activation maps of every prunable conv, N x C x H x W.
    pub feature_maps: Option<BTreeMap<LayerId, Tensor<f32>>>,
}

/// Run a batch through the network. With `capture`, the post-activation
/// feature maps of every prunable conv layer are returned as well.
pub fn forward(
    spec: &NetworkSpec,
    state: &ModelState,
    batch: &Tensor<f32>,
    exec: Exec<'_>,
    capture: bool,
) -> Result<ForwardOutput> {
    state.check_against(spec)?;
    let engine = Engine::new(spec, &state.params, &state.act_max, exec, EngineOptions { calibrating: false })?;
    let tapes = engine.run(batch)?;
    let n = tapes.len();
    let logits: Vec<f32> = tapes.iter().flat_map(|t| t.acts.last().unwrap().iter().copied()).collect();
    let logits = Tensor::new(vec![n, engine.classes], logits)?;
    if !logits.all_finite() {
        return Err(Error::NonFinite("forward produced non-finite logits".into()));
    }
    let feature_maps = capture.then(|| capture_maps(spec, &engine, &tapes));
    Ok(ForwardOutput { logits, feature_maps })
}

/// Position whose activation is the post-activation output of conv `pos`.
fn activation_position(spec: &NetworkSpec, pos: usize) -> usize {
    match spec.layers.get(pos + 1).map(|l| &l.kind) {
        Some(LayerKind::Relu) => pos + 2,
        _ => pos + 1,
    }
}

pub(crate) fn capture_maps<T: Real>(
    spec: &NetworkSpec,
    engine: &Engine<T>,
    tapes: &[Tape<T>],
) -> BTreeMap<LayerId, Tensor<f32>> {
    let mut maps = BTreeMap::new();
    for id in spec.prunable_ids() {
        let pos = engine.topo.position[&id];
        let at = activation_position(spec, pos);
        let ActShape::Map { c, h, w } = engine.topo.shapes[pos + 1] else { unreachable!() };
        let data: Vec<f32> = tapes.iter().flat_map(|t| t.acts[at].iter().map(|v| v.as_f64() as f32)).collect();
        maps.insert(id, Tensor::new(vec![tapes.len(), c, h, w], data).expect("captured shape"));
    }
    maps
}

/// Record, for every layer whose input is fake-quantized under `plan`, the
/// largest input activation observed over `batches`. Weights are quantized
/// during calibration when `quant` is [`QuantMode::Full`].
pub fn calibrate_activations(
    spec: &NetworkSpec,
    state: &ModelState,
    batches: &[Tensor<f32>],
    plan: &CompressionPlan,
    quant: QuantMode,
) -> Result<BTreeMap<LayerId, f32>> {
    let exec = Exec::quantized(plan, quant);
    let engine = Engine::new(spec, &state.params, &state.act_max, exec, EngineOptions { calibrating: true })?;
    let targets: Vec<(LayerId, usize)> = spec
        .parameterized()
        .filter(|l| plan.layers.get(&l.id).is_some_and(|lp| !lp.exempt && lp.n_a < FULL_PRECISION_BITS))
        .map(|l| (l.id, engine.topo.position[&l.id]))
        .collect();
    let mut ranges: BTreeMap<LayerId, f32> = targets.iter().map(|&(id, _)| (id, 0.0f32)).collect();
    for batch in batches {
        for tape in engine.run(batch)? {
            for &(id, pos) in &targets {
                let m = tape.acts[pos].iter().fold(0.0f32, |m, &v| m.max(v));
                let r = ranges.get_mut(&id).unwrap();
                *r = r.max(m);
            }
        }
    }
    for r in ranges.values_mut() {
        if !(*r > 0.0) {
            // dead input: any positive range quantizes zeros to zeros
            *r = 1.0;
        }
    }
    Ok(ranges)
}
