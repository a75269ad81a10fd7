//! Forward inference, activation capture and reverse-mode gradients for the
//! fixed layer vocabulary in [`crate::model`].
//!
//! Storage is `f32`; every reduction (conv, dense, pooling averages,
//! softmax normalizers) and every backward signal is carried in `f64`.
//! All routines are single-threaded and iterate in a fixed order, so eval
//! mode is bit-reproducible.

use crate::data::LabeledBatch;
use crate::model::{conv_geometry, Conv2d, Dense, Layer, ModelSpec};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("layer {layer}: expected input shape {expected:?}, got {actual:?}")]
    Shape {
        layer: usize,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("layer index {k} out of range (model has {layers} layers)")]
    LayerOutOfRange { k: usize, layers: usize },
    #[error("non-finite value in activation of layer {layer}")]
    NonFinite { layer: usize },
    #[error("label {label} of sample {index} outside [0, {classes})")]
    LabelOutOfRange { index: usize, label: usize, classes: usize },
    #[error("margin head ({i}, {j}) must name two distinct classes below {classes}")]
    Head { i: usize, j: usize, classes: usize },
    #[error("{heads} heads supplied for a batch of {batch}")]
    HeadCount { heads: usize, batch: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active; masks are drawn from a stream keyed by `seed` and
    /// the layer index.
    Train {
        seed: u64,
    },
}

/// Captured activations keyed by layer index (0 = input).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ActivationTrace {
    maps: BTreeMap<usize, Tensor>,
}

impl ActivationTrace {
    pub fn get(&self, k: usize) -> Option<&Tensor> {
        self.maps.get(&k)
    }

    pub fn layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.maps.keys().copied()
    }

    pub fn insert(&mut self, k: usize, t: Tensor) {
        self.maps.insert(k, t);
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn into_map(self) -> BTreeMap<usize, Tensor> {
        self.maps
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Pre-softmax outputs `(batch, classes)`.
    pub logits: Tensor,
    pub trace: ActivationTrace,
}

/// Gradient of one parameterized layer.
#[derive(Clone, Debug)]
pub struct ParamGrad {
    pub layer: usize,
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug)]
pub struct WeightGradients {
    /// Mean cross-entropy of the batch.
    pub loss: f64,
    pub logits: Tensor,
    pub layers: Vec<ParamGrad>,
}

fn check_input(model: &ModelSpec, k: usize, x: &Tensor) -> Result<(), NnError> {
    let expected = model.activation_shape(k).ok_or(NnError::LayerOutOfRange {
        k,
        layers: model.num_layers(),
    })?;
    if x.shape().is_empty() || x.sample_shape() != expected {
        let mut full = vec![x.batch()];
        full.extend_from_slice(expected);
        return Err(NnError::Shape {
            layer: k + 1,
            expected: full,
            actual: x.shape().to_vec(),
        });
    }
    Ok(())
}

/// Activations `start..=end` plus the dropout masks used on the way.
struct Tape {
    start: usize,
    acts: Vec<Tensor>,
    masks: BTreeMap<usize, Vec<f32>>,
}

impl Tape {
    fn act(&self, k: usize) -> &Tensor {
        &self.acts[k - self.start]
    }
}

fn run(model: &ModelSpec, start: usize, x: Tensor, end: usize, mode: Mode) -> Tape {
    let mut acts = Vec::with_capacity(end - start + 1);
    let mut masks = BTreeMap::new();
    acts.push(x);
    for k in start + 1..=end {
        let layer = &model.layers()[k - 1];
        let input = acts.last().unwrap();
        let out = match (layer, mode) {
            (Layer::Dropout { rate }, Mode::Train { seed }) if *rate > 0.0 => {
                let mask = dropout_mask(input.len(), *rate, seed, k);
                let mut out = input.clone();
                for (o, m) in out.data_mut().iter_mut().zip(&mask) {
                    *o *= m;
                }
                masks.insert(k, mask);
                out
            }
            _ => layer_forward(layer, input, model.activation_shape(k).unwrap()),
        };
        acts.push(out);
    }
    Tape { start, acts, masks }
}

fn dropout_mask(len: usize, rate: f32, seed: u64, layer: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(layer as u64);
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.gen::<f32>() < rate { 0.0 } else { keep })
        .collect()
}

/// Runs the model on `inputs` and captures the requested activations.
pub fn forward(model: &ModelSpec, inputs: &Tensor, capture: &[usize], mode: Mode) -> Result<ForwardOutput, NnError> {
    check_input(model, 0, inputs)?;
    let n = model.num_layers();
    if let Some(&k) = capture.iter().find(|&&k| k > n) {
        return Err(NnError::LayerOutOfRange { k, layers: n });
    }
    let end = capture.iter().copied().max().unwrap_or(0).max(model.logits_index());
    let tape = run(model, 0, inputs.clone(), end, mode);
    let mut trace = ActivationTrace::default();
    for &k in capture {
        trace.insert(k, tape.act(k).clone());
    }
    Ok(ForwardOutput {
        logits: tape.act(model.logits_index()).clone(),
        trace,
    })
}

/// Eval-mode logits of the sub-network mapping activation `k` to the output.
pub fn forward_from(model: &ModelSpec, k: usize, activations: &Tensor) -> Result<Tensor, NnError> {
    let end = model.logits_index();
    if k > end {
        return Err(NnError::LayerOutOfRange {
            k,
            layers: model.num_layers(),
        });
    }
    check_input(model, k, activations)?;
    let mut tape = run(model, k, activations.clone(), end, Mode::Eval);
    Ok(tape.acts.pop().unwrap())
}

/// Eval-mode activation `to` computed from activation `from`.
pub fn forward_between(model: &ModelSpec, from: usize, to: usize, activations: &Tensor) -> Result<Tensor, NnError> {
    if to > model.num_layers() || from > to {
        return Err(NnError::LayerOutOfRange {
            k: to.max(from),
            layers: model.num_layers(),
        });
    }
    check_input(model, from, activations)?;
    let mut tape = run(model, from, activations.clone(), to, Mode::Eval);
    Ok(tape.acts.pop().unwrap())
}

/// Per-sample gradient of `logit[i] - logit[j]` with respect to activation
/// `k`, one `(i, j)` head per sample. Returns a tensor shaped like
/// `activations`.
pub fn grad_wrt_activation(
    model: &ModelSpec,
    k: usize,
    activations: &Tensor,
    heads: &[(usize, usize)],
) -> Result<Tensor, NnError> {
    let end = model.logits_index();
    if k > end {
        return Err(NnError::LayerOutOfRange {
            k,
            layers: model.num_layers(),
        });
    }
    check_input(model, k, activations)?;
    let batch = activations.batch();
    if heads.len() != batch {
        return Err(NnError::HeadCount {
            heads: heads.len(),
            batch,
        });
    }
    let classes = model.classes();
    if let Some(&(i, j)) = heads.iter().find(|(i, j)| i == j || *i >= classes || *j >= classes) {
        return Err(NnError::Head { i, j, classes });
    }
    let tape = run(model, k, activations.clone(), end, Mode::Eval);
    for layer in k..=end {
        if !tape.act(layer).is_finite() {
            return Err(NnError::NonFinite { layer });
        }
    }
    let mut grad = vec![0.0f64; batch * classes];
    for (n, &(i, j)) in heads.iter().enumerate() {
        grad[n * classes + i] = 1.0;
        grad[n * classes + j] = -1.0;
    }
    let dx = backward(model, &tape, k, grad, None, true).expect("input gradient requested");
    Tensor::new(activations.shape().to_vec(), dx.into_iter().map(|v| v as f32).collect())
        .map_err(|_| unreachable!("gradient shape matches activations"))
}

/// Cross-entropy gradients of every conv/dense layer on a labeled batch,
/// with dropout active (train mode keyed by `seed`).
pub fn grad_wrt_weights(model: &ModelSpec, batch: &LabeledBatch, seed: u64) -> Result<WeightGradients, NnError> {
    check_input(model, 0, &batch.inputs)?;
    let classes = model.classes();
    if let Some((index, &label)) = batch.labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(NnError::LabelOutOfRange { index, label, classes });
    }
    let end = model.logits_index();
    let tape = run(model, 0, batch.inputs.clone(), end, Mode::Train { seed });
    let logits = tape.act(end);
    let b = batch.len();
    let scale = 1.0 / b as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0f64; b * classes];
    for n in 0..b {
        let row = &logits.data()[n * classes..(n + 1) * classes];
        let p = softmax_f64(row);
        let y = batch.labels[n];
        loss -= p[y].max(f64::MIN_POSITIVE).ln();
        for c in 0..classes {
            let t = if c == y { 1.0 } else { 0.0 };
            grad[n * classes + c] = (p[c] - t) * scale;
        }
    }
    let mut params = Vec::new();
    backward(model, &tape, 0, grad, Some(&mut params), false);
    params.reverse();
    Ok(WeightGradients {
        loss: loss * scale,
        logits: logits.clone(),
        layers: params,
    })
}

/// Propagates `grad` (w.r.t. activation `tape.end`) down to activation
/// `down_to`. Parameter gradients are pushed in reverse layer order.
fn backward(
    model: &ModelSpec,
    tape: &Tape,
    down_to: usize,
    mut grad: Vec<f64>,
    mut params: Option<&mut Vec<ParamGrad>>,
    need_input_grad: bool,
) -> Option<Vec<f64>> {
    let end = tape.start + tape.acts.len() - 1;
    for k in (down_to + 1..=end).rev() {
        let layer = &model.layers()[k - 1];
        let x = tape.act(k - 1);
        let y = tape.act(k);
        let need_dx = k - 1 > down_to || need_input_grad;
        grad = match layer {
            Layer::Conv2d(c) => {
                let (dx, dw, db) = conv_backward(c, x, y.shape(), &grad, params.is_some(), need_dx);
                if let Some(p) = params.as_deref_mut() {
                    p.push(ParamGrad {
                        layer: k,
                        weight: to_tensor(c.kernel.shape(), dw),
                        bias: to_tensor(c.bias.shape(), db),
                    });
                }
                dx
            }
            Layer::Dense(d) => {
                let (dx, dw, db) = dense_backward(d, x, &grad, params.is_some(), need_dx);
                if let Some(p) = params.as_deref_mut() {
                    p.push(ParamGrad {
                        layer: k,
                        weight: to_tensor(d.weight.shape(), dw),
                        bias: to_tensor(d.bias.shape(), db),
                    });
                }
                dx
            }
            Layer::Relu => x
                .data()
                .iter()
                .zip(&grad)
                .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                .collect(),
            Layer::MaxPool { window, stride } => maxpool_backward(x, y.shape(), *window, *stride, &grad),
            Layer::GlobalAvgPool => {
                let (b, h, w, c) = nhwc(x);
                let inv = 1.0 / (h * w) as f64;
                let mut dx = vec![0.0; x.len()];
                for n in 0..b {
                    for p in 0..h * w {
                        for ch in 0..c {
                            dx[(n * h * w + p) * c + ch] = grad[n * c + ch] * inv;
                        }
                    }
                }
                dx
            }
            Layer::Dropout { .. } => match tape.masks.get(&k) {
                Some(mask) => grad.iter().zip(mask).map(|(&g, &m)| g * m as f64).collect(),
                None => grad,
            },
            Layer::Flatten => grad,
            Layer::Softmax => {
                let c = *y.shape().last().unwrap();
                let mut dx = vec![0.0; grad.len()];
                for (n, row) in y.data().chunks(c).enumerate() {
                    let g = &grad[n * c..(n + 1) * c];
                    let dot: f64 = row.iter().zip(g).map(|(&s, &g)| s as f64 * g).sum();
                    for i in 0..c {
                        dx[n * c + i] = row[i] as f64 * (g[i] - dot);
                    }
                }
                dx
            }
        };
    }
    need_input_grad.then_some(grad)
}

fn to_tensor(shape: &[usize], v: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), v.into_iter().map(|x| x as f32).collect()).expect("gradient shape")
}

fn nhwc(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2], s[3])
}

pub(crate) fn layer_forward(layer: &Layer, x: &Tensor, out_sample: &[usize]) -> Tensor {
    let mut shape = vec![x.batch()];
    shape.extend_from_slice(out_sample);
    match layer {
        Layer::Conv2d(c) => conv_forward(c, x, shape),
        Layer::Dense(d) => dense_forward(d, x),
        Layer::Relu => x.map(|v| v.max(0.0)),
        Layer::MaxPool { window, stride } => maxpool_forward(x, shape, *window, *stride),
        Layer::GlobalAvgPool => {
            let (b, h, w, c) = nhwc(x);
            let mut out = vec![0.0f32; b * c];
            for n in 0..b {
                let mut acc = vec![0.0f64; c];
                for p in 0..h * w {
                    let px = &x.data()[(n * h * w + p) * c..][..c];
                    for (a, &v) in acc.iter_mut().zip(px) {
                        *a += v as f64;
                    }
                }
                for ch in 0..c {
                    out[n * c + ch] = (acc[ch] / (h * w) as f64) as f32;
                }
            }
            Tensor::new(shape, out).unwrap()
        }
        Layer::Dropout { .. } => x.clone(),
        Layer::Flatten => x.clone().reshape(shape).unwrap(),
        Layer::Softmax => {
            let c = out_sample[0];
            let mut out = Vec::with_capacity(x.len());
            for row in x.data().chunks(c) {
                out.extend(softmax_f64(row).into_iter().map(|v| v as f32));
            }
            Tensor::new(shape, out).unwrap()
        }
    }
}

/// Numerically stable softmax of one row, in `f64`.
pub fn softmax_f64(row: &[f32]) -> Vec<f64> {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Row-wise softmax of a `(batch, classes)` tensor.
pub fn softmax(logits: &Tensor) -> Tensor {
    let c = *logits.shape().last().unwrap();
    let data = logits
        .data()
        .chunks(c)
        .flat_map(|row| softmax_f64(row).into_iter().map(|v| v as f32))
        .collect();
    Tensor::new(logits.shape().to_vec(), data).unwrap()
}

fn conv_forward(c: &Conv2d, x: &Tensor, shape: Vec<usize>) -> Tensor {
    let (b, h, w, cin) = nhwc(x);
    let (kh, kw, _, cout) = c.kernel_extents();
    let (oh, pt) = conv_geometry(h, kh, c.stride, c.padding).unwrap();
    let (ow, pl) = conv_geometry(w, kw, c.stride, c.padding).unwrap();
    let wk: Vec<f64> = c.kernel.data().iter().map(|&v| v as f64).collect();
    let bias: Vec<f64> = c.bias.data().iter().map(|&v| v as f64).collect();
    let xd = x.data();
    let mut out = vec![0.0f32; b * oh * ow * cout];
    let mut acc = vec![0.0f64; cout];
    for n in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                acc.copy_from_slice(&bias);
                for ky in 0..kh {
                    let iy = (oy * c.stride + ky) as isize - pt as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * c.stride + kx) as isize - pl as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let px = &xd[((n * h + iy as usize) * w + ix as usize) * cin..][..cin];
                        let wbase = (ky * kw + kx) * cin * cout;
                        for (ic, &v) in px.iter().enumerate() {
                            if v == 0.0 {
                                continue;
                            }
                            let v = v as f64;
                            let wrow = &wk[wbase + ic * cout..][..cout];
                            for (a, &wv) in acc.iter_mut().zip(wrow) {
                                *a += v * wv;
                            }
                        }
                    }
                }
                let o = &mut out[((n * oh + oy) * ow + ox) * cout..][..cout];
                for (dst, &a) in o.iter_mut().zip(&acc) {
                    *dst = a as f32;
                }
            }
        }
    }
    Tensor::new(shape, out).unwrap()
}

fn conv_backward(
    c: &Conv2d,
    x: &Tensor,
    y_shape: &[usize],
    dy: &[f64],
    want_params: bool,
    want_dx: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (b, h, w, cin) = nhwc(x);
    let (kh, kw, _, cout) = c.kernel_extents();
    let (oh, ow) = (y_shape[1], y_shape[2]);
    let (_, pt) = conv_geometry(h, kh, c.stride, c.padding).unwrap();
    let (_, pl) = conv_geometry(w, kw, c.stride, c.padding).unwrap();
    let wk: Vec<f64> = c.kernel.data().iter().map(|&v| v as f64).collect();
    let xd = x.data();
    let mut dx = if want_dx { vec![0.0f64; x.len()] } else { Vec::new() };
    let mut dw = if want_params {
        vec![0.0f64; wk.len()]
    } else {
        Vec::new()
    };
    let mut db = if want_params { vec![0.0f64; cout] } else { Vec::new() };
    for n in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = &dy[((n * oh + oy) * ow + ox) * cout..][..cout];
                if want_params {
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                for ky in 0..kh {
                    let iy = (oy * c.stride + ky) as isize - pt as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * c.stride + kx) as isize - pl as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let pix = ((n * h + iy as usize) * w + ix as usize) * cin;
                        let wbase = (ky * kw + kx) * cin * cout;
                        for ic in 0..cin {
                            let off = wbase + ic * cout;
                            if want_params {
                                let v = xd[pix + ic] as f64;
                                if v != 0.0 {
                                    for (d, &gv) in dw[off..off + cout].iter_mut().zip(g) {
                                        *d += v * gv;
                                    }
                                }
                            }
                            if want_dx {
                                let s: f64 = wk[off..off + cout].iter().zip(g).map(|(&a, &b)| a * b).sum();
                                dx[pix + ic] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

fn dense_forward(d: &Dense, x: &Tensor) -> Tensor {
    let (o, i) = (d.out_features(), d.in_features());
    let b = x.batch();
    let wd = d.weight.data();
    let mut out = vec![0.0f32; b * o];
    for n in 0..b {
        let xs = x.sample(n);
        for r in 0..o {
            let row = &wd[r * i..(r + 1) * i];
            let s: f64 = row.iter().zip(xs).map(|(&a, &v)| a as f64 * v as f64).sum();
            out[n * o + r] = (s + d.bias.data()[r] as f64) as f32;
        }
    }
    Tensor::new(vec![b, o], out).unwrap()
}

fn dense_backward(
    d: &Dense,
    x: &Tensor,
    dy: &[f64],
    want_params: bool,
    want_dx: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (o, i) = (d.out_features(), d.in_features());
    let b = x.batch();
    let wd = d.weight.data();
    let mut dx = if want_dx { vec![0.0f64; b * i] } else { Vec::new() };
    let mut dw = if want_params { vec![0.0f64; o * i] } else { Vec::new() };
    let mut db = if want_params { vec![0.0f64; o] } else { Vec::new() };
    for n in 0..b {
        let xs = x.sample(n);
        for r in 0..o {
            let g = dy[n * o + r];
            if g == 0.0 {
                continue;
            }
            if want_params {
                db[r] += g;
                for (dwv, &xv) in dw[r * i..(r + 1) * i].iter_mut().zip(xs) {
                    *dwv += g * xv as f64;
                }
            }
            if want_dx {
                for (dxv, &wv) in dx[n * i..(n + 1) * i].iter_mut().zip(&wd[r * i..(r + 1) * i]) {
                    *dxv += g * wv as f64;
                }
            }
        }
    }
    (dx, dw, db)
}

/// Offset (within the sample) of the first row-major maximum of one window.
fn window_argmax(x: &[f32], w: usize, c: usize, y0: usize, x0: usize, window: usize, ch: usize) -> usize {
    let mut best = (y0 * w + x0) * c + ch;
    let mut best_v = x[best];
    for dy in 0..window {
        for dx in 0..window {
            let off = ((y0 + dy) * w + x0 + dx) * c + ch;
            if x[off] > best_v {
                best_v = x[off];
                best = off;
            }
        }
    }
    best
}

pub(crate) fn maxpool_forward(x: &Tensor, shape: Vec<usize>, window: usize, stride: usize) -> Tensor {
    let (b, _, w, c) = nhwc(x);
    let (oh, ow) = (shape[1], shape[2]);
    let mut out = vec![0.0f32; b * oh * ow * c];
    for n in 0..b {
        let xs = x.sample(n);
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let a = window_argmax(xs, w, c, oy * stride, ox * stride, window, ch);
                    out[((n * oh + oy) * ow + ox) * c + ch] = xs[a];
                }
            }
        }
    }
    Tensor::new(shape, out).unwrap()
}

fn maxpool_backward(x: &Tensor, y_shape: &[usize], window: usize, stride: usize, dy: &[f64]) -> Vec<f64> {
    let (b, _, w, c) = nhwc(x);
    let (oh, ow) = (y_shape[1], y_shape[2]);
    let per = x.sample_len();
    let mut dx = vec![0.0f64; x.len()];
    for n in 0..b {
        let xs = x.sample(n);
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let a = window_argmax(xs, w, c, oy * stride, ox * stride, window, ch);
                    dx[n * per + a] += dy[((n * oh + oy) * ow + ox) * c + ch];
                }
            }
        }
    }
    dx
}

/// Largest singular value of a dense `(out, in)` matrix or of a conv kernel
/// reshaped to `(kh*kw*in, out)`, by power iteration on the Gram matrix.
///
/// Stops when successive estimates differ by less than `1e-6` relative, or
/// after 200 iterations.
pub fn spectral_norm(weight: &Tensor) -> f64 {
    let shape = weight.shape();
    let cols = match shape.len() {
        0 => 1,
        1 => 1,
        _ => *shape.last().unwrap(),
    };
    let rows = weight.len() / cols.max(1);
    let m: Vec<f64> = weight.data().iter().map(|&v| v as f64).collect();
    if m.iter().all(|&v| v == 0.0) {
        return 0.0;
    }
    // Fixed pseudo-random start so the iterate is not orthogonal to the top
    // singular vector except on a measure-zero set.
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_5eed);
    let mut v: Vec<f64> = (0..cols).map(|_| rng.gen_range(0.5..1.5)).collect();
    normalize(&mut v);
    let mut u = vec![0.0f64; rows];
    let mut sigma = 0.0f64;
    for _ in 0..200 {
        for (r, ur) in u.iter_mut().enumerate() {
            *ur = m[r * cols..(r + 1) * cols].iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        let est = norm(&u);
        for x in v.iter_mut() {
            *x = 0.0;
        }
        for (r, &ur) in u.iter().enumerate() {
            for (x, &a) in v.iter_mut().zip(&m[r * cols..(r + 1) * cols]) {
                *x += a * ur;
            }
        }
        let done = sigma > 0.0 && (est - sigma).abs() <= 1e-6 * est;
        sigma = est;
        if normalize(&mut v) == 0.0 || done {
            break;
        }
    }
    sigma
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = norm(v);
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
    n
}

/// Frobenius norm with `f64` accumulation.
pub fn frobenius_norm(weight: &Tensor) -> f64 {
    weight.sum_squares().sqrt()
}

/// Fraction of rows whose `labels[n]` logit strictly exceeds every other
/// logit. Ties count as errors.
pub fn correct_mask(logits: &Tensor, labels: &[usize]) -> Vec<bool> {
    let c = *logits.shape().last().unwrap();
    logits
        .data()
        .chunks(c)
        .zip(labels)
        .map(|(row, &y)| {
            let t = row[y];
            row.iter().enumerate().all(|(j, &v)| j == y || t > v)
        })
        .collect()
}

/// Index of the largest logit other than `exclude` (first on ties).
pub fn runner_up(row: &[f32], exclude: usize) -> usize {
    let mut best = usize::MAX;
    let mut best_v = f32::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if j != exclude && (best == usize::MAX || v > best_v) {
            best = j;
            best_v = v;
        }
    }
    best
}
