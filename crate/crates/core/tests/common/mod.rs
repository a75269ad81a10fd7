//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

pub mod checks;
pub mod pipeline;

use gengap_core::model::{Conv2d, Dense, Layer, ModelSpec, Padding};
use gengap_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Direct six-loop convolution in `f64`; zero padding split with the
/// smaller half before.
pub fn naive_conv(x: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, same: bool) -> (Vec<usize>, Vec<f64>) {
    let [n, h, w, cin] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [kh, kw, _, cout] = [
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    ];
    let geom = |size: usize, k: usize| -> (usize, isize) {
        if same {
            let out = size.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(size);
            (out, (total / 2) as isize)
        } else {
            ((size - k) / stride + 1, 0)
        }
    };
    let (oh, ph) = geom(h, kh);
    let (ow, pw) = geom(w, kw);
    let xv = |b: usize, i: isize, j: isize, c: usize| -> f64 {
        if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
            0.0
        } else {
            x.data()[((b * h + i as usize) * w + j as usize) * cin + c] as f64
        }
    };
    let mut out = vec![0.0; n * oh * ow * cout];
    for b in 0..n {
        for oi in 0..oh {
            for oj in 0..ow {
                for co in 0..cout {
                    let mut s = bias.data()[co] as f64;
                    for a in 0..kh {
                        for c in 0..kw {
                            for ci in 0..cin {
                                let i = (oi * stride) as isize + a as isize - ph;
                                let j = (oj * stride) as isize + c as isize - pw;
                                s += xv(b, i, j, ci) * kernel.data()[((a * kw + c) * cin + ci) * cout + co] as f64;
                            }
                        }
                    }
                    out[((b * oh + oi) * ow + oj) * cout + co] = s;
                }
            }
        }
    }
    (vec![n, oh, ow, cout], out)
}

pub fn naive_maxpool(x: &Tensor, window: usize, stride: usize) -> (Vec<usize>, Vec<f64>) {
    let [n, h, w, c] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = Vec::with_capacity(n * oh * ow * c);
    for b in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                for ch in 0..c {
                    let mut m = f64::NEG_INFINITY;
                    for a in 0..window {
                        for d in 0..window {
                            m = m.max(x.data()[((b * h + i * stride + a) * w + j * stride + d) * c + ch] as f64);
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    (vec![n, oh, ow, c], out)
}

pub fn naive_dense(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Vec<f64> {
    let (out_f, in_f) = (weight.shape()[0], weight.shape()[1]);
    let mut out = Vec::new();
    for row in x.data().chunks(in_f) {
        for o in 0..out_f {
            let s: f64 = (0..in_f)
                .map(|i| weight.data()[o * in_f + i] as f64 * row[i] as f64)
                .sum();
            out.push(s + bias.data()[o] as f64);
        }
    }
    out
}

pub fn conv(kh: usize, cin: usize, cout: usize, stride: usize, padding: Padding, rng: &mut ChaCha8Rng) -> Layer {
    let scale = (2.0 / (kh * kh * cin) as f32).sqrt();
    Layer::Conv2d(Conv2d {
        kernel: random_tensor(vec![kh, kh, cin, cout], rng, -scale, scale),
        bias: random_tensor(vec![cout], rng, -0.1, 0.1),
        stride,
        padding,
    })
}

pub fn dense(inf: usize, outf: usize, rng: &mut ChaCha8Rng) -> Layer {
    let scale = (2.0 / inf as f32).sqrt();
    Layer::Dense(Dense {
        weight: random_tensor(vec![outf, inf], rng, -scale, scale),
        bias: random_tensor(vec![outf], rng, -0.1, 0.1),
    })
}

/// A random valid convolutional network; layer choices are redrawn until
/// the shapes compose.
pub fn random_model(rng: &mut ChaCha8Rng) -> ModelSpec {
    loop {
        let h = rng.gen_range(5..10);
        let w = rng.gen_range(5..10);
        let c = rng.gen_range(1..4);
        let classes = rng.gen_range(2..5);
        let mut layers = Vec::new();
        let mut shape = [h, w, c];
        for _ in 0..rng.gen_range(1..3) {
            let k = rng.gen_range(1..4);
            let stride = rng.gen_range(1..3);
            let padding = if rng.gen_bool(0.5) {
                Padding::Same
            } else {
                Padding::Valid
            };
            let cout = rng.gen_range(1..5);
            layers.push(conv(k, shape[2], cout, stride, padding, rng));
            layers.push(Layer::Relu);
            let dims = |s: usize| match padding {
                Padding::Same => Some(s.div_ceil(stride)),
                Padding::Valid => (s >= k).then(|| (s - k) / stride + 1),
            };
            match (dims(shape[0]), dims(shape[1])) {
                (Some(a), Some(b)) => shape = [a, b, cout],
                _ => break,
            }
            if rng.gen_bool(0.4) && shape[0] >= 2 && shape[1] >= 2 {
                let stride = rng.gen_range(1..3);
                layers.push(Layer::MaxPool { window: 2, stride });
                shape = [(shape[0] - 2) / stride + 1, (shape[1] - 2) / stride + 1, shape[2]];
            }
        }
        if rng.gen_bool(0.3) {
            layers.push(Layer::Dropout { rate: 0.25 });
        }
        let features = if rng.gen_bool(0.5) {
            layers.push(Layer::GlobalAvgPool);
            shape[2]
        } else {
            layers.push(Layer::Flatten);
            shape.iter().product()
        };
        let hidden = rng.gen_range(3..7);
        layers.push(dense(features, hidden, rng));
        layers.push(Layer::Relu);
        layers.push(dense(hidden, classes, rng));
        if rng.gen_bool(0.3) {
            layers.push(Layer::Softmax);
        }
        if let Ok(m) = ModelSpec::new(vec![h, w, c], classes, layers) {
            return m;
        }
    }
}

/// Linear classifier `f(x) = W x + b` on `(1, 1, d)` inputs.
pub fn linear_model(weight: Vec<Vec<f64>>, bias: Vec<f64>) -> ModelSpec {
    let (o, i) = (weight.len(), weight[0].len());
    let w: Vec<f32> = weight.iter().flatten().map(|&v| v as f32).collect();
    let layer = Layer::Dense(Dense {
        weight: Tensor::new(vec![o, i], w).unwrap(),
        bias: Tensor::new(vec![o], bias.iter().map(|&v| v as f32).collect()).unwrap(),
    });
    ModelSpec::new(vec![1, 1, i], o, vec![Layer::Flatten, layer]).unwrap()
}

/// Davies-Bouldin by explicit per-class lists: scatter is the root mean
/// squared distance to the centroid, separation the centroid distance.
pub fn brute_dbi(points: &[Vec<f64>], labels: &[usize], use_max: bool) -> f64 {
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort();
    classes.dedup();
    let dim = points[0].len();
    let mut centroid = Vec::new();
    let mut scatter = Vec::new();
    for &c in &classes {
        let members: Vec<&Vec<f64>> = points
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == c)
            .map(|(p, _)| p)
            .collect();
        let mu: Vec<f64> = (0..dim)
            .map(|d| members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64)
            .collect();
        let ms: f64 = members
            .iter()
            .map(|p| p.iter().zip(&mu).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .sum::<f64>()
            / members.len() as f64;
        scatter.push(ms.sqrt());
        centroid.push(mu);
    }
    let k = classes.len();
    let mut total = 0.0;
    for i in 0..k {
        let ratios: Vec<f64> = (0..k)
            .filter(|&j| j != i)
            .map(|j| {
                let m = centroid[i]
                    .iter()
                    .zip(&centroid[j])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                (scatter[i] + scatter[j]) / m
            })
            .collect();
        total += if use_max {
            ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        } else {
            ratios.iter().sum::<f64>() / ratios.len() as f64
        };
    }
    total / k as f64
}

/// Conditional-MI score by exhaustive enumeration: every axis subset of size
/// at most `max_size`, every ordered pair of distinct models inside each
/// cell, tied pairs dropped, mutual information summed term by term.
#[allow(clippy::needless_range_loop)]
pub fn oracle_cmi(values: &[f64], gaps: &[f64], axes: &[Vec<f64>], max_size: usize) -> Option<f64> {
    let n = values.len();
    let naxes = axes.len();
    let sgn = |a: f64, b: f64| (a > b) as i32 - (a < b) as i32;
    let mut best: Option<f64> = None;
    for mask in 0u32..(1 << naxes) {
        if mask.count_ones() as usize > max_size {
            continue;
        }
        let chosen: Vec<usize> = (0..naxes).filter(|a| mask & (1 << a) != 0).collect();
        let mut cells: Vec<(Vec<f64>, Vec<usize>)> = Vec::new();
        for m in 0..n {
            let key: Vec<f64> = chosen.iter().map(|&a| axes[a][m]).collect();
            match cells.iter_mut().find(|(k, _)| *k == key) {
                Some((_, v)) => v.push(m),
                None => cells.push((key, vec![m])),
            }
        }
        let mut cell_counts: Vec<HashMap<(i32, i32), usize>> = Vec::new();
        for (_, members) in &cells {
            let mut counts = HashMap::new();
            for &a in members {
                for &b in members {
                    if a == b {
                        continue;
                    }
                    let (vm, vg) = (sgn(values[a], values[b]), sgn(gaps[a], gaps[b]));
                    if vm != 0 && vg != 0 {
                        *counts.entry((vm, vg)).or_insert(0usize) += 1;
                    }
                }
            }
            cell_counts.push(counts);
        }
        let total: usize = cell_counts.iter().map(|c| c.values().sum::<usize>()).sum();
        if total == 0 {
            continue;
        }
        let (mut mi, mut h) = (0.0, 0.0);
        for counts in &cell_counts {
            let cn: usize = counts.values().sum();
            if cn == 0 {
                continue;
            }
            let w = cn as f64 / total as f64;
            let p = |vm: Option<i32>, vg: Option<i32>| -> f64 {
                counts
                    .iter()
                    .filter(|((a, b), _)| vm.is_none_or(|x| x == *a) && vg.is_none_or(|x| x == *b))
                    .map(|(_, &c)| c)
                    .sum::<usize>() as f64
                    / cn as f64
            };
            for vm in [-1, 1] {
                for vg in [-1, 1] {
                    let pj = p(Some(vm), Some(vg));
                    if pj > 0.0 {
                        mi += w * pj * (pj / (p(Some(vm), None) * p(None, Some(vg)))).ln();
                    }
                }
            }
            for vg in [-1, 1] {
                let pg = p(None, Some(vg));
                if pg > 0.0 {
                    h -= w * pg * pg.ln();
                }
            }
        }
        if h > 0.0 {
            let r = 100.0 * (mi / h).clamp(0.0, 1.0);
            best = Some(best.map_or(r, |b| b.min(r)));
        }
    }
    best
}

/// Kendall tau over untied pairs, by enumeration.
pub fn oracle_tau(x: &[f64], y: &[f64]) -> f64 {
    let (mut c, mut d) = (0, 0);
    for i in 0..x.len() {
        for j in 0..i {
            let s = (x[i] - x[j]) * (y[i] - y[j]);
            if s > 0.0 {
                c += 1;
            } else if s < 0.0 {
                d += 1;
            }
        }
    }
    (c - d) as f64 / (c + d) as f64
}
