//! Criterion-level checks returning the worst observed deviation, so the
//! integration tests and the acceptance report share one implementation.

use super::*;
use gengap_core::data::{Dataset, LabeledBatch, Split};
use gengap_core::measures::clustering::{davies_bouldin, Aggregation};
use gengap_core::measures::{
    margin_distribution, margin_measure, mixup_measure, MarginConfig, Normalization, SampleBudget, Summary,
};
use gengap_core::nn::{
    correct_mask, forward, forward_from, grad_wrt_activation, grad_wrt_weights, ActivationTrace, Mode,
};
use gengap_core::scoring::{conditional_mi_score, kendall_tau, CmiConfig, ScoreInput, ScoreRecord};
use gengap_core::vicinal::{mixup_pairs, MixupSpec};
use nalgebra::DMatrix;
use std::collections::BTreeMap;

#[derive(Debug, Default, Clone, Copy)]
pub struct Deviation {
    pub worst: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl Deviation {
    fn add(&mut self, e: f64) {
        self.worst = self.worst.max(e);
        self.checked += 1;
    }
}

fn max_abs(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y).abs()).fold(0.0, f64::max)
}

/// Conv, max-pool and dense forward passes against direct loops. Each
/// instance builds a conv/pool/dense stack and compares every layer.
pub fn kernel_forward(seed: u64, instances: usize) -> Deviation {
    let mut r = rng(seed);
    let mut dev = Deviation::default();
    while dev.checked < instances {
        let h = r.gen_range(3..9);
        let w = r.gen_range(3..9);
        let cin = r.gen_range(1..4);
        let cout = r.gen_range(1..5);
        let k = r.gen_range(1..4).min(h).min(w);
        let stride = r.gen_range(1..3);
        let same = r.gen_bool(0.5);
        let padding = if same { Padding::Same } else { Padding::Valid };
        let c = conv(k, cin, cout, stride, padding, &mut r);
        let (_, out_shape) = {
            let x = Tensor::zeros(vec![1, h, w, cin]);
            let Layer::Conv2d(cv) = &c else { unreachable!() };
            naive_conv(&x, &cv.kernel, &cv.bias, stride, same)
        };
        let _ = out_shape;
        let x = random_tensor(vec![2, h, w, cin], &mut r, -1.0, 1.0);
        let Layer::Conv2d(cv) = &c else { unreachable!() };
        let (cshape, cref) = naive_conv(&x, &cv.kernel, &cv.bias, stride, same);
        let pool = cshape[1] >= 2 && cshape[2] >= 2;
        let mut layers = vec![c.clone()];
        let (pshape, pref) = if pool {
            let conv_t = Tensor::new(cshape.clone(), cref.iter().map(|&v| v as f32).collect()).unwrap();
            layers.push(Layer::MaxPool { window: 2, stride: 1 });
            naive_maxpool(&conv_t, 2, 1)
        } else {
            (cshape.clone(), cref.clone())
        };
        let features: usize = pshape[1..].iter().product();
        let d = dense(features, 3, &mut r);
        layers.push(Layer::Flatten);
        layers.push(d.clone());
        let model = ModelSpec::new(vec![h, w, cin], 3, layers).unwrap();
        let capture: Vec<usize> = (1..=model.num_layers()).collect();
        let out = forward(&model, &x, &capture, Mode::Eval).unwrap();
        let mut e = max_abs(out.trace.get(1).unwrap().data(), &cref);
        if pool {
            e = e.max(max_abs(out.trace.get(2).unwrap().data(), &pref));
        }
        let flat = out.trace.get(model.num_layers() - 1).unwrap();
        let Layer::Dense(dl) = &d else { unreachable!() };
        e = e.max(max_abs(out.logits.data(), &naive_dense(flat, &dl.weight, &dl.bias)));
        dev.add(e);
    }
    dev
}

fn rel_err(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / an.abs().max(fd.abs()).max(1e-2)
}

/// Central difference of `f` at 0 with step `h`, or `None` when the
/// coordinate sits on a kink (ReLU at zero, tied max-pool inputs): the two
/// one-sided slopes disagree, or the estimate moves when `h` is halved.
fn central_difference(f: impl Fn(f32) -> f64, h: f32) -> Option<f64> {
    let (plus, zero, minus) = (f(h), f(0.0), f(-h));
    let (fwd, bwd) = ((plus - zero) / h as f64, (zero - minus) / h as f64);
    let half = (f(h / 2.0) - f(-h / 2.0)) / h as f64;
    let full = (plus - minus) / (2.0 * h as f64);
    (rel_err(fwd, bwd) <= 1e-2 && rel_err(full, half) <= 1e-3).then_some(half)
}

/// Central differences of `logit_i - logit_j` w.r.t. activation `k`.
/// Coordinates on or near a kink are skipped and counted.
pub fn activation_gradients(seed: u64, models: usize, coords: usize) -> Deviation {
    let mut r = rng(seed);
    let mut dev = Deviation::default();
    let h = 1e-2f32;
    for _ in 0..models {
        let model = random_model(&mut r);
        let x = random_tensor([vec![2], model.input_shape().to_vec()].concat(), &mut r, 0.0, 1.0);
        let k = r.gen_range(0..=model.logits_index());
        let acts = forward(&model, &x, &[k], Mode::Eval)
            .unwrap()
            .trace
            .get(k)
            .unwrap()
            .clone();
        let c = model.classes();
        let heads: Vec<(usize, usize)> = (0..2)
            .map(|_| {
                let i = r.gen_range(0..c);
                (i, (i + r.gen_range(1..c)) % c)
            })
            .collect();
        let g = grad_wrt_activation(&model, k, &acts, &heads).unwrap();
        let f = |a: &Tensor, n: usize| -> f64 {
            let l = forward_from(&model, k, a).unwrap();
            let row = &l.data()[n * c..(n + 1) * c];
            row[heads[n].0] as f64 - row[heads[n].1] as f64
        };
        let per = acts.sample_len();
        for _ in 0..coords {
            let n = r.gen_range(0..2);
            let idx = n * per + r.gen_range(0..per);
            let at = |step: f32| {
                let mut p = acts.clone();
                p.data_mut()[idx] += step;
                f(&p, n)
            };
            match central_difference(at, h) {
                Some(fd) => dev.add(rel_err(fd, g.data()[idx] as f64)),
                None => dev.skipped += 1,
            }
        }
    }
    dev
}

/// Central differences of the mean cross-entropy w.r.t. weights and biases,
/// with dropout masks held fixed by the seed.
pub fn weight_gradients(seed: u64, models: usize, coords: usize) -> Deviation {
    let mut r = rng(seed);
    let mut dev = Deviation::default();
    let h = 1e-2f32;
    for _ in 0..models {
        let model = random_model(&mut r);
        let x = random_tensor([vec![3], model.input_shape().to_vec()].concat(), &mut r, 0.0, 1.0);
        let labels: Vec<usize> = (0..3).map(|_| r.gen_range(0..model.classes())).collect();
        let batch = LabeledBatch {
            inputs: x,
            labels,
            ids: vec![0, 1, 2],
        };
        let drop_seed = r.gen();
        let grads = grad_wrt_weights(&model, &batch, drop_seed).unwrap();
        let nparams = grads.layers.len();
        for _ in 0..coords {
            let li = r.gen_range(0..nparams);
            let bias = r.gen_bool(0.3);
            let pg = &grads.layers[li];
            let target = if bias { &pg.bias } else { &pg.weight };
            let idx = r.gen_range(0..target.len());
            let an = target.data()[idx] as f64;
            let loss = |step: f32| {
                let mut m = model.clone();
                let (_, w, b) = m.param_tensors_mut().nth(li).unwrap();
                let t = if bias { b } else { w };
                t.data_mut()[idx] += step;
                grad_wrt_weights(&m, &batch, drop_seed).unwrap().loss
            };
            match central_difference(loss, h) {
                Some(fd) => dev.add(rel_err(fd, an)),
                None => dev.skipped += 1,
            }
        }
    }
    dev
}

/// Number of `(model, k)` splices whose logits differ from the full pass
/// in any bit, and the number of splices tried.
pub fn splice(seed: u64, models: usize) -> (usize, usize) {
    let mut r = rng(seed);
    let (mut bad, mut tried) = (0, 0);
    for _ in 0..models {
        let model = random_model(&mut r);
        let x = random_tensor([vec![3], model.input_shape().to_vec()].concat(), &mut r, 0.0, 1.0);
        let all: Vec<usize> = (0..=model.num_layers()).collect();
        let out = forward(&model, &x, &all, Mode::Eval).unwrap();
        for k in 0..=model.logits_index() {
            tried += 1;
            let l = forward_from(&model, k, out.trace.get(k).unwrap()).unwrap();
            let same = l
                .data()
                .iter()
                .zip(out.logits.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                bad += 1;
            }
        }
    }
    (bad, tried)
}

pub fn random_points(r: &mut ChaCha8Rng, n: usize, dim: usize, classes: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let centres: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| r.gen_range(-5.0..5.0)).collect())
        .collect();
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let pts = labels
        .iter()
        .map(|&l| centres[l].iter().map(|c| c + r.gen_range(-2.0..2.0)).collect())
        .collect();
    (pts, labels)
}

fn dbi_of(points: &[Vec<f64>], labels: &[usize], agg: Aggregation) -> f64 {
    let dim = points[0].len();
    let flat: Vec<f64> = points.iter().flatten().copied().collect();
    davies_bouldin(&flat, dim, labels, 2.0, agg).unwrap().value
}

/// Library DBI against the brute-force oracle (both aggregations).
pub fn dbi_oracle(seed: u64, sets: usize) -> Deviation {
    let mut r = rng(seed);
    let mut dev = Deviation::default();
    for _ in 0..sets {
        let classes = r.gen_range(2..6);
        let n = classes * r.gen_range(2..8);
        let dim = r.gen_range(1..6);
        let (pts, labels) = random_points(&mut r, n, dim, classes);
        for (agg, max) in [(Aggregation::Mean, false), (Aggregation::Max, true)] {
            let want = brute_dbi(&pts, &labels, max);
            dev.add((dbi_of(&pts, &labels, agg) - want).abs() / want.abs().max(1.0));
        }
    }
    dev
}

fn random_rotation(r: &mut ChaCha8Rng, dim: usize) -> DMatrix<f64> {
    let m = DMatrix::from_fn(dim, dim, |_, _| r.gen_range(-1.0..1.0));
    m.qr().q()
}

/// Relative DBI change under random rotation + translation, and under a
/// positive rescaling.
pub fn dbi_invariance(seed: u64, sets: usize) -> (Deviation, Deviation) {
    let mut r = rng(seed);
    let (mut rot, mut scale) = (Deviation::default(), Deviation::default());
    for _ in 0..sets {
        let classes = r.gen_range(2..5);
        let dim = r.gen_range(2..6);
        let (pts, labels) = random_points(&mut r, classes * 5, dim, classes);
        let base = dbi_of(&pts, &labels, Aggregation::Mean);
        let q = random_rotation(&mut r, dim);
        let t: Vec<f64> = (0..dim).map(|_| r.gen_range(-10.0..10.0)).collect();
        let moved: Vec<Vec<f64>> = pts
            .iter()
            .map(|p| {
                let v = &q * nalgebra::DVector::from_column_slice(p);
                v.iter().zip(&t).map(|(a, b)| a + b).collect()
            })
            .collect();
        rot.add((dbi_of(&moved, &labels, Aggregation::Mean) - base).abs() / base);
        let c = r.gen_range(0.01..100.0);
        let scaled: Vec<Vec<f64>> = pts.iter().map(|p| p.iter().map(|v| v * c).collect()).collect();
        scale.add((dbi_of(&scaled, &labels, Aggregation::Mean) - base).abs() / base);
    }
    (rot, scale)
}

/// Per-class-averaged 0-1 error of the first parents of each mixup pair,
/// by direct evaluation.
pub fn parent_error(model: &ModelSpec, data: &Dataset, spec: &MixupSpec, budget: SampleBudget) -> f64 {
    let idx = data.subsample_indices(budget.count(data.len()), spec.seed);
    let batch = data.batch(&idx);
    let mut trace = ActivationTrace::default();
    trace.insert(0, batch.inputs.clone());
    let mixed = mixup_pairs(&batch, data.classes(), spec, &trace).unwrap();
    let firsts: Vec<usize> = mixed.parents.iter().map(|p| p.0).collect();
    let inputs = batch.inputs.select(&firsts).unwrap();
    let labels: Vec<usize> = firsts.iter().map(|&i| batch.labels[i]).collect();
    let logits = forward(model, &inputs, &[], Mode::Eval).unwrap().logits;
    let ok = correct_mask(&logits, &labels);
    let mut per: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (&y, &c) in labels.iter().zip(&ok) {
        let e = per.entry(y).or_default();
        e.0 += !c as usize;
        e.1 += 1;
    }
    per.values().map(|&(e, n)| e as f64 / n as f64).sum::<f64>() / per.len() as f64
}

/// `(measure at lambda = 1, direct parent error, every pair label-wise)`.
pub fn mixup_identity(model: &ModelSpec, data: &Dataset, seed: u64, budget: SampleBudget) -> (f64, f64, bool) {
    let spec = MixupSpec {
        lambda: 1.0,
        layer: 0,
        seed,
    };
    let v = mixup_measure(model, data, &spec, budget).unwrap().value;
    let idx = data.subsample_indices(budget.count(data.len()), seed);
    let batch = data.batch(&idx);
    let mut trace = ActivationTrace::default();
    trace.insert(0, batch.inputs.clone());
    let mixed = mixup_pairs(&batch, data.classes(), &spec, &trace).unwrap();
    let labelwise = mixed
        .parents
        .iter()
        .zip(&mixed.labels)
        .all(|(&(a, b), &y)| batch.labels[a] == y && batch.labels[b] == y);
    (v, parent_error(model, data, &spec, budget), labelwise)
}

/// Random linear classifier on points in `[0, 1]^dim`.
pub fn linear_toy(seed: u64, classes: usize, dim: usize, n: usize) -> (ModelSpec, Vec<Vec<f64>>, Vec<f64>, Dataset) {
    let mut r = rng(seed);
    let w: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| r.gen_range(-2.0..2.0)).collect())
        .collect();
    let b: Vec<f64> = (0..classes).map(|_| r.gen_range(-0.5..0.5)).collect();
    let model = linear_model(w.clone(), b.clone());
    let x = random_tensor(vec![n, 1, 1, dim], &mut r, 0.0, 1.0);
    let labels = (0..n).map(|i| i % classes).collect();
    let data = Dataset::new(x, labels, classes, Split::Train).unwrap();
    // weights as stored (f32) so the oracle sees the same model
    let w32 = w
        .iter()
        .map(|row| row.iter().map(|&v| v as f32 as f64).collect())
        .collect();
    let b32 = b.iter().map(|&v| v as f32 as f64).collect();
    (model, w32, b32, data)
}

/// Exact signed distance of each sample to the hyperplane separating its
/// label from the runner-up class.
pub fn hyperplane_distances(w: &[Vec<f64>], b: &[f64], data: &Dataset) -> Vec<f64> {
    let dim = w[0].len();
    data.images()
        .data()
        .chunks(dim)
        .zip(data.labels())
        .map(|(x, &y)| {
            let f: Vec<f64> = w
                .iter()
                .zip(b)
                .map(|(row, bi)| row.iter().zip(x).map(|(a, &v)| a * v as f64).sum::<f64>() + bi)
                .collect();
            let logits32: Vec<f32> = f.iter().map(|&v| v as f32).collect();
            let j = gengap_core::nn::runner_up(&logits32, y);
            let diff: Vec<f64> = w[y].iter().zip(&w[j]).map(|(a, c)| a - c).collect();
            let norm = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
            let num = diff.iter().zip(x).map(|(d, &v)| d * v as f64).sum::<f64>() + b[y] - b[j];
            num / norm
        })
        .collect()
}

/// Linear-model margins against the exact hyperplane distance (max
/// relative deviation).
pub fn margin_linear(seed: u64, trials: usize) -> Deviation {
    let mut dev = Deviation::default();
    for t in 0..trials {
        let classes = 2 + t % 3;
        let (model, w, b, data) = linear_toy(seed + t as u64, classes, 4, 40);
        let dist = margin_distribution(&model, 0, data.images(), data.labels(), Normalization::None).unwrap();
        let want = hyperplane_distances(&w, &b, &data);
        for (got, want) in dist.raw.iter().zip(&want) {
            dev.add((got - want).abs() / want.abs().max(1.0));
        }
    }
    dev
}

fn brute_tv(data: &Dataset) -> f64 {
    let n = data.len() as f64;
    let dim = data.images().sample_len();
    let mut total = 0.0;
    for c in 0..dim {
        let col: Vec<f64> = (0..data.len()).map(|i| data.images().sample(i)[c] as f64).collect();
        let mean = col.iter().sum::<f64>() / n;
        total += col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    }
    total.sqrt()
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

/// Margin-summary values against a full recomputation of the normalized
/// distribution: median (quantile set {0.5}) and mean.
pub fn margin_summary(seed: u64, trials: usize) -> Deviation {
    let mut dev = Deviation::default();
    for t in 0..trials {
        let (model, w, b, data) = linear_toy(seed + 100 + t as u64, 3, 2, 31 + 2 * t);
        let tv = brute_tv(&data);
        let d: Vec<f64> = hyperplane_distances(&w, &b, &data).iter().map(|v| v / tv).collect();
        for (summary, want) in [
            (Summary::QuantileMean, -median(&d)),
            (Summary::Mean, -d.iter().sum::<f64>() / d.len() as f64),
        ] {
            let cfg = MarginConfig {
                summary,
                quantiles: vec![0.5],
                ..MarginConfig::default()
            };
            let v = margin_measure(&model, &data, &cfg, SampleBudget::full(), None, None)
                .unwrap()
                .value;
            dev.add((v - want).abs() / want.abs().max(1.0));
        }
    }
    dev
}

/// Normalized margins after scaling the representation by `c` and the
/// weights by `1/c` (relative deviation).
pub fn margin_scale_invariance(seed: u64, trials: usize) -> Deviation {
    let mut dev = Deviation::default();
    let mut r = rng(seed);
    for t in 0..trials {
        let (_, w, b, data) = linear_toy(seed + 200 + t as u64, 3, 3, 30);
        let c = [0.25, 4.0, 17.0][t % 3] * r.gen_range(0.9..1.1);
        let base = linear_model(w.clone(), b.clone());
        let scaled = linear_model(
            w.iter().map(|row| row.iter().map(|v| v / c).collect()).collect(),
            b.clone(),
        );
        let reps = data.images().map(|v| (v as f64 * c) as f32);
        let d0 = margin_distribution(&base, 0, data.images(), data.labels(), Normalization::TotalVariation).unwrap();
        let d1 = margin_distribution(&scaled, 0, &reps, data.labels(), Normalization::TotalVariation).unwrap();
        for (a, b) in d0.normalized.iter().zip(&d1.normalized) {
            dev.add((a - b).abs() / a.abs().max(1.0));
        }
    }
    dev
}

/// Random score input over `axes` binary hyperparameters.
pub fn random_zoo(r: &mut ChaCha8Rng, n: usize, axes: usize) -> (ScoreInput, Vec<Vec<f64>>) {
    let names: Vec<String> = (0..axes).map(|a| format!("h{a}")).collect();
    let axis_values: Vec<Vec<f64>> = (0..axes)
        .map(|_| (0..n).map(|_| r.gen_range(0..2) as f64).collect())
        .collect();
    let records = (0..n)
        .map(|m| ScoreRecord {
            // coarse grids so ties occur
            value: r.gen_range(0..6) as f64,
            gap: r.gen_range(0..5) as f64 * 0.1,
            hyperparameters: names.iter().zip(&axis_values).map(|(k, v)| (k.clone(), v[m])).collect(),
        })
        .collect();
    (ScoreInput::new(records, names).unwrap(), axis_values)
}

/// Library CMI against the enumeration oracle on random small zoos.
/// Returns the deviation and the number of zoos where both agreed the
/// score was undefined.
pub fn cmi_oracle(seed: u64, zoos: usize) -> (Deviation, usize) {
    let mut r = rng(seed);
    let mut dev = Deviation::default();
    let mut undefined = 0;
    for _ in 0..zoos {
        let n = r.gen_range(3..11);
        let axes = r.gen_range(1..4);
        let (input, axis_values) = random_zoo(&mut r, n, axes);
        let values: Vec<f64> = input.records.iter().map(|x| x.value).collect();
        let gaps: Vec<f64> = input.records.iter().map(|x| x.gap).collect();
        if !axis_values.iter().any(|a| a.iter().any(|&v| v != a[0])) {
            continue;
        }
        for max_size in 0..=2 {
            let cfg = CmiConfig {
                max_size,
                ..CmiConfig::default()
            };
            let got = conditional_mi_score(&input, &cfg).ok().map(|s| s.score);
            let want = oracle_cmi(&values, &gaps, &axis_values, max_size);
            match (got, want) {
                (Some(g), Some(w)) => dev.add((g - w).abs()),
                (None, None) => undefined += 1,
                _ => dev.add(f64::INFINITY),
            }
        }
    }
    (dev, undefined)
}

/// Counts inputs whose tau or CMI changes (in any bit) under `exp` and
/// `3x + 7` transforms of the measure.
pub fn monotone_invariance(seed: u64, zoos: usize) -> (usize, usize) {
    let mut r = rng(seed);
    let (mut changed, mut tried) = (0, 0);
    for _ in 0..zoos {
        let n = r.gen_range(4..11);
        let (input, _) = random_zoo(&mut r, n, 2);
        let base_tau = kendall_tau(&input).ok();
        let base_cmi = conditional_mi_score(&input, &CmiConfig::default())
            .ok()
            .map(|s| s.score);
        for f in [|v: f64| v.exp(), |v: f64| 3.0 * v + 7.0] {
            let mut t = input.clone();
            for rec in &mut t.records {
                rec.value = f(rec.value);
            }
            tried += 1;
            let tau = kendall_tau(&t).ok();
            let cmi = conditional_mi_score(&t, &CmiConfig::default()).ok().map(|s| s.score);
            if tau.map(f64::to_bits) != base_tau.map(f64::to_bits)
                || cmi.map(f64::to_bits) != base_cmi.map(f64::to_bits)
            {
                changed += 1;
            }
        }
    }
    (changed, tried)
}

/// CMI score when measure and gap are independent, with `n` models on one
/// binary axis (`n (n - 1) / 2` model pairs).
pub fn independence_score(seed: u64, n: usize) -> f64 {
    let mut r = rng(seed);
    let records = (0..n)
        .map(|m| ScoreRecord {
            value: r.gen(),
            gap: r.gen(),
            hyperparameters: BTreeMap::from([("a".to_string(), (m % 2) as f64)]),
        })
        .collect();
    let input = ScoreInput::new(records, vec!["a".into()]).unwrap();
    conditional_mi_score(&input, &CmiConfig::default()).unwrap().score
}
