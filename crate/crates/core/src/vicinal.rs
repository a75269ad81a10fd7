//! Vicinal distributions around a labeled batch: photometric/geometric
//! augmentation and label-wise mixup of inputs or hidden representations.
//!
//! Every random draw comes from a ChaCha stream keyed by
//! `(seed, sample id, op)`, so a sample's perturbation does not depend on
//! which batch it travels in or on thread scheduling.

use crate::data::LabeledBatch;
use crate::nn::ActivationTrace;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum VicinalError {
    #[error("invalid augment config: {0}")]
    Config(String),
    #[error("{op} needs 3 channels, input has {channels}")]
    Channels { op: &'static str, channels: usize },
    #[error("augmentation expects NHWC images, got {0:?}")]
    Rank(Vec<usize>),
    #[error("mixup coefficient {0} outside [0, 1]")]
    Lambda(f32),
    #[error("activation trace has no layer {0}")]
    MissingLayer(usize),
    #[error("no class has two samples to pair")]
    NoPairs,
    #[error("trace batch {trace} does not match {labels} labels")]
    BatchMismatch { trace: usize, labels: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum AugmentOp {
    Flip = 0,
    Zoom = 1,
    Hue = 2,
    Saturation = 3,
    Brightness = 4,
    Contrast = 5,
}

/// Keyed random stream for one `(seed, sample, op)` triple.
pub fn op_rng(seed: u64, sample: usize, op: AugmentOp) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((sample as u64) << 8) | op as u64);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub hue_max_delta: f32,
    pub saturation: [f32; 2],
    pub brightness_max_delta: f32,
    pub contrast: [f32; 2],
    /// Fraction of the side length cropped away before resizing back.
    pub zoom: [f32; 2],
    pub horizontal_flip: bool,
    /// Restrict to contrast, flip and zoom.
    pub generic: bool,
    /// Error instead of skipping colour ops on non-RGB input.
    pub strict: bool,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            hue_max_delta: 0.5,
            saturation: [0.6, 1.2],
            brightness_max_delta: 0.5,
            contrast: [0.7, 1.0],
            zoom: [0.01, 0.15],
            horizontal_flip: true,
            generic: false,
            strict: false,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn generic() -> Self {
        Self {
            generic: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), VicinalError> {
        let bad = |m: String| Err(VicinalError::Config(m));
        for (name, [lo, hi]) in [
            ("saturation", self.saturation),
            ("contrast", self.contrast),
            ("zoom", self.zoom),
        ] {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi || lo < 0.0 {
                return bad(format!("{name} range [{lo}, {hi}] must be ordered and non-negative"));
            }
        }
        if self.zoom[1] >= 0.5 {
            return bad(format!("zoom fraction {} must stay below 0.5", self.zoom[1]));
        }
        if !(0.0..=0.5).contains(&self.hue_max_delta) {
            return bad(format!("hue max delta {} outside [0, 0.5]", self.hue_max_delta));
        }
        if !(self.brightness_max_delta >= 0.0 && self.brightness_max_delta.is_finite()) {
            return bad(format!(
                "brightness max delta {} must be >= 0",
                self.brightness_max_delta
            ));
        }
        Ok(())
    }

    fn colour_ops_enabled(&self) -> bool {
        !self.generic && (self.hue_max_delta > 0.0 || self.saturation != [1.0, 1.0])
    }
}

#[derive(Clone, Debug)]
pub struct Augmented {
    pub batch: LabeledBatch,
    pub notices: Vec<String>,
}

fn draw(rng: &mut ChaCha8Rng, [lo, hi]: [f32; 2]) -> f32 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

fn clip(img: &mut [f32]) {
    for v in img {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Applies flip, zoom, hue, saturation, brightness and contrast (in that
/// order) to every image. Labels and ids pass through unchanged.
pub fn augment(batch: &LabeledBatch, cfg: &AugmentConfig) -> Result<Augmented, VicinalError> {
    cfg.validate()?;
    let shape = batch.inputs.shape();
    if shape.len() != 4 {
        return Err(VicinalError::Rank(shape.to_vec()));
    }
    let (h, w, c) = (shape[1], shape[2], shape[3]);
    let mut notices = Vec::new();
    let colour = cfg.colour_ops_enabled() && c == 3;
    if cfg.colour_ops_enabled() && c != 3 {
        if cfg.strict {
            return Err(VicinalError::Channels {
                op: "hue/saturation",
                channels: c,
            });
        }
        notices.push(format!("hue/saturation skipped for {c}-channel input"));
    }
    let mut out = batch.inputs.clone();
    for (n, &id) in batch.ids.iter().enumerate() {
        let img = augment_image(out.sample(n), (h, w, c), id, cfg, colour);
        out.sample_mut(n).copy_from_slice(&img);
    }
    Ok(Augmented {
        batch: LabeledBatch {
            inputs: out,
            labels: batch.labels.clone(),
            ids: batch.ids.clone(),
        },
        notices,
    })
}

fn augment_image(
    src: &[f32],
    (h, w, c): (usize, usize, usize),
    id: usize,
    cfg: &AugmentConfig,
    colour: bool,
) -> Vec<f32> {
    let seed = cfg.seed;
    let mut img = src.to_vec();
    if cfg.horizontal_flip && op_rng(seed, id, AugmentOp::Flip).gen_bool(0.5) {
        img = flip_horizontal(&img, h, w, c);
    }
    let z = draw(&mut op_rng(seed, id, AugmentOp::Zoom), cfg.zoom);
    if z > 0.0 {
        img = zoom(&img, h, w, c, z);
        clip(&mut img);
    }
    if colour {
        if cfg.hue_max_delta > 0.0 {
            let m = cfg.hue_max_delta;
            let d = draw(&mut op_rng(seed, id, AugmentOp::Hue), [-m, m]);
            adjust_hue(&mut img, d);
            clip(&mut img);
        }
        if cfg.saturation != [1.0, 1.0] {
            let f = draw(&mut op_rng(seed, id, AugmentOp::Saturation), cfg.saturation);
            adjust_saturation(&mut img, f);
            clip(&mut img);
        }
    }
    if !cfg.generic && cfg.brightness_max_delta > 0.0 {
        let m = cfg.brightness_max_delta;
        let d = draw(&mut op_rng(seed, id, AugmentOp::Brightness), [-m, m]);
        for v in img.iter_mut() {
            *v += d;
        }
        clip(&mut img);
    }
    if cfg.contrast != [1.0, 1.0] {
        let f = draw(&mut op_rng(seed, id, AugmentOp::Contrast), cfg.contrast);
        adjust_contrast(&mut img, h * w, c, f);
        clip(&mut img);
    }
    img
}

pub fn flip_horizontal(img: &[f32], h: usize, w: usize, c: usize) -> Vec<f32> {
    let mut out = vec![0.0; img.len()];
    for y in 0..h {
        for x in 0..w {
            let src = (y * w + x) * c;
            let dst = (y * w + (w - 1 - x)) * c;
            out[dst..dst + c].copy_from_slice(&img[src..src + c]);
        }
    }
    out
}

/// Central crop keeping `(1 - frac)` of each side, bilinearly resized back
/// to `h x w` (half-pixel centres).
pub fn zoom(img: &[f32], h: usize, w: usize, c: usize, frac: f32) -> Vec<f32> {
    let keep = 1.0 - frac as f64;
    let (ch, cw) = (h as f64 * keep, w as f64 * keep);
    let (oy, ox) = ((h as f64 - ch) / 2.0, (w as f64 - cw) / 2.0);
    let sample = |y: f64, x: f64, ch_: usize| -> f64 {
        let y = y.clamp(0.0, (h - 1) as f64);
        let x = x.clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let at = |yy: usize, xx: usize| img[(yy * w + xx) * c + ch_] as f64;
        (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
    };
    let mut out = vec![0.0; img.len()];
    for y in 0..h {
        let sy = oy + (y as f64 + 0.5) * ch / h as f64 - 0.5;
        for x in 0..w {
            let sx = ox + (x as f64 + 0.5) * cw / w as f64 - 0.5;
            for k in 0..c {
                out[(y * w + x) * c + k] = sample(sy, sx, k) as f32;
            }
        }
    }
    out
}

/// RGB in `[0,1]` to HSV with hue in `[0,1)`.
pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let s = if max > 0.0 { d / max } else { 0.0 };
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    (h, s, max)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = (h6.floor() as i64).rem_euclid(6);
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn map_hsv(img: &mut [f32], f: impl Fn(f64, f64, f64) -> (f64, f64, f64)) {
    for px in img.chunks_exact_mut(3) {
        let (h, s, v) = rgb_to_hsv(px[0] as f64, px[1] as f64, px[2] as f64);
        let (h, s, v) = f(h, s, v);
        let (r, g, b) = hsv_to_rgb(h, s, v);
        px[0] = r as f32;
        px[1] = g as f32;
        px[2] = b as f32;
    }
}

/// Rotates hue by `delta` (cyclic mod 1) on an RGB image.
pub fn adjust_hue(img: &mut [f32], delta: f32) {
    map_hsv(img, |h, s, v| ((h + delta as f64).rem_euclid(1.0), s, v));
}

pub fn adjust_saturation(img: &mut [f32], factor: f32) {
    map_hsv(img, |h, s, v| (h, (s * factor as f64).clamp(0.0, 1.0), v));
}

/// `x -> mean_c + factor * (x - mean_c)` with a per-channel spatial mean.
pub fn adjust_contrast(img: &mut [f32], pixels: usize, c: usize, factor: f32) {
    let mut mean = vec![0.0f64; c];
    for px in img.chunks_exact(c) {
        for (m, &v) in mean.iter_mut().zip(px) {
            *m += v as f64;
        }
    }
    for m in mean.iter_mut() {
        *m /= pixels as f64;
    }
    for px in img.chunks_exact_mut(c) {
        for (v, &m) in px.iter_mut().zip(&mean) {
            *v = (m + factor as f64 * (*v as f64 - m)) as f32;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixupSpec {
    pub lambda: f32,
    /// Activation index mixed; 0 mixes raw inputs.
    pub layer: usize,
    pub seed: u64,
}

impl Default for MixupSpec {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            layer: 0,
            seed: 0,
        }
    }
}

/// Same-class convex combinations of captured representations.
#[derive(Clone, Debug)]
pub struct MixedBatch {
    /// `(pairs, ...)` at the mixed layer.
    pub representations: Tensor,
    pub labels: Vec<usize>,
    /// Batch positions of each pair's parents `(first, second)`.
    pub parents: Vec<(usize, usize)>,
    /// Classes present in the batch with fewer than two samples.
    pub skipped_classes: Vec<usize>,
}

/// Within each class, shuffles batch positions with a stream keyed by
/// `(seed, class)` and pairs consecutive entries; an odd leftover is
/// dropped. Returns `(class, first, second)` triples.
pub fn pair_within_classes(labels: &[usize], classes: usize, seed: u64) -> (Vec<(usize, usize, usize)>, Vec<usize>) {
    let mut by_class = vec![Vec::new(); classes];
    for (pos, &y) in labels.iter().enumerate() {
        by_class[y].push(pos);
    }
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for (class, mut members) in by_class.into_iter().enumerate() {
        if members.len() == 1 {
            skipped.push(class);
        }
        if members.len() < 2 {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(class as u64);
        members.shuffle(&mut rng);
        for p in members.chunks_exact(2) {
            pairs.push((class, p[0], p[1]));
        }
    }
    (pairs, skipped)
}

/// Label-wise mixup of the layer-`spec.layer` representations in `trace`.
pub fn mixup_pairs(
    batch: &LabeledBatch,
    classes: usize,
    spec: &MixupSpec,
    trace: &ActivationTrace,
) -> Result<MixedBatch, VicinalError> {
    if !(0.0..=1.0).contains(&spec.lambda) {
        return Err(VicinalError::Lambda(spec.lambda));
    }
    let reps = trace.get(spec.layer).ok_or(VicinalError::MissingLayer(spec.layer))?;
    if reps.batch() != batch.len() {
        return Err(VicinalError::BatchMismatch {
            trace: reps.batch(),
            labels: batch.len(),
        });
    }
    let (pairs, skipped_classes) = pair_within_classes(&batch.labels, classes, spec.seed);
    if pairs.is_empty() {
        return Err(VicinalError::NoPairs);
    }
    let lam = spec.lambda as f64;
    let per = reps.sample_len();
    let mut data = Vec::with_capacity(per * pairs.len());
    for &(_, a, b) in &pairs {
        let (xa, xb) = (reps.sample(a), reps.sample(b));
        data.extend(
            xa.iter()
                .zip(xb)
                .map(|(&u, &v)| (lam * u as f64 + (1.0 - lam) * v as f64) as f32),
        );
    }
    let mut shape = reps.shape().to_vec();
    shape[0] = pairs.len();
    Ok(MixedBatch {
        representations: Tensor::new(shape, data).expect("mixed shape"),
        labels: pairs.iter().map(|p| p.0).collect(),
        parents: pairs.iter().map(|p| (p.1, p.2)).collect(),
        skipped_classes,
    })
}
