//! Task losses, evaluation metrics and partial fine-tuning.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::maskgen::{gen_submask, tile_mask};
use crate::nnet::{Checkpoint, HeadKind, Model, DEPTH_MAX, DEPTH_MIN};
use crate::rng::derive_stream;
use crate::scenegen::Scene;
use crate::sensor::{estimate_input, simulate};
use crate::tensor::Tensor;
use crate::train::{run_training, TrainConfig, TrainOutcome};
use crate::types::MaskStack;

pub const PSNR_CAP: f64 = 99.0;
pub const EDGE_POS_WEIGHT_MAX: f64 = 50.0;
pub const DEFAULT_TOL_RADIUS: usize = 1;

fn same_shape<A: Copy, B: Copy>(a: &Tensor<A>, b: &Tensor<B>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean squared error and its gradient w.r.t. `pred`.
pub fn recon_loss(pred: &Tensor<f32>, target: &Tensor<f32>) -> Result<(f64, Tensor<f32>)> {
    same_shape(pred, target, "reconstruction loss")?;
    let n = pred.len() as f64;
    let mut sum = 0.0;
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p as f64 - t as f64;
            sum += d * d;
            (2.0 * d / n) as f32
        })
        .collect();
    Ok((sum / n, Tensor::from_vec(pred.shape(), grad)?))
}

pub fn mse(pred: &[f32], target: &[f32]) -> f64 {
    let sum: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| (p as f64 - t as f64).powi(2))
        .sum();
    sum / pred.len().max(1) as f64
}

pub fn psnr(pred: &[f32], target: &[f32]) -> f64 {
    let e = mse(pred, target);
    if e < 1e-10 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / e).log10()).min(PSNR_CAP)
    }
}

/// Positive-class weight `β = clamp(#neg/#pos, 1, 50)`, 1 without positives.
pub fn edge_pos_weight(gt: &[u8]) -> f64 {
    let pos = gt.iter().filter(|&&g| g != 0).count();
    if pos == 0 {
        return 1.0;
    }
    ((gt.len() - pos) as f64 / pos as f64).clamp(1.0, EDGE_POS_WEIGHT_MAX)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Class-balanced binary cross-entropy on logits, averaged over pixels:
/// `−[β·g·ln σ(z) + (1−g)·ln(1−σ(z))]`.
pub fn edge_loss(logits: &Tensor<f32>, gt: &Tensor<u8>) -> Result<(f64, Tensor<f32>)> {
    same_shape(logits, gt, "edge loss")?;
    if let Some(bad) = gt.data().iter().find(|&&g| g > 1) {
        return Err(Error::Data(format!("edge ground truth value {bad} is not binary")));
    }
    let beta = edge_pos_weight(gt.data());
    let n = logits.len() as f64;
    let mut sum = 0.0;
    let grad = logits
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&z, &g)| {
            let z = z as f64;
            let (l, d) = if g == 1 {
                (beta * softplus(-z), beta * (logistic(z) - 1.0))
            } else {
                (softplus(z), logistic(z))
            };
            sum += l;
            (d / n) as f32
        })
        .collect();
    Ok((sum / n, Tensor::from_vec(logits.shape(), grad)?))
}

/// Mean absolute error over valid pixels.
pub fn depth_loss(pred: &Tensor<f32>, gt: &Tensor<f32>, valid: &Tensor<u8>) -> Result<(f64, Tensor<f32>)> {
    same_shape(pred, gt, "depth loss")?;
    same_shape(pred, valid, "depth validity")?;
    let n = valid.data().iter().filter(|&&v| v != 0).count();
    if n == 0 {
        return Err(Error::Data("depth loss over an empty valid mask".into()));
    }
    let mut sum = 0.0;
    let grad = pred
        .data()
        .iter()
        .zip(gt.data())
        .zip(valid.data())
        .map(|((&p, &g), &v)| {
            if v == 0 {
                return 0.0;
            }
            let d = p as f64 - g as f64;
            sum += d.abs();
            (d.signum() * f64::from(d != 0.0) / n as f64) as f32
        })
        .collect();
    Ok((sum / n as f64, Tensor::from_vec(pred.shape(), grad)?))
}

/// Loss and output gradient for a model head against a scene.
pub fn task_loss(kind: HeadKind, out: &Tensor<f32>, scene: &Scene) -> Result<(f64, Tensor<f32>)> {
    match kind {
        HeadKind::Reconstruction => recon_loss(out, scene.video.tensor()),
        HeadKind::Edge => edge_loss(out, &scene.edges),
        HeadKind::Depth => depth_loss(out, &scene.depth, &scene.valid),
    }
}

/// The default grid `{0.01, 0.02, …, 0.99}`.
pub fn default_thresholds() -> Vec<f64> {
    (1..=99).map(|k| k as f64 / 100.0).collect()
}

/// One `(H, W)` map: probabilities or a binary mask.
#[derive(Clone, Copy, Debug)]
pub struct Map<'a, T> {
    pub h: usize,
    pub w: usize,
    pub data: &'a [T],
}

/// Split a `(T, H, W)` tensor into per-frame maps.
pub fn frames<T: Copy>(x: &Tensor<T>) -> Vec<Map<'_, T>> {
    let s = x.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    x.data().chunks(h * w).map(|data| Map { h, w, data }).collect()
}

/// Max over the Chebyshev neighborhood of radius `r`.
fn max_filter<T: Copy + PartialOrd>(h: usize, w: usize, x: &[T], r: usize) -> Vec<T> {
    let mut out = x.to_vec();
    if r == 0 {
        return out;
    }
    for i in 0..h {
        for j in 0..w {
            let mut m = x[i * w + j];
            for ii in i.saturating_sub(r)..(i + r + 1).min(h) {
                for jj in j.saturating_sub(r)..(j + r + 1).min(w) {
                    if x[ii * w + jj] > m {
                        m = x[ii * w + jj];
                    }
                }
            }
            out[i * w + j] = m;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EdgeCounts {
    /// Predicted positives with a ground-truth positive within tolerance.
    pub tp: u64,
    pub predicted: u64,
    /// Ground-truth positives with a predicted positive within tolerance.
    pub matched: u64,
    pub positives: u64,
}

impl EdgeCounts {
    fn add(&mut self, o: &EdgeCounts) {
        self.tp += o.tp;
        self.predicted += o.predicted;
        self.matched += o.matched;
        self.positives += o.positives;
    }

    /// F-score; an empty prediction of an empty truth scores 1.
    pub fn f_score(&self) -> f64 {
        if self.predicted == 0 && self.positives == 0 {
            return 1.0;
        }
        let p = if self.predicted == 0 {
            0.0
        } else {
            self.tp as f64 / self.predicted as f64
        };
        let r = if self.positives == 0 {
            0.0
        } else {
            self.matched as f64 / self.positives as f64
        };
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

/// Per-threshold counts for one image.
pub fn edge_counts(pred: Map<'_, f32>, gt: Map<'_, u8>, thresholds: &[f64], tol: usize) -> Vec<EdgeCounts> {
    let (h, w) = (pred.h, pred.w);
    let gt_dilated = max_filter(h, w, gt.data, tol);
    let pred_dilated = max_filter(h, w, pred.data, tol);
    let positives = gt.data.iter().filter(|&&g| g != 0).count() as u64;
    thresholds
        .iter()
        .map(|&t| {
            let mut c = EdgeCounts {
                positives,
                ..EdgeCounts::default()
            };
            for k in 0..h * w {
                if pred.data[k] as f64 >= t {
                    c.predicted += 1;
                    if gt_dilated[k] != 0 {
                        c.tp += 1;
                    }
                }
                if gt.data[k] != 0 && pred_dilated[k] as f64 >= t {
                    c.matched += 1;
                }
            }
            c
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EdgeScores {
    pub ods: f64,
    pub ois: f64,
    pub ods_threshold: f64,
}

/// Dataset-scale (ODS) and mean per-image best (OIS) F-scores.
pub fn ods_ois(preds: &[Map<'_, f32>], gts: &[Map<'_, u8>], thresholds: &[f64], tol: usize) -> Result<EdgeScores> {
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    if preds.is_empty() || thresholds.is_empty() {
        return Err(Error::Data("ods_ois needs at least one image and one threshold".into()));
    }
    let mut total = vec![EdgeCounts::default(); thresholds.len()];
    let mut ois_sum = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        if (p.h, p.w) != (g.h, g.w) || p.data.len() != p.h * p.w || g.data.len() != g.h * g.w {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs truth {}x{}",
                p.h, p.w, g.h, g.w
            )));
        }
        let counts = edge_counts(*p, *g, thresholds, tol);
        ois_sum += counts.iter().map(EdgeCounts::f_score).fold(0.0, f64::max);
        for (acc, c) in total.iter_mut().zip(&counts) {
            acc.add(c);
        }
    }
    let (best, ods) = total
        .iter()
        .map(EdgeCounts::f_score)
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |acc, (i, f)| if f > acc.1 { (i, f) } else { acc },
        );
    Ok(EdgeScores {
        ods,
        ois: ois_sum / preds.len() as f64,
        ods_threshold: thresholds[best],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub rmse: f64,
    pub log10: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

pub fn depth_metrics(pred: &[f32], gt: &[f32], valid: &[u8]) -> Result<DepthMetrics> {
    if pred.len() != gt.len() || pred.len() != valid.len() {
        return Err(Error::Shape(format!(
            "depth metrics over {} / {} / {} pixels",
            pred.len(),
            gt.len(),
            valid.len()
        )));
    }
    let mut n = 0usize;
    let (mut rel, mut sq, mut lg) = (0.0, 0.0, 0.0);
    let mut hits = [0usize; 3];
    for ((&p, &g), &v) in pred.iter().zip(gt).zip(valid) {
        if v == 0 {
            continue;
        }
        let (p, g) = (p as f64, g as f64);
        if !(g > 0.0) || !(p > 0.0) {
            return Err(Error::Data(format!(
                "non-positive depth (pred {p}, truth {g}) on a valid pixel"
            )));
        }
        n += 1;
        rel += (p - g).abs() / g;
        sq += (p - g) * (p - g);
        lg += (p.log10() - g.log10()).abs();
        let ratio = (p / g).max(g / p);
        for (i, hit) in hits.iter_mut().enumerate() {
            if ratio < 1.25f64.powi(i as i32 + 1) {
                *hit += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Data("depth metrics over an empty valid mask".into()));
    }
    let n = n as f64;
    Ok(DepthMetrics {
        abs_rel: rel / n,
        rmse: (sq / n).sqrt(),
        log10: lg / n,
        delta1: hits[0] as f64 / n,
        delta2: hits[1] as f64 / n,
        delta3: hits[2] as f64 / n,
    })
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct MetricsReport {
    pub task: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr_db: Option<f64>,
    /// PSNR of the broadcast signal estimate against the clean frames.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_psnr_db: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ods: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ois: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ods_threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub thresholds: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tol_radius: Option<usize>,
    #[serde(flatten, skip_serializing_if = "Option::is_none")]
    pub depth: Option<DepthMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_max: Option<f64>,
    pub checkpoint_digest: String,
    pub dataset_digest: String,
    pub apc: f64,
    pub seed: u64,
    pub cr: usize,
    pub scenes: usize,
}

#[derive(Clone, Debug)]
pub struct EvalConfig {
    pub apc: f64,
    pub sigma: f64,
    pub seed: u64,
    pub thresholds: Vec<f64>,
    pub tol_radius: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            apc: 20.0,
            sigma: 0.01,
            seed: 0,
            thresholds: default_thresholds(),
            tol_radius: DEFAULT_TOL_RADIUS,
        }
    }
}

/// Run `model` on noisy measurements of `scenes` and score its head.
///
/// Scene `i` draws its noise from the stream `eval/i` of `cfg.seed`.
/// Digests are left empty for the caller to fill in.
pub fn evaluate(model: &Model<f32>, mask: &MaskStack, scenes: &[Scene], cfg: &EvalConfig) -> Result<MetricsReport> {
    if scenes.is_empty() {
        return Err(Error::Data("no scenes to evaluate".into()));
    }
    let kind = model.config().head;
    let mut outputs = Vec::with_capacity(scenes.len());
    let mut baseline = 0.0;
    for (i, scene) in scenes.iter().enumerate() {
        let mut stream = derive_stream(cfg.seed, &format!("eval/{i}"));
        let meas = simulate(&scene.video, mask, cfg.apc, cfg.sigma, &mut stream)?;
        let input = estimate_input(&meas, mask)?;
        let est = input.estimate();
        let clean = scene.video.tensor().data();
        let broadcast: Vec<f32> = clean.chunks(est.len()).flat_map(|_| est.iter().copied()).collect();
        baseline += psnr(&broadcast, clean);
        outputs.push(model.infer(&input)?);
    }
    let mut report = MetricsReport {
        task: kind.as_str().to_string(),
        apc: cfg.apc,
        seed: cfg.seed,
        cr: mask.t(),
        scenes: scenes.len(),
        ..MetricsReport::default()
    };
    match kind {
        HeadKind::Reconstruction => {
            let total: f64 = outputs
                .iter()
                .zip(scenes)
                .map(|(o, s)| psnr(o.data(), s.video.tensor().data()))
                .sum();
            report.psnr_db = Some(total / scenes.len() as f64);
            report.baseline_psnr_db = Some(baseline / scenes.len() as f64);
        }
        HeadKind::Edge => {
            let probs: Vec<Tensor<f32>> = outputs.iter().map(|o| o.map(|z| logistic(z as f64) as f32)).collect();
            let preds: Vec<_> = probs.iter().flat_map(frames).collect();
            let gts: Vec<_> = scenes.iter().flat_map(|s| frames(&s.edges)).collect();
            let scores = ods_ois(&preds, &gts, &cfg.thresholds, cfg.tol_radius)?;
            report.ods = Some(scores.ods);
            report.ois = Some(scores.ois);
            report.ods_threshold = Some(scores.ods_threshold);
            report.thresholds = Some(cfg.thresholds.clone());
            report.tol_radius = Some(cfg.tol_radius);
        }
        HeadKind::Depth => {
            let mut pred = Vec::new();
            let mut gt = Vec::new();
            let mut valid = Vec::new();
            for (o, s) in outputs.iter().zip(scenes) {
                pred.extend_from_slice(o.data());
                gt.extend_from_slice(s.depth.data());
                valid.extend_from_slice(s.valid.data());
            }
            report.depth = Some(depth_metrics(&pred, &gt, &valid)?);
            report.d_min = Some(DEPTH_MIN);
            report.d_max = Some(DEPTH_MAX);
        }
    }
    Ok(report)
}

/// Mask parameters recorded in a checkpoint.
pub fn checkpoint_mask(ckpt: &Checkpoint, cr: usize) -> Result<MaskStack> {
    let get = |key: &str| {
        ckpt.meta_value(key)
            .ok_or_else(|| Error::Data(format!("checkpoint metadata lacks {key}")))
    };
    let parse_err = |key: &str| Error::Data(format!("checkpoint metadata {key} is malformed"));
    let seed: u64 = get("mask_seed")?.parse().map_err(|_| parse_err("mask_seed"))?;
    let size: usize = get("mask_size")?.parse().map_err(|_| parse_err("mask_size"))?;
    let rho: f64 = get("rho")?.parse().map_err(|_| parse_err("rho"))?;
    let cfg = &ckpt.config;
    training_mask(seed, cr, size, rho, cfg.height, cfg.width)
}

/// The coded-exposure mask of a run: a tiled sub-mask from stream `mask`.
pub fn training_mask(seed: u64, cr: usize, size: usize, rho: f64, h: usize, w: usize) -> Result<MaskStack> {
    let sub = gen_submask(cr, size, rho, &mut derive_stream(seed, "mask"))?;
    tile_mask(&sub, h, w)
}

/// Swap in a fresh `task` head, freeze the encoder and train the rest.
///
/// The head is drawn from stream `head-init` of `cfg.seed`. The returned
/// checkpoint records the digest of `pretrained` as `pretrain_digest`.
pub fn finetune(
    pretrained: &Checkpoint,
    task: HeadKind,
    scenes: &[Scene],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    log: &mut dyn Write,
) -> Result<(Checkpoint, TrainOutcome)> {
    if task == HeadKind::Reconstruction {
        return Err(Error::Config("fine-tuning needs an edge or depth task".into()));
    }
    if pretrained.config.head != HeadKind::Reconstruction {
        log::warn!("fine-tuning from a {} checkpoint", pretrained.config.head.as_str());
    }
    let mut model = pretrained.model()?;
    model.replace_head(task, &mut derive_stream(cfg.seed, "head-init"));
    model.freeze(&["encoder"])?;
    let mask = checkpoint_mask(pretrained, pretrained.config.cr)?;
    let mut meta = pretrained.meta.clone();
    meta.insert("pretrain_digest".into(), format!("{:016x}", pretrained.digest()));
    meta.insert("task".into(), task.as_str().into());
    meta.insert("head_init_seed".into(), cfg.seed.to_string());
    meta.insert("frozen".into(), "encoder".into());
    let outcome = run_training(&mut model, scenes, &mask, cfg, &meta, out_dir, log)?;
    let mut ckpt = Checkpoint::from_model(&model);
    ckpt.adam = Some(outcome.adam.clone());
    ckpt.meta = meta;
    Ok((ckpt, outcome))
}
