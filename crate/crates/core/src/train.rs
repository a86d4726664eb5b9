//! Rate-constrained training: `J = L_task + λ·R(θ)` with Adam.
//!
//! `R(θ) = (1/N) Σ (|θᵢ| + ε)^ν` is a generalized-Gaussian rate proxy. Its
//! gradient is added analytically to the task gradient.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use indexmap::IndexMap;
use serde::Serialize;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::nnet::{AdamState, Checkpoint, Model, ModelConfig, ParamSet, Partition};
use crate::rng::{derive_stream, RandomStream};
use crate::scenegen::Scene;
use crate::sensor::{estimate_input, simulate, NetInput, APC_MAX};
use crate::tasks::task_loss;
use crate::tensor::{Real, Tensor};
use crate::types::{MaskStack, VideoCube};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ApcMode {
    Fixed(f64),
    Uniform(f64, f64),
}

impl ApcMode {
    pub fn sample(&self, stream: &mut RandomStream) -> f64 {
        match *self {
            ApcMode::Fixed(v) => v,
            ApcMode::Uniform(lo, hi) => stream.uniform_range(lo, hi),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            ApcMode::Fixed(v) => v > 0.0 && v.is_finite(),
            ApcMode::Uniform(lo, hi) => lo > 0.0 && lo <= hi && hi.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid APC mode {self}")))
        }
    }
}

impl std::fmt::Display for ApcMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ApcMode::Fixed(v) => write!(f, "fixed({v})"),
            ApcMode::Uniform(lo, hi) => write!(f, "uniform({lo},{hi})"),
        }
    }
}

impl FromStr for ApcMode {
    type Err = Error;

    /// `fixed(20)`, `uniform(1,60)` or a bare number.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Config(format!("cannot parse APC mode {s:?}"));
        let num = |x: &str| x.trim().parse::<f64>().map_err(|_| bad());
        let mode = if let Some(body) = s.strip_prefix("fixed(").and_then(|r| r.strip_suffix(')')) {
            ApcMode::Fixed(num(body)?)
        } else if let Some(body) = s.strip_prefix("uniform(").and_then(|r| r.strip_suffix(')')) {
            let (lo, hi) = body.split_once(',').ok_or_else(bad)?;
            ApcMode::Uniform(num(lo)?, num(hi)?)
        } else {
            ApcMode::Fixed(num(s)?)
        };
        mode.validate()?;
        Ok(mode)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackslashMode {
    None,
    Full,
    /// Active for the first `⌈epochs/2⌉` epochs only.
    Half,
}

impl BackslashMode {
    /// Whether the rate term applies in 1-based `epoch` of `epochs`.
    pub fn active(&self, epoch: usize, epochs: usize) -> bool {
        match self {
            BackslashMode::None => false,
            BackslashMode::Full => true,
            BackslashMode::Half => epoch <= epochs.div_ceil(2),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            BackslashMode::None => "none",
            BackslashMode::Full => "full",
            BackslashMode::Half => "half",
        }
    }
}

impl FromStr for BackslashMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" => Ok(Self::None),
            "full" => Ok(Self::Full),
            "half" => Ok(Self::Half),
            other => Err(Error::Config(format!("unknown backslash_mode {other:?}"))),
        }
    }
}

/// Per-epoch learning-rate multiplier.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// `½(1 + cos(π(e−1)/E))` for 1-based epoch `e` of `E`.
    Cosine,
}

impl LrSchedule {
    pub fn factor(&self, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => {
                let x = (epoch.saturating_sub(1)) as f64 / epochs.max(1) as f64;
                0.5 * (1.0 + (std::f64::consts::PI * x).cos())
            }
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        }
    }
}

impl FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "constant" => Ok(Self::Constant),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::Config(format!("unknown lr_schedule {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub lambda: f64,
    pub nu: f64,
    pub eps_rate: f64,
    pub backslash_mode: BackslashMode,
    pub apc_mode: ApcMode,
    pub sigma: f64,
    pub cr: usize,
    pub seed: u64,
    /// Mask density and sub-mask side of the coded exposure.
    pub rho: f64,
    pub mask_size: usize,
    /// Random 90° rotations and flips of each training cube.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 4,
            lr: 1e-4,
            lr_schedule: LrSchedule::Constant,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            lambda: 1e-3,
            nu: 0.5,
            eps_rate: 1e-8,
            backslash_mode: BackslashMode::None,
            apc_mode: ApcMode::Uniform(1.0, APC_MAX),
            sigma: 0.01,
            cr: 8,
            seed: 0,
            rho: 0.5,
            mask_size: 8,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.cr == 0 || self.mask_size == 0 {
            return fail("batch_size, cr and mask_size must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.adam_eps > 0.0) {
            return fail(format!(
                "lr {} and adam_eps {} must be positive",
                self.lr, self.adam_eps
            ));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} = {b} outside [0,1)"));
            }
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return fail(format!("lambda {} must be a finite value >= 0", self.lambda));
        }
        check_rate_params(self.eps_rate, self.nu)?;
        if !(self.sigma >= 0.0) {
            return fail(format!("sigma {} must be >= 0", self.sigma));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return fail(format!("rho {} outside (0,1]", self.rho));
        }
        self.apc_mode.validate()
    }

    /// Consume training keys from `kv`, keeping defaults for absent ones.
    pub fn take_from(kv: &mut KeyValues) -> Result<Self> {
        let mut cfg = Self::default();
        macro_rules! field {
            ($name:ident) => {
                if let Some(v) = kv.take_parsed(stringify!($name))? {
                    cfg.$name = v;
                }
            };
        }
        field!(epochs);
        field!(batch_size);
        field!(lr);
        field!(lr_schedule);
        field!(adam_beta1);
        field!(adam_beta2);
        field!(adam_eps);
        field!(lambda);
        field!(nu);
        field!(eps_rate);
        field!(backslash_mode);
        field!(apc_mode);
        field!(sigma);
        field!(cr);
        field!(seed);
        field!(rho);
        field!(mask_size);
        field!(augment);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let cfg = Self::take_from(&mut kv)?;
        kv.finish()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "epochs = {}", self.epochs).unwrap();
        writeln!(s, "batch_size = {}", self.batch_size).unwrap();
        writeln!(s, "lr = {}", self.lr).unwrap();
        writeln!(s, "lr_schedule = {}", self.lr_schedule.as_str()).unwrap();
        writeln!(s, "adam_beta1 = {}", self.adam_beta1).unwrap();
        writeln!(s, "adam_beta2 = {}", self.adam_beta2).unwrap();
        writeln!(s, "adam_eps = {}", self.adam_eps).unwrap();
        writeln!(s, "lambda = {}", self.lambda).unwrap();
        writeln!(s, "nu = {}", self.nu).unwrap();
        writeln!(s, "eps_rate = {}", self.eps_rate).unwrap();
        writeln!(s, "backslash_mode = {}", self.backslash_mode.as_str()).unwrap();
        writeln!(s, "apc_mode = {}", self.apc_mode).unwrap();
        writeln!(s, "sigma = {}", self.sigma).unwrap();
        writeln!(s, "cr = {}", self.cr).unwrap();
        writeln!(s, "seed = {}", self.seed).unwrap();
        writeln!(s, "rho = {}", self.rho).unwrap();
        writeln!(s, "mask_size = {}", self.mask_size).unwrap();
        writeln!(s, "augment = {}", self.augment).unwrap();
        s
    }
}

/// Parse one file holding both model and training keys. The model's `cr`
/// is the training `cr`.
pub fn run_config_from_text(text: &str) -> Result<(ModelConfig, TrainConfig)> {
    let mut kv = KeyValues::parse(text)?;
    let model = ModelConfig::take_from(&mut kv)?;
    let mut train = TrainConfig::take_from(&mut kv)?;
    kv.finish()?;
    train.cr = model.cr;
    Ok((model, train))
}

fn check_rate_params(eps: f64, nu: f64) -> Result<()> {
    if !(nu > 0.0 && nu <= 2.0) {
        return Err(Error::Config(format!("nu = {nu} outside (0,2]")));
    }
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(Error::Config(format!("eps_rate = {eps} must be a finite value >= 0")));
    }
    Ok(())
}

fn rate_inputs<T: Real>(p: &ParamSet<T>, eps: f64, nu: f64) -> Result<f64> {
    check_rate_params(eps, nu)?;
    let mut any_zero = false;
    for (name, e) in p.iter() {
        if !e.tensor.all_finite() {
            return Err(Error::Numeric(format!("non-finite value in parameter {name}")));
        }
        any_zero |= e.tensor.data().iter().any(|v| v.is_zero());
    }
    if eps == 0.0 && nu < 1.0 && any_zero {
        return Err(Error::Config(
            "eps_rate = 0 with nu < 1 is singular at zero weights".into(),
        ));
    }
    let n = p.count();
    if n == 0 {
        return Err(Error::Data("rate term over an empty parameter set".into()));
    }
    Ok(n as f64)
}

/// `R(θ) = (1/N) Σ (|θᵢ| + ε)^ν`, accumulated in f64.
pub fn rate_term<T: Real>(p: &ParamSet<T>, eps: f64, nu: f64) -> Result<f64> {
    let n = rate_inputs(p, eps, nu)?;
    let mut sum = 0.0;
    for (_, e) in p.iter() {
        for v in e.tensor.data() {
            sum += (v.to_f64_lossy().abs() + eps).powf(nu);
        }
    }
    Ok(sum / n)
}

/// `∂R/∂θᵢ = (ν/N)·sign(θᵢ)·(|θᵢ| + ε)^(ν−1)` with `sign(0) = 0`.
pub fn rate_grad<T: Real>(p: &ParamSet<T>, eps: f64, nu: f64) -> Result<ParamSet<T>> {
    let n = rate_inputs(p, eps, nu)?;
    let mut g = p.zeros_like();
    for idx in 0..p.len() {
        let src = p.at(idx).1.tensor.data();
        let dst = g.at_mut(idx).tensor.data_mut();
        for (d, v) in dst.iter_mut().zip(src) {
            let x = v.to_f64_lossy();
            if x != 0.0 {
                *d = T::lit(nu / n * x.signum() * (x.abs() + eps).powf(nu - 1.0));
            }
        }
    }
    Ok(g)
}

/// One Adam update of every unfrozen tensor; frozen tensors and their
/// moments stay untouched.
pub fn adam_update(model: &mut Model<f32>, grads: &ParamSet<f32>, state: &mut AdamState, cfg: &TrainConfig) {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let frozen: Vec<Partition> = model.frozen().collect();
    for idx in 0..grads.len() {
        let partition = grads.at(idx).1.partition;
        if frozen.contains(&partition) {
            continue;
        }
        let g = grads.at(idx).1.tensor.data();
        let m = state.m.at_mut(idx).tensor.data_mut();
        let v = state.v.at_mut(idx).tensor.data_mut();
        let theta = model.params_mut().at_mut(idx).tensor.data_mut();
        for k in 0..g.len() {
            let gk = g[k] as f64;
            let mk = b1 * m[k] as f64 + (1.0 - b1) * gk;
            let vk = b2 * v[k] as f64 + (1.0 - b2) * gk * gk;
            m[k] = mk as f32;
            v[k] = vk as f32;
            let step = cfg.lr * (mk / c1) / ((vk / c2).sqrt() + cfg.adam_eps);
            theta[k] = (theta[k] as f64 - step) as f32;
        }
    }
}

pub fn adam_init(params: &ParamSet<f32>) -> AdamState {
    AdamState {
        step: 0,
        m: params.zeros_like(),
        v: params.zeros_like(),
    }
}

/// One prepared training example.
#[derive(Clone, Debug)]
pub struct Example {
    pub input: NetInput,
    pub scene: Scene,
    pub apc: f64,
    /// Index of the source scene, for diagnostics.
    pub index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepStats {
    pub task_loss: f64,
    pub rate: f64,
    #[serde(rename = "J")]
    pub j: f64,
}

/// Forward, backward and one Adam step over `batch`.
///
/// The task gradient is the batch mean; `lambda_eff · ∇R` is added when
/// positive. `J = L_task + lambda_eff · R`.
pub fn train_step(
    model: &mut Model<f32>,
    batch: &[Example],
    cfg: &TrainConfig,
    state: &mut AdamState,
    lambda_eff: f64,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let kind = model.config().head;
    let mut grads: Option<ParamSet<f32>> = None;
    let mut task = 0.0;
    for ex in batch {
        let out = model.forward(&ex.input)?;
        let (loss, gout) = task_loss(kind, &out, &ex.scene)?;
        if !loss.is_finite() {
            let scenes: Vec<_> = batch.iter().map(|e| e.index).collect();
            let apcs: Vec<_> = batch.iter().map(|e| e.apc).collect();
            return Err(Error::Numeric(format!(
                "non-finite task loss at Adam step {} (seed {}, scenes {scenes:?}, apc {apcs:?})",
                state.step + 1,
                cfg.seed
            )));
        }
        task += loss;
        let g = model.backward(&gout)?;
        match grads.as_mut() {
            None => grads = Some(g),
            Some(acc) => {
                for idx in 0..acc.len() {
                    acc.at_mut(idx).tensor.add_assign(&g.at(idx).1.tensor);
                }
            }
        }
    }
    let mut grads = grads.expect("non-empty batch");
    let inv = 1.0 / batch.len() as f32;
    for (_, e) in grads.iter_mut() {
        e.tensor.scale(inv);
    }
    let task_loss = task / batch.len() as f64;
    let rate = rate_term(model.params(), cfg.eps_rate, cfg.nu)?;
    if lambda_eff > 0.0 {
        let rg = rate_grad(model.params(), cfg.eps_rate, cfg.nu)?;
        for idx in 0..grads.len() {
            let dst = grads.at_mut(idx).tensor.data_mut();
            for (d, r) in dst.iter_mut().zip(rg.at(idx).1.tensor.data()) {
                *d = (*d as f64 + lambda_eff * *r as f64) as f32;
            }
        }
    }
    adam_update(model, &grads, state, cfg);
    Ok(StepStats {
        task_loss,
        rate,
        j: task_loss + lambda_eff * rate,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: u64,
    pub task_loss: f64,
    pub rate: f64,
    #[serde(rename = "J")]
    pub j: f64,
    pub lambda_effective: f64,
    /// Mean APC over the batch.
    pub apc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub logs: Vec<StepLog>,
    pub checkpoints: Vec<PathBuf>,
    pub adam: AdamState,
}

impl TrainOutcome {
    /// Mean task loss over the steps of the last epoch.
    pub fn final_task_loss(&self) -> Option<f64> {
        let last = self.logs.last()?.epoch;
        let tail: Vec<f64> = self
            .logs
            .iter()
            .filter(|l| l.epoch == last)
            .map(|l| l.task_loss)
            .collect();
        Some(tail.iter().sum::<f64>() / tail.len() as f64)
    }
}

fn rotate90<T: Copy>(x: &[T], n: usize) -> Vec<T> {
    // (i, j) <- (n-1-j, i) on a square frame
    (0..n * n).map(|k| x[(n - 1 - k % n) * n + k / n]).collect()
}

fn transform_frames<T: Copy>(x: &Tensor<T>, rot: usize, flip: bool) -> Tensor<T> {
    let s = x.shape().to_vec();
    let (h, w) = (s[1], s[2]);
    let mut out = Vec::with_capacity(x.len());
    for f in 0..s[0] {
        let mut frame = x.outer(f).to_vec();
        for _ in 0..rot {
            frame = rotate90(&frame, h);
        }
        if flip {
            for row in frame.chunks_mut(w) {
                row.reverse();
            }
        }
        out.extend(frame);
    }
    Tensor::from_vec(&s, out).unwrap()
}

/// Random dihedral transform of every field of a scene; rotations only
/// for square frames.
pub fn augment_scene(scene: &Scene, stream: &mut RandomStream) -> Result<Scene> {
    let [_, h, w] = scene.video.shape();
    let rot = if h == w {
        stream.below(4) as usize
    } else {
        2 * stream.below(2) as usize
    };
    let flip = stream.bernoulli(0.5);
    Ok(Scene {
        video: VideoCube::new(transform_frames(scene.video.tensor(), rot, flip))?,
        edges: transform_frames(&scene.edges, rot, flip),
        depth: transform_frames(&scene.depth, rot, flip),
        valid: transform_frames(&scene.valid, rot, flip),
    })
}

/// Train `model` on noisy measurements of `scenes` taken through `mask`.
///
/// Each epoch shuffles the scenes with the training stream, then for each
/// sample draws the (optional) augmentation, the APC and the measurement
/// noise from that same stream, in that order. With `out_dir` a checkpoint
/// `epoch_NNN.cdp` is written after every epoch and the step log goes to
/// `train_log.jsonl`; log lines are always written to `log`.
pub fn run_training(
    model: &mut Model<f32>,
    scenes: &[Scene],
    mask: &MaskStack,
    cfg: &TrainConfig,
    meta: &IndexMap<String, String>,
    out_dir: Option<&Path>,
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Config("training needs at least one scene".into()));
    }
    let mcfg = model.config();
    let shape = [mask.t(), mcfg.height, mcfg.width];
    if mask.shape() != shape {
        return Err(Error::Shape(format!("mask {:?} vs model {shape:?}", mask.shape())));
    }
    if let Some(bad) = scenes.iter().find(|s| s.video.shape() != shape) {
        return Err(Error::Shape(format!(
            "scene {:?} vs model {shape:?}",
            bad.video.shape()
        )));
    }
    let mut file_log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("train_log.jsonl");
            Some((fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };
    let mut stream = derive_stream(cfg.seed, "train");
    let mut state = adam_init(model.params());
    let mut logs = Vec::new();
    let mut checkpoints = Vec::new();
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    for epoch in 1..=cfg.epochs {
        let lambda_eff = if cfg.backslash_mode.active(epoch, cfg.epochs) {
            cfg.lambda
        } else {
            0.0
        };
        let epoch_cfg = TrainConfig {
            lr: cfg.lr * cfg.lr_schedule.factor(epoch, cfg.epochs),
            ..cfg.clone()
        };
        stream.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &index in chunk {
                let scene = if cfg.augment {
                    augment_scene(&scenes[index], &mut stream)?
                } else {
                    scenes[index].clone()
                };
                let apc = cfg.apc_mode.sample(&mut stream);
                let meas = simulate(&scene.video, mask, apc, cfg.sigma, &mut stream)?;
                let input = estimate_input(&meas, mask)?;
                batch.push(Example {
                    input,
                    scene,
                    apc,
                    index,
                });
            }
            let stats = train_step(model, &batch, &epoch_cfg, &mut state, lambda_eff)?;
            let entry = StepLog {
                epoch,
                step: state.step,
                task_loss: stats.task_loss,
                rate: stats.rate,
                j: stats.j,
                lambda_effective: lambda_eff,
                apc: batch.iter().map(|e| e.apc).sum::<f64>() / batch.len() as f64,
            };
            let line = serde_json::to_string(&entry).expect("serializable log");
            writeln!(log, "{line}").map_err(|e| Error::io("<log>", e))?;
            if let Some((f, path)) = file_log.as_mut() {
                writeln!(f, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
            }
            logs.push(entry);
        }
        if let Some(dir) = out_dir {
            let mut ckpt = Checkpoint::from_model(model);
            ckpt.meta = meta.clone();
            ckpt.meta.insert("epoch".into(), epoch.to_string());
            ckpt.adam = Some(state.clone());
            let path = dir.join(format!("epoch_{epoch:03}.cdp"));
            ckpt.save(&path)?;
            checkpoints.push(path);
        }
    }
    Ok(TrainOutcome {
        logs,
        checkpoints,
        adam: state,
    })
}

/// Metadata describing the coded-exposure mask of a run.
pub fn mask_meta(cfg: &TrainConfig) -> IndexMap<String, String> {
    let mut meta = IndexMap::new();
    meta.insert("mask_seed".into(), cfg.seed.to_string());
    meta.insert("mask_size".into(), cfg.mask_size.to_string());
    meta.insert("rho".into(), cfg.rho.to_string());
    meta
}

/// Build, train and package a reconstruction model from scratch.
///
/// Initial weights come from stream `init` of `cfg.seed`, the mask from
/// stream `mask`.
pub fn pretrain(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    scenes: &[Scene],
    out_dir: Option<&Path>,
    log: &mut dyn Write,
) -> Result<(Checkpoint, TrainOutcome)> {
    let mut model = Model::<f32>::build(model_cfg.clone(), &mut derive_stream(cfg.seed, "init"))?;
    let mask = crate::tasks::training_mask(
        cfg.seed,
        model_cfg.cr,
        cfg.mask_size,
        cfg.rho,
        model_cfg.height,
        model_cfg.width,
    )?;
    let meta = mask_meta(cfg);
    let outcome = run_training(&mut model, scenes, &mask, cfg, &meta, out_dir, log)?;
    let mut ckpt = Checkpoint::from_model(&model);
    ckpt.meta = meta;
    ckpt.adam = Some(outcome.adam.clone());
    Ok((ckpt, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{Dataset, SceneConfig};

    fn set(values: &[f64]) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert(
            "w",
            Tensor::from_vec(&[values.len()], values.to_vec()).unwrap(),
            Partition::Encoder,
        );
        p
    }

    #[test]
    fn rate_term_examples() {
        let z = set(&[0.0; 5]);
        assert!((rate_term(&z, 1e-8, 0.5).unwrap() - 1e-4).abs() < 1e-15);
        assert!((rate_term(&set(&[1.0, -1.0]), 0.0, 0.5).unwrap() - 1.0).abs() < 1e-15);
        assert!((rate_term(&set(&[4.0]), 0.0, 0.5).unwrap() - 2.0).abs() < 1e-15);
        assert!(matches!(
            rate_term(&set(&[f64::NAN]), 1e-8, 0.5),
            Err(Error::Numeric(_))
        ));
        assert!(rate_term(&set(&[0.0]), 0.0, 0.5).is_err());
    }

    #[test]
    fn rate_grad_examples() {
        let g = rate_grad(&set(&[4.0]), 0.0, 0.5).unwrap();
        assert!((g.at(0).1.tensor.data()[0] - 0.25).abs() < 1e-15);
        let g = rate_grad(&set(&[0.0, 2.0]), 1e-8, 0.5).unwrap();
        assert_eq!(g.at(0).1.tensor.data()[0], 0.0);
    }

    #[test]
    fn rate_grad_matches_finite_differences() {
        let mut s = derive_stream(9, "rate-fd");
        let mut p = ParamSet::new();
        for (i, n) in [7usize, 12, 3].into_iter().enumerate() {
            let v: Vec<f64> = (0..n)
                .map(|k| if k % 4 == 0 { 0.0 } else { s.uniform_range(-1.0, 1.0) })
                .collect();
            p.insert(&format!("t{i}"), Tensor::from_vec(&[n], v).unwrap(), Partition::ALL[i]);
        }
        let (eps, nu) = (1e-3, 0.5);
        let g = rate_grad(&p, eps, nu).unwrap();
        let h = 1e-7;
        let mut worst = 0.0f64;
        for idx in 0..p.len() {
            for k in 0..p.at(idx).1.tensor.len() {
                let x = p.at(idx).1.tensor.data()[k];
                if x == 0.0 {
                    // subgradient choice
                    assert_eq!(g.at(idx).1.tensor.data()[k], 0.0);
                    continue;
                }
                let mut up = p.clone();
                up.at_mut(idx).tensor.data_mut()[k] = x + h;
                let mut dn = p.clone();
                dn.at_mut(idx).tensor.data_mut()[k] = x - h;
                let fd = (rate_term(&up, eps, nu).unwrap() - rate_term(&dn, eps, nu).unwrap()) / (2.0 * h);
                let a = g.at(idx).1.tensor.data()[k];
                worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-12));
            }
        }
        assert!(worst < 1e-5, "{worst}");
    }

    #[test]
    fn half_schedule() {
        let on: Vec<bool> = (1..=10).map(|e| BackslashMode::Half.active(e, 10)).collect();
        assert_eq!(on, [true, true, true, true, true, false, false, false, false, false]);
        assert!(BackslashMode::Half.active(2, 3));
        assert!(!BackslashMode::Half.active(3, 3));
        assert!(!BackslashMode::None.active(1, 1));
    }

    #[test]
    fn cosine_schedule() {
        let f: Vec<f64> = (1..=4).map(|e| LrSchedule::Cosine.factor(e, 4)).collect();
        assert_eq!(f[0], 1.0);
        assert!((f[2] - 0.5).abs() < 1e-15);
        assert!(f.windows(2).all(|w| w[1] < w[0]) && f[3] > 0.0);
        assert_eq!(LrSchedule::Constant.factor(3, 4), 1.0);
        assert!("linear".parse::<LrSchedule>().is_err());
    }

    #[test]
    fn config_parsing() {
        let cfg = TrainConfig::from_text(
            "epochs = 3\napc_mode = uniform(1, 60)\nbackslash_mode = half\nlr_schedule = cosine",
        )
        .unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.apc_mode, ApcMode::Uniform(1.0, 60.0));
        assert_eq!(cfg.lr_schedule, LrSchedule::Cosine);
        assert_eq!(TrainConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert!(TrainConfig::from_text("epochz = 3").is_err());
        assert!(TrainConfig::from_text("nu = 3").is_err());
        assert_eq!("fixed(20)".parse::<ApcMode>().unwrap(), ApcMode::Fixed(20.0));
        assert_eq!("5".parse::<ApcMode>().unwrap(), ApcMode::Fixed(5.0));
        assert!("uniform(5)".parse::<ApcMode>().is_err());
        let (m, t) = run_config_from_text("channels = 8\ncr = 4\nlr = 0.001").unwrap();
        assert_eq!((m.channels, m.cr, t.cr, t.lr), (8, 4, 4, 1e-3));
    }

    #[test]
    fn apc_uniform_mean() {
        let mut s = derive_stream(1, "apc");
        let mode = ApcMode::Uniform(1.0, 60.0);
        let mean = (0..1000).map(|_| mode.sample(&mut s)).sum::<f64>() / 1000.0;
        assert!((mean - 30.5).abs() < 0.05 * 30.5);
    }

    fn tiny() -> (ModelConfig, Vec<Scene>) {
        let mcfg = ModelConfig {
            channels: 4,
            encoder_depth: 1,
            decoder_depth: 0,
            cr: 2,
            height: 8,
            width: 8,
            ..ModelConfig::default()
        };
        let scfg = SceneConfig {
            t: 2,
            height: 8,
            width: 8,
            min_size: 2.0,
            max_size: 6.0,
            count: 3,
            seed: 1,
            ..SceneConfig::default()
        };
        (mcfg, Dataset::generate(&scfg).unwrap().scenes)
    }

    fn tiny_train(lambda: f64, mode: BackslashMode) -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 2,
            lr: 1e-2,
            lambda,
            backslash_mode: mode,
            cr: 2,
            mask_size: 4,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_lambda_equals_plain_adam() {
        let (mcfg, scenes) = tiny();
        let a = pretrain(
            &mcfg,
            &tiny_train(0.0, BackslashMode::Full),
            &scenes,
            None,
            &mut std::io::sink(),
        )
        .unwrap();
        let b = pretrain(
            &mcfg,
            &tiny_train(0.0, BackslashMode::None),
            &scenes,
            None,
            &mut std::io::sink(),
        )
        .unwrap();
        assert_eq!(a.0.params, b.0.params);
        for (x, y) in a.1.logs.iter().zip(&b.1.logs) {
            assert_eq!(x.j, x.task_loss);
            assert_eq!(x.task_loss, y.task_loss);
        }
    }

    #[test]
    fn training_is_deterministic_and_logs_schedule() {
        let (mcfg, scenes) = tiny();
        let mut cfg = tiny_train(0.5, BackslashMode::Half);
        cfg.epochs = 3;
        let mut buf_a = Vec::new();
        let mut buf_b = Vec::new();
        let a = pretrain(&mcfg, &cfg, &scenes, None, &mut buf_a).unwrap();
        pretrain(&mcfg, &cfg, &scenes, None, &mut buf_b).unwrap();
        assert_eq!(buf_a, buf_b);
        for l in &a.1.logs {
            assert_eq!(l.lambda_effective > 0.0, l.epoch <= 2);
            assert!((l.j - (l.task_loss + l.lambda_effective * l.rate)).abs() <= 1e-12 * l.j.abs());
        }
        let first: serde_json::Value = serde_json::from_slice(buf_a.split(|&b| b == b'\n').next().unwrap()).unwrap();
        for key in ["epoch", "step", "task_loss", "rate", "J", "lambda_effective", "apc"] {
            assert!(first.get(key).is_some(), "{key}");
        }
    }

    fn fixed_batch(model: &Model<f32>, scenes: &[Scene], cfg: &TrainConfig) -> Vec<Example> {
        let c = model.config();
        let mask = crate::tasks::training_mask(1, c.cr, cfg.mask_size, 0.5, c.height, c.width).unwrap();
        let mut s = derive_stream(3, "batch");
        scenes
            .iter()
            .enumerate()
            .map(|(index, scene)| {
                let meas = simulate(&scene.video, &mask, 20.0, 0.01, &mut s).unwrap();
                Example {
                    input: estimate_input(&meas, &mask).unwrap(),
                    scene: scene.clone(),
                    apc: 20.0,
                    index,
                }
            })
            .collect()
    }

    #[test]
    fn overfits_one_batch() {
        let (mcfg, scenes) = tiny();
        let cfg = tiny_train(0.0, BackslashMode::None);
        let mut model = Model::<f32>::build(mcfg, &mut derive_stream(2, "init")).unwrap();
        let batch = fixed_batch(&model, &scenes, &cfg);
        let mut state = adam_init(model.params());
        let first = train_step(&mut model, &batch, &cfg, &mut state, 0.0).unwrap().task_loss;
        let mut last = first;
        for _ in 1..50 {
            last = train_step(&mut model, &batch, &cfg, &mut state, 0.0).unwrap().task_loss;
        }
        assert!(last <= 0.5 * first, "{first} -> {last}");
    }

    #[test]
    fn frozen_model_does_not_move() {
        let (mcfg, scenes) = tiny();
        let cfg = tiny_train(1.0, BackslashMode::Full);
        let mut model = Model::<f32>::build(mcfg, &mut derive_stream(2, "init")).unwrap();
        model.freeze(&["encoder", "decoder", "head"]).unwrap();
        let batch = fixed_batch(&model, &scenes, &cfg);
        let before = model.params().clone();
        let mut state = adam_init(model.params());
        let a = train_step(&mut model, &batch, &cfg, &mut state, 1.0).unwrap();
        let b = train_step(&mut model, &batch, &cfg, &mut state, 1.0).unwrap();
        assert_eq!(model.params(), &before);
        assert_eq!(a, b);
    }

    #[test]
    fn encoder_freeze_keeps_encoder_digest() {
        let (mcfg, scenes) = tiny();
        let cfg = tiny_train(0.0, BackslashMode::None);
        let mut model = Model::<f32>::build(
            ModelConfig {
                decoder_depth: 1,
                ..mcfg
            },
            &mut derive_stream(2, "init"),
        )
        .unwrap();
        model.freeze(&["encoder"]).unwrap();
        let batch = fixed_batch(&model, &scenes, &cfg);
        let enc = model.params().digest(Some(Partition::Encoder));
        let dec = model.params().digest(Some(Partition::Decoder));
        let mut state = adam_init(model.params());
        for _ in 0..10 {
            train_step(&mut model, &batch, &cfg, &mut state, 0.0).unwrap();
        }
        assert_eq!(model.params().digest(Some(Partition::Encoder)), enc);
        assert_ne!(model.params().digest(Some(Partition::Decoder)), dec);
    }

    #[test]
    fn checkpoints_per_epoch() {
        let (mcfg, scenes) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let (ck, out) = pretrain(
            &mcfg,
            &tiny_train(0.1, BackslashMode::Full),
            &scenes,
            Some(dir.path()),
            &mut std::io::sink(),
        )
        .unwrap();
        assert_eq!(out.checkpoints.len(), 2);
        let last = Checkpoint::load(&out.checkpoints[1]).unwrap();
        assert_eq!(last.params, ck.params);
        assert_eq!(last.adam, ck.adam);
        let text = fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
        assert_eq!(text.lines().count(), out.logs.len());
    }

    #[test]
    fn empty_data_is_config_error() {
        let (mcfg, _) = tiny();
        let r = pretrain(
            &mcfg,
            &tiny_train(0.0, BackslashMode::None),
            &[],
            None,
            &mut std::io::sink(),
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn augmentation_keeps_fields_aligned() {
        let (_, scenes) = tiny();
        let mut s = derive_stream(4, "aug");
        for _ in 0..8 {
            let a = augment_scene(&scenes[0], &mut s).unwrap();
            for (v, valid) in a.video.tensor().data().iter().zip(a.valid.data()) {
                assert_eq!(*valid == 1, *v != crate::scenegen::BACKGROUND);
            }
            let sum = |x: &Tensor<u8>| x.data().iter().map(|&v| v as u32).sum::<u32>();
            assert_eq!(sum(&a.edges), sum(&scenes[0].edges));
        }
    }
}
