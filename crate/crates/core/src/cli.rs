//! The `sci` command-line front end.
//!
//! Every subcommand prints a one-line JSON summary on success. Exit codes:
//! 0 success, 1 usage, 2 data/format, 3 numeric.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use crate::cdt::{self, StoredTensor};
use crate::config::KeyValues;
use crate::egcodec::{egcr, EgConfig};
use crate::error::{Error, Result};
use crate::maskgen::{gen_submask, tile_mask};
use crate::nnet::{gradcheck, Checkpoint, HeadKind};
use crate::rng::derive_stream;
use crate::scenegen::{ingest_frames, Dataset, SceneConfig};
use crate::sensor::{noiseless, simulate};
use crate::tasks::{checkpoint_mask, evaluate, finetune, EvalConfig};
use crate::train::{pretrain, run_config_from_text, TrainConfig};
use crate::types::{MaskStack, VideoCube};

/// Gradient checks above this relative error fail.
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "sci", about = "Photon-limited snapshot compressive imaging toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    Scenegen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
    },
    /// Generate a tiled binary mask stack.
    Maskgen {
        #[arg(long)]
        t: usize,
        #[arg(long)]
        size: usize,
        #[arg(long)]
        rho: f64,
        #[arg(long)]
        height: usize,
        #[arg(long)]
        width: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Take a noisy coded measurement of a video.
    Simulate {
        #[arg(long, conflicts_with = "frames", required_unless_present = "frames")]
        cube: Option<PathBuf>,
        #[arg(long)]
        frames: Option<PathBuf>,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        apc: f64,
        #[arg(long)]
        sigma: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        clean_out: Option<PathBuf>,
    },
    /// Train a reconstruction model from scratch.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a task head and decoder on a frozen encoder.
    Finetune {
        #[arg(long)]
        task: HeadKind,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        task: HeadKind,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        apc: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 0.01)]
        sigma: f64,
        /// Measure with this many frames instead of the trained ratio.
        #[arg(long)]
        cr: Option<usize>,
        #[arg(long, default_value_t = crate::tasks::DEFAULT_TOL_RADIUS)]
        tol_radius: usize,
    },
    /// Exp-Golomb compactness of checkpoint parameters.
    Egcr {
        #[arg(long, required = true, num_args = 1..)]
        ckpt: Vec<PathBuf>,
        #[arg(long, default_value_t = 0)]
        order: u32,
        #[arg(long, default_value_t = 16)]
        bits: u32,
    },
    /// Finite-difference check of the network gradient.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn hex(d: u64) -> String {
    format!("{d:016x}")
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn read_video(path: &Path) -> Result<VideoCube> {
    let t = cdt::read(path)?.into_real32()?;
    let t = match t.shape() {
        [_, _, _] => t,
        [1, a, b, c] => {
            let s = [*a, *b, *c];
            t.reshape(&s)?
        }
        other => {
            return Err(Error::Shape(format!(
                "{} holds {other:?}, expected (T,H,W)",
                path.display()
            )))
        }
    };
    VideoCube::new(t)
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

fn file_digest(path: &Path) -> Result<String> {
    Ok(hex(cdt::digest64(&fs::read(path).map_err(|e| Error::io(path, e))?)))
}

fn run(cmd: Command) -> Result<Vec<Value>> {
    match cmd {
        Command::Scenegen { config, out, seed } => {
            let mut kv = KeyValues::parse(&read_text(&config)?)?;
            let mut cfg = SceneConfig::take_from(&mut kv)?;
            kv.finish()?;
            cfg.seed = seed;
            let ds = Dataset::generate(&cfg)?;
            let files = ds.save(&out)?;
            Ok(vec![json!({
                "command": "scenegen",
                "config": config,
                "seed": seed,
                "scenes": ds.len(),
                "dataset_digest": hex(ds.digest()?),
                "outputs": files,
            })])
        }
        Command::Maskgen {
            t,
            size,
            rho,
            height,
            width,
            seed,
            out,
        } => {
            let sub = gen_submask(t, size, rho, &mut derive_stream(seed, "mask"))?;
            let mask = tile_mask(&sub, height, width)?;
            cdt::write(&out, &StoredTensor::Uint8(mask.tensor().clone()))?;
            Ok(vec![json!({
                "command": "maskgen",
                "seed": seed,
                "shape": mask.shape(),
                "mask_id": hex(mask.id()),
                "submask_digest": hex(sub.digest()),
                "outputs": [out],
            })])
        }
        Command::Simulate {
            cube,
            frames,
            mask,
            apc,
            sigma,
            seed,
            out,
            clean_out,
        } => {
            let (video, source) = match (&cube, &frames) {
                (Some(c), _) => (read_video(c)?, c.clone()),
                (None, Some(dir)) => (ingest_frames(dir)?, dir.clone()),
                (None, None) => return Err(Error::Usage("one of --cube or --frames is required".into())),
            };
            let m = MaskStack::new(cdt::read(&mask)?.into_uint8()?)?;
            let meas = simulate(&video, &m, apc, sigma, &mut derive_stream(seed, "simulate"))?;
            cdt::write(&out, &StoredTensor::Real32(meas.y.clone()))?;
            let side = sidecar_path(&out);
            fs::write(&side, meas.sidecar()).map_err(|e| Error::io(&side, e))?;
            let mut outputs = vec![out.clone(), side];
            if let Some(clean) = &clean_out {
                cdt::write(clean, &StoredTensor::Real32(noiseless(&video, &m, seed)?.y))?;
                outputs.push(clean.clone());
            }
            Ok(vec![json!({
                "command": "simulate",
                "input": source,
                "video_digest": hex(cdt::tensor_digest(&StoredTensor::Real32(video.tensor().clone()))),
                "mask_id": hex(m.id()),
                "apc": apc,
                "sigma": sigma,
                "alpha": meas.photon.map(|p| p.alpha()),
                "seed": seed,
                "outputs": outputs,
            })])
        }
        Command::Pretrain { config, data, out } => {
            let (model_cfg, train_cfg) = run_config_from_text(&read_text(&config)?)?;
            let ds = Dataset::load(&data)?;
            let (ckpt, outcome) = pretrain(&model_cfg, &train_cfg, &ds.scenes, Some(&out), &mut std::io::sink())?;
            let path = out.join("model.cdp");
            ckpt.save(&path)?;
            Ok(vec![json!({
                "command": "pretrain",
                "config": config,
                "dataset_digest": hex(ds.digest()?),
                "seed": train_cfg.seed,
                "steps": outcome.logs.len(),
                "final_task_loss": outcome.final_task_loss(),
                "checkpoint": path,
                "checkpoint_digest": hex(ckpt.digest()),
                "log": out.join("train_log.jsonl"),
            })])
        }
        Command::Finetune {
            task,
            ckpt,
            config,
            data,
            out,
        } => {
            let cfg = TrainConfig::from_text(&read_text(&config)?)?;
            let parent = Checkpoint::load(&ckpt)?;
            let ds = Dataset::load(&data)?;
            let (tuned, outcome) = finetune(&parent, task, &ds.scenes, &cfg, Some(&out), &mut std::io::sink())?;
            let path = out.join("model.cdp");
            tuned.save(&path)?;
            Ok(vec![json!({
                "command": "finetune",
                "task": task.as_str(),
                "pretrain_digest": hex(parent.digest()),
                "dataset_digest": hex(ds.digest()?),
                "seed": cfg.seed,
                "steps": outcome.logs.len(),
                "final_task_loss": outcome.final_task_loss(),
                "checkpoint": path,
                "checkpoint_digest": hex(tuned.digest()),
            })])
        }
        Command::Eval {
            task,
            ckpt,
            data,
            apc,
            seed,
            report,
            sigma,
            cr,
            tol_radius,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            if ck.config.head != task {
                return Err(Error::Config(format!(
                    "checkpoint has a {} head, not {}",
                    ck.config.head.as_str(),
                    task.as_str()
                )));
            }
            let ds = Dataset::load(&data)?;
            let cr = cr.unwrap_or(ck.config.cr);
            let scenes = ds.scenes.iter().map(|s| s.prefix(cr)).collect::<Result<Vec<_>>>()?;
            let mask = checkpoint_mask(&ck, cr)?;
            let cfg = EvalConfig {
                apc,
                sigma,
                seed,
                tol_radius,
                ..EvalConfig::default()
            };
            let mut metrics = evaluate(&ck.model()?, &mask, &scenes, &cfg)?;
            metrics.checkpoint_digest = hex(ck.digest());
            metrics.dataset_digest = hex(ds.digest()?);
            let text = serde_json::to_string_pretty(&metrics).expect("serializable report");
            fs::write(&report, text).map_err(|e| Error::io(&report, e))?;
            let mut summary = serde_json::to_value(&metrics).expect("serializable report");
            let obj = summary.as_object_mut().unwrap();
            obj.remove("thresholds");
            obj.insert("command".into(), json!("eval"));
            obj.insert("report".into(), json!(report));
            Ok(vec![summary])
        }
        Command::Egcr { ckpt, order, bits } => {
            let cfg = EgConfig::new(order, bits)?;
            ckpt.iter()
                .map(|path| {
                    let ck = Checkpoint::load(path)?;
                    let r = egcr(&ck.params, &cfg)?;
                    let mut v = serde_json::to_value(&r).expect("serializable report");
                    let obj = v.as_object_mut().unwrap();
                    obj.insert("command".into(), json!("egcr"));
                    obj.insert("checkpoint".into(), json!(path));
                    obj.insert("checkpoint_digest".into(), json!(file_digest(path)?));
                    Ok(v)
                })
                .collect()
        }
        Command::Gradcheck { seed } => {
            let mut worst: Option<(HeadKind, crate::nnet::GradcheckReport)> = None;
            let mut checked = 0;
            for head in [HeadKind::Reconstruction, HeadKind::Edge, HeadKind::Depth] {
                let r = gradcheck(seed, head)?;
                checked += r.params_checked;
                if worst.as_ref().map_or(true, |(_, w)| r.max_rel_err > w.max_rel_err) {
                    worst = Some((head, r));
                }
            }
            let (head, r) = worst.unwrap();
            let summary = json!({
                "command": "gradcheck",
                "seed": seed,
                "max_rel_err": r.max_rel_err,
                "worst_param": format!("{}:{}", head.as_str(), r.worst_param),
                "params_checked": checked,
                "step": r.step,
                "tolerance": GRADCHECK_TOL,
                "pass": r.max_rel_err < GRADCHECK_TOL,
            });
            if r.max_rel_err >= GRADCHECK_TOL {
                return Err(Error::Numeric(format!("gradient check failed: {summary}")));
            }
            Ok(vec![summary])
        }
    }
}

/// Parse `argv` (program name first), run the command and return the
/// process exit code.
pub fn dispatch<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                1
            } else {
                let _ = write!(out, "{text}");
                0
            };
        }
    };
    match run(cli.command) {
        Ok(lines) => {
            for line in lines {
                let _ = writeln!(out, "{line}");
            }
            0
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let argv = std::iter::once("sci").chain(args.iter().copied());
        let code = dispatch(argv, &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(call(&["frobnicate"]).0, 1);
        assert_eq!(call(&["maskgen", "--t", "8"]).0, 1);
        assert_eq!(call(&["gradcheck", "--bogus", "1"]).0, 1);
        assert_eq!(call(&["--help"]).0, 0);
    }

    #[test]
    fn maskgen_writes_mask() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("m.cdt");
        let o = out.to_str().unwrap();
        let (code, stdout, _) = call(&[
            "maskgen", "--t", "8", "--size", "8", "--rho", "0.5", "--height", "32", "--width", "32", "--seed", "1",
            "--out", o,
        ]);
        assert_eq!(code, 0);
        let v: Value = serde_json::from_str(stdout.trim()).unwrap();
        assert_eq!(v["command"], "maskgen");
        let m = cdt::read(&out).unwrap().into_uint8().unwrap();
        assert_eq!(m.shape(), [8, 32, 32]);
    }
}
