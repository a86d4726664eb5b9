use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sci_core::cdt::{self, StoredTensor};
use sci_core::nnet::{Checkpoint, Partition};
use sci_core::Tensor;
use serde_json::Value;

fn sci(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sci"))
        .args(args)
        .output()
        .expect("run sci")
}

fn summary(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout.clone()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1, "{text}");
    serde_json::from_str(lines[0]).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_cube(path: &Path, t: usize, h: usize, w: usize) {
    let data = (0..t * h * w).map(|k| (k % 7) as f32 / 7.0).collect();
    cdt::write(path, &StoredTensor::Real32(Tensor::from_vec(&[t, h, w], data).unwrap())).unwrap();
}

fn maskgen(dir: &Path, t: usize, h: usize, w: usize) -> std::path::PathBuf {
    let out = dir.join(format!("mask_{t}_{h}_{w}.cdt"));
    let (t, h, w) = (t.to_string(), h.to_string(), w.to_string());
    summary(&sci(&[
        "maskgen",
        "--t",
        &t,
        "--size",
        "4",
        "--rho",
        "0.5",
        "--height",
        &h,
        "--width",
        &w,
        "--seed",
        "1",
        "--out",
        p(&out),
    ]));
    out
}

#[test]
fn maskgen_contract() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.cdt");
    let s = summary(&sci(&[
        "maskgen",
        "--t",
        "8",
        "--size",
        "8",
        "--rho",
        "0.5",
        "--height",
        "32",
        "--width",
        "32",
        "--seed",
        "1",
        "--out",
        p(&out),
    ]));
    assert_eq!(s["command"], "maskgen");
    let m = cdt::read(&out).unwrap();
    assert_eq!(m.shape(), [8, 32, 32]);
    assert!(matches!(m, StoredTensor::Uint8(_)));
}

#[test]
fn unknown_subcommand_and_flag_are_usage_errors() {
    let out = sci(&["transmogrify"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
    let out = sci(&["gradcheck", "--nope"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn simulate_shape_mismatch_names_both_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let cube = dir.path().join("x.cdt");
    write_cube(&cube, 4, 8, 8);
    let mask = maskgen(dir.path(), 4, 8, 12);
    let out = sci(&[
        "simulate",
        "--cube",
        p(&cube),
        "--mask",
        p(&mask),
        "--apc",
        "20",
        "--sigma",
        "0.01",
        "--seed",
        "3",
        "--out",
        p(&dir.path().join("y.cdt")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("[4, 8, 8]") && err.contains("[4, 8, 12]"), "{err}");
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cube = dir.path().join("x.cdt");
    write_cube(&cube, 4, 8, 8);
    let mask = maskgen(dir.path(), 4, 8, 8);
    let run = |name: &str| {
        let out = dir.path().join(name);
        let clean = dir.path().join(format!("clean_{name}"));
        summary(&sci(&[
            "simulate",
            "--cube",
            p(&cube),
            "--mask",
            p(&mask),
            "--apc",
            "20",
            "--sigma",
            "0.01",
            "--seed",
            "3",
            "--out",
            p(&out),
            "--clean-out",
            p(&clean),
        ]));
        (
            fs::read(&out).unwrap(),
            fs::read(format!("{}.meta", out.display())).unwrap(),
            fs::read(&clean).unwrap(),
        )
    };
    assert_eq!(run("a.cdt"), run("b.cdt"));
}

#[test]
fn simulate_from_frames() {
    let dir = tempfile::tempdir().unwrap();
    let frames = dir.path().join("frames");
    fs::create_dir(&frames).unwrap();
    for f in 0..4u8 {
        let px: Vec<u8> = (0..64).map(|k| k * 3 + f).collect();
        sci_core::scenegen::write_pgm(frames.join(format!("f{f}.pgm")), 8, 8, &px).unwrap();
    }
    let mask = maskgen(dir.path(), 4, 8, 8);
    let out = dir.path().join("y.cdt");
    let s = summary(&sci(&[
        "simulate",
        "--frames",
        p(&frames),
        "--mask",
        p(&mask),
        "--apc",
        "10",
        "--sigma",
        "0",
        "--seed",
        "1",
        "--out",
        p(&out),
    ]));
    assert_eq!(s["command"], "simulate");
    assert_eq!(cdt::read(&out).unwrap().shape(), [8, 8]);
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("scenes.txt"),
        "t = 2\nheight = 8\nwidth = 8\nmin_size = 2\nmax_size = 6\ncount = 4\nmax_speed = 0.5\n",
    )
    .unwrap();
    let data = d.join("data");
    let s = summary(&sci(&[
        "scenegen",
        "--config",
        p(&d.join("scenes.txt")),
        "--out",
        p(&data),
        "--seed",
        "5",
    ]));
    assert_eq!(s["scenes"], 4);

    fs::write(
        d.join("pre.txt"),
        "channels = 4\nencoder_depth = 2\ndecoder_depth = 0\ncr = 2\nheight = 8\nwidth = 8\n\
         epochs = 2\nbatch_size = 2\nlr = 0.003\nmask_size = 4\nseed = 11\nbackslash_mode = half\n",
    )
    .unwrap();
    let pre = d.join("pre");
    let s = summary(&sci(&[
        "pretrain",
        "--config",
        p(&d.join("pre.txt")),
        "--data",
        p(&data),
        "--out",
        p(&pre),
    ]));
    assert_eq!(s["steps"], 4);
    let ckpt = pre.join("model.cdp");
    assert!(pre.join("epoch_002.cdp").exists());
    let log = fs::read_to_string(pre.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);

    fs::write(d.join("ft.txt"), "epochs = 1\nbatch_size = 2\nlr = 0.003\nseed = 12\n").unwrap();
    let ft = d.join("ft");
    let s = summary(&sci(&[
        "finetune",
        "--task",
        "edge",
        "--ckpt",
        p(&ckpt),
        "--config",
        p(&d.join("ft.txt")),
        "--data",
        p(&data),
        "--out",
        p(&ft),
    ]));
    assert_eq!(s["task"], "edge");
    let parent = Checkpoint::load(&ckpt).unwrap();
    let tuned = Checkpoint::load(ft.join("model.cdp")).unwrap();
    assert_eq!(
        tuned.params.digest(Some(Partition::Encoder)),
        parent.params.digest(Some(Partition::Encoder))
    );
    assert_eq!(
        tuned.meta_value("pretrain_digest"),
        Some(format!("{:016x}", parent.digest()).as_str())
    );

    let report = d.join("edge.json");
    let s = summary(&sci(&[
        "eval",
        "--task",
        "edge",
        "--ckpt",
        p(&ft.join("model.cdp")),
        "--data",
        p(&data),
        "--apc",
        "20",
        "--seed",
        "1",
        "--report",
        p(&report),
    ]));
    assert_eq!(s["task"], "edge");
    let full: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    for key in [
        "ods",
        "ois",
        "thresholds",
        "tol_radius",
        "checkpoint_digest",
        "dataset_digest",
        "apc",
        "seed",
    ] {
        assert!(full.get(key).is_some(), "{key}");
    }

    let report = d.join("recon.json");
    let s = summary(&sci(&[
        "eval",
        "--task",
        "recon",
        "--ckpt",
        p(&ckpt),
        "--data",
        p(&data),
        "--apc",
        "20",
        "--seed",
        "1",
        "--report",
        p(&report),
    ]));
    assert!(s["psnr_db"].as_f64().is_some());

    let out = sci(&[
        "eval",
        "--task",
        "depth",
        "--ckpt",
        p(&ckpt),
        "--data",
        p(&data),
        "--apc",
        "20",
        "--seed",
        "1",
        "--report",
        p(&report),
    ]);
    assert_eq!(out.status.code(), Some(2));

    let out = sci(&["egcr", "--ckpt", p(&ckpt), p(&ft.join("model.cdp")), "--order", "0"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 2);
    for line in text.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        for key in ["egcr_percent", "avg_bits", "total_params", "order", "baseline_bits"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }
}

#[test]
fn corrupt_checkpoint_is_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cdp");
    fs::write(&bad, b"CDP2garbage").unwrap();
    let out = sci(&["egcr", "--ckpt", p(&bad)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_command() {
    let s = summary(&sci(&["gradcheck", "--seed", "2"]));
    assert_eq!(s["pass"], true);
    assert!(s["max_rel_err"].as_f64().unwrap() < 1e-4);
}
