use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sgdm_core::bench::harness::ManifestEntry;
use sgdm_core::bench::scene::default_vocabulary;
use sgdm_core::config::RunConfig;
use sgdm_core::io::checkpoint::save_model;
use sgdm_core::model::{Denoiser, DenoiserConfig};
use sgdm_core::tensor::Tensor;
use sgdm_core::train::TrainConfig;
use tempfile::TempDir;

fn sgdm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sgdm"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = sgdm(args);
    assert!(
        out.status.success(),
        "sgdm {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_model() -> DenoiserConfig {
    DenoiserConfig {
        image_size: 16,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        token_budget: 2,
        vocab_size: default_vocabulary().len(),
        ..Default::default()
    }
}

/// A dataset of four scenes and a one-epoch checkpoint trained on it.
struct Workspace {
    dir: TempDir,
    config: PathBuf,
    data: PathBuf,
    ckpt: PathBuf,
    first: ManifestEntry,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            model: tiny_model(),
            train: TrainConfig {
                epochs: 1,
                batch_size: 2,
                ..Default::default()
            },
            ..Default::default()
        };
        let config = dir.path().join("config.json");
        fs::write(&config, cfg.to_json().unwrap()).unwrap();
        let data = dir.path().join("data");
        let ckpt = dir.path().join("model.sgdm");
        ok(&["gen-data", "--config", p(&config), "--out-dir", p(&data), "--count", "4"]);
        ok(&["train", "--config", p(&config), "--data", p(&data), "--out-ckpt", p(&ckpt)]);
        let manifest = fs::read_to_string(data.join("manifest.jsonl")).unwrap();
        let first = serde_json::from_str(manifest.lines().next().unwrap()).unwrap();
        Self {
            dir,
            config,
            data,
            ckpt,
            first,
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn image(&self) -> PathBuf {
        self.data.join(&self.first.image_path)
    }

    fn mask(&self) -> PathBuf {
        self.data.join(&self.first.mask_path)
    }
}

fn echo(path: &Path) -> RunConfig {
    RunConfig::from_json(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_data_writes_images_masks_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    ok(&["gen-data", "--out-dir", p(&out), "--count", "7"]);
    let manifest = fs::read_to_string(out.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 7);
    for line in manifest.lines() {
        let e: ManifestEntry = serde_json::from_str(line).unwrap();
        let img = fs::read(out.join(&e.image_path)).unwrap();
        assert!(img.starts_with(b"P6\n16 16\n255\n"));
        assert_eq!(img.len(), b"P6\n16 16\n255\n".len() + 16 * 16 * 3);
        let mask = fs::read(out.join(&e.mask_path)).unwrap();
        assert!(mask.starts_with(b"P5\n16 16\n255\n"));
        assert_eq!(e.keypoints.len(), 5);
    }
    let cfg = echo(&out.join("config.json"));
    assert_eq!(cfg.paths.data.as_deref(), Some(p(&out)));
}

#[test]
fn edit_echoes_defaults_and_keeps_the_background() {
    let ws = Workspace::new();
    let out = ws.path("edit.ppm");
    let src = ws.first.p_src.to_string();
    let edit = ws.first.p_edit.to_string();
    ok(&[
        "edit", "--ckpt", p(&ws.ckpt), "--image", p(&ws.image()), "--mask", p(&ws.mask()), "--src", &src, "--edit",
        &edit, "--out", p(&out),
    ]);
    let cfg = echo(&ws.path("edit.ppm.config.json"));
    assert_eq!(cfg.edit.steps, 50);
    assert_eq!(cfg.edit.w_g, 3.5);
    assert_eq!(cfg.edit.mode.name(), "hard");
    assert_eq!(cfg.model, tiny_model());

    let src_img = sgdm_core::io::netpbm::read_ppm(&ws.image()).unwrap();
    let edited = sgdm_core::io::netpbm::read_ppm(&out).unwrap();
    let mask = sgdm_core::io::netpbm::read_pgm(&ws.mask()).unwrap();
    sgdm_core::pipeline::check_locality(&src_img, &edited, &mask).unwrap();

    let side: serde_json::Value = serde_json::from_str(&fs::read_to_string(ws.path("edit.ppm.json")).unwrap()).unwrap();
    assert_eq!(side["hook_calls"], 2 * 50 * 2);
    assert_eq!(side["diagnostics"].as_array().unwrap().len(), 50);
}

#[test]
fn flags_override_the_config_file() {
    let ws = Workspace::new();
    let out = ws.path("r.ppm");
    let src = ws.first.p_src.to_string();
    let stdout = ok(&[
        "reconstruct", "--config", p(&ws.config), "--ckpt", p(&ws.ckpt), "--image", p(&ws.image()), "--mask",
        p(&ws.mask()), "--src", &src, "--steps", "3", "--mode", "soft", "--out", p(&out),
    ]);
    assert!(stdout.contains("PSNR") || stdout.contains("exact"));
    let cfg = echo(&ws.path("r.ppm.config.json"));
    assert_eq!(cfg.edit.steps, 3);
    assert_eq!(cfg.edit.mode.name(), "soft");
    assert_eq!(cfg.edit.w_g, 0.0);
}

#[test]
fn invert_dumps_the_whole_trajectory() {
    let ws = Workspace::new();
    let out = ws.path("traj.sgdm");
    let src = ws.first.p_src.to_string();
    ok(&[
        "invert", "--ckpt", p(&ws.ckpt), "--image", p(&ws.image()), "--mask", p(&ws.mask()), "--src", &src, "--steps",
        "4", "--dump-trajectory", p(&out),
    ]);
    let tensors = sgdm_core::io::checkpoint::decode_tensors(&fs::read(&out).unwrap()).unwrap();
    let names: Vec<&str> = tensors.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["timesteps", "z.0", "z.1", "z.2", "z.3", "z.4"]);
    assert_eq!(tensors[0].1.data(), &[0.0, 250.0, 500.0, 750.0, 1000.0]);
    assert_eq!(tensors[1].1.shape(), &[3, 16, 16]);
}

#[test]
fn eval_reports_every_mode() {
    let ws = Workspace::new();
    let report = ws.path("report.json");
    let stdout = ok(&[
        "eval", "--ckpt", p(&ws.ckpt), "--data", p(&ws.data), "--steps", "3", "--limit", "2", "--report", p(&report),
    ]);
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let modes: Vec<&str> = r["aggregates"].as_array().unwrap().iter().map(|a| a["mode"].as_str().unwrap()).collect();
    assert_eq!(modes, ["none", "token_only", "soft", "hard"]);
    assert_eq!(r["samples"].as_array().unwrap().len(), 8);
    assert_eq!(r["aggregates"][0]["fid"], "unsupported");
    for m in modes {
        assert!(stdout.contains(m));
    }
}

#[test]
fn usage_and_input_errors_exit_with_one() {
    assert_eq!(sgdm(&[]).status.code(), Some(1));
    assert_eq!(sgdm(&["edit", "--out", "x.ppm"]).status.code(), Some(1));
    assert_eq!(sgdm(&["--help"]).status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.sgdm");
    fs::write(&bad, b"not a checkpoint").unwrap();
    let out = sgdm(&[
        "reconstruct", "--ckpt", p(&bad), "--image", "missing.ppm", "--src", "red circle|sand solid", "--out",
        p(&dir.path().join("o.ppm")),
    ]);
    assert_eq!(out.status.code(), Some(1));

    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"edit": {"steps": 0}}"#).unwrap();
    let out = sgdm(&["gen-data", "--config", p(&cfg), "--out-dir", p(&dir.path().join("d")), "--count", "1"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn non_finite_weights_exit_with_two() {
    let ws = Workspace::new();
    let mut model = Denoiser::new(tiny_model(), 0).unwrap();
    for t in model.params_mut().values_mut() {
        *t = Tensor::full(t.shape(), f32::NAN);
    }
    let ckpt = ws.path("nan.sgdm");
    save_model(&model, &ckpt).unwrap();
    let src = ws.first.p_src.to_string();
    let out = sgdm(&[
        "reconstruct", "--ckpt", p(&ckpt), "--image", p(&ws.image()), "--mask", p(&ws.mask()), "--src", &src,
        "--steps", "2", "--out", p(&ws.path("o.ppm")),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let a = Workspace::new();
    let b = Workspace::new();
    for rel in ["model.sgdm", "data/manifest.jsonl"] {
        assert_eq!(fs::read(a.path(rel)).unwrap(), fs::read(b.path(rel)).unwrap(), "{rel}");
    }
    let run = |ws: &Workspace| {
        let out = ws.path("e.ppm");
        ok(&[
            "edit", "--ckpt", p(&ws.ckpt), "--image", p(&ws.image()), "--mask", p(&ws.mask()), "--src",
            &ws.first.p_src.to_string(), "--edit", &ws.first.p_edit.to_string(), "--steps", "4", "--out", p(&out),
        ]);
        fs::read(out).unwrap()
    };
    assert_eq!(run(&a), run(&b));
}
