use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;

use sgdm_core::bench::harness::{run_benchmark, scene_seed, BenchConfig, BenchSample, ManifestEntry};
use sgdm_core::bench::scene::{default_vocabulary, generate_scene, SceneSpec};
use sgdm_core::config::RunConfig;
use sgdm_core::diffusion::NoiseSchedule;
use sgdm_core::inside_outside::{ConstraintMode, ObjectMask};
use sgdm_core::io::checkpoint::{encode_tensors, load_model, save_model};
use sgdm_core::io::netpbm::{read_pgm, read_ppm, write_pgm, write_ppm};
use sgdm_core::model::Denoiser;
use sgdm_core::pipeline::{check_locality, infer_shape, masked_psnr, EditRequest, EditResult, Editor};
use sgdm_core::tensor::Tensor;
use sgdm_core::tokens::{PromptPair, Vocabulary};
use sgdm_core::train::TrainingSample;

use crate::{EditArgs, EvalArgs, GenDataArgs, ImageArgs, InvertArgs, ReconstructArgs, TrainArgs};

const MANIFEST: &str = "manifest.jsonl";

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn path_string(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// Picks the flag if given, else the config entry.
fn resolve(flag: Option<&PathBuf>, configured: &Option<String>, what: &str) -> Result<PathBuf> {
    flag.cloned()
        .or_else(|| configured.as_ref().map(PathBuf::from))
        .ok_or_else(|| anyhow!("missing {what}: pass the flag or set it under \"paths\" in the config"))
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_echo(path: &Path, cfg: &RunConfig) -> Result<()> {
    fs::write(path, cfg.to_json()?).with_context(|| format!("writing {}", path.display()))?;
    log::info!("resolved config written to {}", path.display());
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1)))
        .collect()
}

fn load_checkpoint(path: &Path, cfg: &mut RunConfig) -> Result<Denoiser> {
    let model = load_model(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    cfg.model = model.config().clone();
    cfg.validate()?;
    Ok(model)
}

pub fn gen_data(args: GenDataArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    let out = resolve(args.out_dir.as_ref(), &cfg.paths.data, "--out-dir")?;
    cfg.paths.data = Some(path_string(&out));
    fs::create_dir_all(out.join("images"))?;
    fs::create_dir_all(out.join("masks"))?;
    let mut manifest = Vec::new();
    for i in 0..args.count {
        let seed = scene_seed(cfg.seed, i);
        let spec = SceneSpec::random(seed, cfg.model.image_size);
        let scene = generate_scene(&spec)?;
        let image_path = format!("images/{i:05}.ppm");
        let mask_path = format!("masks/{i:05}.pgm");
        write_ppm(&out.join(&image_path), &scene.image)?;
        write_pgm(&out.join(&mask_path), &scene.mask)?;
        let entry = ManifestEntry {
            seed,
            p_src: scene.p_src.clone(),
            p_edit: spec.recolored(spec.alternate_color())?.prompt(),
            spec,
            image_path,
            mask_path,
            keypoints: scene.keypoints,
        };
        serde_json::to_writer(&mut manifest, &entry)?;
        manifest.write_all(b"\n")?;
    }
    fs::write(out.join(MANIFEST), manifest)?;
    write_echo(&out.join("config.json"), &cfg)?;
    println!("wrote {} scenes to {}", args.count, out.display());
    Ok(())
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    let data = resolve(args.data.as_ref(), &cfg.paths.data, "--data")?;
    let out = resolve(args.out_ckpt.as_ref(), &cfg.paths.checkpoint, "--out-ckpt")?;
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    cfg.paths.data = Some(path_string(&data));
    cfg.paths.checkpoint = Some(path_string(&out));
    cfg.validate()?;

    let vocab = default_vocabulary();
    if cfg.model.vocab_size != vocab.len() {
        bail!("model.vocab_size is {} but the scene vocabulary has {} entries", cfg.model.vocab_size, vocab.len());
    }
    let samples = read_manifest(&data)?
        .into_iter()
        .map(|e| {
            Ok(TrainingSample {
                image: read_ppm(&data.join(&e.image_path))?,
                prompt: e.p_src,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let schedule = NoiseSchedule::from_config(&cfg.schedule)?;
    let mut model = Denoiser::new(cfg.model.clone(), cfg.seed)?;
    log::info!("training {} parameters on {} images", model.n_params(), samples.len());
    let stats = sgdm_core::train::train(&mut model, &schedule, &vocab, &samples, &cfg.train)?;
    save_model(&model, &out)?;
    write_echo(&sidecar(&out, ".config.json"), &cfg)?;
    write_json(&sidecar(&out, ".train.json"), &stats)?;
    println!(
        "final epoch loss {:.5}; checkpoint written to {}",
        stats.epoch_losses.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

/// Resolved single-image inputs.
struct ImageJob {
    cfg: RunConfig,
    model: Denoiser,
    schedule: NoiseSchedule,
    vocab: Vocabulary,
    image: Tensor<f32>,
    mask: ObjectMask,
    mask_source: String,
    p_src: PromptPair,
}

fn image_job(a: &ImageArgs, out: &Path) -> Result<ImageJob> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.steps {
        cfg.edit.steps = s;
    }
    if let Some(m) = &a.mode {
        cfg.edit.mode = m.parse::<ConstraintMode>()?;
    }
    let ckpt = resolve(a.ckpt.as_ref(), &cfg.paths.checkpoint, "--ckpt")?;
    cfg.paths.checkpoint = Some(path_string(&ckpt));
    cfg.paths.out = Some(path_string(out));
    let model = load_checkpoint(&ckpt, &mut cfg)?;
    let schedule = NoiseSchedule::from_config(&cfg.schedule)?;
    let image = read_ppm(&a.image).with_context(|| format!("reading {}", a.image.display()))?;
    let p_src = PromptPair::parse(&a.src);
    let (mask, mask_source) = match &a.mask {
        Some(p) => (
            read_pgm(p).with_context(|| format!("reading {}", p.display()))?,
            path_string(p),
        ),
        None => (infer_shape(&image, &p_src)?, "inferred".to_string()),
    };
    Ok(ImageJob {
        cfg,
        model,
        schedule,
        vocab: default_vocabulary(),
        image,
        mask,
        mask_source,
        p_src,
    })
}

#[derive(Serialize)]
struct EditSidecar<'a> {
    config: &'a RunConfig,
    image: String,
    mask: &'a str,
    p_src: String,
    p_edit: String,
    simultaneous: bool,
    mask_area: usize,
    inside_psnr_db: Option<f64>,
    hook_calls: usize,
    warnings: &'a [String],
    diagnostics: &'a [sgdm_core::pipeline::StepDiagnostics],
}

fn run_edit(a: &ImageArgs, p_edit: PromptPair, simultaneous: bool, out: &Path, job: &ImageJob) -> Result<EditResult> {
    let editor = Editor::new(&job.model, &job.schedule, &job.vocab);
    let req = EditRequest {
        x_src: job.image.clone(),
        p_src: job.p_src.clone(),
        p_edit,
        mask: Some(job.mask.clone()),
        guidance: job.cfg.edit.guidance(),
        steps: job.cfg.edit.steps,
        mode: job.cfg.edit.mode,
        seed: job.cfg.seed,
        options: job.cfg.edit.options(),
    };
    let res = if simultaneous {
        editor.simultaneous_edit(&req)?
    } else {
        editor.edit(&req)?
    };
    for w in &res.warnings {
        log::warn!("{w}");
    }
    write_ppm(out, &res.x_edit)?;
    if job.cfg.edit.blend && !simultaneous {
        // re-read what was written so the check covers quantisation too
        let written = read_ppm(out)?;
        check_locality(&job.image, &written, &res.mask)
            .context("edited file differs from the source outside the mask")?;
    }
    let psnr = masked_psnr(&res.x_edit, &job.image, &res.mask).ok();
    let side = EditSidecar {
        config: &job.cfg,
        image: path_string(&a.image),
        mask: &job.mask_source,
        p_src: req.p_src.to_string(),
        p_edit: req.p_edit.to_string(),
        simultaneous,
        mask_area: res.mask.area(),
        inside_psnr_db: psnr.filter(|p| p.is_finite()),
        hook_calls: res.hook_calls,
        warnings: &res.warnings,
        diagnostics: &res.diagnostics,
    };
    write_json(&sidecar(out, ".json"), &side)?;
    write_echo(&sidecar(out, ".config.json"), &job.cfg)?;
    Ok(res)
}

pub fn edit(args: EditArgs) -> Result<()> {
    let mut job = image_job(&args.image, &args.out)?;
    if let Some(w) = args.wg {
        job.cfg.edit.w_g = w;
    }
    if let Some(r) = args.reweight {
        job.cfg.edit.reweight_scale = r;
    }
    job.cfg.validate()?;
    let res = run_edit(&args.image, PromptPair::parse(&args.edit), args.simultaneous, &args.out, &job)?;
    if let Some(p) = &args.diagnostics {
        fs::write(p, res.diagnostics_jsonl()?)?;
    }
    println!("edited image written to {}", args.out.display());
    Ok(())
}

pub fn reconstruct(args: ReconstructArgs) -> Result<()> {
    let mut job = image_job(&args.image, &args.out)?;
    job.cfg.edit.w_g = 0.0;
    job.cfg.edit.reweight_scale = 1.0;
    job.cfg.validate()?;
    let p = job.p_src.clone();
    let res = run_edit(&args.image, p, false, &args.out, &job)?;
    match masked_psnr(&res.x_edit, &job.image, &res.mask)? {
        p if p.is_finite() => println!("inside-mask PSNR {p:.2} dB"),
        _ => println!("inside-mask reconstruction is exact"),
    }
    Ok(())
}

pub fn invert(args: InvertArgs) -> Result<()> {
    let job = image_job(&args.image, &args.dump_trajectory)?;
    let editor = Editor::new(&job.model, &job.schedule, &job.vocab);
    let traj = editor.inside_outside_inversion(&job.image, &job.p_src, &job.mask, job.cfg.edit.mode, job.cfg.edit.steps)?;
    let names: Vec<String> = (0..traj.latents.len()).map(|i| format!("z.{i}")).collect();
    let times = Tensor::new(&[traj.timesteps.len()], traj.timesteps.iter().map(|&t| t as f32).collect())?;
    let tensors = std::iter::once(("timesteps", &times)).chain(names.iter().map(String::as_str).zip(&traj.latents));
    fs::write(&args.dump_trajectory, encode_tensors(tensors)?)?;
    write_echo(&sidecar(&args.dump_trajectory, ".config.json"), &job.cfg)?;
    println!(
        "{} latents written to {}",
        traj.latents.len(),
        args.dump_trajectory.display()
    );
    Ok(())
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(s) = args.steps {
        cfg.edit.steps = s;
    }
    if let Some(w) = args.wg {
        cfg.edit.w_g = w;
    }
    if let Some(r) = args.reweight {
        cfg.edit.reweight_scale = r;
    }
    let modes = args
        .modes
        .split(',')
        .map(|m| m.trim().parse::<ConstraintMode>())
        .collect::<sgdm_core::Result<Vec<_>>>()?;
    let ckpt = resolve(args.ckpt.as_ref(), &cfg.paths.checkpoint, "--ckpt")?;
    let data = resolve(args.data.as_ref(), &cfg.paths.data, "--data")?;
    cfg.paths.checkpoint = Some(path_string(&ckpt));
    cfg.paths.data = Some(path_string(&data));
    cfg.paths.out = Some(path_string(&args.report));
    let model = load_checkpoint(&ckpt, &mut cfg)?;
    let schedule = NoiseSchedule::from_config(&cfg.schedule)?;
    let mut entries = read_manifest(&data)?;
    if let Some(n) = args.limit {
        entries.truncate(n);
    }
    let dataset = entries
        .into_iter()
        .map(|e| {
            Ok(BenchSample {
                seed: e.seed,
                class: e.spec.class,
                image: read_ppm(&data.join(&e.image_path))?,
                mask: read_pgm(&data.join(&e.mask_path))?,
                p_src: e.p_src,
                p_edit: e.p_edit,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let bench = BenchConfig {
        modes,
        guidance: cfg.edit.guidance(),
        steps: cfg.edit.steps,
        options: sgdm_core::pipeline::EditOptions {
            diagnostics: false,
            ..cfg.edit.options()
        },
        ..Default::default()
    };
    let report = run_benchmark(&model, &schedule, &default_vocabulary(), &dataset, &bench)?;
    write_json(&args.report, &report)?;
    write_echo(&sidecar(&args.report, ".config.json"), &cfg)?;
    print!("{}", report.table());
    let failed: usize = report.aggregates.iter().map(|a| a.failed).sum();
    if failed > 0 {
        log::warn!("{failed} edits failed; see the report for details");
    }
    Ok(())
}
