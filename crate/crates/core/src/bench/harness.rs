//! Recolor-edit suite, benchmark runner and report.

use serde::{Deserialize, Serialize};

use crate::diffusion::{GuidanceConfig, NoiseSchedule};
use crate::error::{Error, Result};
use crate::inside_outside::{ConstraintMode, ObjectMask};
use crate::model::Denoiser;
use crate::pipeline::{EditOptions, EditRequest, Editor};
use crate::tensor::Tensor;
use crate::tokens::{PromptPair, Vocabulary};

use super::metrics::{kw_miou, miou, pck, PCK_THRESHOLD};
use super::oracle::{keypoints_from_mask, oracle_segment};
use super::scene::{generate_scene, Keypoint, Scene, SceneSpec, ShapeClass};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// One source image with its ground truth and an edit prompt.
#[derive(Clone, Debug)]
pub struct BenchSample {
    pub seed: u64,
    pub class: ShapeClass,
    pub image: Tensor<f32>,
    pub mask: ObjectMask,
    pub p_src: PromptPair,
    pub p_edit: PromptPair,
}

impl BenchSample {
    pub fn from_scene(scene: &Scene, p_edit: PromptPair) -> Self {
        Self {
            seed: scene.spec.seed,
            class: scene.class,
            image: scene.image.clone(),
            mask: scene.mask.clone(),
            p_src: scene.p_src.clone(),
            p_edit,
        }
    }
}

/// A line of the dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub seed: u64,
    pub spec: SceneSpec,
    pub image_path: String,
    pub mask_path: String,
    pub keypoints: Vec<Keypoint>,
    pub p_src: PromptPair,
    pub p_edit: PromptPair,
}

/// Scene recipe for index `i` of a dataset with base seed `seed`.
pub fn scene_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(i as u64)
}

/// `count` random scenes, each paired with an edit to the other colour of
/// its class.
pub fn recolor_suite(seed: u64, count: usize, size: usize) -> Result<Vec<BenchSample>> {
    (0..count)
        .map(|i| {
            let spec = SceneSpec::random(scene_seed(seed, i), size);
            let scene = generate_scene(&spec)?;
            let p_edit = spec.recolored(spec.alternate_color())?.prompt();
            Ok(BenchSample::from_scene(&scene, p_edit))
        })
        .collect()
}

/// Worker count from `SGDM_THREADS`; unset or 0 means all cores.
pub fn worker_count() -> usize {
    let auto = || std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    match std::env::var("SGDM_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(0) | None => auto(),
        Some(n) => n,
    }
}

/// Maps `f` over `items` on up to `workers` threads, keeping input order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(usize, &T) -> R + Sync) -> Vec<R> {
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().enumerate().map(|(i, x)| f(i, x)).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                s.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(j, x)| f(c * chunk + j, x))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("benchmark worker panicked"))
            .collect()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleStatus {
    Ok,
    /// Ground truth and prediction both empty: IoU undefined.
    Excluded,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub seed: u64,
    pub mode: ConstraintMode,
    pub class: String,
    pub p_src: String,
    pub p_edit: String,
    pub status: SampleStatus,
    pub miou: Option<f64>,
    pub pck: Option<f64>,
    pub kw_miou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeAggregate {
    pub mode: ConstraintMode,
    pub samples: usize,
    pub excluded: usize,
    pub failed: usize,
    pub miou: f64,
    pub pck: f64,
    pub kw_miou: f64,
    pub fid: String,
    pub clip: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub modes: Vec<ConstraintMode>,
    pub guidance: GuidanceConfig,
    pub steps: usize,
    pub options: EditOptions,
    pub pck_threshold: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            modes: ConstraintMode::ALL.to_vec(),
            guidance: GuidanceConfig::default(),
            steps: 50,
            options: EditOptions {
                diagnostics: false,
                ..Default::default()
            },
            pck_threshold: PCK_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema_version: u32,
    pub config: BenchConfig,
    pub samples: Vec<SampleRecord>,
    pub aggregates: Vec<ModeAggregate>,
}

impl BenchReport {
    pub fn aggregate(&self, mode: ConstraintMode) -> Option<&ModeAggregate> {
        self.aggregates.iter().find(|a| a.mode == mode)
    }

    /// Plain-text table, one row per mode.
    pub fn table(&self) -> String {
        let mut out = format!("{:<11} {:>7} {:>7} {:>7} {:>5}\n", "mode", "mIoU", "PCK", "KW-mIoU", "n");
        for a in &self.aggregates {
            out.push_str(&format!(
                "{:<11} {:>7.4} {:>7.4} {:>7.4} {:>5}\n",
                a.mode.name(),
                a.miou,
                a.pck,
                a.kw_miou,
                a.samples
            ));
        }
        out
    }
}

/// Edits every sample in every mode and scores the results.
pub fn run_benchmark(
    model: &Denoiser<f32>,
    schedule: &NoiseSchedule,
    vocab: &Vocabulary,
    dataset: &[BenchSample],
    config: &BenchConfig,
) -> Result<BenchReport> {
    config.guidance.validate()?;
    if config.modes.is_empty() {
        return Err(Error::Parameter("no constraint modes requested".into()));
    }
    let editor = Editor::new(model, schedule, vocab);
    let jobs: Vec<(usize, ConstraintMode)> = config
        .modes
        .iter()
        .flat_map(|&m| (0..dataset.len()).map(move |i| (i, m)))
        .collect();
    let samples = parallel_map(&jobs, worker_count(), |_, &(i, mode)| {
        score(&editor, i, &dataset[i], mode, config)
    });
    let aggregates = config.modes.iter().map(|&m| aggregate(m, &samples)).collect();
    Ok(BenchReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config: config.clone(),
        samples,
        aggregates,
    })
}

fn score(editor: &Editor, index: usize, sample: &BenchSample, mode: ConstraintMode, config: &BenchConfig) -> SampleRecord {
    let mut record = SampleRecord {
        index,
        seed: sample.seed,
        mode,
        class: sample.class.name().to_string(),
        p_src: sample.p_src.to_string(),
        p_edit: sample.p_edit.to_string(),
        status: SampleStatus::Ok,
        miou: None,
        pck: None,
        kw_miou: None,
        error: None,
    };
    let req = EditRequest {
        x_src: sample.image.clone(),
        p_src: sample.p_src.clone(),
        p_edit: sample.p_edit.clone(),
        mask: Some(sample.mask.clone()),
        guidance: config.guidance.clone(),
        steps: config.steps,
        mode,
        seed: sample.seed,
        options: config.options,
    };
    let outcome = editor.edit(&req).and_then(|res| {
        let pred = oracle_segment(&res.x_edit, sample.class)?.and(&sample.mask)?;
        let m = miou(&pred, &sample.mask, &sample.mask)?;
        let reference = keypoints_from_mask(&sample.mask).unwrap_or_default();
        let found = keypoints_from_mask(&pred).unwrap_or_default();
        let p = if reference.is_empty() {
            None
        } else {
            Some(pck(&found, &reference, config.pck_threshold)?)
        };
        Ok((m, p))
    });
    match outcome {
        Ok((Some(m), Some(p))) => {
            record.miou = Some(m);
            record.pck = Some(p);
            record.kw_miou = Some(kw_miou(m, p));
        }
        Ok(_) => record.status = SampleStatus::Excluded,
        Err(e) => {
            record.status = SampleStatus::Failed;
            record.error = Some(e.to_string());
        }
    }
    record
}

fn aggregate(mode: ConstraintMode, samples: &[SampleRecord]) -> ModeAggregate {
    let rows: Vec<&SampleRecord> = samples.iter().filter(|s| s.mode == mode).collect();
    let ok: Vec<&&SampleRecord> = rows.iter().filter(|s| s.status == SampleStatus::Ok).collect();
    let mean = |f: &dyn Fn(&SampleRecord) -> Option<f64>| {
        if ok.is_empty() {
            0.0
        } else {
            ok.iter().filter_map(|s| f(s)).sum::<f64>() / ok.len() as f64
        }
    };
    ModeAggregate {
        mode,
        samples: ok.len(),
        excluded: rows.iter().filter(|s| s.status == SampleStatus::Excluded).count(),
        failed: rows.iter().filter(|s| s.status == SampleStatus::Failed).count(),
        miou: mean(&|s| s.miou),
        pck: mean(&|s| s.pck),
        kw_miou: mean(&|s| s.kw_miou),
        fid: "unsupported".into(),
        clip: "unsupported".into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(mode: ConstraintMode, status: SampleStatus, m: f64, p: f64) -> SampleRecord {
        SampleRecord {
            index: 0,
            seed: 0,
            mode,
            class: "circle".into(),
            p_src: String::new(),
            p_edit: String::new(),
            status,
            miou: (status == SampleStatus::Ok).then_some(m),
            pck: (status == SampleStatus::Ok).then_some(p),
            kw_miou: (status == SampleStatus::Ok).then_some(m * p),
            error: None,
        }
    }

    #[test]
    fn aggregate_is_the_mean_of_ok_rows() {
        let rows = vec![
            record(ConstraintMode::Hard, SampleStatus::Ok, 1.0, 1.0),
            record(ConstraintMode::Hard, SampleStatus::Ok, 0.5, 0.4),
            record(ConstraintMode::Hard, SampleStatus::Failed, 0.0, 0.0),
            record(ConstraintMode::None, SampleStatus::Ok, 0.2, 0.2),
        ];
        let a = aggregate(ConstraintMode::Hard, &rows);
        assert_eq!((a.samples, a.failed, a.excluded), (2, 1, 0));
        assert_eq!(a.miou, 0.75);
        assert_eq!(a.pck, 0.7);
        assert_eq!(a.kw_miou, 0.6);
        let mut shuffled = rows.clone();
        shuffled.reverse();
        assert_eq!(aggregate(ConstraintMode::Hard, &shuffled), a);
    }

    #[test]
    fn parallel_map_keeps_order() {
        let items: Vec<usize> = (0..37).collect();
        for workers in [1, 2, 5, 64] {
            assert_eq!(parallel_map(&items, workers, |i, x| i * 100 + x * 2), items.iter().map(|x| x * 102).collect::<Vec<_>>());
        }
    }

    #[test]
    fn suite_edits_stay_within_class() {
        for s in recolor_suite(7, 20, 16).unwrap() {
            assert_eq!(s.p_edit.inside[1], s.p_src.inside[1]);
            assert_ne!(s.p_edit.inside[0], s.p_src.inside[0]);
            assert_eq!(s.p_edit.outside, s.p_src.outside);
        }
    }
}
