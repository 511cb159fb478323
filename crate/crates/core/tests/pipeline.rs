//! Structural invariants of the editing pipeline on an untrained model.

use sgdm_core::bench::scene::{default_vocabulary, generate_scene, SceneSpec, ShapeClass};
use sgdm_core::diffusion::{GuidanceConfig, NoiseSchedule, ScheduleConfig};
use sgdm_core::inside_outside::{build_pyramid, make_transform, ConstraintMode, ObjectMask};
use sgdm_core::model::{AttentionKind, AttentionSite, Denoiser, DenoiserConfig};
use sgdm_core::pipeline::{check_locality, infer_shape, EditOptions, EditRequest, Editor};
use sgdm_core::tensor::Tensor;
use sgdm_core::tokens::{tokenize, PromptPair, Vocabulary};
use sgdm_core::Error;

struct Fixture {
    model: Denoiser,
    schedule: NoiseSchedule,
    vocab: Vocabulary,
}

fn fixture() -> Fixture {
    let vocab = default_vocabulary();
    let config = DenoiserConfig {
        image_size: 8,
        d_model: 16,
        n_layers: 2,
        token_budget: 2,
        pool_middle: true,
        vocab_size: vocab.len(),
        ..Default::default()
    };
    Fixture {
        model: Denoiser::new(config, 9).unwrap(),
        schedule: NoiseSchedule::from_config(&ScheduleConfig::default()).unwrap(),
        vocab,
    }
}

fn request(seed: u64, steps: usize, w_g: f64, mode: ConstraintMode) -> EditRequest {
    let spec = SceneSpec::random(seed, 8);
    let scene = generate_scene(&spec).unwrap();
    EditRequest {
        x_src: scene.image,
        p_src: scene.p_src,
        p_edit: spec.recolored(spec.alternate_color()).unwrap().prompt(),
        mask: Some(scene.mask),
        guidance: GuidanceConfig {
            w_g,
            ..Default::default()
        },
        steps,
        mode,
        seed,
        options: EditOptions::default(),
    }
}

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn trajectory_shape_and_determinism() {
    let f = fixture();
    let ed = Editor::new(&f.model, &f.schedule, &f.vocab);
    for steps in [1, 3, 7] {
        let r = request(1, steps, 3.5, ConstraintMode::None);
        let mask = r.mask.clone().unwrap();
        let a = ed.inside_outside_inversion(&r.x_src, &r.p_src, &mask, r.mode, steps).unwrap();
        let b = ed.inside_outside_inversion(&r.x_src, &r.p_src, &mask, r.mode, steps).unwrap();
        assert_eq!(a.latents.len(), steps + 1);
        assert_eq!(bits(&a.latents[0]), bits(&r.x_src));
        for (x, y) in a.latents.iter().zip(&b.latents) {
            assert_eq!(bits(x), bits(y));
        }
        let hard = ed
            .inside_outside_inversion(&r.x_src, &r.p_src, &mask, ConstraintMode::Hard, steps)
            .unwrap();
        assert_ne!(bits(hard.last()), bits(a.last()));
    }
}

#[test]
fn edits_are_local_and_deterministic() {
    let f = fixture();
    let ed = Editor::new(&f.model, &f.schedule, &f.vocab);
    for (seed, mode) in (0..8).zip(ConstraintMode::ALL.into_iter().cycle()) {
        let r = request(seed, 4, 3.5, mode);
        let a = ed.edit(&r).unwrap();
        let b = ed.edit(&r).unwrap();
        assert_eq!(bits(&a.x_edit), bits(&b.x_edit));
        check_locality(&r.x_src, &a.x_edit, r.mask.as_ref().unwrap()).unwrap();
        assert_ne!(bits(&a.x_edit), bits(&r.x_src), "the inside should change");
    }
}

#[test]
fn hook_runs_on_both_guidance_passes() {
    let f = fixture();
    let ed = Editor::new(&f.model, &f.schedule, &f.vocab);
    let steps = 3;
    let res = ed.edit(&request(2, steps, 3.5, ConstraintMode::Hard)).unwrap();
    assert_eq!(res.hook_calls, 2 * steps * f.model.config().n_layers * 2);
    assert_eq!(res.diagnostics.len(), steps);
}

#[test]
fn skipping_the_unguided_pass_changes_nothing() {
    let f = fixture();
    let ed = Editor::new(&f.model, &f.schedule, &f.vocab);
    let mut r = request(3, 4, 0.0, ConstraintMode::Soft);
    let full = ed.edit(&r).unwrap();
    r.options.skip_unguided_uncond = true;
    let skipped = ed.edit(&r).unwrap();
    assert_eq!(bits(&full.x_edit), bits(&skipped.x_edit));
    assert_eq!(skipped.hook_calls * 2, full.hook_calls);
}

#[test]
fn full_mask_makes_blending_an_identity() {
    let f = fixture();
    let ed = Editor::new(&f.model, &f.schedule, &f.vocab);
    let mut r = request(4, 3, 2.0, ConstraintMode::Hard);
    r.mask = Some(ObjectMask::filled(8, 8, true));
    r.p_edit.outside.clear();
    let blended = ed.edit(&r).unwrap();
    r.options.blend = false;
    let free = ed.edit(&r).unwrap();
    assert_eq!(bits(&blended.x_edit), bits(&free.x_edit));
    assert!(blended.diagnostics.iter().all(|d| d.blend_delta == 0.0));
}

#[test]
fn mismatched_trajectory_is_a_consistency_error() {
    let f = fixture();
    let ed = Editor::new(&f.model, &f.schedule, &f.vocab);
    let r = request(5, 3, 3.5, ConstraintMode::Hard);
    let mask = r.mask.clone().unwrap();
    let traj = ed.inside_outside_inversion(&r.x_src, &r.p_src, &mask, r.mode, 3).unwrap();
    let mut other = r.clone();
    other.steps = 4;
    assert!(matches!(ed.generate_edit(&other, &traj), Err(Error::Consistency(_))));
    let mut other = r.clone();
    other.mode = ConstraintMode::Soft;
    assert!(matches!(ed.generate_edit(&other, &traj), Err(Error::Consistency(_))));
    let mut other = r.clone();
    other.x_src = request(6, 3, 3.5, ConstraintMode::Hard).x_src;
    assert!(matches!(ed.generate_edit(&other, &traj), Err(Error::Consistency(_))));
    assert!(ed.generate_edit(&r, &traj).is_ok());
}

#[test]
fn inferred_shape_matches_ground_truth() {
    let spec = SceneSpec {
        class: ShapeClass::Circle,
        color: "red".into(),
        background: "sand".into(),
        background_kind: sgdm_core::bench::scene::BackgroundKind::Gradient,
        center: None,
        radius: None,
        rotation: None,
        seed: 12,
        size: 16,
        antialias: false,
    };
    let scene = generate_scene(&spec).unwrap();
    assert_eq!(infer_shape(&scene.image, &scene.p_src).unwrap(), scene.mask);
    let absent = PromptPair::new("blue square", "sand gradient");
    assert!(matches!(infer_shape(&scene.image, &absent), Err(Error::EmptyMask(_))));
    let unknown = PromptPair::new("red blob", "sand gradient");
    assert!(matches!(infer_shape(&scene.image, &unknown), Err(Error::EmptyMask(_))));
}

#[test]
fn simultaneous_edit_keeps_token_regions_apart() {
    let f = fixture();
    let ed = Editor::new(&f.model, &f.schedule, &f.vocab);
    let mut r = request(7, 3, 3.5, ConstraintMode::Hard);
    r.p_edit = PromptPair::new(&r.p_src.inside_text(), "white checker");
    let res = ed.simultaneous_edit(&r).unwrap();
    for d in &res.diagnostics {
        assert!(d.inside_token_mass_outside.iter().all(|&m| m == 0.0));
        assert!(d.outside_token_mass_inside.iter().all(|&m| m == 0.0));
        assert_eq!(d.blend_delta, 0.0);
    }
    let mut bad = r.clone();
    bad.p_edit.outside.clear();
    assert!(ed.simultaneous_edit(&bad).is_err());
}

#[test]
fn full_mask_hook_only_zeroes_outside_and_bos_columns() {
    let f = fixture();
    let p = PromptPair::new("red circle", "");
    let tokens = tokenize(&p, &f.vocab, 2).unwrap();
    let mask = ObjectMask::filled(8, 8, true);
    let pyramid = build_pyramid(&mask, &f.model.sites()).unwrap();
    let constrained = make_transform(&pyramid, &tokens, ConstraintMode::Hard, None);
    let zero_cols: Vec<usize> = std::iter::once(tokens.bos_index()).chain(tokens.outside_columns()).collect();
    let manual = |site: &AttentionSite, maps: &Tensor<f32>| -> sgdm_core::Result<Tensor<f32>> {
        if site.kind == AttentionKind::SelfAttn {
            return Ok(maps.clone());
        }
        let cols = maps.shape()[2];
        let d = maps
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if zero_cols.contains(&(i % cols)) { 0.0 } else { v })
            .collect();
        Tensor::new(maps.shape(), d)
    };
    let z = request(8, 1, 0.0, ConstraintMode::Hard).x_src;
    let a = f.model.forward_eps(&z, 300, &tokens, Some(&constrained)).unwrap();
    let b = f.model.forward_eps(&z, 300, &tokens, Some(&manual)).unwrap();
    let plain = f.model.forward_eps(&z, 300, &tokens, None).unwrap();
    assert_eq!(bits(&a), bits(&b));
    assert_ne!(bits(&a), bits(&plain));
}
