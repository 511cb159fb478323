//! Mask-constrained editing: inversion with the attention constraint,
//! guided regeneration, and per-step background copying.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::bench::oracle::oracle_segment;
use crate::bench::scene::{ShapeClass, MAX_AREA_FRACTION, MIN_AREA_FRACTION};
use crate::diffusion::{
    cfg_combine_with, ddim_invert_step, ddim_step, GuidanceConfig, GuidanceSpace, NoiseSchedule, TimestepGrid,
};
use crate::error::{Error, Result};
use crate::inside_outside::{
    build_pyramid, make_transform, ConstraintMode, InsideOutsideTransform, MaskPyramid, ObjectMask, ReweightConfig,
    TransformOptions,
};
use crate::model::{AttentionHook, AttentionKind, AttentionSite, Denoiser};
use crate::tensor::Tensor;
use crate::tokens::{null_prompt, tokenize, PromptPair, TokenizedPrompt, Vocabulary};

/// Maps images to the space the denoiser works in and back.
pub trait Codec: Sync {
    fn encode(&self, x: &Tensor<f32>) -> Result<Tensor<f32>>;
    fn decode(&self, z: &Tensor<f32>) -> Result<Tensor<f32>>;
}

/// Pixel-space diffusion: both maps are the identity.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityCodec;

impl Codec for IdentityCodec {
    fn encode(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(x.clone())
    }

    fn decode(&self, z: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(z.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditOptions {
    /// Copy the inversion latents outside the mask after every step.
    pub blend: bool,
    /// With `w_g = 0`, skip the unconditional pass entirely.
    pub skip_unguided_uncond: bool,
    pub renormalize: bool,
    pub diagnostics: bool,
}

impl Default for EditOptions {
    fn default() -> Self {
        Self {
            blend: true,
            skip_unguided_uncond: false,
            renormalize: false,
            diagnostics: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EditRequest {
    pub x_src: Tensor<f32>,
    pub p_src: PromptPair,
    pub p_edit: PromptPair,
    /// Inferred from `x_src` and `p_src` when absent.
    pub mask: Option<ObjectMask>,
    pub guidance: GuidanceConfig,
    pub steps: usize,
    pub mode: ConstraintMode,
    pub seed: u64,
    pub options: EditOptions,
}

impl EditRequest {
    /// Reconstruction request: edit prompt equal to the source, no guidance.
    pub fn reconstruction(x_src: Tensor<f32>, p_src: PromptPair, mask: Option<ObjectMask>, steps: usize) -> Self {
        Self {
            x_src,
            p_edit: p_src.clone(),
            p_src,
            mask,
            guidance: GuidanceConfig {
                w_g: 0.0,
                ..Default::default()
            },
            steps,
            mode: ConstraintMode::Hard,
            seed: 0,
            options: EditOptions::default(),
        }
    }
}

/// Latents `z_0 ..= z_S` visited by inversion, indexed by grid position.
#[derive(Clone, Debug, PartialEq)]
pub struct InversionTrajectory {
    pub latents: Vec<Tensor<f32>>,
    pub timesteps: Vec<usize>,
    pub p_src: PromptPair,
    pub mask: ObjectMask,
    pub mode: ConstraintMode,
}

impl InversionTrajectory {
    pub fn steps(&self) -> usize {
        self.latents.len() - 1
    }

    pub fn last(&self) -> &Tensor<f32> {
        self.latents.last().expect("trajectory is never empty")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub t: usize,
    /// Worst-case (over cross-attention sites) share of each inside
    /// token's attention that lands on outside pixels.
    pub inside_token_mass_outside: Vec<f64>,
    /// Same for outside tokens landing on inside pixels.
    pub outside_token_mass_inside: Vec<f64>,
    /// L2 norm of the change the background copy made to the latent.
    pub blend_delta: f64,
}

#[derive(Clone, Debug)]
pub struct EditResult {
    pub x_edit: Tensor<f32>,
    pub mask: ObjectMask,
    pub trajectory: InversionTrajectory,
    pub diagnostics: Vec<StepDiagnostics>,
    /// Attention-hook invocations during generation.
    pub hook_calls: usize,
    pub warnings: Vec<String>,
}

impl EditResult {
    pub fn diagnostics_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for d in &self.diagnostics {
            out.push_str(&serde_json::to_string(d)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Oracle segmentation of the class named in the inside text of `p_src`.
pub fn infer_shape(x_src: &Tensor<f32>, p_src: &PromptPair) -> Result<ObjectMask> {
    let class = p_src
        .inside
        .iter()
        .find_map(|w| ShapeClass::from_name(w))
        .ok_or_else(|| Error::EmptyMask(format!("no known class in {:?}", p_src.inside_text())))?;
    let mask = oracle_segment(x_src, class)?;
    if mask.area() == 0 {
        return Err(Error::EmptyMask(format!("no {} found in the image", class.name())));
    }
    Ok(mask)
}

/// Warning text when the object is outside the benchmark's size range.
pub fn area_warning(mask: &ObjectMask) -> Option<String> {
    let f = mask.area_fraction();
    (!(MIN_AREA_FRACTION..=MAX_AREA_FRACTION).contains(&f))
        .then(|| format!("object covers {:.1}% of the image", 100.0 * f))
}

/// Per-pixel select: `m ? z : z_bar`, with `m` shared across channels.
pub fn blend_background(z: &Tensor<f32>, z_bar: &Tensor<f32>, mask: &ObjectMask) -> Result<Tensor<f32>> {
    if z.shape() != z_bar.shape() {
        return Err(Error::dim(
            "blend_background",
            format!("{:?} vs {:?}", z.shape(), z_bar.shape()),
        ));
    }
    let hw = mask.height() * mask.width();
    if z.rank() != 3 || z.shape()[1] * z.shape()[2] != hw || z.shape()[1] != mask.height() {
        return Err(Error::dim(
            "blend_background",
            format!("latent {:?} vs {}x{} mask", z.shape(), mask.height(), mask.width()),
        ));
    }
    let m = mask.data();
    let data = z
        .data()
        .iter()
        .zip(z_bar.data())
        .enumerate()
        .map(|(i, (&a, &b))| if m[i % hw] { a } else { b })
        .collect();
    Tensor::new(z.shape(), data)
}

/// Attention transform that also counts calls and records how much
/// attention crosses the mask boundary.
struct Instrumented<'a> {
    inner: &'a InsideOutsideTransform,
    calls: &'a AtomicUsize,
    record: Option<&'a Mutex<(Vec<f64>, Vec<f64>)>>,
}

impl AttentionHook<f32> for Instrumented<'_> {
    fn transform(&self, site: &AttentionSite, maps: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let out = self.inner.apply(site, maps)?;
        if let (Some(record), AttentionKind::Cross) = (self.record, site.kind) {
            let level = self.inner.pyramid().level(site)?;
            let part = self.inner.partition();
            let &[heads, pixels, cols] = out.shape() else {
                unreachable!("shape checked by the transform")
            };
            let d = out.data();
            let mass = |col: usize, on_inside: bool| {
                let (mut cross, mut total) = (0.0f64, 0.0f64);
                for h in 0..heads {
                    for p in 0..pixels {
                        let v = d[(h * pixels + p) * cols + col] as f64;
                        total += v;
                        if level.hard[p] == on_inside {
                            cross += v;
                        }
                    }
                }
                if total > 0.0 {
                    cross / total
                } else {
                    0.0
                }
            };
            let mut rec = record.lock().expect("diagnostics lock");
            let (inside, outside) = &mut *rec;
            inside.resize(part.inside.len(), 0.0);
            outside.resize(part.outside.len(), 0.0);
            for (k, &col) in part.inside.iter().enumerate() {
                inside[k] = inside[k].max(mass(col, false));
            }
            for (k, &col) in part.outside.iter().enumerate() {
                outside[k] = outside[k].max(mass(col, true));
            }
        }
        Ok(out)
    }
}

/// Everything an edit needs besides the request itself.
pub struct Editor<'a> {
    pub model: &'a Denoiser<f32>,
    pub schedule: &'a NoiseSchedule,
    pub vocab: &'a Vocabulary,
    pub codec: &'a dyn Codec,
}

impl<'a> Editor<'a> {
    pub fn new(model: &'a Denoiser<f32>, schedule: &'a NoiseSchedule, vocab: &'a Vocabulary) -> Self {
        Self {
            model,
            schedule,
            vocab,
            codec: &IdentityCodec,
        }
    }

    fn tokens(&self, p: &PromptPair) -> Result<TokenizedPrompt> {
        tokenize(p, self.vocab, self.model.config().token_budget)
    }

    fn pyramid(&self, mask: &ObjectMask) -> Result<MaskPyramid> {
        let s = self.model.config().image_size;
        if (mask.height(), mask.width()) != (s, s) {
            return Err(Error::Geometry(format!(
                "{}x{} mask for a {s}x{s} model",
                mask.height(),
                mask.width()
            )));
        }
        build_pyramid(mask, &self.model.sites())
    }

    /// Walks `x_src` up the noise schedule with the conditional model only.
    pub fn inside_outside_inversion(
        &self,
        x_src: &Tensor<f32>,
        p_src: &PromptPair,
        mask: &ObjectMask,
        mode: ConstraintMode,
        steps: usize,
    ) -> Result<InversionTrajectory> {
        self.invert_with(x_src, p_src, mask, mode, steps, TransformOptions::default())
    }

    fn invert_with(
        &self,
        x_src: &Tensor<f32>,
        p_src: &PromptPair,
        mask: &ObjectMask,
        mode: ConstraintMode,
        steps: usize,
        options: TransformOptions,
    ) -> Result<InversionTrajectory> {
        let grid = TimestepGrid::uniform(self.schedule.t_train(), steps)?;
        let tokens = self.tokens(p_src)?;
        let hook = make_transform(&self.pyramid(mask)?, &tokens, mode, None).with_options(options);
        let mut latents = vec![self.codec.encode(x_src)?];
        for i in 1..=steps {
            let (t_prev, t) = (grid.at(i - 1), grid.at(i));
            let z = &latents[i - 1];
            let eps = self.model.forward_eps(z, t, &tokens, Some(&hook))?;
            let next = ddim_invert_step(self.schedule, z, &eps, t_prev, t)?;
            if !next.is_finite() {
                return Err(Error::Numeric(format!("inversion step {i} (t={t}) produced a non-finite latent")));
            }
            latents.push(next);
        }
        Ok(InversionTrajectory {
            latents,
            timesteps: (0..=steps).map(|i| grid.at(i)).collect(),
            p_src: p_src.clone(),
            mask: mask.clone(),
            mode,
        })
    }

    fn resolve_mask(&self, req: &EditRequest) -> Result<(ObjectMask, Vec<String>)> {
        let mask = match &req.mask {
            Some(m) => m.clone(),
            None => infer_shape(&req.x_src, &req.p_src)?,
        };
        Ok((mask.clone(), area_warning(&mask).into_iter().collect()))
    }

    /// Full edit: mask inference if needed, inversion, then generation.
    pub fn edit(&self, req: &EditRequest) -> Result<EditResult> {
        let (mask, warnings) = self.resolve_mask(req)?;
        let options = TransformOptions {
            renormalize: req.options.renormalize,
        };
        let traj = self.invert_with(&req.x_src, &req.p_src, &mask, req.mode, req.steps, options)?;
        let mut res = self.generate_edit(req, &traj)?;
        res.warnings.splice(0..0, warnings);
        Ok(res)
    }

    /// Regenerates from the end of `trajectory` with the edit prompt.
    pub fn generate_edit(&self, req: &EditRequest, trajectory: &InversionTrajectory) -> Result<EditResult> {
        self.generate(req, trajectory, req.options.blend)
    }

    /// Edits inside and outside at once: no background copying.
    pub fn simultaneous_edit(&self, req: &EditRequest) -> Result<EditResult> {
        if req.p_edit.inside.is_empty() || req.p_edit.outside.is_empty() {
            return Err(Error::Parameter(
                "simultaneous edits need both inside and outside text".into(),
            ));
        }
        let mut req = req.clone();
        req.options.blend = false;
        self.edit(&req)
    }

    fn check_trajectory(&self, req: &EditRequest, traj: &InversionTrajectory) -> Result<ObjectMask> {
        let mismatch = |what: &str| Err(Error::Consistency(format!("trajectory does not match the request: {what}")));
        if traj.steps() != req.steps || traj.timesteps.len() != req.steps + 1 {
            return mismatch("step count");
        }
        if traj.p_src != req.p_src {
            return mismatch("source prompt");
        }
        if traj.mode != req.mode {
            return mismatch("constraint mode");
        }
        if let Some(m) = &req.mask {
            if *m != traj.mask {
                return mismatch("mask");
            }
        }
        let z0 = self.codec.encode(&req.x_src)?;
        if !bitwise_eq(&z0, &traj.latents[0]) {
            return mismatch("source latent");
        }
        Ok(traj.mask.clone())
    }

    fn generate(&self, req: &EditRequest, traj: &InversionTrajectory, blend: bool) -> Result<EditResult> {
        req.guidance.validate()?;
        let mask = self.check_trajectory(req, traj)?;
        let steps = req.steps;
        let grid = TimestepGrid::uniform(self.schedule.t_train(), steps)?;
        let src_tokens = self.tokens(&req.p_src)?;
        let edit_tokens = self.tokens(&req.p_edit)?;
        let null = null_prompt(self.model.config().token_budget);
        let pyramid = self.pyramid(&mask)?;
        let options = TransformOptions {
            renormalize: req.options.renormalize,
        };
        let reweight = if req.guidance.reweight_scale != 1.0 {
            Some(ReweightConfig::between(req.guidance.reweight_scale, &src_tokens, &edit_tokens)?)
        } else {
            None
        };
        let cond_hook = make_transform(&pyramid, &edit_tokens, req.mode, reweight).with_options(options);
        let uncond_hook = make_transform(&pyramid, &edit_tokens, req.mode, None).with_options(options);
        let calls = AtomicUsize::new(0);
        let record = Mutex::new((Vec::new(), Vec::new()));
        let want_record = req.options.diagnostics;
        let cond = Instrumented {
            inner: &cond_hook,
            calls: &calls,
            record: want_record.then_some(&record),
        };
        let uncond = Instrumented {
            inner: &uncond_hook,
            calls: &calls,
            record: None,
        };
        let w = req.guidance.w_g;
        let skip_uncond = w == 0.0 && req.options.skip_unguided_uncond;

        let mut z = traj.last().clone();
        let mut diagnostics = Vec::new();
        for i in (1..=steps).rev() {
            let (t, t_prev) = (grid.at(i), grid.at(i - 1));
            let eps_c = self.model.forward_eps(&z, t, &edit_tokens, Some(&cond))?;
            let next = if skip_uncond {
                ddim_step(self.schedule, &z, &eps_c, t, t_prev)?
            } else {
                let eps_u = self.model.forward_eps(&z, t, &null, Some(&uncond))?;
                match req.guidance.space {
                    GuidanceSpace::Latent => {
                        let z_c = ddim_step(self.schedule, &z, &eps_c, t, t_prev)?;
                        let z_u = ddim_step(self.schedule, &z, &eps_u, t, t_prev)?;
                        cfg_combine_with(&z_c, &z_u, w, req.guidance.form)?
                    }
                    GuidanceSpace::Epsilon => {
                        let eps = cfg_combine_with(&eps_c, &eps_u, w, req.guidance.form)?;
                        ddim_step(self.schedule, &z, &eps, t, t_prev)?
                    }
                }
            };
            if !next.is_finite() {
                return Err(Error::Numeric(format!("generation step {i} (t={t}) produced a non-finite latent")));
            }
            let (next, blend_delta) = if blend {
                let blended = blend_background(&next, &traj.latents[i - 1], &mask)?;
                let delta = next.sub(&blended)?.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
                (blended, delta)
            } else {
                (next, 0.0)
            };
            z = next;
            if want_record {
                let (inside, outside) = std::mem::take(&mut *record.lock().expect("diagnostics lock"));
                diagnostics.push(StepDiagnostics {
                    step: steps - i,
                    t,
                    inside_token_mass_outside: inside,
                    outside_token_mass_inside: outside,
                    blend_delta,
                });
            }
        }
        let x_edit = self.codec.decode(&z)?;
        if blend {
            check_locality(&req.x_src, &x_edit, &mask)?;
        }
        Ok(EditResult {
            x_edit,
            mask,
            trajectory: traj.clone(),
            diagnostics,
            hook_calls: calls.into_inner(),
            warnings: Vec::new(),
        })
    }
}

fn bitwise_eq(a: &Tensor<f32>, b: &Tensor<f32>) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Fails unless `x_edit` equals `x_src` bitwise at every pixel outside `mask`.
pub fn check_locality(x_src: &Tensor<f32>, x_edit: &Tensor<f32>, mask: &ObjectMask) -> Result<()> {
    if x_src.shape() != x_edit.shape() {
        return Err(Error::dim("check_locality", "image shapes differ"));
    }
    let hw = mask.height() * mask.width();
    let bad = x_src
        .data()
        .iter()
        .zip(x_edit.data())
        .enumerate()
        .filter(|(i, (a, b))| !mask.data()[i % hw] && a.to_bits() != b.to_bits())
        .count();
    if bad > 0 {
        return Err(Error::Consistency(format!(
            "{bad} values outside the mask differ from the source"
        )));
    }
    Ok(())
}

/// PSNR in dB between two `[-1, 1]` images over the pixels where `mask`
/// is set (peak-to-peak range 2).
pub fn masked_psnr(a: &Tensor<f32>, b: &Tensor<f32>, mask: &ObjectMask) -> Result<f64> {
    let mse = masked_mse(a, b, mask)?;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (4.0 / mse).log10()
    })
}

pub fn masked_mse(a: &Tensor<f32>, b: &Tensor<f32>, mask: &ObjectMask) -> Result<f64> {
    if a.shape() != b.shape() || a.rank() != 3 {
        return Err(Error::dim("masked_mse", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let hw = mask.height() * mask.width();
    if a.shape()[1] * a.shape()[2] != hw {
        return Err(Error::dim("masked_mse", "mask size differs from the image"));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        if mask.data()[i % hw] {
            sum += ((x - y) as f64).powi(2);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask("masked error over an empty mask".into()));
    }
    Ok(sum / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn blend_examples() {
        let mut rng = SeededRng::new(3);
        let z = rng.normal_tensor::<f32>(&[3, 4, 4], 1.0);
        let zb = rng.normal_tensor::<f32>(&[3, 4, 4], 1.0);
        let none = ObjectMask::filled(4, 4, false);
        let all = ObjectMask::filled(4, 4, true);
        assert!(bitwise_eq(&blend_background(&z, &zb, &none).unwrap(), &zb));
        assert!(bitwise_eq(&blend_background(&z, &zb, &all).unwrap(), &z));
        let m = ObjectMask::from_fn(4, 4, |_, _| rng.uniform() < 0.5);
        let out = blend_background(&z, &zb, &m).unwrap();
        for c in 0..3 {
            for p in 0..16 {
                let i = c * 16 + p;
                let want = if m.data()[p] { z.data()[i] } else { zb.data()[i] };
                assert_eq!(out.data()[i].to_bits(), want.to_bits());
            }
        }
        assert!(blend_background(&z, &zb, &ObjectMask::filled(2, 8, true)).is_err());
        let other = rng.normal_tensor::<f32>(&[3, 4, 5], 1.0);
        assert!(blend_background(&z, &other, &all).is_err());
    }

    #[test]
    fn psnr_of_identical_images_is_infinite() {
        let x = Tensor::full(&[3, 2, 2], 0.25f32);
        let m = ObjectMask::filled(2, 2, true);
        assert_eq!(masked_psnr(&x, &x, &m).unwrap(), f64::INFINITY);
        let y = Tensor::full(&[3, 2, 2], 0.45f32);
        // mse 0.04 on a range of 2: 10 log10(4 / 0.04) = 20 dB
        assert!((masked_psnr(&x, &y, &m).unwrap() - 20.0).abs() < 1e-5);
    }

    #[test]
    fn locality_detects_a_single_flipped_value() {
        let x = Tensor::full(&[3, 2, 2], 0.5f32);
        let mut d = x.to_vec();
        d[4 + 3] = 0.6;
        let y = Tensor::new(&[3, 2, 2], d).unwrap();
        let inside_last = ObjectMask::from_fn(2, 2, |r, c| r == 1 && c == 1);
        assert!(check_locality(&x, &y, &inside_last).is_ok());
        let inside_first = ObjectMask::from_fn(2, 2, |r, c| r == 0 && c == 0);
        assert!(matches!(check_locality(&x, &y, &inside_first), Err(Error::Consistency(_))));
    }
}
