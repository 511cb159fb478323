//! Inside-outside attention constraints.
//!
//! Given a binary object mask, every attention map is restricted so that
//! object tokens and object pixels only influence pixels inside the mask,
//! and background tokens and pixels only influence pixels outside it:
//!
//! * cross-attention: column `j` of an inside token is multiplied row-wise by
//!   the mask, column `j` of an outside token by its complement, and the
//!   `<bos>` column is zeroed;
//! * self-attention: column `q` of an inside pixel is multiplied by the mask,
//!   column `q` of an outside pixel by its complement.
//!
//! Rows are not renormalised unless [`TransformOptions::renormalize`] is set.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttentionHook, AttentionKind, AttentionSite};
use crate::tensor::{Scalar, Tensor};
use crate::tokens::TokenizedPrompt;

/// Binary object mask, row-major, `true` = inside the object.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObjectMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl ObjectMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::Geometry(format!(
                "mask of {height}x{width} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self { height, width, data }
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self::from_fn(height, width, |_, _| value)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn area_fraction(&self) -> f64 {
        self.area() as f64 / self.data.len() as f64
    }

    /// Editing needs at least one pixel on each side.
    pub fn validate_for_editing(&self) -> Result<()> {
        match self.area() {
            0 => Err(Error::EmptyMask("mask has no inside pixels".into())),
            a if a == self.data.len() => Err(Error::Geometry("mask has no outside pixels".into())),
            _ => Ok(()),
        }
    }

    pub fn and(&self, other: &Self) -> Result<Self> {
        self.check_same(other)?;
        Ok(Self {
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect(),
            ..self.clone()
        })
    }

    pub fn or(&self, other: &Self) -> Result<Self> {
        self.check_same(other)?;
        Ok(Self {
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a || *b).collect(),
            ..self.clone()
        })
    }

    pub fn iou(&self, other: &Self) -> Result<Option<f64>> {
        let inter = self.and(other)?.area();
        let union = self.or(other)?.area();
        Ok((union > 0).then(|| inter as f64 / union as f64))
    }

    fn check_same(&self, other: &Self) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::Geometry(format!(
                "mask sizes differ: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintMode {
    None,
    /// Cross-attention only (hard mask); self-attention untouched.
    TokenOnly,
    /// Hard mask on cross-attention, pooled soft mask on self-attention.
    Soft,
    /// Hard mask on both.
    #[default]
    Hard,
}

impl ConstraintMode {
    pub const ALL: [ConstraintMode; 4] = [Self::None, Self::TokenOnly, Self::Soft, Self::Hard];

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::TokenOnly => "token_only",
            Self::Soft => "soft",
            Self::Hard => "hard",
        }
    }
}

impl std::str::FromStr for ConstraintMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown constraint mode {s:?}")))
    }
}

impl std::fmt::Display for ConstraintMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// The mask downsampled to one attention resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidLevel {
    pub resolution: (usize, usize),
    /// Area-averaged coverage in `[0, 1]`.
    pub soft: Vec<f64>,
    /// `soft >= 0.5`.
    pub hard: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskPyramid {
    entries: Vec<(AttentionSite, PyramidLevel)>,
}

impl MaskPyramid {
    pub fn level(&self, site: &AttentionSite) -> Result<&PyramidLevel> {
        self.entries
            .iter()
            .find(|(s, _)| s == site)
            .map(|(_, l)| l)
            .ok_or_else(|| Error::Geometry(format!("no mask level for site {site:?}")))
    }

    pub fn sites(&self) -> impl Iterator<Item = &AttentionSite> {
        self.entries.iter().map(|(s, _)| s)
    }
}

pub fn downsample(mask: &ObjectMask, resolution: (usize, usize)) -> Result<PyramidLevel> {
    let (h, w) = resolution;
    if h == 0 || w == 0 || mask.height % h != 0 || mask.width % w != 0 {
        return Err(Error::Geometry(format!(
            "{}x{} mask cannot be pooled to {h}x{w}",
            mask.height, mask.width
        )));
    }
    let (fh, fw) = (mask.height / h, mask.width / w);
    let mut soft = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let mut inside = 0usize;
            for rr in r * fh..(r + 1) * fh {
                for cc in c * fw..(c + 1) * fw {
                    inside += mask.get(rr, cc) as usize;
                }
            }
            soft.push(inside as f64 / (fh * fw) as f64);
        }
    }
    let hard = soft.iter().map(|&s| s >= 0.5).collect();
    Ok(PyramidLevel {
        resolution,
        soft,
        hard,
    })
}

pub fn build_pyramid(mask: &ObjectMask, sites: &[AttentionSite]) -> Result<MaskPyramid> {
    let mut entries = Vec::with_capacity(sites.len());
    for site in sites {
        entries.push((*site, downsample(mask, site.resolution)?));
    }
    Ok(MaskPyramid { entries })
}

/// Column roles of a cross-attention map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenPartition {
    pub inside: Vec<usize>,
    pub outside: Vec<usize>,
    pub bos: usize,
}

impl TokenPartition {
    pub fn from_prompt(p: &TokenizedPrompt) -> Self {
        Self {
            inside: p.inside_columns().collect(),
            outside: p.outside_columns().collect(),
            bos: p.bos_index(),
        }
    }

    fn validate(&self, n_cols: usize) -> Result<()> {
        let mut seen = BTreeSet::new();
        for &j in self.inside.iter().chain(&self.outside).chain([&self.bos]) {
            if j >= n_cols {
                return Err(Error::Partition(format!(
                    "column {j} out of range for {n_cols} tokens"
                )));
            }
            if !seen.insert(j) {
                return Err(Error::Partition(format!("column {j} assigned twice")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Role {
    Inside,
    Outside,
    Bos,
    Free,
}

fn check_maps<S: Scalar>(maps: &Tensor<S>, n_pixels: usize, op: &'static str) -> Result<(usize, usize)> {
    let s = maps.shape();
    if s.len() != 3 || s[1] != n_pixels {
        return Err(Error::dim(
            op,
            format!("maps {s:?} do not match {n_pixels} pixels"),
        ));
    }
    Ok((s[0], s[2]))
}

/// Multiplies by a mask factor, keeping the exact value for factor 1 and an
/// exact zero for factor 0.
fn masked<S: Scalar>(v: S, factor: f64) -> S {
    if factor == 1.0 {
        v
    } else if factor == 0.0 {
        S::zero()
    } else {
        v * S::of(factor)
    }
}

pub fn constrain_cross<S: Scalar>(
    maps: &Tensor<S>,
    level: &PyramidLevel,
    partition: &TokenPartition,
    mode: ConstraintMode,
) -> Result<Tensor<S>> {
    let (_, cols) = check_maps(maps, level.hard.len(), "constrain_cross")?;
    partition.validate(cols)?;
    if mode == ConstraintMode::None {
        return Ok(maps.clone());
    }
    let mut roles = vec![Role::Free; cols];
    for &j in &partition.inside {
        roles[j] = Role::Inside;
    }
    for &j in &partition.outside {
        roles[j] = Role::Outside;
    }
    roles[partition.bos] = Role::Bos;

    let n = level.hard.len();
    let mut out = maps.to_vec();
    for (r, row) in out.chunks_mut(cols).enumerate() {
        let inside = if level.hard[r % n] { 1.0 } else { 0.0 };
        for (v, role) in row.iter_mut().zip(&roles) {
            *v = match role {
                Role::Inside => masked(*v, inside),
                Role::Outside => masked(*v, 1.0 - inside),
                Role::Bos => S::zero(),
                Role::Free => *v,
            };
        }
    }
    Tensor::new(maps.shape(), out)
}

pub fn constrain_self<S: Scalar>(
    maps: &Tensor<S>,
    level: &PyramidLevel,
    mode: ConstraintMode,
) -> Result<Tensor<S>> {
    let (_, cols) = check_maps(maps, level.hard.len(), "constrain_self")?;
    if cols != level.hard.len() {
        return Err(Error::dim(
            "constrain_self",
            format!("self-attention map {:?} is not square", maps.shape()),
        ));
    }
    let row_mask: Vec<f64> = match mode {
        ConstraintMode::None | ConstraintMode::TokenOnly => return Ok(maps.clone()),
        ConstraintMode::Soft => level.soft.clone(),
        ConstraintMode::Hard => level.hard.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    };
    let n = cols;
    let mut out = maps.to_vec();
    for (r, row) in out.chunks_mut(cols).enumerate() {
        let m = row_mask[r % n];
        for (v, &col_inside) in row.iter_mut().zip(&level.hard) {
            *v = masked(*v, if col_inside { m } else { 1.0 - m });
        }
    }
    Tensor::new(maps.shape(), out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReweightConfig {
    pub scale: f64,
    pub target: Vec<usize>,
}

impl ReweightConfig {
    pub fn new(scale: f64, target: Vec<usize>) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Parameter(format!("reweight scale must be > 0, got {scale}")));
        }
        Ok(Self { scale, target })
    }

    /// Upweights the token columns that differ between two prompts.
    pub fn between(scale: f64, src: &TokenizedPrompt, edit: &TokenizedPrompt) -> Result<Self> {
        Self::new(scale, edit.changed_columns(src))
    }
}

pub fn reweight_cross<S: Scalar>(maps: &Tensor<S>, cfg: &ReweightConfig) -> Result<Tensor<S>> {
    if maps.rank() != 3 {
        return Err(Error::dim("reweight_cross", format!("maps {:?}", maps.shape())));
    }
    let cols = maps.shape()[2];
    if let Some(&bad) = cfg.target.iter().find(|&&j| j >= cols) {
        return Err(Error::Partition(format!(
            "reweight column {bad} out of range for {cols} tokens"
        )));
    }
    if cfg.scale == 1.0 || cfg.target.is_empty() {
        return Ok(maps.clone());
    }
    let scale = S::of(cfg.scale);
    let mut out = maps.to_vec();
    for row in out.chunks_mut(cols) {
        for &j in &cfg.target {
            row[j] *= scale;
        }
    }
    Tensor::new(maps.shape(), out)
}

fn renormalize_rows<S: Scalar>(maps: &Tensor<S>) -> Result<Tensor<S>> {
    let cols = *maps.shape().last().unwrap();
    let mut out = maps.to_vec();
    for row in out.chunks_mut(cols) {
        let total: S = row.iter().copied().sum();
        if total > S::zero() {
            for v in row.iter_mut() {
                *v /= total;
            }
        }
    }
    Tensor::new(maps.shape(), out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformOptions {
    /// Rescale each constrained row to sum to one. For hard masks this is
    /// the same as masking logits with `-inf` before the softmax.
    pub renormalize: bool,
}

/// Attention hook applying the constraint for one prompt and mask.
#[derive(Clone, Debug)]
pub struct InsideOutsideTransform {
    pyramid: MaskPyramid,
    partition: TokenPartition,
    mode: ConstraintMode,
    reweight: Option<ReweightConfig>,
    options: TransformOptions,
}

pub fn make_transform(
    pyramid: &MaskPyramid,
    prompt: &TokenizedPrompt,
    mode: ConstraintMode,
    reweight: Option<ReweightConfig>,
) -> InsideOutsideTransform {
    InsideOutsideTransform {
        pyramid: pyramid.clone(),
        partition: TokenPartition::from_prompt(prompt),
        mode,
        reweight,
        options: TransformOptions::default(),
    }
}

impl InsideOutsideTransform {
    pub fn with_options(mut self, options: TransformOptions) -> Self {
        self.options = options;
        self
    }

    pub fn mode(&self) -> ConstraintMode {
        self.mode
    }

    pub fn pyramid(&self) -> &MaskPyramid {
        &self.pyramid
    }

    pub fn partition(&self) -> &TokenPartition {
        &self.partition
    }

    pub fn apply<S: Scalar>(&self, site: &AttentionSite, maps: &Tensor<S>) -> Result<Tensor<S>> {
        let level = self.pyramid.level(site)?;
        let out = match site.kind {
            AttentionKind::Cross => {
                let maps = match &self.reweight {
                    Some(rw) => reweight_cross(maps, rw)?,
                    None => maps.clone(),
                };
                constrain_cross(&maps, level, &self.partition, self.mode)?
            }
            AttentionKind::SelfAttn => constrain_self(maps, level, self.mode)?,
        };
        if self.options.renormalize && self.mode != ConstraintMode::None {
            renormalize_rows(&out)
        } else {
            Ok(out)
        }
    }
}

impl<S: Scalar> AttentionHook<S> for InsideOutsideTransform {
    fn transform(&self, site: &AttentionSite, maps: &Tensor<S>) -> Result<Tensor<S>> {
        self.apply(site, maps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    fn site(kind: AttentionKind, res: (usize, usize)) -> AttentionSite {
        AttentionSite {
            layer: 0,
            kind,
            resolution: res,
        }
    }

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn pyramid_constant_and_pooled_cases() {
        let ones = ObjectMask::filled(4, 4, true);
        let lvl = downsample(&ones, (2, 2)).unwrap();
        assert!(lvl.hard.iter().all(|&b| b));
        assert!(lvl.soft.iter().all(|&s| s == 1.0));

        let m = ObjectMask::new(2, 2, vec![true, false, false, false]).unwrap();
        let lvl = downsample(&m, (1, 1)).unwrap();
        assert_eq!(lvl.soft, vec![0.25]);
        assert_eq!(lvl.hard, vec![false]);

        let tie = ObjectMask::new(2, 2, vec![true, true, false, false]).unwrap();
        assert_eq!(downsample(&tie, (1, 1)).unwrap().hard, vec![true]);

        assert!(matches!(
            downsample(&ones, (3, 3)),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn pyramid_matches_block_average_oracle() {
        let mut rng = SeededRng::new(9);
        let m = ObjectMask::from_fn(16, 16, |_, _| rng.uniform() < 0.4);
        let lvl = downsample(&m, (8, 8)).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                let block = [
                    m.get(2 * r, 2 * c),
                    m.get(2 * r, 2 * c + 1),
                    m.get(2 * r + 1, 2 * c),
                    m.get(2 * r + 1, 2 * c + 1),
                ];
                let avg = block.iter().filter(|&&b| b).count() as f64 / 4.0;
                assert_eq!(lvl.soft[r * 8 + c], avg);
                assert_eq!(lvl.hard[r * 8 + c], avg >= 0.5);
            }
        }
    }

    #[test]
    fn cross_hand_example() {
        let m = ObjectMask::new(1, 2, vec![true, false]).unwrap();
        let lvl = downsample(&m, (1, 2)).unwrap();
        let part = TokenPartition {
            inside: vec![1],
            outside: vec![2],
            bos: 0,
        };
        let maps = t(&[1, 2, 3], &[0.2, 0.3, 0.5, 0.1, 0.6, 0.3]);
        let out = constrain_cross(&maps, &lvl, &part, ConstraintMode::Hard).unwrap();
        assert_eq!(out.data(), &[0.0, 0.3, 0.0, 0.0, 0.0, 0.3]);
        // token-only and soft agree with hard on cross maps
        for mode in [ConstraintMode::TokenOnly, ConstraintMode::Soft] {
            assert_eq!(constrain_cross(&maps, &lvl, &part, mode).unwrap(), out);
        }
        assert_eq!(
            constrain_cross(&maps, &lvl, &part, ConstraintMode::None).unwrap(),
            maps
        );
    }

    #[test]
    fn cross_all_ones_mask() {
        let lvl = downsample(&ObjectMask::filled(2, 2, true), (2, 2)).unwrap();
        let part = TokenPartition {
            inside: vec![1, 2],
            outside: vec![3, 4],
            bos: 0,
        };
        let mut rng = SeededRng::new(1);
        let maps = rng.normal_tensor::<f64>(&[2, 4, 5], 1.0).map(f64::abs);
        let out = constrain_cross(&maps, &lvl, &part, ConstraintMode::Hard).unwrap();
        for (i, (&o, &m)) in out.data().iter().zip(maps.data()).enumerate() {
            match i % 5 {
                0 | 3 | 4 => assert_eq!(o, 0.0),
                _ => assert_eq!(o, m),
            }
        }
    }

    #[test]
    fn partition_errors() {
        let lvl = downsample(&ObjectMask::filled(1, 2, true), (1, 2)).unwrap();
        let maps = Tensor::<f64>::ones(&[1, 2, 3]);
        let overlap = TokenPartition {
            inside: vec![1],
            outside: vec![1],
            bos: 0,
        };
        assert!(matches!(
            constrain_cross(&maps, &lvl, &overlap, ConstraintMode::Hard),
            Err(Error::Partition(_))
        ));
        let range = TokenPartition {
            inside: vec![1],
            outside: vec![3],
            bos: 0,
        };
        assert!(matches!(
            constrain_cross(&maps, &lvl, &range, ConstraintMode::Hard),
            Err(Error::Partition(_))
        ));
        let rw = ReweightConfig::new(2.0, vec![5]).unwrap();
        assert!(matches!(reweight_cross(&maps, &rw), Err(Error::Partition(_))));
        assert!(ReweightConfig::new(0.0, vec![]).is_err());
    }

    #[test]
    fn self_all_ones_is_identity() {
        let lvl = downsample(&ObjectMask::filled(2, 2, true), (2, 2)).unwrap();
        let mut rng = SeededRng::new(2);
        let maps = rng.normal_tensor::<f64>(&[2, 4, 4], 1.0).map(f64::abs);
        for mode in ConstraintMode::ALL {
            assert_eq!(constrain_self(&maps, &lvl, mode).unwrap(), maps);
        }
        let rect = Tensor::<f64>::ones(&[1, 4, 3]);
        assert!(matches!(
            constrain_self(&rect, &lvl, ConstraintMode::Hard),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn self_checkerboard_matches_elementwise_oracle() {
        let m = ObjectMask::from_fn(2, 2, |r, c| (r + c) % 2 == 0);
        let lvl = downsample(&m, (2, 2)).unwrap();
        let mut rng = SeededRng::new(3);
        let maps = rng.normal_tensor::<f64>(&[2, 4, 4], 1.0).map(f64::abs);
        let out = constrain_self(&maps, &lvl, ConstraintMode::Hard).unwrap();
        let inside = [true, false, false, true];
        for h in 0..2 {
            for p in 0..4 {
                for q in 0..4 {
                    let i = h * 16 + p * 4 + q;
                    let expect = if inside[p] == inside[q] { maps.data()[i] } else { 0.0 };
                    assert_eq!(out.data()[i], expect);
                }
            }
        }
    }

    #[test]
    fn soft_self_uses_pooled_rows() {
        let m = ObjectMask::new(2, 4, vec![true, true, true, false, true, true, false, false]).unwrap();
        let lvl = downsample(&m, (1, 2)).unwrap();
        assert_eq!(lvl.soft, vec![1.0, 0.25]);
        let maps = Tensor::<f64>::full(&[1, 2, 2], 0.5);
        let out = constrain_self(&maps, &lvl, ConstraintMode::Soft).unwrap();
        // columns: pixel 0 inside, pixel 1 outside
        assert_eq!(out.data(), &[0.5, 0.0, 0.125, 0.375]);
    }

    #[test]
    fn reweight_scales_exactly() {
        let maps = t(&[1, 2, 3], &[0.2, 0.3, 0.5, 0.1, 0.6, 0.3]);
        let unit = ReweightConfig::new(1.0, vec![1]).unwrap();
        assert_eq!(reweight_cross(&maps, &unit).unwrap(), maps);
        let rw = ReweightConfig::new(2.5, vec![1]).unwrap();
        let out = reweight_cross(&maps, &rw).unwrap();
        assert_eq!(out.data()[1], 0.3 * 2.5);
        assert_eq!(out.data()[4], 0.6 * 2.5);
        assert_eq!(out.data()[0], 0.2);
    }

    #[test]
    fn transform_composes_reweight_then_constrain() {
        let mask = ObjectMask::from_fn(2, 2, |r, _| r == 0);
        let s = site(AttentionKind::Cross, (2, 2));
        let pyr = build_pyramid(&mask, &[s]).unwrap();
        let prompt = crate::tokens::null_prompt(2);
        let rw = ReweightConfig::new(2.5, vec![2, 3]).unwrap();
        let hook = make_transform(&pyr, &prompt, ConstraintMode::Hard, Some(rw));
        let mut rng = SeededRng::new(4);
        let maps = rng.normal_tensor::<f64>(&[2, 4, 5], 1.0).map(f64::abs);
        let out = hook.apply(&s, &maps).unwrap();
        // scripted reference
        for h in 0..2 {
            for p in 0..4 {
                let inside = p < 2;
                for j in 0..5 {
                    let v = maps.data()[h * 20 + p * 5 + j];
                    let v = if j == 2 || j == 3 { v * 2.5 } else { v };
                    let expect = match j {
                        0 => 0.0,
                        1 | 2 => if inside { v } else { 0.0 },
                        _ => if inside { 0.0 } else { v },
                    };
                    assert_eq!(out.data()[h * 20 + p * 5 + j], expect);
                }
            }
        }
        let other = site(AttentionKind::Cross, (1, 1));
        assert!(matches!(hook.apply(&other, &maps), Err(Error::Geometry(_))));
    }

    #[test]
    fn renormalized_hard_equals_logit_masking() {
        let mask = ObjectMask::from_fn(2, 2, |r, c| r == c);
        let s = site(AttentionKind::SelfAttn, (2, 2));
        let pyr = build_pyramid(&mask, &[s]).unwrap();
        let hook = make_transform(&pyr, &crate::tokens::null_prompt(1), ConstraintMode::Hard, None)
            .with_options(TransformOptions { renormalize: true });
        let mut rng = SeededRng::new(5);
        let logits = rng.normal_tensor::<f64>(&[1, 4, 4], 1.0);
        let out = hook.apply(&s, &logits.softmax_lastdim().unwrap()).unwrap();
        let inside = [true, false, false, true];
        let masked_logits = Tensor::new(
            &[1, 4, 4],
            logits
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| if inside[i / 4] == inside[i % 4] { v } else { f64::NEG_INFINITY })
                .collect(),
        )
        .unwrap();
        let expect = masked_logits.softmax_lastdim().unwrap();
        for (a, b) in out.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn random_case() -> impl Strategy<Value = (Vec<bool>, Vec<f64>, usize)> {
        (1usize..4).prop_flat_map(|heads| {
            (
                prop::collection::vec(any::<bool>(), 16),
                prop::collection::vec(0.0f64..1.0, heads * 16 * 16),
                Just(heads),
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn residue_is_monotone_and_hard_is_idempotent((bits, vals, heads) in random_case()) {
            let mask = ObjectMask::new(4, 4, bits).unwrap();
            let lvl = downsample(&mask, (4, 4)).unwrap();
            let maps = Tensor::<f64>::new(&[heads, 16, 16], vals).unwrap();
            for mode in ConstraintMode::ALL {
                let out = constrain_self(&maps, &lvl, mode).unwrap();
                for (o, m) in out.data().iter().zip(maps.data()) {
                    prop_assert!(*o >= 0.0 && o <= m);
                }
            }
            let once = constrain_self(&maps, &lvl, ConstraintMode::Hard).unwrap();
            let twice = constrain_self(&once, &lvl, ConstraintMode::Hard).unwrap();
            prop_assert_eq!(&once, &twice);
            for h in 0..heads {
                for p in 0..16 {
                    for q in 0..16 {
                        if lvl.hard[p] != lvl.hard[q] {
                            prop_assert_eq!(once.data()[h * 256 + p * 16 + q], 0.0);
                        }
                    }
                }
            }
        }
    }
}
