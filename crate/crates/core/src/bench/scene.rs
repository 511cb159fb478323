//! Procedural scenes: one filled shape on a patterned background, with an
//! exact ground-truth mask and keypoints.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inside_outside::ObjectMask;
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::tokens::{PromptPair, Vocabulary};

use super::oracle::{clean_mask, keypoints_from_mask};

pub type Rgb = [f64; 3];

const SUPERSAMPLE: usize = 4;
const MAX_REJECTIONS: usize = 100;
pub const MIN_AREA_FRACTION: f64 = 0.02;
pub const MAX_AREA_FRACTION: f64 = 0.50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeClass {
    Circle,
    Square,
    Triangle,
    Star,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 4] = [Self::Circle, Self::Square, Self::Triangle, Self::Star];

    pub fn name(self) -> &'static str {
        match self {
            Self::Circle => "circle",
            Self::Square => "square",
            Self::Triangle => "triangle",
            Self::Star => "star",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    /// Fill colours this class is drawn with.
    pub fn palette(self) -> &'static [(&'static str, Rgb)] {
        match self {
            Self::Circle => &[("red", [0.90, 0.10, 0.10]), ("orange", [1.00, 0.55, 0.00])],
            Self::Square => &[("blue", [0.10, 0.20, 0.95]), ("cyan", [0.00, 0.80, 0.85])],
            Self::Triangle => &[("green", [0.10, 0.70, 0.15]), ("purple", [0.55, 0.10, 0.75])],
            Self::Star => &[("yellow", [0.95, 0.90, 0.10]), ("magenta", [0.95, 0.10, 0.80])],
        }
    }

    pub fn color(self, name: &str) -> Option<Rgb> {
        self.palette().iter().find(|(n, _)| *n == name).map(|(_, c)| *c)
    }

    /// Point-in-shape test in pixel units for a shape of circumradius `r`.
    fn contains(self, x: f64, y: f64, cx: f64, cy: f64, r: f64, rot: f64) -> bool {
        let (dx, dy) = (x - cx, y - cy);
        let (s, c) = rot.sin_cos();
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        match self {
            Self::Circle => dx * dx + dy * dy <= r * r,
            Self::Square => {
                let half = r / std::f64::consts::SQRT_2;
                u.abs() <= half && v.abs() <= half
            }
            Self::Triangle => point_in_polygon(u, v, &regular_polygon(3, r, r)),
            Self::Star => point_in_polygon(u, v, &regular_polygon(5, r, 0.5 * r)),
        }
    }
}

/// Vertices of a regular polygon (or a star when `inner != outer`),
/// pointing up.
fn regular_polygon(points: usize, outer: f64, inner: f64) -> Vec<(f64, f64)> {
    let star = inner != outer;
    let n = if star { 2 * points } else { points };
    (0..n)
        .map(|i| {
            let radius = if star && i % 2 == 1 { inner } else { outer };
            let a = -PI / 2.0 + 2.0 * PI * i as f64 / n as f64;
            (radius * a.cos(), radius * a.sin())
        })
        .collect()
}

fn point_in_polygon(x: f64, y: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundKind {
    Solid,
    Gradient,
    Checker,
}

impl BackgroundKind {
    pub const ALL: [BackgroundKind; 3] = [Self::Solid, Self::Gradient, Self::Checker];

    pub fn name(self) -> &'static str {
        match self {
            Self::Solid => "solid",
            Self::Gradient => "gradient",
            Self::Checker => "checker",
        }
    }
}

pub const BACKGROUND_TONES: [(&str, Rgb); 4] = [
    ("gray", [0.50, 0.50, 0.50]),
    ("slate", [0.25, 0.30, 0.35]),
    ("sand", [0.80, 0.75, 0.60]),
    ("white", [0.92, 0.92, 0.92]),
];

fn tone(name: &str) -> Option<Rgb> {
    BACKGROUND_TONES.iter().find(|(n, _)| *n == name).map(|(_, c)| *c)
}

fn shade(c: Rgb, delta: f64) -> Rgb {
    c.map(|v| (v + delta).clamp(0.0, 1.0))
}

/// The two extreme colours of a background tone's patterns.
pub fn background_variants(base: Rgb) -> [Rgb; 2] {
    let delta = if base.iter().sum::<f64>() / 3.0 > 0.6 { -0.2 } else { 0.2 };
    [base, shade(base, delta)]
}

/// Every word the scene prompts use.
pub fn default_vocabulary() -> Vocabulary {
    let mut words: Vec<&str> = Vec::new();
    for class in ShapeClass::ALL {
        words.push(class.name());
        words.extend(class.palette().iter().map(|(n, _)| *n));
    }
    words.extend(BACKGROUND_TONES.iter().map(|(n, _)| *n));
    words.extend(BackgroundKind::ALL.iter().map(|k| k.name()));
    Vocabulary::new(words).expect("scene words are unique")
}

/// Recipe for one scene. Geometry left as `None` is sampled from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub class: ShapeClass,
    pub color: String,
    pub background: String,
    pub background_kind: BackgroundKind,
    #[serde(default)]
    pub center: Option<(f64, f64)>,
    #[serde(default)]
    pub radius: Option<f64>,
    #[serde(default)]
    pub rotation: Option<f64>,
    pub seed: u64,
    #[serde(default = "default_size")]
    pub size: usize,
    #[serde(default)]
    pub antialias: bool,
}

fn default_size() -> usize {
    16
}

impl SceneSpec {
    /// Draws class, colour and background from `seed`.
    pub fn random(seed: u64, size: usize) -> Self {
        let mut rng = SeededRng::derive(seed, 0x5CE7E);
        let class = ShapeClass::ALL[rng.below(4)];
        let palette = class.palette();
        let color = palette[rng.below(palette.len())].0.to_string();
        let background = BACKGROUND_TONES[rng.below(BACKGROUND_TONES.len())].0.to_string();
        let background_kind = BackgroundKind::ALL[rng.below(3)];
        Self {
            class,
            color,
            background,
            background_kind,
            center: None,
            radius: None,
            rotation: None,
            seed,
            size,
            antialias: false,
        }
    }

    pub fn prompt(&self) -> PromptPair {
        PromptPair {
            inside: vec![self.color.clone(), self.class.name().to_string()],
            outside: vec![self.background.clone(), self.background_kind.name().to_string()],
        }
    }

    /// Same scene with the object in another colour of its class.
    pub fn recolored(&self, color: &str) -> Result<Self> {
        if self.class.color(color).is_none() {
            return Err(Error::Spec(format!(
                "{color} is not a {} colour",
                self.class.name()
            )));
        }
        Ok(Self {
            color: color.to_string(),
            ..self.clone()
        })
    }

    /// The first palette colour of the class that differs from this one.
    pub fn alternate_color(&self) -> &'static str {
        self.class
            .palette()
            .iter()
            .map(|(n, _)| *n)
            .find(|n| *n != self.color)
            .expect("palettes have at least two colours")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub name: String,
    /// `(x, y)` in pixel units; pixel `(row, col)` has its centre at
    /// `(col + 0.5, row + 0.5)`.
    pub pos: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    /// `[3, H, W]` in `[-1, 1]`.
    pub image: Tensor<f32>,
    pub mask: ObjectMask,
    pub keypoints: Vec<Keypoint>,
    pub class: ShapeClass,
    pub p_src: PromptPair,
    /// Realised geometry `(cx, cy, radius, rotation)`.
    pub geometry: (f64, f64, f64, f64),
}

pub(crate) fn rgb_to_pixel(c: Rgb) -> [f32; 3] {
    // quantise to 8 bits so scenes survive a PPM round trip bitwise
    c.map(|v| {
        let q = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        u8_to_unit(q)
    })
}

pub fn u8_to_unit(q: u8) -> f32 {
    q as f32 / 255.0 * 2.0 - 1.0
}

pub fn unit_to_u8(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) / 2.0) * 255.0).round() as u8
}

fn background_color(kind: BackgroundKind, base: Rgb, row: usize, col: usize, size: usize) -> Rgb {
    let [a, b] = background_variants(base);
    match kind {
        BackgroundKind::Solid => a,
        BackgroundKind::Gradient => {
            let f = col as f64 / (size - 1).max(1) as f64;
            [0, 1, 2].map(|i| a[i] + (b[i] - a[i]) * f)
        }
        BackgroundKind::Checker => {
            let cell = (size / 4).max(1);
            if (row / cell + col / cell) % 2 == 0 {
                a
            } else {
                b
            }
        }
    }
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    let size = spec.size;
    if size < 4 {
        return Err(Error::Spec(format!("image size {size} too small")));
    }
    let fill = spec.class.color(&spec.color).ok_or_else(|| {
        Error::Spec(format!("{} is not a {} colour", spec.color, spec.class.name()))
    })?;
    let base = tone(&spec.background)
        .ok_or_else(|| Error::Spec(format!("unknown background tone {}", spec.background)))?;

    let mut rng = SeededRng::derive(spec.seed, 0x6E0);
    let n = size as f64;
    for _ in 0..MAX_REJECTIONS {
        let r = spec.radius.unwrap_or_else(|| rng.range(0.15 * n, 0.42 * n));
        let (cx, cy) = spec
            .center
            .unwrap_or_else(|| (rng.range(r + 0.5, n - r - 0.5), rng.range(r + 0.5, n - r - 0.5)));
        let rot = match spec.class {
            ShapeClass::Circle => 0.0,
            _ => spec.rotation.unwrap_or_else(|| rng.range(-0.3, 0.3)),
        };
        if !(r > 0.0 && cx.is_finite() && cy.is_finite()) {
            continue;
        }

        let mut coverage = vec![0.0f64; size * size];
        for row in 0..size {
            for col in 0..size {
                let mut hits = 0;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let x = col as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                        let y = row as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                        hits += spec.class.contains(x, y, cx, cy, r, rot) as usize;
                    }
                }
                coverage[row * size + col] = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            }
        }
        let mask = ObjectMask::new(size, size, coverage.iter().map(|&c| c > 0.5).collect())?;
        let frac = mask.area_fraction();
        if !(MIN_AREA_FRACTION..=MAX_AREA_FRACTION).contains(&frac) {
            continue;
        }
        // reject rasterisations with slivers the segmenter would clean away
        if clean_mask(&mask) != mask {
            continue;
        }
        let Some(mut keypoints) = keypoints_from_mask(&mask) else {
            continue;
        };
        // the centroid keypoint is the analytic shape centre
        let (mx, my) = keypoints[0].pos;
        if (mx - cx).hypot(my - cy) > 0.5 || !mask.get(cy as usize, cx as usize) {
            continue;
        }
        keypoints[0].pos = (cx, cy);

        let mut data = vec![0.0f32; 3 * size * size];
        for row in 0..size {
            for col in 0..size {
                let bg = background_color(spec.background_kind, base, row, col, size);
                let i = row * size + col;
                let cov = if spec.antialias {
                    coverage[i]
                } else if mask.data()[i] {
                    1.0
                } else {
                    0.0
                };
                let c = [0, 1, 2].map(|k| cov * fill[k] + (1.0 - cov) * bg[k]);
                let px = rgb_to_pixel(c);
                for k in 0..3 {
                    data[k * size * size + i] = px[k];
                }
            }
        }
        return Ok(Scene {
            spec: spec.clone(),
            image: Tensor::new(&[3, size, size], data)?,
            mask,
            keypoints,
            class: spec.class,
            p_src: spec.prompt(),
            geometry: (cx, cy, r, rot),
        });
    }
    Err(Error::Spec(format!(
        "no {} satisfying the area constraints after {MAX_REJECTIONS} attempts (seed {})",
        spec.class.name(),
        spec.seed
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        let spec = SceneSpec::random(42, 16);
        let a = generate_scene(&spec).unwrap();
        let b = generate_scene(&spec).unwrap();
        assert_eq!(a, b);
        let bits = |s: &Scene| s.image.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn circle_area_matches_analytic() {
        for (i, r) in [2.5, 3.0, 4.0, 5.0].into_iter().enumerate() {
            let spec = SceneSpec {
                class: ShapeClass::Circle,
                color: "red".into(),
                background: "gray".into(),
                background_kind: BackgroundKind::Solid,
                center: Some((8.0, 8.0)),
                radius: Some(r),
                rotation: None,
                seed: i as u64,
                size: 16,
                antialias: false,
            };
            let s = generate_scene(&spec).unwrap();
            let analytic = PI * r * r;
            assert!((s.mask.area() as f64 - analytic).abs() <= 16.0, "r={r}");
        }
    }

    #[test]
    fn invariants_hold_over_many_seeds() {
        for seed in 0..200 {
            let s = generate_scene(&SceneSpec::random(seed, 16)).unwrap();
            let frac = s.mask.area_fraction();
            assert!((MIN_AREA_FRACTION..=MAX_AREA_FRACTION).contains(&frac));
            for kp in &s.keypoints {
                let (x, y) = kp.pos;
                assert!(s.mask.get(y as usize, x as usize), "{seed} {kp:?}");
            }
            let (mx, my) = keypoints_from_mask(&s.mask).unwrap()[0].pos;
            let (cx, cy) = s.keypoints[0].pos;
            assert!((mx - cx).hypot(my - cy) <= 0.5);
            assert!(s.image.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn unsatisfiable_area_is_a_spec_error() {
        let spec = SceneSpec {
            class: ShapeClass::Square,
            color: "blue".into(),
            background: "gray".into(),
            background_kind: BackgroundKind::Checker,
            center: Some((8.0, 8.0)),
            radius: Some(0.6),
            rotation: Some(0.0),
            seed: 0,
            size: 16,
            antialias: false,
        };
        assert!(matches!(generate_scene(&spec), Err(Error::Spec(_))));
        let wrong = SceneSpec {
            color: "red".into(),
            radius: None,
            center: None,
            ..spec
        };
        assert!(matches!(generate_scene(&wrong), Err(Error::Spec(_))));
    }

    #[test]
    fn vocabulary_covers_prompts() {
        let v = default_vocabulary();
        assert_eq!(v.len(), 2 + 4 + 8 + 4 + 3);
        for seed in 0..20 {
            let p = SceneSpec::random(seed, 16).prompt();
            crate::tokens::tokenize(&p, &v, 2).unwrap();
        }
    }

    #[test]
    fn pixel_quantisation_roundtrips() {
        for q in 0..=255u8 {
            assert_eq!(unit_to_u8(u8_to_unit(q)), q);
        }
    }
}
