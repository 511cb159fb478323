//! Analytic stand-ins for a segmentation model and a keypoint detector.

use crate::error::{Error, Result};
use crate::inside_outside::ObjectMask;
use crate::tensor::Tensor;

use super::scene::{background_variants, Keypoint, Rgb, ShapeClass, BACKGROUND_TONES};

/// Largest RGB distance (unit cube) at which a pixel still counts as an
/// object colour.
pub const DEFAULT_TOLERANCE: f64 = 0.45;

pub const KEYPOINT_NAMES: [&str; 5] = ["centroid", "top", "bottom", "left", "right"];

/// Reference colours: every object colour plus the background shades.
fn references() -> Vec<(Option<ShapeClass>, Rgb)> {
    let mut refs = Vec::new();
    for class in ShapeClass::ALL {
        refs.extend(class.palette().iter().map(|(_, c)| (Some(class), *c)));
    }
    for (_, base) in BACKGROUND_TONES {
        let [a, b] = background_variants(base);
        let mid = [0, 1, 2].map(|i| 0.5 * (a[i] + b[i]));
        refs.extend([a, mid, b].map(|c| (None, c)));
    }
    refs
}

fn dist(a: Rgb, b: Rgb) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn pixel(image: &Tensor<f32>, hw: usize, i: usize) -> Rgb {
    let d = image.data();
    [0, 1, 2].map(|k| ((d[k * hw + i] as f64 + 1.0) / 2.0).clamp(0.0, 1.0))
}

/// Segments every pixel whose nearest reference colour belongs to `class`
/// and lies within [`DEFAULT_TOLERANCE`], then cleans the result.
pub fn oracle_segment(image: &Tensor<f32>, class: ShapeClass) -> Result<ObjectMask> {
    oracle_segment_with(image, class, DEFAULT_TOLERANCE)
}

pub fn oracle_segment_with(image: &Tensor<f32>, class: ShapeClass, tolerance: f64) -> Result<ObjectMask> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::dim("oracle_segment", format!("expected [3, H, W], got {:?}", image.shape())));
    };
    if c != 3 {
        return Err(Error::dim("oracle_segment", format!("expected 3 channels, got {c}")));
    }
    let refs = references();
    let hw = h * w;
    let raw: Vec<bool> = (0..hw)
        .map(|i| {
            let p = pixel(image, hw, i);
            let (owner, d) = refs
                .iter()
                .map(|(owner, r)| (*owner, dist(p, *r)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("reference set is nonempty");
            owner == Some(class) && d <= tolerance
        })
        .collect();
    Ok(clean_mask(&ObjectMask::new(h, w, raw)?))
}

/// One 3x3 cleanup pass: a pixel flips when at least three quarters of its
/// in-bounds neighbours (and at least three of them) disagree with it.
pub fn clean_mask(mask: &ObjectMask) -> ObjectMask {
    let (h, w) = (mask.height(), mask.width());
    ObjectMask::from_fn(h, w, |r, c| {
        let v = mask.get(r, c);
        let (mut total, mut disagree) = (0, 0);
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                if dr == 0 && dc == 0 {
                    continue;
                }
                let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                if rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 {
                    continue;
                }
                total += 1;
                disagree += (mask.get(rr as usize, cc as usize) != v) as usize;
            }
        }
        if disagree >= 3 && 4 * disagree >= 3 * total {
            !v
        } else {
            v
        }
    })
}

/// Centroid plus the four extreme pixels (ties broken towards the
/// centroid). `None` for an empty mask.
pub fn keypoints_from_mask(mask: &ObjectMask) -> Option<Vec<Keypoint>> {
    let w = mask.width();
    let pixels: Vec<(f64, f64)> = mask
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v)
        .map(|(i, _)| ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5))
        .collect();
    if pixels.is_empty() {
        return None;
    }
    let n = pixels.len() as f64;
    let cx = pixels.iter().map(|p| p.0).sum::<f64>() / n;
    let cy = pixels.iter().map(|p| p.1).sum::<f64>() / n;
    let extreme = |key: &dyn Fn(&(f64, f64)) -> f64| {
        let best = pixels.iter().map(key).fold(f64::INFINITY, f64::min);
        *pixels
            .iter()
            .filter(|p| key(p) == best)
            .min_by(|a, b| (a.0 - cx).hypot(a.1 - cy).total_cmp(&(b.0 - cx).hypot(b.1 - cy)))
            .expect("extreme exists")
    };
    let positions = [
        (cx, cy),
        extreme(&|p| p.1),
        extreme(&|p| -p.1),
        extreme(&|p| p.0),
        extreme(&|p| -p.0),
    ];
    Some(
        KEYPOINT_NAMES
            .iter()
            .zip(positions)
            .map(|(name, pos)| Keypoint {
                name: name.to_string(),
                pos,
            })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::scene::{generate_scene, SceneSpec};

    #[test]
    fn blank_image_gives_empty_mask() {
        for v in [-1.0f32, 0.0, 1.0] {
            let img = Tensor::full(&[3, 16, 16], v);
            for class in ShapeClass::ALL {
                assert_eq!(oracle_segment(&img, class).unwrap().area(), 0);
            }
        }
    }

    #[test]
    fn segments_generator_output_exactly() {
        for seed in 0..100 {
            let s = generate_scene(&SceneSpec::random(seed, 16)).unwrap();
            assert_eq!(oracle_segment(&s.image, s.class).unwrap(), s.mask, "seed {seed}");
        }
    }

    #[test]
    fn antialiased_scenes_stay_consistent() {
        let mut ious = Vec::new();
        for seed in 0..100 {
            let mut spec = SceneSpec::random(seed, 16);
            spec.antialias = true;
            let s = generate_scene(&spec).unwrap();
            let pred = oracle_segment(&s.image, s.class).unwrap();
            ious.push(pred.iou(&s.mask).unwrap().unwrap());
        }
        let mean = ious.iter().sum::<f64>() / ious.len() as f64;
        assert!(mean >= 0.95, "mean IoU {mean}");
    }

    #[test]
    fn recolored_object_is_still_found() {
        for seed in 0..40 {
            let spec = SceneSpec::random(seed, 16);
            let other = spec.recolored(spec.alternate_color()).unwrap();
            let s = generate_scene(&other).unwrap();
            assert_eq!(oracle_segment(&s.image, s.class).unwrap(), s.mask);
        }
    }

    #[test]
    fn cleanup_removes_isolated_pixels_only() {
        let mut m = ObjectMask::filled(8, 8, false);
        let mut data = m.data().to_vec();
        data[3 * 8 + 3] = true;
        m = ObjectMask::new(8, 8, data).unwrap();
        assert_eq!(clean_mask(&m).area(), 0);
        let block = ObjectMask::from_fn(8, 8, |r, c| (2..6).contains(&r) && (2..6).contains(&c));
        assert_eq!(clean_mask(&block), block);
    }

    #[test]
    fn keypoints_of_a_block() {
        let block = ObjectMask::from_fn(8, 8, |r, c| (2..5).contains(&r) && (1..6).contains(&c));
        let kps = keypoints_from_mask(&block).unwrap();
        assert_eq!(kps[0].pos, (3.5, 3.5));
        assert_eq!(kps[1].pos, (3.5, 2.5));
        assert_eq!(kps[2].pos, (3.5, 4.5));
        assert_eq!(kps[3].pos, (1.5, 3.5));
        assert_eq!(kps[4].pos, (5.5, 3.5));
        assert!(keypoints_from_mask(&ObjectMask::filled(4, 4, false)).is_none());
    }
}
