//! Training-pair sampling: a full image, a rotated and color-jittered patch
//! cropped around a random point, and the point tracked into the patch.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{bilinear_reflect, Grid, Point, Size};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Rotation angle is drawn from `[-max_rotation_deg, max_rotation_deg]`.
    pub max_rotation_deg: f64,
    /// Brightness offset is drawn from `[-brightness, brightness]`.
    pub brightness: f64,
    pub contrast: (f64, f64),
    pub gamma: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_rotation_deg: 15.0,
            brightness: 0.2,
            contrast: (0.8, 1.25),
            gamma: (0.8, 1.25),
        }
    }
}

impl AugmentConfig {
    /// No geometric or photometric change.
    pub fn identity() -> Self {
        Self {
            max_rotation_deg: 0.0,
            brightness: 0.0,
            contrast: (1.0, 1.0),
            gamma: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let range_ok = |(lo, hi): (f64, f64)| lo > 0.0 && lo <= hi && hi.is_finite();
        if !(0.0..=180.0).contains(&self.max_rotation_deg) {
            return Err(Error::Config(format!(
                "max rotation must be in [0, 180] degrees, got {}",
                self.max_rotation_deg
            )));
        }
        if !(0.0..=1.0).contains(&self.brightness) {
            return Err(Error::Config(format!("brightness must be in [0, 1], got {}", self.brightness)));
        }
        if !range_ok(self.contrast) || !range_ok(self.gamma) {
            return Err(Error::Config("contrast and gamma ranges must satisfy 0 < lo <= hi".into()));
        }
        Ok(())
    }
}

/// Photometric jitter parameters, applied as gamma, then contrast about 0.5,
/// then brightness, then clamping to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    pub brightness: f64,
    pub contrast: f64,
    pub gamma: f64,
}

impl Jitter {
    pub const IDENTITY: Jitter = Jitter {
        brightness: 0.0,
        contrast: 1.0,
        gamma: 1.0,
    };
}

/// Everything needed to replay the geometry of a patch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformLog {
    /// Top-left corner of the crop in the full image.
    pub crop_origin: (usize, usize),
    pub patch_size: Size,
    pub angle_deg: f64,
    pub jitter: Jitter,
}

impl TransformLog {
    fn center(&self) -> Point {
        Point::new(
            (self.patch_size.width as f64 - 1.0) / 2.0,
            (self.patch_size.height as f64 - 1.0) / 2.0,
        )
    }

    /// Full-image coordinate to augmented-patch coordinate.
    pub fn forward(&self, p: Point) -> Point {
        let local = Point::new(p.x - self.crop_origin.0 as f64, p.y - self.crop_origin.1 as f64);
        rotate_point(local, self.center(), self.angle_deg)
    }

    /// Augmented-patch coordinate back to the full image.
    pub fn inverse(&self, p: Point) -> Point {
        let local = rotate_point(p, self.center(), -self.angle_deg);
        Point::new(local.x + self.crop_origin.0 as f64, local.y + self.crop_origin.1 as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample {
    pub patch: Grid<f32>,
    /// Tracked point inside the augmented patch.
    pub anchor: Point,
    /// The same point in the full image.
    pub source_point: Point,
    pub transform: TransformLog,
}

/// Rotates `p` about `center`. Positive angles turn the image content
/// counter-clockwise on screen: at 90° the point `(x, y)` of a square patch
/// of side `S` moves to `(y, S - 1 - x)`.
pub fn rotate_point(p: Point, center: Point, angle_deg: f64) -> Point {
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let (u, v) = (p.x - center.x, p.y - center.y);
    Point::new(center.x + u * cos + v * sin, center.y - u * sin + v * cos)
}

/// Rotates a patch about its center with bilinear resampling and reflected
/// borders, and maps `point` through the same rotation.
pub fn apply_rotation(patch: &Grid<f32>, point: Point, angle_deg: f64) -> (Grid<f32>, Point) {
    if angle_deg == 0.0 {
        return (patch.clone(), point);
    }
    let center = Point::new((patch.width() as f64 - 1.0) / 2.0, (patch.height() as f64 - 1.0) / 2.0);
    let rotated = Grid::from_fn(patch.size(), |x, y| {
        let src = rotate_point(Point::new(x as f64, y as f64), center, -angle_deg);
        bilinear_reflect(patch, src.x, src.y)
    });
    (rotated, rotate_point(point, center, angle_deg))
}

pub fn apply_color_jitter(patch: &Grid<f32>, jitter: Jitter) -> Grid<f32> {
    let Jitter {
        brightness,
        contrast,
        gamma,
    } = jitter;
    patch.map(|v| {
        let v = (v.clamp(0.0, 1.0) as f64).powf(gamma);
        let v = (v - 0.5) * contrast + 0.5 + brightness;
        v.clamp(0.0, 1.0) as f32
    })
}

fn uniform(rng: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

pub(crate) fn draw_jitter(rng: &mut Rng, config: &AugmentConfig) -> Jitter {
    Jitter {
        brightness: uniform(rng, (-config.brightness, config.brightness)),
        contrast: uniform(rng, config.contrast),
        gamma: uniform(rng, config.gamma),
    }
}

/// Draws an integer point `P_r` uniformly among positions that can sit at
/// least `margin` pixels inside some patch, picks a crop containing it with
/// that margin, then rotates and jitters the crop.
pub fn sample_training_pair(
    image: &Grid<f32>,
    rng: &mut Rng,
    patch_size: Size,
    margin: usize,
    config: &AugmentConfig,
) -> Result<(Point, PatchSample)> {
    let size = image.size();
    if patch_size.width > size.width || patch_size.height > size.height || patch_size.area() == 0 {
        return Err(Error::Shape(format!("patch {patch_size} does not fit image {size}")));
    }
    if 2 * margin >= patch_size.width || 2 * margin >= patch_size.height {
        return Err(Error::Config(format!("margin {margin} leaves no room inside patch {patch_size}")));
    }
    // Per axis: point range, then crop origin range given the point.
    let axis = |rng: &mut Rng, len: usize, plen: usize| -> (usize, usize) {
        let c = rng.gen_range(margin..len - margin);
        let lo = (c + 1 + margin).saturating_sub(plen);
        let hi = (c - margin).min(len - plen);
        (c, rng.gen_range(lo..=hi))
    };
    let (px, ox) = axis(rng, size.width, patch_size.width);
    let (py, oy) = axis(rng, size.height, patch_size.height);
    let angle = uniform(rng, (-config.max_rotation_deg, config.max_rotation_deg));
    let jitter = draw_jitter(rng, config);
    let source_point = Point::new(px as f64, py as f64);
    let transform = TransformLog {
        crop_origin: (ox, oy),
        patch_size,
        angle_deg: angle,
        jitter,
    };
    let crop = image.crop(ox, oy, patch_size)?;
    let local = Point::new((px - ox) as f64, (py - oy) as f64);
    let (rotated, anchor) = apply_rotation(&crop, local, angle);
    let patch = apply_color_jitter(&rotated, jitter);
    if !patch_size.contains(anchor) {
        return Err(Error::OutOfBounds(format!(
            "anchor ({:.2}, {:.2}) left the patch after rotation; increase the margin",
            anchor.x, anchor.y
        )));
    }
    Ok((
        source_point,
        PatchSample {
            patch,
            anchor,
            source_point,
            transform,
        },
    ))
}

/// Draws `n` further integer points in the crop of `transform`, at least
/// `margin` pixels inside it, and tracks each through the rotation. Returns
/// `(source_point, anchor)` pairs.
pub fn extra_anchors(transform: &TransformLog, rng: &mut Rng, margin: usize, n: usize) -> Vec<(Point, Point)> {
    let size = transform.patch_size;
    let (ox, oy) = transform.crop_origin;
    (0..n)
        .filter_map(|_| {
            let x = rng.gen_range(margin..size.width - margin);
            let y = rng.gen_range(margin..size.height - margin);
            let source = Point::new((ox + x) as f64, (oy + y) as f64);
            let anchor = transform.forward(source);
            size.contains(anchor).then_some((source, anchor))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn ramp(size: Size) -> Grid<f32> {
        Grid::from_fn(size, |x, y| ((x * 3 + y * 7) % 50) as f32 / 49.0)
    }

    #[test]
    fn extra_anchors_follow_the_transform() {
        let image = ramp(Size::hw(80, 90));
        let mut rng = Rng::seed_from_u64(8);
        let (_, ps) = sample_training_pair(&image, &mut rng, Size::hw(40, 40), 10, &AugmentConfig::default()).unwrap();
        let extra = extra_anchors(&ps.transform, &mut rng, 10, 16);
        assert_eq!(extra.len(), 16);
        for (source, anchor) in extra {
            assert!(ps.transform.inverse(anchor).distance(source) < 1e-9);
            let local = Point::new(
                source.x - ps.transform.crop_origin.0 as f64,
                source.y - ps.transform.crop_origin.1 as f64,
            );
            assert!((10.0..30.0).contains(&local.x) && (10.0..30.0).contains(&local.y));
        }
    }

    #[test]
    fn quarter_turn_example() {
        let c = Point::new(95.5, 95.5);
        let p = rotate_point(Point::new(48.0, 96.0), c, 90.0);
        assert!((p.x - 96.0).abs() < 1e-9 && (p.y - 143.0).abs() < 1e-9, "{p:?}");
    }

    #[test]
    fn half_turn_flips_both_axes() {
        let size = Size::hw(5, 7);
        let patch = ramp(size);
        let (rot, p) = apply_rotation(&patch, Point::new(1.0, 3.0), 180.0);
        assert!((p.x - 5.0).abs() < 1e-9 && (p.y - 1.0).abs() < 1e-9);
        for y in 0..5 {
            for x in 0..7 {
                assert!((rot.get(x, y) - patch.get(6 - x, 4 - y)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn rotation_matches_matrix_form() {
        let theta = 37f64.to_radians();
        let c = Point::new(47.5, 31.5);
        let p = Point::new(10.25, 60.0);
        // Image-coordinate rotation with y pointing down.
        let m = [[theta.cos(), theta.sin()], [-theta.sin(), theta.cos()]];
        let (u, v) = (p.x - c.x, p.y - c.y);
        let expect = Point::new(c.x + m[0][0] * u + m[0][1] * v, c.y + m[1][0] * u + m[1][1] * v);
        let got = rotate_point(p, c, 37.0);
        assert!(got.distance(expect) < 1e-12);
        let back = rotate_point(got, c, -37.0);
        assert!(back.distance(p) < 1e-12);
    }

    #[test]
    fn identity_augmentation_is_a_plain_crop() {
        let img = ramp(Size::hw(64, 80));
        let mut rng = Rng::seed_from_u64(3);
        let (pr, ps) = sample_training_pair(&img, &mut rng, Size::hw(32, 32), 8, &AugmentConfig::identity()).unwrap();
        let (ox, oy) = ps.transform.crop_origin;
        assert_eq!(ps.anchor, Point::new(pr.x - ox as f64, pr.y - oy as f64));
        assert_eq!(ps.patch, img.crop(ox, oy, Size::hw(32, 32)).unwrap());
    }

    #[test]
    fn jitter_extremes() {
        let patch = ramp(Size::hw(4, 4));
        assert_eq!(apply_color_jitter(&patch, Jitter::IDENTITY), patch);
        let white = apply_color_jitter(
            &patch,
            Jitter {
                brightness: 1.0,
                ..Jitter::IDENTITY
            },
        );
        assert!(white.as_slice().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn oversized_patch_is_rejected() {
        let img = ramp(Size::hw(16, 16));
        let mut rng = Rng::seed_from_u64(0);
        assert!(sample_training_pair(&img, &mut rng, Size::hw(17, 8), 2, &AugmentConfig::default()).is_err());
    }

    proptest! {
        #[test]
        fn logged_transform_tracks_the_point(seed in 0u64..10_000) {
            let img = ramp(Size::hw(96, 96));
            let mut rng = Rng::seed_from_u64(seed);
            let (pr, ps) = sample_training_pair(&img, &mut rng, Size::hw(48, 48), 12, &AugmentConfig::default()).unwrap();
            prop_assert!(ps.transform.forward(pr).distance(ps.anchor) <= 0.5);
            prop_assert!(ps.transform.inverse(ps.anchor).distance(pr) <= 0.5);
            prop_assert!(Size::hw(48, 48).contains(ps.anchor));
            prop_assert!(ps.patch.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
            let (ox, oy) = ps.transform.crop_origin;
            prop_assert!(pr.x >= (ox + 12) as f64 && pr.x < (ox + 48 - 12) as f64);
            prop_assert!(pr.y >= (oy + 12) as f64 && pr.y < (oy + 48 - 12) as f64);
        }

        #[test]
        fn jitter_stays_in_unit_range(b in -1.0f64..1.0, c in 0.5f64..2.0, g in 0.5f64..2.0) {
            let out = apply_color_jitter(&ramp(Size::hw(8, 8)), Jitter { brightness: b, contrast: c, gamma: g });
            prop_assert!(out.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
