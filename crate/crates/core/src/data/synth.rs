//! Deterministic synthetic datasets.
//!
//! A procedural "anatomy" (soft ellipses, curved ridges and one small motif
//! per landmark) is rendered analytically under a smooth random
//! displacement field, so landmark ground truth is exact: a landmark at `l`
//! in anatomy space lands at the fixed point `p = l + D(p)`.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DatasetSplit, ImageSample};
use crate::error::{Error, Result};
use crate::grid::{Grid, Point, Size};
use crate::rng::{indexed_stream, substream, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub count: usize,
    pub num_landmarks: usize,
    pub size: Size,
    /// Largest displacement of the deformation field in pixels.
    pub max_displacement: f64,
    /// Minimum distance of every landmark to the image border.
    pub margin: usize,
    pub noise_std: f64,
    pub spacing_mm: (f64, f64),
}

impl SynthConfig {
    /// Defaults scaled to `size`: 8 px displacement and a margin of half the
    /// default patch (a quarter of the shorter side) at 192².
    pub fn new(seed: u64, count: usize, num_landmarks: usize, size: Size) -> Self {
        let short = size.height.min(size.width);
        Self {
            seed,
            count,
            num_landmarks,
            size,
            max_displacement: 8.0 * short as f64 / 192.0,
            margin: short / 4,
            noise_std: 0.02,
            spacing_mm: (0.1, 0.1),
        }
    }
}

#[derive(Clone, Debug)]
enum Shape {
    Ellipse {
        center: Point,
        radii: (f64, f64),
        angle: f64,
        intensity: f64,
        softness: f64,
    },
    Ridge {
        angle: f64,
        offset: f64,
        amplitude: f64,
        wavelength: f64,
        phase: f64,
        width: f64,
        intensity: f64,
    },
    Ring {
        center: Point,
        radius: f64,
        width: f64,
        intensity: f64,
    },
    Bar {
        a: Point,
        b: Point,
        width: f64,
        intensity: f64,
    },
    Dot {
        center: Point,
        radius: f64,
        intensity: f64,
    },
    Grating {
        /// Cycles per pixel along x and y.
        freq: (f64, f64),
        phase: f64,
        amplitude: f64,
    },
}

impl Shape {
    fn eval(&self, p: Point) -> f64 {
        match *self {
            Shape::Ellipse {
                center,
                radii,
                angle,
                intensity,
                softness,
            } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (p.x - center.x, p.y - center.y);
                let u = (c * dx + s * dy) / radii.0;
                let v = (-s * dx + c * dy) / radii.1;
                let rho = u.hypot(v);
                intensity / (1.0 + ((rho - 1.0) / softness).exp())
            }
            Shape::Ridge {
                angle,
                offset,
                amplitude,
                wavelength,
                phase,
                width,
                intensity,
            } => {
                let (s, c) = angle.sin_cos();
                let u = c * p.x + s * p.y;
                let v = -s * p.x + c * p.y;
                let v0 = offset + amplitude * (std::f64::consts::TAU * u / wavelength + phase).sin();
                intensity * (-((v - v0) / width).powi(2)).exp()
            }
            Shape::Ring {
                center,
                radius,
                width,
                intensity,
            } => {
                let r = p.distance(center);
                intensity * (-((r - radius) / width).powi(2)).exp()
            }
            Shape::Bar { a, b, width, intensity } => {
                let (ux, uy) = (b.x - a.x, b.y - a.y);
                let len2 = ux * ux + uy * uy;
                let t = (((p.x - a.x) * ux + (p.y - a.y) * uy) / len2).clamp(0.0, 1.0);
                let q = Point::new(a.x + t * ux, a.y + t * uy);
                intensity * (-(p.distance(q) / width).powi(2)).exp()
            }
            Shape::Dot {
                center,
                radius,
                intensity,
            } => {
                let d2 = (p.x - center.x).powi(2) + (p.y - center.y).powi(2);
                // exp(-16) is below the 16-bit quantization step.
                if d2 > 16.0 * radius * radius {
                    0.0
                } else {
                    intensity * (-d2 / (radius * radius)).exp()
                }
            }
            Shape::Grating { freq, phase, amplitude } => {
                amplitude * (std::f64::consts::TAU * (freq.0 * p.x + freq.1 * p.y) + phase).sin()
            }
        }
    }
}

/// Procedural scene shared by every sample of a dataset.
#[derive(Clone, Debug)]
struct Anatomy {
    shapes: Vec<Shape>,
    landmarks: Vec<Point>,
}

impl Anatomy {
    fn eval(&self, p: Point) -> f64 {
        0.1 + self.shapes.iter().map(|s| s.eval(p)).sum::<f64>()
    }
}

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}

fn place_landmarks(cfg: &SynthConfig, rng: &mut Rng) -> Result<Vec<Point>> {
    let inset = cfg.margin as f64 + cfg.max_displacement.ceil() + 1.0;
    let (w, h) = (cfg.size.width as f64, cfg.size.height as f64);
    let (x_lo, x_hi) = (inset, w - 1.0 - inset);
    let (y_lo, y_hi) = (inset, h - 1.0 - inset);
    if x_lo >= x_hi || y_lo >= y_hi {
        return Err(Error::InvalidInput(format!(
            "no room for landmarks in {} with margin {} and displacement {}",
            cfg.size, cfg.margin, cfg.max_displacement
        )));
    }
    let scale = cfg.size.height.min(cfg.size.width) as f64 / 192.0;
    let mut min_sep = 16.0 * scale;
    let mut points = Vec::with_capacity(cfg.num_landmarks);
    let mut attempts = 0;
    while points.len() < cfg.num_landmarks {
        attempts += 1;
        if attempts % 2000 == 0 {
            // Relax spacing in crowded layouts, but never below two pixels.
            min_sep *= 0.8;
            if min_sep < 2.0 {
                return Err(Error::InvalidInput(format!(
                    "{} landmarks do not fit inside the {} margin of {}",
                    cfg.num_landmarks, cfg.margin, cfg.size
                )));
            }
        }
        let p = Point::new(uniform(rng, x_lo, x_hi), uniform(rng, y_lo, y_hi));
        if points.iter().all(|q: &Point| q.distance(p) >= min_sep) {
            points.push(p);
        }
    }
    Ok(points)
}

fn motif(center: Point, kind: usize, scale: f64, rng: &mut Rng) -> Vec<Shape> {
    let angle = uniform(rng, 0.0, std::f64::consts::TAU);
    let arm = uniform(rng, 5.0, 9.0) * scale;
    let width = uniform(rng, 1.2, 2.0) * scale;
    let intensity = uniform(rng, 0.45, 0.8);
    let at = |theta: f64, r: f64| Point::new(center.x + r * theta.cos(), center.y + r * theta.sin());
    use std::f64::consts::FRAC_PI_2;
    match kind % 4 {
        0 => vec![
            Shape::Ring {
                center,
                radius: arm * 0.8,
                width,
                intensity,
            },
            Shape::Dot {
                center,
                radius: width * 1.2,
                intensity,
            },
        ],
        1 => vec![
            Shape::Bar {
                a: at(angle, arm),
                b: at(angle + std::f64::consts::PI, arm),
                width,
                intensity,
            },
            Shape::Bar {
                a: at(angle + FRAC_PI_2, arm),
                b: at(angle - FRAC_PI_2, arm),
                width,
                intensity,
            },
        ],
        2 => vec![
            Shape::Bar {
                a: center,
                b: at(angle, arm * 1.4),
                width,
                intensity,
            },
            Shape::Bar {
                a: center,
                b: at(angle + FRAC_PI_2, arm * 1.4),
                width,
                intensity,
            },
        ],
        _ => vec![
            Shape::Bar {
                a: at(angle, arm),
                b: at(angle + std::f64::consts::PI, arm),
                width,
                intensity,
            },
            Shape::Bar {
                a: center,
                b: at(angle + FRAC_PI_2, arm * 1.4),
                width,
                intensity,
            },
            Shape::Dot {
                center: at(angle - FRAC_PI_2, arm * 0.6),
                radius: width,
                intensity: intensity * 0.7,
            },
        ],
    }
}

fn build_anatomy(cfg: &SynthConfig) -> Result<Anatomy> {
    let mut rng = substream(cfg.seed, "synthetic-anatomy");
    let (w, h) = (cfg.size.width as f64, cfg.size.height as f64);
    let scale = h.min(w) / 192.0;
    let mut shapes = Vec::new();
    for _ in 0..5 {
        shapes.push(Shape::Ellipse {
            center: Point::new(uniform(&mut rng, 0.15 * w, 0.85 * w), uniform(&mut rng, 0.15 * h, 0.85 * h)),
            radii: (
                uniform(&mut rng, 20.0, 70.0) * scale,
                uniform(&mut rng, 15.0, 50.0) * scale,
            ),
            angle: uniform(&mut rng, 0.0, std::f64::consts::PI),
            intensity: uniform(&mut rng, 0.1, 0.3),
            softness: uniform(&mut rng, 0.03, 0.12),
        });
    }
    for _ in 0..4 {
        let angle = uniform(&mut rng, 0.0, std::f64::consts::PI);
        let (s, c) = angle.sin_cos();
        // Offset relative to the rotated image center so ridges cross the view.
        let center_v = -s * w / 2.0 + c * h / 2.0;
        shapes.push(Shape::Ridge {
            angle,
            offset: center_v + uniform(&mut rng, -0.35, 0.35) * h.min(w),
            amplitude: uniform(&mut rng, 4.0, 18.0) * scale,
            wavelength: uniform(&mut rng, 60.0, 160.0) * scale,
            phase: uniform(&mut rng, 0.0, std::f64::consts::TAU),
            width: uniform(&mut rng, 1.5, 3.5) * scale,
            intensity: uniform(&mut rng, 0.15, 0.35),
        });
    }
    // Fine texture everywhere, so that any point has a recognizable
    // neighbourhood.
    let blobs = (90.0 * w * h / (192.0 * 192.0)).round() as usize;
    for _ in 0..blobs {
        let center = Point::new(uniform(&mut rng, -0.05 * w, 1.05 * w), uniform(&mut rng, -0.05 * h, 1.05 * h));
        let intensity = uniform(&mut rng, 0.06, 0.22);
        if rng.gen_bool(0.6) {
            shapes.push(Shape::Dot {
                center,
                radius: uniform(&mut rng, 1.5, 5.0) * scale,
                intensity,
            });
        } else {
            let theta = uniform(&mut rng, 0.0, std::f64::consts::TAU);
            let len = uniform(&mut rng, 4.0, 12.0) * scale;
            shapes.push(Shape::Bar {
                a: center,
                b: Point::new(center.x + len * theta.cos(), center.y + len * theta.sin()),
                width: uniform(&mut rng, 1.0, 2.0) * scale,
                intensity,
            });
        }
    }
    for _ in 0..6 {
        let theta = uniform(&mut rng, 0.0, std::f64::consts::TAU);
        let wavelength = uniform(&mut rng, 8.0, 40.0) * scale;
        shapes.push(Shape::Grating {
            freq: (theta.cos() / wavelength, theta.sin() / wavelength),
            phase: uniform(&mut rng, 0.0, std::f64::consts::TAU),
            amplitude: uniform(&mut rng, 0.008, 0.02),
        });
    }
    let landmarks = place_landmarks(cfg, &mut rng)?;
    for (k, l) in landmarks.iter().enumerate() {
        shapes.extend(motif(*l, k, scale, &mut rng));
    }
    Ok(Anatomy { shapes, landmarks })
}

/// Smooth displacement field: a translation plus a few low-frequency sine
/// modes, rescaled so its largest magnitude over the image is `peak`.
#[derive(Clone, Debug)]
struct Deformation {
    shift: (f64, f64),
    modes: Vec<[f64; 5]>,
    scale: f64,
}

impl Deformation {
    fn identity() -> Self {
        Self {
            shift: (0.0, 0.0),
            modes: Vec::new(),
            scale: 0.0,
        }
    }

    fn random(size: Size, peak: f64, rng: &mut Rng) -> Self {
        let (w, h) = (size.width as f64, size.height as f64);
        let mut d = Self {
            shift: (rng.sample(StandardNormal), rng.sample(StandardNormal)),
            modes: (0..6)
                .map(|_| {
                    [
                        uniform(rng, 0.25, 1.25) / w,
                        uniform(rng, 0.25, 1.25) / h,
                        uniform(rng, 0.0, std::f64::consts::TAU),
                        rng.sample(StandardNormal),
                        rng.sample(StandardNormal),
                    ]
                })
                .collect(),
            scale: 1.0,
        };
        let mut max = 0.0f64;
        for y in (0..size.height).step_by(4) {
            for x in (0..size.width).step_by(4) {
                let (dx, dy) = d.raw(Point::new(x as f64, y as f64));
                max = max.max(dx.hypot(dy));
            }
        }
        let target = peak * uniform(rng, 0.5, 0.95);
        d.scale = if max > 0.0 { target / max } else { 0.0 };
        d
    }

    fn raw(&self, p: Point) -> (f64, f64) {
        let mut dx = self.shift.0;
        let mut dy = self.shift.1;
        for m in &self.modes {
            let s = (std::f64::consts::TAU * (m[0] * p.x + m[1] * p.y) + m[2]).sin();
            dx += m[3] * s;
            dy += m[4] * s;
        }
        (dx, dy)
    }

    fn at(&self, p: Point) -> (f64, f64) {
        let (dx, dy) = self.raw(p);
        (dx * self.scale, dy * self.scale)
    }

    /// Solves `p = l + D(p)` by fixed-point iteration (D is contractive).
    fn forward(&self, l: Point) -> Result<Point> {
        let mut p = l;
        for _ in 0..200 {
            let (dx, dy) = self.at(p);
            let next = Point::new(l.x + dx, l.y + dy);
            if next.distance(p) < 1e-13 {
                return Ok(next);
            }
            p = next;
        }
        let (dx, dy) = self.at(p);
        let residual = Point::new(l.x + dx, l.y + dy).distance(p);
        if residual < 1e-9 {
            Ok(p)
        } else {
            Err(Error::InvalidInput(format!(
                "deformation not invertible at ({}, {}), residual {residual}",
                l.x, l.y
            )))
        }
    }
}

fn render_sample(cfg: &SynthConfig, anatomy: &Anatomy, index: usize) -> Result<ImageSample> {
    let mut rng = indexed_stream(cfg.seed, "synthetic-sample", index as u64);
    let deformation = if index == 0 || cfg.max_displacement <= 0.0 {
        Deformation::identity()
    } else {
        Deformation::random(cfg.size, cfg.max_displacement, &mut rng)
    };
    let gamma = uniform(&mut rng, 0.85, 1.2);
    let contrast = uniform(&mut rng, 0.85, 1.15);
    let tilt = (uniform(&mut rng, -0.05, 0.05), uniform(&mut rng, -0.05, 0.05));
    let (w, h) = (cfg.size.width as f64, cfg.size.height as f64);
    let mut pixels = Grid::filled(cfg.size, 0.0f32);
    for y in 0..cfg.size.height {
        for x in 0..cfg.size.width {
            let p = Point::new(x as f64, y as f64);
            let (dx, dy) = deformation.at(p);
            let v = anatomy.eval(Point::new(p.x - dx, p.y - dy)).clamp(0.0, 1.0);
            let bias = tilt.0 * (p.x / w - 0.5) + tilt.1 * (p.y / h - 0.5);
            let noise: f64 = rng.sample::<f64, _>(StandardNormal) * cfg.noise_std;
            let v = (v.powf(gamma) - 0.5) * contrast + 0.5 + bias + noise;
            pixels.set(x, y, v.clamp(0.0, 1.0) as f32);
        }
    }
    let landmarks = anatomy
        .landmarks
        .iter()
        .map(|l| deformation.forward(*l))
        .collect::<Result<Vec<_>>>()?;
    let sample = ImageSample {
        id: format!("synth_{index:03}"),
        pixels,
        landmarks,
        native_size: cfg.size,
        spacing_mm: cfg.spacing_mm,
    };
    sample.validate()?;
    Ok(sample)
}

/// Generates `count` samples; sample 0 (identity deformation) is the
/// template, the last `count / 4` form the test split, the rest are
/// unlabeled training images.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<DatasetSplit> {
    if cfg.count < 2 {
        return Err(Error::InvalidInput(format!("count must be >= 2, got {}", cfg.count)));
    }
    if cfg.num_landmarks == 0 {
        return Err(Error::InvalidInput("at least one landmark is required".into()));
    }
    if !(cfg.max_displacement >= 0.0 && cfg.max_displacement.is_finite()) {
        return Err(Error::InvalidInput("max_displacement must be finite and >= 0".into()));
    }
    let anatomy = build_anatomy(cfg)?;
    let render = |i: usize| render_sample(cfg, &anatomy, i);
    let samples = crate::par::map_range(cfg.count, render)
        .into_iter()
        .collect::<Result<Vec<ImageSample>>>()?;

    let n_test = cfg.count / 4;
    let mut samples = samples.into_iter();
    let template = samples.next().expect("count >= 2");
    let rest: Vec<ImageSample> = samples.collect();
    let split_at = rest.len() - n_test;
    let (unlabeled, test) = rest.split_at(split_at);
    let split = DatasetSplit {
        template,
        unlabeled: unlabeled.to_vec(),
        test: test.to_vec(),
    };
    split.validate()?;
    Ok(split)
}
