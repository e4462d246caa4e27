//! Inference with the trained encoder pair: template anchors, similarity
//! cascades on query images, fusion of the cascade into one location, and
//! pseudo-label generation.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{rescale_coords, write_annotation, ImageSample};
use crate::encoder::{extract_anchor, AnchorFeatures, EncoderPair, FeaturePyramid};
use crate::error::{Error, Result};
use crate::grid::{bilinear_clamped, Grid, Point, Size};
use crate::rdb::similarity_map;

/// Cosine-similarity guard used at inference.
pub const EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum DecodeMode {
    /// Clamp, upsample, multiply, argmax.
    #[default]
    Product,
    /// Argmax at the coarsest level, then refine inside a `(2r+1)²` window
    /// at every finer level.
    Windowed { radius: usize },
}

/// Per-level similarity maps of one landmark on one query image.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityCascade {
    pub levels: Vec<Grid<f64>>,
    pub landmark: usize,
    pub image_id: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decoded {
    pub point: Point,
    pub confidence: f64,
}

/// Top-left corner of a `window` crop centered on `p`, shifted inside `image`.
pub fn centered_window(p: Point, window: Size, image: Size) -> Result<(usize, usize)> {
    if window.width > image.width || window.height > image.height {
        return Err(Error::Shape(format!("window {window} larger than image {image}")));
    }
    let clamp = |c: f64, len: usize, total: usize| (c.floor().max(0.0) as usize).saturating_sub(len / 2).min(total - len);
    Ok((clamp(p.x, window.width, image.width), clamp(p.y, window.height, image.height)))
}

/// Embeds a patch-sized window around every template landmark with `E_p`
/// and reads the anchor features at the landmark's in-patch position.
pub fn template_anchors(encoders: &EncoderPair, template: &ImageSample) -> Result<Vec<AnchorFeatures>> {
    let patch = encoders.patch_size;
    template
        .landmarks
        .iter()
        .map(|&l| {
            let (ox, oy) = centered_window(l, patch, template.size())?;
            let crop = template.pixels.crop(ox, oy, patch)?;
            let pyramid = encoders.patch.embed(&crop)?;
            extract_anchor(&pyramid, Point::new(l.x - ox as f64, l.y - oy as f64))
        })
        .collect()
}

pub fn similarity_cascade(anchor: &AnchorFeatures, query: &FeaturePyramid) -> Result<Vec<Grid<f64>>> {
    if anchor.vectors.len() != query.levels.len() {
        return Err(Error::Shape(format!(
            "anchor has {} levels, query pyramid has {}",
            anchor.vectors.len(),
            query.levels.len()
        )));
    }
    anchor
        .vectors
        .iter()
        .zip(&query.levels)
        .map(|(a, f)| similarity_map(a, f, EPSILON))
        .collect()
}

fn clamp_unit(grid: &Grid<f64>) -> Grid<f64> {
    grid.map(|v| v.clamp(0.0, 1.0))
}

/// Level `level` resampled onto the `finest` grid with bilinear weights,
/// aligning pixel centers (`x_i = (x + 0.5) / 2^i - 0.5`).
pub fn upsample_level(grid: &Grid<f64>, level: usize, finest: Size) -> Grid<f64> {
    let scale = (1u64 << level) as f64;
    Grid::from_fn(finest, |x, y| {
        bilinear_clamped(grid, (x as f64 + 0.5) / scale - 0.5, (y as f64 + 0.5) / scale - 0.5)
    })
}

/// Product of the clamped, upsampled levels.
pub fn fused_product(levels: &[Grid<f64>]) -> Result<Grid<f64>> {
    let finest = levels
        .first()
        .ok_or_else(|| Error::InvalidInput("empty similarity cascade".into()))?
        .size();
    let mut fused = clamp_unit(&levels[0]);
    for (i, level) in levels.iter().enumerate().skip(1) {
        let up = upsample_level(&clamp_unit(level), i, finest);
        for (f, u) in fused.as_mut_slice().iter_mut().zip(up.as_slice()) {
            *f *= u;
        }
    }
    Ok(fused)
}

/// Argmax inside a window, ties to the smallest row-major index.
fn window_argmax(grid: &Grid<f64>, x0: usize, y0: usize, x1: usize, y1: usize) -> (usize, usize) {
    let mut best = (x0, y0);
    let mut best_v = f64::NEG_INFINITY;
    for y in y0..y1 {
        for x in x0..x1 {
            let v = grid.get(x, y);
            if v > best_v {
                best_v = v;
                best = (x, y);
            }
        }
    }
    best
}

/// Fuses a cascade (finest level first) into one location on the finest grid.
pub fn fuse_and_decode(levels: &[Grid<f64>], mode: DecodeMode) -> Result<Decoded> {
    if levels.is_empty() {
        return Err(Error::InvalidInput("empty similarity cascade".into()));
    }
    match mode {
        DecodeMode::Product => {
            let fused = fused_product(levels)?;
            let (x, y) = fused.argmax();
            Ok(Decoded {
                point: Point::new(x as f64, y as f64),
                confidence: fused.get(x, y),
            })
        }
        DecodeMode::Windowed { radius } => {
            let clamped: Vec<Grid<f64>> = levels.iter().map(clamp_unit).collect();
            let coarsest = clamped.last().expect("nonempty");
            let (mut x, mut y) = coarsest.argmax();
            let mut confidence = coarsest.get(x, y);
            for grid in clamped.iter().rev().skip(1) {
                let (cx, cy) = (2 * x, 2 * y);
                let x0 = cx.saturating_sub(radius).min(grid.width() - 1);
                let y0 = cy.saturating_sub(radius).min(grid.height() - 1);
                let x1 = (cx + radius + 1).min(grid.width()).max(x0 + 1);
                let y1 = (cy + radius + 1).min(grid.height()).max(y0 + 1);
                (x, y) = window_argmax(grid, x0, y0, x1, y1);
                confidence *= grid.get(x, y);
            }
            Ok(Decoded {
                point: Point::new(x as f64, y as f64),
                confidence,
            })
        }
    }
}

/// Predicted landmarks of one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub id: String,
    /// Resized-space coordinates.
    pub points: Vec<Point>,
    pub confidences: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub labels: Vec<PseudoLabel>,
}

impl PseudoLabelSet {
    pub fn get(&self, id: &str) -> Option<&PseudoLabel> {
        self.labels.iter().find(|l| l.id == id)
    }

    /// `image_id,landmark,x,y,confidence` in resized-space pixels.
    pub fn confidence_csv(&self) -> String {
        let mut out = String::from("image_id,landmark,x,y,confidence\n");
        for l in &self.labels {
            for (k, (p, c)) in l.points.iter().zip(&l.confidences).enumerate() {
                let _ = writeln!(out, "{},{k},{},{},{c}", l.id, p.x, p.y);
            }
        }
        out
    }

    /// Writes `<dir>/<id>.txt` in native coordinates plus `confidence.csv`.
    pub fn write(&self, dir: &Path, samples: &[&ImageSample]) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for l in &self.labels {
            let sample = samples
                .iter()
                .find(|s| s.id == l.id)
                .ok_or_else(|| Error::InvalidInput(format!("no sample for pseudo-label `{}`", l.id)))?;
            let native = rescale_coords(&l.points, sample.size(), sample.native_size)?;
            write_annotation(&dir.join(format!("{}.txt", l.id)), &native)?;
        }
        let path = dir.join("confidence.csv");
        std::fs::write(&path, self.confidence_csv()).map_err(|e| Error::io(&path, e))
    }
}

/// Locates every template landmark on `image`.
pub fn predict_landmarks(
    encoders: &EncoderPair,
    anchors: &[AnchorFeatures],
    image: &ImageSample,
    mode: DecodeMode,
) -> Result<PseudoLabel> {
    let per_image = |e: Error| Error::PerImage {
        id: image.id.clone(),
        source: Box::new(e),
    };
    let pyramid = encoders.reference.embed(&image.pixels).map_err(per_image)?;
    let mut points = Vec::with_capacity(anchors.len());
    let mut confidences = Vec::with_capacity(anchors.len());
    for anchor in anchors {
        let cascade = similarity_cascade(anchor, &pyramid).map_err(per_image)?;
        let d = fuse_and_decode(&cascade, mode).map_err(per_image)?;
        points.push(d.point);
        confidences.push(d.confidence);
    }
    Ok(PseudoLabel {
        id: image.id.clone(),
        points,
        confidences,
    })
}

/// Similarity cascades of every landmark on one image (for visualization).
pub fn cascades_for(
    encoders: &EncoderPair,
    anchors: &[AnchorFeatures],
    image: &ImageSample,
) -> Result<Vec<SimilarityCascade>> {
    let pyramid = encoders.reference.embed(&image.pixels)?;
    anchors
        .iter()
        .enumerate()
        .map(|(k, a)| {
            Ok(SimilarityCascade {
                levels: similarity_cascade(a, &pyramid)?,
                landmark: k,
                image_id: image.id.clone(),
            })
        })
        .collect()
}

/// Runs the SSL model on every image in `images`.
pub fn generate_pseudo_labels(
    encoders: &EncoderPair,
    template: &ImageSample,
    images: &[&ImageSample],
    mode: DecodeMode,
) -> Result<PseudoLabelSet> {
    let anchors = template_anchors(encoders, template)?;
    let labels = crate::par::map_range(images.len(), |i| predict_landmarks(encoders, &anchors, images[i], mode))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(PseudoLabelSet { labels })
}
