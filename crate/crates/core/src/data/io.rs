use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{rescale_coords, DatasetSplit, ImageSample};
use crate::error::{Error, Result};
use crate::grid::{normalize_min_max, resize_bilinear, Grid, Point, Size};

/// Split membership by image id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub template: String,
    #[serde(default)]
    pub unlabeled: Vec<String>,
    #[serde(default)]
    pub test: Vec<String>,
}

/// Contents of `meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    /// `(sx, sy)` millimeters per native pixel, keyed by image id.
    pub spacing_mm: BTreeMap<String, [f64; 2]>,
    pub splits: Splits,
}

/// Parses an annotation file: one `x y` pair per line, native pixels.
/// Blank lines and `#` comments are ignored.
pub fn read_annotation(path: &Path) -> Result<Vec<Point>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Annotation {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: String| Error::Annotation {
            path: path.to_path_buf(),
            reason: format!("line {}: {reason}", lineno + 1),
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(bad(format!("expected `x y`, found {} fields", fields.len())));
        }
        let parse = |s: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad(format!("not a number: `{s}`")))
        };
        points.push(Point::new(parse(fields[0])?, parse(fields[1])?));
    }
    Ok(points)
}

pub fn write_annotation(path: &Path, points: &[Point]) -> Result<()> {
    let mut text = String::new();
    for p in points {
        text.push_str(&format!("{} {}\n", p.x, p.y));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_image(path: &Path) -> Result<Grid<f32>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let luma = img.into_luma16();
    let size = Size::hw(luma.height() as usize, luma.width() as usize);
    let data = luma.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect();
    Grid::from_vec(size, data)
}

fn write_image(path: &Path, pixels: &Grid<f32>) -> Result<()> {
    let raw: Vec<u16> = pixels
        .as_slice()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(pixels.width() as u32, pixels.height() as u32, raw)
        .ok_or_else(|| Error::Shape("image buffer size".into()))?;
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn load_sample(root: &Path, id: &str, spacing: [f64; 2], target: Size) -> Result<ImageSample> {
    let image_path = root.join("images").join(format!("{id}.png"));
    let ann_path = root.join("annotations").join(format!("{id}.txt"));
    let native = read_image(&image_path)?;
    let native_size = native.size();
    let landmarks = read_annotation(&ann_path)?;
    if let Some((i, p)) = landmarks.iter().enumerate().find(|(_, p)| !native_size.contains(**p)) {
        return Err(Error::Annotation {
            path: ann_path,
            reason: format!("landmark {i} at ({}, {}) outside image {native_size}", p.x, p.y),
        });
    }
    let mut pixels = if native_size == target {
        native
    } else {
        resize_bilinear(&native, target)
    };
    normalize_min_max(&mut pixels);
    let sample = ImageSample {
        id: id.to_string(),
        pixels,
        landmarks: rescale_coords(&landmarks, native_size, target)?,
        native_size,
        spacing_mm: (spacing[0], spacing[1]),
    };
    sample.validate()?;
    Ok(sample)
}

pub fn read_meta(root: &Path) -> Result<DatasetMeta> {
    let meta_path = root.join("meta.json");
    if !meta_path.exists() {
        return Err(Error::MissingArtifact {
            path: meta_path,
            producer: "gen-data".into(),
        });
    }
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Annotation {
        path: meta_path,
        reason: e.to_string(),
    })
}

/// Loads a dataset directory, resizing every image to `target`.
pub fn load_dataset(root: &Path, target: Size) -> Result<DatasetSplit> {
    if target.area() == 0 {
        return Err(Error::Config(format!("target size {target} must be positive")));
    }
    let meta = read_meta(root)?;
    let meta_path = root.join("meta.json");
    let load = |id: &String| -> Result<ImageSample> {
        let spacing = *meta.spacing_mm.get(id).ok_or_else(|| Error::Annotation {
            path: meta_path.clone(),
            reason: format!("no spacing_mm entry for `{id}`"),
        })?;
        load_sample(root, id, spacing, target)
    };
    let template = load(&meta.splits.template)?;
    let unlabeled = meta.splits.unlabeled.iter().map(load).collect::<Result<Vec<_>>>()?;
    let test = meta.splits.test.iter().map(load).collect::<Result<Vec<_>>>()?;
    let k = template.landmarks.len();
    for s in unlabeled.iter().chain(&test) {
        if s.landmarks.len() != k {
            return Err(Error::Annotation {
                path: root.join("annotations").join(format!("{}.txt", s.id)),
                reason: format!("{} landmarks, template has {k}", s.landmarks.len()),
            });
        }
    }
    let split = DatasetSplit {
        template,
        unlabeled,
        test,
    };
    split.validate()?;
    Ok(split)
}

fn ensure_dir(path: &Path) -> Result<PathBuf> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

/// Writes a split in the on-disk layout. Each image is stored at its current
/// resolution, which becomes its native size; spacing is adjusted so physical
/// distances are preserved.
pub fn write_dataset(root: &Path, split: &DatasetSplit) -> Result<DatasetMeta> {
    let images = ensure_dir(&root.join("images"))?;
    let annotations = ensure_dir(&root.join("annotations"))?;
    let mut spacing_mm = BTreeMap::new();
    for s in split.all() {
        let size = s.size();
        write_image(&images.join(format!("{}.png", s.id)), &s.pixels)?;
        write_annotation(&annotations.join(format!("{}.txt", s.id)), &s.landmarks)?;
        let sx = s.spacing_mm.0 * s.native_size.width as f64 / size.width as f64;
        let sy = s.spacing_mm.1 * s.native_size.height as f64 / size.height as f64;
        spacing_mm.insert(s.id.clone(), [sx, sy]);
    }
    let meta = DatasetMeta {
        spacing_mm,
        splits: Splits {
            template: split.template.id.clone(),
            unlabeled: split.unlabeled.iter().map(|s| s.id.clone()).collect(),
            test: split.test.iter().map(|s| s.id.clone()).collect(),
        },
    };
    let path = root.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(meta)
}
