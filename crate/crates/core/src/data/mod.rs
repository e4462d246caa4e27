//! Annotated samples, dataset splits and coordinate transforms.

mod io;
mod synth;

pub use io::{load_dataset, read_annotation, read_meta, write_annotation, write_dataset, DatasetMeta, Splits};
pub use synth::{generate_synthetic, SynthConfig};

use crate::error::{Error, Result};
use crate::grid::{Grid, Point, Size};

/// A grayscale image in resized space with its landmarks.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    /// Intensities in `[0, 1]`.
    pub pixels: Grid<f32>,
    /// Landmarks in resized-space pixel coordinates.
    pub landmarks: Vec<Point>,
    pub native_size: Size,
    /// Millimeters per native pixel, `(sx, sy)`.
    pub spacing_mm: (f64, f64),
}

impl ImageSample {
    pub fn size(&self) -> Size {
        self.pixels.size()
    }

    /// Landmarks mapped back to native pixel coordinates.
    pub fn native_landmarks(&self) -> Result<Vec<Point>> {
        rescale_coords(&self.landmarks, self.size(), self.native_size)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.spacing_mm.0 > 0.0 && self.spacing_mm.1 > 0.0) {
            return Err(Error::InvalidInput(format!(
                "{}: spacing must be positive, got {:?}",
                self.id, self.spacing_mm
            )));
        }
        let size = self.size();
        if let Some((i, p)) = self.landmarks.iter().enumerate().find(|(_, p)| !size.contains(**p)) {
            return Err(Error::OutOfBounds(format!(
                "{}: landmark {i} at ({}, {}) outside {size}",
                self.id, p.x, p.y
            )));
        }
        Ok(())
    }
}

/// One labeled template plus unlabeled training images and a test set.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub template: ImageSample,
    /// Landmarks here are ground truth for evaluation only; training code
    /// never reads them.
    pub unlabeled: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
}

impl DatasetSplit {
    pub fn num_landmarks(&self) -> usize {
        self.template.landmarks.len()
    }

    pub fn all(&self) -> impl Iterator<Item = &ImageSample> {
        std::iter::once(&self.template)
            .chain(&self.unlabeled)
            .chain(&self.test)
    }

    /// Images available to self-supervised training: template + unlabeled.
    pub fn training_images(&self) -> Vec<&Grid<f32>> {
        std::iter::once(&self.template)
            .chain(&self.unlabeled)
            .map(|s| &s.pixels)
            .collect()
    }

    pub fn find(&self, id: &str) -> Option<&ImageSample> {
        self.all().find(|s| s.id == id)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_landmarks();
        let mut seen = std::collections::HashSet::new();
        for s in self.all() {
            s.validate()?;
            if s.landmarks.len() != k {
                return Err(Error::InvalidInput(format!(
                    "{} has {} landmarks, template has {k}",
                    s.id,
                    s.landmarks.len()
                )));
            }
            if !seen.insert(s.id.as_str()) {
                return Err(Error::InvalidInput(format!("{} appears in more than one split", s.id)));
            }
        }
        Ok(())
    }
}

/// Per-axis linear rescaling between two image sizes.
pub fn rescale_coords(points: &[Point], from: Size, to: Size) -> Result<Vec<Point>> {
    if from.area() == 0 || to.area() == 0 {
        return Err(Error::InvalidInput(format!("cannot rescale between {from} and {to}")));
    }
    let sx = to.width as f64 / from.width as f64;
    let sy = to.height as f64 / from.height as f64;
    Ok(points.iter().map(|p| Point::new(p.x * sx, p.y * sy)).collect())
}
