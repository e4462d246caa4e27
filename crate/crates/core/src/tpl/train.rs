use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::net::{NetConfig, UNet};
use super::{build_targets, decode_tpl, DetectionTargets};
use crate::augment::{apply_color_jitter, draw_jitter, AugmentConfig};
use crate::error::{Error, Result};
use crate::grid::{Grid, Point, Size};
use crate::nn::{checkpoint, Adam, Module, Tensor};
use crate::rng::{derive_seed, indexed_stream, Rng};

pub const TPL_CHECKPOINT_MAGIC: &str = "cc2dv2-tpl-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TplConfig {
    pub image_size: Size,
    /// Disk radius in input pixels.
    pub radius: f64,
    pub net: NetConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Photometric jitter of training images; `None` trains on raw pixels.
    pub jitter: Option<AugmentConfig>,
}

impl Default for TplConfig {
    fn default() -> Self {
        Self {
            image_size: Size::hw(384, 384),
            radius: 20.0,
            net: NetConfig {
                depth: 4,
                base_width: 32,
                stem: 0,
                num_landmarks: 19,
            },
            epochs: 900,
            batch_size: 8,
            lr: 1e-3,
            jitter: None,
        }
    }
}

impl TplConfig {
    /// Disk radius on the detector's output grid.
    pub fn output_radius(&self) -> f64 {
        self.radius / self.net.stride() as f64
    }

    pub fn output_size(&self) -> Size {
        let s = self.net.stride();
        Size::hw(self.image_size.height.div_ceil(s), self.image_size.width.div_ceil(s))
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if !(self.output_radius() >= 1.0 && self.radius.is_finite()) {
            return Err(Error::Config(format!(
                "radius {} px is below one output pixel at stride {}",
                self.radius,
                self.net.stride()
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if let Some(j) = &self.jitter {
            j.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TplEpoch {
    pub epoch: usize,
    pub total: f64,
    pub heatmap: f64,
    pub offset: f64,
}

pub struct TplOutcome {
    pub detector: Detector,
    pub history: Vec<TplEpoch>,
}

#[derive(Serialize, Deserialize)]
struct DetectorHeader {
    net: NetConfig,
    radius: f64,
    image_size: Size,
}

/// A trained heatmap + offset detector.
#[derive(Clone, Debug)]
pub struct Detector {
    pub net: UNet,
    /// Disk radius in input pixels.
    pub radius: f64,
    pub image_size: Size,
}

impl Detector {
    pub fn new(config: &TplConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::seed_from_u64(derive_seed(seed, "tpl-init", 0));
        Ok(Self {
            net: UNet::new(config.net.clone(), &mut rng)?,
            radius: config.radius,
            image_size: config.image_size,
        })
    }

    fn stride(&self) -> f64 {
        self.net.config().stride() as f64
    }

    /// Landmarks in input pixel coordinates.
    pub fn predict(&self, image: &Grid<f32>) -> Result<Vec<Point>> {
        if image.size() != self.image_size {
            return Err(Error::Shape(format!(
                "detector expects {} images, got {}",
                self.image_size,
                image.size()
            )));
        }
        if image.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("detector input contains NaN or infinity".into()));
        }
        let out = self.net.infer(&Tensor::from_grid(image));
        let s = self.stride();
        Ok(decode_tpl(&out, self.radius / s)
            .into_iter()
            .map(|p| Point::new(p.x * s, p.y * s))
            .collect())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = DetectorHeader {
            net: self.net.config().clone(),
            radius: self.radius,
            image_size: self.image_size,
        };
        checkpoint::encode(TPL_CHECKPOINT_MAGIC, &header, &self.net.state())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, tensors): (DetectorHeader, _) = checkpoint::decode(TPL_CHECKPOINT_MAGIC, bytes)?;
        let mut net = UNet::new(header.net, &mut Rng::seed_from_u64(0))?;
        checkpoint::restore(net.state_mut(), tensors)?;
        Ok(Self {
            net,
            radius: header.radius,
            image_size: header.image_size,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path: path.to_path_buf(),
                producer: "train-tpl".into(),
            });
        }
        Self::from_bytes(&checkpoint::read_file(path)?)
    }
}

fn sigmoid(z: f32) -> f32 {
    1.0 / (1.0 + (-z).exp())
}

/// Heatmap BCE (mean over all heatmap entries) and masked offset L1 (mean
/// over masked entries), with the gradient of `scale · (bce + l1)`.
fn item_loss(out: &Tensor, targets: &DetectionTargets, scale: f64) -> (f64, f64, Tensor) {
    let k = targets.heatmaps.len();
    let plane = out.plane_len();
    let mut grad = Tensor::zeros(out.channels, out.height, out.width);
    let heat_count = (k * plane) as f64;
    let masked = targets.masks.iter().flat_map(|m| m.as_slice()).filter(|m| **m).count();
    let offset_count = (2 * masked).max(1) as f64;
    let (mut bce, mut l1) = (0.0f64, 0.0f64);
    for j in 0..k {
        let heat = out.plane(3 * j);
        let target = targets.heatmaps[j].as_slice();
        let g = grad.plane_mut(3 * j);
        for i in 0..plane {
            let (z, t) = (heat[i] as f64, target[i] as f64);
            // log(1 + e^{-|z|}) + max(z, 0) - z t
            bce += (-z.abs()).exp().ln_1p() + z.max(0.0) - z * t;
            g[i] = ((sigmoid(heat[i]) as f64 - t) * scale / heat_count) as f32;
        }
        let mask = targets.masks[j].as_slice();
        for (c, tgt) in [(1, &targets.offset_x[j]), (2, &targets.offset_y[j])] {
            let pred = out.plane(3 * j + c).to_vec();
            let g = grad.plane_mut(3 * j + c);
            for i in 0..plane {
                if mask[i] {
                    let d = pred[i] as f64 - tgt.as_slice()[i] as f64;
                    l1 += d.abs();
                    g[i] = (d.signum() * scale / offset_count) as f32;
                }
            }
        }
    }
    (bce / heat_count, l1 / offset_count, grad)
}

/// Trains the detector on `images` with `labels` (one landmark list per
/// image, input pixel coordinates). `on_epoch` sees the mean losses after
/// every epoch.
pub fn train_tpl(
    images: &[&Grid<f32>],
    labels: &[Vec<Point>],
    config: &TplConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&TplEpoch),
) -> Result<TplOutcome> {
    config.validate()?;
    if images.len() != labels.len() || images.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{} images with {} label sets",
            images.len(),
            labels.len()
        )));
    }
    let k = config.net.num_landmarks;
    for (i, (img, pts)) in images.iter().zip(labels).enumerate() {
        if img.size() != config.image_size {
            return Err(Error::Shape(format!(
                "training image {i} is {}, configured {}",
                img.size(),
                config.image_size
            )));
        }
        if pts.len() != k {
            return Err(Error::InvalidInput(format!(
                "training image {i} has {} labels, detector predicts {k}",
                pts.len()
            )));
        }
    }
    let stride = config.net.stride() as f64;
    let r_out = config.output_radius();
    let out_size = config.output_size();
    let targets: Vec<DetectionTargets> = labels
        .iter()
        .map(|pts| {
            let scaled: Vec<Point> = pts.iter().map(|p| Point::new(p.x / stride, p.y / stride)).collect();
            build_targets(&scaled, out_size, r_out)
        })
        .collect();

    let mut detector = Detector::new(config, seed)?;
    let mut adam = Adam::default();
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    let mut item_counter = 0u64;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut indexed_stream(seed, "tpl-order", epoch as u64));
        let (mut heat_sum, mut off_sum) = (0.0f64, 0.0f64);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Tensor> = chunk
                .iter()
                .map(|&i| {
                    let mut rng = indexed_stream(seed, "tpl-jitter", item_counter);
                    item_counter += 1;
                    match &config.jitter {
                        Some(cfg) => Tensor::from_grid(&apply_color_jitter(images[i], draw_jitter(&mut rng, cfg))),
                        None => Tensor::from_grid(images[i]),
                    }
                })
                .collect();
            let (outs, trace) = detector.net.forward_train(batch);
            let scale = 1.0 / chunk.len() as f64;
            let mut grads = Vec::with_capacity(chunk.len());
            for (out, &i) in outs.iter().zip(chunk) {
                let (h, o, g) = item_loss(out, &targets[i], scale);
                if !(h.is_finite() && o.is_finite()) {
                    return Err(Error::Diverged {
                        epoch,
                        step,
                        detail: format!("non-finite detector loss on training image {i} (heatmap {h}, offset {o})"),
                    });
                }
                heat_sum += h;
                off_sum += o;
                grads.push(g);
            }
            detector.net.zero_grad();
            detector.net.backward(&trace, grads);
            if !detector.net.grads_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: format!("non-finite detector gradient; batch images {chunk:?}"),
                });
            }
            adam.step(config.lr as f32, detector.net.params_mut());
            step += 1;
        }
        let n = images.len() as f64;
        let record = TplEpoch {
            epoch,
            total: (heat_sum + off_sum) / n,
            heatmap: heat_sum / n,
            offset: off_sum / n,
        };
        on_epoch(&record);
        history.push(record);
    }
    Ok(TplOutcome { detector, history })
}
