use serde::{Deserialize, Serialize};

use rand::seq::SliceRandom;

use super::loss::{analytic_gradient, apply_rdb, ce_layer_loss, distance_map, similarity_window, window_origin};
use super::loss::{target_in_window, InterestMatrix, LossConfig};
use crate::augment::{extra_anchors, sample_training_pair, AugmentConfig, PatchSample};
use crate::data::DatasetSplit;
use crate::encoder::{level_coord, EncoderConfig, EncoderPair};
use crate::error::{Error, Result};
use crate::grid::{Grid, Point, Size};
use crate::nn::{Adam, Module, Tensor};
use crate::rng::{derive_seed, indexed_stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SslConfig {
    pub image_size: Size,
    pub patch_size: Size,
    pub loss: LossConfig,
    pub encoder: EncoderConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// The learning rate is multiplied by `lr_decay` every
    /// `lr_decay_fraction · epochs` epochs.
    pub lr_decay: f64,
    pub lr_decay_fraction: f64,
    pub augment: AugmentConfig,
    /// Minimum distance of the sampled point to the patch border; `None`
    /// means a quarter of the patch's shorter side.
    pub margin: Option<usize>,
    /// Anchor points drawn in every augmented patch. The first one is the
    /// point the patch was cropped around; the rest are drawn uniformly in
    /// the same margin-inset region. Losses are averaged over anchors.
    #[serde(default = "one")]
    pub anchors_per_patch: usize,
}

fn one() -> usize {
    1
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            image_size: Size::hw(384, 384),
            patch_size: Size::hw(192, 192),
            loss: LossConfig::default(),
            encoder: EncoderConfig::default(),
            epochs: 5000,
            batch_size: 8,
            lr: 1e-3,
            lr_decay: 0.5,
            lr_decay_fraction: 0.1,
            augment: AugmentConfig::default(),
            margin: None,
            anchors_per_patch: 1,
        }
    }
}

impl SslConfig {
    pub fn margin(&self) -> usize {
        self.margin
            .unwrap_or(self.patch_size.width.min(self.patch_size.height) / 4)
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.encoder.validate()?;
        self.augment.validate()?;
        if self.loss.levels != self.encoder.levels {
            return Err(Error::Config(format!(
                "loss uses {} levels but the encoder has {}",
                self.loss.levels, self.encoder.levels
            )));
        }
        let (m, n) = self.loss.matrix_size;
        let coarsest = self.image_size.halved(self.encoder.levels - 1);
        if m > coarsest.width || n > coarsest.height {
            return Err(Error::Config(format!(
                "interest matrix {m}x{n} (MxN) exceeds the coarsest level {coarsest} of a {} image",
                self.image_size
            )));
        }
        if self.patch_size.width > self.image_size.width || self.patch_size.height > self.image_size.height {
            return Err(Error::Config(format!(
                "patch {} larger than image {}",
                self.patch_size, self.image_size
            )));
        }
        let margin = self.margin();
        if 2 * margin >= self.patch_size.width.min(self.patch_size.height) {
            return Err(Error::Config(format!("margin {margin} too large for patch {}", self.patch_size)));
        }
        if self.anchors_per_patch == 0 {
            return Err(Error::Config("anchors_per_patch must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) || !(self.lr_decay_fraction > 0.0) {
            return Err(Error::Config("lr decay must be in (0, 1] with a positive period".into()));
        }
        Ok(())
    }

    /// Learning rate used during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let period = ((self.epochs as f64 * self.lr_decay_fraction).round() as usize).max(1);
        self.lr * self.lr_decay.powi((epoch / period) as i32)
    }
}

/// Mean losses of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub total: f64,
    pub levels: Vec<f64>,
}

pub struct SslOutcome {
    pub encoders: EncoderPair,
    pub history: Vec<EpochLoss>,
}

/// `epoch,loss_total,loss_level_0,...` with one row per epoch.
pub fn loss_curve_csv(history: &[EpochLoss]) -> String {
    let levels = history.first().map_or(0, |h| h.levels.len());
    let mut out = String::from("epoch,loss_total");
    for i in 0..levels {
        out.push_str(&format!(",loss_level_{i}"));
    }
    out.push('\n');
    for h in history {
        out.push_str(&format!("{},{}", h.epoch, h.total));
        for l in &h.levels {
            out.push_str(&format!(",{l}"));
        }
        out.push('\n');
    }
    out
}

/// Back-propagates `grad_s` (gradient of the loss with respect to the cosine
/// similarities in a window) to the anchor vector and the feature map.
/// Window gradients are accumulated into `feature_grad`; the anchor gradient
/// is returned.
pub fn cosine_window_backward(
    anchor: &[f32],
    features: &Tensor,
    origin: (usize, usize),
    grad_s: &Grid<f64>,
    epsilon: f64,
    feature_grad: &mut Tensor,
) -> Vec<f64> {
    let size = grad_s.size();
    let channels = anchor.len();
    let a: Vec<f64> = anchor.iter().map(|v| *v as f64).collect();
    let a_norm = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(epsilon);
    let mut grad_a = vec![0.0f64; channels];
    let mut f = vec![0.0f64; channels];
    for n in 0..size.height {
        for m in 0..size.width {
            let g = grad_s.get(m, n);
            if g == 0.0 {
                continue;
            }
            let (x, y) = (origin.0 + m, origin.1 + n);
            for (c, fv) in f.iter_mut().enumerate() {
                *fv = features.at(c, y, x) as f64;
            }
            let f_norm = f.iter().map(|v| v * v).sum::<f64>().sqrt().max(epsilon);
            let dot: f64 = a.iter().zip(&f).map(|(p, q)| p * q).sum();
            let denom = a_norm * f_norm;
            let s = dot / denom;
            let plane = features.plane_len();
            let idx = y * features.width + x;
            for c in 0..channels {
                grad_a[c] += g * (f[c] / denom - s * a[c] / (a_norm * a_norm));
                let df = g * (a[c] / denom - s * f[c] / (f_norm * f_norm));
                feature_grad.data[c * plane + idx] += df as f32;
            }
        }
    }
    grad_a
}

/// Loss terms and gradients of one training item.
struct ItemResult {
    level_losses: Vec<f64>,
    reference_grads: Vec<Tensor>,
    patch_grads: Vec<Tensor>,
}

fn item_loss(
    config: &SslConfig,
    reference: &[Tensor],
    patch: &[Tensor],
    points: &[(Point, Point)],
    scale: f64,
) -> Result<ItemResult> {
    let loss_cfg = &config.loss;
    let (m, n) = loss_cfg.matrix_size;
    let mut level_losses = vec![0.0; reference.len()];
    let mut reference_grads: Vec<Tensor> = reference.iter().map(|f| Tensor::zeros(f.channels, f.height, f.width)).collect();
    let mut patch_grads: Vec<Tensor> = patch.iter().map(|f| Tensor::zeros(f.channels, f.height, f.width)).collect();
    let share = 1.0 / points.len() as f64;
    for &(source, anchor) in points {
        for (level, (fr, fp)) in reference.iter().zip(patch).enumerate() {
            let (ax, ay) = level_coord(anchor, level);
            let (ax, ay) = (ax.min(fp.width - 1), ay.min(fp.height - 1));
            let anchor_vec = fp.pixel(ax, ay);
            let center = level_coord(source, level);
            let center = (center.0.min(fr.width - 1), center.1.min(fr.height - 1));
            let grid = fr.spatial();
            let origin = window_origin(center, (m, n), grid)?;
            let values = similarity_window(&anchor_vec, fr, origin, Size::hw(n, m), loss_cfg.epsilon)?;
            let interest = InterestMatrix {
                values,
                target: target_in_window(center, origin, grid)?,
                level,
                window_origin: origin,
            };
            let biased = apply_rdb(&interest, &distance_map(interest.target, (m, n)), loss_cfg)?;
            let (loss, _) = ce_layer_loss(&biased, loss_cfg.tau)?;
            let grad_s = analytic_gradient(&biased, loss_cfg.tau)?.map(|g| g * scale * share);
            let ga = cosine_window_backward(&anchor_vec, fr, origin, &grad_s, loss_cfg.epsilon, &mut reference_grads[level]);
            let gp = &mut patch_grads[level];
            let plane = gp.plane_len();
            for (c, g) in ga.iter().enumerate() {
                gp.data[c * plane + ay * fp.width + ax] += *g as f32;
            }
            level_losses[level] += loss * share;
        }
    }
    Ok(ItemResult {
        level_losses,
        reference_grads,
        patch_grads,
    })
}

fn describe_batch(ids: &[&str], pairs: &[(Point, PatchSample)], losses: &[Vec<f64>]) -> String {
    let items: Vec<serde_json::Value> = ids
        .iter()
        .zip(pairs)
        .enumerate()
        .map(|(i, (id, (source, ps)))| {
            serde_json::json!({
                "image": id,
                "source_point": [source.x, source.y],
                "anchor": [ps.anchor.x, ps.anchor.y],
                "transform": ps.transform,
                "level_losses": losses.get(i),
            })
        })
        .collect();
    serde_json::Value::Array(items).to_string()
}

/// Trains `E_r` and `E_p` on the template and unlabeled images. Landmark
/// annotations of the unlabeled images are never read. `on_epoch` sees the
/// mean losses after every epoch.
pub fn train_ssl(
    dataset: &DatasetSplit,
    config: &SslConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLoss),
) -> Result<SslOutcome> {
    config.validate()?;
    let samples: Vec<_> = std::iter::once(&dataset.template).chain(&dataset.unlabeled).collect();
    for s in &samples {
        if s.size() != config.image_size {
            return Err(Error::Shape(format!(
                "{} is {}, configured image size is {}",
                s.id,
                s.size(),
                config.image_size
            )));
        }
    }
    let mut encoders = EncoderPair::new(&config.encoder, config.patch_size, derive_seed(seed, "init", 0))?;
    let mut adam_r = Adam::default();
    let mut adam_p = Adam::default();
    let levels = config.encoder.levels;
    let margin = config.margin();
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    let mut item_counter = 0u64;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut indexed_stream(seed, "ssl-order", epoch as u64));
        let lr = config.lr_at(epoch) as f32;
        let mut sum_levels = vec![0.0f64; levels];
        let mut items = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let mut extras = Vec::with_capacity(chunk.len());
            let pairs = chunk
                .iter()
                .map(|&i| {
                    let mut rng = indexed_stream(seed, "augment", item_counter);
                    item_counter += 1;
                    let pair =
                        sample_training_pair(&samples[i].pixels, &mut rng, config.patch_size, margin, &config.augment)?;
                    let mut points = vec![(pair.0, pair.1.anchor)];
                    points.extend(extra_anchors(&pair.1.transform, &mut rng, margin, config.anchors_per_patch - 1));
                    extras.push(points);
                    Ok(pair)
                })
                .collect::<Result<Vec<_>>>()?;
            let images: Vec<Grid<f32>> = chunk.iter().map(|&i| samples[i].pixels.clone()).collect();
            let patches: Vec<Grid<f32>> = pairs.iter().map(|(_, p)| p.patch.clone()).collect();
            let (ref_pyr, ref_trace) = encoders.reference.forward_train(&images)?;
            let (patch_pyr, patch_trace) = encoders.patch.forward_train(&patches)?;
            let scale = 1.0 / chunk.len() as f64;
            let mut ref_grads: Vec<Vec<Tensor>> = vec![Vec::with_capacity(chunk.len()); levels];
            let mut patch_grads: Vec<Vec<Tensor>> = vec![Vec::with_capacity(chunk.len()); levels];
            let mut batch_losses = Vec::with_capacity(chunk.len());
            let ids: Vec<&str> = chunk.iter().map(|&i| samples[i].id.as_str()).collect();
            for (b, points) in extras.iter().enumerate() {
                let r = item_loss(config, &ref_pyr[b].levels, &patch_pyr[b].levels, points, scale)
                    .map_err(|e| Error::Diverged {
                        epoch,
                        step,
                        detail: format!("{e}; batch: {}", describe_batch(&ids, &pairs, &batch_losses)),
                    })?;
                for (l, (gr, gp)) in r.reference_grads.into_iter().zip(r.patch_grads).enumerate() {
                    ref_grads[l].push(gr);
                    patch_grads[l].push(gp);
                }
                batch_losses.push(r.level_losses);
            }
            let total: f64 = batch_losses.iter().flatten().sum();
            if !total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: format!("non-finite loss; batch: {}", describe_batch(&ids, &pairs, &batch_losses)),
                });
            }
            encoders.reference.zero_grad();
            encoders.patch.zero_grad();
            encoders.reference.backward(&ref_trace, ref_grads);
            encoders.patch.backward(&patch_trace, patch_grads);
            if !encoders.reference.grads_finite() || !encoders.patch.grads_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: format!(
                        "non-finite parameter gradient; batch: {}",
                        describe_batch(&ids, &pairs, &batch_losses)
                    ),
                });
            }
            adam_r.step(lr, encoders.reference.params_mut());
            adam_p.step(lr, encoders.patch.params_mut());
            for l in &batch_losses {
                for (acc, v) in sum_levels.iter_mut().zip(l) {
                    *acc += v;
                }
            }
            items += chunk.len();
            step += 1;
        }
        let levels_mean: Vec<f64> = sum_levels.iter().map(|s| s / items.max(1) as f64).collect();
        let entry = EpochLoss {
            epoch,
            total: levels_mean.iter().sum(),
            levels: levels_mean,
        };
        on_epoch(&entry);
        history.push(entry);
    }
    Ok(SslOutcome { encoders, history })
}
