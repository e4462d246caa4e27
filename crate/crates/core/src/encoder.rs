//! Cascade feature extractors.
//!
//! Each encoder is a convolutional trunk of `L` stages. Stage 0 keeps the
//! input resolution, every later stage halves it (ceil) with a stride-2
//! convolution. A 1×1 head projects every stage to a common embedding width.
//! The embeddings are then merged top-down: level `i` is its own projection
//! plus the nearest-upsampled level `i + 1`, so fine levels carry the context
//! of the coarse ones.

use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Point, Size};
use crate::nn::{checkpoint, upsample_nearest, upsample_nearest_backward, BlockCache, Conv2d, ConvBlock, ConvCache, Module, Param, Tensor};
use crate::rng::{derive_seed, Rng};

pub const SSL_CHECKPOINT_MAGIC: &str = "cc2dv2-ssl-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub levels: usize,
    /// Trunk width per stage; must have `levels` entries.
    pub widths: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            levels: 5,
            widths: vec![32, 64, 128, 128, 128],
            embed_dim: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=8).contains(&self.levels) {
            return Err(Error::Config(format!("levels must be in 1..=8, got {}", self.levels)));
        }
        if self.widths.len() != self.levels {
            return Err(Error::Config(format!(
                "encoder widths has {} entries for {} levels",
                self.widths.len(),
                self.levels
            )));
        }
        if self.widths.contains(&0) || self.embed_dim == 0 {
            return Err(Error::Config("encoder widths and embed_dim must be positive".into()));
        }
        Ok(())
    }
}

fn merge_top_down(levels: &mut [Tensor]) {
    for level in (0..levels.len().saturating_sub(1)).rev() {
        let up = upsample_nearest(&levels[level + 1], levels[level].spatial());
        levels[level].add_assign(&up);
    }
}

/// Per-level feature maps `F^i`, level `i` of size `ceil(H/2^i) × ceil(W/2^i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
    pub input: Size,
}

impl FeaturePyramid {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }
}

/// Anchor vectors `f_a^i` and their level coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorFeatures {
    pub vectors: Vec<Vec<f32>>,
    pub coords: Vec<(usize, usize)>,
}

/// Level-`i` coordinate of a point: `floor(p / 2^i)` per axis.
pub fn level_coord(p: Point, level: usize) -> (usize, usize) {
    let div = (1u64 << level) as f64;
    ((p.x / div).floor() as usize, (p.y / div).floor() as usize)
}

/// Reads the anchor feature vectors of `anchor` from every pyramid level.
pub fn extract_anchor(pyramid: &FeaturePyramid, anchor: Point) -> Result<AnchorFeatures> {
    if !pyramid.input.contains(anchor) {
        return Err(Error::OutOfBounds(format!(
            "anchor ({}, {}) outside patch {}",
            anchor.x, anchor.y, pyramid.input
        )));
    }
    let mut vectors = Vec::with_capacity(pyramid.levels.len());
    let mut coords = Vec::with_capacity(pyramid.levels.len());
    for (i, level) in pyramid.levels.iter().enumerate() {
        let (x, y) = level_coord(anchor, i);
        let (x, y) = (x.min(level.width - 1), y.min(level.height - 1));
        vectors.push(level.pixel(x, y));
        coords.push((x, y));
    }
    Ok(AnchorFeatures { vectors, coords })
}

#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    stages: Vec<Vec<ConvBlock>>,
    heads: Vec<Conv2d>,
}

/// Caches of one training forward pass.
pub struct EncoderTrace {
    stages: Vec<Vec<BlockCache>>,
    heads: Vec<Vec<ConvCache>>,
    batch: usize,
}

impl Encoder {
    pub fn new(config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(config.levels);
        let mut heads = Vec::with_capacity(config.levels);
        let mut prev = 1;
        for (i, &width) in config.widths.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            stages.push(vec![
                ConvBlock::new(prev, width, stride, rng),
                ConvBlock::new(width, width, 1, rng),
            ]);
            heads.push(Conv2d::new(width, config.embed_dim, 1, 1, rng));
            prev = width;
        }
        Ok(Self { config, stages, heads })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    fn check_input(image: &Grid<f32>) -> Result<()> {
        if image.width() == 0 || image.height() == 0 {
            return Err(Error::InvalidInput("empty image".into()));
        }
        if image.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoder input contains NaN or infinity".into()));
        }
        Ok(())
    }

    /// Inference-mode embedding (running normalization statistics).
    pub fn embed(&self, image: &Grid<f32>) -> Result<FeaturePyramid> {
        Self::check_input(image)?;
        let mut x = Tensor::from_grid(image);
        let mut levels = Vec::with_capacity(self.config.levels);
        for (stage, head) in self.stages.iter().zip(&self.heads) {
            for block in stage {
                x = block.infer(&x);
            }
            levels.push(head.infer(&x));
        }
        merge_top_down(&mut levels);
        Ok(FeaturePyramid {
            levels,
            input: image.size(),
        })
    }

    /// Training-mode forward over a batch of equally sized images.
    pub fn forward_train(&mut self, batch: &[Grid<f32>]) -> Result<(Vec<FeaturePyramid>, EncoderTrace)> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        for image in batch {
            Self::check_input(image)?;
        }
        let mut x: Vec<Tensor> = batch.iter().map(Tensor::from_grid).collect();
        let mut stage_caches = Vec::with_capacity(self.config.levels);
        let mut head_caches = Vec::with_capacity(self.config.levels);
        let mut per_level: Vec<Vec<Tensor>> = Vec::with_capacity(self.config.levels);
        for (stage, head) in self.stages.iter_mut().zip(&self.heads) {
            let mut caches = Vec::with_capacity(stage.len());
            for block in stage.iter_mut() {
                let (y, cache) = block.forward(&x);
                caches.push(cache);
                x = y;
            }
            stage_caches.push(caches);
            let (outs, hc): (Vec<_>, Vec<_>) = x.iter().map(|t| head.forward(t)).unzip();
            head_caches.push(hc);
            per_level.push(outs);
        }
        for b in 0..batch.len() {
            for level in (0..per_level.len() - 1).rev() {
                let up = upsample_nearest(&per_level[level + 1][b], per_level[level][b].spatial());
                per_level[level][b].add_assign(&up);
            }
        }
        let mut pyramids: Vec<FeaturePyramid> = batch
            .iter()
            .map(|g| FeaturePyramid {
                levels: Vec::with_capacity(self.config.levels),
                input: g.size(),
            })
            .collect();
        for level in per_level {
            for (p, t) in pyramids.iter_mut().zip(level) {
                p.levels.push(t);
            }
        }
        Ok((
            pyramids,
            EncoderTrace {
                stages: stage_caches,
                heads: head_caches,
                batch: batch.len(),
            },
        ))
    }

    /// Back-propagates per-level feature gradients (`grads[level][sample]`),
    /// accumulating into parameter gradients.
    pub fn backward(&mut self, trace: &EncoderTrace, grads: Vec<Vec<Tensor>>) {
        assert_eq!(grads.len(), self.config.levels);
        let mut grads = grads;
        for level in 1..grads.len() {
            let (fine, coarse) = grads.split_at_mut(level);
            for (g, dy) in coarse[0].iter_mut().zip(&fine[level - 1]) {
                g.add_assign(&upsample_nearest_backward(dy, g.spatial()));
            }
        }
        let mut carry: Option<Vec<Tensor>> = None;
        for (level, level_grads) in grads.into_iter().enumerate().rev() {
            assert_eq!(level_grads.len(), trace.batch);
            let head = &mut self.heads[level];
            let mut g: Vec<Tensor> = level_grads
                .iter()
                .zip(&trace.heads[level])
                .map(|(dy, cache)| head.backward(cache, dy, true).expect("input grad requested"))
                .collect();
            if let Some(c) = carry.take() {
                for (a, b) in g.iter_mut().zip(&c) {
                    a.add_assign(b);
                }
            }
            let stage = &mut self.stages[level];
            for (b, block) in stage.iter_mut().enumerate().rev() {
                let need_input = !(level == 0 && b == 0);
                g = block.backward(&trace.stages[level][b], g, need_input);
            }
            if level > 0 {
                carry = Some(g);
            }
        }
    }
}

impl Module for Encoder {
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for (stage, head) in self.stages.iter_mut().zip(self.heads.iter_mut()) {
            for block in stage {
                out.extend(block.params_mut());
            }
            out.extend(head.params_mut());
        }
        out
    }

    fn state(&self) -> Vec<&[f32]> {
        let mut out = Vec::new();
        for (stage, head) in self.stages.iter().zip(&self.heads) {
            for block in stage {
                out.extend(block.state());
            }
            out.extend(head.params().map(|p| p.value.as_slice()));
        }
        out
    }

    fn state_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out = Vec::new();
        for (stage, head) in self.stages.iter_mut().zip(self.heads.iter_mut()) {
            for block in stage {
                out.extend(block.state_mut());
            }
            out.extend(head.params_mut().map(|p| p.value.as_mut_slice()));
        }
        out
    }
}

/// The reference-image encoder `E_r` and the patch encoder `E_p`, with
/// identical architecture and independent parameters.
#[derive(Clone, Debug)]
pub struct EncoderPair {
    pub reference: Encoder,
    pub patch: Encoder,
    pub patch_size: Size,
}

#[derive(Serialize, Deserialize)]
struct PairHeader {
    encoder: EncoderConfig,
    patch_size: Size,
}

impl EncoderPair {
    pub fn new(config: &EncoderConfig, patch_size: Size, seed: u64) -> Result<Self> {
        let mut r = Rng::seed_from_u64(derive_seed(seed, "encoder-reference", 0));
        let mut p = Rng::seed_from_u64(derive_seed(seed, "encoder-patch", 0));
        Ok(Self {
            reference: Encoder::new(config.clone(), &mut r)?,
            patch: Encoder::new(config.clone(), &mut p)?,
            patch_size,
        })
    }

    pub fn levels(&self) -> usize {
        self.reference.config.levels
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = PairHeader {
            encoder: self.reference.config.clone(),
            patch_size: self.patch_size,
        };
        let mut tensors = self.reference.state();
        tensors.extend(self.patch.state());
        checkpoint::encode(SSL_CHECKPOINT_MAGIC, &header, &tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, tensors): (PairHeader, _) = checkpoint::decode(SSL_CHECKPOINT_MAGIC, bytes)?;
        let mut pair = Self::new(&header.encoder, header.patch_size, 0)?;
        let mut slots = pair.reference.state_mut();
        slots.extend(pair.patch.state_mut());
        checkpoint::restore(slots, tensors)?;
        Ok(pair)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path: path.to_path_buf(),
                producer: "train-ssl".into(),
            });
        }
        Self::from_bytes(&checkpoint::read_file(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EncoderConfig {
        EncoderConfig {
            levels: 5,
            widths: vec![4, 4, 8, 8, 8],
            embed_dim: 6,
        }
    }

    fn ramp(size: Size, shift: usize) -> Grid<f32> {
        Grid::from_fn(size, |x, y| (((x + shift) * 7 + y * 3) % 11) as f32 / 10.0)
    }

    #[test]
    fn pyramid_follows_halving_chain() {
        let mut rng = Rng::seed_from_u64(1);
        let enc = Encoder::new(small(), &mut rng).unwrap();
        let p = enc.embed(&ramp(Size::hw(192, 192), 0)).unwrap();
        let sizes: Vec<usize> = p.levels.iter().map(|t| t.height).collect();
        assert_eq!(sizes, vec![192, 96, 48, 24, 12]);
        let odd = enc.embed(&ramp(Size::hw(37, 21), 0)).unwrap();
        for (i, t) in odd.levels.iter().enumerate() {
            assert_eq!(t.spatial(), Size::hw(37, 21).halved(i));
            assert_eq!(t.channels, 6);
        }
    }

    #[test]
    fn embedding_is_deterministic_and_input_sensitive() {
        let mut rng = Rng::seed_from_u64(2);
        let enc = Encoder::new(small(), &mut rng).unwrap();
        let a = enc.embed(&ramp(Size::hw(32, 32), 0)).unwrap();
        let b = enc.embed(&ramp(Size::hw(32, 32), 0)).unwrap();
        assert_eq!(a, b);
        let c = enc.embed(&ramp(Size::hw(32, 32), 1)).unwrap();
        let diff = a.levels[0]
            .data
            .iter()
            .zip(&c.levels[0].data)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(diff > 0.0);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut rng = Rng::seed_from_u64(2);
        let enc = Encoder::new(small(), &mut rng).unwrap();
        let mut g = ramp(Size::hw(8, 8), 0);
        g.set(3, 3, f32::NAN);
        assert!(matches!(enc.embed(&g), Err(Error::NonFinite(_))));
    }

    #[test]
    fn anchor_coordinates_floor_divide() {
        assert_eq!(level_coord(Point::new(100.0, 37.0), 3), (12, 4));
        assert_eq!(level_coord(Point::new(0.0, 0.0), 4), (0, 0));
        let mut rng = Rng::seed_from_u64(5);
        let enc = Encoder::new(small(), &mut rng).unwrap();
        let p = enc.embed(&ramp(Size::hw(128, 128), 0)).unwrap();
        let a = extract_anchor(&p, Point::new(100.0, 37.0)).unwrap();
        assert_eq!(a.coords[3], (12, 4));
        assert_eq!(a.vectors[3], p.levels[3].pixel(12, 4));
        let origin = extract_anchor(&p, Point::new(0.0, 0.0)).unwrap();
        assert!(origin.coords.iter().all(|c| *c == (0, 0)));
        assert!(extract_anchor(&p, Point::new(128.0, 3.0)).is_err());
    }

    #[test]
    fn one_step_changes_parameters() {
        let mut rng = Rng::seed_from_u64(9);
        let mut enc = Encoder::new(small(), &mut rng).unwrap();
        let before: Vec<Vec<f32>> = enc.state().iter().map(|s| s.to_vec()).collect();
        let batch = vec![ramp(Size::hw(16, 16), 0), ramp(Size::hw(16, 16), 3)];
        let (pyr, trace) = enc.forward_train(&batch).unwrap();
        let grads: Vec<Vec<Tensor>> = (0..5)
            .map(|l| {
                pyr.iter()
                    .map(|p| {
                        let mut t = p.levels[l].clone();
                        t.data.iter_mut().for_each(|v| *v = 1.0);
                        t
                    })
                    .collect()
            })
            .collect();
        enc.backward(&trace, grads);
        crate::nn::Adam::default().step(1e-2, enc.params_mut());
        let after: Vec<Vec<f32>> = enc.state().iter().map(|s| s.to_vec()).collect();
        assert_ne!(before, after);
    }

    #[test]
    fn checkpoint_round_trip() {
        let pair = EncoderPair::new(&small(), Size::hw(32, 32), 4).unwrap();
        let restored = EncoderPair::from_bytes(&pair.to_bytes().unwrap()).unwrap();
        assert_eq!(pair.reference.state(), restored.reference.state());
        assert_eq!(pair.patch.state(), restored.patch.state());
        assert_eq!(restored.patch_size, Size::hw(32, 32));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let cfg = EncoderConfig {
            levels: 3,
            widths: vec![2, 3, 3],
            embed_dim: 2,
        };
        let mut rng = Rng::seed_from_u64(9);
        let enc = Encoder::new(cfg, &mut rng).unwrap();
        let batch: Vec<Grid<f32>> = (0..2).map(|i| ramp(Size::hw(7, 6), i)).collect();
        let probe = |l: usize, b: usize, j: usize| ((l * 31 + b * 17 + j * 7) as f32 * 0.37).sin();
        let objective = |enc: &Encoder| -> f64 {
            let (pyr, _) = enc.clone().forward_train(&batch).unwrap();
            let mut total = 0.0f64;
            for (b, p) in pyr.iter().enumerate() {
                for (l, t) in p.levels.iter().enumerate() {
                    for (j, v) in t.data.iter().enumerate() {
                        total += (*v * probe(l, b, j)) as f64;
                    }
                }
            }
            total
        };
        let mut trained = enc.clone();
        let (pyr, trace) = trained.forward_train(&batch).unwrap();
        let grads: Vec<Vec<Tensor>> = (0..3)
            .map(|l| {
                (0..2)
                    .map(|b| {
                        let mut t = pyr[b].levels[l].clone();
                        for (j, v) in t.data.iter_mut().enumerate() {
                            *v = probe(l, b, j);
                        }
                        t
                    })
                    .collect()
            })
            .collect();
        trained.zero_grad();
        trained.backward(&trace, grads);
        let analytic: Vec<Vec<f32>> = trained.params_mut().iter().map(|p| p.grad.clone()).collect();
        let h = 1e-3f32;
        let n_params = analytic.len();
        let mut checked = 0;
        for pi in 0..n_params {
            let len = analytic[pi].len();
            for j in [0, len / 2, len - 1] {
                let mut plus = enc.clone();
                plus.params_mut()[pi].value[j] += h;
                let mut minus = enc.clone();
                minus.params_mut()[pi].value[j] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h as f64);
                let a = analytic[pi][j] as f64;
                assert!((fd - a).abs() <= 2e-2 * (1.0 + a.abs()), "param {pi}[{j}]: fd {fd} vs {a}");
                checked += 1;
            }
        }
        assert!(checked > 20);
    }
}
