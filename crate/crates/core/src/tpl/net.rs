//! Encoder-decoder with skip connections producing `3K` maps at
//! `1 / 2^stem` of the input resolution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{upsample_nearest, upsample_nearest_backward, BlockCache, Conv2d, ConvBlock, ConvCache, Module, Param, Tensor};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Number of resolution levels in the U.
    pub depth: usize,
    pub base_width: usize,
    /// Stride-2 blocks before the U; the output grid is `input / 2^stem`.
    pub stem: usize,
    pub num_landmarks: usize,
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=6).contains(&self.depth) {
            return Err(Error::Config(format!("detector depth must be in 1..=6, got {}", self.depth)));
        }
        if self.base_width == 0 || self.num_landmarks == 0 {
            return Err(Error::Config("detector width and landmark count must be positive".into()));
        }
        if self.stem > 4 {
            return Err(Error::Config(format!("detector stem must be <= 4, got {}", self.stem)));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        1 << self.stem
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }
}

#[derive(Clone, Debug)]
pub struct UNet {
    config: NetConfig,
    stem: Vec<ConvBlock>,
    down: Vec<[ConvBlock; 2]>,
    /// `up[i]` fuses level `i + 1` into level `i`.
    up: Vec<ConvBlock>,
    head: Conv2d,
}

pub struct NetTrace {
    stem: Vec<BlockCache>,
    down: Vec<[BlockCache; 2]>,
    up: Vec<BlockCache>,
    head: Vec<ConvCache>,
    /// Channel count of the upsampled part of each decoder input.
    up_channels: Vec<usize>,
    /// Spatial size of the coarser input of each decoder block.
    coarse_sizes: Vec<crate::grid::Size>,
}

impl UNet {
    pub fn new(config: NetConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c0 = config.base_width;
        let stem: Vec<ConvBlock> = (0..config.stem)
            .map(|i| ConvBlock::new(if i == 0 { 1 } else { c0 }, c0, 2, rng))
            .collect();
        let mut down = Vec::with_capacity(config.depth);
        let mut prev = if config.stem == 0 { 1 } else { c0 };
        for level in 0..config.depth {
            let w = config.width(level);
            let stride = if level == 0 { 1 } else { 2 };
            down.push([ConvBlock::new(prev, w, stride, rng), ConvBlock::new(w, w, 1, rng)]);
            prev = w;
        }
        let up = (0..config.depth.saturating_sub(1))
            .map(|level| ConvBlock::new(config.width(level + 1) + config.width(level), config.width(level), 1, rng))
            .collect();
        let mut head = Conv2d::new(c0, 3 * config.num_landmarks, 1, 1, rng);
        // Heatmap logits start at a 1% foreground prior; with all-zero logits
        // the early steps only push the background down.
        for k in 0..config.num_landmarks {
            head.bias.value[3 * k] = -(99.0f32).ln();
        }
        Ok(Self {
            config,
            stem,
            down,
            up,
            head,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn infer(&self, input: &Tensor) -> Tensor {
        let mut x = input.clone();
        for block in &self.stem {
            x = block.infer(&x);
        }
        let mut skips = Vec::with_capacity(self.config.depth);
        for [a, b] in &self.down {
            x = b.infer(&a.infer(&x));
            skips.push(x.clone());
        }
        let mut y = skips.pop().expect("depth >= 1");
        for (level, block) in self.up.iter().enumerate().rev() {
            let skip = &skips[level];
            let up = upsample_nearest(&y, skip.spatial());
            y = block.infer(&Tensor::concat(&up, skip));
        }
        self.head.infer(&y)
    }

    pub fn forward_train(&mut self, batch: Vec<Tensor>) -> (Vec<Tensor>, NetTrace) {
        let mut x = batch;
        let mut stem_caches = Vec::with_capacity(self.stem.len());
        for block in &mut self.stem {
            let (y, c) = block.forward(&x);
            stem_caches.push(c);
            x = y;
        }
        let mut down_caches = Vec::with_capacity(self.down.len());
        let mut skips: Vec<Vec<Tensor>> = Vec::with_capacity(self.down.len());
        for [a, b] in &mut self.down {
            let (h, ca) = a.forward(&x);
            let (y, cb) = b.forward(&h);
            down_caches.push([ca, cb]);
            skips.push(y.clone());
            x = y;
        }
        let mut y = skips.pop().expect("depth >= 1");
        let mut up_caches = Vec::with_capacity(self.up.len());
        let mut up_channels = Vec::with_capacity(self.up.len());
        let mut coarse_sizes = Vec::with_capacity(self.up.len());
        for (level, block) in self.up.iter_mut().enumerate().rev() {
            let skip = &skips[level];
            up_channels.push(y[0].channels);
            coarse_sizes.push(y[0].spatial());
            let inputs: Vec<Tensor> = y
                .iter()
                .zip(skip)
                .map(|(t, s)| Tensor::concat(&upsample_nearest(t, s.spatial()), s))
                .collect();
            let (out, c) = block.forward(&inputs);
            up_caches.push(c);
            y = out;
        }
        up_caches.reverse();
        up_channels.reverse();
        coarse_sizes.reverse();
        let (out, head): (Vec<_>, Vec<_>) = y.iter().map(|t| self.head.forward(t)).unzip();
        (
            out,
            NetTrace {
                stem: stem_caches,
                down: down_caches,
                up: up_caches,
                head,
                up_channels,
                coarse_sizes,
            },
        )
    }

    pub fn backward(&mut self, trace: &NetTrace, grads: Vec<Tensor>) {
        let mut g: Vec<Tensor> = grads
            .iter()
            .zip(&trace.head)
            .map(|(dy, c)| self.head.backward(c, dy, true).expect("input grad"))
            .collect();
        // Gradients flowing into each encoder level's output through skips.
        let mut skip_grads: Vec<Option<Vec<Tensor>>> = vec![None; self.down.len()];
        for level in 0..self.up.len() {
            let dx = self.up[level].backward(&trace.up[level], g, true);
            let mut to_coarse = Vec::with_capacity(dx.len());
            let mut to_skip = Vec::with_capacity(dx.len());
            for t in dx {
                let (u, s) = t.split(trace.up_channels[level]);
                to_coarse.push(upsample_nearest_backward(&u, trace.coarse_sizes[level]));
                to_skip.push(s);
            }
            skip_grads[level] = Some(to_skip);
            g = to_coarse;
        }
        for level in (0..self.down.len()).rev() {
            if let Some(extra) = skip_grads[level].take() {
                for (a, b) in g.iter_mut().zip(&extra) {
                    a.add_assign(b);
                }
            }
            let [ca, cb] = &trace.down[level];
            let [a, b] = &mut self.down[level];
            g = b.backward(cb, g, true);
            let need = level > 0 || !self.stem.is_empty();
            g = a.backward(ca, g, need);
        }
        for (i, block) in self.stem.iter_mut().enumerate().rev() {
            g = block.backward(&trace.stem[i], g, i > 0);
        }
    }
}

impl Module for UNet {
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for b in &mut self.stem {
            out.extend(b.params_mut());
        }
        for [a, b] in &mut self.down {
            out.extend(a.params_mut());
            out.extend(b.params_mut());
        }
        for b in &mut self.up {
            out.extend(b.params_mut());
        }
        out.extend(self.head.params_mut());
        out
    }

    fn state(&self) -> Vec<&[f32]> {
        let mut out = Vec::new();
        for b in &self.stem {
            out.extend(b.state());
        }
        for [a, b] in &self.down {
            out.extend(a.state());
            out.extend(b.state());
        }
        for b in &self.up {
            out.extend(b.state());
        }
        out.extend(self.head.params().map(|p| p.value.as_slice()));
        out
    }

    fn state_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out = Vec::new();
        for b in &mut self.stem {
            out.extend(b.state_mut());
        }
        for [a, b] in &mut self.down {
            out.extend(a.state_mut());
            out.extend(b.state_mut());
        }
        for b in &mut self.up {
            out.extend(b.state_mut());
        }
        out.extend(self.head.params_mut().map(|p| p.value.as_mut_slice()));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn input(seed: usize) -> Tensor {
        Tensor {
            channels: 1,
            height: 11,
            width: 9,
            data: (0..99).map(|i| (((i + seed * 13) * 7) % 17) as f32 / 16.0).collect(),
        }
    }

    #[test]
    fn output_grid_follows_the_stem() {
        let cfg = NetConfig {
            depth: 3,
            base_width: 2,
            stem: 1,
            num_landmarks: 2,
        };
        let net = UNet::new(cfg, &mut Rng::seed_from_u64(0)).unwrap();
        let out = net.infer(&input(0));
        assert_eq!((out.channels, out.height, out.width), (6, 6, 5));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let cfg = NetConfig {
            depth: 3,
            base_width: 2,
            stem: 1,
            num_landmarks: 1,
        };
        let net = UNet::new(cfg, &mut Rng::seed_from_u64(4)).unwrap();
        let batch = vec![input(0), input(1)];
        let probe = |b: usize, j: usize| ((b * 29 + j * 11) as f32 * 0.41).sin();
        let objective = |net: &UNet| -> f64 {
            let (out, _) = net.clone().forward_train(batch.clone());
            out.iter()
                .enumerate()
                .flat_map(|(b, t)| t.data.iter().enumerate().map(move |(j, v)| (*v * probe(b, j)) as f64))
                .sum()
        };
        let mut trained = net.clone();
        let (out, trace) = trained.forward_train(batch.clone());
        let grads = out
            .iter()
            .enumerate()
            .map(|(b, t)| {
                let mut g = t.clone();
                for (j, v) in g.data.iter_mut().enumerate() {
                    *v = probe(b, j);
                }
                g
            })
            .collect();
        trained.zero_grad();
        trained.backward(&trace, grads);
        let analytic: Vec<Vec<f32>> = trained.params_mut().iter().map(|p| p.grad.clone()).collect();
        let h = 1e-3f32;
        for (pi, grad) in analytic.iter().enumerate() {
            for j in [0, grad.len() / 2, grad.len() - 1] {
                let mut plus = net.clone();
                plus.params_mut()[pi].value[j] += h;
                let mut minus = net.clone();
                minus.params_mut()[pi].value[j] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h as f64);
                let a = grad[j] as f64;
                assert!((fd - a).abs() <= 2e-2 * (1.0 + a.abs()), "param {pi}[{j}]: fd {fd} vs {a}");
            }
        }
    }
}
