//! Minimal CPU neural-network layers with hand-written backward passes.
//!
//! Only what the encoders and the detector need: 2-D convolution, batch
//! normalization, ReLU, nearest upsampling and Adam. Activations are `f32`;
//! reductions accumulate in `f64`.

pub mod checkpoint;
mod conv;
mod norm;
mod tensor;

pub use conv::{Conv2d, ConvCache};
pub use norm::{BatchNorm2d, NormCache};
pub use tensor::{relu_backward, relu_inplace, upsample_nearest, upsample_nearest_backward, Tensor};

use crate::rng::Rng;

/// A trainable tensor with its gradient and Adam moments.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    m: Vec<f32>,
    v: Vec<f32>,
}

impl Param {
    pub fn new(value: Vec<f32>) -> Self {
        let n = value.len();
        Self {
            value,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Anything holding parameters and persistent buffers.
pub trait Module {
    fn params_mut(&mut self) -> Vec<&mut Param>;

    /// Parameters followed by buffers, in a fixed order (checkpoint layout).
    fn state(&self) -> Vec<&[f32]>;

    fn state_mut(&mut self) -> Vec<&mut [f32]>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn grads_finite(&mut self) -> bool {
        self.params_mut()
            .iter()
            .all(|p| p.grad.iter().all(|g| g.is_finite()))
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: i32,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
        }
    }
}

impl Adam {
    pub fn step(&mut self, lr: f32, params: Vec<&mut Param>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for p in params {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                p.m[i] = self.beta1 * p.m[i] + (1.0 - self.beta1) * g;
                p.v[i] = self.beta2 * p.v[i] + (1.0 - self.beta2) * g * g;
                let mhat = p.m[i] / bc1;
                let vhat = p.v[i] / bc2;
                p.value[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Convolution → batch norm → ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub norm: BatchNorm2d,
}

#[derive(Clone, Debug)]
pub struct BlockCache {
    conv: Vec<ConvCache>,
    norm: NormCache,
    outputs: Vec<Tensor>,
}

impl ConvBlock {
    pub fn new(in_channels: usize, out_channels: usize, stride: usize, rng: &mut Rng) -> Self {
        Self {
            conv: Conv2d::new(in_channels, out_channels, 3, stride, rng),
            norm: BatchNorm2d::new(out_channels),
        }
    }

    pub fn forward(&mut self, batch: &[Tensor]) -> (Vec<Tensor>, BlockCache) {
        let (pre, conv): (Vec<_>, Vec<_>) = batch.iter().map(|x| self.conv.forward(x)).unzip();
        let (mut outputs, norm) = self.norm.forward(pre);
        outputs.iter_mut().for_each(relu_inplace);
        let cache = BlockCache {
            conv,
            norm,
            outputs: outputs.clone(),
        };
        (outputs, cache)
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        let mut y = self.norm.infer(&self.conv.infer(x));
        relu_inplace(&mut y);
        y
    }

    pub fn backward(&mut self, cache: &BlockCache, mut grads: Vec<Tensor>, need_input_grad: bool) -> Vec<Tensor> {
        for (g, o) in grads.iter_mut().zip(&cache.outputs) {
            relu_backward(o, g);
        }
        let grads = self.norm.backward(&cache.norm, grads);
        grads
            .iter()
            .zip(&cache.conv)
            .filter_map(|(g, c)| self.conv.backward(c, g, need_input_grad))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let [w, b] = self.conv.params_mut();
        vec![w, b, &mut self.norm.gamma, &mut self.norm.beta]
    }

    pub fn state(&self) -> Vec<&[f32]> {
        vec![
            &self.conv.weight.value,
            &self.conv.bias.value,
            &self.norm.gamma.value,
            &self.norm.beta.value,
            &self.norm.running_mean,
            &self.norm.running_var,
        ]
    }

    pub fn state_mut(&mut self) -> Vec<&mut [f32]> {
        vec![
            &mut self.conv.weight.value,
            &mut self.conv.bias.value,
            &mut self.norm.gamma.value,
            &mut self.norm.beta.value,
            &mut self.norm.running_mean,
            &mut self.norm.running_var,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_moves_against_gradient() {
        let mut p = Param::new(vec![1.0, -1.0]);
        p.grad = vec![0.5, -0.5];
        let mut adam = Adam::default();
        adam.step(0.1, vec![&mut p]);
        assert!((p.value[0] - 0.9).abs() < 1e-5);
        assert!((p.value[1] + 0.9).abs() < 1e-5);
    }
}
