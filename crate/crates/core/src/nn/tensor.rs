use crate::grid::{Grid, Size};

/// A single-sample `C×H×W` activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_grid(grid: &Grid<f32>) -> Self {
        Self {
            channels: 1,
            height: grid.height(),
            width: grid.width(),
            data: grid.as_slice().to_vec(),
        }
    }

    pub fn spatial(&self) -> Size {
        Size::hw(self.height, self.width)
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Feature vector across channels at one pixel.
    pub fn pixel(&self, x: usize, y: usize) -> Vec<f32> {
        (0..self.channels).map(|c| self.at(c, y, x)).collect()
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Channel-wise concatenation; spatial sizes must agree.
    pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!((a.height, a.width), (b.height, b.width));
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Tensor {
            channels: a.channels + b.channels,
            height: a.height,
            width: a.width,
            data,
        }
    }

    /// Inverse of [`Tensor::concat`]: splits after `first` channels.
    pub fn split(self, first: usize) -> (Tensor, Tensor) {
        let n = first * self.plane_len();
        let mut data = self.data;
        let rest = data.split_off(n);
        (
            Tensor {
                channels: first,
                height: self.height,
                width: self.width,
                data,
            },
            Tensor {
                channels: self.channels - first,
                height: self.height,
                width: self.width,
                data: rest,
            },
        )
    }
}

pub fn relu_inplace(t: &mut Tensor) {
    for v in &mut t.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Gradient of ReLU given the post-activation output.
pub fn relu_backward(output: &Tensor, grad: &mut Tensor) {
    for (g, o) in grad.data.iter_mut().zip(&output.data) {
        if *o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Nearest-neighbour 2× upsampling cropped to `target` (skip-connection size).
pub fn upsample_nearest(t: &Tensor, target: Size) -> Tensor {
    let mut out = Tensor::zeros(t.channels, target.height, target.width);
    for c in 0..t.channels {
        let src = t.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..target.height {
            let sy = (y / 2).min(t.height - 1);
            for x in 0..target.width {
                let sx = (x / 2).min(t.width - 1);
                dst[y * target.width + x] = src[sy * t.width + sx];
            }
        }
    }
    out
}

pub fn upsample_nearest_backward(grad: &Tensor, source: Size) -> Tensor {
    let mut out = Tensor::zeros(grad.channels, source.height, source.width);
    for c in 0..grad.channels {
        let g = grad.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..grad.height {
            let sy = (y / 2).min(source.height - 1);
            for x in 0..grad.width {
                let sx = (x / 2).min(source.width - 1);
                dst[sy * source.width + sx] += g[y * grad.width + x];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_split_round_trip() {
        let a = Tensor {
            channels: 1,
            height: 1,
            width: 2,
            data: vec![1.0, 2.0],
        };
        let b = Tensor {
            channels: 2,
            height: 1,
            width: 2,
            data: vec![3.0, 4.0, 5.0, 6.0],
        };
        let (x, y) = Tensor::concat(&a, &b).split(1);
        assert_eq!(x, a);
        assert_eq!(y, b);
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let src = Tensor {
            channels: 1,
            height: 2,
            width: 3,
            data: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        };
        let target = Size::hw(3, 5);
        let up = upsample_nearest(&src, target);
        let probe = Tensor {
            channels: 1,
            height: 3,
            width: 5,
            data: (0..15).map(|v| v as f32 * 0.1).collect(),
        };
        let lhs: f32 = up.data.iter().zip(&probe.data).map(|(a, b)| a * b).sum();
        let back = upsample_nearest_backward(&probe, src.spatial());
        let rhs: f32 = src.data.iter().zip(&back.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-5);
    }
}
