use rand::Rng as _;
use rand_distr::StandardNormal;

use super::tensor::Tensor;
use super::Param;
use crate::rng::Rng;

/// Square-kernel 2-D convolution with zero padding `kernel / 2`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// `out × (in·k·k)` row-major.
    pub weight: Param,
    pub bias: Param,
}

/// Input kept from the forward pass; im2col columns are recomputed per
/// row tile during the backward pass.
#[derive(Clone, Debug)]
pub struct ConvCache {
    input: Tensor,
}

/// Target size of one im2col tile in floats (fits in L2).
const TILE_FLOATS: usize = 32 * 1024;

impl Conv2d {
    /// He-normal initialised convolution.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, rng: &mut Rng) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let weight = (0..out_channels * fan_in)
            .map(|_| (rng.sample::<f64, _>(StandardNormal) * std) as f32)
            .collect();
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            weight: Param::new(weight),
            bias: Param::new(vec![0.0; out_channels]),
        }
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.pad();
        (
            (h + 2 * p - self.kernel) / self.stride + 1,
            (w + 2 * p - self.kernel) / self.stride + 1,
        )
    }

    fn pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    fn rows_per_tile(&self, ow: usize) -> usize {
        (TILE_FLOATS / (self.fan_in() * ow)).max(1)
    }

    /// Valid output-column range `lo..hi` for horizontal tap `kx`, i.e.
    /// `0 <= ox*s + kx - pad < width`.
    fn valid_cols(&self, kx: usize, width: usize, ow: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let pad = self.pad() as isize;
        let lo = ((pad - kx as isize).max(0) as usize).div_ceil(self.stride);
        let hi = ((width as isize - 1 + pad - kx as isize) / s + 1).clamp(0, ow as isize) as usize;
        (lo, hi.max(lo))
    }

    /// im2col for output rows `oy0..oy1` into `cols` (`fan_in × rows·ow`).
    fn im2col_rows(&self, x: &Tensor, ow: usize, oy0: usize, oy1: usize, cols: &mut [f32]) {
        let k = self.kernel;
        let s = self.stride;
        let pad = self.pad() as isize;
        let n = (oy1 - oy0) * ow;
        for c in 0..self.in_channels {
            let plane = x.plane(c);
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * n;
                    let (lo, hi) = self.valid_cols(kx, x.width, ow);
                    let start = (lo * s + kx) as isize - pad;
                    for oy in oy0..oy1 {
                        let iy = (oy * s) as isize + ky as isize - pad;
                        let dst = &mut cols[row + (oy - oy0) * ow..row + (oy - oy0 + 1) * ow];
                        if iy < 0 || iy >= x.height as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        dst[..lo].fill(0.0);
                        dst[hi..].fill(0.0);
                        let src = &plane[iy as usize * x.width..(iy as usize + 1) * x.width];
                        let start = start as usize;
                        if s == 1 {
                            dst[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        } else {
                            for (i, d) in dst[lo..hi].iter_mut().enumerate() {
                                *d = src[start + i * s];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im_rows(&self, cols: &[f32], out: &mut Tensor, ow: usize, oy0: usize, oy1: usize) {
        let k = self.kernel;
        let s = self.stride;
        let pad = self.pad() as isize;
        let n = (oy1 - oy0) * ow;
        let (h, w) = (out.height, out.width);
        for c in 0..self.in_channels {
            let plane = out.plane_mut(c);
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * n;
                    let (lo, hi) = self.valid_cols(kx, w, ow);
                    let start = ((lo * s + kx) as isize - pad) as usize;
                    for oy in oy0..oy1 {
                        let iy = (oy * s) as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize || lo >= hi {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let src = &cols[row + (oy - oy0) * ow + lo..row + (oy - oy0) * ow + hi];
                        if s == 1 {
                            for (d, v) in dst[start..start + hi - lo].iter_mut().zip(src) {
                                *d += *v;
                            }
                        } else {
                            for (i, v) in src.iter().enumerate() {
                                dst[start + i * s] += *v;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, ConvCache) {
        let y = self.infer(x);
        (y, ConvCache { input: x.clone() })
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.channels, self.in_channels, "conv input channels");
        let (oh, ow) = self.output_size(x.height, x.width);
        let n = oh * ow;
        let kk = self.fan_in();
        let mut out = Tensor::zeros(self.out_channels, oh, ow);
        for (o, b) in self.bias.value.iter().enumerate() {
            out.plane_mut(o).fill(*b);
        }
        if self.pointwise() {
            sgemm(self.out_channels, kk, n, &self.weight.value, (kk, 1), &x.data, (n, 1), 1.0, &mut out.data, n);
            return out;
        }
        let rows = self.rows_per_tile(ow);
        let mut cols = vec![0.0f32; kk * rows * ow];
        let mut oy0 = 0;
        while oy0 < oh {
            let oy1 = (oy0 + rows).min(oh);
            let tn = (oy1 - oy0) * ow;
            self.im2col_rows(x, ow, oy0, oy1, &mut cols);
            // out[o, tile] += W[o, k] · cols[k, tile]
            sgemm(
                self.out_channels,
                kk,
                tn,
                &self.weight.value,
                (kk, 1),
                &cols,
                (tn, 1),
                1.0,
                &mut out.data[oy0 * ow..],
                n,
            );
            oy0 = oy1;
        }
        out
    }

    /// Accumulates parameter gradients and returns the input gradient when
    /// `need_input_grad` is set.
    pub fn backward(&mut self, cache: &ConvCache, dy: &Tensor, need_input_grad: bool) -> Option<Tensor> {
        let x = &cache.input;
        let (oh, ow) = (dy.height, dy.width);
        let n = oh * ow;
        let kk = self.fan_in();
        for o in 0..self.out_channels {
            self.bias.grad[o] += dy.plane(o).iter().sum::<f32>();
        }
        if self.pointwise() {
            // dW[o, k] += dy[o, p] · x[k, p]ᵀ
            sgemm(self.out_channels, n, kk, &dy.data, (n, 1), &x.data, (1, n), 1.0, &mut self.weight.grad, kk);
            if !need_input_grad {
                return None;
            }
            let mut dx = Tensor::zeros(self.in_channels, x.height, x.width);
            sgemm(kk, self.out_channels, n, &self.weight.value, (1, kk), &dy.data, (n, 1), 0.0, &mut dx.data, n);
            return Some(dx);
        }
        let rows = self.rows_per_tile(ow);
        let mut cols = vec![0.0f32; kk * rows * ow];
        let mut dcols = vec![0.0f32; kk * rows * ow];
        let mut dx = need_input_grad.then(|| Tensor::zeros(self.in_channels, x.height, x.width));
        let mut dy_tile = vec![0.0f32; self.out_channels * rows * ow];
        let mut oy0 = 0;
        while oy0 < oh {
            let oy1 = (oy0 + rows).min(oh);
            let tn = (oy1 - oy0) * ow;
            self.im2col_rows(x, ow, oy0, oy1, &mut cols);
            for o in 0..self.out_channels {
                dy_tile[o * tn..(o + 1) * tn].copy_from_slice(&dy.plane(o)[oy0 * ow..oy1 * ow]);
            }
            // dW[o, k] += dy[o, t] · cols[k, t]ᵀ
            sgemm(self.out_channels, tn, kk, &dy_tile, (tn, 1), &cols, (1, tn), 1.0, &mut self.weight.grad, kk);
            if let Some(dx) = dx.as_mut() {
                // dcols[k, t] = Wᵀ[k, o] · dy[o, t]
                sgemm(kk, self.out_channels, tn, &self.weight.value, (1, kk), &dy_tile, (tn, 1), 0.0, &mut dcols, tn);
                self.col2im_rows(&dcols, dx, ow, oy0, oy1);
            }
            oy0 = oy1;
        }
        dx
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }
}

/// `c[m×n] = a[m×k]·b[k×n] + beta·c` with explicit (row, col) strides for
/// `a` and `b`; `c` is row-major with row stride `ldc`.
#[allow(clippy::too_many_arguments)]
fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (usize, usize),
    b: &[f32],
    b_strides: (usize, usize),
    beta: f32,
    c: &mut [f32],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let a_need = (m - 1) * a_strides.0 + (k.max(1) - 1) * a_strides.1 + 1;
    let b_need = (k.max(1) - 1) * b_strides.0 + (n - 1) * b_strides.1 + 1;
    assert!(k == 0 || (a.len() >= a_need && b.len() >= b_need), "sgemm operand too small");
    assert!(c.len() >= (m - 1) * ldc + n, "sgemm output too small");
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn naive(conv: &Conv2d, x: &Tensor) -> Tensor {
        let (oh, ow) = conv.output_size(x.height, x.width);
        let k = conv.kernel as isize;
        let pad = k / 2;
        let mut out = Tensor::zeros(conv.out_channels, oh, ow);
        for o in 0..conv.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = conv.bias.value[o] as f64;
                    for c in 0..conv.in_channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * conv.stride) as isize + ky - pad;
                                let ix = (ox * conv.stride) as isize + kx - pad;
                                if iy < 0 || ix < 0 || iy >= x.height as isize || ix >= x.width as isize {
                                    continue;
                                }
                                let w = conv.weight.value[((o * conv.in_channels + c) * conv.kernel + ky as usize)
                                    * conv.kernel
                                    + kx as usize];
                                acc += (w * x.at(c, iy as usize, ix as usize)) as f64;
                            }
                        }
                    }
                    out.data[(o * oh + oy) * ow + ox] = acc as f32;
                }
            }
        }
        out
    }

    fn random_tensor(rng: &mut Rng, c: usize, h: usize, w: usize) -> Tensor {
        Tensor {
            channels: c,
            height: h,
            width: w,
            data: (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn forward_matches_direct_convolution() {
        let mut rng = Rng::seed_from_u64(3);
        for (k, s) in [(3, 1), (3, 2), (1, 1)] {
            let conv = Conv2d::new(2, 3, k, s, &mut rng);
            let x = random_tensor(&mut rng, 2, 7, 6);
            let fast = conv.infer(&x);
            let slow = naive(&conv, &x);
            assert_eq!((fast.height, fast.width), (slow.height, slow.width));
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-5, "k={k} s={s}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn stride_two_output_is_ceil_half() {
        let mut rng = Rng::seed_from_u64(0);
        let conv = Conv2d::new(1, 1, 3, 2, &mut rng);
        assert_eq!(conv.output_size(192, 191), (96, 96));
        assert_eq!(conv.output_size(7, 5), (4, 3));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::seed_from_u64(11);
        let mut conv = Conv2d::new(2, 2, 3, 2, &mut rng);
        let x = random_tensor(&mut rng, 2, 5, 6);
        let probe = {
            let (oh, ow) = conv.output_size(5, 6);
            random_tensor(&mut rng, 2, oh, ow)
        };
        let objective = |conv: &Conv2d, x: &Tensor| -> f64 {
            conv.infer(x)
                .data
                .iter()
                .zip(&probe.data)
                .map(|(a, b)| (*a as f64) * (*b as f64))
                .sum()
        };
        let (_, cache) = conv.forward(&x);
        let dx = conv.backward(&cache, &probe, true).unwrap();
        let h = 1e-2f32;
        for i in [0, 7, 13, 30, 59] {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let fd = (objective(&conv, &xp) - objective(&conv, &xm)) / (2.0 * h as f64);
            assert!((fd - dx.data[i] as f64).abs() < 1e-3, "dx[{i}] {fd} vs {}", dx.data[i]);
        }
        for i in [0, 5, 17, 35] {
            let mut cp = conv.clone();
            cp.weight.value[i] += h;
            let mut cm = conv.clone();
            cm.weight.value[i] -= h;
            let fd = (objective(&cp, &x) - objective(&cm, &x)) / (2.0 * h as f64);
            assert!((fd - conv.weight.grad[i] as f64).abs() < 1e-3);
        }
        let bias_fd: f64 = probe.plane(1).iter().map(|v| *v as f64).sum();
        assert!((bias_fd - conv.bias.grad[1] as f64).abs() < 1e-4);
    }
}
