use super::tensor::Tensor;
use super::Param;

const MOMENTUM: f32 = 0.1;
const EPS: f32 = 1e-5;

/// Per-channel batch normalization with running statistics for inference.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct NormCache {
    xhat: Vec<Tensor>,
    inv_std: Vec<f32>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(vec![1.0; channels]),
            beta: Param::new(vec![0.0; channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    /// Training-mode forward over a batch; updates the running statistics.
    pub fn forward(&mut self, batch: Vec<Tensor>) -> (Vec<Tensor>, NormCache) {
        let channels = self.channels();
        let count: usize = batch.iter().map(Tensor::plane_len).sum();
        let mut xhat = batch;
        let mut outputs = Vec::with_capacity(xhat.len());
        let mut inv_std = vec![0.0f32; channels];
        for c in 0..channels {
            let mut sum = 0.0f64;
            let mut sq = 0.0f64;
            for t in &xhat {
                let (s1, s2) = moments(t.plane(c));
                sum += s1;
                sq += s2;
            }
            let mean = sum / count as f64;
            let var = (sq / count as f64 - mean * mean).max(0.0);
            let istd = 1.0 / (var as f32 + EPS).sqrt();
            inv_std[c] = istd;
            let unbiased = if count > 1 {
                var * count as f64 / (count - 1) as f64
            } else {
                var
            };
            self.running_mean[c] = (1.0 - MOMENTUM) * self.running_mean[c] + MOMENTUM * mean as f32;
            self.running_var[c] = (1.0 - MOMENTUM) * self.running_var[c] + MOMENTUM * unbiased as f32;
            let mean = mean as f32;
            for t in &mut xhat {
                for v in t.plane_mut(c) {
                    *v = (*v - mean) * istd;
                }
            }
        }
        for t in &xhat {
            let mut out = Tensor::zeros(t.channels, t.height, t.width);
            for c in 0..channels {
                let (g, b) = (self.gamma.value[c], self.beta.value[c]);
                for (o, v) in out.plane_mut(c).iter_mut().zip(t.plane(c)) {
                    *o = *v * g + b;
                }
            }
            outputs.push(out);
        }
        (outputs, NormCache { xhat, inv_std })
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        for c in 0..self.channels() {
            let istd = 1.0 / (self.running_var[c] + EPS).sqrt();
            let scale = self.gamma.value[c] * istd;
            let shift = self.beta.value[c] - self.running_mean[c] * scale;
            for v in out.plane_mut(c) {
                *v = *v * scale + shift;
            }
        }
        out
    }

    pub fn backward(&mut self, cache: &NormCache, grads: Vec<Tensor>) -> Vec<Tensor> {
        let channels = self.channels();
        let count: usize = grads.iter().map(Tensor::plane_len).sum();
        let mut grads = grads;
        for c in 0..channels {
            let mut sum_dy = 0.0f64;
            let mut sum_dy_xhat = 0.0f64;
            for (g, xh) in grads.iter().zip(&cache.xhat) {
                let (s1, s2) = dot_moments(g.plane(c), xh.plane(c));
                sum_dy += s1;
                sum_dy_xhat += s2;
            }
            self.beta.grad[c] += sum_dy as f32;
            self.gamma.grad[c] += sum_dy_xhat as f32;
            let gamma = self.gamma.value[c];
            let scale = gamma * cache.inv_std[c] / count as f32;
            let mean_dy = sum_dy as f32;
            let mean_dy_xhat = sum_dy_xhat as f32;
            for (g, xh) in grads.iter_mut().zip(&cache.xhat) {
                for (dy, x) in g.plane_mut(c).iter_mut().zip(xh.plane(c)) {
                    *dy = scale * (count as f32 * *dy - mean_dy - *x * mean_dy_xhat);
                }
            }
        }
        grads
    }
}

const LANES: usize = 8;
const BLOCK: usize = 1024;

/// `(Σa, Σa·b)`; f32 lanes within short blocks, f64 across blocks.
fn dot_moments(a: &[f32], b: &[f32]) -> (f64, f64) {
    let mut total = (0.0f64, 0.0f64);
    for (ab, bb) in a.chunks(BLOCK).zip(b.chunks(BLOCK)) {
        let mut s1 = [0.0f32; LANES];
        let mut s2 = [0.0f32; LANES];
        let mut ac = ab.chunks_exact(LANES);
        let mut bc = bb.chunks_exact(LANES);
        for (x, y) in (&mut ac).zip(&mut bc) {
            for i in 0..LANES {
                s1[i] += x[i];
                s2[i] += x[i] * y[i];
            }
        }
        for (x, y) in ac.remainder().iter().zip(bc.remainder()) {
            s1[0] += x;
            s2[0] += x * y;
        }
        total.0 += s1.iter().map(|v| *v as f64).sum::<f64>();
        total.1 += s2.iter().map(|v| *v as f64).sum::<f64>();
    }
    total
}

/// `(Σa, Σa²)`.
fn moments(a: &[f32]) -> (f64, f64) {
    dot_moments(a, a)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch() -> Vec<Tensor> {
        (0..3)
            .map(|i| Tensor {
                channels: 2,
                height: 2,
                width: 2,
                data: (0..8).map(|j| ((i * 8 + j) as f32 * 0.37).sin() * 2.0 + j as f32 * 0.1).collect(),
            })
            .collect()
    }

    #[test]
    fn training_output_is_standardized() {
        let mut bn = BatchNorm2d::new(2);
        let (out, _) = bn.forward(batch());
        for c in 0..2 {
            let vals: Vec<f32> = out.iter().flat_map(|t| t.plane(c).to_vec()).collect();
            let mean: f32 = vals.iter().sum::<f32>() / vals.len() as f32;
            let var: f32 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / vals.len() as f32;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut bn = BatchNorm2d::new(2);
        bn.gamma.value = vec![1.3, 0.7];
        bn.beta.value = vec![0.1, -0.2];
        let probe: Vec<Tensor> = (0..3)
            .map(|i| Tensor {
                channels: 2,
                height: 2,
                width: 2,
                data: (0..8).map(|j| ((i * 5 + j * 3) as f32 * 0.91).cos()).collect(),
            })
            .collect();
        let objective = |input: Vec<Tensor>| -> f64 {
            let mut bn = bn.clone();
            let (out, _) = bn.forward(input);
            out.iter()
                .zip(&probe)
                .flat_map(|(o, p)| o.data.iter().zip(&p.data).map(|(a, b)| (*a as f64) * (*b as f64)))
                .sum()
        };
        let mut trained = bn.clone();
        let (_, cache) = trained.forward(batch());
        let dx = trained.backward(&cache, probe.clone());
        let h = 1e-2f32;
        for (i, j) in [(0, 0), (1, 3), (2, 7), (0, 5)] {
            let mut plus = batch();
            plus[i].data[j] += h;
            let mut minus = batch();
            minus[i].data[j] -= h;
            let fd = (objective(plus) - objective(minus)) / (2.0 * h as f64);
            assert!((fd - dx[i].data[j] as f64).abs() < 2e-3, "{fd} vs {}", dx[i].data[j]);
        }
    }

    #[test]
    fn inference_uses_running_statistics() {
        let mut bn = BatchNorm2d::new(1);
        bn.running_mean = vec![2.0];
        bn.running_var = vec![4.0];
        let x = Tensor {
            channels: 1,
            height: 1,
            width: 1,
            data: vec![4.0],
        };
        assert!((bn.infer(&x).data[0] - 1.0).abs() < 1e-5);
    }
}
