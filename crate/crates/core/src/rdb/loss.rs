//! Cosine-similarity cascade, interest-matrix crop, relative distance bias
//! and the temperature-scaled softmax cross-entropy with its gradient.
//!
//! Interest matrices are stored row-major with `M` columns (the `m` / x
//! axis) and `N` rows (the `n` / y axis).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Size};
use crate::nn::Tensor;

/// How the distance bias is clipped.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BiasMode {
    /// `b = clip(α·d, 0, β)`: linear slope α up to the cap β.
    #[default]
    ClipScaled,
    /// `b = α·clip(d, 0, β)`: the distance itself is clipped before scaling.
    ClipDistance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    /// `(M, N)`: interest-matrix width and height.
    pub matrix_size: (usize, usize),
    pub levels: usize,
    pub epsilon: f64,
    pub bias_mode: BiasMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.7,
            tau: 10.0,
            matrix_size: (19, 19),
            levels: 5,
            epsilon: 1e-8,
            bias_mode: BiasMode::ClipScaled,
        }
    }
}

impl LossConfig {
    /// `alpha = 0` is accepted: it disables the bias and recovers the
    /// unbiased objective.
    pub fn validate(&self) -> Result<()> {
        let (m, n) = self.matrix_size;
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be > 0, got {}", self.beta)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if m == 0 || n == 0 || m % 2 == 0 || n % 2 == 0 {
            return Err(Error::Config(format!("matrix size must be odd, got {m}x{n}")));
        }
        if self.levels == 0 {
            return Err(Error::Config("levels must be positive".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be > 0".into()));
        }
        Ok(())
    }

    pub fn bias(&self, distance: f64) -> f64 {
        match self.bias_mode {
            BiasMode::ClipScaled => (self.alpha * distance).clamp(0.0, self.beta),
            BiasMode::ClipDistance => self.alpha * distance.clamp(0.0, self.beta),
        }
    }
}

/// Cropped `M×N` window `S_Δ` of a similarity map.
#[derive(Clone, Debug, PartialEq)]
pub struct InterestMatrix {
    pub values: Grid<f64>,
    /// `(m_t, n_t)`: column and row of the positive inside the window.
    pub target: (usize, usize),
    pub level: usize,
    /// Top-left corner of the window in the full similarity map.
    pub window_origin: (usize, usize),
}

/// Biased scores `w = s + b` with the bias and distance grids.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasedMatrix {
    pub w: Grid<f64>,
    pub b: Grid<f64>,
    pub d: Grid<f64>,
    pub target: (usize, usize),
}

fn norm_guarded(v: impl Iterator<Item = f64>, eps: f64) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt().max(eps)
}

/// Cosine similarity between `anchor` and the feature vector at every pixel.
pub fn similarity_map(anchor: &[f32], features: &Tensor, epsilon: f64) -> Result<Grid<f64>> {
    similarity_window(
        anchor,
        features,
        (0, 0),
        Size::hw(features.height, features.width),
        epsilon,
    )
}

/// Cosine similarity restricted to a window (used by training, which only
/// needs the interest matrix).
pub fn similarity_window(
    anchor: &[f32],
    features: &Tensor,
    origin: (usize, usize),
    size: Size,
    epsilon: f64,
) -> Result<Grid<f64>> {
    if anchor.len() != features.channels {
        return Err(Error::Shape(format!(
            "anchor has {} channels, feature map has {}",
            anchor.len(),
            features.channels
        )));
    }
    if origin.0 + size.width > features.width || origin.1 + size.height > features.height {
        return Err(Error::OutOfBounds("similarity window exceeds feature map".into()));
    }
    let anchor_norm = norm_guarded(anchor.iter().map(|v| *v as f64), epsilon);
    let mut dots = Grid::filled(size, 0.0f64);
    let mut sq = Grid::filled(size, 0.0f64);
    let plane = features.plane_len();
    for (c, a) in anchor.iter().enumerate() {
        let a = *a as f64;
        let data = &features.data[c * plane..(c + 1) * plane];
        for y in 0..size.height {
            let row = (origin.1 + y) * features.width + origin.0;
            let src = &data[row..row + size.width];
            let d = &mut dots.as_mut_slice()[y * size.width..(y + 1) * size.width];
            let s = &mut sq.as_mut_slice()[y * size.width..(y + 1) * size.width];
            for ((dv, sv), f) in d.iter_mut().zip(s.iter_mut()).zip(src) {
                let f = *f as f64;
                *dv += a * f;
                *sv += f * f;
            }
        }
    }
    let values = dots
        .as_slice()
        .iter()
        .zip(sq.as_slice())
        .map(|(d, s)| (d / (anchor_norm * s.sqrt().max(epsilon))).clamp(-1.0, 1.0))
        .collect();
    Grid::from_vec(size, values)
}

/// Top-left corner of a `size` window centered on `center`, shifted (never
/// shrunk) to stay inside `grid`.
pub fn window_origin(center: (usize, usize), size: (usize, usize), grid: Size) -> Result<(usize, usize)> {
    let (m, n) = size;
    if m > grid.width || n > grid.height {
        return Err(Error::Shape(format!("window {m}x{n} (MxN) larger than grid {grid}")));
    }
    let clamp = |c: usize, len: usize, total: usize| c.saturating_sub(len / 2).min(total - len);
    Ok((clamp(center.0, m, grid.width), clamp(center.1, n, grid.height)))
}

/// Crops the interest matrix around the floored level coordinate `center`.
pub fn crop_interest(
    similarity: &Grid<f64>,
    center: (usize, usize),
    size: (usize, usize),
    level: usize,
) -> Result<InterestMatrix> {
    let origin = window_origin(center, size, similarity.size())?;
    let target = target_in_window(center, origin, similarity.size())?;
    Ok(InterestMatrix {
        values: similarity.crop(origin.0, origin.1, Size::hw(size.1, size.0))?,
        target,
        level,
        window_origin: origin,
    })
}

pub(crate) fn target_in_window(
    center: (usize, usize),
    origin: (usize, usize),
    grid: Size,
) -> Result<(usize, usize)> {
    if center.0 >= grid.width || center.1 >= grid.height {
        return Err(Error::OutOfBounds(format!(
            "center ({}, {}) outside grid {grid}",
            center.0, center.1
        )));
    }
    Ok((center.0 - origin.0, center.1 - origin.1))
}

/// Euclidean distance of every matrix cell to `target`.
pub fn distance_map(target: (usize, usize), size: (usize, usize)) -> Grid<f64> {
    let (mt, nt) = (target.0 as f64, target.1 as f64);
    Grid::from_fn(Size::hw(size.1, size.0), |m, n| {
        (m as f64 - mt).hypot(n as f64 - nt)
    })
}

/// Adds the relative distance bias to the cropped similarities.
pub fn apply_rdb(interest: &InterestMatrix, distance: &Grid<f64>, config: &LossConfig) -> Result<BiasedMatrix> {
    if interest.values.size() != distance.size() {
        return Err(Error::Shape(format!(
            "interest matrix {} vs distance map {}",
            interest.values.size(),
            distance.size()
        )));
    }
    let b = distance.map(|d| config.bias(d));
    let w = Grid::from_vec(
        b.size(),
        interest
            .values
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(s, b)| s + b)
            .collect(),
    )?;
    Ok(BiasedMatrix {
        w,
        b,
        d: distance.clone(),
        target: interest.target,
    })
}

fn softmax_scaled(w: &Grid<f64>, tau: f64) -> Result<Grid<f64>> {
    if w.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("biased matrix contains NaN or infinity".into()));
    }
    let max = w.as_slice().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = w.as_slice().iter().map(|v| ((v - max) * tau).exp()).collect();
    let total: f64 = exps.iter().sum();
    Grid::from_vec(w.size(), exps.into_iter().map(|e| e / total).collect())
}

/// Cross-entropy of the temperature softmax against the one-hot target.
/// Returns the loss and the probability grid `q`.
pub fn ce_layer_loss(biased: &BiasedMatrix, tau: f64) -> Result<(f64, Grid<f64>)> {
    let q = softmax_scaled(&biased.w, tau)?;
    let (mt, nt) = biased.target;
    let w = &biased.w;
    // -log q_t computed as logsumexp(τw) - τw_t to stay accurate when q_t → 1.
    let max = w.as_slice().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = w.as_slice().iter().map(|v| ((v - max) * tau).exp()).sum::<f64>().ln() + max * tau;
    let loss = lse - w.get(mt, nt) * tau;
    Ok((loss, q))
}

/// Sum of the per-level losses.
pub fn ssl_total_loss(level_losses: &[f64]) -> f64 {
    level_losses.iter().sum()
}

/// `∂L/∂s` for every cell of the interest matrix: `τ·q` at negatives and
/// `τ·(q_t − 1)` at the target. The bias does not depend on `s`, so this is
/// also the gradient with respect to `w`.
pub fn analytic_gradient(biased: &BiasedMatrix, tau: f64) -> Result<Grid<f64>> {
    let mut g = softmax_scaled(&biased.w, tau)?.map(|q| tau * q);
    let (mt, nt) = biased.target;
    let at = g.get(mt, nt);
    g.set(mt, nt, at - tau);
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn interest(values: Vec<f64>, size: (usize, usize), target: (usize, usize)) -> InterestMatrix {
        InterestMatrix {
            values: Grid::from_vec(Size::hw(size.1, size.0), values).unwrap(),
            target,
            level: 0,
            window_origin: (0, 0),
        }
    }

    fn unbiased(values: Vec<f64>, size: (usize, usize), target: (usize, usize)) -> BiasedMatrix {
        let cfg = LossConfig {
            alpha: 0.0,
            ..LossConfig::default()
        };
        let i = interest(values, size, target);
        apply_rdb(&i, &distance_map(target, size), &cfg).unwrap()
    }

    #[test]
    fn similarity_special_values() {
        let features = Tensor {
            channels: 2,
            height: 1,
            width: 3,
            // pixels: (1, 2), (-2, 1), (-1, -2)
            data: vec![1.0, -2.0, -1.0, 2.0, 1.0, -2.0],
        };
        let s = similarity_map(&[1.0, 2.0], &features, 1e-8).unwrap();
        assert_abs_diff_eq!(s.get(0, 0), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.get(1, 0), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.get(2, 0), -1.0, epsilon = 1e-12);
        assert!(similarity_map(&[1.0], &features, 1e-8).is_err());
    }

    #[test]
    fn zero_features_are_guarded() {
        let features = Tensor::zeros(3, 2, 2);
        let s = similarity_map(&[0.0, 0.0, 0.0], &features, 1e-8).unwrap();
        assert!(s.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn crop_examples() {
        let grid = Grid::filled(Size::hw(96, 96), 0.0);
        let c = crop_interest(&grid, (48, 48), (19, 19), 1).unwrap();
        assert_eq!((c.window_origin, c.target), ((39, 39), (9, 9)));
        let c = crop_interest(&grid, (1, 1), (19, 19), 1).unwrap();
        assert_eq!((c.window_origin, c.target), ((0, 0), (1, 1)));
        let c = crop_interest(&grid, (95, 95), (19, 19), 1).unwrap();
        assert_eq!((c.window_origin, c.target), ((77, 77), (18, 18)));
        let small = Grid::filled(Size::hw(12, 12), 0.0);
        assert!(crop_interest(&small, (5, 5), (19, 19), 3).is_err());
    }

    #[test]
    fn windowed_similarity_equals_crop_of_full_map() {
        let features = Tensor {
            channels: 3,
            height: 9,
            width: 11,
            data: (0..297).map(|i| ((i as f32) * 0.731).sin()).collect(),
        };
        let anchor = [0.3f32, -0.8, 0.5];
        let full = similarity_map(&anchor, &features, 1e-8).unwrap();
        let crop = crop_interest(&full, (9, 2), (5, 3), 0).unwrap();
        let win = similarity_window(&anchor, &features, crop.window_origin, Size::hw(3, 5), 1e-8).unwrap();
        assert_eq!(crop.values, win);
    }

    #[test]
    fn distance_examples() {
        let d = distance_map((4, 4), (19, 19));
        assert_eq!(d.get(4, 4), 0.0);
        assert_abs_diff_eq!(d.get(7, 8), 5.0, epsilon = 1e-12);
        let d3 = distance_map((1, 1), (3, 3));
        let r2 = 2f64.sqrt();
        assert_eq!(d3.as_slice(), &[r2, 1.0, r2, 1.0, 0.0, 1.0, r2, 1.0, r2]);
    }

    #[test]
    fn bias_examples() {
        let cfg = LossConfig::default();
        assert_eq!(cfg.bias(0.0), 0.0);
        assert_abs_diff_eq!(cfg.bias(5.0), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(cfg.bias(10.0), 0.7, epsilon = 1e-12);
        let literal = LossConfig {
            bias_mode: BiasMode::ClipDistance,
            ..cfg
        };
        assert_abs_diff_eq!(literal.bias(1.0), 0.07, epsilon = 1e-12);
        assert_abs_diff_eq!(literal.bias(9.0), 0.07, epsilon = 1e-12);
    }

    #[test]
    fn apply_rdb_keeps_target_unbiased() {
        let cfg = LossConfig::default();
        let i = interest((0..9).map(|v| v as f64 * 0.1).collect(), (3, 3), (1, 1));
        let b = apply_rdb(&i, &distance_map((1, 1), (3, 3)), &cfg).unwrap();
        assert_eq!(b.w.get(1, 1), i.values.get(1, 1));
        assert_eq!(b.b.get(1, 1), 0.0);
        assert_abs_diff_eq!(b.w.get(0, 1), 0.3 + 0.1, epsilon = 1e-12);
        assert!(apply_rdb(&i, &distance_map((0, 0), (5, 3)), &cfg).is_err());
    }

    #[test]
    fn ce_examples() {
        let b = unbiased(vec![0.3; 361], (19, 19), (9, 9));
        let (loss, q) = ce_layer_loss(&b, 7.0).unwrap();
        assert_abs_diff_eq!(loss, 361f64.ln(), epsilon = 1e-12);
        assert!(q.as_slice().iter().all(|v| (v - 1.0 / 361.0).abs() < 1e-15));

        let two = BiasedMatrix {
            w: Grid::from_vec(Size::hw(1, 2), vec![0.0, 0.0]).unwrap(),
            b: Grid::filled(Size::hw(1, 2), 0.0),
            d: Grid::filled(Size::hw(1, 2), 0.0),
            target: (0, 0),
        };
        let (loss, q) = ce_layer_loss(&two, 1.0).unwrap();
        assert_abs_diff_eq!(loss, 2f64.ln(), epsilon = 1e-15);
        assert_eq!(q.as_slice(), &[0.5, 0.5]);
        let g = analytic_gradient(&two, 1.0).unwrap();
        assert_eq!(g.as_slice(), &[-0.5, 0.5]);
        let g = analytic_gradient(&two, 10.0).unwrap();
        assert_eq!(g.as_slice(), &[-5.0, 5.0]);
    }

    #[test]
    fn peaked_ce_value() {
        let mut v = vec![0.0; 361];
        v[9 * 19 + 9] = 1.0;
        let b = unbiased(v, (19, 19), (9, 9));
        let (loss, _) = ce_layer_loss(&b, 10.0).unwrap();
        // ln(1 + 360·e^{-10}), evaluated independently.
        assert_abs_diff_eq!(loss, 0.016_211_849_648_390_486, epsilon = 1e-12);
    }

    #[test]
    fn non_finite_scores_error() {
        let mut b = unbiased(vec![0.0; 9], (3, 3), (1, 1));
        b.w.set(0, 0, f64::NAN);
        assert!(ce_layer_loss(&b, 10.0).is_err());
    }

    #[test]
    fn total_loss_is_plain_sum() {
        assert_eq!(ssl_total_loss(&[0.0; 5]), 0.0);
        assert_eq!(ssl_total_loss(&[1.25]), 1.25);
        assert_abs_diff_eq!(ssl_total_loss(&[0.5, 1.5, 2.0, 0.25, 3.0]), 7.25, epsilon = 1e-15);
    }

    #[test]
    fn validation() {
        assert!(LossConfig::default().validate().is_ok());
        let even = LossConfig {
            matrix_size: (18, 19),
            ..LossConfig::default()
        };
        assert!(even.validate().is_err());
        let neg = LossConfig {
            tau: 0.0,
            ..LossConfig::default()
        };
        assert!(neg.validate().is_err());
    }
}
