//! Browser bindings for three interactive views of the toolkit:
//! the biased contrastive loss on one interest matrix, synthetic sample
//! generation and the training-patch augmentation.

use cc2d::augment::{apply_color_jitter, rotate_point, Jitter};
use cc2d::data::{generate_synthetic, SynthConfig};
use cc2d::grid::{Grid, Point, Size};
use cc2d::rdb::{analytic_gradient, apply_rdb, ce_layer_loss, distance_map, InterestMatrix, LossConfig};
use cc2d::rng::substream;
use rand::Rng as _;
use wasm_bindgen::prelude::*;

const MATRIX: usize = 19;

fn js_err(e: cc2d::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn to_rgba(grid: &Grid<f32>) -> Vec<u8> {
    grid.as_slice()
        .iter()
        .flat_map(|v| {
            let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            [g, g, g, 255]
        })
        .collect()
}

/// Loss, softmax and gradient of one 19×19 interest matrix whose target is
/// the center cell.
#[wasm_bindgen]
pub struct RdbView {
    loss: f64,
    unbiased_loss: f64,
    similarity: Vec<f64>,
    bias: Vec<f64>,
    probability: Vec<f64>,
    gradient: Vec<f64>,
}

#[wasm_bindgen]
impl RdbView {
    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        MATRIX
    }
    #[wasm_bindgen(getter)]
    pub fn loss(&self) -> f64 {
        self.loss
    }
    #[wasm_bindgen(getter)]
    pub fn unbiased_loss(&self) -> f64 {
        self.unbiased_loss
    }
    #[wasm_bindgen(getter)]
    pub fn similarity(&self) -> Vec<f64> {
        self.similarity.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn bias(&self) -> Vec<f64> {
        self.bias.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn probability(&self) -> Vec<f64> {
        self.probability.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn gradient(&self) -> Vec<f64> {
        self.gradient.clone()
    }
}

/// Builds a similarity window with a bump at the target and a distractor
/// bump at `(peak_x, peak_y)`, then applies the distance bias.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn rdb_explore(
    alpha: f64,
    beta: f64,
    tau: f64,
    peak_x: usize,
    peak_y: usize,
    peak_height: f64,
    noise: f64,
    seed: u64,
) -> Result<RdbView, JsError> {
    let center = MATRIX / 2;
    let config = LossConfig {
        alpha,
        beta,
        tau,
        matrix_size: (MATRIX, MATRIX),
        ..LossConfig::default()
    };
    config.validate().map_err(js_err)?;
    let mut rng = substream(seed, "demo-rdb");
    let bump = |x: usize, y: usize, cx: usize, cy: usize| {
        let d2 = (x as f64 - cx as f64).powi(2) + (y as f64 - cy as f64).powi(2);
        (-d2 / 4.0).exp()
    };
    let (px, py) = (peak_x.min(MATRIX - 1), peak_y.min(MATRIX - 1));
    let values = Grid::from_fn(Size::hw(MATRIX, MATRIX), |x, y| {
        let s = 0.8 * bump(x, y, center, center) + peak_height * bump(x, y, px, py) + noise * rng.gen_range(-1.0..1.0);
        s.clamp(-1.0, 1.0)
    });
    let interest = InterestMatrix {
        values,
        target: (center, center),
        level: 0,
        window_origin: (0, 0),
    };
    let distance = distance_map((center, center), (MATRIX, MATRIX));
    let biased = apply_rdb(&interest, &distance, &config).map_err(js_err)?;
    let (loss, q) = ce_layer_loss(&biased, tau).map_err(js_err)?;
    let gradient = analytic_gradient(&biased, tau).map_err(js_err)?;
    let plain = apply_rdb(&interest, &distance, &LossConfig { alpha: 0.0, ..config }).map_err(js_err)?;
    let (unbiased_loss, _) = ce_layer_loss(&plain, tau).map_err(js_err)?;
    Ok(RdbView {
        loss,
        unbiased_loss,
        similarity: interest.values.into_vec(),
        bias: biased.b.into_vec(),
        probability: q.into_vec(),
        gradient: gradient.into_vec(),
    })
}

/// A grayscale image as RGBA bytes with landmark coordinates `[x0, y0, x1, ...]`.
#[wasm_bindgen]
pub struct ImageView {
    width: usize,
    height: usize,
    rgba: Vec<u8>,
    landmarks: Vec<f64>,
}

#[wasm_bindgen]
impl ImageView {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }
    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }
    #[wasm_bindgen(getter)]
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn landmarks(&self) -> Vec<f64> {
        self.landmarks.clone()
    }
}

fn image_view(pixels: &Grid<f32>, landmarks: &[Point]) -> ImageView {
    ImageView {
        width: pixels.width(),
        height: pixels.height(),
        rgba: to_rgba(pixels),
        landmarks: landmarks.iter().flat_map(|p| [p.x, p.y]).collect(),
    }
}

fn synth_sample(seed: u64, size: usize, landmarks: usize, index: usize) -> Result<(Grid<f32>, Vec<Point>), JsError> {
    let cfg = SynthConfig::new(seed, index + 2, landmarks, Size::hw(size, size));
    let split = generate_synthetic(&cfg).map_err(js_err)?;
    let sample = split.all().nth(index).expect("index < count");
    Ok((sample.pixels.clone(), sample.landmarks.clone()))
}

/// Sample `index` of the synthetic dataset drawn from `seed`. Index 0 is the
/// template; the anatomy is shared, so landmarks move only by deformation.
#[wasm_bindgen]
pub fn synth_image(seed: u64, size: usize, landmarks: usize, index: usize) -> Result<ImageView, JsError> {
    if !(32..=256).contains(&size) || index > 15 {
        return Err(JsError::new("size must be in 32..=256 and index at most 15"));
    }
    let (pixels, points) = synth_sample(seed, size, landmarks, index)?;
    Ok(image_view(&pixels, &points))
}

/// The template image rotated about its center and color jittered, with its
/// landmarks mapped through the same rotation.
#[wasm_bindgen]
pub fn augment_image(
    seed: u64,
    size: usize,
    landmarks: usize,
    angle_deg: f64,
    brightness: f64,
    contrast: f64,
    gamma: f64,
) -> Result<ImageView, JsError> {
    if !(32..=256).contains(&size) {
        return Err(JsError::new("size must be in 32..=256"));
    }
    if !(contrast > 0.0 && gamma > 0.0) {
        return Err(JsError::new("contrast and gamma must be positive"));
    }
    let (pixels, points) = synth_sample(seed, size, landmarks, 0)?;
    let (rotated, _) = cc2d::augment::apply_rotation(&pixels, Point::new(0.0, 0.0), angle_deg);
    let center = Point::new((size as f64 - 1.0) / 2.0, (size as f64 - 1.0) / 2.0);
    let moved: Vec<Point> = points.iter().map(|p| rotate_point(*p, center, angle_deg)).collect();
    let jittered = apply_color_jitter(
        &rotated,
        Jitter {
            brightness,
            contrast,
            gamma,
        },
    );
    Ok(image_view(&jittered, &moved))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bias_raises_the_loss() {
        let biased = rdb_explore(0.1, 0.7, 10.0, 2, 2, 0.9, 0.0, 0).unwrap();
        assert!(biased.loss > biased.unbiased_loss);
        let sum: f64 = biased.gradient.iter().sum();
        assert!(sum.abs() < 1e-9);
    }

    #[test]
    fn zero_rotation_keeps_landmarks() {
        let a = synth_image(3, 64, 3, 0).unwrap();
        let b = augment_image(3, 64, 3, 0.0, 0.0, 1.0, 1.0).unwrap();
        assert_eq!(a.landmarks, b.landmarks);
        assert_eq!(a.rgba, b.rgba);
        assert_eq!(a.rgba.len(), 64 * 64 * 4);
    }
}
