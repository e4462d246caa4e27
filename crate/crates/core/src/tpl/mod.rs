//! Second stage: a heatmap + offset detector trained on pseudo-labels.
//!
//! For landmark `k` the detector emits three maps: channel `3k` holds
//! heatmap logits, channels `3k + 1` and `3k + 2` hold x and y offsets. A
//! pixel inside the disk of radius `R` around a landmark has heatmap target
//! 1 and offset target `(landmark - pixel) / R`.

mod net;
mod train;

pub use net::{NetConfig, NetTrace, UNet};
pub use train::{train_tpl, Detector, TplConfig, TplEpoch, TplOutcome, TPL_CHECKPOINT_MAGIC};

use crate::grid::{Grid, Point, Size};
use crate::nn::Tensor;

/// Heatmap, offsets and mask for every landmark.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionTargets {
    pub heatmaps: Vec<Grid<f32>>,
    pub offset_x: Vec<Grid<f32>>,
    pub offset_y: Vec<Grid<f32>>,
    pub masks: Vec<Grid<bool>>,
    pub radius: f64,
}

/// Disk heatmaps and normalized offsets on a `size` grid.
pub fn build_targets(landmarks: &[Point], size: Size, radius: f64) -> DetectionTargets {
    let mut t = DetectionTargets {
        heatmaps: Vec::with_capacity(landmarks.len()),
        offset_x: Vec::with_capacity(landmarks.len()),
        offset_y: Vec::with_capacity(landmarks.len()),
        masks: Vec::with_capacity(landmarks.len()),
        radius,
    };
    for l in landmarks {
        let mask = Grid::from_fn(size, |x, y| l.distance(Point::new(x as f64, y as f64)) <= radius);
        let off = |d: f64, inside: bool| if inside { (d / radius) as f32 } else { 0.0 };
        t.offset_x
            .push(Grid::from_fn(size, |x, y| off(l.x - x as f64, mask.get(x, y))));
        t.offset_y
            .push(Grid::from_fn(size, |x, y| off(l.y - y as f64, mask.get(x, y))));
        t.heatmaps.push(mask.map(|m| if m { 1.0 } else { 0.0 }));
        t.masks.push(mask);
    }
    t
}

impl DetectionTargets {
    /// The targets laid out like detector outputs (heatmap channel holds the
    /// target probability rather than a logit).
    pub fn to_tensor(&self) -> Tensor {
        let size = self.heatmaps.first().map_or(Size::hw(0, 0), |h| h.size());
        let mut t = Tensor::zeros(3 * self.heatmaps.len(), size.height, size.width);
        for k in 0..self.heatmaps.len() {
            t.plane_mut(3 * k).copy_from_slice(self.heatmaps[k].as_slice());
            t.plane_mut(3 * k + 1).copy_from_slice(self.offset_x[k].as_slice());
            t.plane_mut(3 * k + 2).copy_from_slice(self.offset_y[k].as_slice());
        }
        t
    }
}

/// Per landmark: heatmap argmax `p` (ties to the smallest row-major index)
/// plus the offset at `p` scaled by `radius`. Offset vectors longer than 1
/// are shortened to unit length, so the result stays within `radius` of `p`.
pub fn decode_tpl(outputs: &Tensor, radius: f64) -> Vec<Point> {
    let k = outputs.channels / 3;
    (0..k)
        .map(|k| {
            let heat = outputs.plane(3 * k);
            let mut best = 0;
            for (i, v) in heat.iter().enumerate() {
                if *v > heat[best] {
                    best = i;
                }
            }
            let (x, y) = (best % outputs.width, best / outputs.width);
            let mut ox = outputs.plane(3 * k + 1)[best] as f64;
            let mut oy = outputs.plane(3 * k + 2)[best] as f64;
            if !(ox.is_finite() && oy.is_finite()) {
                ox = 0.0;
                oy = 0.0;
            }
            let norm = ox.hypot(oy);
            if norm > 1.0 {
                ox /= norm;
                oy /= norm;
            }
            Point::new(x as f64 + ox * radius, y as f64 + oy * radius)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn target_examples() {
        let t = build_targets(&[Point::new(10.0, 8.0)], Size::hw(20, 30), 4.0);
        assert_eq!(t.offset_x[0].get(10, 8), 0.0);
        assert_eq!(t.offset_y[0].get(10, 8), 0.0);
        // Pixel at distance exactly R on the +x axis of the landmark: the
        // landmark lies R to its left.
        assert_eq!(t.offset_x[0].get(6, 8), 1.0);
        assert_eq!(t.offset_x[0].get(14, 8), -1.0);
        assert!(t.masks[0].get(14, 8) && !t.masks[0].get(15, 8));
        assert!(t.heatmaps[0].as_slice().iter().all(|v| *v == 0.0 || *v == 1.0));
    }

    #[test]
    fn disk_area_matches_brute_force_count() {
        for (r, cx, cy) in [(3.0, 20.3, 15.7), (5.5, 30.0, 30.0), (1.0, 0.0, 0.0)] {
            let t = build_targets(&[Point::new(cx, cy)], Size::hw(64, 64), r);
            let count = t.masks[0].as_slice().iter().filter(|m| **m).count();
            let mut brute = 0;
            for y in 0..64 {
                for x in 0..64 {
                    if ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt() <= r {
                        brute += 1;
                    }
                }
            }
            assert_eq!(count, brute);
        }
    }

    #[test]
    fn uniform_heatmap_takes_first_pixel() {
        let out = Tensor::zeros(3, 4, 4);
        assert_eq!(decode_tpl(&out, 2.0), vec![Point::new(0.0, 0.0)]);
    }

    proptest! {
        #[test]
        fn targets_round_trip(x in 0.0f64..47.99, y in 0.0f64..31.99, r in 1.0f64..6.0) {
            let l = Point::new(x, y);
            let t = build_targets(&[l], Size::hw(32, 48), r);
            let p = decode_tpl(&t.to_tensor(), r);
            prop_assert!(p[0].distance(l) <= 1e-6, "{:?} vs {:?}", p[0], l);
            for (o, m) in t.offset_x[0].as_slice().iter().zip(t.offset_y[0].as_slice()).zip(t.masks[0].as_slice()).map(|((a, b), m)| ((a, b), m)) {
                if *m {
                    prop_assert!(((o.0 * o.0 + o.1 * o.1) as f64).sqrt() <= 1.0 + 1e-6);
                }
            }
        }

        #[test]
        fn decoded_points_stay_near_the_argmax(data in prop::collection::vec(-5.0f32..5.0, 3 * 36), r in 0.5f64..4.0) {
            let out = Tensor { channels: 3, height: 6, width: 6, data };
            let p = decode_tpl(&out, r)[0];
            let heat = out.plane(0);
            let best = (0..36).fold(0, |b, i| if heat[i] > heat[b] { i } else { b });
            let argmax = Point::new((best % 6) as f64, (best / 6) as f64);
            prop_assert!(p.distance(argmax) <= r + 1e-9);
        }
    }
}
