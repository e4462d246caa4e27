//! Radial errors in native millimeters, MRE and SDR.

use std::fmt::Write as _;

use serde::de::{MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::rescale_coords;
use crate::error::{Error, Result};
use crate::grid::{Point, Size};

/// Radii of the cephalometric-style tables.
pub const CEPH_RADII_MM: [f64; 6] = [2.0, 2.5, 3.0, 4.0, 6.0, 8.0];
/// Radii of the pelvis-style tables.
pub const PELVIS_RADII_MM: [f64; 3] = [4.0, 8.0, 12.0];

/// Success rate per radius, serialized as a JSON object keyed by the radius
/// (`"2.0"`, `"2.5"`, ...) in ascending radius order.
#[derive(Clone, Debug, PartialEq)]
pub struct Sdr(pub Vec<(f64, f64)>);

impl Sdr {
    pub fn get(&self, radius: f64) -> Option<f64> {
        self.0.iter().find(|(r, _)| *r == radius).map(|(_, p)| *p)
    }
}

pub fn radius_key(r: f64) -> String {
    format!("{r:?}")
}

impl Serialize for Sdr {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(self.0.len()))?;
        for (r, pct) in &self.0 {
            map.serialize_entry(&radius_key(*r), pct)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for Sdr {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct SdrVisitor;
        impl<'de> Visitor<'de> for SdrVisitor {
            type Value = Sdr;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a map from radius to percentage")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> std::result::Result<Sdr, A::Error> {
                let mut entries = Vec::new();
                while let Some((k, v)) = access.next_entry::<String, f64>()? {
                    let r: f64 = k
                        .parse()
                        .map_err(|_| serde::de::Error::custom(format!("radius key `{k}` is not a number")))?;
                    entries.push((r, v));
                }
                entries.sort_by(|a, b| a.0.total_cmp(&b.0));
                Ok(Sdr(entries))
            }
        }
        deserializer.deserialize_map(SdrVisitor)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mre_mm: f64,
    pub sdr: Sdr,
    /// Mean radial error of each landmark index.
    pub per_landmark: Vec<f64>,
    pub n_images: usize,
    pub n_landmarks: usize,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::InvalidInput(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidInput(format!("metrics report: {e}")))
    }

    /// `mre_mm,sdr_<r>...` header.
    pub fn csv_header(&self) -> String {
        let mut out = String::from("mre_mm");
        for (r, _) in &self.sdr.0 {
            let _ = write!(out, ",sdr_{}", radius_key(*r));
        }
        out
    }

    pub fn csv_row(&self) -> String {
        let mut out = format!("{}", self.mre_mm);
        for (_, p) in &self.sdr.0 {
            let _ = write!(out, ",{p}");
        }
        out
    }
}

/// Errors in millimeters: both point sets are mapped from `resized` to
/// `native` pixels, then each axis is scaled by its spacing.
pub fn radial_errors(
    preds: &[Point],
    gts: &[Point],
    native_size: Size,
    resized_size: Size,
    spacing_mm: (f64, f64),
) -> Result<Vec<f64>> {
    if preds.len() != gts.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} ground-truth points",
            preds.len(),
            gts.len()
        )));
    }
    let p = rescale_coords(preds, resized_size, native_size)?;
    let g = rescale_coords(gts, resized_size, native_size)?;
    Ok(p.iter()
        .zip(&g)
        .map(|(a, b)| ((a.x - b.x) * spacing_mm.0).hypot((a.y - b.y) * spacing_mm.1))
        .collect())
}

fn check_radii(radii_mm: &[f64]) -> Result<Vec<f64>> {
    if radii_mm.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
        return Err(Error::Config(format!("radii must be finite and >= 0, got {radii_mm:?}")));
    }
    let mut radii = radii_mm.to_vec();
    radii.sort_by(f64::total_cmp);
    radii.dedup();
    Ok(radii)
}

/// Percentage of errors with `e <= r` (inclusive boundary).
pub fn success_rate(errors: &[f64], r: f64) -> f64 {
    100.0 * errors.iter().filter(|e| **e <= r).count() as f64 / errors.len() as f64
}

/// MRE and SDR of a flat error list (treated as one landmark).
pub fn summarize(errors: &[f64], radii_mm: &[f64]) -> Result<MetricsReport> {
    summarize_table(&[errors.to_vec()], radii_mm).map(|mut r| {
        r.n_images = errors.len();
        r.n_landmarks = 1;
        r
    })
}

/// MRE and SDR of an `images × landmarks` error table.
pub fn summarize_table(errors: &[Vec<f64>], radii_mm: &[f64]) -> Result<MetricsReport> {
    let flat: Vec<f64> = errors.iter().flatten().copied().collect();
    if flat.is_empty() {
        return Err(Error::InvalidInput("no errors to summarize".into()));
    }
    if let Some(e) = flat.iter().find(|e| !(e.is_finite() && **e >= 0.0)) {
        return Err(Error::NonFinite(format!("radial error {e}")));
    }
    let k = errors[0].len();
    if errors.iter().any(|row| row.len() != k) {
        return Err(Error::Shape("every image must have the same landmark count".into()));
    }
    let radii = check_radii(radii_mm)?;
    let per_landmark = (0..k)
        .map(|j| errors.iter().map(|row| row[j]).sum::<f64>() / errors.len() as f64)
        .collect();
    Ok(MetricsReport {
        mre_mm: flat.iter().sum::<f64>() / flat.len() as f64,
        sdr: Sdr(radii.iter().map(|r| (*r, success_rate(&flat, *r))).collect()),
        per_landmark,
        n_images: errors.len(),
        n_landmarks: k,
    })
}
