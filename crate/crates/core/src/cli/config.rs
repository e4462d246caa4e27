//! Flat key-value run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentConfig;
use crate::decode::DecodeMode;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::grid::Size;
use crate::rdb::{BiasMode, LossConfig, SslConfig};
use crate::tpl::{NetConfig, TplConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeKind {
    Product,
    Windowed,
}

/// Which predictions `eval` scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalSource {
    /// Detector on the test split.
    Tpl,
    /// Cascade decoding on the test split.
    Ssl,
    /// Written pseudo-labels against the unlabeled split's annotations.
    PseudoLabels,
    /// Annotation files in `eval_predictions` against the test split.
    Annotations,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepMode {
    /// Vary α at the configured β, then β at the configured α.
    Axes,
    /// Every (α, β) pair.
    Grid,
}

/// Every knob of the pipeline. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Dataset directory; relative paths resolve against `--out`.
    pub data_dir: PathBuf,
    /// Overrides the template named in `meta.json`.
    pub template_id: Option<String>,

    pub synth_count: usize,
    pub synth_landmarks: usize,
    pub synth_size: usize,
    pub synth_max_displacement: Option<f64>,
    pub synth_noise_std: f64,

    pub image_size: usize,
    pub patch_size: usize,
    pub margin: Option<usize>,
    pub anchors_per_patch: usize,

    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub matrix_size: usize,
    pub levels: usize,
    pub epsilon: f64,
    pub bias_mode: BiasMode,

    pub widths: Vec<usize>,
    pub embed_dim: usize,

    pub ssl_epochs: usize,
    pub ssl_batch_size: usize,
    pub ssl_lr: f64,
    pub lr_decay: f64,
    pub lr_decay_fraction: f64,
    pub max_rotation_deg: f64,
    pub brightness: f64,
    pub contrast: [f64; 2],
    pub gamma: [f64; 2],

    pub decode_mode: DecodeKind,
    pub decode_radius: usize,

    pub tpl_radius: f64,
    pub tpl_depth: usize,
    pub tpl_width: usize,
    pub tpl_stem: usize,
    pub tpl_epochs: usize,
    pub tpl_batch_size: usize,
    pub tpl_lr: f64,
    pub tpl_jitter: bool,

    pub radii_mm: Vec<f64>,
    pub eval_source: EvalSource,
    pub eval_predictions: Option<PathBuf>,

    /// Image to visualize; defaults to the first test image.
    pub viz_image: Option<String>,
    pub viz_landmark: usize,

    pub sweep_alphas: Vec<f64>,
    pub sweep_betas: Vec<f64>,
    pub sweep_mode: SweepMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        let loss = LossConfig::default();
        let enc = EncoderConfig::default();
        let ssl = SslConfig::default();
        let aug = AugmentConfig::default();
        let tpl = TplConfig::default();
        Self {
            seed: 0,
            data_dir: PathBuf::from("data"),
            template_id: None,
            synth_count: 32,
            synth_landmarks: 5,
            synth_size: 384,
            synth_max_displacement: None,
            synth_noise_std: 0.02,
            image_size: ssl.image_size.width,
            patch_size: ssl.patch_size.width,
            margin: None,
            anchors_per_patch: ssl.anchors_per_patch,
            alpha: loss.alpha,
            beta: loss.beta,
            tau: loss.tau,
            matrix_size: loss.matrix_size.0,
            levels: loss.levels,
            epsilon: loss.epsilon,
            bias_mode: loss.bias_mode,
            widths: enc.widths,
            embed_dim: enc.embed_dim,
            ssl_epochs: ssl.epochs,
            ssl_batch_size: ssl.batch_size,
            ssl_lr: ssl.lr,
            lr_decay: ssl.lr_decay,
            lr_decay_fraction: ssl.lr_decay_fraction,
            max_rotation_deg: aug.max_rotation_deg,
            brightness: aug.brightness,
            contrast: [aug.contrast.0, aug.contrast.1],
            gamma: [aug.gamma.0, aug.gamma.1],
            decode_mode: DecodeKind::Product,
            decode_radius: 2,
            tpl_radius: tpl.radius,
            tpl_depth: tpl.net.depth,
            tpl_width: tpl.net.base_width,
            tpl_stem: tpl.net.stem,
            tpl_epochs: tpl.epochs,
            tpl_batch_size: tpl.batch_size,
            tpl_lr: tpl.lr,
            tpl_jitter: false,
            radii_mm: crate::metrics::CEPH_RADII_MM.to_vec(),
            eval_source: EvalSource::Tpl,
            eval_predictions: None,
            viz_image: None,
            viz_landmark: 0,
            sweep_alphas: vec![0.04, 0.07, 0.10, 0.13, 0.16],
            sweep_betas: vec![0.5, 0.6, 0.7, 0.8, 0.9],
            sweep_mode: SweepMode::Axes,
        }
    }
}

/// Parses the right-hand side of `--set key=value` as a TOML value, falling
/// back to a bare string (so `--set decode_mode=windowed` works unquoted).
fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl RunConfig {
    /// Reads an optional TOML file, applies `key=value` overrides in order,
    /// then the seed override, and validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| Error::Config(format!("{}: {}", p.display(), e.message())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not of the form key=value")))?;
            table.insert(k.trim().to_string(), parse_value(v.trim()));
        }
        if let Some(s) = seed {
            table.insert("seed".into(), toml::Value::Integer(s as i64));
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn image_size(&self) -> Size {
        Size::hw(self.image_size, self.image_size)
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            beta: self.beta,
            tau: self.tau,
            matrix_size: (self.matrix_size, self.matrix_size),
            levels: self.levels,
            epsilon: self.epsilon,
            bias_mode: self.bias_mode,
        }
    }

    pub fn ssl(&self) -> SslConfig {
        SslConfig {
            image_size: self.image_size(),
            patch_size: Size::hw(self.patch_size, self.patch_size),
            loss: self.loss(),
            encoder: EncoderConfig {
                levels: self.levels,
                widths: self.widths.clone(),
                embed_dim: self.embed_dim,
            },
            epochs: self.ssl_epochs,
            batch_size: self.ssl_batch_size,
            lr: self.ssl_lr,
            lr_decay: self.lr_decay,
            lr_decay_fraction: self.lr_decay_fraction,
            augment: AugmentConfig {
                max_rotation_deg: self.max_rotation_deg,
                brightness: self.brightness,
                contrast: (self.contrast[0], self.contrast[1]),
                gamma: (self.gamma[0], self.gamma[1]),
            },
            margin: self.margin,
            anchors_per_patch: self.anchors_per_patch,
        }
    }

    pub fn decode(&self) -> DecodeMode {
        match self.decode_mode {
            DecodeKind::Product => DecodeMode::Product,
            DecodeKind::Windowed => DecodeMode::Windowed {
                radius: self.decode_radius,
            },
        }
    }

    pub fn tpl(&self, num_landmarks: usize) -> TplConfig {
        TplConfig {
            image_size: self.image_size(),
            radius: self.tpl_radius,
            net: NetConfig {
                depth: self.tpl_depth,
                base_width: self.tpl_width,
                stem: self.tpl_stem,
                num_landmarks,
            },
            epochs: self.tpl_epochs,
            batch_size: self.tpl_batch_size,
            lr: self.tpl_lr,
            jitter: self.tpl_jitter.then(|| self.ssl().augment),
        }
    }

    /// Checks every module precondition that does not depend on the data.
    pub fn validate(&self) -> Result<()> {
        self.ssl().validate()?;
        self.tpl(1).validate()?;
        if self.synth_count < 2 || self.synth_landmarks == 0 || self.synth_size < 16 {
            return Err(Error::Config(
                "synthetic data needs >= 2 images, >= 1 landmark and size >= 16".into(),
            ));
        }
        if self.radii_mm.is_empty() || self.radii_mm.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::Config(format!("radii_mm must be non-empty and >= 0, got {:?}", self.radii_mm)));
        }
        for (name, values) in [("sweep_alphas", &self.sweep_alphas), ("sweep_betas", &self.sweep_betas)] {
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip_through_toml() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn overrides_apply_in_order() {
        let c = RunConfig::load(
            None,
            &[
                "alpha=0.2".into(),
                "decode_mode=windowed".into(),
                "widths=[8, 8, 8, 8, 8]".into(),
                "alpha=0.05".into(),
            ],
            Some(9),
        )
        .unwrap();
        assert_eq!(c.alpha, 0.05);
        assert_eq!(c.decode_mode, DecodeKind::Windowed);
        assert_eq!(c.widths, vec![8; 5]);
        assert_eq!(c.seed, 9);
        assert_ne!(c.hash(), RunConfig::default().hash());
    }

    #[test]
    fn bad_values_are_config_errors() {
        for bad in ["no_such_key=1", "tau=-1", "alpha", "levels=3", "matrix_size=18"] {
            let e = RunConfig::load(None, &[bad.into()], None).unwrap_err();
            assert_eq!(e.category(), "config", "{bad}: {e}");
        }
    }
}
