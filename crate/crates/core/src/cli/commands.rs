use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{EvalSource, RunConfig, SweepMode};
use super::Command;
use crate::data::{generate_synthetic, load_dataset, read_annotation, rescale_coords, write_dataset};
use crate::data::{DatasetSplit, ImageSample, SynthConfig};
use crate::decode::{cascades_for, fused_product, generate_pseudo_labels, template_anchors};
use crate::encoder::EncoderPair;
use crate::error::{Error, Result};
use crate::grid::{Grid, Point};
use crate::metrics::{radial_errors, summarize_table, MetricsReport};
use crate::rdb::{loss_curve_csv, train_ssl};
use crate::tpl::{train_tpl, Detector};

/// Everything needed to re-run the command that produced a directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: RunConfig,
    /// SHA-256 of each upstream file, keyed by path relative to `--out`.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of each written file, keyed by path relative to the manifest.
    pub outputs: BTreeMap<String, String>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

struct Ctx<'a> {
    config: &'a RunConfig,
    out: &'a Path,
}

impl Ctx<'_> {
    fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.out.join(rel)
    }

    fn data_dir(&self) -> PathBuf {
        self.path(&self.config.data_dir)
    }

    fn ssl_checkpoint(&self) -> PathBuf {
        self.path("ssl/encoders.ckpt")
    }

    fn pseudo_dir(&self) -> PathBuf {
        self.path("pseudo_labels")
    }

    fn tpl_checkpoint(&self) -> PathBuf {
        self.path("tpl/detector.ckpt")
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(self.out).unwrap_or(p).display().to_string()
    }

    /// Loads the dataset at the configured resolution, honoring `template_id`.
    fn dataset(&self) -> Result<DatasetSplit> {
        let mut split = load_dataset(&self.data_dir(), self.config.image_size())?;
        if let Some(id) = &self.config.template_id {
            if *id != split.template.id {
                let pos = split.unlabeled.iter().position(|s| s.id == *id).ok_or_else(|| {
                    Error::Config(format!("template_id `{id}` is not an unlabeled training image"))
                })?;
                std::mem::swap(&mut split.template, &mut split.unlabeled[pos]);
            }
        }
        Ok(split)
    }

    fn encoders(&self) -> Result<EncoderPair> {
        let enc = EncoderPair::load(&self.ssl_checkpoint())?;
        let expected = self.config.ssl().encoder;
        if *enc.reference.config() != expected {
            return Err(Error::Checkpoint(format!(
                "{} was trained with {:?}, configuration asks for {:?}; re-run `cc2d train-ssl`",
                self.ssl_checkpoint().display(),
                enc.reference.config(),
                expected
            )));
        }
        Ok(enc)
    }

    fn input_hashes(&self, files: &[PathBuf]) -> Result<BTreeMap<String, String>> {
        files.iter().map(|f| Ok((self.rel(f), sha256_file(f)?))).collect()
    }

    /// Hashes `outputs` (relative to `dir`) and writes `dir/manifest.json`.
    fn write_manifest(&self, command: Command, dir: &Path, inputs: &[PathBuf], outputs: &[PathBuf]) -> Result<()> {
        let outputs = outputs
            .iter()
            .map(|p| {
                let rel = p.strip_prefix(dir).unwrap_or(p).display().to_string();
                Ok((rel, sha256_file(p)?))
            })
            .collect::<Result<_>>()?;
        let manifest = Manifest {
            command: command.name().into(),
            seed: self.config.seed,
            config_hash: self.config.hash(),
            config: self.config.clone(),
            inputs: self.input_hashes(inputs)?,
            outputs,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::InvalidInput(e.to_string()))?;
        write_text(&dir.join("manifest.json"), &text)
    }
}

pub(super) fn dispatch(command: Command, config: &RunConfig, out: &Path) -> Result<()> {
    let ctx = Ctx { config, out };
    match command {
        Command::GenData => gen_data(&ctx),
        Command::TrainSsl => cmd_train_ssl(&ctx),
        Command::PseudoLabel => pseudo_label(&ctx),
        Command::TrainTpl => cmd_train_tpl(&ctx),
        Command::Eval => eval(&ctx),
        Command::Viz => viz(&ctx),
        Command::Sweep => sweep(&ctx),
    }
}

fn gen_data(ctx: &Ctx) -> Result<()> {
    let c = ctx.config;
    let size = crate::grid::Size::hw(c.synth_size, c.synth_size);
    let mut synth = SynthConfig::new(c.seed, c.synth_count, c.synth_landmarks, size);
    if let Some(d) = c.synth_max_displacement {
        synth.max_displacement = d;
    }
    synth.noise_std = c.synth_noise_std;
    let split = generate_synthetic(&synth)?;
    let dir = ctx.data_dir();
    write_dataset(&dir, &split)?;
    let mut outputs = vec![dir.join("meta.json")];
    for s in split.all() {
        outputs.push(dir.join("images").join(format!("{}.png", s.id)));
        outputs.push(dir.join("annotations").join(format!("{}.txt", s.id)));
    }
    ctx.write_manifest(Command::GenData, &dir, &[], &outputs)?;
    println!("wrote {} images to {}", split.all().count(), dir.display());
    Ok(())
}

fn cmd_train_ssl(ctx: &Ctx) -> Result<()> {
    let split = ctx.dataset()?;
    let cfg = ctx.config.ssl();
    let every = (cfg.epochs / 10).max(1);
    let outcome = train_ssl(&split, &cfg, ctx.config.seed, |e| {
        if e.epoch % every == 0 || e.epoch + 1 == cfg.epochs {
            eprintln!("train-ssl epoch {}/{} loss {:.4}", e.epoch + 1, cfg.epochs, e.total);
        }
    })?;
    let dir = ctx.path("ssl");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let ckpt = ctx.ssl_checkpoint();
    outcome.encoders.save(&ckpt)?;
    let curve = dir.join("loss_curve.csv");
    write_text(&curve, &loss_curve_csv(&outcome.history))?;
    ctx.write_manifest(Command::TrainSsl, &dir, &[ctx.data_dir().join("meta.json")], &[ckpt.clone(), curve])?;
    println!("wrote {}", ckpt.display());
    Ok(())
}

fn pseudo_label(ctx: &Ctx) -> Result<()> {
    let split = ctx.dataset()?;
    let encoders = ctx.encoders()?;
    let images: Vec<&ImageSample> = split.unlabeled.iter().collect();
    let set = generate_pseudo_labels(&encoders, &split.template, &images, ctx.config.decode())?;
    let dir = ctx.pseudo_dir();
    set.write(&dir, &images)?;
    let mut outputs: Vec<PathBuf> = images.iter().map(|s| dir.join(format!("{}.txt", s.id))).collect();
    outputs.push(dir.join("confidence.csv"));
    ctx.write_manifest(Command::PseudoLabel, &dir, &[ctx.ssl_checkpoint()], &outputs)?;
    println!("wrote {} pseudo-labels to {}", images.len(), dir.display());
    Ok(())
}

/// Annotation files of `samples` from `dir`, mapped to resized space.
fn read_predictions(dir: &Path, samples: &[&ImageSample], producer: &str) -> Result<Vec<Vec<Point>>> {
    samples
        .iter()
        .map(|s| {
            let path = dir.join(format!("{}.txt", s.id));
            if !path.exists() {
                return Err(Error::MissingArtifact {
                    path,
                    producer: producer.into(),
                });
            }
            let native = read_annotation(&path)?;
            if native.len() != s.landmarks.len() {
                return Err(Error::Annotation {
                    path,
                    reason: format!("{} points, expected {}", native.len(), s.landmarks.len()),
                });
            }
            rescale_coords(&native, s.native_size, s.size())
        })
        .collect()
}

fn cmd_train_tpl(ctx: &Ctx) -> Result<()> {
    let split = ctx.dataset()?;
    let unlabeled: Vec<&ImageSample> = split.unlabeled.iter().collect();
    let pseudo = read_predictions(&ctx.pseudo_dir(), &unlabeled, "pseudo-label")?;
    let mut images = vec![&split.template.pixels];
    let mut labels = vec![split.template.landmarks.clone()];
    images.extend(unlabeled.iter().map(|s| &s.pixels));
    labels.extend(pseudo);
    let cfg = ctx.config.tpl(split.num_landmarks());
    let every = (cfg.epochs / 10).max(1);
    let outcome = train_tpl(&images, &labels, &cfg, ctx.config.seed, |e| {
        if e.epoch % every == 0 || e.epoch + 1 == cfg.epochs {
            eprintln!("train-tpl epoch {}/{} loss {:.4}", e.epoch + 1, cfg.epochs, e.total);
        }
    })?;
    let dir = ctx.path("tpl");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let ckpt = ctx.tpl_checkpoint();
    outcome.detector.save(&ckpt)?;
    let mut csv = String::from("epoch,loss_total,loss_heatmap,loss_offset\n");
    for e in &outcome.history {
        let _ = writeln!(csv, "{},{},{},{}", e.epoch, e.total, e.heatmap, e.offset);
    }
    let curve = dir.join("loss_curve.csv");
    write_text(&curve, &csv)?;
    let mut inputs: Vec<PathBuf> = unlabeled.iter().map(|s| ctx.pseudo_dir().join(format!("{}.txt", s.id))).collect();
    inputs.push(ctx.data_dir().join("meta.json"));
    ctx.write_manifest(Command::TrainTpl, &dir, &inputs, &[ckpt.clone(), curve])?;
    println!("wrote {}", ckpt.display());
    Ok(())
}

fn report_for(samples: &[&ImageSample], preds: &[Vec<Point>], radii: &[f64]) -> Result<MetricsReport> {
    let errors = samples
        .iter()
        .zip(preds)
        .map(|(s, p)| radial_errors(p, &s.landmarks, s.native_size, s.size(), s.spacing_mm))
        .collect::<Result<Vec<_>>>()?;
    summarize_table(&errors, radii)
}

/// Cascade-decoded test-split metrics of `encoders`; shared by `eval` with
/// `eval_source = "ssl"` and by every sweep cell.
pub fn ssl_test_report(config: &RunConfig, split: &DatasetSplit, encoders: &EncoderPair) -> Result<MetricsReport> {
    let test: Vec<&ImageSample> = split.test.iter().collect();
    if test.is_empty() {
        return Err(Error::InvalidInput("the dataset has no test images".into()));
    }
    let set = generate_pseudo_labels(encoders, &split.template, &test, config.decode())?;
    let preds: Vec<Vec<Point>> = set.labels.into_iter().map(|l| l.points).collect();
    report_for(&test, &preds, &config.radii_mm)
}

fn eval(ctx: &Ctx) -> Result<()> {
    let split = ctx.dataset()?;
    let test: Vec<&ImageSample> = split.test.iter().collect();
    let source = ctx.config.eval_source;
    let (report, inputs) = match source {
        EvalSource::Ssl => (ssl_test_report(ctx.config, &split, &ctx.encoders()?)?, vec![ctx.ssl_checkpoint()]),
        EvalSource::Tpl => {
            let det = Detector::load(&ctx.tpl_checkpoint())?;
            let preds = test
                .iter()
                .map(|s| {
                    det.predict(&s.pixels).map_err(|e| Error::PerImage {
                        id: s.id.clone(),
                        source: Box::new(e),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            (report_for(&test, &preds, &ctx.config.radii_mm)?, vec![ctx.tpl_checkpoint()])
        }
        EvalSource::PseudoLabels => {
            let unlabeled: Vec<&ImageSample> = split.unlabeled.iter().collect();
            let preds = read_predictions(&ctx.pseudo_dir(), &unlabeled, "pseudo-label")?;
            let inputs = unlabeled.iter().map(|s| ctx.pseudo_dir().join(format!("{}.txt", s.id))).collect();
            (report_for(&unlabeled, &preds, &ctx.config.radii_mm)?, inputs)
        }
        EvalSource::Annotations => {
            let dir = ctx
                .config
                .eval_predictions
                .as_ref()
                .map(|p| ctx.path(p))
                .ok_or_else(|| Error::Config("eval_source = \"annotations\" needs eval_predictions".into()))?;
            let preds = read_predictions(&dir, &test, "eval")?;
            let inputs = test.iter().map(|s| dir.join(format!("{}.txt", s.id))).collect();
            (report_for(&test, &preds, &ctx.config.radii_mm)?, inputs)
        }
    };
    let name = serde_json::to_value(source).expect("enum serializes");
    let dir = ctx.path("eval").join(name.as_str().expect("string tag"));
    let json = dir.join("report.json");
    write_text(&json, &report.to_json()?)?;
    let csv = dir.join("report.csv");
    write_text(&csv, &format!("{}\n{}\n", report.csv_header(), report.csv_row()))?;
    ctx.write_manifest(Command::Eval, &dir, &inputs, &[json.clone(), csv])?;
    println!("{}", report.to_json()?);
    Ok(())
}

fn write_png8(path: &Path, grid: &Grid<f64>, lo: f64, hi: f64) -> Result<()> {
    let raw: Vec<u8> = grid
        .as_slice()
        .iter()
        .map(|v| (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = image::GrayImage::from_raw(grid.width() as u32, grid.height() as u32, raw)
        .ok_or_else(|| Error::Shape("image buffer size".into()))?;
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn viz(ctx: &Ctx) -> Result<()> {
    let split = ctx.dataset()?;
    let encoders = ctx.encoders()?;
    let sample = match &ctx.config.viz_image {
        Some(id) => split
            .find(id)
            .ok_or_else(|| Error::Config(format!("viz_image `{id}` is not in the dataset")))?,
        None => split.test.first().or(split.unlabeled.first()).unwrap_or(&split.template),
    };
    let k = ctx.config.viz_landmark;
    if k >= split.num_landmarks() {
        return Err(Error::Config(format!(
            "viz_landmark {k} out of range for {} landmarks",
            split.num_landmarks()
        )));
    }
    let anchors = template_anchors(&encoders, &split.template)?;
    let cascade = cascades_for(&encoders, &anchors[k..=k], sample)?.remove(0);
    let dir = ctx.path("viz");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut outputs = Vec::new();
    let image = dir.join("image.png");
    write_png8(&image, &sample.pixels.map(|v| v as f64), 0.0, 1.0)?;
    outputs.push(image);
    for (i, level) in cascade.levels.iter().enumerate() {
        let p = dir.join(format!("level_{i}.png"));
        write_png8(&p, level, -1.0, 1.0)?;
        outputs.push(p);
    }
    let fused = fused_product(&cascade.levels)?;
    let max = fused.as_slice().iter().cloned().fold(0.0, f64::max);
    let p = dir.join("fused.png");
    write_png8(&p, &fused, 0.0, if max > 0.0 { max } else { 1.0 })?;
    outputs.push(p);
    ctx.write_manifest(Command::Viz, &dir, &[ctx.ssl_checkpoint()], &outputs)?;
    println!("wrote {} maps for {} landmark {k} to {}", outputs.len(), sample.id, dir.display());
    Ok(())
}

fn sweep_cells(config: &RunConfig) -> Vec<(f64, f64)> {
    match config.sweep_mode {
        SweepMode::Axes => config
            .sweep_alphas
            .iter()
            .map(|a| (*a, config.beta))
            .chain(config.sweep_betas.iter().map(|b| (config.alpha, *b)))
            .collect(),
        SweepMode::Grid => config
            .sweep_alphas
            .iter()
            .flat_map(|a| config.sweep_betas.iter().map(move |b| (*a, *b)))
            .collect(),
    }
}

fn sweep(ctx: &Ctx) -> Result<()> {
    let c = ctx.config;
    if c.sweep_alphas.is_empty() || c.sweep_betas.is_empty() {
        return Err(Error::Config("sweep needs at least one α and one β".into()));
    }
    let split = ctx.dataset()?;
    let cells = sweep_cells(c);
    let mut done: Vec<((f64, f64), std::result::Result<MetricsReport, String>)> = Vec::new();
    let mut csv = String::from("alpha,beta,mre_mm");
    for r in &c.radii_mm {
        let _ = write!(csv, ",sdr_{}", crate::metrics::radius_key(*r));
    }
    csv.push_str(",status\n");
    for (i, &(alpha, beta)) in cells.iter().enumerate() {
        let result = match done.iter().find(|(k, _)| *k == (alpha, beta)) {
            Some((_, r)) => r.clone(),
            None => {
                let mut cell = c.clone();
                cell.alpha = alpha;
                cell.beta = beta;
                let r = cell
                    .validate()
                    .and_then(|_| train_ssl(&split, &cell.ssl(), cell.seed, |_| {}))
                    .and_then(|o| ssl_test_report(&cell, &split, &o.encoders))
                    .map_err(|e| format!("error[{}]: {}", e.category(), e.to_string().replace([',', '\n'], ";")));
                done.push(((alpha, beta), r.clone()));
                r
            }
        };
        eprintln!("sweep cell {}/{} alpha={alpha} beta={beta}: {}", i + 1, cells.len(), match &result {
            Ok(r) => format!("MRE {:.4} mm", r.mre_mm),
            Err(e) => e.clone(),
        });
        let _ = write!(csv, "{alpha},{beta}");
        match result {
            Ok(r) => {
                let _ = writeln!(csv, ",{},ok", r.csv_row());
            }
            Err(e) => {
                let _ = writeln!(csv, "{},{e}", ",".repeat(c.radii_mm.len() + 1));
            }
        }
    }
    let dir = ctx.path("sweep");
    let path = dir.join("sweep.csv");
    write_text(&path, &csv)?;
    ctx.write_manifest(Command::Sweep, &dir, &[ctx.data_dir().join("meta.json")], &[path.clone()])?;
    println!("wrote {}", path.display());
    Ok(())
}
