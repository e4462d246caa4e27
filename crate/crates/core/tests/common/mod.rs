//! Independent oracles and fixtures shared by the integration tests.

#![allow(dead_code)]

pub mod desk;

use std::path::Path;

use rand::Rng as _;

use cc2d::grid::{Grid, Size};
use cc2d::rng::Rng;

/// MRE and per-radius success percentages by sorting and counting.
pub fn brute_force_summary(errors: &[f64], radii: &[f64]) -> (f64, Vec<f64>) {
    let mut total = 0.0;
    for e in errors {
        total += e;
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut radii = radii.to_vec();
    radii.sort_by(f64::total_cmp);
    let sdr = radii
        .iter()
        .map(|r| {
            let mut count = 0usize;
            while count < sorted.len() && sorted[count] <= *r {
                count += 1;
            }
            100.0 * count as f64 / errors.len() as f64
        })
        .collect();
    (total / errors.len() as f64, sdr)
}

fn level_size(finest: Size, level: usize) -> Size {
    let d = 1usize << level;
    Size::hw(finest.height.div_ceil(d), finest.width.div_ceil(d))
}

/// `levels` similarity grids, finest first, halving with ceil.
pub fn random_cascade(rng: &mut Rng, finest: Size, levels: usize) -> Vec<Grid<f64>> {
    (0..levels)
        .map(|i| Grid::from_fn(level_size(finest, i), |_, _| rng.gen_range(-1.0..=1.0)))
        .collect()
}

/// Cascade whose every level peaks at the same location (value 1) over a
/// background of at most 0.1.
pub fn shared_peak_cascade(rng: &mut Rng, finest: Size, levels: usize) -> Vec<Grid<f64>> {
    let (px, py) = (rng.gen_range(0..finest.width), rng.gen_range(0..finest.height));
    (0..levels)
        .map(|i| {
            Grid::from_fn(level_size(finest, i), |x, y| {
                if (x, y) == (px >> i, py >> i) {
                    1.0
                } else {
                    rng.gen_range(-1.0..=0.1)
                }
            })
        })
        .collect()
}

fn sample(grid: &Grid<f64>, u: f64, v: f64) -> f64 {
    let u = u.max(0.0).min((grid.width() - 1) as f64);
    let v = v.max(0.0).min((grid.height() - 1) as f64);
    let (x0, y0) = (u as usize, v as usize);
    let (x1, y1) = ((x0 + 1).min(grid.width() - 1), (y0 + 1).min(grid.height() - 1));
    let (a, b) = (u - x0 as f64, v - y0 as f64);
    let c = |x, y| grid.get(x, y).clamp(0.0, 1.0);
    (c(x0, y0) * (1.0 - a) + c(x1, y0) * a) * (1.0 - b) + (c(x0, y1) * (1.0 - a) + c(x1, y1) * a) * b
}

/// Materializes the clamped product over the finest grid and scans it.
pub fn brute_force_product_argmax(levels: &[Grid<f64>]) -> (usize, usize, f64) {
    let finest = levels[0].size();
    let mut best = (0, 0, f64::NEG_INFINITY);
    for y in 0..finest.height {
        for x in 0..finest.width {
            let mut p = 1.0;
            for (i, g) in levels.iter().enumerate() {
                let s = (1usize << i) as f64;
                p *= sample(g, (x as f64 + 0.5) / s - 0.5, (y as f64 + 0.5) / s - 0.5);
            }
            if p > best.2 {
                best = (x, y, p);
            }
        }
    }
    best
}

/// `--set` arguments for a run small enough for the test suite.
pub fn tiny_overrides() -> Vec<String> {
    [
        "synth_count=8",
        "synth_landmarks=3",
        "synth_size=96",
        "image_size=96",
        "patch_size=48",
        "levels=3",
        "widths=[4, 4, 8]",
        "embed_dim=8",
        "ssl_epochs=2",
        "ssl_batch_size=4",
        "tpl_epochs=2",
        "tpl_width=4",
        "tpl_depth=2",
        "tpl_stem=1",
        "tpl_radius=6.0",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

pub fn cli(out: &Path, extra: &[&str], command: &str) -> cc2d::Result<()> {
    let mut args: Vec<String> = vec!["cc2d".into(), "--out".into(), out.display().to_string()];
    for o in tiny_overrides().iter().map(String::as_str).chain(extra.iter().copied()) {
        args.push("--set".into());
        args.push(o.into());
    }
    args.push(command.into());
    cc2d::cli::run(args)
}

/// Runs gen-data and train-ssl twice with one seed and compares artifacts.
pub fn cli_runs_are_identical() -> Result<String, String> {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        for cmd in ["gen-data", "train-ssl"] {
            cli(d.path(), &["seed=11"], cmd).map_err(|e| format!("{cmd}: {e}"))?;
        }
    }
    for file in ["data/manifest.json", "ssl/manifest.json", "ssl/loss_curve.csv", "ssl/encoders.ckpt"] {
        let a = std::fs::read(dirs[0].path().join(file)).map_err(|e| format!("{file}: {e}"))?;
        let b = std::fs::read(dirs[1].path().join(file)).map_err(|e| format!("{file}: {e}"))?;
        if a != b {
            return Err(format!("{file} differs between runs"));
        }
    }
    Ok("manifests, loss curve and checkpoint bit-identical".into())
}

/// Axes sweep over the Table-2 grids on a tiny synthetic dataset.
pub fn sweep_table() -> Result<String, String> {
    let dir = tempfile::tempdir().unwrap();
    cli(dir.path(), &[], "gen-data").map_err(|e| e.to_string())?;
    cli(dir.path(), &["ssl_epochs=1"], "sweep").map_err(|e| e.to_string())?;
    let text = std::fs::read_to_string(dir.path().join("sweep/sweep.csv")).map_err(|e| e.to_string())?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let expected_header = "alpha,beta,mre_mm,sdr_2.0,sdr_2.5,sdr_3.0,sdr_4.0,sdr_6.0,sdr_8.0,status";
    if header != expected_header {
        return Err(format!("header `{header}`"));
    }
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let cells: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| (r[0].parse().unwrap(), r[1].parse().unwrap()))
        .collect();
    let mut expected: Vec<(f64, f64)> = [0.04, 0.07, 0.10, 0.13, 0.16].iter().map(|a| (*a, 0.7)).collect();
    expected.extend([0.5, 0.6, 0.7, 0.8, 0.9].iter().map(|b| (0.1, *b)));
    if cells != expected {
        return Err(format!("cells {cells:?}"));
    }
    let failures = rows.iter().filter(|r| r.last() != Some(&"ok")).count();
    let finite = rows.iter().all(|r| r[2].parse::<f64>().map_or(false, f64::is_finite));
    if failures > 0 || !finite {
        return Err(format!("{failures} failed cells:\n{text}"));
    }
    Ok(format!("{} rows (5 alpha at beta=0.7, 5 beta at alpha=0.1), 0 failed cells", rows.len()))
}
