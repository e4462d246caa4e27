//! The desk-scale end-to-end experiment: synthetic data, SSL with and
//! without the distance bias, pseudo-labels and a detector, over 3 seeds.

use std::time::Instant;

use cc2d::augment::AugmentConfig;
use cc2d::data::{generate_synthetic, DatasetSplit, ImageSample, SynthConfig};
use cc2d::decode::{generate_pseudo_labels, DecodeMode};
use cc2d::encoder::{EncoderConfig, EncoderPair};
use cc2d::grid::{Point, Size};
use cc2d::rdb::{train_ssl, EpochLoss, LossConfig, SslConfig};
use cc2d::tpl::{train_tpl, NetConfig, TplConfig};

pub const SEEDS: [u64; 3] = [1, 2, 3];
pub const BUDGET_SECS: f64 = 30.0 * 60.0;

pub fn ssl_config(alpha: f64) -> SslConfig {
    SslConfig {
        image_size: Size::hw(192, 192),
        patch_size: Size::hw(96, 96),
        loss: LossConfig {
            alpha,
            levels: 4,
            ..LossConfig::default()
        },
        encoder: EncoderConfig {
            levels: 4,
            widths: vec![8, 16, 32, 64],
            embed_dim: 32,
        },
        epochs: 300,
        anchors_per_patch: 8,
        augment: AugmentConfig::default(),
        ..SslConfig::default()
    }
}

pub fn tpl_config() -> TplConfig {
    TplConfig {
        image_size: Size::hw(192, 192),
        radius: 10.0,
        net: NetConfig {
            depth: 4,
            base_width: 8,
            stem: 2,
            num_landmarks: 5,
        },
        epochs: 300,
        batch_size: 8,
        lr: 1e-2,
        jitter: Some(AugmentConfig::default()),
    }
}

pub fn dataset(seed: u64) -> DatasetSplit {
    generate_synthetic(&SynthConfig::new(seed, 32, 5, Size::hw(192, 192))).unwrap()
}

/// Mean pixel distance between predictions and annotations.
pub fn mre_px(samples: &[&ImageSample], preds: &[Vec<Point>]) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for (s, p) in samples.iter().zip(preds) {
        for (a, b) in p.iter().zip(&s.landmarks) {
            total += a.distance(*b);
            n += 1;
        }
    }
    total / n as f64
}

pub struct SeedResult {
    pub seed: u64,
    pub history: Vec<EpochLoss>,
    pub pseudo_mre_rdb: f64,
    pub pseudo_mre_plain: f64,
    pub ssl_test_mre: f64,
    pub tpl_test_mre: f64,
    pub seconds: f64,
}

fn predict(enc: &EncoderPair, split: &DatasetSplit, samples: &[&ImageSample]) -> Vec<Vec<Point>> {
    generate_pseudo_labels(enc, &split.template, samples, DecodeMode::Product)
        .unwrap()
        .labels
        .into_iter()
        .map(|l| l.points)
        .collect()
}

pub fn run_seed(seed: u64) -> SeedResult {
    let start = Instant::now();
    let split = dataset(seed);
    let unlabeled: Vec<&ImageSample> = split.unlabeled.iter().collect();
    let test: Vec<&ImageSample> = split.test.iter().collect();

    let rdb = train_ssl(&split, &ssl_config(0.1), seed, |_| {}).unwrap();
    let pseudo = predict(&rdb.encoders, &split, &unlabeled);
    let pseudo_mre_rdb = mre_px(&unlabeled, &pseudo);
    let ssl_test_mre = mre_px(&test, &predict(&rdb.encoders, &split, &test));

    let plain = train_ssl(&split, &ssl_config(0.0), seed, |_| {}).unwrap();
    let pseudo_mre_plain = mre_px(&unlabeled, &predict(&plain.encoders, &split, &unlabeled));

    let mut images = vec![&split.template.pixels];
    let mut labels = vec![split.template.landmarks.clone()];
    images.extend(unlabeled.iter().map(|s| &s.pixels));
    labels.extend(pseudo);
    let tpl = train_tpl(&images, &labels, &tpl_config(), seed, |_| {}).unwrap();
    let tpl_preds: Vec<Vec<Point>> = test.iter().map(|s| tpl.detector.predict(&s.pixels).unwrap()).collect();
    let tpl_test_mre = mre_px(&test, &tpl_preds);

    SeedResult {
        seed,
        history: rdb.history,
        pseudo_mre_rdb,
        pseudo_mre_plain,
        ssl_test_mre,
        tpl_test_mre,
        seconds: start.elapsed().as_secs_f64(),
    }
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Means of consecutive 10-epoch blocks of the median-over-seeds loss curve
/// for epochs 0..50.
pub fn block_means(results: &[SeedResult]) -> Vec<f64> {
    let curve: Vec<f64> = (0..50)
        .map(|e| median(results.iter().map(|r| r.history[e].total).collect()))
        .collect();
    curve.chunks(10).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
}

pub fn run_criterion_6() -> Result<String, String> {
    let results: Vec<SeedResult> = SEEDS
        .iter()
        .map(|s| {
            let r = run_seed(*s);
            println!(
                "  seed {}: pseudo-label MRE {:.2} px (alpha 0.1) vs {:.2} px (alpha 0); test MRE SSL {:.2} px, TPL {:.2} px; {:.0} s",
                r.seed, r.pseudo_mre_rdb, r.pseudo_mre_plain, r.ssl_test_mre, r.tpl_test_mre, r.seconds
            );
            r
        })
        .collect();
    let blocks = block_means(&results);
    let a = blocks.windows(2).all(|w| w[1] < w[0]);
    let med_rdb = median(results.iter().map(|r| r.pseudo_mre_rdb).collect());
    let med_plain = median(results.iter().map(|r| r.pseudo_mre_plain).collect());
    let b = med_rdb <= med_plain;
    let med_ssl = median(results.iter().map(|r| r.ssl_test_mre).collect());
    let med_tpl = median(results.iter().map(|r| r.tpl_test_mre).collect());
    let c = med_tpl <= 1.1 * med_ssl;
    let slowest = results.iter().map(|r| r.seconds).fold(0.0, f64::max);
    let budget = slowest <= BUDGET_SECS;
    let blocks_txt: Vec<String> = blocks.iter().map(|v| format!("{v:.3}")).collect();
    let detail = format!(
        "(a) {} 10-epoch block means of the median loss [{}]; (b) {} median pseudo-label MRE {med_rdb:.2} px (alpha 0.1) vs {med_plain:.2} px (alpha 0); (c) {} median TPL MRE {med_tpl:.2} px vs 1.1 x SSL {:.2} px; budget {} slowest seed {slowest:.0} s (<= {BUDGET_SECS:.0} s)",
        pf(a),
        blocks_txt.join(", "),
        pf(b),
        pf(c),
        1.1 * med_ssl,
        pf(budget)
    );
    if a && b && c && budget {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn pf(ok: bool) -> &'static str {
    if ok {
        "pass:"
    } else {
        "FAIL:"
    }
}
