//! Seeded fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssod_core::evaluator::{GroundTruth, Prediction};
use ssod_core::pipeline::Trainer;
use ssod_core::{BBox, RunConfig};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` boxes on a 40x40 canvas, clustered so that NMS has real work to do.
pub fn clustered_boxes(n: usize, seed: u64) -> (Vec<BBox>, Vec<f64>) {
    let mut r = rng(seed);
    let centers: Vec<(f64, f64)> = (0..8)
        .map(|_| (r.random_range(6.0..34.0), r.random_range(6.0..34.0)))
        .collect();
    let boxes = (0..n)
        .map(|i| {
            let (cx, cy) = centers[i % centers.len()];
            let (dx, dy) = (r.random_range(-2.0..2.0), r.random_range(-2.0..2.0));
            let (w, h) = (r.random_range(4.0..12.0), r.random_range(4.0..12.0));
            BBox::from_center(cx + dx, cy + dy, w, h)
        })
        .collect();
    let scores = (0..n).map(|_| r.random::<f64>()).collect();
    (boxes, scores)
}

/// Ground truth over `images` images and predictions that are noisy copies of it
/// plus uniform false positives.
pub fn detection_case(images: usize, per_image: usize, classes: usize, seed: u64) -> (Vec<Prediction>, Vec<GroundTruth>) {
    let mut r = rng(seed);
    let mut gts = Vec::new();
    let mut preds = Vec::new();
    for image in 0..images {
        for _ in 0..per_image {
            let b = BBox::from_center(r.random_range(6.0..34.0), r.random_range(6.0..34.0), 8.0, 8.0);
            let class = r.random_range(0..classes);
            gts.push(GroundTruth { image, bbox: b, class });
            let d = r.random_range(-2.0..2.0);
            preds.push(Prediction { image, bbox: b.translate(d, d), class, score: r.random() });
            let fp = BBox::from_center(r.random_range(6.0..34.0), r.random_range(6.0..34.0), 6.0, 6.0);
            preds.push(Prediction { image, bbox: fp, class: r.random_range(0..classes), score: r.random() });
        }
    }
    (preds, gts)
}

/// Trainer advanced past burn-in, so each further step runs both pseudo-label streams.
pub fn warm_trainer() -> Trainer {
    let cfg = RunConfig {
        burn_in: 20,
        iterations: 1_000_000,
        ..RunConfig::default()
    };
    let mut t = Trainer::new(cfg).expect("default config is valid");
    for _ in 0..25 {
        t.step().expect("finite warm-up");
    }
    t
}
