//! Jitter-Bagging: refine a pseudo box by re-predicting jittered copies of it through
//! the teacher and keeping the largest refinement.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detection::ClassScores;
use crate::geometry::{area, jitter, BBox, Canvas};

/// A region head that can re-score and refine an arbitrary box.
pub trait BoxPredictor {
    fn predict<R: Rng + ?Sized>(&self, b: &BBox, rng: &mut R) -> (BBox, ClassScores);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaggingMetric {
    #[default]
    Area,
    /// Highest teacher foreground score of the refined box.
    Score,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterConfig {
    pub n_jitter: usize,
    pub fraction: f64,
    pub metric: BaggingMetric,
}

impl Default for JitterConfig {
    fn default() -> Self {
        Self {
            n_jitter: 10,
            fraction: 0.06,
            metric: BaggingMetric::Area,
        }
    }
}

/// How regression targets are derived from the teacher's post-NMS boxes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegRefinement {
    /// Threshold the raw teacher boxes.
    None,
    /// Keep raw boxes whose jittered refinements agree (low normalized spread).
    BoxJittering,
    #[default]
    JitterBagging,
}

impl RegRefinement {
    pub fn label(self) -> &'static str {
        match self {
            RegRefinement::None => "none",
            RegRefinement::BoxJittering => "box_jittering",
            RegRefinement::JitterBagging => "jitter_bagging",
        }
    }
}

/// Spread threshold for [`RegRefinement::BoxJittering`], as a fraction of box size.
pub const BOX_JITTER_MAX_SPREAD: f64 = 0.02;

/// Jitters `b` `n_jitter` times, refines each copy through `teacher` and keeps the
/// refinement that maximizes the bagging metric (first occurrence on ties).
pub fn refine_box<P, R>(b: &BBox, teacher: &P, cfg: &JitterConfig, canvas: Canvas, rng: &mut R) -> BBox
where
    P: BoxPredictor,
    R: Rng + ?Sized,
{
    assert!(cfg.n_jitter >= 1, "n_jitter must be at least 1");
    let mut best: Option<(f64, BBox)> = None;
    for _ in 0..cfg.n_jitter {
        let j = jitter(b, cfg.fraction, canvas, rng);
        let (refined, scores) = teacher.predict(&j, rng);
        let key = match cfg.metric {
            BaggingMetric::Area => area(&refined),
            BaggingMetric::Score => scores.foreground().0,
        };
        if best.is_none_or(|(k, _)| key > k) {
            best = Some((key, refined));
        }
    }
    best.map(|(_, b)| b).unwrap_or(*b)
}

/// Refines every box, re-scores the refinement through the teacher and keeps those
/// whose foreground score exceeds `tau`.
pub fn refine_set<P, R>(
    boxes: &[BBox],
    teacher: &P,
    cfg: &JitterConfig,
    tau: f64,
    canvas: Canvas,
    rng: &mut R,
) -> Vec<BBox>
where
    P: BoxPredictor,
    R: Rng + ?Sized,
{
    boxes
        .iter()
        .filter_map(|b| {
            let refined = refine_box(b, teacher, cfg, canvas, rng);
            let (_, scores) = teacher.predict(&refined, rng);
            (scores.foreground().0 > tau).then_some(refined)
        })
        .collect()
}

/// Normalized spread of the teacher's refinements of jittered copies of `b`: the mean
/// over corners of the coordinate standard deviation divided by the box side.
pub fn refinement_spread<P, R>(b: &BBox, teacher: &P, cfg: &JitterConfig, canvas: Canvas, rng: &mut R) -> f64
where
    P: BoxPredictor,
    R: Rng + ?Sized,
{
    let samples: Vec<[f64; 4]> = (0..cfg.n_jitter)
        .map(|_| {
            let j = jitter(b, cfg.fraction, canvas, rng);
            teacher.predict(&j, rng).0.coords()
        })
        .collect();
    let n = samples.len() as f64;
    let sides = [b.width(), b.height(), b.width(), b.height()];
    (0..4)
        .map(|k| {
            let m = samples.iter().map(|s| s[k]).sum::<f64>() / n;
            let var = samples.iter().map(|s| (s[k] - m).powi(2)).sum::<f64>() / n;
            var.sqrt() / sides[k].max(1e-9)
        })
        .sum::<f64>()
        / 4.0
}

/// Spread-filtered raw boxes: keeps a box when its refinement spread is below
/// [`BOX_JITTER_MAX_SPREAD`] and its teacher foreground score exceeds `tau`.
pub fn box_jittering_set<P, R>(
    boxes: &[(BBox, f64)],
    teacher: &P,
    cfg: &JitterConfig,
    tau: f64,
    canvas: Canvas,
    rng: &mut R,
) -> Vec<BBox>
where
    P: BoxPredictor,
    R: Rng + ?Sized,
{
    boxes
        .iter()
        .filter(|(_, score)| *score > tau)
        .filter_map(|(b, _)| {
            (refinement_spread(b, teacher, cfg, canvas, rng) < BOX_JITTER_MAX_SPREAD).then_some(*b)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const CANVAS: Canvas = Canvas {
        width: 40.0,
        height: 40.0,
    };

    /// Regression head that returns its input; scores by box width.
    struct Identity;

    impl BoxPredictor for Identity {
        fn predict<R: Rng + ?Sized>(&self, b: &BBox, _rng: &mut R) -> (BBox, ClassScores) {
            let s = (b.width() / 20.0).clamp(0.0, 1.0);
            (*b, ClassScores::new(vec![s, 1.0 - s]).unwrap())
        }
    }

    fn b() -> BBox {
        BBox::new(10.0, 10.0, 20.0, 18.0)
    }

    #[test]
    fn zero_fraction_identity_is_fixed_point() {
        let cfg = JitterConfig {
            fraction: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(refine_box(&b(), &Identity, &cfg, CANVAS, &mut rng), b());
    }

    #[test]
    fn singleton_bag_returns_its_only_sample() {
        let cfg = JitterConfig {
            n_jitter: 1,
            ..Default::default()
        };
        let out = refine_box(&b(), &Identity, &cfg, CANVAS, &mut ChaCha8Rng::seed_from_u64(3));
        let expected = jitter(&b(), cfg.fraction, CANVAS, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(out, expected);
    }

    #[test]
    fn matches_brute_force_enumeration() {
        let cfg = JitterConfig::default();
        for seed in 0..20 {
            let out = refine_box(&b(), &Identity, &cfg, CANVAS, &mut ChaCha8Rng::seed_from_u64(seed));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let samples: Vec<BBox> = (0..10).map(|_| jitter(&b(), 0.06, CANVAS, &mut rng)).collect();
            let mut best = 0;
            for i in 1..samples.len() {
                if area(&samples[i]) > area(&samples[best]) {
                    best = i;
                }
            }
            assert_eq!(out, samples[best]);
        }
    }

    #[test]
    fn score_metric_picks_highest_score() {
        let cfg = JitterConfig {
            metric: BaggingMetric::Score,
            ..Default::default()
        };
        let out = refine_box(&b(), &Identity, &cfg, CANVAS, &mut ChaCha8Rng::seed_from_u64(4));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let widest = (0..10)
            .map(|_| jitter(&b(), 0.06, CANVAS, &mut rng))
            .fold(None, |acc: Option<BBox>, s| match acc {
                Some(a) if a.width() >= s.width() => Some(a),
                _ => Some(s),
            })
            .unwrap();
        assert_eq!(out, widest);
    }

    #[test]
    fn set_edges() {
        let cfg = JitterConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(refine_set(&[], &Identity, &cfg, 0.5, CANVAS, &mut rng).is_empty());
        // widths around 10 score about 0.5, far below 0.9
        assert!(refine_set(&[b(), b()], &Identity, &cfg, 0.9, CANVAS, &mut rng).is_empty());
        assert_eq!(refine_set(&[b()], &Identity, &cfg, 0.1, CANVAS, &mut rng).len(), 1);
    }

    #[test]
    fn deterministic_and_valid() {
        let cfg = JitterConfig::default();
        let boxes = [b(), BBox::new(35.0, 35.0, 40.0, 40.0)];
        let a = refine_set(&boxes, &Identity, &cfg, 0.0, CANVAS, &mut ChaCha8Rng::seed_from_u64(9));
        let c = refine_set(&boxes, &Identity, &cfg, 0.0, CANVAS, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, c);
        for x in a {
            assert!(x.x1() >= 0.0 && x.x2() <= 40.0 && x.y1() >= 0.0 && x.y2() <= 40.0);
        }
    }

    #[test]
    fn identity_spread_is_jitter_spread() {
        let cfg = JitterConfig {
            fraction: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(refinement_spread(&b(), &Identity, &cfg, CANVAS, &mut rng), 0.0);
        let kept = box_jittering_set(&[(b(), 0.95), (b(), 0.2)], &Identity, &cfg, 0.5, CANVAS, &mut rng);
        assert_eq!(kept, vec![b()]);
    }
}
