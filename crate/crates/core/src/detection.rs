//! Scored candidates, foreground scores, class-agnostic NMS and proposal sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::ScoresError;
use crate::geometry::{iou, BBox};

const NORMALIZATION_TOL: f64 = 1e-9;

/// Probabilities over `C` foreground classes followed by one background entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    probs: Vec<f64>,
}

impl ClassScores {
    pub fn new(probs: Vec<f64>) -> Result<Self, ScoresError> {
        if probs.len() < 2 {
            return Err(ScoresError::TooShort(probs.len()));
        }
        for (index, &value) in probs.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(ScoresError::OutOfRange { index, value });
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOL {
            return Err(ScoresError::NotNormalized(sum));
        }
        Ok(Self { probs })
    }

    /// Numerically stable softmax.
    pub fn from_logits(logits: &[f64]) -> Self {
        assert!(logits.len() >= 2, "need at least one foreground and one background logit");
        Self {
            probs: softmax(logits),
        }
    }

    /// Uniform distribution over `num_classes` foreground classes plus background.
    pub fn uniform(num_classes: usize) -> Self {
        let n = num_classes + 1;
        Self {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len() - 1
    }

    pub fn background_index(&self) -> usize {
        self.probs.len() - 1
    }

    pub fn background(&self) -> f64 {
        self.probs[self.background_index()]
    }

    /// Maximum foreground probability and its class. Ties go to the lowest index;
    /// the background entry is never inspected.
    pub fn foreground(&self) -> (f64, usize) {
        let fg = &self.probs[..self.num_classes()];
        let mut best = (fg[0], 0);
        for (i, &p) in fg.iter().enumerate().skip(1) {
            if p > best.0 {
                best = (p, i);
            }
        }
        best
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    Teacher,
    Student,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub bbox: BBox,
    pub scores: ClassScores,
    pub source: Source,
}

impl Candidate {
    pub fn new(bbox: BBox, scores: ClassScores, source: Source) -> Self {
        Self {
            bbox,
            scores,
            source,
        }
    }

    pub fn foreground_score(&self) -> (f64, usize) {
        foreground_score(self)
    }
}

/// Teacher pseudo boxes split into classification targets and regression targets.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub cls_boxes: Vec<(BBox, usize)>,
    pub reg_boxes: Vec<BBox>,
    pub threshold_used: f64,
}

impl PseudoLabelSet {
    pub fn cls_box_list(&self) -> Vec<BBox> {
        self.cls_boxes.iter().map(|(b, _)| *b).collect()
    }
}

pub fn foreground_score(c: &Candidate) -> (f64, usize) {
    c.scores.foreground()
}

/// Greedy class-agnostic NMS over `(box, score)` pairs. Returns kept indices in
/// descending score order; equal scores keep insertion order.
pub fn nms_indices(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    debug_assert_eq!(boxes.len(), scores.len());
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept
            .iter()
            .all(|&k| iou(&boxes[i], &boxes[k]) < iou_threshold)
        {
            kept.push(i);
        }
    }
    kept
}

pub fn nms(cands: &[Candidate], iou_threshold: f64) -> Vec<Candidate> {
    let boxes: Vec<BBox> = cands.iter().map(|c| c.bbox).collect();
    let scores: Vec<f64> = cands.iter().map(|c| foreground_score(c).0).collect();
    nms_indices(&boxes, &scores, iou_threshold)
        .into_iter()
        .map(|i| cands[i].clone())
        .collect()
}

/// Uniform sample without replacement of `min(k, len)` items, in input order.
pub fn sample_proposals<T: Clone, R: Rng + ?Sized>(cands: &[T], k: usize, rng: &mut R) -> Vec<T> {
    if k >= cands.len() {
        return cands.to_vec();
    }
    let mut idx = rand::seq::index::sample(rng, cands.len(), k).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| cands[i].clone()).collect()
}
