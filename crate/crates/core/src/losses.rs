//! Classification, similarity and regression losses with analytic gradients.
//!
//! Classification gradients are taken with respect to the logits that produced each
//! candidate's softmax scores. Score-level losses return gradients with respect to the
//! scores themselves; use [`background_prob_grad`] and [`foreground_score_grad`] to
//! chain them back to logits. Teacher-side quantities are constants.

use serde::{Deserialize, Serialize};

use crate::detection::{Candidate, ClassScores, PseudoLabelSet};
use crate::geometry::{best_match, BBox};
use crate::synth::{Detection, ToyDetector};

/// Minimum IoU for a student box to be assigned to a pseudo box.
pub const ASSIGN_IOU: f64 = 0.5;
const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the pseudo-label terms in the total loss. Not given a value by the
    /// method description; 2.0 is this crate's default.
    pub lambda: f64,
    /// Scale of the background similarity term.
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 2.0,
            beta: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub sup: f64,
    pub pl_weak: f64,
    pub pl_strong: f64,
    pub cls_fg: f64,
    pub cls_bg: f64,
    pub bg_sim: f64,
    pub fg_bg_dissim: f64,
    pub reg: f64,
}

impl LossBreakdown {
    /// `|total - (sup + lambda * (pl_weak + pl_strong))|`.
    pub fn recomposition_error(&self, lambda: f64) -> f64 {
        (self.total - (self.sup + lambda * (self.pl_weak + self.pl_strong))).abs()
    }

    pub fn is_finite(&self) -> bool {
        [
            self.total,
            self.sup,
            self.pl_weak,
            self.pl_strong,
            self.cls_fg,
            self.cls_bg,
            self.bg_sim,
            self.fg_bg_dissim,
            self.reg,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

pub fn compose_total(sup: f64, pl_weak: f64, pl_strong: f64, lambda: f64) -> LossBreakdown {
    LossBreakdown {
        total: sup + lambda * (pl_weak + pl_strong),
        sup,
        pl_weak,
        pl_strong,
        ..Default::default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossEntropy {
    pub loss: f64,
    /// `softmax - onehot`.
    pub grad_logits: Vec<f64>,
    /// The target probability was zero and got floored before the log.
    pub clamped: bool,
}

pub fn cross_entropy(scores: &ClassScores, target: usize) -> CrossEntropy {
    let p = scores.probs();
    assert!(target < p.len(), "target class {target} out of range");
    let clamped = p[target] < PROB_FLOOR;
    let loss = -p[target].max(PROB_FLOOR).ln();
    let mut grad_logits = p.to_vec();
    grad_logits[target] -= 1.0;
    CrossEntropy {
        loss,
        grad_logits,
        clamped,
    }
}

/// Loss value with one logit-gradient row per input candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct ClsLoss {
    pub value: f64,
    pub grad_logits: Vec<Vec<f64>>,
}

impl ClsLoss {
    fn zero(cands: &[Candidate]) -> Self {
        Self {
            value: 0.0,
            grad_logits: cands
                .iter()
                .map(|c| vec![0.0; c.scores.probs().len()])
                .collect(),
        }
    }
}

/// Class target for a student box: the class of the max-IoU pseudo box when the
/// overlap reaches [`ASSIGN_IOU`], otherwise background.
pub fn assigned_class(b: &BBox, pseudo: &[(BBox, usize)], background: usize) -> usize {
    let boxes: Vec<BBox> = pseudo.iter().map(|(b, _)| *b).collect();
    best_match(b, &boxes, ASSIGN_IOU)
        .map(|(i, _)| pseudo[i].1)
        .unwrap_or(background)
}

/// Mean cross-entropy of student foreground candidates against their assigned
/// pseudo classes.
pub fn loss_cls_fg(fg_cands: &[Candidate], pseudo: &PseudoLabelSet) -> ClsLoss {
    if fg_cands.is_empty() {
        return ClsLoss::zero(fg_cands);
    }
    let n = fg_cands.len() as f64;
    let mut out = ClsLoss::zero(fg_cands);
    for (c, g) in fg_cands.iter().zip(out.grad_logits.iter_mut()) {
        let target = assigned_class(&c.bbox, &pseudo.cls_boxes, c.scores.background_index());
        let ce = cross_entropy(&c.scores, target);
        out.value += ce.loss / n;
        for (gi, ci) in g.iter_mut().zip(ce.grad_logits) {
            *gi = ci / n;
        }
    }
    out
}

/// Normalized reliability weights; an all-zero vector falls back to uniform weights.
pub fn reliability_weights(reliabilities: &[f64]) -> Vec<f64> {
    let total: f64 = reliabilities.iter().sum();
    let n = reliabilities.len() as f64;
    if total > 0.0 {
        reliabilities.iter().map(|r| r / total).collect()
    } else {
        vec![1.0 / n; reliabilities.len()]
    }
}

/// Reliability-weighted cross-entropy toward the background class.
pub fn loss_cls_bg(bg_cands: &[Candidate], reliabilities: &[f64]) -> ClsLoss {
    assert_eq!(
        bg_cands.len(),
        reliabilities.len(),
        "one reliability per background candidate"
    );
    if bg_cands.is_empty() {
        return ClsLoss::zero(bg_cands);
    }
    let weights = reliability_weights(reliabilities);
    let mut out = ClsLoss::zero(bg_cands);
    for ((c, w), g) in bg_cands.iter().zip(&weights).zip(out.grad_logits.iter_mut()) {
        let ce = cross_entropy(&c.scores, c.scores.background_index());
        out.value += w * ce.loss;
        for (gi, ci) in g.iter_mut().zip(ce.grad_logits) {
            *gi = w * ci;
        }
    }
    out
}

/// Teacher background probability for each student box, scored on the student's
/// region features.
pub fn reliability_scores(bg_cands: &[Detection], teacher: &ToyDetector) -> Vec<f64> {
    bg_cands
        .iter()
        .map(|d| teacher.classify(&d.features).background())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreLoss {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `mean_i beta * ln(|e^|s_i| - e^|t_i|| + 1)`, gradient with respect to the student
/// scores `s`. The inner absolute values are no-ops on probabilities.
pub fn loss_bg_sim(s_bg: &[f64], t_bg: &[f64], beta: f64) -> ScoreLoss {
    assert_eq!(s_bg.len(), t_bg.len(), "student/teacher score lengths differ");
    if s_bg.is_empty() {
        return ScoreLoss {
            value: 0.0,
            grad: Vec::new(),
        };
    }
    let n = s_bg.len() as f64;
    let mut value = 0.0;
    let grad = s_bg
        .iter()
        .zip(t_bg)
        .map(|(&s, &t)| {
            let u = s.abs().exp();
            let v = t.abs().exp();
            let d = u - v;
            value += beta * (d.abs() + 1.0).ln() / n;
            beta * sign(d) * u * sign(s) / (d.abs() + 1.0) / n
        })
        .collect();
    ScoreLoss { value, grad }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DissimLoss {
    pub value: f64,
    pub grad_fg: Vec<f64>,
    pub grad_bg: Vec<f64>,
}

/// `mean_i (1 - |s_fg_i - mean(s_bg)|)`; an empty background side has mean 0.
pub fn loss_fg_bg_dissim(s_fg: &[f64], s_bg: &[f64]) -> DissimLoss {
    if s_fg.is_empty() {
        return DissimLoss {
            value: 0.0,
            grad_fg: Vec::new(),
            grad_bg: vec![0.0; s_bg.len()],
        };
    }
    let nf = s_fg.len() as f64;
    let m = if s_bg.is_empty() {
        0.0
    } else {
        s_bg.iter().sum::<f64>() / s_bg.len() as f64
    };
    let mut value = 0.0;
    let mut sign_sum = 0.0;
    let grad_fg = s_fg
        .iter()
        .map(|&s| {
            let d = s - m;
            value += (1.0 - d.abs()) / nf;
            sign_sum += sign(d);
            -sign(d) / nf
        })
        .collect();
    let grad_bg = if s_bg.is_empty() {
        Vec::new()
    } else {
        vec![sign_sum / nf / s_bg.len() as f64; s_bg.len()]
    };
    DissimLoss {
        value,
        grad_fg,
        grad_bg,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegLoss {
    pub value: f64,
    /// Gradient with respect to each refined box's `(x1, y1, x2, y2)`.
    pub grad: Vec<[f64; 4]>,
    /// Number of refined boxes that found a target.
    pub matched: usize,
}

/// Mean absolute coordinate error between each refined box and its max-IoU target.
/// Boxes without a target at [`ASSIGN_IOU`] contribute nothing.
pub fn loss_reg(refined_fg: &[BBox], targets: &[BBox]) -> RegLoss {
    let assignments: Vec<Option<usize>> = refined_fg
        .iter()
        .map(|b| best_match(b, targets, ASSIGN_IOU).map(|(i, _)| i))
        .collect();
    let matched = assignments.iter().filter(|a| a.is_some()).count();
    let mut out = RegLoss {
        value: 0.0,
        grad: vec![[0.0; 4]; refined_fg.len()],
        matched,
    };
    if matched == 0 {
        return out;
    }
    let scale = 1.0 / (4.0 * matched as f64);
    for ((b, a), g) in refined_fg.iter().zip(&assignments).zip(out.grad.iter_mut()) {
        let Some(t) = a else { continue };
        let (bc, tc) = (b.coords(), targets[*t].coords());
        for k in 0..4 {
            let r = bc[k] - tc[k];
            out.value += r.abs() * scale;
            g[k] = sign(r) * scale;
        }
    }
    out
}

/// d p_bg / d logits for softmax scores.
pub fn background_prob_grad(scores: &ClassScores) -> Vec<f64> {
    let p = scores.probs();
    let bg = scores.background_index();
    softmax_column(p, bg)
}

/// d (max foreground prob) / d logits, at the argmax class.
pub fn foreground_score_grad(scores: &ClassScores) -> Vec<f64> {
    let (_, k) = scores.foreground();
    softmax_column(scores.probs(), k)
}

fn softmax_column(p: &[f64], k: usize) -> Vec<f64> {
    p.iter()
        .enumerate()
        .map(|(j, &pj)| if j == k { p[k] * (1.0 - pj) } else { -p[k] * pj })
        .collect()
}
