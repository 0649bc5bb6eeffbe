//! Detection AP/mAP and pseudo-label quality metrics.

use serde::{Deserialize, Serialize};

use crate::geometry::{iou, BBox};
use crate::losses::LossBreakdown;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image: usize,
    pub bbox: BBox,
    pub class: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image: usize,
    pub bbox: BBox,
    pub class: usize,
}

/// Per-class AP at one IoU threshold. Classes without ground truth are `None`.
///
/// Predictions are visited in descending score order (stable for ties); each takes the
/// highest-IoU unmatched ground truth of its class in its image when that IoU reaches
/// `iou_thresh`. AP is the area under the all-points interpolated PR curve.
pub fn average_precision(
    preds: &[Prediction],
    gts: &[GroundTruth],
    num_classes: usize,
    iou_thresh: f64,
) -> Vec<Option<f64>> {
    (0..num_classes)
        .map(|c| class_ap(preds, gts, c, iou_thresh))
        .collect()
}

fn class_ap(preds: &[Prediction], gts: &[GroundTruth], class: usize, iou_thresh: f64) -> Option<f64> {
    let gts: Vec<&GroundTruth> = gts.iter().filter(|g| g.class == class).collect();
    if gts.is_empty() {
        return None;
    }
    let mut preds: Vec<&Prediction> = preds.iter().filter(|p| p.class == class).collect();
    preds.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut used = vec![false; gts.len()];
    let mut tp_flags = Vec::with_capacity(preds.len());
    for p in &preds {
        let mut best: Option<(usize, f64)> = None;
        for (i, g) in gts.iter().enumerate() {
            if used[i] || g.image != p.image {
                continue;
            }
            let v = iou(&p.bbox, &g.bbox);
            if v >= iou_thresh && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((i, v));
            }
        }
        if let Some((i, _)) = best {
            used[i] = true;
        }
        tp_flags.push(best.is_some());
    }
    Some(ap_from_flags(&tp_flags, gts.len()))
}

/// All-points interpolated AP from ranked true-positive flags.
pub fn ap_from_flags(tp_flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp_flags.len());
    let mut recall = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (k, &hit) in tp_flags.iter().enumerate() {
        if hit {
            tp += 1;
        }
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    ap
}

pub fn mean_defined(aps: &[Option<f64>]) -> f64 {
    let defined: Vec<f64> = aps.iter().flatten().copied().collect();
    if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub map_50: f64,
    pub map_75: f64,
    pub map_coco: f64,
    pub per_class_ap: Vec<Option<f64>>,
    /// mAP at each COCO threshold.
    pub map_by_threshold: Vec<f64>,
}

pub fn detection_metrics(preds: &[Prediction], gts: &[GroundTruth], num_classes: usize) -> DetectionMetrics {
    let thresholds = coco_thresholds();
    let per_thresh: Vec<Vec<Option<f64>>> = thresholds
        .iter()
        .map(|&t| average_precision(preds, gts, num_classes, t))
        .collect();
    let map_by_threshold: Vec<f64> = per_thresh.iter().map(|a| mean_defined(a)).collect();
    DetectionMetrics {
        map_50: map_by_threshold[0],
        map_75: map_by_threshold[5],
        map_coco: map_by_threshold.iter().sum::<f64>() / map_by_threshold.len() as f64,
        per_class_ap: per_thresh[0].clone(),
        map_by_threshold,
    }
}

/// Pseudo-label match counts, accumulated over images.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlCounts {
    pub true_positives: usize,
    pub n_pseudo: usize,
    pub n_gt: usize,
}

impl PlCounts {
    pub fn add(&mut self, other: PlCounts) {
        self.true_positives += other.true_positives;
        self.n_pseudo += other.n_pseudo;
        self.n_gt += other.n_gt;
    }

    pub fn quality(&self) -> PlQuality {
        let precision_undefined = self.n_pseudo == 0;
        let recall_vacuous = self.n_gt == 0;
        let precision = if precision_undefined {
            1.0
        } else {
            self.true_positives as f64 / self.n_pseudo as f64
        };
        let recall = if recall_vacuous {
            1.0
        } else {
            self.true_positives as f64 / self.n_gt as f64
        };
        PlQuality {
            precision,
            recall,
            false_neg_rate: 1.0 - recall,
            precision_undefined,
            recall_vacuous,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlQuality {
    pub precision: f64,
    pub recall: f64,
    pub false_neg_rate: f64,
    /// No pseudo boxes: precision reported as 1.
    pub precision_undefined: bool,
    /// No ground truth: recall reported as 1.
    pub recall_vacuous: bool,
}

/// Greedy one-to-one matching of pseudo boxes (in the given order) to same-class
/// ground truth at IoU >= 0.5.
pub fn pseudo_label_counts(pseudo: &[(BBox, usize)], gts: &[(BBox, usize)]) -> PlCounts {
    let mut used = vec![false; gts.len()];
    let mut tp = 0;
    for (b, c) in pseudo {
        let mut best: Option<(usize, f64)> = None;
        for (i, (g, gc)) in gts.iter().enumerate() {
            if used[i] || gc != c {
                continue;
            }
            let v = iou(b, g);
            if v >= 0.5 && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((i, v));
            }
        }
        if let Some((i, _)) = best {
            used[i] = true;
            tp += 1;
        }
    }
    PlCounts {
        true_positives: tp,
        n_pseudo: pseudo.len(),
        n_gt: gts.len(),
    }
}

pub fn pseudo_label_quality(pseudo: &[(BBox, usize)], gts: &[(BBox, usize)]) -> PlQuality {
    pseudo_label_counts(pseudo, gts).quality()
}

/// One evaluation snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub tau_current: f64,
    pub map_50: f64,
    pub map_75: f64,
    pub map_coco: f64,
    pub per_class_ap: Vec<Option<f64>>,
    pub pl_precision: f64,
    pub pl_recall: f64,
    pub pl_false_neg_rate: f64,
    pub loss: LossBreakdown,
}

/// Flat CSV row of a [`MetricsRecord`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub iteration: usize,
    pub tau: f64,
    pub map_50: f64,
    pub map_75: f64,
    pub map_coco: f64,
    pub pl_precision: f64,
    pub pl_recall: f64,
    pub pl_fnr: f64,
    pub loss_total: f64,
    pub loss_sup: f64,
    pub loss_pl_weak: f64,
    pub loss_pl_strong: f64,
    pub loss_cls_fg: f64,
    pub loss_cls_bg: f64,
    pub loss_bg_sim: f64,
    pub loss_fg_bg_dissim: f64,
    pub loss_reg: f64,
}

impl From<&MetricsRecord> for CsvRow {
    fn from(r: &MetricsRecord) -> Self {
        Self {
            iteration: r.iteration,
            tau: r.tau_current,
            map_50: r.map_50,
            map_75: r.map_75,
            map_coco: r.map_coco,
            pl_precision: r.pl_precision,
            pl_recall: r.pl_recall,
            pl_fnr: r.pl_false_neg_rate,
            loss_total: r.loss.total,
            loss_sup: r.loss.sup,
            loss_pl_weak: r.loss.pl_weak,
            loss_pl_strong: r.loss.pl_strong,
            loss_cls_fg: r.loss.cls_fg,
            loss_cls_bg: r.loss.cls_bg,
            loss_bg_sim: r.loss.bg_sim,
            loss_fg_bg_dissim: r.loss.fg_bg_dissim,
            loss_reg: r.loss.reg,
        }
    }
}

pub fn write_csv<W: std::io::Write>(records: &[MetricsRecord], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(CsvRow::from(r))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: std::io::Read>(input: R) -> Result<Vec<CsvRow>, csv::Error> {
    csv::Reader::from_reader(input).deserialize().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x: f64, y: f64) -> BBox {
        BBox::new(x, y, x + 4.0, y + 4.0)
    }

    #[test]
    fn perfect_predictions_score_one() {
        let gts = vec![
            GroundTruth { image: 0, bbox: bx(0.0, 0.0), class: 0 },
            GroundTruth { image: 0, bbox: bx(10.0, 0.0), class: 1 },
            GroundTruth { image: 1, bbox: bx(0.0, 10.0), class: 0 },
        ];
        let preds: Vec<Prediction> = gts
            .iter()
            .enumerate()
            .map(|(i, g)| Prediction { image: g.image, bbox: g.bbox, class: g.class, score: 0.9 - 0.1 * i as f64 })
            .collect();
        let ap = average_precision(&preds, &gts, 3, 0.5);
        assert_eq!(ap, vec![Some(1.0), Some(1.0), None]);
        let m = detection_metrics(&preds, &gts, 3);
        assert_eq!(m.map_50, 1.0);
        assert_eq!(m.map_coco, 1.0);
    }

    #[test]
    fn no_predictions_score_zero() {
        let gts = vec![GroundTruth { image: 0, bbox: bx(0.0, 0.0), class: 0 }];
        assert_eq!(average_precision(&[], &gts, 1, 0.5), vec![Some(0.0)]);
    }

    #[test]
    fn predictions_do_not_match_across_images() {
        let gts = vec![GroundTruth { image: 0, bbox: bx(0.0, 0.0), class: 0 }];
        let preds = vec![Prediction { image: 1, bbox: bx(0.0, 0.0), class: 0, score: 0.9 }];
        assert_eq!(average_precision(&preds, &gts, 1, 0.5), vec![Some(0.0)]);
    }

    #[test]
    fn hand_computed_case() {
        // ranks: TP, FP, TP over 2 GT -> precision 1, 1/2, 2/3; recall 1/2, 1/2, 1
        // interpolated: 1 on [0, .5], 2/3 on (.5, 1] -> AP = 0.5 + 1/3
        let gts = vec![
            GroundTruth { image: 0, bbox: bx(0.0, 0.0), class: 0 },
            GroundTruth { image: 0, bbox: bx(20.0, 20.0), class: 0 },
        ];
        let preds = vec![
            Prediction { image: 0, bbox: bx(0.0, 0.0), class: 0, score: 0.9 },
            Prediction { image: 0, bbox: bx(10.0, 10.0), class: 0, score: 0.8 },
            Prediction { image: 0, bbox: bx(20.0, 20.0), class: 0, score: 0.7 },
        ];
        let ap = average_precision(&preds, &gts, 1, 0.5)[0].unwrap();
        assert!((ap - (0.5 + 1.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn pl_quality_cases() {
        let gts = vec![(bx(0.0, 0.0), 0), (bx(10.0, 0.0), 1), (bx(20.0, 0.0), 2)];
        let q = pseudo_label_quality(&gts, &gts);
        assert_eq!((q.precision, q.recall, q.false_neg_rate), (1.0, 1.0, 0.0));

        let q = pseudo_label_quality(&[(bx(0.0, 0.0), 0)], &[]);
        assert_eq!(q.precision, 0.0);
        assert_eq!(q.recall, 1.0);
        assert!(q.recall_vacuous);

        let q = pseudo_label_quality(&[], &gts);
        assert!(q.precision_undefined);
        assert_eq!(q.precision, 1.0);
        assert_eq!(q.recall, 0.0);

        let pseudo = vec![gts[0], gts[1], (bx(30.0, 30.0), 0)];
        let q = pseudo_label_quality(&pseudo, &gts);
        assert!((q.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((q.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((q.false_neg_rate - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn wrong_class_is_not_a_match() {
        let gts = vec![(bx(0.0, 0.0), 0)];
        let q = pseudo_label_quality(&[(bx(0.0, 0.0), 1)], &gts);
        assert_eq!((q.precision, q.recall), (0.0, 0.0));
    }

    #[test]
    fn csv_has_expected_header() {
        let rec = MetricsRecord {
            iteration: 3,
            tau_current: 0.9,
            map_50: 0.5,
            map_75: 0.25,
            map_coco: 0.3,
            per_class_ap: vec![Some(0.5)],
            pl_precision: 1.0,
            pl_recall: 0.5,
            pl_false_neg_rate: 0.5,
            loss: LossBreakdown::default(),
        };
        let mut buf = Vec::new();
        write_csv(std::slice::from_ref(&rec), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(
            "iteration,tau,map_50,map_75,map_coco,pl_precision,pl_recall,pl_fnr,loss_total,"
        ));
        let rows = read_csv(text.as_bytes()).unwrap();
        assert_eq!(rows, vec![CsvRow::from(&rec)]);
    }

    fn arb_case() -> impl Strategy<Value = (Vec<Prediction>, Vec<GroundTruth>)> {
        let gt = (0..3usize, 0..2usize).prop_map(|(slot, c)| GroundTruth {
            image: 0,
            bbox: bx(slot as f64 * 10.0, 0.0),
            class: c,
        });
        let pred = (0..4usize, 0..2usize, -1.0..1.0f64, 0.01..1.0f64).prop_map(|(slot, c, dx, s)| Prediction {
            image: 0,
            bbox: bx(slot as f64 * 10.0 + dx, 0.0),
            class: c,
            score: s,
        });
        (prop::collection::vec(pred, 0..8), prop::collection::vec(gt, 1..4))
    }

    proptest! {
        #[test]
        fn ap_depends_only_on_ranking((preds, gts) in arb_case()) {
            let squashed: Vec<Prediction> = preds
                .iter()
                .map(|p| Prediction { score: (3.0 * p.score).exp() / 10.0, ..*p })
                .collect();
            prop_assert_eq!(
                average_precision(&preds, &gts, 2, 0.5),
                average_precision(&squashed, &gts, 2, 0.5)
            );
        }

        #[test]
        fn top_ranked_true_positive_never_hurts((preds, gts) in arb_case()) {
            // a GT that no prediction can currently claim, so the new box is a true positive
            let uncovered = gts.iter().find(|g| {
                !preds.iter().any(|p| p.class == g.class && crate::geometry::iou(&p.bbox, &g.bbox) >= 0.5)
            });
            let Some(&g) = uncovered else { return Ok(()) };
            let mut more = preds.clone();
            more.push(Prediction { image: 0, bbox: g.bbox, class: g.class, score: 2.0 });
            let before = average_precision(&preds, &gts, 2, 0.5)[g.class].unwrap();
            let after = average_precision(&more, &gts, 2, 0.5)[g.class].unwrap();
            prop_assert!(after >= before - 1e-12);
        }

        #[test]
        fn map_coco_bounded_by_slices((preds, gts) in arb_case()) {
            let m = detection_metrics(&preds, &gts, 2);
            let max = m.map_by_threshold.iter().copied().fold(0.0, f64::max);
            prop_assert!(m.map_coco <= max + 1e-12);
        }
    }
}
