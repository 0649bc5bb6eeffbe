//! Central finite-difference checks of every analytic loss gradient.
//!
//! Points whose stencil would straddle a kink of an absolute value are redrawn, so
//! each check reports exactly the requested number of evaluated points.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detection::{Candidate, ClassScores, PseudoLabelSet, Source};
use crate::geometry::{BBox, Canvas};
use crate::losses::{
    background_prob_grad, cross_entropy, foreground_score_grad, loss_bg_sim, loss_cls_bg, loss_cls_fg,
    loss_fg_bg_dissim, loss_reg,
};
use crate::synth::{Detection, ToyDetector};
use crate::weight_update::ModelParams;

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;
/// Residuals closer than this to an absolute-value kink are excluded.
pub const KINK_RADIUS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub name: String,
    pub points: usize,
    /// Draws rejected for lying near a kink.
    pub skipped: usize,
    pub max_rel_err: f64,
}

impl GradCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn central_difference<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + h;
            let up = f(&xp);
            xp[i] = orig - h;
            let down = f(&xp);
            xp[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `max|a - n| / max(max|a|, max|n|, 1e-8)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    diff / inf(analytic).max(inf(numeric)).max(1e-8)
}

/// A kink at residual 0 is excluded when the residual is within [`KINK_RADIUS`] of it
/// or within reach of the finite-difference stencil.
fn near_kink(residual: f64, reach: f64) -> bool {
    residual.abs() < KINK_RADIUS.max(reach)
}

fn run<R, G>(name: &str, points: usize, rng: &mut R, mut draw: G) -> GradCheck
where
    R: Rng,
    G: FnMut(&mut R) -> Option<(Vec<f64>, Vec<f64>)>,
{
    let mut out = GradCheck {
        name: name.to_string(),
        points: 0,
        skipped: 0,
        max_rel_err: 0.0,
    };
    while out.points < points {
        match draw(rng) {
            Some((analytic, numeric)) => {
                out.max_rel_err = out.max_rel_err.max(relative_error(&analytic, &numeric));
                out.points += 1;
            }
            None => out.skipped += 1,
        }
    }
    out
}

fn logits<R: Rng>(n_out: usize, rng: &mut R) -> Vec<f64> {
    (0..n_out).map(|_| rng.random_range(-4.0..4.0)).collect()
}

fn candidates_from(z: &[f64], n_out: usize, boxes: &[BBox]) -> Vec<Candidate> {
    z.chunks(n_out)
        .zip(boxes)
        .map(|(l, b)| Candidate::new(*b, ClassScores::from_logits(l), Source::Student))
        .collect()
}

fn random_box<R: Rng>(rng: &mut R) -> BBox {
    let x = rng.random_range(0.0..30.0);
    let y = rng.random_range(0.0..30.0);
    BBox::new(x, y, x + rng.random_range(3.0..10.0), y + rng.random_range(3.0..10.0))
}

const N_OUT: usize = 6;

fn check_cross_entropy<R: Rng>(points: usize, rng: &mut R) -> GradCheck {
    run("cross_entropy", points, rng, |rng| {
        let z = logits(N_OUT, rng);
        let t = rng.random_range(0..N_OUT);
        let a = cross_entropy(&ClassScores::from_logits(&z), t).grad_logits;
        let n = central_difference(|x| cross_entropy(&ClassScores::from_logits(x), t).loss, &z, FD_STEP);
        Some((a, n))
    })
}

fn check_cls_fg<R: Rng>(points: usize, rng: &mut R) -> GradCheck {
    run("loss_cls_fg", points, rng, |rng| {
        let n_pseudo = rng.random_range(1..4);
        let pseudo = PseudoLabelSet {
            cls_boxes: (0..n_pseudo)
                .map(|_| (random_box(rng), rng.random_range(0..N_OUT - 1)))
                .collect(),
            reg_boxes: Vec::new(),
            threshold_used: 0.5,
        };
        let n = rng.random_range(1..8);
        let boxes: Vec<BBox> = (0..n)
            .map(|_| {
                if rng.random_bool(0.7) {
                    let (b, _) = pseudo.cls_boxes[rng.random_range(0..n_pseudo)];
                    b.translate(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
                } else {
                    random_box(rng)
                }
            })
            .collect();
        let z: Vec<f64> = (0..n).flat_map(|_| logits(N_OUT, rng)).collect();
        let a = loss_cls_fg(&candidates_from(&z, N_OUT, &boxes), &pseudo).grad_logits.concat();
        let num = central_difference(|x| loss_cls_fg(&candidates_from(x, N_OUT, &boxes), &pseudo).value, &z, FD_STEP);
        Some((a, num))
    })
}

fn check_cls_bg<R: Rng>(points: usize, rng: &mut R) -> GradCheck {
    run("loss_cls_bg", points, rng, |rng| {
        let n = rng.random_range(1..8);
        let boxes: Vec<BBox> = (0..n).map(|_| random_box(rng)).collect();
        let rel: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let z: Vec<f64> = (0..n).flat_map(|_| logits(N_OUT, rng)).collect();
        let a = loss_cls_bg(&candidates_from(&z, N_OUT, &boxes), &rel).grad_logits.concat();
        let num = central_difference(|x| loss_cls_bg(&candidates_from(x, N_OUT, &boxes), &rel).value, &z, FD_STEP);
        Some((a, num))
    })
}

fn check_bg_sim<R: Rng>(points: usize, rng: &mut R) -> GradCheck {
    run("loss_bg_sim", points, rng, |rng| {
        let n = rng.random_range(1..8);
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let t: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let beta = rng.random_range(0.5..2.0);
        if s.iter().zip(&t).any(|(a, b)| near_kink(a.exp() - b.exp(), 3.0 * FD_STEP)) {
            return None;
        }
        let a = loss_bg_sim(&s, &t, beta).grad;
        let num = central_difference(|x| loss_bg_sim(x, &t, beta).value, &s, FD_STEP);
        Some((a, num))
    })
}

fn check_dissim<R: Rng>(points: usize, rng: &mut R) -> GradCheck {
    run("loss_fg_bg_dissim", points, rng, |rng| {
        let nf = rng.random_range(1..8);
        let nb = rng.random_range(0..8);
        let x: Vec<f64> = (0..nf + nb).map(|_| rng.random_range(0.0..1.0)).collect();
        let (fg, bg) = x.split_at(nf);
        let m = if bg.is_empty() { 0.0 } else { bg.iter().sum::<f64>() / nb as f64 };
        if fg.iter().any(|s| near_kink(s - m, 2.0 * FD_STEP)) {
            return None;
        }
        let d = loss_fg_bg_dissim(fg, bg);
        let a = [d.grad_fg, d.grad_bg].concat();
        let num = central_difference(|v| loss_fg_bg_dissim(&v[..nf], &v[nf..]).value, &x, FD_STEP);
        Some((a, num))
    })
}

fn check_reg<R: Rng>(points: usize, rng: &mut R) -> GradCheck {
    run("loss_reg", points, rng, |rng| {
        // targets on disjoint grid cells so assignments cannot switch
        let nt = rng.random_range(1..5);
        let targets: Vec<BBox> = (0..nt)
            .map(|k| {
                let (cx, cy) = (10.0 + 20.0 * (k % 2) as f64, 10.0 + 20.0 * (k / 2) as f64);
                BBox::from_center(cx, cy, rng.random_range(6.0..10.0), rng.random_range(6.0..10.0))
            })
            .collect();
        let n = rng.random_range(1..7);
        let coords: Vec<f64> = (0..n)
            .flat_map(|_| {
                let b = if rng.random_bool(0.8) {
                    let t = targets[rng.random_range(0..nt)];
                    let (w, h) = (t.width(), t.height());
                    BBox::new(
                        t.x1() + rng.random_range(-0.1..0.1) * w,
                        t.y1() + rng.random_range(-0.1..0.1) * h,
                        t.x2() + rng.random_range(-0.1..0.1) * w,
                        t.y2() + rng.random_range(-0.1..0.1) * h,
                    )
                } else {
                    BBox::new(41.0, 41.0, 44.0, 44.0)
                };
                b.coords()
            })
            .collect();
        let boxes = |c: &[f64]| c.chunks(4).map(|q| BBox::new(q[0], q[1], q[2], q[3])).collect::<Vec<_>>();
        let r = loss_reg(&boxes(&coords), &targets);
        let near = boxes(&coords).iter().any(|b| {
            targets.iter().any(|t| b.coords().iter().zip(t.coords()).any(|(x, y)| near_kink(x - y, 2.0 * FD_STEP)))
        });
        if near {
            return None;
        }
        let a: Vec<f64> = r.grad.iter().flatten().copied().collect();
        let num = central_difference(|c| loss_reg(&boxes(c), &targets).value, &coords, FD_STEP);
        Some((a, num))
    })
}

fn check_background_chain<R: Rng>(points: usize, rng: &mut R) -> GradCheck {
    run("background_prob_grad", points, rng, |rng| {
        let z = logits(N_OUT, rng);
        let a = background_prob_grad(&ClassScores::from_logits(&z));
        let n = central_difference(|x| ClassScores::from_logits(x).background(), &z, FD_STEP);
        Some((a, n))
    })
}

fn check_foreground_chain<R: Rng>(points: usize, rng: &mut R) -> GradCheck {
    run("foreground_score_grad", points, rng, |rng| {
        let z = logits(N_OUT, rng);
        let s = ClassScores::from_logits(&z);
        let mut fg: Vec<f64> = s.probs()[..N_OUT - 1].to_vec();
        fg.sort_by(|a, b| b.total_cmp(a));
        if near_kink(fg[0] - fg[1], 4.0 * FD_STEP) {
            return None;
        }
        let a = foreground_score_grad(&s);
        let n = central_difference(|x| ClassScores::from_logits(x).foreground().0, &z, FD_STEP);
        Some((a, n))
    })
}

/// Proposal, features, logit gradient and box gradient of one synthetic region.
type Region = (BBox, Vec<f64>, Vec<f64>, [f64; 4]);

/// Backpropagation through both detector heads: a random linear functional of every
/// region's logits and refined corners, differentiated with respect to the weights.
fn check_detector_backprop<R: Rng>(points: usize, rng: &mut R) -> GradCheck {
    let (c, d) = (N_OUT - 1, 8);
    let canvas = Canvas::new(1000.0, 1000.0);
    run("detector_backprop", points, rng, |rng| {
        let n_params = ToyDetector::param_count(c, d);
        let params: Vec<f64> = (0..n_params).map(|_| rng.random_range(-0.05..0.05)).collect();
        let model = ToyDetector::zeros(c, d).with_params(ModelParams(params.clone()));
        let n = rng.random_range(1..5);
        let regions: Vec<Region> = (0..n)
            .map(|_| {
                let p = random_box(rng).translate(400.0, 400.0);
                let f: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
                let a: Vec<f64> = (0..N_OUT).map(|_| rng.random_range(-1.0..1.0)).collect();
                let b = [(); 4].map(|_| rng.random_range(-1.0..1.0));
                (p, f, a, b)
            })
            .collect();
        let objective = |w: &[f64]| {
            let m = model.with_params(ModelParams(w.to_vec()));
            regions
                .iter()
                .map(|(p, f, a, b)| {
                    let det = m.predict(p, f.clone(), canvas, Source::Student);
                    let l: f64 = det.logits.iter().zip(a).map(|(x, y)| x * y).sum();
                    let r: f64 = det.candidate.bbox.coords().iter().zip(b).map(|(x, y)| x * y).sum();
                    l + r
                })
                .sum::<f64>()
        };
        let mut grad = vec![0.0; n_params];
        for (p, f, a, b) in &regions {
            let det: Detection = model.predict(p, f.clone(), canvas, Source::Student);
            model.accumulate_grad(&det, Some(a), Some(b), &mut grad);
        }
        let num = central_difference(objective, &params, FD_STEP);
        Some((grad, num))
    })
}

/// Runs every check with `points` evaluated points each.
pub fn run_suite(points: usize, seed: u64) -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        check_cross_entropy(points, &mut rng),
        check_cls_fg(points, &mut rng),
        check_cls_bg(points, &mut rng),
        check_bg_sim(points, &mut rng),
        check_dissim(points, &mut rng),
        check_reg(points, &mut rng),
        check_background_chain(points, &mut rng),
        check_foreground_chain(points, &mut rng),
        check_detector_backprop(points, &mut rng),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_difference_of_a_cubic() {
        let g = central_difference(|x| x[0].powi(3) + 2.0 * x[1], &[2.0, 5.0], 1e-4);
        assert!((g[0] - 12.0).abs() < 1e-6);
        assert!((g[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn relative_error_scales() {
        assert_eq!(relative_error(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((relative_error(&[2.0], &[1.0]) - 0.5).abs() < 1e-15);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
    }

    #[test]
    fn small_suite_passes() {
        for c in run_suite(10, 1) {
            assert!(c.passed(TOLERANCE), "{c:?}");
            assert_eq!(c.points, 10);
        }
    }
}
