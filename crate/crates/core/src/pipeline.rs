//! Teacher-student training loop, periodic evaluation and ablation presets.
//!
//! Every random draw comes from a ChaCha stream keyed by `(seed, purpose, iteration,
//! scene)`, so per-scene work fans out to worker threads without changing results,
//! and switching a loss term on or off leaves every other draw untouched.

use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{EvalModel, RunConfig};
use crate::detection::{nms, sample_proposals, Candidate, PseudoLabelSet, Source};
use crate::error::{ConfigError, TrainError};
use crate::evaluator::{
    detection_metrics, GroundTruth, MetricsRecord, PlCounts, Prediction, pseudo_label_counts,
};
use crate::geometry::{best_match, BBox, Canvas};
use crate::jitter_bagging::{box_jittering_set, refine_set, RegRefinement};
use crate::losses::{
    assigned_class, background_prob_grad, compose_total, cross_entropy, foreground_score_grad,
    loss_bg_sim, loss_cls_bg, loss_cls_fg, loss_fg_bg_dissim, loss_reg, LossBreakdown, ASSIGN_IOU,
};
use crate::synth::{augment, generate_dataset, student_sgd_step, Detection, Scene, SceneHead, ToyDetector, World};
use crate::threshold::{score_populations, PerClassThreshold, ThresholdMode, ThresholdState};
use crate::weight_update::{ModelParams, TeacherUpdater};

const TAG_WORLD: u64 = 1;
const TAG_DATA: u64 = 2;
const TAG_EVAL_SET: u64 = 3;
const TAG_BATCH: u64 = 4;
const TAG_SUP: u64 = 5;
const TAG_TEACHER: u64 = 6;
const TAG_STUDENT: u64 = 7;
const TAG_EVAL: u64 = 8;
const TAG_PL_EVAL: u64 = 9;

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for one purpose of one run.
pub fn stream_rng(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    let h = parts.iter().fold(mix(seed), |h, &p| mix(h ^ mix(p)));
    ChaCha8Rng::seed_from_u64(h)
}

/// Current pseudo-label threshold, global or per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TauState {
    Global { mode: ThresholdMode, state: ThresholdState },
    PerClass { mode: ThresholdMode, state: PerClassThreshold },
}

impl TauState {
    pub fn new(cfg: &RunConfig) -> Self {
        let mut state = ThresholdState::new(cfg.gamma, cfg.clamp_lo, cfg.clamp_hi);
        if let ThresholdMode::Static(t) = cfg.threshold_mode {
            state.current = t;
        }
        let adaptive = matches!(cfg.threshold_mode, ThresholdMode::Adaptive | ThresholdMode::Continuous);
        if cfg.per_class_threshold && adaptive {
            TauState::PerClass {
                mode: cfg.threshold_mode,
                state: PerClassThreshold::new(cfg.world.num_classes, state),
            }
        } else {
            TauState::Global {
                mode: cfg.threshold_mode,
                state,
            }
        }
    }

    /// Scalar summary: the threshold, or the mean of the per-class thresholds.
    pub fn current(&self) -> f64 {
        match self {
            TauState::Global { state, .. } => state.current,
            TauState::PerClass { state, .. } => {
                let t = state.thresholds();
                t.iter().sum::<f64>() / t.len() as f64
            }
        }
    }

    pub fn threshold_for(&self, class: usize) -> f64 {
        match self {
            TauState::Global { state, .. } => state.current,
            TauState::PerClass { state, .. } => state.states[class].current,
        }
    }

    pub fn update(&mut self, survivors: &[Candidate]) {
        match self {
            TauState::Global { mode, state } => match *mode {
                ThresholdMode::Static(_) => {}
                ThresholdMode::Adaptive => {
                    let (fg, bg) = score_populations(survivors, state.current);
                    state.compute(&fg, &bg);
                }
                ThresholdMode::Continuous => {
                    let (fg, bg) = score_populations(survivors, state.current);
                    state.compute_continuous(&fg, &bg);
                }
                ThresholdMode::DynamicBaseline => {
                    let fg: Vec<f64> = survivors.iter().map(|c| c.scores.foreground().0).collect();
                    state.compute_dynamic(&fg);
                }
            },
            TauState::PerClass { mode, state } => {
                state.update(survivors, *mode == ThresholdMode::Adaptive);
            }
        }
    }

    pub fn is_foreground(&self, c: &Candidate) -> bool {
        let (s, k) = c.scores.foreground();
        s > self.threshold_for(k)
    }
}

/// Re-runs both heads of `model` on stored region features.
pub fn reforward(model: &ToyDetector, dets: &[Detection], canvas: Canvas) -> Vec<Detection> {
    dets.iter()
        .map(|d| model.predict(&d.proposal, d.features.clone(), canvas, d.candidate.source))
        .collect()
}

/// The region as the classification losses see it: located at its proposal, so
/// that class targets do not depend on the regression head.
fn as_region(d: &Detection) -> Candidate {
    Candidate::new(d.proposal, d.candidate.scores.clone(), d.candidate.source)
}

/// Supervised loss of one scene: mean cross-entropy against the ground-truth class
/// assigned to each proposal plus box regression on the foreground regions. Returns the
/// value and its gradient with respect to the parameters of `model`.
pub fn supervised_terms(model: &ToyDetector, dets: &[Detection], gt: &[(BBox, usize)]) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; model.params.len()];
    if dets.is_empty() {
        return (0.0, grad);
    }
    let bg = model.num_classes;
    let n = dets.len() as f64;
    let mut value = 0.0;
    let mut fg_idx = Vec::new();
    let mut glogits = Vec::with_capacity(dets.len());
    for (i, d) in dets.iter().enumerate() {
        let target = assigned_class(&d.proposal, gt, bg);
        if target != bg {
            fg_idx.push(i);
        }
        let ce = cross_entropy(&d.candidate.scores, target);
        value += ce.loss / n;
        glogits.push(ce.grad_logits.into_iter().map(|g| g / n).collect::<Vec<_>>());
    }
    let gt_boxes: Vec<BBox> = gt.iter().map(|(b, _)| *b).collect();
    let refined: Vec<BBox> = fg_idx.iter().map(|&i| dets[i].candidate.bbox).collect();
    let reg = loss_reg(&refined, &gt_boxes);
    value += reg.value;
    let mut gbox = vec![[0.0; 4]; dets.len()];
    for (k, &i) in fg_idx.iter().enumerate() {
        gbox[i] = reg.grad[k];
    }
    for (i, d) in dets.iter().enumerate() {
        model.accumulate_grad(d, Some(&glogits[i]), Some(&gbox[i]), &mut grad);
    }
    (value, grad)
}

/// Component values of one pseudo-label stream on one scene.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PlTerms {
    pub cls_fg: f64,
    pub cls_bg: f64,
    pub bg_sim: f64,
    pub fg_bg_dissim: f64,
    pub reg: f64,
}

impl PlTerms {
    pub fn total(&self) -> f64 {
        self.cls_fg + self.cls_bg + self.bg_sim + self.fg_bg_dissim + self.reg
    }

    fn add_scaled(&mut self, o: &PlTerms, s: f64) {
        self.cls_fg += s * o.cls_fg;
        self.cls_bg += s * o.cls_bg;
        self.bg_sim += s * o.bg_sim;
        self.fg_bg_dissim += s * o.fg_bg_dissim;
        self.reg += s * o.reg;
    }
}

/// Which optional pseudo-label terms are active and the similarity scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlSwitches {
    pub bg_sim: bool,
    pub fg_bg_dissim: bool,
    pub beta: f64,
}

impl PlSwitches {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            bg_sim: cfg.use_bg_sim,
            fg_bg_dissim: cfg.use_fg_bg_dissim,
            beta: cfg.loss.beta,
        }
    }
}

/// Pseudo-label loss of one stream on one scene, and its gradient with respect to
/// the student parameters. Student regions whose proposal overlaps a classification
/// pseudo box at [`ASSIGN_IOU`] are foreground, the rest background. `reliabilities` holds the
/// teacher's background probability for every region in `dets`.
pub fn pseudo_label_terms(
    student: &ToyDetector,
    dets: &[Detection],
    reliabilities: &[f64],
    pseudo: &PseudoLabelSet,
    switches: PlSwitches,
) -> (PlTerms, Vec<f64>) {
    assert_eq!(dets.len(), reliabilities.len(), "one reliability per region");
    let mut grad = vec![0.0; student.params.len()];
    let cls_list = pseudo.cls_box_list();
    let (fg_idx, bg_idx): (Vec<usize>, Vec<usize>) =
        (0..dets.len()).partition(|&i| best_match(&dets[i].proposal, &cls_list, ASSIGN_IOU).is_some());
    let fg: Vec<Candidate> = fg_idx.iter().map(|&i| as_region(&dets[i])).collect();
    let bg: Vec<Candidate> = bg_idx.iter().map(|&i| as_region(&dets[i])).collect();
    let rel_bg: Vec<f64> = bg_idx.iter().map(|&i| reliabilities[i]).collect();

    let n_out = student.num_classes + 1;
    let mut glog = vec![vec![0.0; n_out]; dets.len()];
    let mut gbox = vec![[0.0; 4]; dets.len()];
    let add = |row: &mut Vec<f64>, g: &[f64], s: f64| row.iter_mut().zip(g).for_each(|(r, v)| *r += s * v);
    let mut terms = PlTerms::default();

    let cls_fg = loss_cls_fg(&fg, pseudo);
    terms.cls_fg = cls_fg.value;
    for (k, &i) in fg_idx.iter().enumerate() {
        add(&mut glog[i], &cls_fg.grad_logits[k], 1.0);
    }
    let cls_bg = loss_cls_bg(&bg, &rel_bg);
    terms.cls_bg = cls_bg.value;
    for (k, &i) in bg_idx.iter().enumerate() {
        add(&mut glog[i], &cls_bg.grad_logits[k], 1.0);
    }
    if switches.bg_sim {
        let s: Vec<f64> = bg.iter().map(|c| c.scores.background()).collect();
        let sim = loss_bg_sim(&s, &rel_bg, switches.beta);
        terms.bg_sim = sim.value;
        for (k, &i) in bg_idx.iter().enumerate() {
            add(&mut glog[i], &background_prob_grad(&bg[k].scores), sim.grad[k]);
        }
    }
    if switches.fg_bg_dissim {
        let s_fg: Vec<f64> = fg.iter().map(|c| c.scores.foreground().0).collect();
        let s_bg: Vec<f64> = bg.iter().map(|c| c.scores.foreground().0).collect();
        let dis = loss_fg_bg_dissim(&s_fg, &s_bg);
        terms.fg_bg_dissim = dis.value;
        for (k, &i) in fg_idx.iter().enumerate() {
            add(&mut glog[i], &foreground_score_grad(&fg[k].scores), dis.grad_fg[k]);
        }
        for (k, &i) in bg_idx.iter().enumerate() {
            add(&mut glog[i], &foreground_score_grad(&bg[k].scores), dis.grad_bg[k]);
        }
    }
    let refined: Vec<BBox> = fg_idx.iter().map(|&i| dets[i].candidate.bbox).collect();
    let reg = loss_reg(&refined, &pseudo.reg_boxes);
    terms.reg = reg.value;
    for (k, &i) in fg_idx.iter().enumerate() {
        gbox[i] = reg.grad[k];
    }
    for (i, d) in dets.iter().enumerate() {
        student.accumulate_grad(d, Some(&glog[i]), Some(&gbox[i]), &mut grad);
    }
    (terms, grad)
}

/// Teacher output for one unlabeled scene: both augmented views and the post-NMS
/// candidates of each enabled generator.
struct TeacherViews {
    weak: Scene,
    strong: Scene,
    weak_survivors: Vec<Candidate>,
    strong_survivors: Vec<Candidate>,
}

struct SceneLoss {
    weak: PlTerms,
    strong: PlTerms,
    grad: Vec<f64>,
}

fn pick<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    if n == 0 || k == 0 {
        Vec::new()
    } else if k <= n {
        sample(rng, n, k).into_vec()
    } else {
        (0..k).map(|_| rng.random_range(0..n)).collect()
    }
}

fn axpy(acc: &mut [f64], x: &[f64], s: f64) {
    acc.iter_mut().zip(x).for_each(|(a, v)| *a += s * v);
}

/// Training state of one run.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: RunConfig,
    world: World,
    labeled: Vec<Scene>,
    unlabeled: Vec<Scene>,
    eval_set: Vec<Scene>,
    student: ToyDetector,
    updater: TeacherUpdater,
    tau: TauState,
    iteration: usize,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let world = World::new(cfg.world.clone(), &mut stream_rng(cfg.seed, &[TAG_WORLD]))?;
        let (labeled, unlabeled) = generate_dataset(&world, &cfg.imbalance, &mut stream_rng(cfg.seed, &[TAG_DATA]));
        let mut erng = stream_rng(cfg.seed, &[TAG_EVAL_SET]);
        let eval_set = (0..cfg.eval_scenes)
            .map(|_| world.generate_scene(&cfg.imbalance.class_frequencies, &mut erng))
            .collect();
        let student = ToyDetector::zeros(world.num_classes(), world.feature_dim());
        let updater = TeacherUpdater::new(cfg.update_mode, cfg.alpha, cfg.decay_mode, &student.params);
        let tau = TauState::new(&cfg);
        Ok(Self {
            cfg,
            world,
            labeled,
            unlabeled,
            eval_set,
            student,
            updater,
            tau,
            iteration: 0,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn labeled(&self) -> &[Scene] {
        &self.labeled
    }

    pub fn unlabeled(&self) -> &[Scene] {
        &self.unlabeled
    }

    pub fn student(&self) -> &ToyDetector {
        &self.student
    }

    pub fn teacher(&self) -> ToyDetector {
        self.student.with_params(self.updater.teacher().clone())
    }

    pub fn tau(&self) -> &TauState {
        &self.tau
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Overwrites the student, e.g. to start from planted weights. The teacher is
    /// reset to the same weights.
    pub fn set_student(&mut self, params: ModelParams) {
        self.student = self.student.with_params(params);
        self.updater.reset(&self.student.params);
    }

    pub fn in_burn_in(&self) -> bool {
        self.iteration < self.cfg.burn_in
    }

    fn sampled_detections<R: Rng + ?Sized>(&self, model: &ToyDetector, scene: &Scene, source: Source, rng: &mut R) -> Vec<Detection> {
        // sampling before feature extraction only skips work on discarded regions
        let props = self.world.proposals(scene, self.cfg.train_proposals, rng);
        sample_proposals(&props, self.cfg.sampled_proposals, rng)
            .into_iter()
            .map(|p| {
                let f = self.world.features(scene, &p, rng);
                model.predict(&p, f, scene.canvas, source)
            })
            .collect()
    }

    fn supervised_scene(&self, scene_idx: usize, slot: usize) -> (f64, Vec<f64>) {
        let mut rng = stream_rng(self.cfg.seed, &[TAG_SUP, self.iteration as u64, slot as u64]);
        let scene = &self.labeled[scene_idx];
        let view = augment(scene, self.cfg.weak_aug, &mut rng);
        let dets = self.sampled_detections(&self.student, &view, Source::Student, &mut rng);
        supervised_terms(&self.student, &dets, &scene.objects)
    }

    fn teacher_views(&self, teacher: &ToyDetector, scene_idx: usize, slot: usize) -> TeacherViews {
        let mut rng = stream_rng(self.cfg.seed, &[TAG_TEACHER, self.iteration as u64, slot as u64]);
        let scene = &self.unlabeled[scene_idx];
        let weak = augment(scene, self.cfg.weak_aug, &mut rng);
        let strong = augment(scene, self.cfg.strong_aug, &mut rng);
        let mut survivors = |view: &Scene, on: bool| -> Vec<Candidate> {
            if !on {
                return Vec::new();
            }
            let cands: Vec<Candidate> = teacher
                .detect(&self.world, view, self.cfg.train_proposals, Source::Teacher, &mut rng)
                .into_iter()
                .map(|d| d.candidate)
                .collect();
            nms(&cands, self.cfg.nms_threshold)
        };
        let weak_survivors = survivors(&weak, self.cfg.weak_generator);
        let strong_survivors = survivors(&strong, self.cfg.strong_generator);
        TeacherViews {
            weak,
            strong,
            weak_survivors,
            strong_survivors,
        }
    }

    /// Classification pseudo boxes above the threshold and regression pseudo boxes
    /// from the configured refinement.
    pub fn pseudo_labels<R: Rng + ?Sized>(
        &self,
        teacher: &ToyDetector,
        view: &Scene,
        survivors: &[Candidate],
        rng: &mut R,
    ) -> PseudoLabelSet {
        let fg: Vec<&Candidate> = survivors.iter().filter(|c| self.tau.is_foreground(c)).collect();
        let cls_boxes = fg.iter().map(|c| (c.bbox, c.scores.foreground().1)).collect();
        let tau = self.tau.current();
        let head = SceneHead {
            model: teacher,
            world: &self.world,
            scene: view,
        };
        let reg_boxes = match self.cfg.reg_refinement {
            RegRefinement::None => fg.iter().map(|c| c.bbox).collect(),
            RegRefinement::JitterBagging => {
                let boxes: Vec<BBox> = fg.iter().map(|c| c.bbox).collect();
                refine_set(&boxes, &head, &self.cfg.jitter, tau, view.canvas, rng)
            }
            RegRefinement::BoxJittering => {
                let boxes: Vec<(BBox, f64)> = fg.iter().map(|c| (c.bbox, c.scores.foreground().0)).collect();
                box_jittering_set(&boxes, &head, &self.cfg.jitter, tau, view.canvas, rng)
            }
        };
        PseudoLabelSet {
            cls_boxes,
            reg_boxes,
            threshold_used: tau,
        }
    }

    fn unlabeled_scene_loss(&self, teacher: &ToyDetector, views: &TeacherViews, slot: usize) -> SceneLoss {
        let mut rng = stream_rng(self.cfg.seed, &[TAG_STUDENT, self.iteration as u64, slot as u64]);
        let dets = self.sampled_detections(&self.student, &views.strong, Source::Student, &mut rng);
        let reliabilities: Vec<f64> = dets.iter().map(|d| teacher.classify(&d.features).background()).collect();
        let switches = PlSwitches::from_config(&self.cfg);
        let mut out = SceneLoss {
            weak: PlTerms::default(),
            strong: PlTerms::default(),
            grad: vec![0.0; self.student.params.len()],
        };
        let streams = [
            (self.cfg.weak_generator, &views.weak, &views.weak_survivors),
            (self.cfg.strong_generator, &views.strong, &views.strong_survivors),
        ];
        for (k, (on, view, survivors)) in streams.into_iter().enumerate() {
            if !on {
                continue;
            }
            let pseudo = self.pseudo_labels(teacher, view, survivors, &mut rng);
            let (terms, grad) = pseudo_label_terms(&self.student, &dets, &reliabilities, &pseudo, switches);
            axpy(&mut out.grad, &grad, 1.0);
            if k == 0 {
                out.weak = terms;
            } else {
                out.strong = terms;
            }
        }
        out
    }

    /// One iteration: supervised loss, pseudo-label losses (after burn-in), student
    /// SGD step and teacher update. Returns the loss breakdown of the iteration.
    pub fn step(&mut self) -> Result<LossBreakdown, TrainError> {
        let cfg = &self.cfg;
        let it = self.iteration as u64;
        let n_params = self.student.params.len();
        let (n_l, n_u) = cfg.batch_split();
        let mut brng = stream_rng(cfg.seed, &[TAG_BATCH, it]);
        let lab_idx = pick(self.labeled.len(), n_l, &mut brng);
        let unl_idx = pick(self.unlabeled.len(), n_u, &mut brng);

        let sup_parts: Vec<(f64, Vec<f64>)> = lab_idx
            .par_iter()
            .enumerate()
            .map(|(slot, &i)| self.supervised_scene(i, slot))
            .collect();
        let mut grad = vec![0.0; n_params];
        let mut sup = 0.0;
        let inv_l = 1.0 / sup_parts.len() as f64;
        for (v, g) in &sup_parts {
            sup += v * inv_l;
            axpy(&mut grad, g, inv_l);
        }

        let mut weak = PlTerms::default();
        let mut strong = PlTerms::default();
        if !self.in_burn_in() && !unl_idx.is_empty() {
            let teacher = self.teacher();
            let views: Vec<TeacherViews> = unl_idx
                .par_iter()
                .enumerate()
                .map(|(slot, &i)| self.teacher_views(&teacher, i, slot))
                .collect();
            let survivors: Vec<Candidate> = views
                .iter()
                .flat_map(|v| v.weak_survivors.iter().chain(&v.strong_survivors).cloned())
                .collect();
            self.tau.update(&survivors);
            let losses: Vec<SceneLoss> = views
                .par_iter()
                .enumerate()
                .map(|(slot, v)| self.unlabeled_scene_loss(&teacher, v, slot))
                .collect();
            let inv_u = 1.0 / losses.len() as f64;
            let lambda = self.cfg.loss.lambda;
            for l in &losses {
                weak.add_scaled(&l.weak, inv_u);
                strong.add_scaled(&l.strong, inv_u);
                axpy(&mut grad, &l.grad, lambda * inv_u);
            }
        }

        let cfg = &self.cfg;
        let mut breakdown = compose_total(sup, weak.total(), strong.total(), cfg.loss.lambda);
        breakdown.cls_fg = weak.cls_fg + strong.cls_fg;
        breakdown.cls_bg = weak.cls_bg + strong.cls_bg;
        breakdown.bg_sim = weak.bg_sim + strong.bg_sim;
        breakdown.fg_bg_dissim = weak.fg_bg_dissim + strong.fg_bg_dissim;
        breakdown.reg = weak.reg + strong.reg;

        if !breakdown.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            let dump = serde_json::json!({
                "loss": breakdown,
                "tau": self.tau.current(),
                "student_finite": self.student.params.is_finite(),
                "teacher_finite": self.updater.teacher().is_finite(),
                "grad_finite": grad.iter().all(|g| g.is_finite()),
            });
            return Err(TrainError::NonFinite {
                iteration: self.iteration,
                dump: dump.to_string(),
            });
        }

        let teacher_sum = self.updater.teacher().checksum();
        self.student = student_sgd_step(&self.student, &ModelParams(grad), cfg.lr);
        assert_eq!(
            self.updater.teacher().checksum(),
            teacher_sum,
            "teacher weights changed during the student step"
        );
        if self.in_burn_in() {
            self.updater.reset(&self.student.params);
        } else {
            self.updater.update(&self.student.params)?;
        }
        self.iteration += 1;
        Ok(breakdown)
    }

    fn eval_model(&self) -> ToyDetector {
        match self.cfg.eval_model {
            EvalModel::Teacher => self.teacher(),
            EvalModel::Student => self.student.clone(),
        }
    }

    /// Post-NMS predictions of `model` on the held-out scenes. Proposals and noise are
    /// fixed per scene, so successive evaluations differ only through the weights.
    pub fn predictions(&self, model: &ToyDetector) -> (Vec<Prediction>, Vec<GroundTruth>) {
        let per_scene: Vec<Vec<Prediction>> = self
            .eval_set
            .par_iter()
            .enumerate()
            .map(|(j, scene)| {
                let mut rng = stream_rng(self.cfg.seed, &[TAG_EVAL, j as u64]);
                let cands: Vec<Candidate> = model
                    .detect(&self.world, scene, self.cfg.eval_proposals, Source::Teacher, &mut rng)
                    .into_iter()
                    .map(|d| d.candidate)
                    .collect();
                nms(&cands, self.cfg.nms_threshold)
                    .into_iter()
                    .map(|c| {
                        let (score, class) = c.scores.foreground();
                        Prediction {
                            image: j,
                            bbox: c.bbox,
                            class,
                            score,
                        }
                    })
                    .collect()
            })
            .collect();
        let gts = self
            .eval_set
            .iter()
            .enumerate()
            .flat_map(|(j, s)| {
                s.objects.iter().map(move |(b, c)| GroundTruth {
                    image: j,
                    bbox: *b,
                    class: *c,
                })
            })
            .collect();
        (per_scene.into_iter().flatten().collect(), gts)
    }

    /// Pseudo-label match counts of the teacher on the first unlabeled scenes.
    pub fn pseudo_label_counts(&self) -> PlCounts {
        let teacher = self.teacher();
        let n = self.cfg.pl_eval_scenes.min(self.unlabeled.len());
        let weak_view = self.cfg.weak_generator;
        let parts: Vec<PlCounts> = self.unlabeled[..n]
            .par_iter()
            .enumerate()
            .map(|(j, scene)| {
                let mut rng = stream_rng(self.cfg.seed, &[TAG_PL_EVAL, j as u64]);
                let params = if weak_view { self.cfg.weak_aug } else { self.cfg.strong_aug };
                let view = augment(scene, params, &mut rng);
                let cands: Vec<Candidate> = teacher
                    .detect(&self.world, &view, self.cfg.train_proposals, Source::Teacher, &mut rng)
                    .into_iter()
                    .map(|d| d.candidate)
                    .collect();
                let pseudo: Vec<(BBox, usize)> = nms(&cands, self.cfg.nms_threshold)
                    .into_iter()
                    .filter(|c| self.tau.is_foreground(c))
                    .map(|c| (c.bbox, c.scores.foreground().1))
                    .collect();
                pseudo_label_counts(&pseudo, &scene.objects)
            })
            .collect();
        parts.into_iter().fold(PlCounts::default(), |mut acc, c| {
            acc.add(c);
            acc
        })
    }

    /// Metrics snapshot after the iterations run so far; `loss` is stored as is.
    pub fn evaluate(&self, loss: LossBreakdown) -> MetricsRecord {
        let (preds, gts) = self.predictions(&self.eval_model());
        let m = detection_metrics(&preds, &gts, self.world.num_classes());
        let q = self.pseudo_label_counts().quality();
        MetricsRecord {
            iteration: self.iteration,
            tau_current: self.tau.current(),
            map_50: m.map_50,
            map_75: m.map_75,
            map_coco: m.map_coco,
            per_class_ap: m.per_class_ap,
            pl_precision: q.precision,
            pl_recall: q.recall,
            pl_false_neg_rate: q.false_neg_rate,
            loss,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutput {
    pub records: Vec<MetricsRecord>,
    /// Loss breakdown of every iteration.
    pub losses: Vec<LossBreakdown>,
    /// Threshold after every iteration.
    pub taus: Vec<f64>,
    pub student: ModelParams,
    pub teacher: ModelParams,
}

impl TrainOutput {
    pub fn final_record(&self) -> &MetricsRecord {
        self.records.last().expect("train always records the last iteration")
    }
}

/// Runs `cfg.iterations` steps, evaluating every `eval_every` iterations and after
/// the last one.
pub fn train(cfg: &RunConfig) -> Result<TrainOutput, TrainError> {
    let mut t = Trainer::new(cfg.clone())?;
    let mut out = TrainOutput {
        records: Vec::new(),
        losses: Vec::with_capacity(cfg.iterations),
        taus: Vec::with_capacity(cfg.iterations),
        student: ModelParams::zeros(0),
        teacher: ModelParams::zeros(0),
    };
    for i in 0..cfg.iterations {
        let loss = t.step()?;
        out.losses.push(loss);
        out.taus.push(t.tau().current());
        if (i + 1) % cfg.eval_every == 0 || i + 1 == cfg.iterations {
            out.records.push(t.evaluate(loss));
        }
    }
    out.student = t.student().params.clone();
    out.teacher = t.teacher().params;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationDimension {
    Threshold,
    Update,
    Losses,
    Jitter,
    Generators,
}

impl AblationDimension {
    pub const ALL: [AblationDimension; 5] = [
        AblationDimension::Threshold,
        AblationDimension::Update,
        AblationDimension::Losses,
        AblationDimension::Jitter,
        AblationDimension::Generators,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationDimension::Threshold => "threshold",
            AblationDimension::Update => "update",
            AblationDimension::Losses => "losses",
            AblationDimension::Jitter => "jitter",
            AblationDimension::Generators => "generators",
        }
    }

    /// Named configurations of this dimension, all derived from `base`.
    pub fn variants(self, base: &RunConfig) -> Vec<(String, RunConfig)> {
        let with = |f: &dyn Fn(&mut RunConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            AblationDimension::Threshold => {
                let mut v: Vec<(String, RunConfig)> = [0.7, 0.8, 0.9]
                    .into_iter()
                    .map(|t| (format!("{t}"), with(&|c| c.threshold_mode = ThresholdMode::Static(t))))
                    .collect();
                v.push(("continuous".into(), with(&|c| c.threshold_mode = ThresholdMode::Continuous)));
                v.push(("adaptive".into(), with(&|c| c.threshold_mode = ThresholdMode::Adaptive)));
                v
            }
            AblationDimension::Update => [
                crate::weight_update::UpdateMode::DeepCopy,
                crate::weight_update::UpdateMode::Ema,
                crate::weight_update::UpdateMode::Dema,
            ]
            .into_iter()
            .map(|m| (m.label().to_string(), with(&|c| c.update_mode = m)))
            .collect(),
            AblationDimension::Losses => [
                ("CaseI", false, false),
                ("CaseII", true, false),
                ("CaseIII", false, true),
                ("full", true, true),
            ]
            .into_iter()
            .map(|(name, sim, dis)| {
                (
                    name.to_string(),
                    with(&|c| {
                        c.use_bg_sim = sim;
                        c.use_fg_bg_dissim = dis;
                    }),
                )
            })
            .collect(),
            AblationDimension::Jitter => [
                RegRefinement::None,
                RegRefinement::BoxJittering,
                RegRefinement::JitterBagging,
            ]
            .into_iter()
            .map(|r| (r.label().to_string(), with(&|c| c.reg_refinement = r)))
            .collect(),
            AblationDimension::Generators => [("weak", true, false), ("strong", false, true), ("both", true, true)]
                .into_iter()
                .map(|(name, w, s)| {
                    (
                        name.to_string(),
                        with(&|c| {
                            c.weak_generator = w;
                            c.strong_generator = s;
                        }),
                    )
                })
                .collect(),
        }
    }
}

impl FromStr for AblationDimension {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|d| d.label() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| ConfigError::InvalidValue {
                key: "dimension".into(),
                value: s.into(),
                reason: "expected threshold, update, losses, jitter or generators".into(),
            })
    }
}

/// Final metrics of one variant under one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub map_50: f64,
    pub map_75: f64,
    pub map_coco: f64,
    pub pl_precision: f64,
    pub pl_recall: f64,
    pub pl_fnr: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub runs: usize,
    pub median_map_50: f64,
    pub mean_map_50: f64,
    pub median_map_coco: f64,
    pub median_pl_precision: f64,
    pub median_pl_recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub dimension: AblationDimension,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    pub summary: Vec<VariantSummary>,
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl AblationTable {
    pub fn rows_for(&self, variant: &str) -> Vec<&AblationRow> {
        self.rows.iter().filter(|r| r.variant == variant).collect()
    }

    pub fn summary_for(&self, variant: &str) -> Option<&VariantSummary> {
        self.summary.iter().find(|s| s.variant == variant)
    }

    /// Final mAP@50 of `variant` for `seed`.
    pub fn map_50(&self, variant: &str, seed: u64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.seed == seed)
            .map(|r| r.map_50)
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary_csv<W: std::io::Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        for s in &self.summary {
            w.serialize(s)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Trains every variant of `dimension` under every seed (seed overrides
/// `base.seed`) and tabulates the final metrics.
pub fn ablate(base: &RunConfig, dimension: AblationDimension, seeds: &[u64]) -> Result<AblationTable, TrainError> {
    base.validate()?;
    let variants = dimension.variants(base);
    for (_, cfg) in &variants {
        cfg.validate()?;
    }
    let jobs: Vec<(usize, u64)> = (0..variants.len())
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(v, seed)| {
            let (name, cfg) = &variants[v];
            let mut cfg = cfg.clone();
            cfg.seed = seed;
            let out = train(&cfg)?;
            let r = out.final_record();
            Ok(AblationRow {
                variant: name.clone(),
                seed,
                map_50: r.map_50,
                map_75: r.map_75,
                map_coco: r.map_coco,
                pl_precision: r.pl_precision,
                pl_recall: r.pl_recall,
                pl_fnr: r.pl_false_neg_rate,
                tau: r.tau_current,
            })
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    let summary = variants
        .iter()
        .map(|(name, _)| {
            let rs: Vec<&AblationRow> = rows.iter().filter(|r| &r.variant == name).collect();
            let col = |f: fn(&AblationRow) -> f64| rs.iter().map(|r| f(r)).collect::<Vec<f64>>();
            let m50 = col(|r| r.map_50);
            VariantSummary {
                variant: name.clone(),
                runs: rs.len(),
                median_map_50: median(&m50),
                mean_map_50: m50.iter().sum::<f64>() / m50.len().max(1) as f64,
                median_map_coco: median(&col(|r| r.map_coco)),
                median_pl_precision: median(&col(|r| r.pl_precision)),
                median_pl_recall: median(&col(|r| r.pl_recall)),
            }
        })
        .collect();
    Ok(AblationTable {
        dimension,
        seeds: seeds.to_vec(),
        rows,
        summary,
    })
}
