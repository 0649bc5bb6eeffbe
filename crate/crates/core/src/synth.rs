//! Synthetic class-imbalanced detection world and a linear toy detector.
//!
//! A region's feature vector is `a * q * (proto_c + u) + g * L t + noise`, where `q` is the
//! region's IoU with the observed object it overlaps most, `proto_c` that object's class
//! prototype, `u` a fixed per-instance appearance offset, `t` the normalized corner offsets from the region to the object and `L` a
//! fixed 4-column basis orthogonal to every prototype. Noise inside the span of `L` is
//! damped by `loc_noise_factor`. Clutter regions look like objects with the prototype
//! scaled down by `distractor_strength` but are never ground truth. Regions touching no
//! object or clutter get noise only. Confidence therefore tracks localization quality, and a linear head can
//! recover both the class and the box correction.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::detection::{Candidate, ClassScores, Source};
use crate::error::ConfigError;
use crate::geometry::{iou, jitter, BBox, Canvas};
use crate::weight_update::ModelParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub canvas: Canvas,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_object_size: f64,
    pub max_object_size: f64,
    /// Prototype magnitude `a` at IoU 1.
    pub feature_scale: f64,
    /// Magnitude `g` of the localization cue.
    pub loc_scale: f64,
    /// Base per-dimension Gaussian noise of an unaugmented scene.
    pub noise: f64,
    /// Noise inside the localization subspace, relative to `noise`.
    pub loc_noise_factor: f64,
    /// Norm scale of the per-instance appearance offset added to the prototype.
    pub instance_spread: f64,
    /// Pairwise cosine similarity between class prototypes.
    pub prototype_correlation: f64,
    /// Jitter fraction used to scatter positive proposals around objects.
    pub proposal_jitter: f64,
    /// Share of proposals seeded from objects and clutter; the rest are uniform negatives.
    pub positive_fraction: f64,
    /// Object-like background regions per scene, drawn uniformly from `0..=max_distractors`.
    pub max_distractors: usize,
    /// Prototype magnitude of clutter relative to a real object.
    pub distractor_strength: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            feature_dim: 16,
            canvas: Canvas::new(40.0, 40.0),
            min_objects: 1,
            max_objects: 6,
            min_object_size: 4.0,
            max_object_size: 12.0,
            feature_scale: 10.0,
            loc_scale: 2.0,
            noise: 1.0,
            loc_noise_factor: 0.05,
            instance_spread: 0.0,
            prototype_correlation: 0.5,
            proposal_jitter: 0.3,
            positive_fraction: 0.3,
            max_distractors: 8,
            distractor_strength: 0.6,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.num_classes == 0 {
            return fail("num_classes must be at least 1");
        }
        if self.feature_dim < self.num_classes + 5 {
            return fail("feature_dim must be at least num_classes + 5");
        }
        if self.min_objects > self.max_objects {
            return fail("min_objects exceeds max_objects");
        }
        if !(self.min_object_size > 0.0 && self.min_object_size <= self.max_object_size) {
            return fail("object size range is empty");
        }
        if self.max_object_size > self.canvas.width.min(self.canvas.height) {
            return fail("objects larger than the canvas");
        }
        if !(0.0..1.0).contains(&self.prototype_correlation) {
            return fail("prototype_correlation must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return fail("positive_fraction must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.distractor_strength) {
            return fail("distractor_strength must lie in [0, 1]");
        }
        if self.noise < 0.0 || self.proposal_jitter < 0.0 || self.loc_noise_factor < 0.0 || self.instance_spread < 0.0 {
            return fail("noise, loc_noise_factor, instance_spread and proposal_jitter must be non-negative");
        }
        Ok(())
    }
}

/// Per-view observation perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub feature_noise: f64,
    pub box_jitter: f64,
    pub dropout: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        feature_noise: 0.0,
        box_jitter: 0.0,
        dropout: 0.0,
    };

    pub fn weak() -> Self {
        Self {
            feature_noise: 0.05,
            box_jitter: 0.02,
            dropout: 0.0,
        }
    }

    pub fn strong() -> Self {
        Self {
            feature_noise: 0.2,
            box_jitter: 0.06,
            dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceSpec {
    pub class_frequencies: Vec<f64>,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    /// When set, re-splits the `n_labeled + n_unlabeled` pool with this labeled share.
    pub labeled_fraction: Option<f64>,
}

impl ImbalanceSpec {
    /// Frequencies proportional to `(k + 1)^-exponent`.
    pub fn power_law(num_classes: usize, exponent: f64) -> Vec<f64> {
        let raw: Vec<f64> = (0..num_classes)
            .map(|k| ((k + 1) as f64).powf(-exponent))
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect()
    }

    pub fn validate(&self, num_classes: usize) -> Result<(), ConfigError> {
        if self.class_frequencies.len() != num_classes {
            return Err(ConfigError::Invalid(format!(
                "{} class frequencies for {} classes",
                self.class_frequencies.len(),
                num_classes
            )));
        }
        if self.class_frequencies.iter().any(|&f| f <= 0.0) {
            return Err(ConfigError::Invalid("class frequencies must be positive".into()));
        }
        let sum: f64 = self.class_frequencies.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(ConfigError::Invalid(format!(
                "class frequencies sum to {sum}, expected 1"
            )));
        }
        if let Some(f) = self.labeled_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(ConfigError::Invalid("labeled_fraction must lie in (0, 1]".into()));
            }
        }
        if self.split().0 == 0 {
            return Err(ConfigError::Invalid("no labeled scenes".into()));
        }
        Ok(())
    }

    /// `(labeled, unlabeled)` scene counts.
    pub fn split(&self) -> (usize, usize) {
        let total = self.n_labeled + self.n_unlabeled;
        match self.labeled_fraction {
            Some(f) => {
                let l = ((f * total as f64).round() as usize).clamp(1, total);
                (l, total - l)
            }
            None => (self.n_labeled, self.n_unlabeled),
        }
    }
}

impl Default for ImbalanceSpec {
    fn default() -> Self {
        Self {
            class_frequencies: Self::power_law(5, 1.0),
            n_labeled: 50,
            n_unlabeled: 500,
            labeled_fraction: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub canvas: Canvas,
    /// Ground truth; augmentation never changes it.
    pub objects: Vec<(BBox, usize)>,
    /// Object geometry as this view observes it; drives feature generation.
    pub observed: Vec<(BBox, usize)>,
    /// Clutter geometry and the class it resembles, as this view observes it.
    pub clutter: Vec<(BBox, usize)>,
    /// Appearance offset of every object, then of every clutter region.
    pub appearance: Vec<Vec<f64>>,
    pub feature_noise: f64,
    pub dropout: f64,
}

impl Scene {
    /// Unaugmented scene with the given objects, no clutter and no appearance offsets.
    pub fn from_objects(canvas: Canvas, objects: Vec<(BBox, usize)>, feature_noise: f64) -> Self {
        Self {
            canvas,
            observed: objects.clone(),
            objects,
            clutter: Vec::new(),
            appearance: Vec::new(),
            feature_noise,
            dropout: 0.0,
        }
    }
}

/// Fixed random geometry of the feature space plus the world configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub prototypes: Vec<Vec<f64>>,
    pub loc_basis: Vec<Vec<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn orthonormal_basis<R: Rng + ?Sized>(count: usize, dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let d = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    basis
}

impl World {
    pub fn new<R: Rng + ?Sized>(config: WorldConfig, rng: &mut R) -> Result<Self, ConfigError> {
        config.validate()?;
        let c = config.num_classes;
        let basis = orthonormal_basis(c + 5, config.feature_dim, rng);
        let rho = config.prototype_correlation;
        let shared = &basis[c];
        let prototypes = basis[..c]
            .iter()
            .map(|e| {
                e.iter()
                    .zip(shared)
                    .map(|(a, s)| (1.0 - rho).sqrt() * a + rho.sqrt() * s)
                    .collect()
            })
            .collect();
        let loc_basis = basis[c + 1..c + 5].to_vec();
        Ok(Self {
            config,
            prototypes,
            loc_basis,
        })
    }

    pub fn canvas(&self) -> Canvas {
        self.config.canvas
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    /// Noise-free part of the region feature plus the supplied noise vector.
    pub fn feature_with_noise(&self, scene: &Scene, b: &BBox, noise: &[f64]) -> Vec<f64> {
        let mut f = noise.to_vec();
        let s = self.config.distractor_strength;
        let best = scene
            .observed
            .iter()
            .map(|(o, c)| (o, *c, 1.0))
            .chain(scene.clutter.iter().map(|(o, c)| (o, *c, s)))
            .enumerate()
            .map(|(i, (o, c, strength))| (iou(b, o), o, c, strength, i))
            .fold(None, |acc: Option<(f64, &BBox, usize, f64, usize)>, x| match acc {
                Some(a) if a.0 >= x.0 => Some(a),
                _ => Some(x),
            });
        if let Some((q, o, c, strength, i)) = best {
            if q > 0.0 {
                let a = self.config.feature_scale * strength * q;
                f.iter_mut()
                    .zip(&self.prototypes[c])
                    .for_each(|(x, p)| *x += a * p);
                if let Some(u) = scene.appearance.get(i) {
                    f.iter_mut().zip(u).for_each(|(x, v)| *x += a * v);
                }
                let t = corner_offsets(b, o);
                for (tj, lj) in t.iter().zip(&self.loc_basis) {
                    let g = self.config.loc_scale * tj;
                    f.iter_mut().zip(lj).for_each(|(x, l)| *x += g * l);
                }
            }
        }
        f
    }

    pub fn features<R: Rng + ?Sized>(&self, scene: &Scene, b: &BBox, rng: &mut R) -> Vec<f64> {
        let mut noise: Vec<f64> = (0..self.feature_dim())
            .map(|_| scene.feature_noise * rng.sample::<f64, _>(StandardNormal))
            .collect();
        // damp the noise component inside the localization subspace
        let damp = 1.0 - self.config.loc_noise_factor;
        for l in &self.loc_basis {
            let c = damp * dot(&noise, l);
            noise.iter_mut().zip(l).for_each(|(x, v)| *x -= c * v);
        }
        self.feature_with_noise(scene, b, &noise)
    }

    pub fn generate_scene<R: Rng + ?Sized>(&self, frequencies: &[f64], rng: &mut R) -> Scene {
        let cfg = &self.config;
        let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
        let objects: Vec<(BBox, usize)> = (0..n)
            .map(|_| {
                let class = sample_class(frequencies, rng);
                (self.random_object_box(rng), class)
            })
            .collect();
        let n_clutter = rng.random_range(0..=cfg.max_distractors);
        let clutter: Vec<(BBox, usize)> = (0..n_clutter)
            .map(|_| (self.random_object_box(rng), sample_class(frequencies, rng)))
            .collect();
        let appearance = (0..objects.len() + clutter.len())
            .map(|_| self.appearance_offset(rng))
            .collect();
        Scene {
            canvas: cfg.canvas,
            clutter,
            appearance,
            observed: objects.clone(),
            objects,
            feature_noise: cfg.noise,
            dropout: 0.0,
        }
    }

    /// Gaussian offset of expected norm `instance_spread`, kept out of the localization
    /// subspace so that it never biases the box correction.
    fn appearance_offset<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let spread = self.config.instance_spread;
        if spread == 0.0 {
            return Vec::new();
        }
        let sd = spread / (self.feature_dim() as f64).sqrt();
        let mut u: Vec<f64> = (0..self.feature_dim())
            .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        for l in &self.loc_basis {
            let c = dot(&u, l);
            u.iter_mut().zip(l).for_each(|(x, v)| *x -= c * v);
        }
        u
    }

    fn random_object_box<R: Rng + ?Sized>(&self, rng: &mut R) -> BBox {
        let cfg = &self.config;
        let w = rng.random_range(cfg.min_object_size..=cfg.max_object_size);
        let h = rng.random_range(cfg.min_object_size..=cfg.max_object_size);
        let x = rng.random_range(0.0..=cfg.canvas.width - w);
        let y = rng.random_range(0.0..=cfg.canvas.height - h);
        BBox::new(x, y, x + w, y + h)
    }

    fn random_box<R: Rng + ?Sized>(&self, rng: &mut R) -> BBox {
        let cfg = &self.config;
        let hi = (cfg.max_object_size * 1.25).min(cfg.canvas.width.min(cfg.canvas.height));
        let w = rng.random_range(cfg.min_object_size..=hi);
        let h = rng.random_range(cfg.min_object_size..=hi);
        let x = rng.random_range(0.0..=cfg.canvas.width - w);
        let y = rng.random_range(0.0..=cfg.canvas.height - h);
        BBox::new(x, y, x + w, y + h)
    }

    /// Region proposals: jittered copies of observed objects plus uniform negatives,
    /// thinned by the scene's dropout.
    pub fn proposals<R: Rng + ?Sized>(&self, scene: &Scene, n: usize, rng: &mut R) -> Vec<BBox> {
        let seeds = scene.observed.len() + scene.clutter.len();
        let n_pos = if seeds == 0 {
            0
        } else {
            (n as f64 * self.config.positive_fraction).round() as usize
        };
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let b = if i < n_pos {
                let k = rng.random_range(0..seeds);
                let (o, _) = scene.observed.get(k).unwrap_or_else(|| &scene.clutter[k - scene.observed.len()]);
                jitter(o, self.config.proposal_jitter, scene.canvas, rng)
            } else {
                self.random_box(rng)
            };
            if scene.dropout > 0.0 && rng.random::<f64>() < scene.dropout {
                continue;
            }
            out.push(b);
        }
        out
    }
}

fn corner_offsets(p: &BBox, o: &BBox) -> [f64; 4] {
    let (w, h) = (p.width().max(1e-9), p.height().max(1e-9));
    [
        ((o.x1() - p.x1()) / w).clamp(-1.0, 1.0),
        ((o.y1() - p.y1()) / h).clamp(-1.0, 1.0),
        ((o.x2() - p.x2()) / w).clamp(-1.0, 1.0),
        ((o.y2() - p.y2()) / h).clamp(-1.0, 1.0),
    ]
}

fn sample_class<R: Rng + ?Sized>(frequencies: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, f) in frequencies.iter().enumerate() {
        acc += f;
        if u < acc {
            return k;
        }
    }
    frequencies.len() - 1
}

/// `(labeled, unlabeled)` scenes, deterministic for a given RNG state.
pub fn generate_dataset<R: Rng + ?Sized>(
    world: &World,
    spec: &ImbalanceSpec,
    rng: &mut R,
) -> (Vec<Scene>, Vec<Scene>) {
    let (n_l, n_u) = spec.split();
    let labeled = (0..n_l)
        .map(|_| world.generate_scene(&spec.class_frequencies, rng))
        .collect();
    let unlabeled = (0..n_u)
        .map(|_| world.generate_scene(&spec.class_frequencies, rng))
        .collect();
    (labeled, unlabeled)
}

/// Applies an observation perturbation. Noise variances add, dropouts compose and
/// observed boxes are jittered; ground truth is untouched.
pub fn augment<R: Rng + ?Sized>(scene: &Scene, params: AugmentParams, rng: &mut R) -> Scene {
    let mut out = scene.clone();
    if params.feature_noise > 0.0 {
        out.feature_noise = scene.feature_noise.hypot(params.feature_noise);
    }
    if params.box_jitter > 0.0 {
        for (b, _) in out.observed.iter_mut().chain(out.clutter.iter_mut()) {
            *b = jitter(b, params.box_jitter, scene.canvas, rng);
        }
    }
    if params.dropout > 0.0 {
        out.dropout = 1.0 - (1.0 - scene.dropout) * (1.0 - params.dropout);
    }
    out
}

pub fn augment_weak<R: Rng + ?Sized>(scene: &Scene, rng: &mut R) -> Scene {
    augment(scene, AugmentParams::weak(), rng)
}

pub fn augment_strong<R: Rng + ?Sized>(scene: &Scene, rng: &mut R) -> Scene {
    augment(scene, AugmentParams::strong(), rng)
}

/// One scored region with what is needed to backpropagate through the heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub proposal: BBox,
    pub features: Vec<f64>,
    pub logits: Vec<f64>,
    pub offsets: [f64; 4],
    /// Refined box and softmax scores.
    pub candidate: Candidate,
}

/// Fixed scale of the regressor output, as in the usual delta normalization: a raw
/// output of 1 moves a corner by a tenth of the proposal side.
pub const OFFSET_STD: f64 = 0.1;

/// Linear softmax classifier and linear corner-offset regressor over region features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDetector {
    pub params: ModelParams,
    pub num_classes: usize,
    pub feature_dim: usize,
}

impl ToyDetector {
    pub fn param_count(num_classes: usize, feature_dim: usize) -> usize {
        (num_classes + 1) * (feature_dim + 1) + 4 * (feature_dim + 1)
    }

    pub fn zeros(num_classes: usize, feature_dim: usize) -> Self {
        Self {
            params: ModelParams::zeros(Self::param_count(num_classes, feature_dim)),
            num_classes,
            feature_dim,
        }
    }

    pub fn with_params(&self, params: ModelParams) -> Self {
        assert_eq!(params.len(), self.params.len(), "parameter length mismatch");
        Self {
            params,
            num_classes: self.num_classes,
            feature_dim: self.feature_dim,
        }
    }

    fn n_out(&self) -> usize {
        self.num_classes + 1
    }

    fn cls_bias_offset(&self) -> usize {
        self.n_out() * self.feature_dim
    }

    fn reg_weight_offset(&self) -> usize {
        self.n_out() * (self.feature_dim + 1)
    }

    fn reg_bias_offset(&self) -> usize {
        self.reg_weight_offset() + 4 * self.feature_dim
    }

    pub fn logits(&self, features: &[f64]) -> Vec<f64> {
        let d = self.feature_dim;
        let p = self.params.as_slice();
        let b0 = self.cls_bias_offset();
        (0..self.n_out())
            .map(|k| dot(&p[k * d..(k + 1) * d], features) + p[b0 + k])
            .collect()
    }

    pub fn classify(&self, features: &[f64]) -> ClassScores {
        ClassScores::from_logits(&self.logits(features))
    }

    pub fn regress(&self, features: &[f64]) -> [f64; 4] {
        let d = self.feature_dim;
        let p = self.params.as_slice();
        let w0 = self.reg_weight_offset();
        let b0 = self.reg_bias_offset();
        let mut t = [0.0; 4];
        for (j, tj) in t.iter_mut().enumerate() {
            *tj = OFFSET_STD * (dot(&p[w0 + j * d..w0 + (j + 1) * d], features) + p[b0 + j]);
        }
        t
    }

    /// Scores and refines a single region.
    pub fn predict(&self, proposal: &BBox, features: Vec<f64>, canvas: Canvas, source: Source) -> Detection {
        let logits = self.logits(&features);
        let scores = ClassScores::from_logits(&logits);
        let offsets = self.regress(&features);
        let refined = apply_offsets(proposal, &offsets, canvas);
        Detection {
            proposal: *proposal,
            features,
            logits,
            offsets,
            candidate: Candidate::new(refined, scores, source),
        }
    }

    /// Runs the detector on `n_proposals` proposals (fewer under dropout).
    pub fn detect<R: Rng + ?Sized>(
        &self,
        world: &World,
        scene: &Scene,
        n_proposals: usize,
        source: Source,
        rng: &mut R,
    ) -> Vec<Detection> {
        world
            .proposals(scene, n_proposals, rng)
            .into_iter()
            .map(|p| {
                let f = world.features(scene, &p, rng);
                self.predict(&p, f, scene.canvas, source)
            })
            .collect()
    }

    /// Accumulates parameter gradients for one detection given loss gradients with
    /// respect to its logits and its refined box corners.
    pub fn accumulate_grad(
        &self,
        det: &Detection,
        grad_logits: Option<&[f64]>,
        grad_box: Option<&[f64; 4]>,
        out: &mut [f64],
    ) {
        let d = self.feature_dim;
        if let Some(gl) = grad_logits {
            let b0 = self.cls_bias_offset();
            for (k, &g) in gl.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                out[k * d..(k + 1) * d]
                    .iter_mut()
                    .zip(&det.features)
                    .for_each(|(o, f)| *o += g * f);
                out[b0 + k] += g;
            }
        }
        if let Some(gb) = grad_box {
            let (w, h) = (det.proposal.width(), det.proposal.height());
            let scale = [w * OFFSET_STD, h * OFFSET_STD, w * OFFSET_STD, h * OFFSET_STD];
            let w0 = self.reg_weight_offset();
            let b0 = self.reg_bias_offset();
            for j in 0..4 {
                let g = gb[j] * scale[j];
                if g == 0.0 {
                    continue;
                }
                out[w0 + j * d..w0 + (j + 1) * d]
                    .iter_mut()
                    .zip(&det.features)
                    .for_each(|(o, f)| *o += g * f);
                out[b0 + j] += g;
            }
        }
    }

    /// Planted parameters built from the world's prototypes and localization basis.
    /// `sharpness` scales the classifier logits.
    pub fn oracle(world: &World, sharpness: f64) -> Self {
        let mut det = Self::zeros(world.num_classes(), world.feature_dim());
        let d = det.feature_dim;
        let a = world.config.feature_scale;
        let b0 = det.cls_bias_offset();
        let w0 = det.reg_weight_offset();
        let p = &mut det.params.0;
        for (k, proto) in world.prototypes.iter().enumerate() {
            p[k * d..(k + 1) * d]
                .iter_mut()
                .zip(proto)
                .for_each(|(x, v)| *x = sharpness * v);
        }
        // background wins below IoU 0.5
        p[b0 + world.num_classes()] = sharpness * a * 0.5;
        let g = world.config.loc_scale;
        for (j, l) in world.loc_basis.iter().enumerate() {
            p[w0 + j * d..w0 + (j + 1) * d]
                .iter_mut()
                .zip(l)
                .for_each(|(x, v)| *x = v / (g * OFFSET_STD));
        }
        det
    }
}

/// Moves each corner by its offset times the proposal width (x) or height (y).
pub fn apply_offsets(p: &BBox, t: &[f64; 4], canvas: Canvas) -> BBox {
    let (w, h) = (p.width(), p.height());
    BBox::new(
        p.x1() + t[0] * w,
        p.y1() + t[1] * h,
        p.x2() + t[2] * w,
        p.y2() + t[3] * h,
    )
    .clip(canvas)
}

/// Teacher region head bound to one scene: re-extracts features for a box and runs
/// both heads.
#[derive(Debug, Clone, Copy)]
pub struct SceneHead<'a> {
    pub model: &'a ToyDetector,
    pub world: &'a World,
    pub scene: &'a Scene,
}

impl crate::jitter_bagging::BoxPredictor for SceneHead<'_> {
    fn predict<R: Rng + ?Sized>(&self, b: &BBox, rng: &mut R) -> (BBox, ClassScores) {
        let f = self.world.features(self.scene, b, rng);
        let det = self.model.predict(b, f, self.scene.canvas, Source::Teacher);
        (det.candidate.bbox, det.candidate.scores)
    }
}

/// `params <- params - lr * grads`.
pub fn student_sgd_step(model: &ToyDetector, grads: &ModelParams, lr: f64) -> ToyDetector {
    assert_eq!(model.params.len(), grads.len(), "gradient length mismatch");
    let params = model
        .params
        .0
        .iter()
        .zip(&grads.0)
        .map(|(p, g)| p - lr * g)
        .collect();
    model.with_params(ModelParams(params))
}

/// Unit-variance Gaussian vector; exposed for tests that need to reproduce feature draws.
pub fn gaussian_vec<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}
