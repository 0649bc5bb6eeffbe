//! Run configuration and its flat `key = value` text form.

use std::fmt::Display;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::geometry::Canvas;
use crate::jitter_bagging::{BaggingMetric, JitterConfig, RegRefinement};
use crate::losses::LossConfig;
use crate::synth::{AugmentParams, ImbalanceSpec, WorldConfig};
use crate::threshold::{ThresholdMode, DEFAULT_CLAMP_HI, DEFAULT_CLAMP_LO, DEFAULT_GAMMA};
use crate::weight_update::{DecayMode, UpdateMode, DEFAULT_ALPHA};

/// Which network the detection metrics are measured on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalModel {
    Teacher,
    Student,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub iterations: usize,
    /// Leading supervised-only iterations; the teacher tracks the student exactly
    /// until they end.
    pub burn_in: usize,
    pub lr: f64,
    pub loss: LossConfig,
    pub gamma: f64,
    pub clamp_lo: f64,
    pub clamp_hi: f64,
    pub threshold_mode: ThresholdMode,
    pub per_class_threshold: bool,
    pub alpha: f64,
    pub decay_mode: DecayMode,
    pub update_mode: UpdateMode,
    pub jitter: JitterConfig,
    pub reg_refinement: RegRefinement,
    pub use_bg_sim: bool,
    pub use_fg_bg_dissim: bool,
    pub weak_generator: bool,
    pub strong_generator: bool,
    pub world: WorldConfig,
    pub imbalance: ImbalanceSpec,
    pub weak_aug: AugmentParams,
    pub strong_aug: AugmentParams,
    pub batch_size: usize,
    /// Share of each batch drawn from labeled scenes.
    pub labeled_ratio: f64,
    pub nms_threshold: f64,
    pub train_proposals: usize,
    pub eval_proposals: usize,
    pub sampled_proposals: usize,
    pub eval_every: usize,
    pub eval_scenes: usize,
    pub pl_eval_scenes: usize,
    pub eval_model: EvalModel,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            iterations: 2000,
            burn_in: 1000,
            // the toy detector is linear and tolerates a far larger step than a deep
            // backbone; lambda is halved so pseudo-labels do not swamp 50 labeled scenes
            lr: 0.1,
            loss: LossConfig { lambda: 1.0, ..LossConfig::default() },
            gamma: DEFAULT_GAMMA,
            clamp_lo: DEFAULT_CLAMP_LO,
            clamp_hi: DEFAULT_CLAMP_HI,
            threshold_mode: ThresholdMode::Adaptive,
            per_class_threshold: false,
            alpha: DEFAULT_ALPHA,
            decay_mode: DecayMode::Squared,
            update_mode: UpdateMode::Dema,
            jitter: JitterConfig::default(),
            reg_refinement: RegRefinement::JitterBagging,
            use_bg_sim: true,
            use_fg_bg_dissim: true,
            weak_generator: true,
            strong_generator: true,
            world: WorldConfig::default(),
            imbalance: ImbalanceSpec::default(),
            weak_aug: AugmentParams::weak(),
            strong_aug: AugmentParams::strong(),
            batch_size: 5,
            labeled_ratio: 0.2,
            nms_threshold: 0.7,
            train_proposals: 200,
            eval_proposals: 100,
            sampled_proposals: 64,
            eval_every: 100,
            eval_scenes: 100,
            pl_eval_scenes: 50,
            eval_model: EvalModel::Teacher,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: Display,
{
    value.trim().parse().map_err(|e: T::Err| ConfigError::InvalidValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

fn invalid(key: &str, value: &str, reason: &str) -> ConfigError {
    ConfigError::InvalidValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.to_string(),
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(invalid(key, value, "expected a boolean")),
    }
}

pub fn parse_threshold_mode(value: &str) -> Result<ThresholdMode, ConfigError> {
    let v = value.trim().to_ascii_lowercase();
    match v.as_str() {
        "adaptive" => Ok(ThresholdMode::Adaptive),
        "continuous" => Ok(ThresholdMode::Continuous),
        "dynamic" | "dynamic_baseline" => Ok(ThresholdMode::DynamicBaseline),
        _ => {
            let num = v.strip_prefix("static:").or_else(|| v.strip_prefix("static_")).unwrap_or(&v);
            let t: f64 = num
                .parse()
                .map_err(|_| invalid("threshold_mode", value, "expected adaptive, continuous, dynamic or static:<t>"))?;
            Ok(ThresholdMode::Static(t))
        }
    }
}

pub fn parse_update_mode(value: &str) -> Result<UpdateMode, ConfigError> {
    match value.trim().to_ascii_lowercase().as_str() {
        "deepcopy" | "deep_copy" => Ok(UpdateMode::DeepCopy),
        "ema" => Ok(UpdateMode::Ema),
        "dema" => Ok(UpdateMode::Dema),
        _ => Err(invalid("update_mode", value, "expected deepcopy, ema or dema")),
    }
}

fn parse_refinement(value: &str) -> Result<RegRefinement, ConfigError> {
    match value.trim().to_ascii_lowercase().as_str() {
        "none" | "off" => Ok(RegRefinement::None),
        "box_jittering" => Ok(RegRefinement::BoxJittering),
        "jitter_bagging" | "on" => Ok(RegRefinement::JitterBagging),
        _ => Err(invalid("reg_refinement", value, "expected none, box_jittering or jitter_bagging")),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>, ConfigError> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn fmt_list(xs: &[f64]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Every addressable key, in a stable order.
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "iterations",
        "burn_in",
        "lr",
        "lambda",
        "beta",
        "gamma",
        "clamp_lo",
        "clamp_hi",
        "threshold_mode",
        "per_class_threshold",
        "alpha",
        "decay_mode",
        "update_mode",
        "n_jitter",
        "jitter_fraction",
        "bagging_metric",
        "reg_refinement",
        "use_bg_sim",
        "use_fg_bg_dissim",
        "weak_generator",
        "strong_generator",
        "num_classes",
        "feature_dim",
        "canvas_width",
        "canvas_height",
        "min_objects",
        "max_objects",
        "min_object_size",
        "max_object_size",
        "feature_scale",
        "loc_scale",
        "noise",
        "loc_noise_factor",
        "instance_spread",
        "prototype_correlation",
        "proposal_jitter",
        "positive_fraction",
        "max_distractors",
        "distractor_strength",
        "class_frequencies",
        "n_labeled",
        "n_unlabeled",
        "labeled_fraction",
        "weak_noise",
        "weak_jitter",
        "weak_dropout",
        "strong_noise",
        "strong_jitter",
        "strong_dropout",
        "batch_size",
        "labeled_ratio",
        "nms_threshold",
        "train_proposals",
        "eval_proposals",
        "sampled_proposals",
        "eval_every",
        "eval_scenes",
        "pl_eval_scenes",
        "eval_model",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let k = key.trim().replace('-', "_");
        let v = value.trim();
        match k.as_str() {
            "seed" => self.seed = parse(&k, v)?,
            "iterations" => self.iterations = parse(&k, v)?,
            "burn_in" => self.burn_in = parse(&k, v)?,
            "lr" => self.lr = parse(&k, v)?,
            "lambda" => self.loss.lambda = parse(&k, v)?,
            "beta" => self.loss.beta = parse(&k, v)?,
            "gamma" => self.gamma = parse(&k, v)?,
            "clamp_lo" => self.clamp_lo = parse(&k, v)?,
            "clamp_hi" => self.clamp_hi = parse(&k, v)?,
            "threshold_mode" => self.threshold_mode = parse_threshold_mode(v)?,
            "per_class_threshold" => self.per_class_threshold = parse_bool(&k, v)?,
            "alpha" => self.alpha = parse(&k, v)?,
            "decay_mode" => {
                self.decay_mode = match v.to_ascii_lowercase().as_str() {
                    "squared" => DecayMode::Squared,
                    "raw" => DecayMode::Raw,
                    _ => return Err(invalid(&k, v, "expected squared or raw")),
                }
            }
            "update_mode" => self.update_mode = parse_update_mode(v)?,
            "n_jitter" => self.jitter.n_jitter = parse(&k, v)?,
            "jitter_fraction" => self.jitter.fraction = parse(&k, v)?,
            "bagging_metric" => {
                self.jitter.metric = match v.to_ascii_lowercase().as_str() {
                    "area" => BaggingMetric::Area,
                    "score" => BaggingMetric::Score,
                    _ => return Err(invalid(&k, v, "expected area or score")),
                }
            }
            "reg_refinement" | "jitter" => self.reg_refinement = parse_refinement(v)?,
            "use_bg_sim" => self.use_bg_sim = parse_bool(&k, v)?,
            "use_fg_bg_dissim" => self.use_fg_bg_dissim = parse_bool(&k, v)?,
            "weak_generator" => self.weak_generator = parse_bool(&k, v)?,
            "strong_generator" => self.strong_generator = parse_bool(&k, v)?,
            "num_classes" => self.world.num_classes = parse(&k, v)?,
            "feature_dim" => self.world.feature_dim = parse(&k, v)?,
            "canvas_width" => self.world.canvas = Canvas::new(parse(&k, v)?, self.world.canvas.height),
            "canvas_height" => self.world.canvas = Canvas::new(self.world.canvas.width, parse(&k, v)?),
            "min_objects" => self.world.min_objects = parse(&k, v)?,
            "max_objects" => self.world.max_objects = parse(&k, v)?,
            "min_object_size" => self.world.min_object_size = parse(&k, v)?,
            "max_object_size" => self.world.max_object_size = parse(&k, v)?,
            "feature_scale" => self.world.feature_scale = parse(&k, v)?,
            "loc_scale" => self.world.loc_scale = parse(&k, v)?,
            "noise" => self.world.noise = parse(&k, v)?,
            "loc_noise_factor" => self.world.loc_noise_factor = parse(&k, v)?,
            "prototype_correlation" => self.world.prototype_correlation = parse(&k, v)?,
            "proposal_jitter" => self.world.proposal_jitter = parse(&k, v)?,
            "positive_fraction" => self.world.positive_fraction = parse(&k, v)?,
            "instance_spread" => self.world.instance_spread = parse(&k, v)?,
            "max_distractors" => self.world.max_distractors = parse(&k, v)?,
            "distractor_strength" => self.world.distractor_strength = parse(&k, v)?,
            "class_frequencies" => {
                self.imbalance.class_frequencies = if let Some(e) = v.strip_prefix("power:") {
                    ImbalanceSpec::power_law(self.world.num_classes, parse(&k, e)?)
                } else {
                    parse_list(&k, v)?
                }
            }
            "n_labeled" => self.imbalance.n_labeled = parse(&k, v)?,
            "n_unlabeled" => self.imbalance.n_unlabeled = parse(&k, v)?,
            "labeled_fraction" => {
                self.imbalance.labeled_fraction = match v.to_ascii_lowercase().as_str() {
                    "" | "none" => None,
                    _ => Some(parse(&k, v)?),
                }
            }
            "weak_noise" => self.weak_aug.feature_noise = parse(&k, v)?,
            "weak_jitter" => self.weak_aug.box_jitter = parse(&k, v)?,
            "weak_dropout" => self.weak_aug.dropout = parse(&k, v)?,
            "strong_noise" => self.strong_aug.feature_noise = parse(&k, v)?,
            "strong_jitter" => self.strong_aug.box_jitter = parse(&k, v)?,
            "strong_dropout" => self.strong_aug.dropout = parse(&k, v)?,
            "batch_size" => self.batch_size = parse(&k, v)?,
            "labeled_ratio" => self.labeled_ratio = parse(&k, v)?,
            "nms_threshold" => self.nms_threshold = parse(&k, v)?,
            "train_proposals" => self.train_proposals = parse(&k, v)?,
            "eval_proposals" => self.eval_proposals = parse(&k, v)?,
            "sampled_proposals" => self.sampled_proposals = parse(&k, v)?,
            "eval_every" => self.eval_every = parse(&k, v)?,
            "eval_scenes" => self.eval_scenes = parse(&k, v)?,
            "pl_eval_scenes" => self.pl_eval_scenes = parse(&k, v)?,
            "eval_model" => {
                self.eval_model = match v.to_ascii_lowercase().as_str() {
                    "teacher" => EvalModel::Teacher,
                    "student" => EvalModel::Student,
                    _ => return Err(invalid(&k, v, "expected teacher or student")),
                }
            }
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let s = match key {
            "seed" => self.seed.to_string(),
            "iterations" => self.iterations.to_string(),
            "burn_in" => self.burn_in.to_string(),
            "lr" => self.lr.to_string(),
            "lambda" => self.loss.lambda.to_string(),
            "beta" => self.loss.beta.to_string(),
            "gamma" => self.gamma.to_string(),
            "clamp_lo" => self.clamp_lo.to_string(),
            "clamp_hi" => self.clamp_hi.to_string(),
            "threshold_mode" => match self.threshold_mode {
                ThresholdMode::Static(t) => format!("static:{t}"),
                ThresholdMode::Adaptive => "adaptive".into(),
                ThresholdMode::Continuous => "continuous".into(),
                ThresholdMode::DynamicBaseline => "dynamic".into(),
            },
            "per_class_threshold" => self.per_class_threshold.to_string(),
            "alpha" => self.alpha.to_string(),
            "decay_mode" => match self.decay_mode {
                DecayMode::Squared => "squared".into(),
                DecayMode::Raw => "raw".into(),
            },
            "update_mode" => self.update_mode.label().into(),
            "n_jitter" => self.jitter.n_jitter.to_string(),
            "jitter_fraction" => self.jitter.fraction.to_string(),
            "bagging_metric" => match self.jitter.metric {
                BaggingMetric::Area => "area".into(),
                BaggingMetric::Score => "score".into(),
            },
            "reg_refinement" => self.reg_refinement.label().into(),
            "use_bg_sim" => self.use_bg_sim.to_string(),
            "use_fg_bg_dissim" => self.use_fg_bg_dissim.to_string(),
            "weak_generator" => self.weak_generator.to_string(),
            "strong_generator" => self.strong_generator.to_string(),
            "num_classes" => self.world.num_classes.to_string(),
            "feature_dim" => self.world.feature_dim.to_string(),
            "canvas_width" => self.world.canvas.width.to_string(),
            "canvas_height" => self.world.canvas.height.to_string(),
            "min_objects" => self.world.min_objects.to_string(),
            "max_objects" => self.world.max_objects.to_string(),
            "min_object_size" => self.world.min_object_size.to_string(),
            "max_object_size" => self.world.max_object_size.to_string(),
            "feature_scale" => self.world.feature_scale.to_string(),
            "loc_scale" => self.world.loc_scale.to_string(),
            "noise" => self.world.noise.to_string(),
            "loc_noise_factor" => self.world.loc_noise_factor.to_string(),
            "prototype_correlation" => self.world.prototype_correlation.to_string(),
            "proposal_jitter" => self.world.proposal_jitter.to_string(),
            "positive_fraction" => self.world.positive_fraction.to_string(),
            "instance_spread" => self.world.instance_spread.to_string(),
            "max_distractors" => self.world.max_distractors.to_string(),
            "distractor_strength" => self.world.distractor_strength.to_string(),
            "class_frequencies" => fmt_list(&self.imbalance.class_frequencies),
            "n_labeled" => self.imbalance.n_labeled.to_string(),
            "n_unlabeled" => self.imbalance.n_unlabeled.to_string(),
            "labeled_fraction" => self
                .imbalance
                .labeled_fraction
                .map_or("none".into(), |f| f.to_string()),
            "weak_noise" => self.weak_aug.feature_noise.to_string(),
            "weak_jitter" => self.weak_aug.box_jitter.to_string(),
            "weak_dropout" => self.weak_aug.dropout.to_string(),
            "strong_noise" => self.strong_aug.feature_noise.to_string(),
            "strong_jitter" => self.strong_aug.box_jitter.to_string(),
            "strong_dropout" => self.strong_aug.dropout.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "labeled_ratio" => self.labeled_ratio.to_string(),
            "nms_threshold" => self.nms_threshold.to_string(),
            "train_proposals" => self.train_proposals.to_string(),
            "eval_proposals" => self.eval_proposals.to_string(),
            "sampled_proposals" => self.sampled_proposals.to_string(),
            "eval_every" => self.eval_every.to_string(),
            "eval_scenes" => self.eval_scenes.to_string(),
            "pl_eval_scenes" => self.pl_eval_scenes.to_string(),
            "eval_model" => match self.eval_model {
                EvalModel::Teacher => "teacher".into(),
                EvalModel::Student => "student".into(),
            },
            _ => return None,
        };
        Some(s)
    }

    /// Parses `key = value` lines; `#` starts a comment. Keys not present keep their
    /// current values.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    text: raw.to_string(),
                });
            };
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        Self::KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).unwrap_or_default()))
            .collect()
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        Self::KEYS
            .iter()
            .map(|k| (k.to_string(), self.get(k).unwrap_or_default()))
            .collect()
    }

    /// `(labeled, unlabeled)` scenes per batch.
    pub fn batch_split(&self) -> (usize, usize) {
        let l = ((self.batch_size as f64 * self.labeled_ratio).round() as usize).clamp(1, self.batch_size);
        (l, self.batch_size - l)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.iterations < 1 {
            return fail("iterations must be at least 1");
        }
        if self.eval_every < 1 {
            return fail("eval_every must be at least 1");
        }
        if !self.weak_generator && !self.strong_generator {
            return fail("at least one pseudo-label generator (weak or strong) must be enabled");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail("lr must be a non-negative number");
        }
        if self.loss.lambda < 0.0 || self.loss.beta < 0.0 {
            return fail("lambda and beta must be non-negative");
        }
        if self.gamma <= 0.0 {
            return fail("gamma must be positive");
        }
        if !(0.0 < self.clamp_lo && self.clamp_lo <= self.clamp_hi && self.clamp_hi <= 1.0) {
            return fail("threshold clamp must satisfy 0 < clamp_lo <= clamp_hi <= 1");
        }
        if let ThresholdMode::Static(t) = self.threshold_mode {
            if !(0.0..=1.0).contains(&t) {
                return fail("static threshold must lie in [0, 1]");
            }
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return fail("alpha must lie in [0, 1)");
        }
        if self.jitter.n_jitter < 1 || self.jitter.fraction < 0.0 {
            return fail("n_jitter must be at least 1 and jitter_fraction non-negative");
        }
        if self.batch_size < 1 {
            return fail("batch_size must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.labeled_ratio) {
            return fail("labeled_ratio must lie in [0, 1]");
        }
        if !(self.nms_threshold > 0.0 && self.nms_threshold <= 1.0) {
            return fail("nms_threshold must lie in (0, 1]");
        }
        if self.train_proposals < 1 || self.eval_proposals < 1 {
            return fail("proposal counts must be at least 1");
        }
        for a in [self.weak_aug, self.strong_aug] {
            if a.feature_noise < 0.0 || a.box_jitter < 0.0 || !(0.0..=1.0).contains(&a.dropout) {
                return fail("augmentation parameters out of range");
            }
        }
        self.world.validate()?;
        self.imbalance.validate(self.world.num_classes)?;
        let (_, n_unl) = self.batch_split();
        if n_unl > 0 && self.imbalance.split().1 == 0 {
            return fail("batches ask for unlabeled scenes but the dataset has none");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_covers_every_key() {
        let mut cfg = RunConfig::default();
        cfg.seed = 17;
        cfg.threshold_mode = ThresholdMode::Static(0.7);
        cfg.update_mode = UpdateMode::Ema;
        cfg.imbalance.labeled_fraction = Some(0.1);
        let text = cfg.to_text();
        assert_eq!(RunConfig::from_text(&text).unwrap(), cfg);
        for k in RunConfig::KEYS {
            assert!(cfg.get(k).is_some(), "key {k} not readable");
        }
    }

    #[test]
    fn parses_comments_and_flags() {
        let cfg = RunConfig::from_text(
            "# comment\nseed = 7\nthreshold-mode = static:0.8  # trailing\nupdate_mode=ema\n\nclass_frequencies = 0.5,0.2,0.1,0.1,0.1\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.threshold_mode, ThresholdMode::Static(0.8));
        assert_eq!(cfg.update_mode, UpdateMode::Ema);
        assert_eq!(cfg.imbalance.class_frequencies, vec![0.5, 0.2, 0.1, 0.1, 0.1]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(RunConfig::from_text("nope = 1"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(RunConfig::from_text("seed"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(RunConfig::from_text("lr = fast").is_err());
        assert!(RunConfig::from_text("update_mode = swa").is_err());
    }

    #[test]
    fn validation() {
        assert!(RunConfig::default().validate().is_ok());
        let mut c = RunConfig::default();
        c.weak_generator = false;
        c.strong_generator = false;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.iterations = 0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.eval_every = 0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.imbalance.class_frequencies = vec![0.5, 0.5];
        assert!(c.validate().is_err());
    }

    #[test]
    fn batch_split_keeps_a_labeled_scene() {
        let c = RunConfig::default();
        assert_eq!(c.batch_split(), (1, 4));
        let mut c = RunConfig::default();
        c.labeled_ratio = 0.0;
        assert_eq!(c.batch_split(), (1, 4));
    }
}
