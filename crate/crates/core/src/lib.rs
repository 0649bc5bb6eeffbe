//! Teacher-student semi-supervised object detection on a synthetic, class-imbalanced
//! world: adaptive pseudo-label thresholding, background-aware classification losses,
//! Jitter-Bagging box refinement and double-EMA teacher updates.

pub mod config;
pub mod detection;
pub mod error;
pub mod evaluator;
pub mod geometry;
pub mod gradcheck;
pub mod jitter_bagging;
pub mod losses;
pub mod pipeline;
pub mod synth;
pub mod threshold;
pub mod weight_update;

pub use config::{EvalModel, RunConfig};
pub use detection::{nms, Candidate, ClassScores, PseudoLabelSet, Source};
pub use error::{ConfigError, GeometryError, IoError, ScoresError, TrainError, UpdateError};
pub use evaluator::{average_precision, MetricsRecord, PlQuality};
pub use geometry::{iou, BBox, Canvas};
pub use jitter_bagging::{JitterConfig, RegRefinement};
pub use losses::{LossBreakdown, LossConfig};
pub use pipeline::{ablate, train, AblationDimension, AblationTable, TrainOutput, Trainer};
pub use synth::{AugmentParams, ImbalanceSpec, Scene, ToyDetector, World, WorldConfig};
pub use threshold::{ThresholdMode, ThresholdState};
pub use weight_update::{DecayMode, ModelParams, TeacherUpdater, UpdateMode};
