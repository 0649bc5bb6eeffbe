//! Teacher parameter updates: deep copy, EMA and double EMA.
//!
//! The moving averages decay with `alpha^2` by default; [`DecayMode::Raw`] switches to
//! the conventional `alpha`.

use serde::{Deserialize, Serialize};

use crate::error::UpdateError;

pub const DEFAULT_ALPHA: f64 = 0.999;

/// Flat parameter vector of the toy detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelParams(pub Vec<f64>);

impl ModelParams {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Order-sensitive hash of the exact bit patterns.
    pub fn checksum(&self) -> u64 {
        self.0.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, v| {
            (h ^ v.to_bits()).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }
}

fn check_dims(a: &ModelParams, b: &ModelParams) -> Result<(), UpdateError> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(UpdateError::DimensionMismatch {
            teacher: a.len(),
            student: b.len(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayMode {
    #[default]
    Squared,
    Raw,
}

impl DecayMode {
    pub fn decay(self, alpha: f64) -> f64 {
        match self {
            DecayMode::Squared => alpha * alpha,
            DecayMode::Raw => alpha,
        }
    }
}

fn blend(prev: &[f64], new: &[f64], decay: f64) -> Vec<f64> {
    prev.iter()
        .zip(new)
        .map(|(p, s)| decay * p + (1.0 - decay) * s)
        .collect()
}

/// `alpha^2 * prev_teacher + (1 - alpha^2) * student`, elementwise.
pub fn ema_step(
    prev_teacher: &ModelParams,
    student: &ModelParams,
    alpha: f64,
) -> Result<ModelParams, UpdateError> {
    ema_step_with(prev_teacher, student, alpha, DecayMode::Squared)
}

pub fn ema_step_with(
    prev_teacher: &ModelParams,
    student: &ModelParams,
    alpha: f64,
    mode: DecayMode,
) -> Result<ModelParams, UpdateError> {
    check_dims(prev_teacher, student)?;
    Ok(ModelParams(blend(&prev_teacher.0, &student.0, mode.decay(alpha))))
}

pub fn deep_copy(student: &ModelParams) -> ModelParams {
    student.clone()
}

/// First and second EMA accumulators. The teacher is `2 * e1 - e2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemaState {
    pub alpha: f64,
    pub mode: DecayMode,
    pub e1: ModelParams,
    pub e2: ModelParams,
}

impl DemaState {
    /// Both accumulators start at the initial teacher weights.
    pub fn new(alpha: f64, initial_teacher: &ModelParams) -> Self {
        Self {
            alpha,
            mode: DecayMode::Squared,
            e1: initial_teacher.clone(),
            e2: initial_teacher.clone(),
        }
    }

    pub fn with_mode(mut self, mode: DecayMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn teacher(&self) -> ModelParams {
        ModelParams(
            self.e1
                .0
                .iter()
                .zip(&self.e2.0)
                .map(|(a, b)| 2.0 * a - b)
                .collect(),
        )
    }

    pub fn step(&mut self, student: &ModelParams) -> Result<ModelParams, UpdateError> {
        check_dims(&self.e1, student)?;
        let d = self.mode.decay(self.alpha);
        self.e1.0 = blend(&self.e1.0, &student.0, d);
        self.e2.0 = blend(&self.e2.0, &self.e1.0, d);
        Ok(self.teacher())
    }
}

pub fn dema_step(state: &mut DemaState, student: &ModelParams) -> Result<ModelParams, UpdateError> {
    state.step(student)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    DeepCopy,
    Ema,
    Dema,
}

impl UpdateMode {
    pub fn label(self) -> &'static str {
        match self {
            UpdateMode::DeepCopy => "deepcopy",
            UpdateMode::Ema => "ema",
            UpdateMode::Dema => "dema",
        }
    }
}

/// Owns the teacher weights and applies the configured update after each student step.
#[derive(Debug, Clone)]
pub struct TeacherUpdater {
    mode: UpdateMode,
    alpha: f64,
    decay_mode: DecayMode,
    teacher: ModelParams,
    dema: DemaState,
}

impl TeacherUpdater {
    pub fn new(mode: UpdateMode, alpha: f64, decay_mode: DecayMode, initial: &ModelParams) -> Self {
        Self {
            mode,
            alpha,
            decay_mode,
            teacher: initial.clone(),
            dema: DemaState::new(alpha, initial).with_mode(decay_mode),
        }
    }

    pub fn teacher(&self) -> &ModelParams {
        &self.teacher
    }

    /// Replaces the teacher and restarts the accumulators at `params`.
    pub fn reset(&mut self, params: &ModelParams) {
        self.teacher = params.clone();
        self.dema = DemaState::new(self.alpha, params).with_mode(self.decay_mode);
    }

    pub fn update(&mut self, student: &ModelParams) -> Result<&ModelParams, UpdateError> {
        self.teacher = match self.mode {
            UpdateMode::DeepCopy => {
                check_dims(&self.teacher, student)?;
                deep_copy(student)
            }
            UpdateMode::Ema => ema_step_with(&self.teacher, student, self.alpha, self.decay_mode)?,
            UpdateMode::Dema => self.dema.step(student)?,
        };
        Ok(&self.teacher)
    }
}
