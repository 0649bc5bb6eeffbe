//! Adaptive foreground threshold driven by the ratio of mean foreground confidence
//! to mean background confidence.

use serde::{Deserialize, Serialize};

use crate::detection::{foreground_score, Candidate};

pub const DEFAULT_GAMMA: f64 = 0.05;
pub const DEFAULT_CLAMP_LO: f64 = 0.5;
pub const DEFAULT_CLAMP_HI: f64 = 0.9;

/// How the pseudo-label threshold is chosen each iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    Static(f64),
    /// Ratio rule floored to one decimal.
    Adaptive,
    /// Ratio rule without the decimal floor.
    Continuous,
    /// Mean plus one standard deviation of confident foreground scores.
    DynamicBaseline,
}

impl ThresholdMode {
    pub fn label(&self) -> String {
        match self {
            ThresholdMode::Static(t) => format!("static_{t}"),
            ThresholdMode::Adaptive => "adaptive".into(),
            ThresholdMode::Continuous => "continuous".into(),
            ThresholdMode::DynamicBaseline => "dynamic".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdState {
    pub gamma: f64,
    pub clamp_lo: f64,
    pub clamp_hi: f64,
    pub current: f64,
}

impl Default for ThresholdState {
    fn default() -> Self {
        Self::new(DEFAULT_GAMMA, DEFAULT_CLAMP_LO, DEFAULT_CLAMP_HI)
    }
}

impl ThresholdState {
    /// Starts at `clamp_lo`.
    pub fn new(gamma: f64, clamp_lo: f64, clamp_hi: f64) -> Self {
        Self {
            gamma,
            clamp_lo,
            clamp_hi,
            current: clamp_lo,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.gamma > 0.0
            && 0.0 < self.clamp_lo
            && self.clamp_lo <= self.current
            && self.current <= self.clamp_hi
            && self.clamp_hi <= 1.0
    }

    /// Floored ratio rule. Empty populations or a zero background mean keep the
    /// current value.
    pub fn compute(&mut self, fg_scores: &[f64], bg_scores: &[f64]) -> f64 {
        self.compute_with(fg_scores, bg_scores, true)
    }

    /// Ratio rule without the one-decimal floor.
    pub fn compute_continuous(&mut self, fg_scores: &[f64], bg_scores: &[f64]) -> f64 {
        self.compute_with(fg_scores, bg_scores, false)
    }

    fn compute_with(&mut self, fg_scores: &[f64], bg_scores: &[f64], discrete: bool) -> f64 {
        let (Some(fg), Some(bg)) = (mean(fg_scores), mean(bg_scores)) else {
            return self.current;
        };
        if bg <= 0.0 {
            return self.current;
        }
        let raw = (fg / bg).powf(self.gamma);
        let value = if discrete { floor_tenth(raw) } else { raw };
        self.current = value.clamp(self.clamp_lo, self.clamp_hi);
        self.current
    }

    /// Mean + one standard deviation of the foreground scores above `clamp_lo`.
    pub fn compute_dynamic(&mut self, fg_scores: &[f64]) -> f64 {
        let confident: Vec<f64> = fg_scores
            .iter()
            .copied()
            .filter(|&s| s > self.clamp_lo)
            .collect();
        let Some(m) = mean(&confident) else {
            return self.current;
        };
        let var = confident.iter().map(|s| (s - m).powi(2)).sum::<f64>() / confident.len() as f64;
        self.current = (m + var.sqrt()).clamp(self.clamp_lo, self.clamp_hi);
        self.current
    }
}

/// Rounds down to one decimal place, e.g. `0.94 -> 0.9`. A 1e-9 guard keeps values
/// that are a decimal up to rounding noise on that decimal.
pub fn floor_tenth(x: f64) -> f64 {
    ((x * 10.0 + 1e-9).floor()) / 10.0
}

fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// Splits candidates by `foreground_score > tau` (strict).
pub fn filter_candidates(cands: &[Candidate], tau: f64) -> (Vec<Candidate>, Vec<Candidate>) {
    cands
        .iter()
        .cloned()
        .partition(|c| foreground_score(c).0 > tau)
}

/// Score populations for the ratio rule, using `tau` to decide which candidates
/// count as foreground: foreground scores of the foreground side and the
/// background-class probability of the background side.
pub fn score_populations<'a, I>(cands: I, tau: f64) -> (Vec<f64>, Vec<f64>)
where
    I: IntoIterator<Item = &'a Candidate>,
{
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for c in cands {
        let (s, _) = foreground_score(c);
        if s > tau {
            fg.push(s);
        } else {
            bg.push(c.scores.background());
        }
    }
    (fg, bg)
}

/// One ratio-rule state per foreground class. Background scores stay pooled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClassThreshold {
    pub states: Vec<ThresholdState>,
}

impl PerClassThreshold {
    pub fn new(num_classes: usize, template: ThresholdState) -> Self {
        Self {
            states: vec![template; num_classes],
        }
    }

    pub fn thresholds(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.current).collect()
    }

    pub fn update(&mut self, cands: &[Candidate], discrete: bool) -> Vec<f64> {
        let taus = self.thresholds();
        let mut fg: Vec<Vec<f64>> = vec![Vec::new(); self.states.len()];
        let mut bg = Vec::new();
        for c in cands {
            let (s, k) = foreground_score(c);
            if s > taus[k] {
                fg[k].push(s);
            } else {
                bg.push(c.scores.background());
            }
        }
        for (state, fg_k) in self.states.iter_mut().zip(&fg) {
            if discrete {
                state.compute(fg_k, &bg);
            } else {
                state.compute_continuous(fg_k, &bg);
            }
        }
        self.thresholds()
    }

    pub fn filter(&self, cands: &[Candidate]) -> (Vec<Candidate>, Vec<Candidate>) {
        cands.iter().cloned().partition(|c| {
            let (s, k) = foreground_score(c);
            s > self.states[k].current
        })
    }
}
