use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneKind {
    Unstructured,
    Structured,
}

/// Per-client pruning progress. All rates and levels are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    pub rate_unstructured: f64,
    pub rate_structured: f64,
    pub target_unstructured: f64,
    pub target_structured: f64,
    pub accuracy_threshold: f64,
    pub epsilon_unstructured: f64,
    pub epsilon_structured: f64,
    pub current_unstructured: f64,
    pub current_structured: f64,
}

impl PruneSchedule {
    pub fn validate(&self) -> Result<()> {
        let pct = |key: &str, v: f64| -> Result<()> {
            if !(0.0..100.0).contains(&v) {
                return Err(Error::config(key, format!("{v} must lie in [0, 100)")));
            }
            Ok(())
        };
        pct("r_us", self.rate_unstructured)?;
        pct("r_s", self.rate_structured)?;
        pct("p_us", self.target_unstructured)?;
        pct("p_s", self.target_structured)?;
        if self.current_unstructured > self.target_unstructured
            || self.current_structured > self.target_structured
            || self.current_unstructured < 0.0
            || self.current_structured < 0.0
        {
            return Err(Error::config("schedule", "current sparsity outside [0, target]"));
        }
        if !(self.epsilon_unstructured >= 0.0 && self.epsilon_structured >= 0.0) {
            return Err(Error::config("epsilon", "distance thresholds must be non-negative"));
        }
        if self.accuracy_threshold.is_nan() {
            return Err(Error::config("acc_th", "not a number"));
        }
        Ok(())
    }

    pub fn current(&self, kind: PruneKind) -> f64 {
        match kind {
            PruneKind::Unstructured => self.current_unstructured,
            PruneKind::Structured => self.current_structured,
        }
    }

    pub fn target(&self, kind: PruneKind) -> f64 {
        match kind {
            PruneKind::Unstructured => self.target_unstructured,
            PruneKind::Structured => self.target_structured,
        }
    }

    pub fn rate(&self, kind: PruneKind) -> f64 {
        match kind {
            PruneKind::Unstructured => self.rate_unstructured,
            PruneKind::Structured => self.rate_structured,
        }
    }

    pub fn epsilon(&self, kind: PruneKind) -> f64 {
        match kind {
            PruneKind::Unstructured => self.epsilon_unstructured,
            PruneKind::Structured => self.epsilon_structured,
        }
    }

    /// Cumulative level the next prune event of `kind` would reach.
    pub fn next_level(&self, kind: PruneKind) -> f64 {
        (self.current(kind) + self.rate(kind)).min(self.target(kind))
    }

    /// Moves `kind` one increment toward its target.
    pub fn advance(&self, kind: PruneKind) -> PruneSchedule {
        let mut next = self.clone();
        let level = self.next_level(kind).max(self.current(kind));
        match kind {
            PruneKind::Unstructured => next.current_unstructured = level,
            PruneKind::Structured => next.current_structured = level,
        }
        next
    }
}

/// Prune gate for one kind: validation accuracy at or above the threshold,
/// target not yet reached, and mask distance at or above the kind's epsilon.
pub fn should_prune(accuracy: f64, schedule: &PruneSchedule, delta: f64, kind: PruneKind) -> bool {
    accuracy >= schedule.accuracy_threshold
        && schedule.current(kind) < schedule.target(kind)
        && delta >= schedule.epsilon(kind)
}
