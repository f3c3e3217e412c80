//! Per-step records of a sign-update training run.

use std::time::Duration;

use serde::Serialize;

use crate::attention_model::{Field, WeightMatrix};
use crate::oracle::{Estimate, FieldEstimate};

#[derive(Clone, Debug)]
pub struct StepRecord {
    pub step: usize,
    /// Weights at the start of this step.
    pub weights: WeightMatrix,
    /// Gradient at `weights`; absent for the final state.
    pub gradient: Option<FieldEstimate>,
    /// Thresholded sign of the gradient; absent for the final state.
    pub signs: Option<Field>,
    /// Expected reward (RL) or population loss (SFT) at `weights`.
    pub objective: Estimate,
    /// Largest column L1 distance from the optimal scores.
    pub distance: f64,
    pub elapsed: Duration,
}

/// Length `S + 1`: the initial state, one record per update, and the final state last.
#[derive(Clone, Debug, Default)]
pub struct TrainTrace {
    pub steps: Vec<StepRecord>,
}

impl TrainTrace {
    pub fn final_weights(&self) -> &WeightMatrix {
        &self.steps.last().expect("trace is never empty").weights
    }

    pub fn summary(&self) -> Vec<StepSummary> {
        self.steps
            .iter()
            .map(|r| {
                let (mut pos, mut neg, mut zero) = (0, 0, 0);
                if let Some(s) = &r.signs {
                    for (_, v) in s.entries() {
                        match v {
                            v if v > 0.0 => pos += 1,
                            v if v < 0.0 => neg += 1,
                            _ => zero += 1,
                        }
                    }
                }
                StepSummary {
                    step: r.step,
                    objective: r.objective.mean,
                    objective_std_error: r.objective.std_error,
                    distance_to_optimal: r.distance,
                    gradient_max_abs: r.gradient.as_ref().map(|g| g.mean.max_abs()),
                    positive_signs: pos,
                    negative_signs: neg,
                    zero_signs: zero,
                }
            })
            .collect()
    }
}

/// Deterministic, serializable view of one step (no timing).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepSummary {
    pub step: usize,
    pub objective: f64,
    pub objective_std_error: f64,
    pub distance_to_optimal: f64,
    pub gradient_max_abs: Option<f64>,
    pub positive_signs: usize,
    pub negative_signs: usize,
    pub zero_signs: usize,
}
