//! Supervised fine-tuning on self-generated chains: the model generates every level
//! deterministically and each generated token is scored against its ground truth.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention_model::{
    init_weights, optimal_scores, rollout_deterministic, softmax_distance, Entry, Field, ScoreMatrix, WeightMatrix,
};
use crate::boolean_task::{ground_truth_chain, TaskSpec};
use crate::error::{Error, Result};
use crate::oracle::{sign_field, ZeroRule, Estimate, ExpectationEngine, FieldEstimate, FieldMoments, Moments};
use crate::rl_finetune::{gamma, SeparationMargin};
use crate::trace::{StepRecord, TrainTrace};

pub fn hinge(score: f64, label: i8) -> f64 {
    (1.0 - score * f64::from(label)).max(0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: Estimate,
    /// `E_x[L_t]` for each level.
    pub per_level: Vec<f64>,
}

/// Population hinge loss of deterministic generation against the ground truth.
pub fn population_loss(task: &TaskSpec, scores: &ScoreMatrix, engine: &ExpectationEngine) -> Result<LossReport> {
    scores.check_task(task)?;
    let norm = 1.0 / (task.k() as f64 - 1.0);
    let mut per_level = vec![0.0; task.depth()];
    let mut total = Moments::default();
    let n = engine.visit_inputs(task, |x, w| {
        let run = rollout_deterministic(task, scores, x)?;
        let gt = ground_truth_chain(task, x)?;
        let mut sample = 0.0;
        for t in 1..=task.depth() {
            let mut lt = 0.0;
            for (l, (&q, &label)) in run.q[t - 1].iter().zip(gt.level(t)).enumerate() {
                let margin = 1.0 - q * f64::from(label);
                if margin < 0.0 {
                    return Err(Error::HingeClipped { level: t, node: l, margin });
                }
                lt += margin;
            }
            per_level[t - 1] += w * norm * lt;
            sample += norm * lt;
        }
        total.push(w, sample);
        Ok(())
    })?;
    Ok(LossReport { total: total.finish(n), per_level })
}

/// Gradient of the population loss. Generated tokens enter only as constants, and
/// ground-truth values only as labels.
pub fn sft_gradient(task: &TaskSpec, scores: &ScoreMatrix, engine: &ExpectationEngine) -> Result<FieldEstimate> {
    scores.check_task(task)?;
    let kind = task.kind();
    let coef = 2.0 / (task.k() as f64 - 1.0);
    let mut moments = FieldMoments::new(task);
    let n = engine.visit_inputs(task, |x, w| {
        let run = rollout_deterministic(task, scores, x)?;
        let gt = ground_truth_chain(task, x)?;
        let mut sample = Field::zeros(task);
        for t in 1..=task.depth() {
            let prev = run.chain.level(t - 1);
            for (l, &label) in gt.level(t).iter().enumerate() {
                let xi = run.xi[t - 1][l];
                let c = -coef * f64::from(label) * kind.psi_prime(xi)?;
                if c == 0.0 {
                    continue;
                }
                for (p, &s) in scores.column(t, l).iter().enumerate() {
                    sample.set(Entry { t, l, p }, c * (f64::from(prev[p]) - xi) * s);
                }
            }
        }
        moments.push(w, &sample);
        Ok(())
    })?;
    Ok(moments.finish(n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepwiseEntry {
    pub step: usize,
    /// Levels (1-based) whose sign block has at least one nonzero entry.
    pub nonzero_levels: Vec<usize>,
    pub per_level_loss: Vec<f64>,
    pub distance_to_optimal: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepwiseReport {
    pub iterations: Vec<StepwiseEntry>,
}

pub fn nonzero_levels(signs: &Field) -> Vec<usize> {
    let mut levels: Vec<usize> = signs.entries().filter(|(_, v)| *v != 0.0).map(|(e, _)| e.t).collect();
    levels.dedup();
    levels
}

/// Sign gradient descent: `W <- W - eta sign(grad)`, with zero-thresholded entries frozen.
pub fn sign_descent(
    task: &TaskSpec,
    w0: &WeightMatrix,
    eta: f64,
    steps: usize,
    engine: &ExpectationEngine,
) -> Result<(TrainTrace, StepwiseReport)> {
    if eta.is_nan() || eta <= 0.0 {
        return Err(Error::InvalidArgument(format!("learning rate {eta} must be positive")));
    }
    w0.check_task(task)?;
    let opt = optimal_scores(task);
    let start = Instant::now();
    let mut trace = TrainTrace::default();
    let mut report = StepwiseReport::default();
    let mut w = w0.clone();
    for step in 0..=steps {
        let scores = w.softmax();
        let loss = population_loss(task, &scores, engine)?;
        let distance = softmax_distance(&scores, &opt)?;
        let (gradient, signs, next) = if step < steps {
            let grad = sft_gradient(task, &scores, engine)?;
            let signs = sign_field(&grad, &scores, ZeroRule::supervised(engine.mode))?;
            let next = w.zip_with(&signs, |v, s| v - eta * s)?;
            (Some(grad), Some(signs), Some(next))
        } else {
            (None, None, None)
        };
        report.iterations.push(StepwiseEntry {
            step,
            nonzero_levels: signs.as_ref().map(nonzero_levels).unwrap_or_default(),
            per_level_loss: loss.per_level.clone(),
            distance_to_optimal: distance,
        });
        trace.steps.push(StepRecord {
            step,
            weights: w.clone(),
            gradient,
            signs,
            objective: loss.total,
            distance,
            elapsed: start.elapsed(),
        });
        if let Some(n) = next {
            w = n;
        }
    }
    Ok((trace, report))
}

/// Separation of the critical components of column `(t, l)` with ground-truth
/// predecessors and uniform attention.
pub fn sft_separation_margin(task: &TaskSpec, t: usize, l: usize, engine: &ExpectationEngine) -> Result<SeparationMargin> {
    task.check_level(t)?;
    if l >= task.width(t) {
        return Err(Error::InvalidArgument(format!("node {l} out of range at level {t}")));
    }
    let uniform = init_weights(task).softmax();
    let n = task.width(t - 1);
    let mut means = vec![0.0; n];
    engine.visit_inputs(task, |x, w| {
        let gt = ground_truth_chain(task, x)?;
        for (j, m) in means.iter_mut().enumerate() {
            *m += w * gamma(task, &uniform, gt.level(t - 1), t, l, j)?;
        }
        Ok(())
    })?;
    Ok(SeparationMargin::from_means(task, t, l, means))
}
