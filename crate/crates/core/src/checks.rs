//! Diagnostic sweeps shared by the command line and the acceptance suite: finite
//! differences, the parity closed form, separation margins and level statistics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention_model::{attend, init_weights, rollout_deterministic, Entry, Field, ScoreMatrix, WeightMatrix};
use crate::boolean_task::{tokens_from_mask, Chain, FunctionKind, TaskSpec};
use crate::error::Result;
use crate::oracle::{
    abcd, finite_difference, level_marginals, level_mean_stats, ExpectationEngine, LevelMeanStats, TokenLaw,
};
use crate::rl_finetune::{
    expected_block_reward, parity_closed_form, policy_gradient, rl_separation_margin, sign_ascent, SeparationMargin,
};
use crate::sft_finetune::{population_loss, sft_gradient, sft_separation_margin};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-6;
/// Kink guard radius, in units of the finite-difference step.
pub const KINK_RADIUS_STEPS: f64 = 10.0;

/// One-based coordinates of a weight entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub level: usize,
    pub node: usize,
    pub position: usize,
}

impl From<Entry> for Cell {
    fn from(e: Entry) -> Self {
        Cell { level: e.t, node: e.l + 1, position: e.p + 1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdDeviation {
    pub cell: Cell,
    pub analytic: f64,
    pub numeric: f64,
    pub abs_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub objective: String,
    pub h: f64,
    pub tolerance: f64,
    pub total: usize,
    pub checked: usize,
    pub skipped: Vec<Cell>,
    pub worst: Option<FdDeviation>,
    pub failures: Vec<FdDeviation>,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn skipped_fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.skipped.len() as f64 / self.total as f64
        }
    }

    fn new(objective: &str, h: f64, tolerance: f64, total: usize) -> Self {
        FdReport { objective: objective.into(), h, tolerance, total, checked: 0, skipped: Vec::new(), worst: None, failures: Vec::new() }
    }

    fn record(&mut self, e: Entry, analytic: f64, numeric: f64) {
        let dev = FdDeviation { cell: e.into(), analytic, numeric, abs_error: (analytic - numeric).abs() };
        self.checked += 1;
        if self.worst.is_none_or(|w| dev.abs_error > w.abs_error) {
            self.worst = Some(dev);
        }
        if dev.abs_error.is_nan() || dev.abs_error > self.tolerance {
            self.failures.push(dev);
        }
    }
}

/// Weights drawn uniformly from `[-scale, scale]`.
pub fn random_weights(task: &TaskSpec, scale: f64, seed: u64) -> WeightMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = init_weights(task);
    let entries: Vec<Entry> = w.entries().map(|(e, _)| e).collect();
    for e in entries {
        w.set(e, rng.random_range(-scale..=scale));
    }
    w
}

fn has_kink(kind: FunctionKind) -> bool {
    kind != FunctionKind::Parity
}

/// Compares the exact policy gradient with central differences of the per-level
/// expected reward. For AND/OR, entries whose column output comes within the kink
/// radius of zero on some reachable predecessor are skipped.
pub fn fd_check_rl(task: &TaskSpec, w: &WeightMatrix, h: f64, tolerance: f64) -> Result<FdReport> {
    let exact = ExpectationEngine::exact();
    let scores = w.softmax();
    let grad = policy_gradient(task, &scores, &exact)?.mean;
    let marginals = level_marginals(task, &scores, task.depth() - 1)?;
    let radius = KINK_RADIUS_STEPS * h;
    let mut report = FdReport::new("expected per-level reward", h, tolerance, grad.len());
    for (e, g) in grad.entries() {
        if has_kink(task.kind()) {
            let n = task.width(e.t - 1);
            let near = marginals[e.t - 1].iter().enumerate().any(|(mask, &mu)| {
                mu > 0.0 && attend(scores.column(e.t, e.l), &tokens_from_mask(mask as u64, n)).abs() <= radius
            });
            if near {
                report.skipped.push(e.into());
                continue;
            }
        }
        let numeric = finite_difference(|v| Ok(expected_block_reward(task, &v.softmax(), &exact, e.t)?.mean), w, e, h)?;
        report.record(e, g, numeric);
    }
    Ok(report)
}

fn all_rollouts(task: &TaskSpec, scores: &ScoreMatrix) -> Result<Vec<(Chain, Vec<Vec<f64>>)>> {
    (0..1u64 << task.d())
        .map(|mask| {
            let r = rollout_deterministic(task, scores, &tokens_from_mask(mask, task.d()))?;
            Ok((r.chain, r.xi))
        })
        .collect()
}

/// Compares the exact supervised gradient with central differences of the population
/// loss. Entries whose stencil flips a generated token are skipped, as are AND/OR
/// entries within the kink radius.
pub fn fd_check_sft(task: &TaskSpec, w: &WeightMatrix, h: f64, tolerance: f64) -> Result<FdReport> {
    let exact = ExpectationEngine::exact();
    let scores = w.softmax();
    let grad = sft_gradient(task, &scores, &exact)?.mean;
    let base = all_rollouts(task, &scores)?;
    let radius = KINK_RADIUS_STEPS * h;
    let mut report = FdReport::new("population hinge loss", h, tolerance, grad.len());
    for (e, g) in grad.entries() {
        let kink = has_kink(task.kind()) && base.iter().any(|(_, xi)| xi[e.t - 1][e.l].abs() <= radius);
        let flip = kink || [h, -h].iter().try_fold(false, |acc, &dh| -> Result<bool> {
            if acc {
                return Ok(true);
            }
            let mut v = w.clone();
            v.add(e, dh);
            let moved = all_rollouts(task, &v.softmax())?;
            Ok(moved.iter().zip(&base).any(|(a, b)| a.0 != b.0))
        })?;
        if flip {
            report.skipped.push(e.into());
            continue;
        }
        let numeric = finite_difference(|v| Ok(population_loss(task, &v.softmax(), &exact)?.total.mean), w, e, h)?;
        report.record(e, g, numeric);
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedFormReport {
    pub eta: f64,
    pub steps: usize,
    pub worst_relative_error: f64,
    /// Step, level, node and position (one-based) of the worst entry.
    pub worst_at: Option<(usize, Cell)>,
    pub tolerance: f64,
    pub passed: bool,
}

/// Runs exact sign ascent from uniform weights and compares every score at every step
/// with the parity closed form.
pub fn closed_form_sweep(task: &TaskSpec, etas: &[f64], steps: usize, tolerance: f64) -> Result<Vec<ClosedFormReport>> {
    let exact = ExpectationEngine::exact();
    etas.iter()
        .map(|&eta| {
            let trace = sign_ascent(task, &init_weights(task), eta, steps, &exact)?;
            let mut worst = 0.0f64;
            let mut worst_at = None;
            for rec in &trace.steps {
                let scores = rec.weights.softmax();
                for (e, v) in scores.entries() {
                    let want = parity_closed_form(task, eta, rec.step, e.t, task.is_child(e.t, e.l, e.p))?;
                    let rel = (v - want).abs() / want.abs();
                    if rel.is_nan() || rel > worst {
                        worst = rel;
                        worst_at = Some((rec.step, e.into()));
                    }
                }
            }
            Ok(ClosedFormReport { eta, steps, worst_relative_error: worst, worst_at, tolerance, passed: worst <= tolerance })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginCheck {
    pub margin: SeparationMargin,
    /// Per non-child `(p', margin)` predicted from the a/b/c/d masses (AND/OR only).
    pub predicted: Vec<(usize, f64)>,
    pub worst_prediction_error: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarginLaw {
    Rl,
    Sft,
}

/// Separation margins of every column that has non-child positions, with the a/b/c/d
/// prediction alongside for AND/OR. `scores` is ignored for the supervised law, which is
/// defined at uniform attention.
pub fn separation_sweep(task: &TaskSpec, scores: &ScoreMatrix, engine: &ExpectationEngine, law: MarginLaw) -> Result<Vec<MarginCheck>> {
    let uniform = init_weights(task).softmax();
    let mut out = Vec::new();
    for t in 1..=task.depth() {
        if task.width(t - 1) <= 2 {
            continue;
        }
        for l in 0..task.width(t) {
            let (margin, law_scores, token_law) = match law {
                MarginLaw::Rl => (rl_separation_margin(task, scores, engine, t, l)?, scores, TokenLaw::OnPolicy),
                MarginLaw::Sft => (sft_separation_margin(task, t, l, engine)?, &uniform, TokenLaw::GroundTruth),
            };
            let predictable = task.kind() != FunctionKind::Parity && engine.is_exact() && *law_scores == uniform;
            let predicted: Vec<(usize, f64)> = if predictable {
                margin
                    .margins
                    .iter()
                    .map(|&(p, _)| Ok((p, abcd(task, law_scores, t, l, p, token_law)?.predicted_margin(task.kind(), task.k()))))
                    .collect::<Result<_>>()?
            } else {
                Vec::new()
            };
            let worst_prediction_error = (!predicted.is_empty()).then(|| {
                margin.margins.iter().zip(&predicted).map(|(m, p)| (m.1 - p.1).abs()).fold(0.0, f64::max)
            });
            out.push(MarginCheck { margin, predicted, worst_prediction_error });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecursionVariant {
    Linear,
    Squared,
    Both,
    Neither,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelStatsReport {
    /// `stats[s][t - 1]`: statistics of level `t` before update `s`.
    pub stats: Vec<Vec<LevelMeanStats>>,
    pub max_spread: f64,
    pub max_abs_mean: f64,
    /// Variant that matched brute force wherever either one did.
    pub identified: RecursionVariant,
    /// `(step, level)` pairs where neither variant matched.
    pub unmatched: Vec<(usize, usize)>,
    /// Variant closest to brute force at the unmatched pairs.
    pub closest_when_unmatched: Option<RecursionVariant>,
}

/// Level statistics along an exact parity sign-ascent run.
pub fn level_stats_run(task: &TaskSpec, eta: f64, steps: usize) -> Result<LevelStatsReport> {
    let trace = sign_ascent(task, &init_weights(task), eta, steps, &ExpectationEngine::exact())?;
    let stats: Vec<Vec<LevelMeanStats>> = trace
        .steps
        .iter()
        .map(|rec| {
            let scores = rec.weights.softmax();
            (1..=task.depth()).map(|t| level_mean_stats(task, &scores, t)).collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;
    let flat = || stats.iter().flatten();
    let max_spread = flat().map(|s| s.spread).fold(0.0, f64::max);
    let max_abs_mean = flat().flat_map(|s| s.brute.iter()).map(|v| v.abs()).fold(0.0, f64::max);
    let (lin, sq) = (flat().any(|s| s.linear_matches), flat().any(|s| s.squared_matches));
    let identified = match (lin, sq) {
        (true, false) => RecursionVariant::Linear,
        (false, true) => RecursionVariant::Squared,
        (true, true) => RecursionVariant::Both,
        (false, false) => RecursionVariant::Neither,
    };
    let mut unmatched = Vec::new();
    let (mut lin_err, mut sq_err) = (0.0, 0.0);
    for (s, row) in stats.iter().enumerate() {
        for st in row {
            if !st.linear_matches && !st.squared_matches {
                unmatched.push((s, st.level));
                lin_err += (st.brute[0] - st.linear).abs();
                sq_err += (st.brute[0] - st.squared).abs();
            }
        }
    }
    let closer = if lin_err < sq_err { RecursionVariant::Linear } else { RecursionVariant::Squared };
    let closest_when_unmatched = (!unmatched.is_empty()).then_some(closer);
    Ok(LevelStatsReport { stats, max_spread, max_abs_mean, identified, unmatched, closest_when_unmatched })
}

/// Largest `|sum of column|` over every column of `field`.
pub fn max_column_sum(field: &Field) -> f64 {
    (1..=field.depth())
        .flat_map(|t| field.level(t).iter().map(|c| c.iter().sum::<f64>().abs()))
        .fold(0.0, f64::max)
}
