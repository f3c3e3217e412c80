//! Fine-tuning with an immediate per-level reward and sign policy ascent.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention_model::{attend, forward_level, optimal_scores, softmax_distance, Entry, Field, GradientField, ScoreMatrix, WeightMatrix};
use crate::boolean_task::{tokens_from_mask, Chain, FunctionKind, TaskSpec, Token};
use crate::error::{Error, Result};
use crate::oracle::{
    level_marginals, sign_field, ZeroRule, visit_chains_given_input, Estimate, ExpectationEngine, FieldEstimate, FieldMoments,
};
use crate::trace::{StepRecord, TrainTrace};

/// Largest input dimension for which the final-reward variance sweep runs.
pub const VARIANCE_MAX_D: usize = 10;

fn check_prev(task: &TaskSpec, t: usize, prev: &[Token]) -> Result<()> {
    task.check_level(t)?;
    if prev.len() != task.width(t - 1) {
        return Err(Error::ShapeMismatch(format!(
            "level {} has {} tokens, expected {}",
            t - 1,
            prev.len(),
            task.width(t - 1)
        )));
    }
    Ok(())
}

/// Reward of level `t`: the fraction of the `k - 1` generated tokens it got right,
/// counted with sign.
pub fn step_reward(task: &TaskSpec, t: usize, prev: &[Token], cur: &[Token]) -> Result<f64> {
    check_prev(task, t, prev)?;
    if cur.len() != task.width(t) {
        return Err(Error::ShapeMismatch(format!("level {t} has {} tokens, expected {}", cur.len(), task.width(t))));
    }
    let kind = task.kind();
    let total: i64 = cur
        .iter()
        .enumerate()
        .map(|(j, &y)| {
            let (a, b) = task.children(t, j);
            i64::from(y) * i64::from(kind.phi2(prev[a], prev[b]))
        })
        .sum();
    Ok(total as f64 / (task.k() as f64 - 1.0))
}

fn chain_reward(task: &TaskSpec, chain: &Chain) -> f64 {
    (1..=task.depth())
        .map(|t| step_reward(task, t, chain.level(t - 1), chain.level(t)).expect("chain shape checked"))
        .sum()
}

/// `E[sum_t r_t]` under the policy.
pub fn expected_reward(task: &TaskSpec, scores: &ScoreMatrix, engine: &ExpectationEngine) -> Result<Estimate> {
    engine.expectation(task, scores, |c| chain_reward(task, c))
}

/// `E[r_t]` for a single level.
pub fn expected_block_reward(task: &TaskSpec, scores: &ScoreMatrix, engine: &ExpectationEngine, t: usize) -> Result<Estimate> {
    task.check_level(t)?;
    engine.expectation(task, scores, |c| step_reward(task, t, c.level(t - 1), c.level(t)).expect("chain shape checked"))
}

/// Critical gradient component `gamma^j_l` for predecessor tokens `prev`.
pub fn gamma(task: &TaskSpec, scores: &ScoreMatrix, prev: &[Token], t: usize, l: usize, j: usize) -> Result<f64> {
    check_prev(task, t, prev)?;
    if l >= task.width(t) || j >= prev.len() {
        return Err(Error::InvalidArgument(format!("node {l} or position {j} out of range at level {t}")));
    }
    let (a, b) = task.children(t, l);
    let kind = task.kind();
    let xi = attend(scores.column(t, l), prev);
    let coef = 2.0 / (task.k() as f64 - 1.0);
    Ok(coef * kind.psi_prime(xi)? * f64::from(kind.phi2(prev[a], prev[b])) * f64::from(prev[j]))
}

/// Adds `w` times the gradient contribution of predecessor tokens `prev` to level `t`.
///
/// Per entry this is `(gamma^p - sum_i sigma_i gamma^i) sigma_p`, and the inner sum
/// collapses to `gamma` with `prev_p` replaced by the attention output.
fn add_level_contribution(task: &TaskSpec, scores: &ScoreMatrix, t: usize, prev: &[Token], w: f64, out: &mut Field) -> Result<()> {
    let kind = task.kind();
    let coef = 2.0 / (task.k() as f64 - 1.0);
    for l in 0..task.width(t) {
        let col = scores.column(t, l);
        let xi = attend(col, prev);
        let (a, b) = task.children(t, l);
        let c = coef * kind.psi_prime(xi)? * f64::from(kind.phi2(prev[a], prev[b]));
        if c == 0.0 {
            continue;
        }
        for (p, &s) in col.iter().enumerate() {
            out.add(Entry { t, l, p }, w * c * (f64::from(prev[p]) - xi) * s);
        }
    }
    Ok(())
}

/// Gradient of the expected immediate reward with respect to every unmasked weight.
pub fn policy_gradient(task: &TaskSpec, scores: &ScoreMatrix, engine: &ExpectationEngine) -> Result<FieldEstimate> {
    scores.check_task(task)?;
    if engine.is_exact() {
        engine.check_budget(task)?;
        let marginals = level_marginals(task, scores, task.depth() - 1)?;
        let mut grad = Field::zeros(task);
        for t in 1..=task.depth() {
            for (mask, &mu) in marginals[t - 1].iter().enumerate() {
                if mu > 0.0 {
                    let prev = tokens_from_mask(mask as u64, task.width(t - 1));
                    add_level_contribution(task, scores, t, &prev, mu, &mut grad)?;
                }
            }
        }
        let std_error = Field::zeros(task);
        return Ok(FieldEstimate { mean: grad, std_error });
    }
    let mut moments = FieldMoments::new(task);
    let mut failure = None;
    let n = engine.visit_chains(task, scores, |chain, w| {
        let mut sample = Field::zeros(task);
        for t in 1..=task.depth() {
            if let Err(e) = add_level_contribution(task, scores, t, chain.level(t - 1), 1.0, &mut sample) {
                failure.get_or_insert(e);
            }
        }
        moments.push(w, &sample);
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(moments.finish(n))
}

/// `d ln p(y^(t)_l | y^(t-1)) / dW` for every level of a complete chain.
pub fn logprob_gradient(task: &TaskSpec, scores: &ScoreMatrix, chain: &Chain) -> Result<GradientField> {
    if !chain.is_complete_for(task) {
        return Err(Error::MalformedChain("chain does not match the task shape".into()));
    }
    let kind = task.kind();
    let mut grad = Field::zeros(task);
    for t in 1..=task.depth() {
        let prev = chain.level(t - 1);
        let out = forward_level(task, scores, prev, t)?;
        for (l, &y) in chain.level(t).iter().enumerate() {
            let p_token = if y == 1 { out.probs[l] } else { 1.0 - out.probs[l] };
            if p_token == 0.0 {
                return Err(Error::ZeroProbability { level: t, node: l });
            }
            let xi = out.xi[l];
            let c = f64::from(y) * kind.psi_prime(xi)? / p_token;
            for (p, &s) in scores.column(t, l).iter().enumerate() {
                grad.set(Entry { t, l, p }, c * (f64::from(prev[p]) - xi) * s);
            }
        }
    }
    Ok(grad)
}

/// Sign policy ascent: `W <- W + eta sign(grad)`, with zero-thresholded entries frozen.
pub fn sign_ascent(
    task: &TaskSpec,
    w0: &WeightMatrix,
    eta: f64,
    steps: usize,
    engine: &ExpectationEngine,
) -> Result<TrainTrace> {
    if eta.is_nan() || eta <= 0.0 {
        return Err(Error::InvalidArgument(format!("learning rate {eta} must be positive")));
    }
    w0.check_task(task)?;
    let opt = optimal_scores(task);
    let start = Instant::now();
    let mut trace = TrainTrace::default();
    let mut w = w0.clone();
    for step in 0..=steps {
        let scores = w.softmax();
        let engine = &engine.for_step(step);
        let objective = expected_reward(task, &scores, engine)?;
        let distance = softmax_distance(&scores, &opt)?;
        if step == steps {
            trace.steps.push(StepRecord {
                step,
                weights: w.clone(),
                gradient: None,
                signs: None,
                objective,
                distance,
                elapsed: start.elapsed(),
            });
            break;
        }
        let grad = policy_gradient(task, &scores, engine)?;
        let signs = sign_field(&grad, &scores, ZeroRule::policy(engine.mode))?;
        let next = w.zip_with(&signs, |v, s| v + eta * s)?;
        trace.steps.push(StepRecord {
            step,
            weights: w,
            gradient: Some(grad),
            signs: Some(signs),
            objective,
            distance,
            elapsed: start.elapsed(),
        });
        w = next;
    }
    Ok(trace)
}

/// Attention score after `s` sign-ascent steps on a parity task, for a child
/// (`relevant`) or non-child position of a level-`t` column.
pub fn parity_closed_form(task: &TaskSpec, eta: f64, s: usize, t: usize, relevant: bool) -> Result<f64> {
    if task.kind() != FunctionKind::Parity {
        return Err(Error::Precondition("the closed form holds for PARITY only".into()));
    }
    task.check_level(t)?;
    let n = task.width(t - 1) as f64;
    let growth = (2.0 * eta * s as f64).exp();
    Ok(if relevant { 0.5 / (1.0 + (n - 2.0) / 2.0 / growth) } else { 1.0 / (n - 2.0 + 2.0 * growth) })
}

/// Learning rate for which one sign update reaches distance `epsilon`.
pub fn one_update_eta(d: usize, epsilon: f64) -> Result<f64> {
    if d < 3 || !(epsilon > 0.0 && epsilon < 2.0) {
        return Err(Error::InvalidArgument(format!("need d >= 3 and 0 < epsilon < 2, got d = {d}, epsilon = {epsilon}")));
    }
    Ok(((d as f64 - 2.0) * (2.0 - epsilon) / (4.0 * epsilon)).ln())
}

/// Distance to the optimal scores after one sign update from uniform weights.
pub fn one_update_distance(d: usize, eta: f64) -> f64 {
    1.0 / (0.5 + (2.0 * eta).exp() / (d as f64 - 2.0))
}

/// Expected critical components of one column and their child/non-child gaps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationMargin {
    pub level: usize,
    pub node: usize,
    /// `E[gamma^p]` for every attended position `p`.
    pub gamma_means: Vec<f64>,
    /// `E[gamma^{i1}]`.
    pub child_value: f64,
    /// `(p', E[gamma^{i1}] - E[gamma^{p'}])` for each non-child `p'`.
    pub margins: Vec<(usize, f64)>,
    pub min_margin: f64,
}

impl SeparationMargin {
    pub(crate) fn from_means(task: &TaskSpec, t: usize, l: usize, gamma_means: Vec<f64>) -> Self {
        let (a, _) = task.children(t, l);
        let child_value = gamma_means[a];
        let margins: Vec<(usize, f64)> = (0..gamma_means.len())
            .filter(|&p| !task.is_child(t, l, p))
            .map(|p| (p, child_value - gamma_means[p]))
            .collect();
        let min_margin = margins.iter().map(|m| m.1).fold(f64::INFINITY, f64::min);
        SeparationMargin { level: t, node: l, gamma_means, child_value, margins, min_margin }
    }

    pub fn satisfied(&self) -> bool {
        self.min_margin > 0.0
    }
}

/// Separation of the critical components of column `(t, l)` under the policy.
pub fn rl_separation_margin(
    task: &TaskSpec,
    scores: &ScoreMatrix,
    engine: &ExpectationEngine,
    t: usize,
    l: usize,
) -> Result<SeparationMargin> {
    task.check_level(t)?;
    if l >= task.width(t) {
        return Err(Error::InvalidArgument(format!("node {l} out of range at level {t}")));
    }
    let n = task.width(t - 1);
    let mut means = vec![0.0; n];
    let mut failure = None;
    let mut accumulate = |prev: &[Token], w: f64| {
        for (j, m) in means.iter_mut().enumerate() {
            match gamma(task, scores, prev, t, l, j) {
                Ok(g) => *m += w * g,
                Err(e) => {
                    failure.get_or_insert(e);
                }
            }
        }
    };
    if engine.is_exact() {
        let marginals = level_marginals(task, scores, t - 1)?;
        for (mask, &mu) in marginals[t - 1].iter().enumerate() {
            if mu > 0.0 {
                accumulate(&tokens_from_mask(mask as u64, n), mu);
            }
        }
    } else {
        engine.visit_chains(task, scores, |chain, w| accumulate(chain.level(t - 1), w))?;
    }
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(SeparationMargin::from_means(task, t, l, means))
}

/// `v(x)`: gradient of `E[y^(T) | x]`, by enumerating every chain given `x`.
pub fn final_output_gradient(task: &TaskSpec, scores: &ScoreMatrix, x: &[Token]) -> Result<GradientField> {
    let needed = (1u128 << (task.k() - 1)) * (task.k() as u128 - 1);
    let cap = crate::oracle::DEFAULT_BUDGET_CAP;
    if needed > cap {
        return Err(Error::BudgetExceeded { needed, cap });
    }
    let mut v = Field::zeros(task);
    let mut failure = None;
    visit_chains_given_input(task, scores, x, |chain, p| match logprob_gradient(task, scores, chain) {
        Ok(g) => {
            let y = f64::from(chain.output());
            for (e, val) in g.entries() {
                v.add(e, p * y * val);
            }
        }
        Err(e) => {
            failure.get_or_insert(e);
        }
    })?;
    match failure {
        Some(e) => Err(e),
        None => Ok(v),
    }
}

/// Spread of the final-reward gradient across all subset-parity targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub d: usize,
    pub k: usize,
    pub family_size: usize,
    pub variance: f64,
    /// `E_x ||v(x)||^2`.
    pub m: f64,
    /// `2 M / |H|`.
    pub bound: f64,
    /// `M / |H|`, the tighter constant.
    pub tight_bound: f64,
    pub satisfied: bool,
}

/// Variance over the family of all `2^d` subset parities `h` of the final-reward
/// gradient `E_x[v(x) h(x)]`.
pub fn final_reward_variance(task: &TaskSpec, scores: &ScoreMatrix) -> Result<VarianceReport> {
    final_reward_variance_over(task, scores, (0..1u64 << task.d()).collect())
}

/// Same as [`final_reward_variance`] for an explicit family of subset masks.
pub fn final_reward_variance_over(task: &TaskSpec, scores: &ScoreMatrix, family: Vec<u64>) -> Result<VarianceReport> {
    let d = task.d();
    if d > VARIANCE_MAX_D {
        return Err(Error::InvalidArgument(format!("d = {d} exceeds the sweep limit of {VARIANCE_MAX_D}")));
    }
    if family.is_empty() || family.iter().any(|&m| m >> d != 0) {
        return Err(Error::InvalidArgument("family must be a non-empty set of subsets of [d]".into()));
    }
    let inputs = 1u64 << d;
    let vs: Vec<Vec<f64>> = (0..inputs)
        .map(|mask| Ok(final_output_gradient(task, scores, &tokens_from_mask(mask, d))?.entries().map(|(_, v)| v).collect()))
        .collect::<Result<_>>()?;
    let dim = vs[0].len();
    let px = 1.0 / inputs as f64;
    let m: f64 = vs.iter().map(|v| v.iter().map(|a| a * a).sum::<f64>()).sum::<f64>() * px;
    let grads: Vec<Vec<f64>> = family
        .iter()
        .map(|&h| {
            let mut g = vec![0.0; dim];
            for (x, v) in vs.iter().enumerate() {
                let sign = if (x as u64 & h).count_ones().is_multiple_of(2) { 1.0 } else { -1.0 };
                for (gi, vi) in g.iter_mut().zip(v) {
                    *gi += px * sign * vi;
                }
            }
            g
        })
        .collect();
    let nh = family.len() as f64;
    let mut mean = vec![0.0; dim];
    for g in &grads {
        for (mi, gi) in mean.iter_mut().zip(g) {
            *mi += gi / nh;
        }
    }
    let variance = grads
        .iter()
        .map(|g| g.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum::<f64>()
        / nh;
    let h_all = (1u64 << d) as f64;
    Ok(VarianceReport {
        d,
        k: task.k(),
        family_size: family.len(),
        variance,
        m,
        bound: 2.0 * m / h_all,
        tight_bound: m / h_all,
        satisfied: variance <= 2.0 * m / h_all,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention_model::{init_weights, optimal_weights};
    use crate::boolean_task::{build_task, build_task_with_subset, ground_truth_chain};
    use proptest::prelude::*;

    fn d4k4(kind: FunctionKind) -> TaskSpec {
        build_task_with_subset(kind, 4, 4, 0, vec![0, 1, 2, 3]).unwrap()
    }

    #[test]
    fn step_reward_examples() {
        let task = d4k4(FunctionKind::Parity);
        let x = [1, -1, 1, 1];
        let gt = ground_truth_chain(&task, &x).unwrap();
        assert_eq!(step_reward(&task, 1, &x, gt.level(1)).unwrap(), 2.0 / 3.0);
        let neg: Vec<Token> = gt.level(1).iter().map(|v| -v).collect();
        assert_eq!(step_reward(&task, 1, &x, &neg).unwrap(), -2.0 / 3.0);
        assert_eq!(step_reward(&task, 2, gt.level(1), gt.level(2)).unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn optimal_weights_earn_full_reward() {
        let task = d4k4(FunctionKind::Parity);
        let r = expected_reward(&task, &optimal_weights(&task).softmax(), &ExpectationEngine::exact()).unwrap();
        assert!((r.mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gamma_examples() {
        let task = d4k4(FunctionKind::Parity);
        let s = init_weights(&task).softmax();
        assert!((gamma(&task, &s, &[1, 1, 1, 1], 1, 0, 2).unwrap() - 4.0 / 3.0).abs() < 1e-15);
        let task = d4k4(FunctionKind::And);
        assert_eq!(gamma(&task, &s, &[-1, -1, -1, -1], 1, 1, 0).unwrap(), 0.0);
    }

    #[test]
    fn closed_form_examples() {
        let task = build_task(FunctionKind::Parity, 8, 8, 0).unwrap();
        // level 2 attends to 4 positions
        let rel = parity_closed_form(&task, 1.0, 1, 2, true).unwrap();
        let irr = parity_closed_form(&task, 1.0, 1, 2, false).unwrap();
        assert!((rel - 0.440399).abs() < 1e-6);
        assert!((irr - 0.059602).abs() < 1e-6);
        assert_eq!(parity_closed_form(&task, 2.0, 0, 1, true).unwrap(), 0.125);
        assert_eq!(parity_closed_form(&task, 2.0, 0, 1, false).unwrap(), 0.125);
        let and = build_task(FunctionKind::And, 8, 8, 0).unwrap();
        assert!(parity_closed_form(&and, 1.0, 1, 1, true).is_err());
    }

    #[test]
    fn one_update_eta_values() {
        assert!((one_update_eta(8, 0.05).unwrap() - 58.5f64.ln()).abs() < 1e-12);
        assert!(one_update_distance(20, one_update_eta(20, 0.05).unwrap()) <= 0.05);
    }

    #[test]
    fn exact_gradient_at_init_has_child_pattern() {
        let task = build_task(FunctionKind::Parity, 8, 8, 4).unwrap();
        let s = init_weights(&task).softmax();
        let g = policy_gradient(&task, &s, &ExpectationEngine::exact()).unwrap();
        let signs = sign_field(&g, &s, ZeroRule::policy(crate::oracle::EngineMode::Exact)).unwrap();
        for (e, v) in signs.entries() {
            let expected = if task.width(e.t - 1) == 2 {
                0.0
            } else if task.is_child(e.t, e.l, e.p) {
                1.0
            } else {
                -1.0
            };
            assert_eq!(v, expected, "{e:?}");
        }
    }

    #[test]
    fn logprob_gradient_rejects_impossible_tokens() {
        let task = d4k4(FunctionKind::And);
        let s = init_weights(&task).softmax();
        // all -1 input gives xi = -1 and P(+1) = 0 at level 1
        let chain = Chain { x: vec![-1; 4], levels: vec![vec![1, -1], vec![-1]] };
        assert!(matches!(logprob_gradient(&task, &s, &chain), Err(Error::ZeroProbability { level: 1, node: 0 })));
    }

    #[test]
    fn single_member_family_has_zero_variance() {
        let task = build_task(FunctionKind::Parity, 4, 4, 0).unwrap();
        let s = init_weights(&task).softmax();
        let rep = final_reward_variance_over(&task, &s, vec![0b0101]).unwrap();
        assert_eq!(rep.variance, 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn gradient_columns_sum_to_zero(ws in proptest::collection::vec(-3.0f64..3.0, 10), kind_ix in 0usize..3) {
            let task = d4k4(FunctionKind::ALL[kind_ix]);
            let mut w = init_weights(&task);
            let entries: Vec<Entry> = w.entries().map(|(e, _)| e).collect();
            for (e, v) in entries.into_iter().zip(ws) {
                w.set(e, v);
            }
            let s = w.softmax();
            let g = policy_gradient(&task, &s, &ExpectationEngine::exact()).unwrap();
            for t in 1..=task.depth() {
                for l in 0..task.width(t) {
                    let sum: f64 = g.mean.column(t, l).iter().sum();
                    prop_assert!(sum.abs() < 1e-10);
                }
            }
        }

        #[test]
        fn step_reward_is_bounded(mask in 0u64..16, cur in 0u64..4) {
            let task = d4k4(FunctionKind::Or);
            let r = step_reward(&task, 1, &tokens_from_mask(mask, 4), &tokens_from_mask(cur, 2)).unwrap();
            prop_assert!(r.abs() <= 2.0 / 3.0 + 1e-15);
        }
    }
}
