//! Expectation engines and independent reference computations.
//!
//! The exact engine enumerates every input and every chain. The Monte Carlo engine
//! draws one on-policy chain per sampled input from a seeded ChaCha stream and reduces
//! in sample order, so results are bit-reproducible for a fixed seed and sample count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention_model::{attend, forward_level, sample_chain, Entry, Field, ScoreMatrix, WeightMatrix};
use crate::boolean_task::{ground_truth_chain, tokens_from_mask, Chain, FunctionKind, TaskSpec, Token};
use crate::error::{Error, Result};

pub const DEFAULT_BUDGET_CAP: u128 = 1 << 26;

/// Relative zero tolerance for exact gradients, see [`ZeroRule::RelativeToScore`].
pub const EXACT_ZERO_TOLERANCE: f64 = 1e-12;

/// Width of the standard-error band for supervised Monte Carlo gradients.
pub const MC_ZERO_SIGMAS: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineMode {
    Exact,
    MonteCarlo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpectationEngine {
    pub mode: EngineMode,
    pub samples: usize,
    pub seed: u64,
    pub budget_cap: u128,
}

/// A scalar expectation with its Monte Carlo standard error (zero when exact).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldEstimate {
    pub mean: Field,
    pub std_error: Field,
}

impl ExpectationEngine {
    pub fn exact() -> Self {
        ExpectationEngine { mode: EngineMode::Exact, samples: 0, seed: 0, budget_cap: DEFAULT_BUDGET_CAP }
    }

    pub fn monte_carlo(samples: usize, seed: u64) -> Self {
        ExpectationEngine { mode: EngineMode::MonteCarlo, samples, seed, budget_cap: DEFAULT_BUDGET_CAP }
    }

    pub fn with_budget_cap(mut self, cap: u128) -> Self {
        self.budget_cap = cap;
        self
    }

    /// Same engine with an independent Monte Carlo stream for update `step`.
    pub fn for_step(&self, step: usize) -> Self {
        let mut e = self.clone();
        e.seed = self.seed.wrapping_add((step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        e
    }

    pub fn is_exact(&self) -> bool {
        self.mode == EngineMode::Exact
    }

    /// Evaluations needed to enumerate every chain: `2^d * 2^(k-1) * (k-1)`.
    pub fn chain_cost(task: &TaskSpec) -> u128 {
        (1u128 << task.d()) * (1u128 << (task.k() - 1)) * (task.k() as u128 - 1)
    }

    pub fn check_budget(&self, task: &TaskSpec) -> Result<()> {
        let needed = Self::chain_cost(task);
        if self.is_exact() && needed > self.budget_cap {
            return Err(Error::BudgetExceeded { needed, cap: self.budget_cap });
        }
        Ok(())
    }

    fn check_samples(&self) -> Result<()> {
        if !self.is_exact() && self.samples < 2 {
            return Err(Error::InvalidArgument("Monte Carlo needs at least two samples".into()));
        }
        Ok(())
    }

    /// Calls `f(chain, weight)` on every chain with positive probability (exact) or on
    /// each sampled chain with weight `1/n`. Returns the number of Monte Carlo samples,
    /// or zero for the exact engine.
    pub fn visit_chains(
        &self,
        task: &TaskSpec,
        scores: &ScoreMatrix,
        mut f: impl FnMut(&Chain, f64),
    ) -> Result<usize> {
        scores.check_task(task)?;
        match self.mode {
            EngineMode::Exact => {
                self.check_budget(task)?;
                let px = 0.5f64.powi(task.d() as i32);
                for mask in 0..1u64 << task.d() {
                    let x = tokens_from_mask(mask, task.d());
                    let mut chain = Chain { x, levels: Vec::with_capacity(task.depth()) };
                    enumerate_levels(task, scores, &mut chain, px, &mut f)?;
                }
                Ok(0)
            }
            EngineMode::MonteCarlo => {
                self.check_samples()?;
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                let w = 1.0 / self.samples as f64;
                for _ in 0..self.samples {
                    let x = sample_input(task.d(), &mut rng);
                    let chain = sample_chain(task, scores, &x, &mut rng)?;
                    f(&chain, w);
                }
                Ok(self.samples)
            }
        }
    }

    /// Calls `f(x, weight)` on every input (exact) or on `n` sampled inputs.
    pub fn visit_inputs(&self, task: &TaskSpec, mut f: impl FnMut(&[Token], f64) -> Result<()>) -> Result<usize> {
        match self.mode {
            EngineMode::Exact => {
                let needed = (1u128 << task.d()) * (task.k() as u128 - 1);
                if needed > self.budget_cap {
                    return Err(Error::BudgetExceeded { needed, cap: self.budget_cap });
                }
                let w = 0.5f64.powi(task.d() as i32);
                for mask in 0..1u64 << task.d() {
                    f(&tokens_from_mask(mask, task.d()), w)?;
                }
                Ok(0)
            }
            EngineMode::MonteCarlo => {
                self.check_samples()?;
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                let w = 1.0 / self.samples as f64;
                for _ in 0..self.samples {
                    f(&sample_input(task.d(), &mut rng), w)?;
                }
                Ok(self.samples)
            }
        }
    }

    /// `E[f(chain)]` under the policy.
    pub fn expectation(&self, task: &TaskSpec, scores: &ScoreMatrix, mut f: impl FnMut(&Chain) -> f64) -> Result<Estimate> {
        let mut acc = Moments::default();
        let n = self.visit_chains(task, scores, |chain, w| acc.push(w, f(chain)))?;
        Ok(acc.finish(n))
    }
}

fn sample_input<R: Rng>(d: usize, rng: &mut R) -> Vec<Token> {
    (0..d).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect()
}

fn enumerate_levels(
    task: &TaskSpec,
    scores: &ScoreMatrix,
    chain: &mut Chain,
    weight: f64,
    f: &mut impl FnMut(&Chain, f64),
) -> Result<()> {
    let t = chain.levels.len() + 1;
    if t > task.depth() {
        f(chain, weight);
        return Ok(());
    }
    let out = forward_level(task, scores, chain.level(t - 1), t)?;
    let width = task.width(t);
    for mask in 0..1u64 << width {
        let tokens = tokens_from_mask(mask, width);
        let p = assignment_probability(&out.probs, &tokens);
        if p == 0.0 {
            continue;
        }
        chain.levels.push(tokens);
        enumerate_levels(task, scores, chain, weight * p, f)?;
        chain.levels.pop();
    }
    Ok(())
}

/// Probability of `tokens` when token `i` is +1 with probability `probs[i]`.
pub fn assignment_probability(probs: &[f64], tokens: &[Token]) -> f64 {
    probs.iter().zip(tokens).map(|(&p, &y)| if y == 1 { p } else { 1.0 - p }).product()
}

/// Weighted first and second moments. Weights sum to one.
#[derive(Clone, Debug, Default)]
pub struct Moments {
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    pub fn push(&mut self, w: f64, v: f64) {
        self.sum += w * v;
        self.sum_sq += w * v * v;
    }

    /// `n` is the Monte Carlo sample count, zero for exact sums.
    pub fn finish(&self, n: usize) -> Estimate {
        let std_error = if n > 1 {
            ((self.sum_sq - self.sum * self.sum).max(0.0) / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Estimate { mean: self.sum, std_error }
    }
}

/// Entry-wise [`Moments`] over a field.
#[derive(Clone, Debug)]
pub struct FieldMoments {
    sum: Field,
    sum_sq: Field,
}

impl FieldMoments {
    pub fn new(task: &TaskSpec) -> Self {
        FieldMoments { sum: Field::zeros(task), sum_sq: Field::zeros(task) }
    }

    /// Adds one sample whose nonzero entries are listed in `sample`.
    pub fn push(&mut self, w: f64, sample: &Field) {
        for (e, v) in sample.entries() {
            if v != 0.0 {
                self.sum.add(e, w * v);
                self.sum_sq.add(e, w * v * v);
            }
        }
    }

    pub fn finish(self, n: usize) -> FieldEstimate {
        let std_error = if n > 1 {
            let denom = (n - 1) as f64;
            self.sum
                .zip_with(&self.sum_sq, |m, s| ((s - m * m).max(0.0) / denom).sqrt())
                .expect("moment fields share a shape")
        } else {
            self.sum.map(|_| 0.0)
        };
        FieldEstimate { mean: self.sum, std_error }
    }
}

/// When a gradient entry counts as zero before taking its sign.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroRule {
    /// Only an estimate of exactly 0.0 is zero.
    ExactZero,
    /// `|g| <= tol * sigma`, where `sigma` is the entry's attention score. Every
    /// gradient entry carries that score as a factor, so this stays meaningful when
    /// scores become tiny late in training.
    RelativeToScore(f64),
    /// `|g| <= n * standard_error`.
    StdErrors(f64),
}

impl ZeroRule {
    /// Policy ascent: relative tolerance for exact sums, plain sign for Monte Carlo.
    pub fn policy(mode: EngineMode) -> Self {
        match mode {
            EngineMode::Exact => ZeroRule::RelativeToScore(EXACT_ZERO_TOLERANCE),
            EngineMode::MonteCarlo => ZeroRule::ExactZero,
        }
    }

    /// Supervised descent: relative tolerance for exact sums, standard-error band for
    /// Monte Carlo.
    pub fn supervised(mode: EngineMode) -> Self {
        match mode {
            EngineMode::Exact => ZeroRule::RelativeToScore(EXACT_ZERO_TOLERANCE),
            EngineMode::MonteCarlo => ZeroRule::StdErrors(MC_ZERO_SIGMAS),
        }
    }
}

/// Sign of every gradient entry, with entries that `rule` deems zero mapped to 0.
pub fn sign_field(est: &FieldEstimate, scores: &ScoreMatrix, rule: ZeroRule) -> Result<Field> {
    est.mean.check_same_shape(scores)?;
    let mut out = est.mean.clone();
    for (e, g) in est.mean.entries() {
        let zero = match rule {
            ZeroRule::ExactZero => g == 0.0,
            ZeroRule::RelativeToScore(tol) => g.abs() <= tol * scores.get(e),
            ZeroRule::StdErrors(n) => g.abs() <= n * est.std_error.get(e),
        };
        out.set(e, if zero { 0.0 } else { g.signum() });
    }
    Ok(out)
}

/// Central finite difference of `objective` along one weight entry.
pub fn finite_difference(
    objective: impl Fn(&WeightMatrix) -> Result<f64>,
    w: &WeightMatrix,
    entry: Entry,
    h: f64,
) -> Result<f64> {
    if h.is_nan() || h <= 0.0 {
        return Err(Error::InvalidArgument(format!("step h = {h} must be positive")));
    }
    let mut plus = w.clone();
    plus.add(entry, h);
    let mut minus = w.clone();
    minus.add(entry, -h);
    Ok((objective(&plus)? - objective(&minus)?) / (2.0 * h))
}

/// Exact marginal distribution of the tokens of level `t` (level 0 is the input),
/// indexed by bitmask with set bits meaning +1.
pub fn level_marginal(task: &TaskSpec, scores: &ScoreMatrix, t: usize) -> Result<Vec<f64>> {
    Ok(level_marginals(task, scores, t)?.pop().expect("at least level 0"))
}

/// Marginals of levels `0..=upto`, propagated one level at a time.
pub fn level_marginals(task: &TaskSpec, scores: &ScoreMatrix, upto: usize) -> Result<Vec<Vec<f64>>> {
    ExpectationEngine::exact().check_budget(task)?;
    scores.check_task(task)?;
    if upto > task.depth() {
        return Err(Error::LevelOutOfRange { level: upto, levels: task.depth() });
    }
    let mut out = vec![vec![0.5f64.powi(task.d() as i32); 1 << task.d()]];
    for level in 1..=upto {
        let (wp, wn) = (task.width(level - 1), task.width(level));
        let dist = &out[level - 1];
        let mut next = vec![0.0; 1 << wn];
        for (mask, &mu) in dist.iter().enumerate() {
            if mu == 0.0 {
                continue;
            }
            let prev = tokens_from_mask(mask as u64, wp);
            let out = forward_level(task, scores, &prev, level)?;
            for (m2, slot) in next.iter_mut().enumerate() {
                *slot += mu * assignment_probability(&out.probs, &tokens_from_mask(m2 as u64, wn));
            }
        }
        out.push(next);
    }
    Ok(out)
}

/// Calls `f(chain, p(chain | x))` for every chain with positive probability given `x`.
pub fn visit_chains_given_input(
    task: &TaskSpec,
    scores: &ScoreMatrix,
    x: &[Token],
    mut f: impl FnMut(&Chain, f64),
) -> Result<()> {
    if x.len() != task.d() {
        return Err(Error::ShapeMismatch(format!("input has {} tokens, expected {}", x.len(), task.d())));
    }
    let mut chain = Chain { x: x.to_vec(), levels: Vec::with_capacity(task.depth()) };
    enumerate_levels(task, scores, &mut chain, 1.0, &mut f)
}

/// Which distribution the level-`t - 1` tokens follow in [`abcd`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenLaw {
    /// Tokens generated by the current policy.
    OnPolicy,
    /// Ground-truth intermediate values of a uniform input.
    GroundTruth,
}

/// Probability masses of the tokens outside `A = {i1, i2, p'}`, weighted by the
/// probability of each sign pattern of `A`.
///
/// The thresholds are strict, matching the strict indicator in the derivative of the
/// AND and OR activations: `a` counts `S > -3`, `b` counts `S > -1`, `c` counts
/// `S > 1`, `d` counts `S > 3` for AND, and the mirrored `S < ...` sets for OR.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbcdStats {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl AbcdStats {
    /// The four expectation terms (i)-(iv) of the margin expansion.
    pub fn terms(&self) -> [f64; 4] {
        let AbcdStats { a, b, c, d } = *self;
        [a + 3.0 * b + 3.0 * c + d, a + b - c - d, a - b - c + d, a - 3.0 * b + 3.0 * c - d]
    }

    /// Separation margin predicted from the masses: `8b/(k-1)` for AND, `8c/(k-1)` for OR.
    pub fn predicted_margin(&self, kind: FunctionKind, k: usize) -> f64 {
        let [i, ii, iii, iv] = self.terms();
        let combo = match kind {
            FunctionKind::Or => i - ii - iii + iv,
            _ => i + ii - iii - iv,
        };
        combo / (k as f64 - 1.0)
    }
}

pub fn abcd(task: &TaskSpec, scores: &ScoreMatrix, t: usize, l: usize, p_prime: usize, law: TokenLaw) -> Result<AbcdStats> {
    task.check_level(t)?;
    if task.kind() == FunctionKind::Parity {
        return Err(Error::Precondition("abcd masses are defined for AND and OR only".into()));
    }
    if l >= task.width(t) || p_prime >= task.width(t - 1) || task.is_child(t, l, p_prime) {
        return Err(Error::InvalidArgument(format!("p' = {p_prime} must be a non-child position of node {l}")));
    }
    if !is_uniform_level(scores, t) {
        return Err(Error::Precondition(format!("scores at level {t} are not uniform")));
    }
    let n = task.width(t - 1);
    let mixture: Vec<(f64, f64)> = match law {
        TokenLaw::OnPolicy if t == 1 => vec![(1.0, 0.5)],
        TokenLaw::OnPolicy => {
            if !is_uniform_level(scores, t - 1) {
                return Err(Error::Precondition(format!("scores at level {} are not uniform", t - 1)));
            }
            let dist = level_marginal(task, scores, t - 2)?;
            let col = scores.column(t - 1, 0);
            let kind = task.kind();
            dist.iter()
                .enumerate()
                .filter(|(_, &mu)| mu > 0.0)
                .map(|(mask, &mu)| {
                    let prev = tokens_from_mask(mask as u64, task.width(t - 2));
                    Ok((mu, kind.psi(attend(col, &prev))?))
                })
                .collect::<Result<_>>()?
        }
        TokenLaw::GroundTruth => vec![(1.0, ground_truth_plus_probability(task, t - 1)?)],
    };
    let others = n - 3;
    let less = task.kind() == FunctionKind::Or;
    let thresholds = [-3i64, -1, 1, 3];
    let mut stats = [0.0f64; 4];
    for (mu, p_plus) in mixture {
        let p_minus = 1.0 - p_plus;
        let a_weights = [p_plus.powi(3), p_plus * p_plus * p_minus, p_plus * p_minus * p_minus, p_minus.powi(3)];
        let mut mass = [0.0f64; 4];
        for mask in 0..1u64 << others {
            let plus = mask.count_ones() as i64;
            let s = 2 * plus - others as i64;
            let p = p_plus.powi(plus as i32) * p_minus.powi((others as i64 - plus) as i32);
            for (m, &th) in mass.iter_mut().zip(&thresholds) {
                if (less && s < th) || (!less && s > th) {
                    *m += p;
                }
            }
        }
        for i in 0..4 {
            stats[i] += mu * a_weights[i] * mass[i];
        }
    }
    Ok(AbcdStats { a: stats[0], b: stats[1], c: stats[2], d: stats[3] })
}

fn is_uniform_level(scores: &ScoreMatrix, t: usize) -> bool {
    scores.level(t).iter().all(|col| {
        let u = 1.0 / col.len() as f64;
        col.iter().all(|&s| (s - u).abs() <= 1e-15)
    })
}

/// `P(tilde y^(t)_1 = +1)` for a uniform input, by enumeration.
fn ground_truth_plus_probability(task: &TaskSpec, t: usize) -> Result<f64> {
    if t == 0 {
        return Ok(0.5);
    }
    let mut plus = 0u64;
    for mask in 0..1u64 << task.d() {
        if ground_truth_chain(task, &tokens_from_mask(mask, task.d()))?.level(t)[0] == 1 {
            plus += 1;
        }
    }
    Ok(plus as f64 / (1u64 << task.d()) as f64)
}

/// Mean-token statistics of one parity level and the two candidate recursions for them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelMeanStats {
    pub level: usize,
    /// `sum_q sigma_q^2` of any column of this level.
    pub c1: f64,
    /// Exact `E[y^(t)_l]`, one value per node.
    pub brute: Vec<f64>,
    /// Largest spread of `brute` across nodes.
    pub spread: f64,
    /// Recursion with `c1` entering linearly, started from the exact previous mean.
    pub linear: f64,
    /// Recursion with `c1` squared, started from the exact previous mean.
    pub squared: f64,
    pub linear_matches: bool,
    pub squared_matches: bool,
}

const LEVEL_MATCH_TOLERANCE: f64 = 1e-12;

pub fn level_mean_stats(task: &TaskSpec, scores: &ScoreMatrix, t: usize) -> Result<LevelMeanStats> {
    task.check_level(t)?;
    if task.kind() != FunctionKind::Parity {
        return Err(Error::Precondition("level mean statistics are defined for PARITY".into()));
    }
    let level = scores.level(t);
    let c1 = column_square_sum(&level[0]);
    for col in level {
        let mut a = col.clone();
        let mut b = level[0].clone();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        if a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-12) {
            return Err(Error::Precondition(format!("columns of level {t} do not share their scores")));
        }
    }
    let brute = node_means(task, scores, t)?;
    let prev_mean = if t == 1 {
        0.0
    } else {
        let prev = node_means(task, scores, t - 1)?;
        prev.iter().sum::<f64>() / prev.len() as f64
    };
    let m2 = prev_mean * prev_mean;
    let linear = 2.0 * m2 + 2.0 * (1.0 - m2) * c1 - 1.0;
    let squared = 2.0 * m2 + 2.0 * (1.0 - m2) * c1 * c1 - 1.0;
    let lo = brute.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = brute.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let close = |v: f64| brute.iter().all(|&b| (b - v).abs() <= LEVEL_MATCH_TOLERANCE);
    Ok(LevelMeanStats {
        level: t,
        c1,
        spread: hi - lo,
        linear_matches: close(linear),
        squared_matches: close(squared),
        linear,
        squared,
        brute,
    })
}

fn column_square_sum(col: &[f64]) -> f64 {
    col.iter().map(|s| s * s).sum()
}

/// Exact `E[y^(t)_l]` for every node of level `t`.
pub fn node_means(task: &TaskSpec, scores: &ScoreMatrix, t: usize) -> Result<Vec<f64>> {
    let dist = level_marginal(task, scores, t)?;
    let w = task.width(t);
    let mut means = vec![0.0; w];
    for (mask, &mu) in dist.iter().enumerate() {
        for (l, m) in means.iter_mut().enumerate() {
            *m += mu * if mask >> l & 1 == 1 { 1.0 } else { -1.0 };
        }
    }
    Ok(means)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention_model::init_weights;
    use crate::boolean_task::{build_task, build_task_with_subset};

    #[test]
    fn exact_weights_sum_to_one() {
        let task = build_task(FunctionKind::Parity, 6, 4, 1).unwrap();
        let s = init_weights(&task).softmax();
        let total = ExpectationEngine::exact().expectation(&task, &s, |_| 1.0).unwrap();
        assert!((total.mean - 1.0).abs() < 1e-12);
        assert_eq!(total.std_error, 0.0);
    }

    #[test]
    fn budget_cap_refuses_large_tasks() {
        let task = build_task(FunctionKind::Parity, 20, 16, 0).unwrap();
        let s = init_weights(&task).softmax();
        let err = ExpectationEngine::exact().visit_chains(&task, &s, |_, _| {}).unwrap_err();
        assert!(matches!(err, Error::BudgetExceeded { .. }));
    }

    #[test]
    fn monte_carlo_is_reproducible() {
        let task = build_task(FunctionKind::And, 8, 4, 3).unwrap();
        let s = init_weights(&task).softmax();
        let eng = ExpectationEngine::monte_carlo(500, 9);
        let a = eng.expectation(&task, &s, |c| f64::from(c.output())).unwrap();
        let b = eng.expectation(&task, &s, |c| f64::from(c.output())).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn level_marginal_matches_chain_enumeration() {
        let task = build_task(FunctionKind::Parity, 6, 4, 2).unwrap();
        let mut w = init_weights(&task);
        w.set(Entry { t: 1, l: 0, p: 2 }, 1.7);
        w.set(Entry { t: 2, l: 0, p: 1 }, -0.4);
        let s = w.softmax();
        let marg = level_marginal(&task, &s, 1).unwrap();
        for (mask, &mu) in marg.iter().enumerate() {
            let tokens = tokens_from_mask(mask as u64, 2);
            let e = ExpectationEngine::exact()
                .expectation(&task, &s, |c| if c.level(1) == tokens.as_slice() { 1.0 } else { 0.0 })
                .unwrap();
            assert!((e.mean - mu).abs() < 1e-14);
        }
    }

    #[test]
    fn first_level_mean_at_init() {
        let task = build_task(FunctionKind::Parity, 8, 4, 0).unwrap();
        let s = init_weights(&task).softmax();
        let st = level_mean_stats(&task, &s, 1).unwrap();
        assert!((st.c1 - 0.125).abs() < 1e-15);
        assert!(st.brute.iter().all(|&b| (b + 0.75).abs() < 1e-12));
        assert!(st.linear_matches);
    }

    #[test]
    fn abcd_term_one_is_probability_of_positive_output() {
        let task = build_task_with_subset(FunctionKind::And, 8, 4, 0, vec![0, 1, 2, 3]).unwrap();
        let s = init_weights(&task).softmax();
        let st = abcd(&task, &s, 1, 0, 5, TokenLaw::OnPolicy).unwrap();
        // I(xi > 0) with uniform attention on 8 fair signs: P(more +1 than -1).
        let mut direct = 0.0;
        for mask in 0..256u64 {
            if mask.count_ones() > 4 {
                direct += 1.0 / 256.0;
            }
        }
        assert!((st.terms()[0] - direct).abs() < 1e-12);
    }

    #[test]
    fn abcd_rejects_parity_and_children() {
        let task = build_task_with_subset(FunctionKind::And, 8, 4, 0, vec![0, 1, 2, 3]).unwrap();
        let s = init_weights(&task).softmax();
        assert!(abcd(&task, &s, 1, 0, 1, TokenLaw::OnPolicy).is_err());
        let parity = build_task(FunctionKind::Parity, 8, 4, 0).unwrap();
        assert!(abcd(&parity, &s, 1, 0, 5, TokenLaw::OnPolicy).is_err());
    }

    #[test]
    fn finite_difference_of_quadratic() {
        let task = build_task(FunctionKind::Parity, 4, 2, 0).unwrap();
        let w = init_weights(&task);
        let e = Entry { t: 1, l: 0, p: 3 };
        let g = finite_difference(|w| Ok(w.get(e).powi(2)), &w, e, 1e-4).unwrap();
        assert!((g - 2.0).abs() < 1e-9);
    }
}
