//! One-layer attention with a fixed sparsity mask: the column for node `l` of level `t`
//! attends only to the tokens of level `t - 1`.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boolean_task::{Chain, Token, TaskSpec};
use crate::error::{Error, Result};

/// Optimal weights are built with this logit gap between children and the rest.
const OPTIMAL_LOGIT_GAP: f64 = 80.0;

/// Real values on the unmasked entries, indexed `[t - 1][l][p]`.
///
/// The same shape stores attention weights, softmax scores and gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    levels: Vec<Vec<Vec<f64>>>,
}

pub type WeightMatrix = Field;
pub type ScoreMatrix = Field;
pub type GradientField = Field;

/// Location of one unmasked entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Entry {
    pub t: usize,
    pub l: usize,
    pub p: usize,
}

impl Field {
    pub fn filled(task: &TaskSpec, value: f64) -> Self {
        let levels = (1..=task.depth())
            .map(|t| vec![vec![value; task.width(t - 1)]; task.width(t)])
            .collect();
        Field { levels }
    }

    pub fn zeros(task: &TaskSpec) -> Self {
        Self::filled(task, 0.0)
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn column(&self, t: usize, l: usize) -> &[f64] {
        &self.levels[t - 1][l]
    }

    pub fn column_mut(&mut self, t: usize, l: usize) -> &mut [f64] {
        &mut self.levels[t - 1][l]
    }

    pub fn level(&self, t: usize) -> &[Vec<f64>] {
        &self.levels[t - 1]
    }

    pub fn get(&self, e: Entry) -> f64 {
        self.levels[e.t - 1][e.l][e.p]
    }

    pub fn set(&mut self, e: Entry, v: f64) {
        self.levels[e.t - 1][e.l][e.p] = v;
    }

    pub fn add(&mut self, e: Entry, v: f64) {
        self.levels[e.t - 1][e.l][e.p] += v;
    }

    /// All entries in (level, node, position) order.
    pub fn entries(&self) -> impl Iterator<Item = (Entry, f64)> + '_ {
        self.levels.iter().enumerate().flat_map(|(ti, lv)| {
            lv.iter().enumerate().flat_map(move |(l, col)| {
                col.iter().enumerate().map(move |(p, &v)| (Entry { t: ti + 1, l, p }, v))
            })
        })
    }

    pub fn len(&self) -> usize {
        self.levels.iter().flatten().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field {
            levels: self
                .levels
                .iter()
                .map(|lv| lv.iter().map(|col| col.iter().map(|&v| f(v)).collect()).collect())
                .collect(),
        }
    }

    pub fn zip_with(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Result<Field> {
        self.check_same_shape(other)?;
        Ok(Field {
            levels: self
                .levels
                .iter()
                .zip(&other.levels)
                .map(|(la, lb)| {
                    la.iter()
                        .zip(lb)
                        .map(|(ca, cb)| ca.iter().zip(cb).map(|(&a, &b)| f(a, b)).collect())
                        .collect()
                })
                .collect(),
        })
    }

    pub fn check_same_shape(&self, other: &Field) -> Result<()> {
        let same = self.levels.len() == other.levels.len()
            && self.levels.iter().zip(&other.levels).all(|(a, b)| {
                a.len() == b.len() && a.iter().zip(b).all(|(ca, cb)| ca.len() == cb.len())
            });
        if same {
            Ok(())
        } else {
            Err(Error::ShapeMismatch("fields have different masks".into()))
        }
    }

    pub fn check_task(&self, task: &TaskSpec) -> Result<()> {
        self.check_same_shape(&Field::zeros(task))
    }

    pub fn max_abs(&self) -> f64 {
        self.entries().map(|(_, v)| v.abs()).fold(0.0, f64::max)
    }

    /// Column-wise softmax, shifted by the column maximum.
    pub fn softmax(&self) -> ScoreMatrix {
        Field {
            levels: self
                .levels
                .iter()
                .map(|lv| lv.iter().map(|col| softmax(col)).collect())
                .collect(),
        }
    }

    /// Writes one `level,node,position,value` row per entry (1-based) under a JSON
    /// header line naming the task.
    pub fn write_csv<W: Write>(&self, task: &TaskSpec, out: W) -> Result<()> {
        let mut out = out;
        let header = serde_json::json!({
            "d": task.d(),
            "k": task.k(),
            "kind": task.kind(),
            "seed": task.seed(),
        });
        writeln!(out, "# {header}")?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["level", "node", "position", "value"])?;
        for (e, v) in self.entries() {
            w.write_record([
                e.t.to_string(),
                (e.l + 1).to_string(),
                (e.p + 1).to_string(),
                format_real(v),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Shortest round-trip decimal form.
pub fn format_real(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else {
        format!("{v:?}")
    }
}

pub fn softmax(col: &[f64]) -> Vec<f64> {
    let m = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = col.iter().map(|&w| (w - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// All-ones weights, which give uniform attention in every column.
pub fn init_weights(task: &TaskSpec) -> WeightMatrix {
    Field::filled(task, 1.0)
}

/// Scores with half the mass on each child and none elsewhere.
pub fn optimal_scores(task: &TaskSpec) -> ScoreMatrix {
    let mut s = Field::zeros(task);
    for t in 1..=task.depth() {
        for l in 0..task.width(t) {
            let (a, b) = task.children(t, l);
            let col = s.column_mut(t, l);
            col[a] = 0.5;
            col[b] = 0.5;
        }
    }
    s
}

/// Finite weights whose softmax is within about `1e-34` of the optimal scores.
pub fn optimal_weights(task: &TaskSpec) -> WeightMatrix {
    optimal_scores(task).map(|v| if v > 0.0 { OPTIMAL_LOGIT_GAP / 2.0 } else { -OPTIMAL_LOGIT_GAP / 2.0 })
}

/// Largest column-wise L1 distance between two score matrices.
pub fn softmax_distance(a: &ScoreMatrix, b: &ScoreMatrix) -> Result<f64> {
    a.check_same_shape(b)?;
    let mut worst: f64 = 0.0;
    for (la, lb) in a.levels.iter().zip(&b.levels) {
        for (ca, cb) in la.iter().zip(lb) {
            let l1: f64 = ca.iter().zip(cb).map(|(x, y)| (x - y).abs()).sum();
            worst = worst.max(l1);
        }
    }
    Ok(worst)
}

/// Attention outputs and emission probabilities of one level.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelOutput {
    pub xi: Vec<f64>,
    pub probs: Vec<f64>,
}

/// `sum_p sigma_p y_p`, clamped to `[-1, 1]` against rounding in the sum.
pub fn attend(column: &[f64], prev: &[Token]) -> f64 {
    column.iter().zip(prev).map(|(&s, &y)| s * f64::from(y)).sum::<f64>().clamp(-1.0, 1.0)
}

/// Attention outputs `xi` and `P(y = +1)` for every node of level `t`.
pub fn forward_level(task: &TaskSpec, scores: &ScoreMatrix, prev: &[Token], t: usize) -> Result<LevelOutput> {
    task.check_level(t)?;
    if prev.len() != task.width(t - 1) {
        return Err(Error::ShapeMismatch(format!(
            "level {} has {} tokens, expected {}",
            t - 1,
            prev.len(),
            task.width(t - 1)
        )));
    }
    let kind = task.kind();
    let mut xi = Vec::with_capacity(task.width(t));
    let mut probs = Vec::with_capacity(task.width(t));
    for col in scores.level(t) {
        let z = attend(col, prev);
        probs.push(kind.psi(z)?);
        xi.push(z);
    }
    Ok(LevelOutput { xi, probs })
}

/// Samples every level with `P(+1) = psi(xi)`.
pub fn sample_chain<R: Rng + ?Sized>(task: &TaskSpec, scores: &ScoreMatrix, x: &[Token], rng: &mut R) -> Result<Chain> {
    if x.len() != task.d() {
        return Err(Error::ShapeMismatch(format!("input has {} tokens, expected {}", x.len(), task.d())));
    }
    let mut levels: Vec<Vec<Token>> = Vec::with_capacity(task.depth());
    for t in 1..=task.depth() {
        let prev = if t == 1 { x } else { &levels[t - 2] };
        let out = forward_level(task, scores, prev, t)?;
        let level = out.probs.iter().map(|&p| if rng.random::<f64>() < p { 1 } else { -1 }).collect();
        levels.push(level);
    }
    Ok(Chain { x: x.to_vec(), levels })
}

pub fn generate_stochastic(task: &TaskSpec, scores: &ScoreMatrix, x: &[Token], seed: u64) -> Result<Chain> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_chain(task, scores, x, &mut rng)
}

/// A deterministic rollout together with the per-token attention outputs and scores.
#[derive(Clone, Debug, PartialEq)]
pub struct DeterministicRollout {
    pub chain: Chain,
    pub xi: Vec<Vec<f64>>,
    /// `2 psi(xi) - 1`, the real-valued prediction of each token.
    pub q: Vec<Vec<f64>>,
}

pub fn rollout_deterministic(task: &TaskSpec, scores: &ScoreMatrix, x: &[Token]) -> Result<DeterministicRollout> {
    if x.len() != task.d() {
        return Err(Error::ShapeMismatch(format!("input has {} tokens, expected {}", x.len(), task.d())));
    }
    let mut levels: Vec<Vec<Token>> = Vec::with_capacity(task.depth());
    let mut xis = Vec::with_capacity(task.depth());
    let mut qs = Vec::with_capacity(task.depth());
    for t in 1..=task.depth() {
        let prev = if t == 1 { x } else { &levels[t - 2] };
        let out = forward_level(task, scores, prev, t)?;
        let q: Vec<f64> = out.probs.iter().map(|&p| 2.0 * p - 1.0).collect();
        levels.push(q.iter().map(|&v| if v >= 0.0 { 1 } else { -1 }).collect());
        xis.push(out.xi);
        qs.push(q);
    }
    Ok(DeterministicRollout { chain: Chain { x: x.to_vec(), levels }, xi: xis, q: qs })
}

pub fn generate_deterministic(task: &TaskSpec, scores: &ScoreMatrix, x: &[Token]) -> Result<Chain> {
    Ok(rollout_deterministic(task, scores, x)?.chain)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boolean_task::{build_task, build_task_with_subset, ground_truth_chain, tokens_from_mask, FunctionKind};
    use proptest::prelude::*;

    #[test]
    fn uniform_init_and_column_sums() {
        let task = build_task(FunctionKind::Parity, 20, 16, 3).unwrap();
        let s = init_weights(&task).softmax();
        assert_eq!(s.len(), task.entry_count());
        assert_eq!(s.column(1, 0)[5], 1.0 / 20.0);
        assert_eq!(s.column(4, 0), &[0.5, 0.5]);
    }

    #[test]
    fn optimal_scores_parity_forward() {
        let task = build_task_with_subset(FunctionKind::Parity, 4, 4, 0, vec![0, 1, 2, 3]).unwrap();
        let s = optimal_scores(&task);
        let out = forward_level(&task, &s, &[1, 1], 2).unwrap();
        assert_eq!(out.xi, vec![1.0]);
        assert_eq!(out.probs, vec![1.0]);
    }

    #[test]
    fn distance_of_uniform_to_optimal_at_d8() {
        let task = build_task(FunctionKind::And, 8, 8, 1).unwrap();
        let u = init_weights(&task).softmax();
        let dist = softmax_distance(&u, &optimal_scores(&task)).unwrap();
        // level-1 column: 2 * (1/2 - 1/8) + 6 * 1/8
        assert!((dist - 1.5).abs() < 1e-15);
        assert!(softmax_distance(&optimal_weights(&task).softmax(), &optimal_scores(&task)).unwrap() < 1e-30);
    }

    #[test]
    fn deterministic_with_optimal_scores_is_ground_truth() {
        for kind in FunctionKind::ALL {
            let task = build_task(kind, 8, 8, 9).unwrap();
            let s = optimal_scores(&task);
            for mask in 0..256u64 {
                let x = tokens_from_mask(mask, 8);
                assert_eq!(generate_deterministic(&task, &s, &x).unwrap(), ground_truth_chain(&task, &x).unwrap());
            }
        }
    }

    #[test]
    fn stochastic_generation_is_seeded() {
        let task = build_task(FunctionKind::Parity, 10, 8, 2).unwrap();
        let s = init_weights(&task).softmax();
        let x = tokens_from_mask(0b1011001110, 10);
        assert_eq!(generate_stochastic(&task, &s, &x, 5).unwrap(), generate_stochastic(&task, &s, &x, 5).unwrap());
    }

    #[test]
    fn csv_has_header_and_one_row_per_entry() {
        let task = build_task(FunctionKind::Or, 4, 4, 0).unwrap();
        let mut buf = Vec::new();
        init_weights(&task).write_csv(&task, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("# {"));
        assert_eq!(lines[1], "level,node,position,value");
        assert_eq!(lines.len(), 2 + task.entry_count());
        assert_eq!(lines[2], "1,1,1,1.0");
    }

    proptest! {
        #[test]
        fn softmax_columns_sum_to_one(ws in proptest::collection::vec(-30.0f64..30.0, 2..40)) {
            let s = softmax(&ws);
            let total: f64 = s.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(s.iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn attention_output_stays_in_unit_interval(
            ws in proptest::collection::vec(-20.0f64..20.0, 8),
            mask in 0u64..256,
        ) {
            let s = softmax(&ws);
            let y = tokens_from_mask(mask, 8);
            let z = attend(&s, &y);
            prop_assert!(z.abs() <= 1.0 + 1e-12);
        }
    }
}
