//! Sparse Boolean targets and their hierarchical decomposition into a binary tree of
//! two-input gates.
//!
//! Tokens are `i8` values in {-1, +1}. Internally every index is 0-based: level `t`
//! runs over `1..=T`, node `l` over `0..d_t` and attended position `p` over
//! `0..d_{t-1}`. Serialized artifacts switch to 1-based indices.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Token = i8;

/// Slack allowed when checking that an activation argument lies in [-1, 1].
const DOMAIN_SLACK: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum FunctionKind {
    Parity,
    And,
    Or,
}

impl FunctionKind {
    pub const ALL: [FunctionKind; 3] = [FunctionKind::Parity, FunctionKind::And, FunctionKind::Or];

    pub fn name(self) -> &'static str {
        match self {
            FunctionKind::Parity => "PARITY",
            FunctionKind::And => "AND",
            FunctionKind::Or => "OR",
        }
    }

    /// Two-input gate.
    pub fn phi2(self, z1: Token, z2: Token) -> Token {
        let (a, b) = (i32::from(z1), i32::from(z2));
        let v = match self {
            FunctionKind::Parity => a * b,
            FunctionKind::And => (a * b + a + b - 1) / 2,
            FunctionKind::Or => (-a * b + a + b + 1) / 2,
        };
        v as Token
    }

    /// Same gate evaluated on reals, used where inputs are expectations.
    pub fn phi2_real(self, z1: f64, z2: f64) -> f64 {
        match self {
            FunctionKind::Parity => z1 * z2,
            FunctionKind::And => (z1 * z2 + z1 + z2 - 1.0) / 2.0,
            FunctionKind::Or => (-z1 * z2 + z1 + z2 + 1.0) / 2.0,
        }
    }

    /// Probability of emitting +1 given the attention output `z`.
    pub fn psi(self, z: f64) -> Result<f64> {
        check_domain(z)?;
        Ok(self.psi_unchecked(z.clamp(-1.0, 1.0)))
    }

    /// Derivative of `psi`. The AND and OR indicators are strict, so both vanish at 0.
    pub fn psi_prime(self, z: f64) -> Result<f64> {
        check_domain(z)?;
        Ok(self.psi_prime_unchecked(z.clamp(-1.0, 1.0)))
    }

    pub(crate) fn psi_unchecked(self, z: f64) -> f64 {
        match self {
            FunctionKind::Parity => z * z,
            FunctionKind::And => z.max(0.0),
            FunctionKind::Or => z.min(0.0) + 1.0,
        }
    }

    pub(crate) fn psi_prime_unchecked(self, z: f64) -> f64 {
        match self {
            FunctionKind::Parity => 2.0 * z,
            FunctionKind::And => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            FunctionKind::Or => {
                if z < 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Value of the full target on the selected coordinates.
    pub fn reduce(self, values: impl IntoIterator<Item = Token>) -> Token {
        let mut it = values.into_iter();
        let first = it.next().expect("reduce needs at least one value");
        it.fold(first, |acc, v| self.phi2(acc, v))
    }
}

fn check_domain(z: f64) -> Result<()> {
    if z.is_nan() || z.abs() > 1.0 + DOMAIN_SLACK {
        return Err(Error::OutOfDomain(z));
    }
    Ok(())
}

impl fmt::Display for FunctionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FunctionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "PARITY" => Ok(FunctionKind::Parity),
            "AND" => Ok(FunctionKind::And),
            "OR" => Ok(FunctionKind::Or),
            other => Err(Error::InvalidArgument(format!("unknown function kind {other:?}"))),
        }
    }
}

/// A sampled task: the target kind, its relevant subset and the gate tree over it.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    kind: FunctionKind,
    d: usize,
    k: usize,
    seed: u64,
    relevant: Vec<usize>,
    widths: Vec<usize>,
    children: Vec<Vec<(usize, usize)>>,
}

impl TaskSpec {
    pub fn kind(&self) -> FunctionKind {
        self.kind
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of reasoning levels, `log2 k`.
    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }

    /// Sorted 0-based relevant coordinates.
    pub fn relevant(&self) -> &[usize] {
        &self.relevant
    }

    /// `[d, k/2, k/4, ..., 1]`.
    pub fn level_widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn width(&self, t: usize) -> usize {
        self.widths[t]
    }

    /// Children of node `l` at level `t`, as positions in level `t - 1`.
    pub fn children(&self, t: usize, l: usize) -> (usize, usize) {
        self.children[t - 1][l]
    }

    pub fn is_child(&self, t: usize, l: usize, p: usize) -> bool {
        let (a, b) = self.children(t, l);
        p == a || p == b
    }

    /// Cumulative widths `N_t = d_0 + ... + d_t`.
    pub fn offsets(&self) -> Vec<usize> {
        self.widths
            .iter()
            .scan(0, |acc, &w| {
                *acc += w;
                Some(*acc)
            })
            .collect()
    }

    /// Total sequence length `d + k - 1`.
    pub fn sequence_len(&self) -> usize {
        self.d + self.k - 1
    }

    /// Number of trainable (unmasked) attention entries.
    pub fn entry_count(&self) -> usize {
        (1..=self.depth()).map(|t| self.widths[t] * self.widths[t - 1]).sum()
    }

    pub fn check_level(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.depth() {
            return Err(Error::LevelOutOfRange { level: t, levels: self.depth() });
        }
        Ok(())
    }

    pub fn to_manifest(&self) -> TaskManifest {
        TaskManifest {
            kind: self.kind,
            d: self.d,
            k: self.k,
            seed: self.seed,
            b: self.relevant.iter().map(|&i| i + 1).collect(),
            children: self
                .children
                .iter()
                .map(|lv| lv.iter().map(|&(a, b)| [a + 1, b + 1]).collect())
                .collect(),
        }
    }
}

/// Serialized form of a task, with 1-based indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskManifest {
    pub kind: FunctionKind,
    pub d: usize,
    pub k: usize,
    pub seed: u64,
    #[serde(rename = "B")]
    pub b: Vec<usize>,
    pub children: Vec<Vec<[usize; 2]>>,
}

impl TaskManifest {
    /// Rebuilds the task and checks that the stored subset and tree agree with it.
    pub fn into_task(self) -> Result<TaskSpec> {
        let relevant: Vec<usize> = self
            .b
            .iter()
            .map(|&i| i.checked_sub(1).ok_or_else(|| Error::InvalidTask("B is 1-based".into())))
            .collect::<Result<_>>()?;
        let task = build_task_with_subset(self.kind, self.d, self.k, self.seed, relevant)?;
        if task.to_manifest() != self {
            return Err(Error::InvalidTask("stored children disagree with B".into()));
        }
        Ok(task)
    }
}

fn validate_shape(d: usize, k: usize) -> Result<usize> {
    if k < 2 || !k.is_power_of_two() {
        return Err(Error::InvalidTask(format!("k = {k} must be a power of two with k >= 2")));
    }
    if k > d {
        return Err(Error::InvalidTask(format!("k = {k} exceeds d = {d}")));
    }
    if d > 62 {
        return Err(Error::InvalidTask(format!("d = {d} is too large for bitmask inputs")));
    }
    Ok(k.trailing_zeros() as usize)
}

/// Samples the relevant subset from `seed` and builds the gate tree.
pub fn build_task(kind: FunctionKind, d: usize, k: usize, seed: u64) -> Result<TaskSpec> {
    validate_shape(d, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let relevant = index::sample(&mut rng, d, k).into_vec();
    build_task_with_subset(kind, d, k, seed, relevant)
}

/// Builds a task around an explicit relevant subset (0-based, any order).
pub fn build_task_with_subset(
    kind: FunctionKind,
    d: usize,
    k: usize,
    seed: u64,
    mut relevant: Vec<usize>,
) -> Result<TaskSpec> {
    let depth = validate_shape(d, k)?;
    relevant.sort_unstable();
    relevant.dedup();
    if relevant.len() != k || relevant.iter().any(|&i| i >= d) {
        return Err(Error::InvalidTask(format!("relevant subset must hold {k} distinct coordinates below {d}")));
    }
    let widths: Vec<usize> = std::iter::once(d).chain((1..=depth).map(|t| k >> t)).collect();
    let mut children = Vec::with_capacity(depth);
    children.push((0..k / 2).map(|j| (relevant[2 * j], relevant[2 * j + 1])).collect());
    for &w in &widths[2..] {
        children.push((0..w).map(|j| (2 * j, 2 * j + 1)).collect());
    }
    Ok(TaskSpec { kind, d, k, seed, relevant, widths, children })
}

/// Input plus the generated levels `y^(1) .. y^(T)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chain {
    pub x: Vec<Token>,
    pub levels: Vec<Vec<Token>>,
}

impl Chain {
    /// Tokens of level `t`, where level 0 is the input.
    pub fn level(&self, t: usize) -> &[Token] {
        if t == 0 {
            &self.x
        } else {
            &self.levels[t - 1]
        }
    }

    pub fn output(&self) -> Token {
        self.levels.last().and_then(|lv| lv.first()).copied().unwrap_or(0)
    }

    pub fn is_complete_for(&self, task: &TaskSpec) -> bool {
        self.x.len() == task.d()
            && self.levels.len() == task.depth()
            && self.levels.iter().enumerate().all(|(i, lv)| lv.len() == task.width(i + 1))
            && self.x.iter().chain(self.levels.iter().flatten()).all(|&v| v == 1 || v == -1)
    }
}

/// Decodes bit `i` of `mask` into token `i`: set bits are +1.
pub fn tokens_from_mask(mask: u64, n: usize) -> Vec<Token> {
    (0..n).map(|i| if mask >> i & 1 == 1 { 1 } else { -1 }).collect()
}

/// Intermediate values of the gate tree on input `x`.
pub fn ground_truth_chain(task: &TaskSpec, x: &[Token]) -> Result<Chain> {
    if x.len() != task.d() {
        return Err(Error::ShapeMismatch(format!("input has {} tokens, expected {}", x.len(), task.d())));
    }
    let mut levels: Vec<Vec<Token>> = Vec::with_capacity(task.depth());
    for t in 1..=task.depth() {
        let prev: &[Token] = if t == 1 { x } else { &levels[t - 2] };
        let level = (0..task.width(t))
            .map(|l| {
                let (a, b) = task.children(t, l);
                task.kind().phi2(prev[a], prev[b])
            })
            .collect();
        levels.push(level);
    }
    Ok(Chain { x: x.to_vec(), levels })
}

/// Target value computed directly from the relevant coordinates.
pub fn target(task: &TaskSpec, x: &[Token]) -> Result<Token> {
    if x.len() != task.d() {
        return Err(Error::ShapeMismatch(format!("input has {} tokens, expected {}", x.len(), task.d())));
    }
    let vals = task.relevant().iter().map(|&i| x[i]);
    Ok(match task.kind() {
        FunctionKind::Parity => vals.product(),
        FunctionKind::And => {
            if vals.clone().all(|v| v == 1) {
                1
            } else {
                -1
            }
        }
        FunctionKind::Or => {
            if vals.clone().any(|v| v == 1) {
                1
            } else {
                -1
            }
        }
    })
}
