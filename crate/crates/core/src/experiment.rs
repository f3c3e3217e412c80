//! Run configuration, artifact emission and manifests.
//!
//! Every CSV and JSON artifact is a pure function of the [`RunConfig`]; timing goes to
//! a separate plain-text file so reruns are byte-identical.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention_model::{format_real, init_weights, optimal_scores, Field};
use crate::boolean_task::{build_task, FunctionKind, TaskSpec};
use crate::error::{Error, Result};
use crate::oracle::{EngineMode, ExpectationEngine};
use crate::rl_finetune::{one_update_eta, sign_ascent};
use crate::sft_finetune::{sign_descent, StepwiseReport};
use crate::trace::{StepSummary, TrainTrace};

pub const FAILED_MARKER: &str = ".failed";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMING_FILE: &str = "timing.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trainer {
    Rl,
    Sft,
}

/// Flat run description. Missing fields take the large-scale parity defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub kind: FunctionKind,
    pub d: usize,
    pub k: usize,
    pub task_seed: u64,
    pub trainer: Trainer,
    /// Learning rate; derived from `epsilon` when absent.
    pub eta: Option<f64>,
    pub epsilon: f64,
    pub steps: usize,
    pub engine: EngineMode,
    pub sample_count: usize,
    pub mc_seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            kind: FunctionKind::Parity,
            d: 20,
            k: 16,
            task_seed: 0,
            trainer: Trainer::Rl,
            eta: None,
            epsilon: 0.05,
            steps: 1,
            engine: EngineMode::MonteCarlo,
            sample_count: 50_000,
            mc_seed: 0,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn effective_eta(&self) -> Result<f64> {
        match self.eta {
            Some(eta) if eta > 0.0 => Ok(eta),
            Some(eta) => Err(Error::InvalidArgument(format!("learning rate {eta} must be positive"))),
            None => one_update_eta(self.d, self.epsilon),
        }
    }

    pub fn engine(&self) -> ExpectationEngine {
        match self.engine {
            EngineMode::Exact => ExpectationEngine::exact(),
            EngineMode::MonteCarlo => ExpectationEngine::monte_carlo(self.sample_count, self.mc_seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactChecksum {
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub eta: f64,
    pub artifacts: Vec<ArtifactChecksum>,
    pub versions: BTreeMap<String, String>,
    /// Named pass/fail outcomes of the checks attached to this run.
    pub checks: BTreeMap<String, bool>,
}

impl RunManifest {
    pub fn all_checks_pass(&self) -> bool {
        self.checks.values().all(|&v| v)
    }

    /// Re-reads every artifact and compares it with its recorded checksum.
    pub fn verify(&self, dir: &Path) -> Result<bool> {
        for a in &self.artifacts {
            if sha256_hex(&fs::read(dir.join(&a.file))?) != a.sha256 {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Label of the token at `position` of level `t`, 1-based: `x3`, `y2_1`.
pub fn token_label(t: usize, position: usize) -> String {
    if t == 0 {
        format!("x{}", position + 1)
    } else {
        format!("y{}_{}", t, position + 1)
    }
}

/// Renders a field on the full attention grid: one column per generated token, one
/// row per attendable token, masked cells as `M`.
pub fn grid_csv(task: &TaskSpec, field: &Field, cell: impl Fn(f64) -> String) -> Result<String> {
    field.check_task(task)?;
    let depth = task.depth();
    let mut out = String::from("position");
    for t in 1..=depth {
        for l in 0..task.width(t) {
            write!(out, ",{}", token_label(t, l)).expect("string write");
        }
    }
    out.push('\n');
    for t0 in 0..depth {
        for p in 0..task.width(t0) {
            out.push_str(&token_label(t0, p));
            for t in 1..=depth {
                for l in 0..task.width(t) {
                    out.push(',');
                    if t == t0 + 1 {
                        out.push_str(&cell(field.column(t, l)[p]));
                    } else {
                        out.push('M');
                    }
                }
            }
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn sign_cell(v: f64) -> String {
    match v {
        v if v > 0.0 => "1".into(),
        v if v < 0.0 => "-1".into(),
        _ => "0".into(),
    }
}

/// Grid of the optimal scores: 0.5 on child cells, 0 on other unmasked cells.
pub fn ground_truth_matrix(task: &TaskSpec) -> Result<String> {
    grid_csv(task, &optimal_scores(task), format_real)
}

/// Sign pattern of `optimal - uniform`: +1 on children of columns wider than two,
/// -1 on their other cells, 0 in two-wide columns.
pub fn expected_init_sign_pattern(task: &TaskSpec) -> Field {
    let uniform = init_weights(task).softmax();
    optimal_scores(task).zip_with(&uniform, |a, b| sign_of(a - b)).expect("same task")
}

fn sign_of(v: f64) -> f64 {
    if v.abs() <= 1e-15 {
        0.0
    } else {
        v.signum()
    }
}

#[derive(Serialize)]
struct TraceFile<'a> {
    task: crate::boolean_task::TaskManifest,
    trainer: Trainer,
    eta: f64,
    engine: &'a ExpectationEngine,
    steps: Vec<StepSummary>,
}

struct ArtifactWriter {
    dir: PathBuf,
    written: Vec<ArtifactChecksum>,
}

impl ArtifactWriter {
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.dir.join(name), bytes)?;
        self.written.push(ArtifactChecksum { file: name.to_string(), sha256: sha256_hex(bytes) });
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }
}

/// Runs the configured trainer and writes every artifact plus the manifest into
/// `config.out_dir`. On failure the directory is left with a `.failed` marker.
pub fn run_experiment(config: &RunConfig) -> Result<RunManifest> {
    fs::create_dir_all(&config.out_dir)?;
    let marker = config.out_dir.join(FAILED_MARKER);
    if marker.exists() {
        fs::remove_file(&marker)?;
    }
    match run_inner(config) {
        Ok(m) => Ok(m),
        Err(e) => {
            // Best effort: the original error matters more than a failed marker write.
            let _ = fs::write(&marker, format!("{e}\n"));
            Err(e)
        }
    }
}

fn run_inner(config: &RunConfig) -> Result<RunManifest> {
    let start = Instant::now();
    let task = build_task(config.kind, config.d, config.k, config.task_seed)?;
    let eta = config.effective_eta()?;
    let engine = config.engine();
    let mut out = ArtifactWriter { dir: config.out_dir.clone(), written: Vec::new() };

    out.write_json("task.json", &task.to_manifest())?;
    out.write("ground_truth.csv", ground_truth_matrix(&task)?.as_bytes())?;

    let w0 = init_weights(&task);
    let (trace, stepwise): (TrainTrace, Option<StepwiseReport>) = match config.trainer {
        Trainer::Rl => (sign_ascent(&task, &w0, eta, config.steps, &engine)?, None),
        Trainer::Sft => {
            let (t, r) = sign_descent(&task, &w0, eta, config.steps, &engine)?;
            (t, Some(r))
        }
    };

    for rec in &trace.steps {
        if let Some(signs) = &rec.signs {
            // Grids show the update direction: the ascent sign for RL, the negated descent sign for SFT.
            let direction = match config.trainer {
                Trainer::Rl => signs.clone(),
                Trainer::Sft => signs.map(|v| -v),
            };
            out.write(&format!("sign_step_{:02}.csv", rec.step), grid_csv(&task, &direction, sign_cell)?.as_bytes())?;
        }
        let mut buf = Vec::new();
        rec.weights.softmax().write_csv(&task, &mut buf)?;
        out.write(&format!("scores_step_{:02}.csv", rec.step), &buf)?;
    }
    out.write_json(
        "trace.json",
        &TraceFile { task: task.to_manifest(), trainer: config.trainer, eta, engine: &engine, steps: trace.summary() },
    )?;
    if let Some(report) = &stepwise {
        out.write_json("stepwise.json", report)?;
    }

    let checks = run_checks(&task, config.trainer, &trace, stepwise.as_ref());
    let mut versions = BTreeMap::new();
    versions.insert("cotlab".to_string(), env!("CARGO_PKG_VERSION").to_string());
    let manifest = RunManifest { config: config.clone(), eta, artifacts: out.written, versions, checks };

    let tmp = config.out_dir.join(format!("{MANIFEST_FILE}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&serde_json::to_vec_pretty(&manifest)?)?;
        f.write_all(b"\n")?;
        f.sync_all()?;
    }
    fs::rename(&tmp, config.out_dir.join(MANIFEST_FILE))?;
    let mut timing = String::new();
    for rec in &trace.steps {
        writeln!(timing, "step {} {:.6}s", rec.step, rec.elapsed.as_secs_f64()).expect("string write");
    }
    writeln!(timing, "total {:.6}s", start.elapsed().as_secs_f64()).expect("string write");
    fs::write(config.out_dir.join(TIMING_FILE), timing)?;
    Ok(manifest)
}

fn run_checks(task: &TaskSpec, trainer: Trainer, trace: &TrainTrace, stepwise: Option<&StepwiseReport>) -> BTreeMap<String, bool> {
    let mut checks = BTreeMap::new();
    let uniform_start = trace.steps[0].weights == init_weights(task);
    match trainer {
        Trainer::Rl => {
            if let (true, Some(signs)) = (uniform_start, &trace.steps[0].signs) {
                checks.insert("initial_sign_pattern".to_string(), *signs == expected_init_sign_pattern(task));
            }
        }
        Trainer::Sft => {
            if let (true, Some(report)) = (uniform_start, stepwise) {
                let ok = report
                    .iterations
                    .iter()
                    .filter(|it| it.step < task.depth() && trace.steps[it.step].signs.is_some())
                    .all(|it| it.nonzero_levels == vec![it.step + 1]);
                checks.insert("stepwise_support".to_string(), ok);
            }
        }
    }
    checks
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boolean_task::build_task_with_subset;

    #[test]
    fn ground_truth_grid_for_minimal_tree() {
        let task = build_task_with_subset(FunctionKind::Parity, 4, 4, 0, vec![0, 1, 2, 3]).unwrap();
        let csv = ground_truth_matrix(&task).unwrap();
        let rows: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
        assert_eq!(rows[0], vec!["position", "y1_1", "y1_2", "y2_1"]);
        assert_eq!(rows[1], vec!["x1", "0.5", "0", "M"]);
        assert_eq!(rows[3], vec!["x3", "0", "0.5", "M"]);
        assert_eq!(rows[5], vec!["y1_1", "M", "M", "0.5"]);
        assert_eq!(rows.len(), 1 + 4 + 2);
    }

    #[test]
    fn ground_truth_columns_sum_to_one() {
        let task = build_task(FunctionKind::Parity, 20, 16, 1).unwrap();
        let csv = ground_truth_matrix(&task).unwrap();
        let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').skip(1).collect()).collect();
        for c in 0..15 {
            let col: Vec<f64> = rows.iter().filter_map(|r| r[c].parse().ok()).collect();
            assert_eq!(col.iter().sum::<f64>(), 1.0);
            if c < 8 {
                assert_eq!(col.iter().filter(|&&v| v == 0.5).count(), 2);
            }
        }
    }

    #[test]
    fn config_round_trip_and_defaults() {
        let cfg = RunConfig { trainer: Trainer::Sft, eta: Some(1.5), ..RunConfig::default() };
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&json).unwrap(), cfg);
        let partial: RunConfig = serde_json::from_str(r#"{"d": 8, "k": 8, "engine": "exact"}"#).unwrap();
        assert_eq!(partial.sample_count, 50_000);
        assert_eq!(partial.engine, EngineMode::Exact);
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn failed_run_leaves_marker() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig { d: 20, k: 16, engine: EngineMode::Exact, out_dir: dir.path().to_path_buf(), ..RunConfig::default() };
        assert!(matches!(run_experiment(&cfg), Err(Error::BudgetExceeded { .. })));
        assert!(dir.path().join(FAILED_MARKER).exists());
    }

    #[test]
    fn expected_pattern_freezes_two_wide_columns() {
        let task = build_task(FunctionKind::And, 8, 4, 0).unwrap();
        let p = expected_init_sign_pattern(&task);
        assert!(p.column(2, 0).iter().all(|&v| v == 0.0));
        assert_eq!(p.column(1, 0).iter().filter(|&&v| v > 0.0).count(), 2);
        assert_eq!(p.column(1, 0).iter().filter(|&&v| v < 0.0).count(), 6);
    }
}
