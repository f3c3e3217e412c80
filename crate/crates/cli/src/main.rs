use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use cotlab::acceptance::{run_criterion, CRITERION_COUNT};
use cotlab::attention_model::init_weights;
use cotlab::boolean_task::{build_task, FunctionKind, TaskSpec};
use cotlab::checks::{
    closed_form_sweep, fd_check_rl, fd_check_sft, level_stats_run, random_weights, separation_sweep, MarginLaw,
    RecursionVariant, FD_STEP, FD_TOLERANCE,
};
use cotlab::experiment::{ground_truth_matrix, run_experiment, RunConfig, Trainer};
use cotlab::oracle::{abcd, EngineMode, ExpectationEngine, TokenLaw};
use cotlab::rl_finetune::final_reward_variance;

#[derive(Parser)]
#[command(name = "cotlab", version, about = "Sparse Boolean chain-of-thought learning experiments")]
struct Cli {
    /// Root directory for run outputs and reports.
    #[arg(long, global = true, env = "COTLAB_OUT", default_value = "runs")]
    out_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sign policy ascent on the per-level reward.
    RlTrain(TrainArgs),
    /// Sign descent on the self-generated hinge loss.
    SftTrain(TrainArgs),
    /// Compare exact parity training with the closed-form scores.
    VerifyClosedForm {
        #[command(flatten)]
        task: TaskArgs,
        #[arg(long, value_delimiter = ',', default_value = "0.5,1,3")]
        etas: Vec<f64>,
        #[arg(long, default_value_t = 5)]
        steps: usize,
        #[arg(long, default_value_t = 1e-9)]
        tolerance: f64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Check analytic gradients against central finite differences.
    FdCheck {
        #[command(flatten)]
        task: TaskArgs,
        #[arg(long, value_enum, default_value = "both")]
        trainer: FdTrainer,
        /// Evaluate at uniform weights instead of random ones.
        #[arg(long)]
        uniform: bool,
        #[arg(long, default_value_t = 0)]
        weight_seed: u64,
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long, default_value_t = FD_STEP)]
        h: f64,
        #[arg(long, default_value_t = FD_TOLERANCE)]
        tolerance: f64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Separation margins of the critical gradient components at uniform weights.
    CheckSeparation {
        #[command(flatten)]
        task: TaskArgs,
        #[command(flatten)]
        engine: EngineArgs,
        #[arg(long, value_enum, default_value = "rl")]
        law: Law,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// The a/b/c/d masses behind the AND/OR margins of one column.
    AbcdReport {
        #[command(flatten)]
        task: TaskArgs,
        #[arg(long, default_value_t = 1)]
        level: usize,
        #[arg(long, default_value_t = 1)]
        node: usize,
        #[arg(long, value_enum, default_value = "rl")]
        law: Law,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Node means of every level along exact parity training.
    LevelStats {
        #[command(flatten)]
        task: TaskArgs,
        #[arg(long, default_value_t = 1.0)]
        eta: f64,
        #[arg(long, default_value_t = 3)]
        steps: usize,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Variance of the final-reward gradient across all subset parities.
    VarianceFinalReward {
        #[arg(long, value_delimiter = ',', default_value = "6,7")]
        d: Vec<usize>,
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write the optimal attention grid as CSV.
    GroundTruth {
        #[command(flatten)]
        task: TaskArgs,
        /// Output file; stdout when absent.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run the acceptance suite.
    Accept {
        /// Criteria to run (1-based); all when absent.
        #[arg(long, value_delimiter = ',')]
        only: Vec<usize>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct TaskArgs {
    #[arg(long, default_value = "PARITY")]
    kind: FunctionKind,
    #[arg(long, default_value_t = 8)]
    d: usize,
    #[arg(long, default_value_t = 8)]
    k: usize,
    #[arg(long = "task-seed", default_value_t = 0)]
    seed: u64,
}

impl TaskArgs {
    fn build(&self) -> Result<TaskSpec> {
        Ok(build_task(self.kind, self.d, self.k, self.seed)?)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Engine {
    Exact,
    MonteCarlo,
}

impl From<Engine> for EngineMode {
    fn from(e: Engine) -> Self {
        match e {
            Engine::Exact => EngineMode::Exact,
            Engine::MonteCarlo => EngineMode::MonteCarlo,
        }
    }
}

#[derive(Args, Clone)]
struct EngineArgs {
    #[arg(long, value_enum, default_value = "exact")]
    engine: Engine,
    #[arg(long, default_value_t = 50_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    mc_seed: u64,
}

impl EngineArgs {
    fn build(&self) -> ExpectationEngine {
        match self.engine {
            Engine::Exact => ExpectationEngine::exact(),
            Engine::MonteCarlo => ExpectationEngine::monte_carlo(self.samples, self.mc_seed),
        }
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum FdTrainer {
    Rl,
    Sft,
    Both,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Law {
    Rl,
    Sft,
}

impl From<Law> for MarginLaw {
    fn from(l: Law) -> Self {
        match l {
            Law::Rl => MarginLaw::Rl,
            Law::Sft => MarginLaw::Sft,
        }
    }
}

/// Training flags; each one overrides the config file.
#[derive(Args)]
struct TrainArgs {
    /// Flat JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    kind: Option<FunctionKind>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    task_seed: Option<u64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_enum)]
    engine: Option<Engine>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    mc_seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl TrainArgs {
    fn resolve(&self, trainer: Trainer, out_root: &Path) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_json_file(p).with_context(|| format!("reading {}", p.display()))?,
            None => RunConfig { steps: if trainer == Trainer::Sft { 4 } else { 1 }, ..RunConfig::default() },
        };
        cfg.trainer = trainer;
        macro_rules! set {
            ($($field:ident => $target:ident),*) => { $(if let Some(v) = self.$field { cfg.$target = v.into(); })* };
        }
        set!(kind => kind, d => d, k => k, task_seed => task_seed, epsilon => epsilon, steps => steps,
             engine => engine, samples => sample_count, mc_seed => mc_seed);
        if self.eta.is_some() {
            cfg.eta = self.eta;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        } else if self.config.is_none() {
            let name = match trainer {
                Trainer::Rl => "rl",
                Trainer::Sft => "sft",
            };
            cfg.out_dir = out_root.join(format!("{name}-{}-d{}-k{}-s{}", cfg.kind.name(), cfg.d, cfg.k, cfg.task_seed));
        }
        Ok(cfg)
    }
}

fn emit(report: Option<&Path>, out_root: &Path, name: &str, passed: bool, body: Value) -> Result<bool> {
    let path = match report {
        Some(p) => p.to_path_buf(),
        None => out_root.join(format!("{name}.json")),
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let doc = json!({ "command": name, "passed": passed, "report": body });
    fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n").with_context(|| format!("writing {}", path.display()))?;
    println!("{}: {} ({})", name, if passed { "pass" } else { "fail" }, path.display());
    Ok(passed)
}

fn train(args: &TrainArgs, trainer: Trainer, out_root: &Path) -> Result<bool> {
    let cfg = args.resolve(trainer, out_root)?;
    let manifest = run_experiment(&cfg).with_context(|| format!("run in {}", cfg.out_dir.display()))?;
    println!("eta {}", manifest.eta);
    for (name, ok) in &manifest.checks {
        println!("{name}: {}", if *ok { "pass" } else { "fail" });
    }
    println!("{} artifacts in {}", manifest.artifacts.len(), cfg.out_dir.display());
    Ok(manifest.all_checks_pass())
}

fn run(cli: Cli) -> Result<bool> {
    let root = cli.out_root.as_path();
    match &cli.command {
        Command::RlTrain(a) => train(a, Trainer::Rl, root),
        Command::SftTrain(a) => train(a, Trainer::Sft, root),
        Command::VerifyClosedForm { task, etas, steps, tolerance, report } => {
            let problem = task.build()?;
            let reports = closed_form_sweep(&problem, etas, *steps, *tolerance)?;
            let passed = reports.iter().all(|r| r.passed);
            emit(report.as_deref(), root, "verify-closed-form", passed, json!({ "task": problem.to_manifest(), "engine": ExpectationEngine::exact(), "sweeps": reports }))
        }
        Command::FdCheck { task, trainer, uniform, weight_seed, scale, h, tolerance, report } => {
            let problem = task.build()?;
            let w = if *uniform { init_weights(&problem) } else { random_weights(&problem, *scale, *weight_seed) };
            let mut reports = Vec::new();
            if *trainer != FdTrainer::Sft {
                reports.push(fd_check_rl(&problem, &w, *h, *tolerance)?);
            }
            if *trainer != FdTrainer::Rl {
                reports.push(fd_check_sft(&problem, &w, *h, *tolerance)?);
            }
            let passed = reports.iter().all(|r| r.passed());
            emit(report.as_deref(), root, "fd-check", passed, json!({ "task": problem.to_manifest(), "engine": ExpectationEngine::exact(), "checks": reports }))
        }
        Command::CheckSeparation { task, engine, law, report } => {
            let problem = task.build()?;
            let eng = engine.build();
            let checks = separation_sweep(&problem, &init_weights(&problem).softmax(), &eng, (*law).into())?;
            let passed = !checks.is_empty()
                && checks.iter().all(|c| c.margin.satisfied() && c.worst_prediction_error.is_none_or(|e| e <= 1e-12));
            emit(report.as_deref(), root, "check-separation", passed, json!({ "task": problem.to_manifest(), "engine": eng, "columns": checks }))
        }
        Command::AbcdReport { task, level, node, law, report } => {
            let problem = task.build()?;
            if *level == 0 || *node == 0 {
                bail!("level and node are 1-based");
            }
            let (t, l) = (*level, *node - 1);
            let uniform = init_weights(&problem).softmax();
            let token_law = match law {
                Law::Rl => TokenLaw::OnPolicy,
                Law::Sft => TokenLaw::GroundTruth,
            };
            let exact = ExpectationEngine::exact();
            let column = separation_sweep(&problem, &uniform, &exact, (*law).into())?
                .into_iter()
                .find(|c| c.margin.level == t && c.margin.node == l)
                .with_context(|| format!("column ({level}, {node}) has no non-child positions"))?;
            let mut rows = Vec::new();
            let mut passed = true;
            for &(p, margin) in &column.margin.margins {
                let stats = abcd(&problem, &uniform, t, l, p, token_law)?;
                let predicted = stats.predicted_margin(problem.kind(), problem.k());
                passed &= (predicted - margin).abs() <= 1e-12 && margin > 0.0;
                rows.push(json!({ "position": p + 1, "abcd": stats, "terms": stats.terms(), "predicted_margin": predicted, "margin": margin }));
            }
            emit(report.as_deref(), root, "abcd-report", passed, json!({ "task": problem.to_manifest(), "engine": exact, "level": level, "node": node, "positions": rows }))
        }
        Command::LevelStats { task, eta, steps, report } => {
            let problem = task.build()?;
            let stats = level_stats_run(&problem, *eta, *steps)?;
            let passed = stats.max_spread <= 1e-12
                && stats.max_abs_mean < 1.0
                && matches!(stats.identified, RecursionVariant::Linear | RecursionVariant::Squared);
            emit(report.as_deref(), root, "level-stats", passed, json!({ "task": problem.to_manifest(), "engine": ExpectationEngine::exact(), "eta": eta, "stats": stats }))
        }
        Command::VarianceFinalReward { d, k, seed, report } => {
            let mut rows = Vec::new();
            for &dim in d {
                let problem = build_task(FunctionKind::Parity, dim, *k, *seed)?;
                rows.push(final_reward_variance(&problem, &init_weights(&problem).softmax())?);
            }
            let ratios: Vec<f64> = rows.windows(2).map(|w| w[1].variance / w[0].variance).collect();
            let passed = rows.iter().all(|r| r.satisfied);
            emit(report.as_deref(), root, "variance-final-reward", passed, json!({ "engine": ExpectationEngine::exact(), "sweeps": rows, "successive_ratios": ratios }))
        }
        Command::GroundTruth { task, output } => {
            let csv = ground_truth_matrix(&task.build()?)?;
            match output {
                Some(p) => fs::write(p, csv).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{csv}"),
            }
            Ok(true)
        }
        Command::Accept { only, report } => {
            let ids: Vec<usize> = if only.is_empty() { (1..=CRITERION_COUNT).collect() } else { only.clone() };
            let scratch = root.join("accept-scratch");
            let mut results = Vec::new();
            for id in ids {
                let r = run_criterion(id, &scratch);
                println!("{}", r.line());
                results.push(r);
            }
            let passed = results.iter().all(|r| r.passed);
            emit(report.as_deref(), root, "accept", passed, json!({ "criteria": results }))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
