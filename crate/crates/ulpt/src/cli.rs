//! The `ulpt` command-line surface.
//!
//! Every subcommand prints a JSON document whose first fields echo the
//! fully resolved invocation (`command` + `args`). Replaying those args
//! reproduces the output byte for byte; nothing in the output depends on
//! time, machine, or directory layout. CSV, where offered, is a projection
//! of the same data.
//!
//! Output directory: `--out` if given, else `$ULPT_OUT_DIR`, else
//! `./ulpt-out`. Exit codes: 0 ok, 2 invalid configuration, 3 diverged
//! run, 4 I/O or file-format error.

use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::analysis::{
    alignment_report, dimension_stats, sample_dims, spread_summary, AlignmentReport,
    DimensionStats, SpreadSummary,
};
use crate::error::{Result, UlptError};
use crate::jl::{
    distortion_report, fit_c_from_tails, required_rank, tail_estimate, DistortionReport, JlQuery,
};
use crate::numerics::matrix::{gaussian_matrix, Vector};
use crate::numerics::rng::Seed;
use crate::registry::{PromptCheckpoint, TaskRegistry};
use crate::reparam::{gradcheck_suite, solve_rank_for_budget, GradcheckReport, Mode, PromptConfig};
use crate::training::toy::{make_dataset, ToyModel, ToyModelConfig, ToyTask};
use crate::training::{
    ablation_suite, curvature_estimate, make_reachable_target, train, AblationRow, LossTask,
    LrPolicy, OptimizerConfig, PromptState, QuadraticTarget, RunStatus, ScheduleConfig,
    TrainSettings,
};

#[derive(Parser)]
#[command(
    name = "ulpt",
    version,
    about = "Ultra-low-dimensional prompt tuning: train tiny prompts through a frozen \
             seeded projection, verify the math, and account for the storage savings",
    after_help = "Output directory: --out, else $ULPT_OUT_DIR, else ./ulpt-out.\n\
                  Exit codes: 0 ok, 2 invalid configuration, 3 diverged run, \
                  4 I/O or file-format error."
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a prompt on the quadratic harness or the frozen toy
    /// transformer; writes summary.json, trace.csv, and (for storable
    /// modes) prompt.ulpt.
    Train(TrainArgs),
    /// Run every requested mode with matched shapes, seeds, and schedule.
    Ablate(AblateArgs),
    /// Random-projection distortion lab.
    #[command(subcommand)]
    Jl(JlCommand),
    /// Check analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Per-dimension statistics of a checkpoint's expanded prompt.
    AnalyzeDims(AnalyzeDimsArgs),
    /// Pairwise cosine similarity of learned shift and scale vectors
    /// across checkpoints.
    AnalyzeAlign(AnalyzeAlignArgs),
    /// Storage accounting over a directory of .ulpt checkpoints.
    Registry(RegistryArgs),
    /// Compare training z against training the projection at one matched
    /// parameter budget.
    TunePVsZ(TunePVsZArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TaskKind {
    Quadratic,
    Toy,
}

impl TaskKind {
    fn label(self) -> &'static str {
        match self {
            TaskKind::Quadratic => "quadratic",
            TaskKind::Toy => "toy",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PolicyKind {
    Schedule,
    Constant,
    Armijo,
}

impl PolicyKind {
    fn label(self) -> &'static str {
        match self {
            PolicyKind::Schedule => "schedule",
            PolicyKind::Constant => "constant",
            PolicyKind::Armijo => "armijo",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OptKind {
    Gd,
    Adamw,
}

impl OptKind {
    fn label(self) -> &'static str {
        match self {
            OptKind::Gd => "gd",
            OptKind::Adamw => "adamw",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OutputFormat {
    Json,
    Csv,
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse::<Mode>().map_err(|e| e.to_string())
}

/// Flags shared by train and ablate: task, shapes, seeds, and the
/// optimization recipe.
#[derive(Args, Clone)]
struct RunFlags {
    /// Objective: the exactly solvable quadratic or the toy transformer.
    #[arg(long, value_enum, default_value_t = TaskKind::Quadratic)]
    task: TaskKind,
    /// Prompt token count.
    #[arg(long, default_value_t = 8)]
    n: usize,
    /// Low-dimensional prompt width.
    #[arg(long, default_value_t = 4)]
    r: usize,
    /// Embedding width (also the toy model width).
    #[arg(long, default_value_t = 32)]
    d: usize,
    /// Seed of the frozen randomness (projection; frozen z in tune-p mode).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seed of the trainable initialization.
    #[arg(long, default_value_t = 1)]
    run_seed: u64,
    /// Seed of the reachable quadratic target.
    #[arg(long, default_value_t = 2)]
    target_seed: u64,
    /// Seed of the frozen toy model weights.
    #[arg(long, default_value_t = 3)]
    model_seed: u64,
    /// Seed of the toy datasets.
    #[arg(long, default_value_t = 4)]
    data_seed: u64,
    /// Toy training examples.
    #[arg(long, default_value_t = 48)]
    train_size: usize,
    /// Toy held-out examples.
    #[arg(long, default_value_t = 256)]
    eval_size: usize,
    /// Optimizer steps (0 reports parameter accounting without training).
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, value_enum, default_value_t = OptKind::Adamw)]
    optimizer: OptKind,
    #[arg(long, value_enum, default_value_t = PolicyKind::Schedule)]
    lr_policy: PolicyKind,
    /// Peak (schedule) or fixed (constant) learning rate.
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    /// Warmup steps of the schedule policy.
    #[arg(long, default_value_t = 500)]
    warmup: usize,
    /// Evaluate the held-out metric every this many steps.
    #[arg(long)]
    eval_every: Option<usize>,
    /// Stop early once the loss falls below this value.
    #[arg(long)]
    stop_below: Option<f64>,
}

impl RunFlags {
    fn push_canonical(&self, args: &mut Vec<String>, mode: Option<Mode>) {
        args.push("--task".into());
        args.push(self.task.label().into());
        if let Some(mode) = mode {
            args.push("--mode".into());
            args.push(mode.label().into());
        }
        for (flag, value) in [
            ("--n", self.n.to_string()),
            ("--r", self.r.to_string()),
            ("--d", self.d.to_string()),
            ("--seed", self.seed.to_string()),
            ("--run-seed", self.run_seed.to_string()),
            ("--target-seed", self.target_seed.to_string()),
            ("--model-seed", self.model_seed.to_string()),
            ("--data-seed", self.data_seed.to_string()),
            ("--train-size", self.train_size.to_string()),
            ("--eval-size", self.eval_size.to_string()),
            ("--steps", self.steps.to_string()),
            ("--optimizer", self.optimizer.label().into()),
            ("--lr-policy", self.lr_policy.label().into()),
            ("--lr", self.lr.to_string()),
            ("--warmup", self.warmup.to_string()),
        ] {
            args.push(flag.into());
            args.push(value);
        }
        if let Some(k) = self.eval_every {
            args.push("--eval-every".into());
            args.push(k.to_string());
        }
        if let Some(t) = self.stop_below {
            args.push("--stop-below".into());
            args.push(t.to_string());
        }
    }

    fn settings(&self) -> Result<TrainSettings> {
        let policy = match self.lr_policy {
            PolicyKind::Schedule => LrPolicy::Schedule(ScheduleConfig {
                peak_lr: self.lr,
                warmup_steps: self.warmup,
                total_steps: self.steps,
            }),
            PolicyKind::Constant => LrPolicy::Constant { lr: self.lr },
            PolicyKind::Armijo => LrPolicy::armijo_default(),
        };
        let optimizer = match self.optimizer {
            OptKind::Gd => OptimizerConfig::gd(),
            OptKind::Adamw => OptimizerConfig::adamw(),
        };
        let settings = TrainSettings {
            steps: self.steps,
            policy,
            optimizer,
            eval_every: self.eval_every,
            stop_below_loss: self.stop_below,
        };
        settings.validate()?;
        Ok(settings)
    }

    fn toy_model_config(&self) -> ToyModelConfig {
        ToyModelConfig {
            d_model: self.d,
            seed: Seed(self.model_seed),
            ..ToyModelConfig::small(Seed(self.model_seed))
        }
    }

    fn make_task(&self, config: &PromptConfig) -> Result<Box<dyn LossTask>> {
        match self.task {
            TaskKind::Quadratic => Ok(Box::new(QuadraticTarget {
                target: make_reachable_target(config, Seed(self.target_seed))?,
            })),
            TaskKind::Toy => {
                let model_config = self.toy_model_config();
                let model = ToyModel::new(model_config)?;
                let train_set = make_dataset(&model_config, self.train_size, Seed(self.data_seed))?;
                let eval_set = make_dataset(
                    &model_config,
                    self.eval_size,
                    Seed(self.data_seed).derive(1),
                )?;
                Ok(Box::new(ToyTask::new(model, train_set, eval_set)?))
            }
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = parse_mode, default_value = "ulpt")]
    mode: Mode,
    #[command(flatten)]
    run: RunFlags,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// Comma-separated mode labels, or "all".
    #[arg(long, default_value = "all")]
    modes: String,
    #[command(flatten)]
    run: RunFlags,
    #[arg(long, value_enum, default_value_t = OutputFormat::Json)]
    format: OutputFormat,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum JlCommand {
    /// Smallest rank the tail bound certifies for n points at distortion
    /// epsilon and failure probability delta.
    Rank {
        #[arg(long, default_value_t = 0.1)]
        epsilon: f64,
        #[arg(long, default_value_t = 0.01)]
        delta: f64,
        #[arg(long, default_value_t = 100)]
        n: usize,
        /// Tail constant in the exponent.
        #[arg(long, default_value_t = 1.0)]
        c: f64,
    },
    /// Monte Carlo estimate of the single-vector norm-distortion tail.
    Tail {
        #[arg(long, default_value_t = 64)]
        d: usize,
        #[arg(long, default_value_t = 1)]
        r: usize,
        #[arg(long, default_value_t = 0.5)]
        epsilon: f64,
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Tail estimates across ranks plus the fitted tail constant.
    Sweep {
        #[arg(long, default_value_t = 64)]
        d: usize,
        #[arg(long, default_value_t = 0.5)]
        epsilon: f64,
        /// Comma-separated ranks.
        #[arg(long, default_value = "4,8,16")]
        ranks: String,
        #[arg(long, default_value_t = 20_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = OutputFormat::Json)]
        format: OutputFormat,
    },
    /// Pairwise distortion of seeded Gaussian points through a seeded
    /// projection.
    Distort {
        /// Number of points.
        #[arg(long, default_value_t = 64)]
        points: usize,
        #[arg(long, default_value_t = 256)]
        d: usize,
        #[arg(long, default_value_t = 128)]
        r: usize,
        #[arg(long, default_value_t = 0.5)]
        epsilon: f64,
        /// Projection seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Point-cloud seed.
        #[arg(long, default_value_t = 1)]
        points_seed: u64,
    },
}

#[derive(Args)]
struct GradcheckArgs {
    /// Comma-separated mode labels, or "all".
    #[arg(long, default_value = "all")]
    modes: String,
    #[arg(long, default_value_t = 120)]
    instances: usize,
    #[arg(long, default_value_t = 8)]
    max_n: usize,
    #[arg(long, default_value_t = 4)]
    max_r: usize,
    #[arg(long, default_value_t = 16)]
    max_d: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    /// Pass threshold on the max relative error.
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
}

#[derive(Args)]
struct AnalyzeDimsArgs {
    /// Checkpoint to expand and analyze.
    #[arg(long)]
    ckpt: PathBuf,
    /// Number of dimensions to sample.
    #[arg(long, default_value_t = 8)]
    k: usize,
    /// Seed of the dimension sample, independent of training seeds.
    #[arg(long, default_value_t = 0)]
    analysis_seed: u64,
    #[arg(long, value_enum, default_value_t = OutputFormat::Json)]
    format: OutputFormat,
}

#[derive(Args)]
struct AnalyzeAlignArgs {
    /// Checkpoints to compare; repeat the flag (at least twice).
    #[arg(long = "ckpt", required = true)]
    ckpts: Vec<PathBuf>,
}

#[derive(Args)]
struct RegistryArgs {
    /// Directory of .ulpt checkpoints.
    #[arg(long)]
    dir: PathBuf,
}

#[derive(Args)]
struct TunePVsZArgs {
    /// Trainable-parameter budget shared by both sides.
    #[arg(long)]
    budget: usize,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 768)]
    d: usize,
    /// Steps of the paired quadratic runs; 0 solves and accounts only.
    #[arg(long, default_value_t = 0)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    run_seed: u64,
    #[arg(long, default_value_t = 2)]
    target_seed: u64,
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value)
        .map(|mut s| {
            s.push('\n');
            s
        })
        .map_err(|e| UlptError::Format(format!("could not serialize output: {e}")))
}

fn resolve_out(explicit: &Option<PathBuf>) -> PathBuf {
    explicit.clone().unwrap_or_else(|| {
        std::env::var_os("ULPT_OUT_DIR")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("ulpt-out"))
    })
}

fn csv_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

#[derive(Serialize)]
struct TrainSummary {
    command: &'static str,
    args: Vec<String>,
    config: PromptConfig,
    task: &'static str,
    run_seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    target_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    model_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    data_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    train_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    eval_size: Option<usize>,
    optimizer: OptimizerConfig,
    policy: LrPolicy,
    steps: usize,
    trainable_params: usize,
    status: RunStatus,
    final_loss: Option<f64>,
    final_eval: Option<f64>,
    clamp_events: usize,
    trace_rows: usize,
    checkpoint: Option<String>,
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let config = PromptConfig::new(
        args.run.n,
        args.run.r,
        args.run.d,
        Seed(args.run.seed),
        args.mode,
    )?;
    let settings = args.run.settings()?;
    let mut task = args.run.make_task(&config)?;
    let run = train(task.as_mut(), &config, &settings, Seed(args.run.run_seed))?;

    let out = resolve_out(&args.out);
    fs::create_dir_all(&out)?;

    let mut csv = String::from("step,lr,loss,eval_metric\n");
    for row in &run.trace {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            row.step,
            row.lr,
            row.loss,
            csv_opt(row.eval_metric)
        ));
    }
    fs::write(out.join("trace.csv"), csv)?;

    let checkpoint = if !run.diverged() && !config.mode.trains_projection() {
        let ckpt = PromptCheckpoint::from_state(&run.state)?;
        ckpt.save(&out.join("prompt.ulpt"))?;
        Some("prompt.ulpt".to_string())
    } else {
        None
    };

    let mut canonical = vec!["train".to_string()];
    args.run.push_canonical(&mut canonical, Some(args.mode));
    let is_toy = args.run.task == TaskKind::Toy;
    let summary = TrainSummary {
        command: "train",
        args: canonical,
        config,
        task: args.run.task.label(),
        run_seed: args.run.run_seed,
        target_seed: (!is_toy).then_some(args.run.target_seed),
        model_seed: is_toy.then_some(args.run.model_seed),
        data_seed: is_toy.then_some(args.run.data_seed),
        train_size: is_toy.then_some(args.run.train_size),
        eval_size: is_toy.then_some(args.run.eval_size),
        optimizer: settings.optimizer,
        policy: settings.policy,
        steps: settings.steps,
        trainable_params: config.trainable_param_count(),
        status: run.status,
        final_loss: run.final_loss,
        final_eval: run.final_eval,
        clamp_events: run.clamp_events,
        trace_rows: run.trace.len(),
        checkpoint,
    };
    let json = to_json(&summary)?;
    fs::write(out.join("summary.json"), &json)?;
    print!("{json}");

    match run.status {
        RunStatus::Diverged { step } => Err(UlptError::Diverged { step }),
        RunStatus::Completed => Ok(()),
    }
}

fn parse_modes(list: &str) -> Result<Vec<Mode>> {
    if list == "all" {
        return Ok(Mode::ALL.to_vec());
    }
    list.split(',').map(|s| s.trim().parse::<Mode>()).collect()
}

#[derive(Serialize)]
struct AblateSummary {
    command: &'static str,
    args: Vec<String>,
    rows: Vec<AblationRow>,
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let modes = parse_modes(&args.modes)?;
    let settings = args.run.settings()?;
    let rows = ablation_suite(
        &modes,
        args.run.n,
        args.run.r,
        args.run.d,
        Seed(args.run.seed),
        Seed(args.run.run_seed),
        &settings,
        |config| args.run.make_task(config),
    )?;

    let mut canonical = vec!["ablate".to_string()];
    canonical.push("--modes".into());
    canonical.push(args.modes.clone());
    args.run.push_canonical(&mut canonical, None);
    let summary = AblateSummary {
        command: "ablate",
        args: canonical,
        rows,
    };

    let out = resolve_out(&args.out);
    fs::create_dir_all(&out)?;
    let json = to_json(&summary)?;
    fs::write(out.join("ablation.json"), &json)?;

    match args.format {
        OutputFormat::Json => print!("{json}"),
        OutputFormat::Csv => {
            let mut csv =
                String::from("mode,param_count,final_loss,final_eval,clamp_events,diverged\n");
            for row in &summary.rows {
                csv.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    row.mode,
                    row.param_count,
                    csv_opt(row.final_loss),
                    csv_opt(row.final_eval),
                    row.clamp_events,
                    row.diverged
                ));
            }
            print!("{csv}");
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct JlRankOutput {
    command: &'static str,
    args: Vec<String>,
    required_rank: usize,
}

#[derive(Serialize)]
struct JlTailOutput {
    command: &'static str,
    args: Vec<String>,
    tail: f64,
}

#[derive(Serialize)]
struct JlSweepOutput {
    command: &'static str,
    args: Vec<String>,
    ranks: Vec<usize>,
    tails: Vec<f64>,
    fitted_c: f64,
}

#[derive(Serialize)]
struct JlDistortOutput {
    command: &'static str,
    args: Vec<String>,
    report: DistortionReport,
}

fn cmd_jl(cmd: &JlCommand) -> Result<()> {
    match cmd {
        JlCommand::Rank {
            epsilon,
            delta,
            n,
            c,
        } => {
            let query = JlQuery {
                epsilon: *epsilon,
                delta: *delta,
                n: *n,
                c: *c,
            };
            let rank = required_rank(&query)?;
            let out = JlRankOutput {
                command: "jl rank",
                args: vec![
                    "jl".into(),
                    "rank".into(),
                    "--epsilon".into(),
                    epsilon.to_string(),
                    "--delta".into(),
                    delta.to_string(),
                    "--n".into(),
                    n.to_string(),
                    "--c".into(),
                    c.to_string(),
                ],
                required_rank: rank,
            };
            print!("{}", to_json(&out)?);
        }
        JlCommand::Tail {
            d,
            r,
            epsilon,
            trials,
            seed,
        } => {
            let tail = tail_estimate(*d, *r, *epsilon, *trials, Seed(*seed))?;
            let out = JlTailOutput {
                command: "jl tail",
                args: vec![
                    "jl".into(),
                    "tail".into(),
                    "--d".into(),
                    d.to_string(),
                    "--r".into(),
                    r.to_string(),
                    "--epsilon".into(),
                    epsilon.to_string(),
                    "--trials".into(),
                    trials.to_string(),
                    "--seed".into(),
                    seed.to_string(),
                ],
                tail,
            };
            print!("{}", to_json(&out)?);
        }
        JlCommand::Sweep {
            d,
            epsilon,
            ranks,
            trials,
            seed,
            format,
        } => {
            let parsed: Vec<usize> = ranks
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|_| UlptError::Config(format!("bad rank {s:?} in --ranks")))
                })
                .collect::<Result<_>>()?;
            let mut tails = Vec::with_capacity(parsed.len());
            for (i, &r) in parsed.iter().enumerate() {
                tails.push(tail_estimate(
                    *d,
                    r,
                    *epsilon,
                    *trials,
                    Seed(*seed).derive(i as u64),
                )?);
            }
            let fitted_c = fit_c_from_tails(*epsilon, &parsed, &tails)?;
            let out = JlSweepOutput {
                command: "jl sweep",
                args: vec![
                    "jl".into(),
                    "sweep".into(),
                    "--d".into(),
                    d.to_string(),
                    "--epsilon".into(),
                    epsilon.to_string(),
                    "--ranks".into(),
                    ranks.clone(),
                    "--trials".into(),
                    trials.to_string(),
                    "--seed".into(),
                    seed.to_string(),
                ],
                ranks: parsed,
                tails,
                fitted_c,
            };
            match format {
                OutputFormat::Json => print!("{}", to_json(&out)?),
                OutputFormat::Csv => {
                    let mut csv = String::from("rank,tail\n");
                    for (r, t) in out.ranks.iter().zip(&out.tails) {
                        csv.push_str(&format!("{r},{t}\n"));
                    }
                    print!("{csv}");
                }
            }
        }
        JlCommand::Distort {
            points,
            d,
            r,
            epsilon,
            seed,
            points_seed,
        } => {
            let cloud = gaussian_matrix(Seed(*points_seed), *points, *d, 1.0)?;
            let config = PromptConfig::new(*points, *r, *d, Seed(*seed), Mode::UlptNoShiftNoScale)?;
            let proj = crate::reparam::build_projection(&config)?;
            let report = distortion_report(&cloud, &proj, *epsilon)?;
            let out = JlDistortOutput {
                command: "jl distort",
                args: vec![
                    "jl".into(),
                    "distort".into(),
                    "--points".into(),
                    points.to_string(),
                    "--d".into(),
                    d.to_string(),
                    "--r".into(),
                    r.to_string(),
                    "--epsilon".into(),
                    epsilon.to_string(),
                    "--seed".into(),
                    seed.to_string(),
                    "--points-seed".into(),
                    points_seed.to_string(),
                ],
                report,
            };
            print!("{}", to_json(&out)?);
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct GradcheckRow {
    mode: Mode,
    #[serde(flatten)]
    report: GradcheckReport,
    pass: bool,
}

#[derive(Serialize)]
struct GradcheckOutput {
    command: &'static str,
    args: Vec<String>,
    tol: f64,
    rows: Vec<GradcheckRow>,
    all_pass: bool,
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let modes = parse_modes(&args.modes)?;
    let mut rows = Vec::with_capacity(modes.len());
    for (i, &mode) in modes.iter().enumerate() {
        let report = gradcheck_suite(
            mode,
            args.max_n,
            args.max_r,
            args.max_d,
            args.instances,
            Seed(args.seed).derive(i as u64),
            args.h,
        )?;
        rows.push(GradcheckRow {
            mode,
            report,
            pass: report.max_rel_err < args.tol,
        });
    }
    let all_pass = rows.iter().all(|r| r.pass);
    let out = GradcheckOutput {
        command: "gradcheck",
        args: vec![
            "gradcheck".into(),
            "--modes".into(),
            args.modes.clone(),
            "--instances".into(),
            args.instances.to_string(),
            "--max-n".into(),
            args.max_n.to_string(),
            "--max-r".into(),
            args.max_r.to_string(),
            "--max-d".into(),
            args.max_d.to_string(),
            "--seed".into(),
            args.seed.to_string(),
            "--h".into(),
            args.h.to_string(),
            "--tol".into(),
            args.tol.to_string(),
        ],
        tol: args.tol,
        rows,
        all_pass,
    };
    print!("{}", to_json(&out)?);
    Ok(())
}

#[derive(Serialize)]
struct AnalyzeDimsOutput {
    command: &'static str,
    args: Vec<String>,
    checkpoint_mode: Mode,
    n: usize,
    d: usize,
    dims: Vec<DimensionStats>,
    spread: SpreadSummary,
}

fn cmd_analyze_dims(args: &AnalyzeDimsArgs) -> Result<()> {
    let ckpt = PromptCheckpoint::load(&args.ckpt)?;
    let e_hat = ckpt.expand()?;
    let dims = sample_dims(e_hat.cols(), args.k, Seed(args.analysis_seed))?;
    let stats = dimension_stats(&e_hat, &dims)?;
    let spread = spread_summary(&e_hat)?;
    let out = AnalyzeDimsOutput {
        command: "analyze-dims",
        args: vec![
            "analyze-dims".into(),
            "--k".into(),
            args.k.to_string(),
            "--analysis-seed".into(),
            args.analysis_seed.to_string(),
        ],
        checkpoint_mode: ckpt.mode,
        n: ckpt.n,
        d: ckpt.d,
        dims: stats,
        spread,
    };
    match args.format {
        OutputFormat::Json => print!("{}", to_json(&out)?),
        OutputFormat::Csv => {
            let mut csv = String::from("dim,mean,p25,p75,min,max\n");
            for s in &out.dims {
                csv.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    s.dim, s.mean, s.p25, s.p75, s.min, s.max
                ));
            }
            print!("{csv}");
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct AnalyzeAlignOutput {
    command: &'static str,
    args: Vec<String>,
    /// Cosine similarities of learned shift vectors.
    shift: AlignmentReport,
    /// Cosine similarities of learned scale deviations (s - 1, the part
    /// training added to the neutral scale).
    scale: AlignmentReport,
}

fn cmd_analyze_align(args: &AnalyzeAlignArgs) -> Result<()> {
    if args.ckpts.len() < 2 {
        return Err(UlptError::Config(
            "alignment needs at least two --ckpt arguments".to_string(),
        ));
    }
    let mut labels = Vec::with_capacity(args.ckpts.len());
    let mut shifts = Vec::with_capacity(args.ckpts.len());
    let mut scales = Vec::with_capacity(args.ckpts.len());
    for path in &args.ckpts {
        let ckpt = PromptCheckpoint::load(path)?;
        labels.push(
            path.file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("unnamed")
                .to_string(),
        );
        shifts.push(
            ckpt.b
                .clone()
                .unwrap_or_else(|| Vector::filled(ckpt.d, 0.0)),
        );
        let mut deviation = ckpt
            .s
            .clone()
            .unwrap_or_else(|| Vector::filled(ckpt.d, 1.0));
        for v in deviation.as_mut_slice() {
            *v -= 1.0;
        }
        scales.push(deviation);
    }
    let out = AnalyzeAlignOutput {
        command: "analyze-align",
        args: std::iter::once("analyze-align".to_string())
            .chain(
                labels
                    .iter()
                    .flat_map(|l| ["--ckpt".to_string(), l.clone()]),
            )
            .collect(),
        shift: alignment_report(labels.clone(), &shifts)?,
        scale: alignment_report(labels, &scales)?,
    };
    print!("{}", to_json(&out)?);
    Ok(())
}

fn cmd_registry(args: &RegistryArgs) -> Result<()> {
    let registry = TaskRegistry::scan_dir(&args.dir)?;
    #[derive(Serialize)]
    struct RegistryOutput {
        command: &'static str,
        report: crate::registry::RegistryReport,
    }
    let out = RegistryOutput {
        command: "registry",
        report: registry.report(),
    };
    print!("{}", to_json(&out)?);
    Ok(())
}

#[derive(Serialize)]
struct BudgetSide {
    mode: Mode,
    rank: Option<usize>,
    params: Option<usize>,
    final_loss: Option<f64>,
}

#[derive(Serialize)]
struct TunePVsZOutput {
    command: &'static str,
    args: Vec<String>,
    budget: usize,
    n: usize,
    d: usize,
    steps: usize,
    tune_z: BudgetSide,
    tune_p: BudgetSide,
}

fn budget_side(args: &TunePVsZArgs, mode: Mode, rank: usize) -> Result<BudgetSide> {
    let config = PromptConfig::new(args.n, rank, args.d, Seed(args.seed), mode)?;
    let final_loss = if args.steps > 0 {
        let mut task = QuadraticTarget {
            target: make_reachable_target(&config, Seed(args.target_seed))?,
        };
        // Descent-safe constant rate from the measured curvature at the
        // run's own starting point.
        let mut probe = PromptState::init(&config, Seed(args.run_seed))?;
        let lambda = curvature_estimate(&mut task, &mut probe, Seed(args.run_seed).derive(7), 25)?;
        let settings = TrainSettings {
            steps: args.steps,
            policy: LrPolicy::Constant { lr: 0.9 / lambda },
            optimizer: OptimizerConfig::gd(),
            eval_every: None,
            stop_below_loss: Some(1e-12),
        };
        let run = train(&mut task, &config, &settings, Seed(args.run_seed))?;
        if let RunStatus::Diverged { step } = run.status {
            return Err(UlptError::Diverged { step });
        }
        run.final_loss
    } else {
        None
    };
    Ok(BudgetSide {
        mode,
        rank: Some(rank),
        params: Some(config.trainable_param_count()),
        final_loss,
    })
}

fn cmd_tune_p_vs_z(args: &TunePVsZArgs) -> Result<()> {
    // The z side must fit; below its minimum the whole comparison is
    // infeasible. The projection side may alone be infeasible, which is
    // reported as an empty cell rather than an error.
    let z_rank = solve_rank_for_budget(Mode::Ulpt, args.budget, args.n, args.d)?;
    let tune_z = budget_side(args, Mode::Ulpt, z_rank)?;
    let tune_p = match solve_rank_for_budget(Mode::TunePFrozenZ, args.budget, args.n, args.d) {
        Ok(rank) => budget_side(args, Mode::TunePFrozenZ, rank)?,
        Err(UlptError::InfeasibleBudget(_)) => BudgetSide {
            mode: Mode::TunePFrozenZ,
            rank: None,
            params: None,
            final_loss: None,
        },
        Err(other) => return Err(other),
    };
    let out = TunePVsZOutput {
        command: "tune-p-vs-z",
        args: vec![
            "tune-p-vs-z".into(),
            "--budget".into(),
            args.budget.to_string(),
            "--n".into(),
            args.n.to_string(),
            "--d".into(),
            args.d.to_string(),
            "--steps".into(),
            args.steps.to_string(),
            "--seed".into(),
            args.seed.to_string(),
            "--run-seed".into(),
            args.run_seed.to_string(),
            "--target-seed".into(),
            args.target_seed.to_string(),
        ],
        budget: args.budget,
        n: args.n,
        d: args.d,
        steps: args.steps,
        tune_z,
        tune_p,
    };
    print!("{}", to_json(&out)?);
    Ok(())
}

/// Parses argv and runs the requested subcommand.
pub fn run() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Jl(cmd) => cmd_jl(cmd),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::AnalyzeDims(args) => cmd_analyze_dims(args),
        Command::AnalyzeAlign(args) => cmd_analyze_align(args),
        Command::Registry(args) => cmd_registry(args),
        Command::TunePVsZ(args) => cmd_tune_p_vs_z(args),
    }
}

/// Exit code for an error, per the contract in the command help.
pub fn exit_code(err: &UlptError) -> u8 {
    match err {
        UlptError::Config(_)
        | UlptError::Dimension(_)
        | UlptError::Domain(_)
        | UlptError::DegenerateFit(_)
        | UlptError::InfeasibleBudget(_) => 2,
        UlptError::Diverged { .. } => 3,
        UlptError::Io(_)
        | UlptError::BadMagic(_)
        | UlptError::UnsupportedVersion(_)
        | UlptError::CrcMismatch { .. }
        | UlptError::Truncated { .. }
        | UlptError::Format(_) => 4,
    }
}
