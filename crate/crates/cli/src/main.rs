//! `stageflow` command line.
//!
//! Machine-readable output is JSON lines on stdout; `--pretty` adds human
//! tables on stderr. Exit codes: 0 ok, 1 failure, 2 unrecoverable run,
//! 3 budget exhausted without an answer, 64 bad flags.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use stageflow::bench::{load_tasks, render_report_table, run_benchmark, BenchConfig, Method};
use stageflow::export::{export_kto, export_sft, file_digest, kto_manifest, manifest_path, sft_manifest, write_manifest};
use stageflow::graph::{parse_plan, validate_subgraph};
use stageflow::providers::{cost_report, LedgerEntry};
use stageflow::theory::theory_sweep;
use stageflow::trajectory::{read_log, render_replay, write_log, TrajectoryRecord};
use stageflow::{run_task, EngineConfig, StopKind, TaskSpec};

const EXIT_FAILURE: u8 = 1;
const EXIT_UNRECOVERABLE: u8 = 2;
const EXIT_BUDGET_EMPTY: u8 = 3;
const EXIT_USAGE: u8 = 64;

#[derive(Parser, Debug)]
#[command(name = "stageflow", version, about = "Staged workflow engine: run, benchmark, export and analyze")]
struct Cli {
    /// Engine config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for sampling and dataset downsampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Human-readable tables on stderr.
    #[arg(long, global = true)]
    pretty: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one task end to end.
    Run(RunArgs),
    /// Run a method over a task file and report accuracy and pass@k.
    Bench(BenchArgs),
    /// Write (summary, plan) pairs from successful runs.
    ExportSft(ExportArgs),
    /// Write class-balanced preference-labeled pairs.
    ExportKto(ExportArgs),
    /// Render stored trajectories for reading.
    Replay(LogArgs),
    /// Parse and validate a plan document.
    ValidatePlan(ValidateArgs),
    /// Check the planning bounds on random toy decision processes.
    TheorySweep(SweepArgs),
    /// Token and cost totals over trajectory logs.
    Cost(LogArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Task file (JSON lines); the first task runs unless --task-id is given.
    #[arg(long, conflicts_with = "prompt")]
    tasks: Option<PathBuf>,
    #[arg(long, requires = "tasks")]
    task_id: Option<String>,
    /// Ad-hoc task prompt.
    #[arg(long)]
    prompt: Option<String>,
    /// Override the stage budget.
    #[arg(long)]
    t_max: Option<usize>,
    /// Append the trajectory log here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    tasks: PathBuf,
    #[arg(long, default_value = "dyflow")]
    method: Method,
    #[arg(long, default_value_t = 1)]
    samples: usize,
    /// Largest k for pass@k (defaults to --samples).
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 4)]
    workers: usize,
    #[arg(long)]
    t_max: Option<usize>,
    /// Trajectory log for dyflow runs.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    /// Trajectory logs to read.
    #[arg(long, required = true, num_args = 1..)]
    logs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct LogArgs {
    #[arg(long, required = true, num_args = 1..)]
    logs: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[arg(long)]
    plan: PathBuf,
    /// Stage index the plan is validated for.
    #[arg(long, default_value_t = 0)]
    stage: usize,
    /// Memory keys available at stage start.
    #[arg(long = "memory-key")]
    memory_keys: Vec<String>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long, default_value_t = 1000)]
    instances: usize,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Failure(String),
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Failure(e.to_string())
    }
}

type CmdResult = Result<u8, CliError>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Run(args) => cmd_run(&cli, args),
        Command::Bench(args) => cmd_bench(&cli, args),
        Command::ExportSft(args) => cmd_export(&cli, args, false),
        Command::ExportKto(args) => cmd_export(&cli, args, true),
        Command::Replay(args) => cmd_replay(args),
        Command::ValidatePlan(args) => cmd_validate(&cli, args),
        Command::TheorySweep(args) => cmd_sweep(&cli, args),
        Command::Cost(args) => cmd_cost(&cli, args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(CliError::Failure(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}

fn emit(value: &serde_json::Value) -> Result<(), CliError> {
    let mut out = io::stdout().lock();
    serde_json::to_writer(&mut out, value).map_err(|e| CliError::Failure(e.to_string()))?;
    out.write_all(b"\n")?;
    Ok(())
}

fn load_config(cli: &Cli) -> Result<EngineConfig, CliError> {
    let path = cli.config.as_ref().ok_or_else(|| CliError::Usage("--config is required".into()))?;
    let mut cfg = EngineConfig::load(path).map_err(|e| CliError::Failure(e.to_string()))?;
    if let Some(seed) = cli.seed {
        cfg.run.sampling.seed = Some(seed);
    }
    Ok(cfg)
}

fn apply_t_max(cfg: &mut EngineConfig, t_max: Option<usize>) -> Result<(), CliError> {
    if let Some(t) = t_max {
        if t == 0 {
            return Err(CliError::Usage("--t-max must be at least 1".into()));
        }
        cfg.planner.max_stages = t;
    }
    Ok(())
}

fn load_task_file(path: &Path) -> Result<Vec<TaskSpec>, CliError> {
    load_tasks(path).map_err(|e| CliError::Failure(format!("{}: {e}", path.display())))
}

fn read_logs(paths: &[PathBuf]) -> Result<Vec<TrajectoryRecord>, CliError> {
    let mut all = Vec::new();
    for path in paths {
        let file = File::open(path).map_err(|e| CliError::Failure(format!("{}: {e}", path.display())))?;
        all.extend(read_log(BufReader::new(file)).map_err(|e| CliError::Failure(format!("{}: {e}", path.display())))?);
    }
    Ok(all)
}

fn append_logs<'a>(path: &Path, trajs: impl IntoIterator<Item = &'a TrajectoryRecord>) -> Result<(), CliError> {
    let file = File::options().create(true).append(true).open(path)?;
    let mut out = BufWriter::new(file);
    for t in trajs {
        write_log(t, &mut out)?;
    }
    out.flush()?;
    Ok(())
}

fn cmd_run(cli: &Cli, args: &RunArgs) -> CmdResult {
    let mut cfg = load_config(cli)?;
    apply_t_max(&mut cfg, args.t_max)?;
    let task = match (&args.tasks, &args.prompt) {
        (Some(path), _) => {
            let tasks = load_task_file(path)?;
            match &args.task_id {
                Some(id) => tasks.into_iter().find(|t| &t.task_id == id),
                None => tasks.into_iter().next(),
            }
            .ok_or_else(|| CliError::Failure("no matching task in the task file".into()))?
        }
        (None, Some(prompt)) if !prompt.trim().is_empty() => TaskSpec::new("adhoc", prompt.clone()),
        _ => return Err(CliError::Usage("give --tasks or a nonempty --prompt".into())),
    };
    let providers = cfg.providers.build().map_err(|e| CliError::Failure(e.to_string()))?;
    let result = run_task(task, &cfg.run_config(), &providers);
    if let Some(out) = &args.out {
        append_logs(out, [&result.trajectory])?;
    }
    let traj = &result.trajectory;
    emit(&json!({
        "task_id": traj.task.task_id,
        "final_answer": result.final_answer,
        "stop": result.stop,
        "stages": traj.stages.len(),
        "success": traj.success,
        "calls": result.usage.len(),
    }))?;
    if cli.pretty {
        eprint!("{}", render_replay(traj));
    }
    Ok(match result.stop.kind {
        StopKind::UnrecoverableError => EXIT_UNRECOVERABLE,
        StopKind::BudgetExhausted if result.final_answer.is_empty() => EXIT_BUDGET_EMPTY,
        _ => 0,
    })
}

fn cmd_bench(cli: &Cli, args: &BenchArgs) -> CmdResult {
    let mut cfg = load_config(cli)?;
    apply_t_max(&mut cfg, args.t_max)?;
    if args.samples == 0 {
        return Err(CliError::Usage("--samples must be at least 1".into()));
    }
    if args.k.is_some_and(|k| k == 0 || k > args.samples) {
        return Err(CliError::Usage("--k must be between 1 and --samples".into()));
    }
    let tasks = load_task_file(&args.tasks)?;
    let bench_cfg = BenchConfig {
        run: cfg.run_config(),
        providers: cfg.providers.clone(),
        samples: args.samples,
        k_max: args.k,
        workers: args.workers,
        seed: cli.seed.unwrap_or(0),
    };
    let run = run_benchmark(&tasks, args.method, &bench_cfg).map_err(|e| CliError::Failure(e.to_string()))?;
    if let Some(out) = &args.out {
        append_logs(out, &run.trajectories)?;
    }
    for o in &run.outcomes {
        let mut line = serde_json::to_value(o).map_err(|e| CliError::Failure(e.to_string()))?;
        line["record"] = json!("sample");
        emit(&line)?;
    }
    let mut report = serde_json::to_value(&run.report).map_err(|e| CliError::Failure(e.to_string()))?;
    report["record"] = json!("report");
    emit(&report)?;
    if cli.pretty {
        eprint!("{}", render_report_table(&run.report));
    }
    Ok(0)
}

fn cmd_export(cli: &Cli, args: &ExportArgs, kto: bool) -> CmdResult {
    let trajs = read_logs(&args.logs)?;
    let sources = args.logs.iter().map(|p| file_digest(p)).collect::<io::Result<Vec<_>>>()?;
    let manifest = if kto {
        let seed = cli.seed.unwrap_or(0);
        let counts = export_kto(&trajs, &args.out, seed)?;
        emit(&json!({
            "positives": counts.positives,
            "negatives": counts.negatives,
            "empty_class": counts.empty_class,
            "out": args.out,
        }))?;
        if let Some(class) = counts.empty_class {
            eprintln!("EMPTY_CLASS: no {class:?} examples; nothing written");
        }
        kto_manifest(counts, seed, sources)
    } else {
        let written = export_sft(&trajs, &args.out)?;
        emit(&json!({ "examples": written, "out": args.out }))?;
        sft_manifest(written, sources)
    };
    write_manifest(&manifest, &manifest_path(&args.out))?;
    Ok(0)
}

fn cmd_replay(args: &LogArgs) -> CmdResult {
    let trajs = read_logs(&args.logs)?;
    let mut out = io::stdout().lock();
    for (i, t) in trajs.iter().enumerate() {
        if i > 0 {
            writeln!(out)?;
        }
        write!(out, "{}", render_replay(t))?;
    }
    Ok(0)
}

fn cmd_validate(cli: &Cli, args: &ValidateArgs) -> CmdResult {
    let raw = std::fs::read_to_string(&args.plan)
        .map_err(|e| CliError::Failure(format!("{}: {e}", args.plan.display())))?;
    let graph = match parse_plan(&raw, args.stage) {
        Ok(g) => g,
        Err(e) => {
            emit(&json!({ "valid": false, "error": { "code": e.code(), "message": e.to_string() } }))?;
            return Ok(EXIT_FAILURE);
        }
    };
    let report = validate_subgraph(&graph, &args.memory_keys.iter().cloned().collect());
    emit(&serde_json::to_value(&report).map_err(|e| CliError::Failure(e.to_string()))?)?;
    if cli.pretty || report.valid {
        eprintln!("{}", if report.valid { "valid".to_string() } else { report.render() });
    }
    Ok(if report.valid { 0 } else { EXIT_FAILURE })
}

fn cmd_sweep(cli: &Cli, args: &SweepArgs) -> CmdResult {
    let summary = theory_sweep(args.instances, cli.seed.unwrap_or(0));
    emit(&serde_json::to_value(&summary).map_err(|e| CliError::Failure(e.to_string()))?)?;
    if cli.pretty {
        eprintln!(
            "instances {}  never-worse violations {}  bound violations {}  strict gaps {}  max gap {:.6}  max bound {:.6}",
            summary.instances,
            summary.never_worse_violations,
            summary.bound_violations,
            summary.strict_gaps,
            summary.max_gap,
            summary.max_bound
        );
    }
    Ok(if summary.never_worse_violations + summary.bound_violations == 0 { 0 } else { EXIT_FAILURE })
}

fn cmd_cost(cli: &Cli, args: &LogArgs) -> CmdResult {
    let prices = match &cli.config {
        Some(_) => load_config(cli)?.providers.prices(),
        None => BTreeMap::new(),
    };
    let ledger: Vec<LedgerEntry> = read_logs(&args.logs)?.into_iter().flat_map(|t| t.usage).collect();
    let summary = cost_report(&ledger, &prices);
    emit(&serde_json::to_value(&summary).map_err(|e| CliError::Failure(e.to_string()))?)?;
    if cli.pretty {
        for (tag, line) in &summary.per_tag {
            eprintln!(
                "{:<11} calls {:>5}  in {:>9}  out {:>9}  cost {}",
                tag.as_str(),
                line.calls,
                line.prompt_tokens,
                line.completion_tokens,
                line.cost_usd.map_or("unknown".into(), |c| format!("${c:.4}"))
            );
        }
    }
    Ok(0)
}
