//! Task files, answer grading, pass@k and benchmark sweeps.

use std::collections::{BTreeMap, HashSet};
use std::fmt::{self, Write as _};
use std::io::BufRead;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::sandbox::SandboxConfig;

use crate::config::ProviderSet;
use crate::executor::{run_task, RunConfig};
use crate::graph::OperatorTemplate;
use crate::planner::CallContext;
use crate::providers::{cost_report, CostSummary, LedgerEntry, Role, UsageLedger};
use crate::sandbox::{evaluate, extract_code, SandboxRequest, SandboxStatus};
use crate::state::{GradingMode, NodeResult, TaskSpec};
use crate::trajectory::TrajectoryRecord;

// ---------------------------------------------------------------------------
// Task files
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum TaskFileError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("SCHEMA({line}): {message}")]
    Schema { line: usize, message: String },
}

pub fn load_tasks(path: &Path) -> Result<Vec<TaskSpec>, TaskFileError> {
    read_tasks(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// One task per line; blank lines are ignored. Line numbers are 1-based.
pub fn read_tasks<R: BufRead>(input: R) -> Result<Vec<TaskSpec>, TaskFileError> {
    let mut tasks = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let schema = |message: String| TaskFileError::Schema { line: i + 1, message };
        let task: TaskSpec = serde_json::from_str(&line).map_err(|e| schema(e.to_string()))?;
        if task.task_id.is_empty() {
            return Err(schema("task_id is empty".into()));
        }
        if task.prompt.trim().is_empty() {
            return Err(schema("prompt is empty".into()));
        }
        if !ids.insert(task.task_id.clone()) {
            return Err(schema(format!("duplicate task_id `{}`", task.task_id)));
        }
        tasks.push(task);
    }
    Ok(tasks)
}

// ---------------------------------------------------------------------------
// Grading
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GradeError {
    #[error("task has no gold answer")]
    NoGold,
    #[error("UNGRADEABLE: {0}")]
    Ungradeable(String),
}

/// Trim, case-fold and collapse internal whitespace.
pub fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

pub fn grade_answer(answer: &str, task: &TaskSpec, sandbox: Option<&SandboxConfig>) -> Result<bool, GradeError> {
    let gold = task.gold.as_deref().ok_or(GradeError::NoGold)?;
    let ungradeable = |why: &str| GradeError::Ungradeable(why.to_string());
    match task.grading_mode {
        GradingMode::Exact => {
            if answer.trim().is_empty() {
                return Err(ungradeable("empty answer"));
            }
            Ok(normalize(answer) == normalize(gold))
        }
        GradingMode::Numeric => {
            let want = last_number(gold).ok_or_else(|| ungradeable("gold is not numeric"))?;
            let got = last_number(answer).ok_or_else(|| ungradeable("no number in answer"))?;
            Ok((got - want).abs() <= 1e-6)
        }
        GradingMode::Choice => {
            let got = last_choice(answer, gold).ok_or_else(|| ungradeable("no option in answer"))?;
            Ok(got == normalize(gold))
        }
        GradingMode::WordList => {
            let got = word_list(answer);
            if got.is_empty() {
                return Err(ungradeable("no words in answer"));
            }
            Ok(got == word_tokens(gold))
        }
        GradingMode::Code => {
            let cfg = sandbox.ok_or_else(|| ungradeable("no sandbox configured"))?;
            let tests: Vec<String> = gold.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect();
            let request = SandboxRequest {
                code: extract_code(answer),
                tests: (!tests.is_empty()).then_some(tests),
                timeout_s: cfg.timeout_s,
                max_output_bytes: cfg.max_output_bytes,
            };
            let response = evaluate(cfg, &request).map_err(|e| GradeError::Ungradeable(e.to_string()))?;
            Ok(response.status == SandboxStatus::Pass)
        }
    }
}

/// Value of the last number in `text`: integers, decimals, `a/b` fractions and
/// `1,234` thousands groups, with an optional leading minus.
pub fn last_number(text: &str) -> Option<f64> {
    let chars: Vec<char> = text.chars().collect();
    let mut found = None;
    let mut i = 0;
    while i < chars.len() {
        if !chars[i].is_ascii_digit() {
            i += 1;
            continue;
        }
        let negative = i > 0 && chars[i - 1] == '-' && (i < 2 || !chars[i - 2].is_alphanumeric());
        let (int_part, next) = scan_grouped_digits(&chars, i);
        i = next;
        let mut literal = int_part;
        if i + 1 < chars.len() && chars[i] == '.' && chars[i + 1].is_ascii_digit() {
            let start = i + 1;
            i = start;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            literal.push('.');
            literal.extend(&chars[start..i]);
        }
        let mut value: f64 = literal.parse().ok()?;
        if i + 1 < chars.len() && chars[i] == '/' && chars[i + 1].is_ascii_digit() {
            let start = i + 1;
            i = start;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            let denom: f64 = chars[start..i].iter().collect::<String>().parse().ok()?;
            if denom != 0.0 {
                value /= denom;
            }
        }
        found = Some(if negative { -value } else { value });
    }
    found
}

/// Digits starting at `start`, absorbing `,ddd` groups.
fn scan_grouped_digits(chars: &[char], start: usize) -> (String, usize) {
    let mut i = start;
    let mut out = String::new();
    while i < chars.len() && chars[i].is_ascii_digit() {
        out.push(chars[i]);
        i += 1;
    }
    while i + 3 < chars.len()
        && chars[i] == ','
        && chars[i + 1..i + 4].iter().all(char::is_ascii_digit)
        && chars.get(i + 4).is_none_or(|c| !c.is_ascii_digit())
    {
        out.extend(&chars[i + 1..i + 4]);
        i += 4;
    }
    (out, i)
}

/// Last option token. A single-letter gold selects letter options (standalone
/// uppercase letters, preferring those after the last "answer"); otherwise
/// the candidates are yes/no/maybe and the gold word itself.
fn last_choice(answer: &str, gold: &str) -> Option<String> {
    let gold = normalize(gold);
    let tokens = |s: &str| -> Vec<String> {
        s.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_string).collect()
    };
    if gold.chars().count() == 1 && gold.chars().all(|c| c.is_ascii_alphabetic()) {
        let is_option = |t: &String| t.len() == 1 && t.chars().all(|c| c.is_ascii_uppercase());
        let tail = answer.to_ascii_lowercase().rfind("answer").map(|i| &answer[i + "answer".len()..]);
        if let Some(pick) = tail.and_then(|t| tokens(t).into_iter().rev().find(is_option)) {
            return Some(pick.to_lowercase());
        }
        return tokens(answer).into_iter().rev().find(is_option).map(|t| t.to_lowercase());
    }
    tokens(&answer.to_lowercase())
        .into_iter()
        .rev()
        .find(|t| matches!(t.as_str(), "yes" | "no" | "maybe") || *t == gold)
}

fn word_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Tokens of the last nonempty line, minus a short `Label:` prefix.
fn word_list(answer: &str) -> Vec<String> {
    let Some(line) = answer.lines().rev().map(|l| l.replace('*', "")).find(|l| !l.trim().is_empty()) else {
        return Vec::new();
    };
    let body = match line.split_once(':') {
        Some((label, rest)) if label.split_whitespace().count() <= 3 => rest.to_string(),
        _ => line,
    };
    word_tokens(&body)
}

// ---------------------------------------------------------------------------
// pass@k
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("DOMAIN: pass@k needs 0 <= c <= n and 1 <= k <= n (n={n}, c={c}, k={k})")]
pub struct DomainError {
    pub n: usize,
    pub c: usize,
    pub k: usize,
}

/// Unbiased estimate of the chance that at least one of `k` draws without
/// replacement from `n` samples (`c` correct) is correct.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64, DomainError> {
    if c > n || k == 0 || k > n {
        return Err(DomainError { n, c, k });
    }
    if n - c < k {
        return Ok(1.0);
    }
    let miss: f64 = (n - c + 1..=n).map(|i| 1.0 - k as f64 / i as f64).product();
    Ok(1.0 - miss)
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Dyflow,
    Vanilla,
    Cot,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Dyflow => "dyflow",
            Self::Vanilla => "vanilla",
            Self::Cot => "cot",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dyflow" => Ok(Self::Dyflow),
            "vanilla" => Ok(Self::Vanilla),
            "cot" => Ok(Self::Cot),
            other => Err(format!("unknown method `{other}` (expected dyflow, vanilla or cot)")),
        }
    }
}

pub const COT_PREFIX: &str = "Let's think step by step.\n\n";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub task_id: String,
    pub domain: String,
    pub sample_index: usize,
    pub correct: bool,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub usage: Vec<LedgerEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub method: Method,
    pub tasks: usize,
    pub samples: usize,
    /// Mean correctness of sample 0.
    pub accuracy: f64,
    pub per_domain: BTreeMap<String, f64>,
    pub pass_at_k: BTreeMap<usize, f64>,
    pub totals: CostSummary,
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub run: RunConfig,
    pub providers: ProviderSet,
    pub samples: usize,
    /// Largest k reported; defaults to `samples`.
    pub k_max: Option<usize>,
    pub workers: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRun {
    pub report: BenchReport,
    /// Sorted by (task_id, sample_index).
    pub outcomes: Vec<SampleOutcome>,
    /// Dyflow method only, in outcome order.
    pub trajectories: Vec<TrajectoryRecord>,
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("samples must be at least 1")]
    NoSamples,
    #[error("k must be between 1 and samples")]
    BadK,
    #[error("worker pool: {0}")]
    Pool(String),
}

fn run_sample(task: &TaskSpec, index: usize, method: Method, cfg: &BenchConfig) -> (SampleOutcome, Option<TrajectoryRecord>) {
    let mut run_cfg = cfg.run.clone();
    run_cfg.sampling.seed = Some(cfg.seed.wrapping_add(index as u64));
    let mut outcome = SampleOutcome {
        task_id: task.task_id.clone(),
        domain: task.domain.as_str().to_string(),
        sample_index: index,
        correct: false,
        answer: String::new(),
        error: None,
        usage: Vec::new(),
    };
    let providers = match cfg.providers.build() {
        Ok(p) => p,
        Err(e) => {
            outcome.error = Some(e.to_string());
            return (outcome, None);
        }
    };

    let mut trajectory = None;
    match method {
        Method::Dyflow => {
            let result = run_task(task.clone(), &run_cfg, &providers);
            outcome.answer = result.final_answer;
            outcome.usage = result.usage;
            trajectory = Some(result.trajectory);
        }
        Method::Vanilla | Method::Cot => {
            let ledger = UsageLedger::new();
            let ctx = CallContext { ledger: &ledger, sampling: &run_cfg.sampling };
            let user = match method {
                Method::Cot => format!("{COT_PREFIX}{}", task.prompt),
                _ => task.prompt.clone(),
            };
            match ctx.call(providers.executor.as_ref(), Role::Executor, "", &user) {
                Ok(r) => outcome.answer = r.text,
                Err(e) => outcome.error = Some(e.to_string()),
            }
            outcome.usage = ledger.entries();
        }
    }
    match grade_answer(&outcome.answer, task, run_cfg.sandbox.as_ref()) {
        Ok(correct) => outcome.correct = correct,
        Err(e) => {
            outcome.error.get_or_insert_with(|| e.to_string());
        }
    }
    (outcome, trajectory)
}

/// Runs every task `samples` times on a bounded worker pool. Task failures
/// count as incorrect samples; the sweep itself never aborts.
pub fn run_benchmark(tasks: &[TaskSpec], method: Method, cfg: &BenchConfig) -> Result<BenchRun, BenchError> {
    if cfg.samples == 0 {
        return Err(BenchError::NoSamples);
    }
    let k_max = cfg.k_max.unwrap_or(cfg.samples);
    if k_max == 0 || k_max > cfg.samples {
        return Err(BenchError::BadK);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| BenchError::Pool(e.to_string()))?;
    let jobs: Vec<(&TaskSpec, usize)> =
        tasks.iter().flat_map(|t| (0..cfg.samples).map(move |i| (t, i))).collect();
    let mut results: Vec<(SampleOutcome, Option<TrajectoryRecord>)> =
        pool.install(|| jobs.par_iter().map(|(t, i)| run_sample(t, *i, method, cfg)).collect());
    results.sort_by(|a, b| (&a.0.task_id, a.0.sample_index).cmp(&(&b.0.task_id, b.0.sample_index)));

    let (outcomes, trajectories): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let report = aggregate(method, &outcomes, cfg.samples, k_max, &cfg.providers.prices());
    Ok(BenchRun { report, outcomes, trajectories: trajectories.into_iter().flatten().collect() })
}

/// Folds sample outcomes into a report. Tasks are grouped by id, so the input
/// order does not matter.
pub fn aggregate(
    method: Method,
    outcomes: &[SampleOutcome],
    samples: usize,
    k_max: usize,
    prices: &BTreeMap<String, crate::providers::Price>,
) -> BenchReport {
    struct TaskTally<'a> {
        domain: &'a str,
        first_correct: bool,
        correct: usize,
    }
    let mut per_task: BTreeMap<&str, TaskTally> = BTreeMap::new();
    for o in outcomes {
        let tally = per_task
            .entry(o.task_id.as_str())
            .or_insert(TaskTally { domain: &o.domain, first_correct: false, correct: 0 });
        if o.correct {
            tally.correct += 1;
            if o.sample_index == 0 {
                tally.first_correct = true;
            }
        }
    }
    let n_tasks = per_task.len();
    let mean = |xs: &mut dyn Iterator<Item = f64>| {
        let (sum, count) = xs.fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
        if count == 0 { 0.0 } else { sum / count as f64 }
    };
    let accuracy = mean(&mut per_task.values().map(|t| f64::from(u8::from(t.first_correct))));
    let mut by_domain: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for t in per_task.values() {
        by_domain.entry(t.domain.to_string()).or_default().push(f64::from(u8::from(t.first_correct)));
    }
    let per_domain = by_domain.into_iter().map(|(d, xs)| (d, mean(&mut xs.into_iter()))).collect();
    let pass_at_k = (1..=k_max)
        .map(|k| {
            let rate = mean(
                &mut per_task.values().map(|t| pass_at_k(samples, t.correct.min(samples), k).unwrap_or(0.0)),
            );
            (k, rate)
        })
        .collect();
    let usage: Vec<LedgerEntry> = outcomes.iter().flat_map(|o| o.usage.iter().cloned()).collect();
    BenchReport {
        method,
        tasks: n_tasks,
        samples,
        accuracy,
        per_domain,
        pass_at_k,
        totals: cost_report(&usage, prices),
    }
}

pub fn render_report_table(report: &BenchReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "method {}  tasks {}  samples {}", report.method, report.tasks, report.samples);
    let _ = writeln!(out, "{:<12} {:>9}", "domain", "accuracy");
    for (domain, acc) in &report.per_domain {
        let _ = writeln!(out, "{:<12} {:>8.2}%", domain, acc * 100.0);
    }
    let _ = writeln!(out, "{:<12} {:>8.2}%", "overall", report.accuracy * 100.0);
    for (k, rate) in &report.pass_at_k {
        let _ = writeln!(out, "pass@{k:<7} {:>8.2}%", rate * 100.0);
    }
    let t = &report.totals.total;
    let cost = t.cost_usd.map_or("unknown".to_string(), |c| format!("${c:.4}"));
    let _ = writeln!(out, "calls {}  prompt tokens {}  completion tokens {}  cost {cost}", t.calls, t.prompt_tokens, t.completion_tokens);
    out
}

// ---------------------------------------------------------------------------
// Operator usage
// ---------------------------------------------------------------------------

pub fn operator_usage_histogram<'a, I>(trajectories: I) -> BTreeMap<OperatorTemplate, u64>
where
    I: IntoIterator<Item = &'a TrajectoryRecord>,
{
    let mut counts: BTreeMap<OperatorTemplate, u64> = OperatorTemplate::ALL.iter().map(|t| (*t, 0)).collect();
    for traj in trajectories {
        for stage in &traj.stages {
            for node in &stage.outcome.executed {
                *counts.entry(node.template).or_default() += 1;
            }
        }
    }
    counts
}

/// Per-domain histograms.
pub fn operator_usage_by_domain<'a, I>(trajectories: I) -> BTreeMap<String, BTreeMap<OperatorTemplate, u64>>
where
    I: IntoIterator<Item = &'a TrajectoryRecord>,
{
    let mut groups: BTreeMap<String, Vec<&TrajectoryRecord>> = BTreeMap::new();
    for t in trajectories {
        groups.entry(t.task.domain.as_str().to_string()).or_default().push(t);
    }
    groups.into_iter().map(|(d, ts)| (d, operator_usage_histogram(ts))).collect()
}

/// Number of executed nodes that ended in a given state, for quick summaries.
pub fn executed_nodes(traj: &TrajectoryRecord) -> (usize, usize) {
    let mut ok = 0;
    let mut failed = 0;
    for stage in &traj.stages {
        for node in &stage.outcome.executed {
            match node.result {
                NodeResult::Failed { .. } => failed += 1,
                _ => ok += 1,
            }
        }
    }
    (ok, failed)
}
