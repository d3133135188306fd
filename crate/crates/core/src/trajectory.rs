//! Trajectory records and their line-delimited log format.
//!
//! A log holds one or more runs. Each run is a `run_start` line, one `stage`
//! line per executed stage, and a `run_end` line.

use std::fmt::Write as _;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::providers::LedgerEntry;
use crate::state::{MemoryBuffer, MemoryError, MemoryRecord, NodeResult, StageOutcome, StopReason, TaskSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub stage_index: usize,
    /// Summary text the designer saw.
    pub summary: String,
    /// Canonical plan document.
    pub plan: String,
    pub plan_attempts: usize,
    pub outcome: StageOutcome,
    pub memory_delta: Vec<MemoryRecord>,
    pub usage: Vec<LedgerEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub task: TaskSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<String>,
    pub stages: Vec<StageLog>,
    pub final_answer: String,
    pub stop: StopReason,
    /// Graded outcome; `None` when the task has no gold or could not be graded.
    pub success: Option<bool>,
    pub usage: Vec<LedgerEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum LogLine {
    RunStart {
        task: TaskSpec,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        policy: Option<String>,
    },
    Stage(StageLog),
    RunEnd {
        final_answer: String,
        stop: StopReason,
        success: Option<bool>,
        usage: Vec<LedgerEntry>,
    },
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
}

pub fn write_log<W: Write>(traj: &TrajectoryRecord, out: &mut W) -> io::Result<()> {
    let mut emit = |line: &LogLine| -> io::Result<()> {
        serde_json::to_writer(&mut *out, line)?;
        out.write_all(b"\n")
    };
    emit(&LogLine::RunStart { task: traj.task.clone(), policy: traj.policy.clone() })?;
    for stage in &traj.stages {
        emit(&LogLine::Stage(stage.clone()))?;
    }
    emit(&LogLine::RunEnd {
        final_answer: traj.final_answer.clone(),
        stop: traj.stop.clone(),
        success: traj.success,
        usage: traj.usage.clone(),
    })
}

pub fn read_log<R: BufRead>(input: R) -> Result<Vec<TrajectoryRecord>, LogError> {
    let mut runs = Vec::new();
    let mut open: Option<TrajectoryRecord> = None;
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: &str| LogError::Format { line: lineno, message: message.to_string() };
        let parsed: LogLine = serde_json::from_str(&line).map_err(|e| err(&e.to_string()))?;
        match parsed {
            LogLine::RunStart { task, policy } => {
                if open.is_some() {
                    return Err(err("run_start before the previous run ended"));
                }
                open = Some(TrajectoryRecord {
                    task,
                    policy,
                    stages: Vec::new(),
                    final_answer: String::new(),
                    stop: StopReason::new(crate::state::StopKind::UnrecoverableError),
                    success: None,
                    usage: Vec::new(),
                });
            }
            LogLine::Stage(stage) => open.as_mut().ok_or_else(|| err("stage outside a run"))?.stages.push(stage),
            LogLine::RunEnd { final_answer, stop, success, usage } => {
                let mut run = open.take().ok_or_else(|| err("run_end without run_start"))?;
                run.final_answer = final_answer;
                run.stop = stop;
                run.success = success;
                run.usage = usage;
                runs.push(run);
            }
        }
    }
    if open.is_some() {
        return Err(LogError::Format { line: 0, message: "log ends inside a run".into() });
    }
    Ok(runs)
}

/// Rebuilds the memory buffer after each stage by applying the logged deltas.
/// Fails if a delta would overwrite an existing key.
pub fn replay_memory(traj: &TrajectoryRecord) -> Result<Vec<MemoryBuffer>, MemoryError> {
    let mut memory = MemoryBuffer::new();
    let mut snapshots = Vec::with_capacity(traj.stages.len());
    for stage in &traj.stages {
        for record in &stage.memory_delta {
            memory.insert(record.clone())?;
        }
        snapshots.push(memory.clone());
    }
    Ok(snapshots)
}

/// Human-readable rendering of one run.
pub fn render_replay(traj: &TrajectoryRecord) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "task {} ({})", traj.task.task_id, traj.task.domain.as_str());
    let _ = writeln!(out, "prompt: {}", traj.task.prompt);
    if let Some(policy) = &traj.policy {
        let _ = writeln!(out, "policy: {policy}");
    }
    for stage in &traj.stages {
        let _ = writeln!(out, "\n== stage {} (plan attempts: {}) ==", stage.stage_index, stage.plan_attempts);
        let _ = writeln!(out, "summary: {}", stage.summary);
        let _ = writeln!(out, "plan: {}", stage.plan);
        for node in &stage.outcome.executed {
            let status = match &node.result {
                NodeResult::Stored { key } => format!("stored {key}"),
                NodeResult::Failed { error } => format!("failed: {}", error.message),
                NodeResult::Signaled => "terminate".to_string(),
            };
            let _ = writeln!(out, "  {} [{}] {status}", node.node_id, node.template);
        }
        for id in &stage.outcome.skipped {
            let _ = writeln!(out, "  {id} skipped");
        }
        for record in &stage.memory_delta {
            let _ = writeln!(out, "  -- {} --\n{}", record.key, indent(&record.content));
        }
    }
    let tokens: u64 = traj.usage.iter().map(|e| e.prompt_tokens + e.completion_tokens).sum();
    let _ = writeln!(out, "\nstop: {}", traj.stop.kind.as_str());
    if let Some(detail) = &traj.stop.detail {
        let _ = writeln!(out, "detail: {detail}");
    }
    let _ = writeln!(out, "final answer: {}", traj.final_answer);
    let graded = match traj.success {
        Some(true) => "correct",
        Some(false) => "incorrect",
        None => "ungraded",
    };
    let _ = writeln!(out, "graded: {graded}");
    let _ = writeln!(out, "calls: {}, tokens: {tokens}", traj.usage.len());
    out
}

fn indent(text: &str) -> String {
    text.lines().map(|l| format!("    {l}")).collect::<Vec<_>>().join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::OperatorTemplate;
    use crate::state::{ExecutedNode, StopKind, TokenUsage};

    fn sample() -> TrajectoryRecord {
        let record = MemoryRecord {
            key: "s0.a.GENERATE_ANSWER".into(),
            producer_node: "a".into(),
            stage_index: 0,
            template: OperatorTemplate::GenerateAnswer,
            content: "4".into(),
            token_usage: TokenUsage { prompt_tokens: 3, completion_tokens: 1 },
        };
        TrajectoryRecord {
            task: TaskSpec::new("t1", "compute 2+2"),
            policy: Some("scripted".into()),
            stages: vec![StageLog {
                stage_index: 0,
                summary: "compute 2+2".into(),
                plan: r#"{"subgoal":"","nodes":[],"edges":[],"start":"a","end_conditions":[]}"#.into(),
                plan_attempts: 1,
                outcome: StageOutcome {
                    stage_index: 0,
                    executed: vec![ExecutedNode {
                        node_id: "a".into(),
                        template: OperatorTemplate::GenerateAnswer,
                        result: NodeResult::Stored { key: record.key.clone() },
                    }],
                    skipped: vec![],
                    terminate_signaled: false,
                },
                memory_delta: vec![record],
                usage: vec![],
            }],
            final_answer: "4".into(),
            stop: StopReason::new(StopKind::BudgetExhausted),
            success: Some(true),
            usage: vec![],
        }
    }

    #[test]
    fn log_round_trips() {
        let a = sample();
        let mut b = sample();
        b.task.task_id = "t2".into();
        b.success = None;
        let mut buf = Vec::new();
        write_log(&a, &mut buf).unwrap();
        write_log(&b, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert!(text.lines().next().unwrap().starts_with(r#"{"record":"run_start""#));
        assert_eq!(read_log(buf.as_slice()).unwrap(), vec![a, b]);
    }

    #[test]
    fn rejects_truncated_logs() {
        let mut buf = Vec::new();
        write_log(&sample(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let truncated: String = text.lines().take(2).map(|l| format!("{l}\n")).collect();
        assert!(read_log(truncated.as_bytes()).is_err());
        assert!(matches!(read_log("{oops".as_bytes()), Err(LogError::Format { line: 1, .. })));
    }

    #[test]
    fn replay_detects_overwrites() {
        let mut t = sample();
        assert_eq!(replay_memory(&t).unwrap()[0].len(), 1);
        let dup = t.stages[0].clone();
        t.stages.push(dup);
        assert!(replay_memory(&t).is_err());
    }

    #[test]
    fn replay_rendering_mentions_the_answer() {
        let text = render_replay(&sample());
        assert!(text.contains("final answer: 4"));
        assert!(text.contains("stored s0.a.GENERATE_ANSWER"));
    }
}
