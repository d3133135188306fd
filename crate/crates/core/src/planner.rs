//! State summarization and the designer call: summarize the state, request a
//! stage subgraph, then parse, validate and repair it.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{parse_plan, validate_subgraph, StageSubgraph, ValidationReport};
use crate::prompts::{render_designer_prompt, render_summarizer_prompt};
use crate::providers::{ChatProvider, ChatRequest, CompletionResult, ProviderError, Role, Sampling, UsageLedger};
use crate::state::{ExecutionState, MemoryBuffer, NodeResult};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateSummary {
    pub text: String,
    pub char_budget: usize,
    pub truncated: bool,
}

impl StateSummary {
    pub fn bounded(text: String, char_budget: usize) -> Self {
        if text.chars().count() <= char_budget {
            return Self { text, char_budget, truncated: false };
        }
        Self { text: text.chars().take(char_budget).collect(), char_budget, truncated: true }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    /// Stage budget; every run stops after at most this many stages.
    pub max_stages: usize,
    /// Extra designer attempts after a rejected plan.
    pub parse_retries: usize,
    pub summary_char_budget: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self { max_stages: 6, parse_retries: 2, summary_char_budget: 4000 }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_stages == 0 {
            return Err("max_stages must be at least 1".into());
        }
        Ok(())
    }
}

/// Ledger and decoding settings shared by every model call of one run.
#[derive(Clone, Copy)]
pub struct CallContext<'a> {
    pub ledger: &'a UsageLedger,
    pub sampling: &'a Sampling,
}

impl CallContext<'_> {
    /// Calls `provider` and records the usage of successful calls.
    pub fn call(
        &self,
        provider: &dyn ChatProvider,
        tag: Role,
        system: &str,
        user: &str,
    ) -> Result<CompletionResult, ProviderError> {
        let request = ChatRequest::new(tag, system, user).with_sampling(self.sampling);
        let result = provider.complete(&request)?;
        self.ledger.record(tag, provider.model_name(), &result);
        Ok(result)
    }
}

/// Condenses the state for the designer. The first step sees the task prompt
/// alone; later steps go through the summarizer if one is configured and fall
/// back to a structural digest otherwise (or when it fails).
pub fn summarize(
    state: &ExecutionState,
    memory: &MemoryBuffer,
    cfg: &PlannerConfig,
    summarizer: Option<&dyn ChatProvider>,
    ctx: CallContext<'_>,
) -> StateSummary {
    let budget = cfg.summary_char_budget;
    if state.step == 0 {
        return StateSummary::bounded(state.task.prompt.clone(), budget);
    }
    let digest = structural_digest(state, memory);
    if let Some(provider) = summarizer {
        if let Ok(result) = ctx.call(provider, Role::Summarizer, "", &render_summarizer_prompt(&digest)) {
            return StateSummary::bounded(result.text, budget);
        }
    }
    StateSummary::bounded(digest, budget)
}

/// Task, stage history, latest errors, every memory key, then the latest
/// stage's records newest first. Truncation eats the oldest content first.
pub fn structural_digest(state: &ExecutionState, memory: &MemoryBuffer) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Task:\n{}\n", state.task.prompt);

    let _ = writeln!(out, "Stage history:");
    for (graph, outcome) in state.plan_history.iter().zip(&state.stage_outcomes) {
        let nodes: Vec<String> = outcome
            .executed
            .iter()
            .map(|n| {
                let status = match &n.result {
                    NodeResult::Stored { .. } => "ok",
                    NodeResult::Failed { .. } => "failed",
                    NodeResult::Signaled => "signaled",
                };
                format!("{}({})={status}", n.node_id, n.template)
            })
            .chain(outcome.skipped.iter().map(|id| format!("{id}=skipped")))
            .collect();
        let _ = writeln!(out, "- stage {}: {} [{}]", graph.stage_index, graph.subgoal, nodes.join(", "));
    }

    if !state.last_errors.is_empty() {
        let _ = writeln!(out, "\nErrors in the last stage:");
        for e in &state.last_errors {
            let _ = writeln!(out, "- {e}");
        }
    }

    if !memory.is_empty() {
        let _ = writeln!(out, "\nMemory keys:");
        for r in memory.iter() {
            let _ = writeln!(out, "- {}", r.key);
        }
    }

    if let Some(last) = state.stage_outcomes.last() {
        let _ = writeln!(out, "\nLatest results (newest first):");
        for r in memory.records_for_stage(last.stage_index).rev() {
            let _ = writeln!(out, "[{}]\n{}\n", r.key, r.content);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedStage {
    pub graph: StageSubgraph,
    /// Designer calls spent, including the accepted one.
    pub attempts: usize,
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("PLAN_REJECTED after {attempts} attempts: {reason}")]
    Rejected { attempts: usize, reason: String, last_report: Option<ValidationReport> },
    #[error("stage {step} is beyond the stage budget {max_stages}")]
    OverBudget { step: usize, max_stages: usize },
}

/// Asks the designer for the next stage subgraph. Rejected output (parse
/// error, invalid graph or failed call) is fed back with the violations for up
/// to `parse_retries` more attempts.
pub fn plan_stage(
    summary: &StateSummary,
    step: usize,
    cfg: &PlannerConfig,
    designer: &dyn ChatProvider,
    memory_keys: &HashSet<String>,
    ctx: CallContext<'_>,
) -> Result<PlannedStage, PlanError> {
    if step >= cfg.max_stages {
        return Err(PlanError::OverBudget { step, max_stages: cfg.max_stages });
    }
    let base_prompt = render_designer_prompt(&summary.text);
    let mut feedback: Option<String> = None;
    let mut last_report = None;
    let mut reason = String::new();

    for attempt in 1..=cfg.parse_retries + 1 {
        let prompt = match &feedback {
            Some(f) => format!(
                "{base_prompt}\n\nYour previous plan was rejected:\n{f}\nOutput exactly one corrected plan document."
            ),
            None => base_prompt.clone(),
        };
        let raw = match ctx.call(designer, Role::Designer, "", &prompt) {
            Ok(r) => r.text,
            Err(e) => {
                reason = e.to_string();
                feedback = Some(format!("- PROVIDER: {e}"));
                continue;
            }
        };
        match parse_plan(&raw, step) {
            Err(e) => {
                reason = e.to_string();
                feedback = Some(format!("- {}", e));
                last_report = None;
            }
            Ok(graph) => {
                let report = validate_subgraph(&graph, memory_keys);
                if report.valid {
                    return Ok(PlannedStage { graph, attempts: attempt, raw });
                }
                reason = report.render();
                feedback = Some(report.render());
                last_report = Some(report);
            }
        }
    }
    Err(PlanError::Rejected { attempts: cfg.parse_retries + 1, reason, last_report })
}
