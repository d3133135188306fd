//! Execution state, the global memory buffer and state transitions.

use std::collections::HashSet;
use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{OperatorTemplate, StageSubgraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Social,
    Medical,
    Math,
    Logic,
    Code,
    Other,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Social => "social",
            Self::Medical => "medical",
            Self::Math => "math",
            Self::Logic => "logic",
            Self::Code => "code",
            Self::Other => "other",
        }
    }
}

/// How a final answer is compared against the gold target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradingMode {
    #[default]
    Exact,
    Numeric,
    Choice,
    WordList,
    Code,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    #[serde(default = "default_domain")]
    pub domain: Domain,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<String>,
    #[serde(default)]
    pub grading_mode: GradingMode,
}

fn default_domain() -> Domain {
    Domain::Other
}

impl TaskSpec {
    pub fn new(task_id: impl Into<String>, prompt: impl Into<String>) -> Self {
        Self {
            task_id: task_id.into(),
            domain: Domain::Other,
            prompt: prompt.into(),
            gold: None,
            grading_mode: GradingMode::Exact,
        }
    }

    pub fn with_gold(mut self, gold: impl Into<String>, mode: GradingMode) -> Self {
        self.gold = Some(gold.into());
        self.grading_mode = mode;
        self
    }

    pub fn with_domain(mut self, domain: Domain) -> Self {
        self.domain = domain;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// One successful operator output. Failed nodes never write memory; their
/// errors live in the stage outcome.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryRecord {
    pub key: String,
    pub producer_node: String,
    pub stage_index: usize,
    pub template: OperatorTemplate,
    pub content: String,
    pub token_usage: TokenUsage,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MemoryError {
    #[error("memory key `{0}` already exists; memory is append-only")]
    DuplicateKey(String),
}

/// Insertion-ordered, append-only key/record store.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryBuffer {
    records: IndexMap<String, MemoryRecord>,
}

impl MemoryBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, record: MemoryRecord) -> Result<(), MemoryError> {
        if self.records.contains_key(&record.key) {
            return Err(MemoryError::DuplicateKey(record.key));
        }
        self.records.insert(record.key.clone(), record);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&MemoryRecord> {
        self.records.get(key)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.records.contains_key(key)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records in insertion order.
    pub fn iter(&self) -> impl DoubleEndedIterator<Item = &MemoryRecord> {
        self.records.values()
    }

    pub fn key_set(&self) -> HashSet<String> {
        self.records.keys().cloned().collect()
    }

    pub fn records_for_stage(&self, stage_index: usize) -> impl DoubleEndedIterator<Item = &MemoryRecord> {
        self.records.values().filter(move |r| r.stage_index == stage_index)
    }
}

/// Memory key for an operator output: `s{stage}.{node}.{TEMPLATE}`.
pub fn gen_memory_key(stage_index: usize, node_id: &str, template: OperatorTemplate) -> String {
    format!("s{stage_index}.{node_id}.{}", template.name())
}

/// Inverse of [`gen_memory_key`].
pub fn parse_memory_key(key: &str) -> Option<(usize, String, OperatorTemplate)> {
    let mut parts = key.splitn(3, '.');
    let stage = parts.next()?.strip_prefix('s')?;
    if stage.is_empty() || !stage.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let node = parts.next()?;
    let template = parts.next()?.parse().ok()?;
    if !crate::graph::is_valid_node_id(node) {
        return None;
    }
    Some((stage.parse().ok()?, node.to_string(), template))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NodeErrorKind {
    ProviderFailure,
    UnresolvedKey,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeError {
    pub stage_index: usize,
    pub node_id: String,
    pub kind: NodeErrorKind,
    pub message: String,
}

impl fmt::Display for NodeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {} node {}: {:?}: {}", self.stage_index, self.node_id, self.kind, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum NodeResult {
    Stored { key: String },
    Failed { error: NodeError },
    /// TERMINATE node: control signal, no memory write.
    Signaled,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutedNode {
    pub node_id: String,
    pub template: OperatorTemplate,
    #[serde(flatten)]
    pub result: NodeResult,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StageOutcome {
    pub stage_index: usize,
    pub executed: Vec<ExecutedNode>,
    pub skipped: Vec<String>,
    pub terminate_signaled: bool,
}

impl StageOutcome {
    pub fn errors(&self) -> impl Iterator<Item = &NodeError> {
        self.executed.iter().filter_map(|n| match &n.result {
            NodeResult::Failed { error } => Some(error),
            _ => None,
        })
    }

    pub fn stored_keys(&self) -> impl Iterator<Item = &str> {
        self.executed.iter().filter_map(|n| match &n.result {
            NodeResult::Stored { key } => Some(key.as_str()),
            _ => None,
        })
    }

    /// True when at least one node ran to completion (stored or signaled).
    pub fn any_succeeded(&self) -> bool {
        self.executed.iter().any(|n| !matches!(n.result, NodeResult::Failed { .. }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopKind {
    DesignerTerminate,
    EndCondition,
    BudgetExhausted,
    UnrecoverableError,
}

impl StopKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::DesignerTerminate => "designer_terminate",
            Self::EndCondition => "end_condition",
            Self::BudgetExhausted => "budget_exhausted",
            Self::UnrecoverableError => "unrecoverable_error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StopReason {
    pub kind: StopKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl StopReason {
    pub fn new(kind: StopKind) -> Self {
        Self { kind, detail: None }
    }

    pub fn with_detail(kind: StopKind, detail: impl Into<String>) -> Self {
        Self { kind, detail: Some(detail.into()) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionState {
    pub task: TaskSpec,
    pub step: usize,
    pub plan_history: Vec<StageSubgraph>,
    pub stage_outcomes: Vec<StageOutcome>,
    pub last_errors: Vec<NodeError>,
    pub terminated: Option<StopReason>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StateError {
    #[error("STAGE_MISMATCH: graph stage {graph} does not match state step {step}")]
    StageMismatch { graph: usize, step: usize },
    #[error("state already terminated")]
    AlreadyTerminated,
}

impl ExecutionState {
    pub fn terminate(&mut self, reason: StopReason) -> Result<(), StateError> {
        if self.terminated.is_some() {
            return Err(StateError::AlreadyTerminated);
        }
        self.terminated = Some(reason);
        Ok(())
    }

    pub fn last_outcome(&self) -> Option<&StageOutcome> {
        self.stage_outcomes.last()
    }
}

pub fn init_state(task: TaskSpec) -> (ExecutionState, MemoryBuffer) {
    let state = ExecutionState {
        task,
        step: 0,
        plan_history: Vec::new(),
        stage_outcomes: Vec::new(),
        last_errors: Vec::new(),
        terminated: None,
    };
    (state, MemoryBuffer::new())
}

/// Records a finished stage. `last_errors` is replaced by this stage's node
/// errors, not accumulated.
pub fn update_state(
    mut state: ExecutionState,
    graph: StageSubgraph,
    outcome: StageOutcome,
) -> Result<ExecutionState, StateError> {
    if graph.stage_index != state.step || outcome.stage_index != state.step {
        return Err(StateError::StageMismatch { graph: graph.stage_index, step: state.step });
    }
    state.last_errors = outcome.errors().cloned().collect();
    state.plan_history.push(graph);
    state.stage_outcomes.push(outcome);
    state.step += 1;
    Ok(state)
}
