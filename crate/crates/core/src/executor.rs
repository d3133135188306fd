//! Stage execution, termination checks and the per-task run loop.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bench::{grade_answer, SandboxConfig};
use crate::graph::{serialize_plan, topological_order, EndConditionKind, OperatorTemplate, StageSubgraph};
use crate::planner::{plan_stage, summarize, CallContext, PlannerConfig};
use crate::prompts::render_operator_prompt;
use crate::providers::{ChatProvider, LedgerEntry, Role, Sampling, UsageLedger};
use crate::state::{
    init_state, update_state, ExecutedNode, ExecutionState, MemoryBuffer, MemoryRecord, NodeError, NodeErrorKind,
    NodeResult, StageOutcome, StopKind, StopReason, TaskSpec, TokenUsage,
};
use crate::trajectory::{StageLog, TrajectoryRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerExtraction {
    /// Most recent ORGANIZE_SOLUTION output, else the last stored output.
    #[default]
    LastOrganize,
    LastNode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeFailurePolicy {
    #[default]
    SkipDependents,
    AbortStage,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub planner: PlannerConfig,
    pub answer_extraction: AnswerExtraction,
    pub node_failure_policy: NodeFailurePolicy,
    pub sampling: Sampling,
    /// Used to grade code-mode tasks; other modes need no sandbox.
    pub sandbox: Option<SandboxConfig>,
    /// Free-text provenance of the designer policy, copied into trajectories.
    pub policy: Option<String>,
}

/// Live provider handles for one run.
#[derive(Clone)]
pub struct RunProviders {
    pub designer: Arc<dyn ChatProvider>,
    pub executor: Arc<dyn ChatProvider>,
    pub summarizer: Option<Arc<dyn ChatProvider>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub final_answer: String,
    pub stop: StopReason,
    pub trajectory: TrajectoryRecord,
    pub usage: Vec<LedgerEntry>,
}

/// Operator context: the task, then each resolved input labeled by its key.
fn assemble_context(task_prompt: &str, inputs: &[(&str, &str)]) -> String {
    let mut out = format!("[task]\n{task_prompt}");
    for (key, content) in inputs {
        out.push_str(&format!("\n\n[{key}]\n{content}"));
    }
    out
}

/// Runs one validated stage in topological order, writing outputs to memory.
/// Node failures are recorded in the outcome; they never abort the run.
pub fn execute_stage(
    graph: &StageSubgraph,
    state: &ExecutionState,
    memory: &mut MemoryBuffer,
    policy: NodeFailurePolicy,
    executor: &dyn ChatProvider,
    ctx: CallContext<'_>,
) -> StageOutcome {
    let mut outcome = StageOutcome { stage_index: graph.stage_index, ..Default::default() };
    let order = match topological_order(graph) {
        Ok(order) => order,
        Err(_) => {
            outcome.skipped = graph.nodes.iter().map(|n| n.node_id.clone()).collect();
            return outcome;
        }
    };
    let mut skip: BTreeSet<String> = BTreeSet::new();
    let mut aborted = false;

    for id in order {
        if aborted || skip.contains(&id) {
            outcome.skipped.push(id);
            continue;
        }
        let node = graph.node(&id).expect("order holds graph nodes");
        if node.template == OperatorTemplate::Terminate {
            outcome.terminate_signaled = true;
            outcome.executed.push(ExecutedNode { node_id: id, template: node.template, result: NodeResult::Signaled });
            continue;
        }

        let failure = |kind, message: String| NodeError { stage_index: graph.stage_index, node_id: id.clone(), kind, message };
        let result = match node.input_keys.iter().find(|k| !memory.contains(k)) {
            Some(missing) => Err(failure(NodeErrorKind::UnresolvedKey, format!("memory key `{missing}` is absent"))),
            None => {
                let inputs: Vec<(&str, &str)> = node
                    .input_keys
                    .iter()
                    .map(|k| (k.as_str(), memory.get(k).expect("checked").content.as_str()))
                    .collect();
                let context = assemble_context(&state.task.prompt, &inputs);
                let prompt = render_operator_prompt(node.template, &context, &node.instruction);
                ctx.call(executor, Role::Executor, "", &prompt)
                    .map_err(|e| failure(NodeErrorKind::ProviderFailure, e.to_string()))
            }
        };

        match result {
            Ok(completion) => {
                let key = graph.output_key(node).expect("non-terminate node");
                memory
                    .insert(MemoryRecord {
                        key: key.clone(),
                        producer_node: id.clone(),
                        stage_index: graph.stage_index,
                        template: node.template,
                        content: completion.text,
                        token_usage: TokenUsage {
                            prompt_tokens: completion.prompt_tokens,
                            completion_tokens: completion.completion_tokens,
                        },
                    })
                    .expect("keys are unique per (stage, node)");
                outcome.executed.push(ExecutedNode { node_id: id, template: node.template, result: NodeResult::Stored { key } });
            }
            Err(error) => {
                match policy {
                    NodeFailurePolicy::SkipDependents => skip.extend(graph.descendants(&id)),
                    NodeFailurePolicy::AbortStage => aborted = true,
                }
                outcome.executed.push(ExecutedNode { node_id: id, template: node.template, result: NodeResult::Failed { error } });
            }
        }
    }
    outcome
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accept,
    MinorIssues,
    MajorIssues,
    Reject,
    Unparseable,
}

/// Reads the last `Overall Verdict:` line of a review, ignoring case and
/// markdown emphasis.
pub fn parse_review_verdict(review_text: &str) -> Verdict {
    const MARKER: &str = "overall verdict:";
    let Some(rest) = review_text.lines().rev().find_map(|line| {
        let clean = line.replace('*', "").to_lowercase();
        clean.find(MARKER).map(|i| clean[i + MARKER.len()..].to_string())
    }) else {
        return Verdict::Unparseable;
    };
    let token: String = rest
        .trim()
        .trim_start_matches(|c: char| !c.is_alphanumeric())
        .chars()
        .map(|c| if c == ' ' || c == '-' { '_' } else { c })
        .take_while(|c| c.is_alphanumeric() || *c == '_')
        .collect();
    match token.as_str() {
        t if t.starts_with("accept") => Verdict::Accept,
        t if t.starts_with("minor_issue") => Verdict::MinorIssues,
        t if t.starts_with("major_issue") => Verdict::MajorIssues,
        t if t.starts_with("reject") => Verdict::Reject,
        _ => Verdict::Unparseable,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum Termination {
    Continue,
    Stop(StopReason),
}

/// Stop test after stage `t`: designer TERMINATE first, then the stage's end
/// conditions, then the stage budget.
pub fn check_termination(
    outcome: &StageOutcome,
    graph: &StageSubgraph,
    memory: &MemoryBuffer,
    t: usize,
    t_max: usize,
) -> Termination {
    if outcome.terminate_signaled {
        return Termination::Stop(StopReason::new(StopKind::DesignerTerminate));
    }
    for cond in &graph.end_conditions {
        let met = match cond.kind {
            EndConditionKind::DesignerTerminate => false,
            EndConditionKind::VerdictAccept => cond
                .params
                .get("node")
                .and_then(|id| graph.node(id))
                .and_then(|node| graph.output_key(node))
                .and_then(|key| memory.get(&key))
                .is_some_and(|r| parse_review_verdict(&r.content) == Verdict::Accept),
            EndConditionKind::AnswerPresent => cond.params.get("key").is_some_and(|k| memory.contains(k)),
        };
        if met {
            return Termination::Stop(StopReason::with_detail(StopKind::EndCondition, cond.kind.as_str()));
        }
    }
    if t + 1 >= t_max {
        return Termination::Stop(StopReason::new(StopKind::BudgetExhausted));
    }
    Termination::Continue
}

pub fn extract_answer(memory: &MemoryBuffer, mode: AnswerExtraction) -> String {
    let last_node = || memory.iter().next_back().map(|r| r.content.clone());
    match mode {
        AnswerExtraction::LastOrganize => memory
            .iter()
            .rev()
            .find(|r| r.template == OperatorTemplate::OrganizeSolution)
            .map(|r| r.content.clone())
            .or_else(last_node),
        AnswerExtraction::LastNode => last_node(),
    }
    .unwrap_or_default()
}

/// Plans, executes and replans until a stop condition holds.
pub fn run_task(task: TaskSpec, cfg: &RunConfig, providers: &RunProviders) -> RunResult {
    let ledger = UsageLedger::new();
    let ctx = CallContext { ledger: &ledger, sampling: &cfg.sampling };
    let (mut state, mut memory) = init_state(task);
    let mut stages = Vec::new();

    let stop = loop {
        let mark = ledger.len();
        let summary = summarize(&state, &memory, &cfg.planner, providers.summarizer.as_deref(), ctx);
        let planned = match plan_stage(
            &summary,
            state.step,
            &cfg.planner,
            providers.designer.as_ref(),
            &memory.key_set(),
            ctx,
        ) {
            Ok(p) => p,
            Err(e) => break StopReason::with_detail(StopKind::UnrecoverableError, e.to_string()),
        };

        let before = memory.len();
        let outcome = execute_stage(
            &planned.graph,
            &state,
            &mut memory,
            cfg.node_failure_policy,
            providers.executor.as_ref(),
            ctx,
        );
        let termination = if outcome.any_succeeded() {
            check_termination(&outcome, &planned.graph, &memory, state.step, cfg.planner.max_stages)
        } else {
            Termination::Stop(StopReason::with_detail(
                StopKind::UnrecoverableError,
                format!("stage {} produced no successful node", state.step),
            ))
        };

        stages.push(StageLog {
            stage_index: state.step,
            summary: summary.text,
            plan: serialize_plan(&planned.graph),
            plan_attempts: planned.attempts,
            outcome: outcome.clone(),
            memory_delta: memory.iter().skip(before).cloned().collect(),
            usage: ledger.entries_since(mark),
        });
        state = update_state(state, planned.graph, outcome).expect("stage index tracks state step");
        if let Termination::Stop(reason) = termination {
            break reason;
        }
    };
    state.terminate(stop.clone()).expect("a run stops once");

    let final_answer = extract_answer(&memory, cfg.answer_extraction);
    let success = state
        .task
        .gold
        .as_ref()
        .and_then(|_| grade_answer(&final_answer, &state.task, cfg.sandbox.as_ref()).ok());
    let usage = ledger.entries();
    RunResult {
        final_answer: final_answer.clone(),
        stop: stop.clone(),
        trajectory: TrajectoryRecord {
            task: state.task,
            policy: cfg.policy.clone(),
            stages,
            final_answer,
            stop,
            success,
            usage: usage.clone(),
        },
        usage,
    }
}
