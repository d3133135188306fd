//! Operator templates, stage subgraphs, plan documents and their validation.
//!
//! A stage subgraph is the unit of work the designer emits for one planning
//! step: a small DAG of operator instances plus an entry node and a list of
//! end conditions. Edges carry no data; every value flows through memory keys
//! listed in each node's `input_keys`.

use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, HashSet, VecDeque};
use std::cmp::Reverse;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::state::gen_memory_key;

/// The closed set of reusable reasoning-step kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OperatorTemplate {
    GeneratePlan,
    DecomposeProblem,
    GenerateAnswer,
    ReviewSolution,
    RefineAnswer,
    GenerateCode,
    RefineCode,
    OrganizeSolution,
    Ensemble,
    Default,
    Terminate,
}

impl OperatorTemplate {
    pub const ALL: [OperatorTemplate; 11] = [
        Self::GeneratePlan,
        Self::DecomposeProblem,
        Self::GenerateAnswer,
        Self::ReviewSolution,
        Self::RefineAnswer,
        Self::GenerateCode,
        Self::RefineCode,
        Self::OrganizeSolution,
        Self::Ensemble,
        Self::Default,
        Self::Terminate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::GeneratePlan => "GENERATE_PLAN",
            Self::DecomposeProblem => "DECOMPOSE_PROBLEM",
            Self::GenerateAnswer => "GENERATE_ANSWER",
            Self::ReviewSolution => "REVIEW_SOLUTION",
            Self::RefineAnswer => "REFINE_ANSWER",
            Self::GenerateCode => "GENERATE_CODE",
            Self::RefineCode => "REFINE_CODE",
            Self::OrganizeSolution => "ORGANIZE_SOLUTION",
            Self::Ensemble => "ENSEMBLE",
            Self::Default => "DEFAULT",
            Self::Terminate => "TERMINATE",
        }
    }

    /// Functional role, as shown to the designer.
    pub fn description(self) -> &'static str {
        match self {
            Self::GeneratePlan => "Propose a high-level plan for solving the current subgoal.",
            Self::DecomposeProblem => "Break a complex goal into subgoals.",
            Self::GenerateAnswer => "Produce an answer candidate for the current task.",
            Self::ReviewSolution => "Evaluate correctness or completeness of a prior answer.",
            Self::RefineAnswer => "Modify or improve a previously generated answer.",
            Self::GenerateCode => "Write code to solve the current subgoal.",
            Self::RefineCode => "Improve or debug previously generated code.",
            Self::OrganizeSolution => "Summarize or structure the final answer for output.",
            Self::Ensemble => "Aggregate multiple reasoning paths using voting.",
            Self::Default => "General-purpose fallback operator.",
            Self::Terminate => "End the workflow once the solution is complete.",
        }
    }

    /// TERMINATE is a control signal: it never calls a model and never
    /// writes memory.
    pub fn produces_output(self) -> bool {
        self != Self::Terminate
    }
}

impl fmt::Display for OperatorTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown operator template `{0}`")]
pub struct UnknownTemplate(pub String);

impl FromStr for OperatorTemplate {
    type Err = UnknownTemplate;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|t| t.name() == s)
            .ok_or_else(|| UnknownTemplate(s.to_string()))
    }
}

/// A template bound to a context-specific instruction and its input keys.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperatorInstance {
    pub node_id: String,
    pub template: OperatorTemplate,
    pub instruction: String,
    pub input_keys: Vec<String>,
}

impl OperatorInstance {
    pub fn new(node_id: impl Into<String>, template: OperatorTemplate) -> Self {
        Self {
            node_id: node_id.into(),
            template,
            instruction: String::new(),
            input_keys: Vec::new(),
        }
    }

    pub fn with_instruction(mut self, instruction: impl Into<String>) -> Self {
        self.instruction = instruction.into();
        self
    }

    pub fn with_inputs<I, S>(mut self, keys: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.input_keys = keys.into_iter().map(Into::into).collect();
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndConditionKind {
    DesignerTerminate,
    /// `params.node` names a REVIEW_SOLUTION node whose verdict must be accept.
    VerdictAccept,
    /// `params.key` names a memory key that must exist.
    AnswerPresent,
}

impl EndConditionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::DesignerTerminate => "designer_terminate",
            Self::VerdictAccept => "verdict_accept",
            Self::AnswerPresent => "answer_present",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndCondition {
    pub kind: EndConditionKind,
    #[serde(default)]
    pub params: BTreeMap<String, String>,
}

impl EndCondition {
    pub fn designer_terminate() -> Self {
        Self { kind: EndConditionKind::DesignerTerminate, params: BTreeMap::new() }
    }

    pub fn verdict_accept(node_id: impl Into<String>) -> Self {
        let mut params = BTreeMap::new();
        params.insert("node".to_string(), node_id.into());
        Self { kind: EndConditionKind::VerdictAccept, params }
    }

    pub fn answer_present(key: impl Into<String>) -> Self {
        let mut params = BTreeMap::new();
        params.insert("key".to_string(), key.into());
        Self { kind: EndConditionKind::AnswerPresent, params }
    }
}

/// One planning step's DAG of operator instances.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSubgraph {
    pub stage_index: usize,
    pub subgoal: String,
    pub nodes: Vec<OperatorInstance>,
    pub edges: Vec<(String, String)>,
    pub start_node: String,
    pub end_conditions: Vec<EndCondition>,
}

impl StageSubgraph {
    pub fn node(&self, id: &str) -> Option<&OperatorInstance> {
        self.nodes.iter().find(|n| n.node_id == id)
    }

    /// Memory key a node's output is stored under, or `None` for TERMINATE.
    pub fn output_key(&self, node: &OperatorInstance) -> Option<String> {
        node.template
            .produces_output()
            .then(|| gen_memory_key(self.stage_index, &node.node_id, node.template))
    }

    /// Direct successors per node id, sorted. Edges naming unknown nodes are
    /// ignored.
    pub fn successors(&self) -> BTreeMap<&str, BTreeSet<&str>> {
        let mut out: BTreeMap<&str, BTreeSet<&str>> =
            self.nodes.iter().map(|n| (n.node_id.as_str(), BTreeSet::new())).collect();
        for (from, to) in &self.edges {
            if !out.contains_key(to.as_str()) {
                continue;
            }
            if let Some(succ) = out.get_mut(from.as_str()) {
                succ.insert(to.as_str());
            }
        }
        out
    }

    /// All nodes reachable from `id` along edges, excluding `id` itself unless
    /// it lies on a cycle.
    pub fn descendants(&self, id: &str) -> BTreeSet<String> {
        let succ = self.successors();
        let mut seen = BTreeSet::new();
        let mut queue: VecDeque<&str> = succ.get(id).into_iter().flatten().copied().collect();
        while let Some(n) = queue.pop_front() {
            if seen.insert(n.to_string()) {
                queue.extend(succ.get(n).into_iter().flatten().copied());
            }
        }
        seen
    }

    /// Strict predecessors (transitive) of `id`.
    pub fn ancestors(&self, id: &str) -> BTreeSet<String> {
        let mut preds: HashMap<&str, Vec<&str>> = HashMap::new();
        for (from, to) in &self.edges {
            preds.entry(to.as_str()).or_default().push(from.as_str());
        }
        let mut seen = BTreeSet::new();
        let mut queue: VecDeque<&str> = preds.get(id).into_iter().flatten().copied().collect();
        while let Some(n) = queue.pop_front() {
            if seen.insert(n.to_string()) {
                queue.extend(preds.get(n).into_iter().flatten().copied());
            }
        }
        seen
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ViolationCode {
    Cycle,
    DanglingEdge,
    DanglingInput,
    NoStart,
    Unreachable,
    UnknownTemplate,
    EmptyGraph,
    DuplicateNode,
    InvalidNodeId,
    InvalidEndCondition,
}

impl ViolationCode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Cycle => "CYCLE",
            Self::DanglingEdge => "DANGLING_EDGE",
            Self::DanglingInput => "DANGLING_INPUT",
            Self::NoStart => "NO_START",
            Self::Unreachable => "UNREACHABLE",
            Self::UnknownTemplate => "UNKNOWN_TEMPLATE",
            Self::EmptyGraph => "EMPTY_GRAPH",
            Self::DuplicateNode => "DUPLICATE_NODE",
            Self::InvalidNodeId => "INVALID_NODE_ID",
            Self::InvalidEndCondition => "INVALID_END_CONDITION",
        }
    }
}

impl fmt::Display for ViolationCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub valid: bool,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    fn from_violations(violations: Vec<Violation>) -> Self {
        Self { valid: violations.is_empty(), violations }
    }

    pub fn has(&self, code: ViolationCode) -> bool {
        self.violations.iter().any(|v| v.code == code)
    }

    /// One `- CODE: message` line per violation.
    pub fn render(&self) -> String {
        self.violations
            .iter()
            .map(|v| format!("- {}: {}", v.code, v.message))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Node ids are restricted so that memory keys stay parseable.
pub fn is_valid_node_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

/// Checks every structural invariant of a stage subgraph against the memory
/// keys available when the stage starts. Violations are data, not errors.
pub fn validate_subgraph(graph: &StageSubgraph, memory_keys: &HashSet<String>) -> ValidationReport {
    let mut violations = Vec::new();
    let mut push = |code: ViolationCode, message: String| violations.push(Violation { code, message });

    if graph.nodes.is_empty() {
        push(ViolationCode::EmptyGraph, "stage subgraph has no nodes".into());
        return ValidationReport::from_violations(violations);
    }

    let mut ids: BTreeSet<&str> = BTreeSet::new();
    for node in &graph.nodes {
        if !is_valid_node_id(&node.node_id) {
            push(
                ViolationCode::InvalidNodeId,
                format!("node id `{}` must be nonempty and use only [A-Za-z0-9_-]", node.node_id),
            );
        }
        if !ids.insert(node.node_id.as_str()) {
            push(ViolationCode::DuplicateNode, format!("node id `{}` appears more than once", node.node_id));
        }
    }

    for (from, to) in &graph.edges {
        for end in [from, to] {
            if !ids.contains(end.as_str()) {
                push(ViolationCode::DanglingEdge, format!("edge {from}->{to} references unknown node `{end}`"));
            }
        }
    }

    if !ids.contains(graph.start_node.as_str()) {
        push(ViolationCode::NoStart, format!("start node `{}` is not a node of the graph", graph.start_node));
    } else if graph.edges.iter().any(|(_, to)| to == &graph.start_node) {
        push(ViolationCode::NoStart, format!("start node `{}` has an incoming edge", graph.start_node));
    }

    if let Some(cycle_nodes) = cyclic_nodes(graph) {
        push(
            ViolationCode::Cycle,
            format!("cycle through nodes {}", cycle_nodes.into_iter().collect::<Vec<_>>().join(", ")),
        );
    }

    if ids.contains(graph.start_node.as_str()) {
        let mut reached = graph.descendants(&graph.start_node);
        reached.insert(graph.start_node.clone());
        for id in &ids {
            if !reached.contains(*id) {
                push(ViolationCode::Unreachable, format!("node `{id}` is not reachable from `{}`", graph.start_node));
            }
        }
    }

    for node in &graph.nodes {
        let ancestors = graph.ancestors(&node.node_id);
        let producible: HashSet<String> = ancestors
            .iter()
            .filter(|a| a.as_str() != node.node_id)
            .filter_map(|a| graph.node(a))
            .filter_map(|a| graph.output_key(a))
            .collect();
        for key in &node.input_keys {
            if !memory_keys.contains(key.as_str()) && !producible.contains(key) {
                push(
                    ViolationCode::DanglingInput,
                    format!(
                        "node `{}` reads `{key}`, which is neither in memory nor produced by a predecessor",
                        node.node_id
                    ),
                );
            }
        }
    }

    for cond in &graph.end_conditions {
        match cond.kind {
            EndConditionKind::DesignerTerminate => {}
            EndConditionKind::VerdictAccept => match cond.params.get("node").and_then(|id| graph.node(id)) {
                Some(n) if n.template == OperatorTemplate::ReviewSolution => {}
                Some(n) => push(
                    ViolationCode::InvalidEndCondition,
                    format!("verdict_accept names `{}`, a {} node, not REVIEW_SOLUTION", n.node_id, n.template),
                ),
                None => push(
                    ViolationCode::InvalidEndCondition,
                    "verdict_accept must name an existing REVIEW_SOLUTION node in params.node".into(),
                ),
            },
            EndConditionKind::AnswerPresent => {
                if cond.params.get("key").is_none_or(|k| k.is_empty()) {
                    push(ViolationCode::InvalidEndCondition, "answer_present requires params.key".into());
                }
            }
        }
    }

    ValidationReport::from_violations(violations)
}

/// Nodes left over after Kahn's algorithm, i.e. those on or behind a cycle.
fn cyclic_nodes(graph: &StageSubgraph) -> Option<BTreeSet<String>> {
    let succ = graph.successors();
    let mut indegree: BTreeMap<&str, usize> = succ.keys().map(|k| (*k, 0)).collect();
    for targets in succ.values() {
        for t in targets {
            if let Some(d) = indegree.get_mut(t) {
                *d += 1;
            }
        }
    }
    let mut ready: Vec<&str> = indegree.iter().filter(|(_, d)| **d == 0).map(|(k, _)| *k).collect();
    let mut removed = HashSet::new();
    while let Some(n) = ready.pop() {
        removed.insert(n);
        for t in &succ[n] {
            let d = indegree.get_mut(t).expect("successor is a node");
            *d -= 1;
            if *d == 0 {
                ready.push(t);
            }
        }
    }
    let rest: BTreeSet<String> =
        indegree.keys().filter(|k| !removed.contains(*k)).map(|k| k.to_string()).collect();
    (!rest.is_empty()).then_some(rest)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("CYCLE: graph contains a cycle through {0:?}")]
    Cycle(Vec<String>),
    #[error("DANGLING_EDGE: edge {0}->{1} references an unknown node")]
    DanglingEdge(String, String),
}

/// Deterministic topological order; among all valid orders this returns the
/// lexicographically smallest by node id.
pub fn topological_order(graph: &StageSubgraph) -> Result<Vec<String>, GraphError> {
    let ids: HashSet<&str> = graph.nodes.iter().map(|n| n.node_id.as_str()).collect();
    for (from, to) in &graph.edges {
        if !ids.contains(from.as_str()) || !ids.contains(to.as_str()) {
            return Err(GraphError::DanglingEdge(from.clone(), to.clone()));
        }
    }
    let succ = graph.successors();
    let mut indegree: BTreeMap<&str, usize> = succ.keys().map(|k| (*k, 0)).collect();
    for targets in succ.values() {
        for t in targets {
            *indegree.get_mut(t).expect("checked above") += 1;
        }
    }
    let mut heap: BinaryHeap<Reverse<&str>> =
        indegree.iter().filter(|(_, d)| **d == 0).map(|(k, _)| Reverse(*k)).collect();
    let mut order = Vec::with_capacity(indegree.len());
    while let Some(Reverse(n)) = heap.pop() {
        order.push(n.to_string());
        for t in &succ[n] {
            let d = indegree.get_mut(t).expect("checked above");
            *d -= 1;
            if *d == 0 {
                heap.push(Reverse(t));
            }
        }
    }
    if order.len() < indegree.len() {
        let placed: HashSet<&str> = order.iter().map(String::as_str).collect();
        let stuck = indegree.keys().filter(|k| !placed.contains(*k)).map(|k| k.to_string()).collect();
        return Err(GraphError::Cycle(stuck));
    }
    Ok(order)
}

// ---------------------------------------------------------------------------
// Plan documents
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("MALFORMED: {0}")]
    Malformed(String),
    #[error("SCHEMA: {0}")]
    Schema(String),
    #[error("UNKNOWN_TEMPLATE: {0}")]
    UnknownTemplate(String),
}

impl ParseError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::Malformed(_) => "MALFORMED",
            Self::Schema(_) => "SCHEMA",
            Self::UnknownTemplate(_) => "UNKNOWN_TEMPLATE",
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PlanDocument {
    #[serde(default)]
    subgoal: String,
    nodes: Vec<NodeDocument>,
    #[serde(default)]
    edges: Vec<(String, String)>,
    start: String,
    #[serde(default)]
    end_conditions: Vec<EndConditionDocument>,
}

#[derive(Debug, Serialize, Deserialize)]
struct NodeDocument {
    id: String,
    template: String,
    #[serde(default)]
    instruction: String,
    #[serde(default)]
    input_keys: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EndConditionDocument {
    kind: EndConditionKind,
    #[serde(default)]
    params: BTreeMap<String, String>,
}

/// Parses designer output into a stage subgraph. Code fences and prose around
/// the first balanced top-level JSON object are ignored.
pub fn parse_plan(raw_text: &str, stage_index: usize) -> Result<StageSubgraph, ParseError> {
    let value = extract_document(raw_text)?;
    let doc: PlanDocument = serde_json::from_value(value).map_err(|e| ParseError::Schema(e.to_string()))?;

    let mut nodes = Vec::with_capacity(doc.nodes.len());
    let mut seen = HashSet::new();
    for n in doc.nodes {
        let template: OperatorTemplate =
            n.template.parse().map_err(|e: UnknownTemplate| ParseError::UnknownTemplate(e.0))?;
        if !is_valid_node_id(&n.id) {
            return Err(ParseError::Schema(format!("invalid node id `{}`", n.id)));
        }
        if !seen.insert(n.id.clone()) {
            return Err(ParseError::Schema(format!("duplicate node id `{}`", n.id)));
        }
        nodes.push(OperatorInstance { node_id: n.id, template, instruction: n.instruction, input_keys: n.input_keys });
    }

    Ok(StageSubgraph {
        stage_index,
        subgoal: doc.subgoal,
        nodes,
        edges: doc.edges,
        start_node: doc.start,
        end_conditions: doc
            .end_conditions
            .into_iter()
            .map(|c| EndCondition { kind: c.kind, params: c.params })
            .collect(),
    })
}

/// Canonical single-line plan document. `stage_index` is not part of the
/// document; it comes from the caller's context on parse.
pub fn serialize_plan(graph: &StageSubgraph) -> String {
    let doc = PlanDocument {
        subgoal: graph.subgoal.clone(),
        nodes: graph
            .nodes
            .iter()
            .map(|n| NodeDocument {
                id: n.node_id.clone(),
                template: n.template.name().to_string(),
                instruction: n.instruction.clone(),
                input_keys: n.input_keys.clone(),
            })
            .collect(),
        edges: graph.edges.clone(),
        start: graph.start_node.clone(),
        end_conditions: graph
            .end_conditions
            .iter()
            .map(|c| EndConditionDocument { kind: c.kind, params: c.params.clone() })
            .collect(),
    };
    serde_json::to_string(&doc).expect("plan document serializes")
}

/// Finds the first `{` that opens a balanced, parseable JSON object.
fn extract_document(raw: &str) -> Result<serde_json::Value, ParseError> {
    let mut last_err = None;
    for (start, _) in raw.match_indices('{') {
        let Some(end) = balanced_end(&raw[start..]) else { continue };
        match serde_json::from_str::<serde_json::Value>(&raw[start..start + end]) {
            Ok(v @ serde_json::Value::Object(_)) => return Ok(v),
            Ok(_) => {}
            Err(e) => last_err = Some(e.to_string()),
        }
    }
    Err(ParseError::Malformed(last_err.unwrap_or_else(|| "no JSON object found".to_string())))
}

/// Byte length of the balanced object starting at `s[0] == '{'`.
fn balanced_end(s: &str) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, c) in s.char_indices() {
        if in_string {
            match (escaped, c) {
                (true, _) => escaped = false,
                (false, '\\') => escaped = true,
                (false, '"') => in_string = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            '{' | '[' => depth += 1,
            '}' | ']' => {
                depth = depth.checked_sub(1)?;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(id: &str, t: OperatorTemplate) -> OperatorInstance {
        OperatorInstance::new(id, t)
    }

    fn graph(nodes: Vec<OperatorInstance>, edges: &[(&str, &str)], start: &str) -> StageSubgraph {
        StageSubgraph {
            stage_index: 0,
            subgoal: String::new(),
            nodes,
            edges: edges.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect(),
            start_node: start.to_string(),
            end_conditions: vec![],
        }
    }

    fn no_memory() -> HashSet<String> {
        HashSet::new()
    }

    #[test]
    fn template_set_is_closed() {
        assert_eq!(OperatorTemplate::ALL.len(), 11);
        let names: BTreeSet<_> = OperatorTemplate::ALL.iter().map(|t| t.name()).collect();
        assert_eq!(names.len(), 11);
        for t in OperatorTemplate::ALL {
            assert_eq!(t.name().parse::<OperatorTemplate>().unwrap(), t);
            assert_eq!(serde_json::to_string(&t).unwrap(), format!("\"{}\"", t.name()));
        }
        assert!(!OperatorTemplate::Terminate.produces_output());
        assert!("SEARCH_WEB".parse::<OperatorTemplate>().is_err());
    }

    #[test]
    fn minimal_graph_is_valid() {
        let g = graph(vec![node("a", OperatorTemplate::GenerateAnswer)], &[], "a");
        let report = validate_subgraph(&g, &no_memory());
        assert!(report.valid, "{report:?}");
    }

    #[test]
    fn two_cycle_is_reported() {
        let g = graph(
            vec![node("A", OperatorTemplate::GenerateAnswer), node("B", OperatorTemplate::ReviewSolution)],
            &[("A", "B"), ("B", "A")],
            "A",
        );
        let report = validate_subgraph(&g, &no_memory());
        assert!(report.has(ViolationCode::Cycle));
        assert!(!report.valid);
    }

    #[test]
    fn input_from_non_predecessor_dangles() {
        let g = graph(
            vec![
                node("S", OperatorTemplate::Default),
                node("A", OperatorTemplate::GeneratePlan),
                node("B", OperatorTemplate::GenerateAnswer).with_inputs(["s0.A.GENERATE_PLAN"]),
            ],
            &[("S", "A"), ("S", "B")],
            "S",
        );
        assert!(validate_subgraph(&g, &no_memory()).has(ViolationCode::DanglingInput));

        // same key becomes legal once A precedes B
        let mut ok = g.clone();
        ok.edges.push(("A".into(), "B".into()));
        assert!(validate_subgraph(&ok, &no_memory()).valid);

        // or when it already sits in memory from an earlier stage
        let mem: HashSet<String> = ["s0.A.GENERATE_PLAN".to_string()].into();
        assert!(validate_subgraph(&g, &mem).valid);
    }

    #[test]
    fn terminate_output_is_never_readable() {
        let g = graph(
            vec![
                node("t", OperatorTemplate::Terminate),
                node("b", OperatorTemplate::GenerateAnswer).with_inputs(["s0.t.TERMINATE"]),
            ],
            &[("t", "b")],
            "t",
        );
        assert!(validate_subgraph(&g, &no_memory()).has(ViolationCode::DanglingInput));
    }

    #[test]
    fn structural_violations() {
        let empty = graph(vec![], &[], "a");
        assert!(validate_subgraph(&empty, &no_memory()).has(ViolationCode::EmptyGraph));

        let dangling = graph(vec![node("a", OperatorTemplate::Default)], &[("a", "zz")], "a");
        assert!(validate_subgraph(&dangling, &no_memory()).has(ViolationCode::DanglingEdge));

        let missing_start = graph(vec![node("a", OperatorTemplate::Default)], &[], "b");
        assert!(validate_subgraph(&missing_start, &no_memory()).has(ViolationCode::NoStart));

        let start_has_parent = graph(
            vec![node("a", OperatorTemplate::Default), node("b", OperatorTemplate::Default)],
            &[("b", "a")],
            "a",
        );
        assert!(validate_subgraph(&start_has_parent, &no_memory()).has(ViolationCode::NoStart));

        let disconnected = graph(
            vec![node("a", OperatorTemplate::Default), node("b", OperatorTemplate::Default)],
            &[],
            "a",
        );
        assert!(validate_subgraph(&disconnected, &no_memory()).has(ViolationCode::Unreachable));

        let dup = graph(vec![node("a", OperatorTemplate::Default), node("a", OperatorTemplate::Ensemble)], &[], "a");
        assert!(validate_subgraph(&dup, &no_memory()).has(ViolationCode::DuplicateNode));

        let bad_id = graph(vec![node("a.b", OperatorTemplate::Default)], &[], "a.b");
        assert!(validate_subgraph(&bad_id, &no_memory()).has(ViolationCode::InvalidNodeId));
    }

    #[test]
    fn verdict_accept_must_point_at_review() {
        let mut g = graph(
            vec![node("a", OperatorTemplate::GenerateAnswer), node("r", OperatorTemplate::ReviewSolution)],
            &[("a", "r")],
            "a",
        );
        g.end_conditions = vec![EndCondition::verdict_accept("r")];
        assert!(validate_subgraph(&g, &no_memory()).valid);
        g.end_conditions = vec![EndCondition::verdict_accept("a")];
        assert!(validate_subgraph(&g, &no_memory()).has(ViolationCode::InvalidEndCondition));
    }

    #[test]
    fn topo_single_and_diamond() {
        let single = graph(vec![node("N", OperatorTemplate::Default)], &[], "N");
        assert_eq!(topological_order(&single).unwrap(), vec!["N"]);

        let diamond = graph(
            vec![
                node("D", OperatorTemplate::Default),
                node("C", OperatorTemplate::Default),
                node("B", OperatorTemplate::Default),
                node("A", OperatorTemplate::Default),
            ],
            &[("A", "B"), ("A", "C"), ("B", "D"), ("C", "D")],
            "A",
        );
        assert_eq!(topological_order(&diamond).unwrap(), vec!["A", "B", "C", "D"]);
    }

    #[test]
    fn topo_rejects_cycle() {
        let g = graph(
            vec![node("A", OperatorTemplate::Default), node("B", OperatorTemplate::Default)],
            &[("A", "B"), ("B", "A")],
            "A",
        );
        assert!(matches!(topological_order(&g), Err(GraphError::Cycle(_))));
    }

    const TWO_NODE: &str = r#"{"subgoal":"solve","nodes":[{"id":"p","template":"GENERATE_PLAN","instruction":"plan it","input_keys":[]},{"id":"a","template":"GENERATE_ANSWER","instruction":"answer","input_keys":["s0.p.GENERATE_PLAN"]}],"edges":[["p","a"]],"start":"p","end_conditions":[{"kind":"answer_present","params":{"key":"s0.a.GENERATE_ANSWER"}}]}"#;

    #[test]
    fn parse_two_node_plan() {
        let g = parse_plan(TWO_NODE, 0).unwrap();
        assert_eq!(g.nodes.len(), 2);
        assert_eq!(g.edges.len(), 1);
        assert_eq!(serialize_plan(&g), TWO_NODE);
        assert!(validate_subgraph(&g, &no_memory()).valid);
    }

    #[test]
    fn parse_ignores_fences_and_commentary() {
        let wrapped = format!("Here is my plan {{for now}}:\n```json\n{TWO_NODE}\n```\nLet me know if {{this}} works.");
        assert_eq!(parse_plan(&wrapped, 3).unwrap(), parse_plan(TWO_NODE, 3).unwrap());
    }

    #[test]
    fn parse_errors() {
        assert_eq!(parse_plan("not a plan", 0).unwrap_err().code(), "MALFORMED");
        assert_eq!(parse_plan("{\"nodes\": [", 0).unwrap_err().code(), "MALFORMED");
        assert_eq!(parse_plan(r#"{"subgoal":"x","start":"a"}"#, 0).unwrap_err().code(), "SCHEMA");
        let unknown = r#"{"nodes":[{"id":"a","template":"SEARCH_WEB"}],"start":"a"}"#;
        assert_eq!(parse_plan(unknown, 0).unwrap_err().code(), "UNKNOWN_TEMPLATE");
        let bad_kind = r#"{"nodes":[{"id":"a","template":"DEFAULT"}],"start":"a","end_conditions":[{"kind":"whenever"}]}"#;
        assert_eq!(parse_plan(bad_kind, 0).unwrap_err().code(), "SCHEMA");
        let dup = r#"{"nodes":[{"id":"a","template":"DEFAULT"},{"id":"a","template":"DEFAULT"}],"start":"a"}"#;
        assert_eq!(parse_plan(dup, 0).unwrap_err().code(), "SCHEMA");
    }

    #[test]
    fn braces_inside_strings_do_not_confuse_extraction() {
        let doc = r#"{"subgoal":"handle } and { in text","nodes":[{"id":"a","template":"DEFAULT","instruction":"print \"}\""}],"start":"a"}"#;
        let g = parse_plan(&format!("prefix {doc} suffix"), 0).unwrap();
        assert_eq!(g.subgoal, "handle } and { in text");
        assert_eq!(g.nodes[0].instruction, "print \"}\"");
    }
}
