#![allow(dead_code)]

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;

use stageflow::graph::{EndCondition, OperatorInstance, OperatorTemplate, StageSubgraph};
use stageflow::state::gen_memory_key;

/// Model-calling templates (everything but TERMINATE).
pub const WORKERS: [OperatorTemplate; 10] = [
    OperatorTemplate::GeneratePlan,
    OperatorTemplate::DecomposeProblem,
    OperatorTemplate::GenerateAnswer,
    OperatorTemplate::ReviewSolution,
    OperatorTemplate::RefineAnswer,
    OperatorTemplate::GenerateCode,
    OperatorTemplate::RefineCode,
    OperatorTemplate::OrganizeSolution,
    OperatorTemplate::Ensemble,
    OperatorTemplate::Default,
];

/// Random DAG on up to `max_nodes` nodes with shuffled ids so that id order
/// and edge direction are unrelated.
pub fn random_dag(rng: &mut impl Rng, max_nodes: usize, stage: usize) -> StageSubgraph {
    let n = rng.random_range(1..=max_nodes);
    let mut ids: Vec<String> = (0..n).map(|i| format!("n{}", (b'a' + i as u8) as char)).collect();
    ids.shuffle(rng);
    let mut edges = Vec::new();
    for j in 1..n {
        for i in 0..j {
            if rng.random_bool(0.35) {
                edges.push((ids[i].clone(), ids[j].clone()));
            }
        }
    }
    let nodes = ids
        .iter()
        .map(|id| OperatorInstance::new(id.clone(), WORKERS[rng.random_range(0..WORKERS.len())]).with_instruction(id.clone()))
        .collect();
    StageSubgraph {
        stage_index: stage,
        subgoal: "random".into(),
        nodes,
        edges,
        start_node: ids[0].clone(),
        end_conditions: vec![],
    }
}

/// Random DAG where every node is reachable from the first, with inputs
/// drawn only from strict ancestors. Always valid.
pub fn random_valid_plan(rng: &mut impl Rng, max_nodes: usize, stage: usize) -> StageSubgraph {
    let mut g = random_dag(rng, max_nodes, stage);
    // nodes are listed in generation order, which every edge respects
    let order: Vec<String> = g.nodes.iter().map(|n| n.node_id.clone()).collect();
    // connect every non-start node to some earlier node
    for (j, id) in order.iter().enumerate().skip(1) {
        if !g.edges.iter().any(|(_, to)| to == id) {
            let from = order[rng.random_range(0..j)].clone();
            g.edges.push((from, id.clone()));
        }
    }
    g.start_node = order[0].clone();
    for (j, id) in order.iter().enumerate() {
        let ancestors: Vec<String> = g.ancestors(id).into_iter().collect();
        let keys: Vec<String> = ancestors
            .iter()
            .filter(|_| rng.random_bool(0.5))
            .map(|a| {
                let node = g.node(a).unwrap();
                gen_memory_key(stage, a, node.template)
            })
            .collect();
        g.nodes[j].input_keys = keys;
    }
    if rng.random_bool(0.3) {
        let last = order.last().unwrap().clone();
        g.nodes.push(OperatorInstance::new("stop", OperatorTemplate::Terminate));
        g.edges.push((last, "stop".into()));
    }
    if rng.random_bool(0.3) {
        let key = gen_memory_key(stage, &order[0], g.nodes[0].template);
        g.end_conditions.push(EndCondition::answer_present(key));
    }
    g.subgoal = format!("goal \"{}\" {{x}}", rng.random_range(0..100));
    g
}

/// All orderings of the node ids consistent with the edges.
pub fn all_topological_orders(g: &StageSubgraph) -> Vec<Vec<String>> {
    fn go(
        g: &StageSubgraph,
        placed: &mut Vec<String>,
        remaining: &mut BTreeSet<String>,
        out: &mut Vec<Vec<String>>,
    ) {
        if remaining.is_empty() {
            out.push(placed.clone());
            return;
        }
        let candidates: Vec<String> = remaining
            .iter()
            .filter(|v| g.edges.iter().all(|(from, to)| to != *v || placed.contains(from)))
            .cloned()
            .collect();
        for v in candidates {
            remaining.remove(&v);
            placed.push(v.clone());
            go(g, placed, remaining, out);
            placed.pop();
            remaining.insert(v);
        }
    }
    let mut out = Vec::new();
    let mut remaining: BTreeSet<String> = g.nodes.iter().map(|n| n.node_id.clone()).collect();
    go(g, &mut Vec::new(), &mut remaining, &mut out);
    out
}

/// Plain BFS over the edge list.
pub fn reachable_from(g: &StageSubgraph, start: &str) -> HashSet<String> {
    let mut seen = HashSet::from([start.to_string()]);
    let mut frontier = vec![start.to_string()];
    while let Some(v) = frontier.pop() {
        for (from, to) in &g.edges {
            if *from == v && seen.insert(to.clone()) {
                frontier.push(to.clone());
            }
        }
    }
    seen
}

/// Probability that a uniformly random k-subset of n samples (the first c
/// correct) contains a correct one, by listing every subset.
pub fn pass_at_k_by_enumeration(n: usize, c: usize, k: usize) -> f64 {
    let mut hit = 0u64;
    let mut total = 0u64;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        total += 1;
        if (0..c).any(|i| mask & (1 << i) != 0) {
            hit += 1;
        }
    }
    hit as f64 / total as f64
}
