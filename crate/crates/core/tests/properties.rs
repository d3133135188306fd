mod common;

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;
use stageflow::bench::{grade_answer, pass_at_k};
use stageflow::executor::{execute_stage, run_task, NodeFailurePolicy, RunConfig, RunProviders};
use stageflow::export::{export_kto, label_trajectory, PreferenceLabel};
use stageflow::graph::{
    parse_plan, serialize_plan, topological_order, validate_subgraph, OperatorTemplate, ViolationCode,
};
use stageflow::planner::CallContext;
use stageflow::prompts::render_operator_prompt;
use stageflow::providers::{cost_report, LedgerEntry, Price, Role, Sampling, ScriptedProvider, ScriptedResponse, UsageLedger};
use stageflow::state::{gen_memory_key, init_state, parse_memory_key, GradingMode, TaskSpec};
use stageflow::theory::{best_dynamic_return, evaluate_policy, random_mdp, value_iterate, Policy, ToyMdp};
use stageflow::trajectory::replay_memory;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn topological_order_is_lexicographic_minimum(seed in any::<u64>()) {
        let g = random_dag(&mut rng(seed), 6, 0);
        let order = topological_order(&g).unwrap();
        let all = all_topological_orders(&g);
        prop_assert!(all.contains(&order));
        prop_assert_eq!(&order, all.iter().min().unwrap());
    }

    #[test]
    fn dangling_input_matches_production_replay(seed in any::<u64>(), picks in proptest::collection::vec((0usize..6, 0usize..6), 0..6)) {
        let mut g = random_dag(&mut rng(seed), 6, 2);
        let n = g.nodes.len();
        for (reader, producer) in picks {
            let (r, p) = (reader % n, producer % n);
            let key = gen_memory_key(2, &g.nodes[p].node_id, g.nodes[p].template);
            g.nodes[r].input_keys.push(key);
        }
        let report = validate_subgraph(&g, &HashSet::new());
        // oracle: a key is safe iff, in every execution order, its producer
        // has already run when the reader runs
        let orders = all_topological_orders(&g);
        let mut expect_dangling = false;
        for node in &g.nodes {
            for key in &node.input_keys {
                let (_, producer, _) = parse_memory_key(key).unwrap();
                let always_before = orders.iter().all(|o| {
                    let pos = |id: &str| o.iter().position(|x| x == id).unwrap();
                    pos(&producer) < pos(&node.node_id)
                });
                expect_dangling |= !always_before;
            }
        }
        prop_assert_eq!(report.has(ViolationCode::DanglingInput), expect_dangling);
    }

    #[test]
    fn valid_graphs_are_reachable_from_start(seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut g = random_dag(&mut r, 6, 0);
        g.start_node = g.nodes[0].node_id.clone();
        let report = validate_subgraph(&g, &HashSet::new());
        if report.valid {
            let reached = reachable_from(&g, &g.start_node);
            prop_assert!(g.nodes.iter().all(|n| reached.contains(&n.node_id)));
        }
        let v = random_valid_plan(&mut r, 6, 0);
        prop_assert!(validate_subgraph(&v, &HashSet::new()).valid, "{}", validate_subgraph(&v, &HashSet::new()).render());
    }

    #[test]
    fn plan_documents_round_trip(seed in any::<u64>(), stage in 0usize..10) {
        let g = random_valid_plan(&mut rng(seed), 6, stage);
        let text = serialize_plan(&g);
        let parsed = parse_plan(&text, stage).unwrap();
        prop_assert_eq!(&parsed, &g);
        prop_assert_eq!(serialize_plan(&parsed), text.clone());
        let wrapped = format!("Here is the plan:\n```json\n{text}\n```\nLet me know.");
        prop_assert_eq!(parse_plan(&wrapped, stage).unwrap(), g);
    }

    #[test]
    fn memory_keys_parse_back(stage in 0usize..1000, node in "[A-Za-z0-9_-]{1,12}", t in 0usize..11) {
        let template = OperatorTemplate::ALL[t];
        let key = gen_memory_key(stage, &node, template);
        prop_assert_eq!(parse_memory_key(&key), Some((stage, node, template)));
    }

    #[test]
    fn rendered_prompts_contain_inputs(context in ".{0,60}", guidance in ".{0,60}", t in 0usize..10) {
        let p = render_operator_prompt(WORKERS[t], &context, &guidance);
        prop_assert!(p.contains(&context));
        prop_assert!(p.contains(&guidance));
    }

    #[test]
    fn exact_grading_ignores_case_and_outer_space(gold in "[a-zA-Z0-9 ]{1,20}", pad_l in "[ \t\n]{0,3}", pad_r in "[ \t\n]{0,3}") {
        prop_assume!(!gold.trim().is_empty());
        let task = TaskSpec::new("t", "p").with_gold(gold.clone(), GradingMode::Exact);
        let variant = format!("{pad_l}{}{pad_r}", gold.to_uppercase());
        prop_assert_eq!(grade_answer(&variant, &task, None), Ok(true));
    }

    #[test]
    fn pass_at_k_is_monotone(n in 1usize..30, c in 0usize..30, k in 1usize..30) {
        prop_assume!(c <= n && k <= n);
        let v = pass_at_k(n, c, k).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        if k < n { prop_assert!(pass_at_k(n, c, k + 1).unwrap() >= v - 1e-12); }
        if c < n { prop_assert!(pass_at_k(n, c + 1, k).unwrap() >= v - 1e-12); }
        prop_assert_eq!(pass_at_k(n, c, n).unwrap(), if c > 0 { 1.0 } else { 0.0 });
    }

    #[test]
    fn execution_respects_edges(seed in any::<u64>()) {
        let g = random_valid_plan(&mut rng(seed), 6, 0);
        let executor = ScriptedProvider::new("e").with_rules(vec![stageflow::providers::ScriptRule {
            when_contains: String::new(),
            response: ScriptedResponse::text("out"),
        }]);
        let (state, mut memory) = init_state(TaskSpec::new("t", "p"));
        let (ledger, sampling) = (UsageLedger::new(), Sampling::default());
        let outcome = execute_stage(&g, &state, &mut memory, NodeFailurePolicy::SkipDependents, &executor, CallContext { ledger: &ledger, sampling: &sampling });
        // each prompt ends with the node's own id as guidance
        let called: Vec<String> = executor.requests().iter().map(|r| {
            let line = r.user.lines().find(|l| l.starts_with("Guidance: ")).unwrap();
            line["Guidance: ".len()..].to_string()
        }).collect();
        let mut visited: Vec<String> = outcome.executed.iter().map(|n| n.node_id.clone()).collect();
        for (from, to) in &g.edges {
            let pos = |id: &str| visited.iter().position(|x| x == id).unwrap();
            prop_assert!(pos(from) < pos(to));
            if let (Some(a), Some(b)) = (called.iter().position(|x| x == from), called.iter().position(|x| x == to)) {
                prop_assert!(a < b);
            }
        }
        visited.sort();
        let mut ids: Vec<String> = g.nodes.iter().map(|n| n.node_id.clone()).collect();
        ids.sort();
        prop_assert_eq!(visited, ids);
    }

    #[test]
    fn cost_report_is_additive(calls in proptest::collection::vec((0usize..3, 0usize..3, 0u64..2_000_000, 0u64..2_000_000), 0..20), split in 0usize..20) {
        let models = ["m0", "m1", "unpriced"];
        let ledger: Vec<LedgerEntry> = calls.iter().map(|&(t, m, p, c)| LedgerEntry {
            tag: [Role::Designer, Role::Executor, Role::Summarizer][t],
            model: models[m].into(),
            prompt_tokens: p,
            completion_tokens: c,
            latency_ms: 0,
        }).collect();
        let prices = BTreeMap::from([
            ("m0".to_string(), Price { prompt: 1.0, completion: 3.0 }),
            ("m1".to_string(), Price { prompt: 0.25, completion: 2.0 }),
        ]);
        let cut = split.min(ledger.len());
        let whole = cost_report(&ledger, &prices).total;
        let a = cost_report(&ledger[..cut], &prices).total;
        let b = cost_report(&ledger[cut..], &prices).total;
        prop_assert_eq!(whole.calls, a.calls + b.calls);
        prop_assert_eq!(whole.prompt_tokens, a.prompt_tokens + b.prompt_tokens);
        prop_assert_eq!(whole.completion_tokens, a.completion_tokens + b.completion_tokens);
        match (whole.cost_usd, a.cost_usd, b.cost_usd) {
            (Some(w), Some(x), Some(y)) => prop_assert!((w - (x + y)).abs() <= 1e-9 * w.max(1.0)),
            (None, x, y) => prop_assert!(x.is_none() || y.is_none()),
            other => prop_assert!(false, "{other:?}"),
        }
    }

    #[test]
    fn kto_classes_are_balanced_for_any_seed(seed in any::<u64>(), pos in 0usize..8, neg in 0usize..8) {
        let mut trajs = Vec::new();
        for i in 0..pos { trajs.push(scripted_trajectory(&format!("p{i}"), true)); }
        for i in 0..neg { trajs.push(scripted_trajectory(&format!("n{i}"), false)); }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kto.jsonl");
        let counts = export_kto(&trajs, &path, seed).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let labels: Vec<String> = text.lines().map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["label"].as_str().unwrap().to_string()).collect();
        let p = labels.iter().filter(|l| *l == "preferred").count();
        let n = labels.iter().filter(|l| *l == "discarded").count();
        prop_assert_eq!(p, n);
        prop_assert_eq!((p, n), (counts.positives, counts.negatives));
        if pos > 0 && neg > 0 { prop_assert_eq!(p, pos.min(neg)); } else { prop_assert_eq!(p, 0); }
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            prop_assert!(parse_plan(v["output"].as_str().unwrap(), 0).is_ok());
        }
    }

    #[test]
    fn labels_partition_stages(outcomes in proptest::collection::vec(any::<bool>(), 0..8)) {
        let trajs: Vec<_> = outcomes.iter().enumerate().map(|(i, ok)| scripted_trajectory(&format!("t{i}"), *ok)).collect();
        let stages: usize = trajs.iter().map(|t| t.stages.len()).sum();
        let labeled: Vec<_> = trajs.iter().flat_map(label_trajectory).collect();
        let pref = labeled.iter().filter(|e| e.label == PreferenceLabel::Preferred).count();
        let disc = labeled.iter().filter(|e| e.label == PreferenceLabel::Discarded).count();
        prop_assert_eq!(pref + disc, stages);
    }

    #[test]
    fn value_iteration_shifts_linearly(seed in any::<u64>(), c in 0.001f64..10.0) {
        let mdp = random_mdp(&mut rng(seed), 4, 3, 4);
        let base = value_iterate(&mdp);
        let shifted = value_iterate(&mdp.shifted(c));
        for t in 0..=mdp.horizon {
            for s in 0..mdp.n_states {
                prop_assert!((shifted.get(t, s) - base.get(t, s) - t as f64 * c).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn optimum_equals_best_enumerated_policy(seed in any::<u64>()) {
        let mdp = small_mdp(seed);
        let best = enumerate_policies(&mdp)
            .iter()
            .map(|p| evaluate_policy(&mdp, p).get(mdp.horizon, mdp.initial))
            .fold(f64::NEG_INFINITY, f64::max);
        prop_assert!((best - best_dynamic_return(&mdp)).abs() < 1e-9);
    }

    #[test]
    fn replayed_memory_only_grows(seed in any::<u64>()) {
        let mut r = rng(seed);
        let plans: Vec<ScriptedResponse> = (0..4).map(|t| ScriptedResponse::text(serialize_plan(&random_valid_plan(&mut r, 4, t)))).collect();
        let executor: Vec<ScriptedResponse> = (0..30).map(|i| if (seed >> (i % 60)) & 1 == 1 { ScriptedResponse::failure("x") } else { ScriptedResponse::text(format!("r{i}")) }).collect();
        let providers = RunProviders {
            designer: Arc::new(ScriptedProvider::new("d").with_queue(Role::Designer, plans)),
            executor: Arc::new(ScriptedProvider::new("e").with_queue(Role::Executor, executor)),
            summarizer: None,
        };
        let mut cfg = RunConfig::default();
        cfg.planner.max_stages = 4;
        let result = run_task(TaskSpec::new("t", "p"), &cfg, &providers);
        let snapshots = replay_memory(&result.trajectory).unwrap();
        for pair in snapshots.windows(2) {
            let (before, after) = (&pair[0], &pair[1]);
            prop_assert!(after.len() >= before.len());
            for (old, new) in before.iter().zip(after.iter()) {
                prop_assert_eq!(old, new);
            }
        }
        prop_assert!(result.trajectory.stages.len() <= 4);
    }
}

fn small_mdp(seed: u64) -> ToyMdp {
    random_mdp(&mut rng(seed), 3, 2, 3)
}

/// Every deterministic time-varying policy.
fn enumerate_policies(mdp: &ToyMdp) -> Vec<Policy> {
    let slots = mdp.horizon * mdp.n_states;
    let total = mdp.n_actions.pow(slots as u32);
    (0..total)
        .map(|mut code| {
            let actions = (0..mdp.horizon)
                .map(|_| {
                    (0..mdp.n_states)
                        .map(|_| {
                            let a = code % mdp.n_actions;
                            code /= mdp.n_actions;
                            a
                        })
                        .collect()
                })
                .collect();
            Policy { actions }
        })
        .collect()
}

/// One-stage scripted run graded against gold "4".
fn scripted_trajectory(task_id: &str, correct: bool) -> stageflow::trajectory::TrajectoryRecord {
    let plan = r#"{"nodes":[{"id":"a","template":"GENERATE_ANSWER"},{"id":"t","template":"TERMINATE"}],"edges":[["a","t"]],"start":"a"}"#;
    let providers = RunProviders {
        designer: Arc::new(ScriptedProvider::new("d").with_queue(Role::Designer, [ScriptedResponse::text(plan)])),
        executor: Arc::new(
            ScriptedProvider::new("e").with_queue(Role::Executor, [ScriptedResponse::text(if correct { "4" } else { "5" })]),
        ),
        summarizer: None,
    };
    let task = TaskSpec::new(task_id, "compute 2+2").with_gold("4", GradingMode::Numeric);
    run_task(task, &RunConfig::default(), &providers).trajectory
}
