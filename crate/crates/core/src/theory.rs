//! Finite-horizon toy decision processes for checking the planning bounds:
//! fixed-action (static) play never beats the state-dependent optimum, and a
//! policy's shortfall is bounded by the sum of its per-step Bellman residuals.
//!
//! Value tables are indexed by steps remaining, so `V_0 = 0` everywhere.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyMdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub horizon: usize,
    /// `reward[s][a]`
    pub reward: Vec<Vec<f64>>,
    /// `transition[s][a][s']`
    pub transition: Vec<Vec<Vec<f64>>>,
    pub initial: usize,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MdpError {
    #[error("need at least one state and one action")]
    Empty,
    #[error("reward/transition shape does not match {0} states x {1} actions")]
    Shape(usize, usize),
    #[error("transition row ({0}, {1}) sums to {2}")]
    NotStochastic(usize, usize, f64),
    #[error("initial state {0} out of range")]
    Initial(usize),
    #[error("reward ({0}, {1}) is not finite")]
    Reward(usize, usize),
}

impl ToyMdp {
    pub fn new(
        reward: Vec<Vec<f64>>,
        transition: Vec<Vec<Vec<f64>>>,
        horizon: usize,
        initial: usize,
    ) -> Result<Self, MdpError> {
        let n_states = reward.len();
        let n_actions = reward.first().map_or(0, Vec::len);
        let mdp = Self { n_states, n_actions, horizon, reward, transition, initial };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn validate(&self) -> Result<(), MdpError> {
        let (ns, na) = (self.n_states, self.n_actions);
        if ns == 0 || na == 0 {
            return Err(MdpError::Empty);
        }
        if self.reward.len() != ns
            || self.transition.len() != ns
            || self.reward.iter().any(|r| r.len() != na)
            || self.transition.iter().any(|row| row.len() != na || row.iter().any(|p| p.len() != ns))
        {
            return Err(MdpError::Shape(ns, na));
        }
        if self.initial >= ns {
            return Err(MdpError::Initial(self.initial));
        }
        for s in 0..ns {
            for a in 0..na {
                if !self.reward[s][a].is_finite() {
                    return Err(MdpError::Reward(s, a));
                }
                let p = &self.transition[s][a];
                let sum: f64 = p.iter().sum();
                if p.iter().any(|&x| x < 0.0) || (sum - 1.0).abs() > TOLERANCE {
                    return Err(MdpError::NotStochastic(s, a, sum));
                }
            }
        }
        Ok(())
    }

    /// `r(s,a) + E[V(s')]`
    pub fn backup(&self, values: &[f64], s: usize, a: usize) -> f64 {
        self.reward[s][a] + self.transition[s][a].iter().zip(values).map(|(p, v)| p * v).sum::<f64>()
    }

    /// Copy with `c` added to every reward.
    pub fn shifted(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.reward.iter_mut().flatten().for_each(|r| *r += c);
        out
    }
}

/// `values[t][s]` for `t` steps remaining, `t = 0..=horizon`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueTable {
    pub values: Vec<Vec<f64>>,
}

impl ValueTable {
    pub fn get(&self, steps_remaining: usize, state: usize) -> f64 {
        self.values[steps_remaining][state]
    }
}

/// Action per (steps remaining, state); `actions[t - 1][s]` for `t = 1..=T`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Policy {
    pub actions: Vec<Vec<usize>>,
}

impl Policy {
    pub fn from_fn(mdp: &ToyMdp, f: impl Fn(usize, usize) -> usize) -> Self {
        Self { actions: (1..=mdp.horizon).map(|t| (0..mdp.n_states).map(|s| f(t, s)).collect()).collect() }
    }

    /// Plays `action` regardless of time and state.
    pub fn constant(mdp: &ToyMdp, action: usize) -> Self {
        Self::from_fn(mdp, |_, _| action)
    }

    pub fn random(mdp: &ToyMdp, rng: &mut impl Rng) -> Self {
        Self {
            actions: (0..mdp.horizon)
                .map(|_| (0..mdp.n_states).map(|_| rng.random_range(0..mdp.n_actions)).collect())
                .collect(),
        }
    }

    /// Greedy with respect to the optimal values (ties to the lowest action).
    pub fn optimal(mdp: &ToyMdp) -> Self {
        let v = value_iterate(mdp);
        Self::from_fn(mdp, |t, s| argmax(mdp, &v.values[t - 1], s).0)
    }

    /// Argmin counterpart of [`Policy::optimal`] applied at every step.
    pub fn worst(mdp: &ToyMdp) -> Self {
        let mut values = vec![vec![0.0; mdp.n_states]];
        let mut actions = Vec::with_capacity(mdp.horizon);
        for t in 1..=mdp.horizon {
            let prev = &values[t - 1];
            let (row, vals): (Vec<usize>, Vec<f64>) = (0..mdp.n_states)
                .map(|s| {
                    (0..mdp.n_actions)
                        .map(|a| (a, mdp.backup(prev, s, a)))
                        .fold((0, f64::INFINITY), |best, (a, q)| if q < best.1 { (a, q) } else { best })
                })
                .unzip();
            actions.push(row);
            values.push(vals);
        }
        Self { actions }
    }

    pub fn action(&self, steps_remaining: usize, state: usize) -> usize {
        self.actions[steps_remaining - 1][state]
    }
}

fn argmax(mdp: &ToyMdp, prev: &[f64], s: usize) -> (usize, f64) {
    (0..mdp.n_actions)
        .map(|a| (a, mdp.backup(prev, s, a)))
        .fold((0, f64::NEG_INFINITY), |best, (a, q)| if q > best.1 { (a, q) } else { best })
}

/// Backward induction: `V*_t(s) = max_a [r(s,a) + E V*_{t-1}(s')]`.
pub fn value_iterate(mdp: &ToyMdp) -> ValueTable {
    let mut values = vec![vec![0.0; mdp.n_states]];
    for t in 1..=mdp.horizon {
        let row = (0..mdp.n_states).map(|s| argmax(mdp, &values[t - 1], s).1).collect();
        values.push(row);
    }
    ValueTable { values }
}

pub fn evaluate_policy(mdp: &ToyMdp, policy: &Policy) -> ValueTable {
    let mut values = vec![vec![0.0; mdp.n_states]];
    for t in 1..=mdp.horizon {
        let row = (0..mdp.n_states).map(|s| mdp.backup(&values[t - 1], s, policy.action(t, s))).collect();
        values.push(row);
    }
    ValueTable { values }
}

/// Best return from the initial state when one action is played throughout.
pub fn best_static_return(mdp: &ToyMdp) -> f64 {
    (0..mdp.n_actions)
        .map(|a| evaluate_policy(mdp, &Policy::constant(mdp, a)).get(mdp.horizon, mdp.initial))
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn best_dynamic_return(mdp: &ToyMdp) -> f64 {
    value_iterate(mdp).get(mdp.horizon, mdp.initial)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    /// `V*_T(s0) - V^pi_T(s0)`
    pub gap: f64,
    /// Sum of the per-step residuals.
    pub bound: f64,
    /// `residuals[t - 1]` is the residual with `t` steps remaining.
    pub residuals: Vec<f64>,
    pub holds: bool,
}

/// Residual with `t` steps remaining: over states, the largest difference
/// between the best one-step backup of the policy's own values and the
/// backup of the action the policy takes.
pub fn residual_bound_check(mdp: &ToyMdp, policy: &Policy) -> BoundCheck {
    let optimal = value_iterate(mdp);
    let own = evaluate_policy(mdp, policy);
    let residuals: Vec<f64> = (1..=mdp.horizon)
        .map(|t| {
            let prev = &own.values[t - 1];
            (0..mdp.n_states)
                .map(|s| (argmax(mdp, prev, s).1 - mdp.backup(prev, s, policy.action(t, s))).abs())
                .fold(0.0, f64::max)
        })
        .collect();
    let gap = optimal.get(mdp.horizon, mdp.initial) - own.get(mdp.horizon, mdp.initial);
    let bound = residuals.iter().sum();
    BoundCheck { gap, bound, residuals, holds: gap <= bound + TOLERANCE }
}

/// Rewards uniform in [0, 1); transition rows are normalized uniform draws.
pub fn random_mdp(rng: &mut impl Rng, max_states: usize, max_actions: usize, max_horizon: usize) -> ToyMdp {
    let ns = rng.random_range(1..=max_states);
    let na = rng.random_range(1..=max_actions);
    let horizon = rng.random_range(1..=max_horizon);
    let reward = (0..ns).map(|_| (0..na).map(|_| rng.random::<f64>()).collect()).collect();
    let transition = (0..ns)
        .map(|_| {
            (0..na)
                .map(|_| {
                    let raw: Vec<f64> = (0..ns).map(|_| 1.0 - rng.random::<f64>()).collect();
                    let sum: f64 = raw.iter().sum();
                    raw.into_iter().map(|x| x / sum).collect()
                })
                .collect()
        })
        .collect();
    let initial = rng.random_range(0..ns);
    ToyMdp { n_states: ns, n_actions: na, horizon, reward, transition, initial }
}

/// Generator for sweep instance `index`: independent stream per index.
pub fn instance_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Two states, two actions, horizon 2. From the start, action 0 pays 1 and
/// moves on while action 1 pays nothing and stays; in the second state only
/// action 1 pays. Playing 0 then 1 earns 2, any fixed action at most 1.
pub fn strict_gap_witness() -> ToyMdp {
    ToyMdp::new(
        vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        vec![vec![vec![0.0, 1.0], vec![1.0, 0.0]], vec![vec![0.0, 1.0], vec![0.0, 1.0]]],
        2,
        0,
    )
    .expect("witness is well formed")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub instances: usize,
    pub seed: u64,
    /// Instances where the static optimum exceeds the dynamic one.
    pub never_worse_violations: usize,
    /// (MDP, random policy) pairs where the gap exceeds the residual sum.
    pub bound_violations: usize,
    /// Instances where dynamic strictly beats static.
    pub strict_gaps: usize,
    pub max_dynamic_advantage: f64,
    pub max_gap: f64,
    pub max_bound: f64,
    /// Smallest `bound - gap` seen.
    pub min_slack: f64,
    pub witness_dynamic: f64,
    pub witness_static: f64,
}

struct InstanceResult {
    advantage: f64,
    check: BoundCheck,
}

/// Checks both bounds on `instances` seeded random MDPs (up to 4 states,
/// 3 actions, horizon 4), each paired with a random time-varying policy.
pub fn theory_sweep(instances: usize, seed: u64) -> SweepSummary {
    let results: Vec<InstanceResult> = (0..instances as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = instance_rng(seed, i);
            let mdp = random_mdp(&mut rng, 4, 3, 4);
            let policy = Policy::random(&mdp, &mut rng);
            InstanceResult {
                advantage: best_dynamic_return(&mdp) - best_static_return(&mdp),
                check: residual_bound_check(&mdp, &policy),
            }
        })
        .collect();
    let witness = strict_gap_witness();
    SweepSummary {
        instances,
        seed,
        never_worse_violations: results.iter().filter(|r| r.advantage < -TOLERANCE).count(),
        bound_violations: results.iter().filter(|r| !r.check.holds).count(),
        strict_gaps: results.iter().filter(|r| r.advantage > TOLERANCE).count(),
        max_dynamic_advantage: results.iter().map(|r| r.advantage).fold(0.0, f64::max),
        max_gap: results.iter().map(|r| r.check.gap).fold(0.0, f64::max),
        max_bound: results.iter().map(|r| r.check.bound).fold(0.0, f64::max),
        min_slack: results.iter().map(|r| r.check.bound - r.check.gap).fold(f64::INFINITY, f64::min),
        witness_dynamic: best_dynamic_return(&witness),
        witness_static: best_static_return(&witness),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_reward(r: f64, horizon: usize) -> ToyMdp {
        ToyMdp::new(vec![vec![r]], vec![vec![vec![1.0]]], horizon, 0).unwrap()
    }

    /// s0 -> s1 -> s1 with rewards 0 then 5, one action.
    fn chain() -> ToyMdp {
        ToyMdp::new(vec![vec![0.0], vec![5.0]], vec![vec![vec![0.0, 1.0]], vec![vec![0.0, 1.0]]], 2, 0).unwrap()
    }

    #[test]
    fn constant_reward_accumulates() {
        assert_eq!(best_dynamic_return(&constant_reward(1.0, 3)), 3.0);
        assert_eq!(value_iterate(&constant_reward(1.0, 0)).values, vec![vec![0.0]]);
    }

    #[test]
    fn chain_values() {
        let m = chain();
        assert_eq!(value_iterate(&m).get(2, 0), 5.0);
        assert_eq!(best_static_return(&m), 5.0);
    }

    #[test]
    fn always_paying_action_is_best_static() {
        let m = ToyMdp::new(vec![vec![1.0, 0.0]], vec![vec![vec![1.0], vec![1.0]]], 4, 0).unwrap();
        assert_eq!(best_static_return(&m), 4.0);
        assert_eq!(best_dynamic_return(&m), 4.0);
    }

    #[test]
    fn witness_has_strict_gap() {
        let m = strict_gap_witness();
        assert_eq!(best_static_return(&m), 1.0);
        assert_eq!(best_dynamic_return(&m), 2.0);
    }

    #[test]
    fn optimal_policy_has_zero_gap() {
        let m = strict_gap_witness();
        let c = residual_bound_check(&m, &Policy::optimal(&m));
        assert_eq!(c.gap, 0.0);
        assert_eq!(c.bound, 0.0);
        assert!(c.holds);
    }

    #[test]
    fn worst_policy_on_witness() {
        // Worst play: action 1 twice from the start, earning 0.
        let m = strict_gap_witness();
        let worst = Policy::worst(&m);
        assert_eq!(evaluate_policy(&m, &worst).get(2, 0), 0.0);
        let c = residual_bound_check(&m, &worst);
        assert_eq!(c.gap, 2.0);
        // own values: V_1 = [0, 0]; residual at t=1 is max(1-0, 1-0) = 1.
        // t=2: best backup from s0 is 1 + 0, taken is 0 + 0; from s1, 1 - 0.
        assert_eq!(c.residuals, vec![1.0, 1.0]);
        assert!(c.holds);
    }

    #[test]
    fn rejects_bad_rows() {
        assert!(matches!(
            ToyMdp::new(vec![vec![0.0]], vec![vec![vec![0.5]]], 1, 0),
            Err(MdpError::NotStochastic(0, 0, _))
        ));
        assert!(matches!(ToyMdp::new(vec![], vec![], 1, 0), Err(MdpError::Empty)));
        assert!(matches!(ToyMdp::new(vec![vec![0.0]], vec![vec![vec![1.0]]], 1, 3), Err(MdpError::Initial(3))));
    }

    #[test]
    fn random_instances_are_valid_and_reproducible() {
        for i in 0..50 {
            let a = random_mdp(&mut instance_rng(3, i), 4, 3, 4);
            a.validate().unwrap();
            assert_eq!(a, random_mdp(&mut instance_rng(3, i), 4, 3, 4));
        }
    }

    #[test]
    fn small_sweep() {
        let s = theory_sweep(100, 11);
        assert_eq!(s.never_worse_violations, 0);
        assert_eq!(s.bound_violations, 0);
        assert_eq!((s.witness_dynamic, s.witness_static), (2.0, 1.0));
        assert_eq!(s, theory_sweep(100, 11));
    }
}
