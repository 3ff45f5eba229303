use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::GroundTruthMdp;
use crate::cohort::OutcomeCategory;
use crate::nn::softmax;
use crate::{Error, Result};

/// Exact action values of a [`GroundTruthMdp`] by backward induction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleTables {
    pub gamma: f64,
    pub n_stages: usize,
    pub n_states: usize,
    pub n_actions: usize,
    /// `(t * n_states + s) * n_actions + a`
    pub q_star: Vec<f64>,
    /// `t * n_states + s`
    pub v_star: Vec<f64>,
    /// Softmax of Q*/temperature, laid out like `q_star`.
    pub expert_policy: Vec<f64>,
    /// Softmax of the prophylaxis preferences, `s * n_actions + a`.
    pub prophylaxis_policy: Vec<f64>,
}

impl OracleTables {
    pub fn q(&self, t: usize, s: usize, a: usize) -> f64 {
        self.q_star[(t * self.n_states + s) * self.n_actions + a]
    }

    pub fn q_row(&self, t: usize, s: usize) -> &[f64] {
        let start = (t * self.n_states + s) * self.n_actions;
        &self.q_star[start..start + self.n_actions]
    }

    pub fn v(&self, t: usize, s: usize) -> f64 {
        self.v_star[t * self.n_states + s]
    }

    pub fn expert(&self, t: usize, s: usize) -> &[f64] {
        let start = (t * self.n_states + s) * self.n_actions;
        &self.expert_policy[start..start + self.n_actions]
    }

    pub fn prophylaxis(&self, s: usize) -> &[f64] {
        &self.prophylaxis_policy[s * self.n_actions..(s + 1) * self.n_actions]
    }

    /// Optimal action; ties go to the lowest id.
    pub fn greedy_action(&self, t: usize, s: usize) -> usize {
        argmax(self.q_row(t, s))
    }

    /// Tab-separated `t, s, a, q_star` rows with a header line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("t\ts\ta\tq_star\n");
        for t in 0..self.n_stages {
            for s in 0..self.n_states {
                for a in 0..self.n_actions {
                    let _ = writeln!(out, "{t}\t{s}\t{a}\t{}", self.q(t, s, a));
                }
            }
        }
        out
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn solve_oracle(mdp: &GroundTruthMdp, gamma: f64) -> Result<OracleTables> {
    mdp.validate()?;
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::invalid("gamma", "must lie in [0, 1]"));
    }
    let (n_t, n_s, n_a) = (mdp.n_stages, mdp.n_states(), mdp.actions_per_task);
    let mut q_star = vec![0.0; n_t * n_s * n_a];
    let mut v_star = vec![0.0; n_t * n_s];
    for t in (0..n_t).rev() {
        for s in 0..n_s {
            let mut best = f64::NEG_INFINITY;
            for a in 0..n_a {
                let mut q = mdp.immediate_reward(t, s, a);
                if t + 1 < n_t {
                    let row = mdp.row(t, s, a);
                    let next: f64 = row.next.iter().enumerate().map(|(s2, p)| p * v_star[(t + 1) * n_s + s2]).sum();
                    q += gamma * next;
                }
                q_star[(t * n_s + s) * n_a + a] = q;
                best = best.max(q);
            }
            v_star[t * n_s + s] = best;
        }
    }
    let temp = mdp.expert_temperature;
    let scaled = |xs: &[f64]| softmax(&xs.iter().map(|x| x / temp).collect::<Vec<_>>());
    let expert_policy = q_star.chunks(n_a).flat_map(scaled).collect();
    let prophylaxis_policy = mdp.prophylaxis_preference.chunks(n_a).flat_map(scaled).collect();
    Ok(OracleTables {
        gamma,
        n_stages: n_t,
        n_states: n_s,
        n_actions: n_a,
        q_star,
        v_star,
        expert_policy,
        prophylaxis_policy,
    })
}

/// Which `(t, s)` pairs can be occupied under some sequence of actions,
/// `t * n_states + s`.
pub fn reachable(mdp: &GroundTruthMdp) -> Vec<bool> {
    let (n_t, n_s) = (mdp.n_stages, mdp.n_states());
    let mut out = vec![false; n_t * n_s];
    for (o, p) in out.iter_mut().zip(&mdp.initial) {
        *o = *p > 0.0;
    }
    for t in 0..n_t.saturating_sub(1) {
        for s in 0..n_s {
            if !out[t * n_s + s] {
                continue;
            }
            for a in 0..mdp.actions_per_task {
                for (s2, p) in mdp.row(t, s, a).next.iter().enumerate() {
                    if *p > 0.0 {
                        out[(t + 1) * n_s + s2] = true;
                    }
                }
            }
        }
    }
    out
}

/// Stochastic policy table; `None` marks a `(t, s)` the policy leaves
/// undefined, which is only allowed where the policy never arrives.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub n_stages: usize,
    pub n_states: usize,
    pub n_actions: usize,
    /// `t * n_states + s`
    pub rows: Vec<Option<Vec<f64>>>,
}

impl Policy {
    pub fn deterministic(mdp: &GroundTruthMdp, choose: impl Fn(usize, usize) -> Option<usize>) -> Policy {
        let n_a = mdp.actions_per_task;
        let rows = (0..mdp.n_stages)
            .flat_map(|t| (0..mdp.n_states()).map(move |s| (t, s)))
            .map(|(t, s)| {
                choose(t, s).map(|a| {
                    let mut row = vec![0.0; n_a];
                    row[a] = 1.0;
                    row
                })
            })
            .collect();
        Policy { n_stages: mdp.n_stages, n_states: mdp.n_states(), n_actions: n_a, rows }
    }

    pub fn uniform(mdp: &GroundTruthMdp) -> Policy {
        let n_a = mdp.actions_per_task;
        Policy {
            n_stages: mdp.n_stages,
            n_states: mdp.n_states(),
            n_actions: n_a,
            rows: vec![Some(vec![1.0 / n_a as f64; n_a]); mdp.n_stages * mdp.n_states()],
        }
    }

    pub fn greedy(oracle: &OracleTables, mdp: &GroundTruthMdp) -> Policy {
        Policy::deterministic(mdp, |t, s| Some(oracle.greedy_action(t, s)))
    }

    pub fn expert(oracle: &OracleTables) -> Policy {
        Policy {
            n_stages: oracle.n_stages,
            n_states: oracle.n_states,
            n_actions: oracle.n_actions,
            rows: oracle.expert_policy.chunks(oracle.n_actions).map(|c| Some(c.to_vec())).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyValue {
    /// `V^π(s, t)`, `None` where π is undefined and unreached.
    pub values: Vec<Option<f64>>,
    /// Expected discounted return from the initial distribution.
    pub aggregate: f64,
}

/// Exact discounted value of `policy` on `mdp`, ignoring censoring.
pub fn oracle_policy_value(mdp: &GroundTruthMdp, policy: &Policy, gamma: f64) -> Result<PolicyValue> {
    mdp.validate()?;
    let (n_t, n_s, n_a) = (mdp.n_stages, mdp.n_states(), mdp.actions_per_task);
    if policy.n_stages != n_t || policy.n_states != n_s || policy.n_actions != n_a || policy.rows.len() != n_t * n_s {
        return Err(Error::invalid("policy", "table shape differs from the process"));
    }
    // Forward occupancy under π finds the states π actually visits.
    let mut occupancy = vec![0.0; n_t * n_s];
    occupancy[..n_s].copy_from_slice(&mdp.initial);
    for t in 0..n_t {
        for s in 0..n_s {
            let mass = occupancy[t * n_s + s];
            if mass == 0.0 {
                continue;
            }
            let Some(row) = &policy.rows[t * n_s + s] else {
                return Err(Error::invalid("policy", format!("undefined at reachable t={t}, s={s}")));
            };
            if row.len() != n_a || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 || row.iter().any(|p| *p < 0.0) {
                return Err(Error::invalid("policy", format!("row at t={t}, s={s} is not a distribution")));
            }
            if t + 1 < n_t {
                for (a, pa) in row.iter().enumerate() {
                    for (s2, p) in mdp.row(t, s, a).next.iter().enumerate() {
                        occupancy[(t + 1) * n_s + s2] += mass * pa * p;
                    }
                }
            }
        }
    }
    let mut values: Vec<Option<f64>> = vec![None; n_t * n_s];
    for t in (0..n_t).rev() {
        for s in 0..n_s {
            let Some(row) = &policy.rows[t * n_s + s] else { continue };
            let mut v = 0.0;
            let mut defined = true;
            for (a, pa) in row.iter().enumerate() {
                if *pa == 0.0 {
                    continue;
                }
                let mut q = mdp.immediate_reward(t, s, a);
                if t + 1 < n_t {
                    for (s2, p) in mdp.row(t, s, a).next.iter().enumerate() {
                        if *p > 0.0 {
                            match values[(t + 1) * n_s + s2] {
                                Some(v2) => q += gamma * p * v2,
                                None => defined = false,
                            }
                        }
                    }
                }
                v += pa * q;
            }
            values[t * n_s + s] = defined.then_some(v);
        }
    }
    let mut aggregate = 0.0;
    for (s, p) in mdp.initial.iter().enumerate() {
        if *p > 0.0 {
            let v = values[s].ok_or_else(|| Error::invalid("policy", format!("value undefined at initial s={s}")))?;
            aggregate += p * v;
        }
    }
    Ok(PolicyValue { values, aggregate })
}

/// Probability of each terminal category for a patient following the
/// expert policy, including per-stage censoring.
pub fn expert_outcome_distribution(mdp: &GroundTruthMdp, oracle: &OracleTables) -> BTreeMap<OutcomeCategory, f64> {
    let (n_t, n_s, n_a) = (mdp.n_stages, mdp.n_states(), mdp.actions_per_task);
    let mut out: BTreeMap<OutcomeCategory, f64> = OutcomeCategory::ALL.iter().map(|c| (*c, 0.0)).collect();
    let mut mass = mdp.initial.clone();
    for t in 0..n_t {
        let mut next = vec![0.0; n_s];
        for (s, &m) in mass.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            *out.get_mut(&OutcomeCategory::DataLoss).expect("all categories") += m * mdp.censor_prob;
            let m = m * (1.0 - mdp.censor_prob);
            for a in 0..n_a {
                let pa = oracle.expert(t, s)[a];
                let row = mdp.row(t, s, a);
                *out.get_mut(&OutcomeCategory::Relapse).expect("all categories") += m * pa * row.relapse;
                *out.get_mut(&OutcomeCategory::Death).expect("all categories") += m * pa * row.death;
                for (s2, p) in row.next.iter().enumerate() {
                    if t + 1 < n_t {
                        next[s2] += m * pa * p;
                    } else {
                        *out.get_mut(&mdp.states[s2].horizon_category()).expect("all categories") += m * pa * p;
                    }
                }
            }
        }
        mass = next;
    }
    out
}
