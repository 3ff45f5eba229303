use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{OutcomeCategory, RewardTable, StageIndex, TaskKind, LAST_STAGE};
use crate::{Error, Result};

const ROW_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GvhdStatus {
    None,
    Acute,
    Chronic,
    Resolved,
}

impl GvhdStatus {
    pub const ALL: [GvhdStatus; 4] = [GvhdStatus::None, GvhdStatus::Acute, GvhdStatus::Chronic, GvhdStatus::Resolved];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatentState {
    /// Risk tier, 0 = lowest risk.
    pub tier: u8,
    pub gvhd: GvhdStatus,
}

impl LatentState {
    /// Category assigned to a survivor found in this state at the final
    /// assessment.
    pub fn horizon_category(self) -> OutcomeCategory {
        match self.gvhd {
            GvhdStatus::Acute | GvhdStatus::Chronic => OutcomeCategory::SurvivalWithGvhd,
            GvhdStatus::None | GvhdStatus::Resolved => OutcomeCategory::RelapseFreeGvhdFreeSurvival,
        }
    }

    /// Task whose action drives the transition out of this state at `t`.
    pub fn acting_task(self, t: StageIndex) -> Option<TaskKind> {
        let task = match (t.get(), self.gvhd) {
            (0, _) => TaskKind::InitialConditioning,
            (_, GvhdStatus::Acute) => TaskKind::AcuteGvhdTreatment,
            (_, GvhdStatus::Chronic) => TaskKind::ChronicGvhdTreatment,
            _ => return None,
        };
        task.admits(t).then_some(task)
    }

    pub fn acute_active(self) -> bool {
        self.gvhd == GvhdStatus::Acute
    }

    pub fn chronic_active(self) -> bool {
        self.gvhd == GvhdStatus::Chronic
    }
}

/// Outcome distribution of one (stage, state, action): survive into a
/// latent state at the next stage, or relapse, or die.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRow {
    pub next: Vec<f64>,
    pub relapse: f64,
    pub death: f64,
}

impl TransitionRow {
    pub fn total(&self) -> f64 {
        self.next.iter().sum::<f64>() + self.relapse + self.death
    }
}

/// Finite-horizon decision process with absorbing relapse/death outcomes.
///
/// After the last stage's transition the patient's latent state is mapped
/// to a terminal category by [`LatentState::horizon_category`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthMdp {
    pub states: Vec<LatentState>,
    pub n_stages: usize,
    pub actions_per_task: usize,
    /// Distribution over `states` at t = 0.
    pub initial: Vec<f64>,
    /// Indexed by `(t * n_states + s) * actions_per_task + a`.
    pub transition: Vec<TransitionRow>,
    pub terminal_reward: RewardTable,
    pub expert_temperature: f64,
    pub censor_prob: f64,
    /// Expert preference scores for prophylaxis, `s * actions_per_task + a`.
    /// Prophylaxis has no effect on the dynamics.
    pub prophylaxis_preference: Vec<f64>,
    /// Probability that a patient's baseline covariates are drawn from a
    /// random tier instead of their own.
    pub feature_noise: f64,
    /// Probability that an administered action is missing from the record.
    pub action_missing_prob: f64,
}

impl GroundTruthMdp {
    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn n_tiers(&self) -> usize {
        self.states.iter().map(|s| usize::from(s.tier) + 1).max().unwrap_or(0)
    }

    pub fn row(&self, t: usize, s: usize, a: usize) -> &TransitionRow {
        &self.transition[(t * self.n_states() + s) * self.actions_per_task + a]
    }

    pub fn state_index(&self, state: LatentState) -> Option<usize> {
        self.states.iter().position(|s| *s == state)
    }

    /// Expected reward received on leaving `(t, s)` with action `a`.
    pub fn immediate_reward(&self, t: usize, s: usize, a: usize) -> f64 {
        let row = self.row(t, s, a);
        let r = &self.terminal_reward;
        let mut total = row.relapse * r.relapse + row.death * r.death;
        if t + 1 == self.n_stages {
            for (p, state) in row.next.iter().zip(&self.states) {
                if *p > 0.0 {
                    total += p * r.value(state.horizon_category()).unwrap_or(0.0);
                }
            }
        }
        total
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_states();
        if n == 0 || n > 32 {
            return Err(Error::invalid("states", format!("{n} states; expected 1..=32")));
        }
        if self.n_stages == 0 || self.actions_per_task == 0 {
            return Err(Error::invalid("n_stages", "stages and actions must be positive"));
        }
        if self.transition.len() != self.n_stages * n * self.actions_per_task {
            return Err(Error::DimensionMismatch {
                context: "transition table",
                expected: self.n_stages * n * self.actions_per_task,
                found: self.transition.len(),
            });
        }
        check_distribution("initial", &self.initial, n)?;
        for (i, row) in self.transition.iter().enumerate() {
            if row.next.len() != n {
                return Err(Error::DimensionMismatch { context: "transition row", expected: n, found: row.next.len() });
            }
            let negative = row.next.iter().chain([&row.relapse, &row.death]).any(|p| !(*p >= 0.0));
            if negative || (row.total() - 1.0).abs() > ROW_TOLERANCE {
                return Err(Error::invalid(
                    "transition",
                    format!("row {i} is not a distribution (sum {})", row.total()),
                ));
            }
        }
        if !(self.expert_temperature > 0.0) {
            return Err(Error::invalid("expert_temperature", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.censor_prob) {
            return Err(Error::invalid("censor_prob", "must lie in [0, 1)"));
        }
        for (name, p) in [("feature_noise", self.feature_noise), ("action_missing_prob", self.action_missing_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(name, "must lie in [0, 1]"));
            }
        }
        if self.prophylaxis_preference.len() != n * self.actions_per_task {
            return Err(Error::DimensionMismatch {
                context: "prophylaxis_preference",
                expected: n * self.actions_per_task,
                found: self.prophylaxis_preference.len(),
            });
        }
        Ok(())
    }

    /// Extra constraints for generating cohorts: six stages, no relapse or
    /// death after the last stage, and actions only matter where a task acts.
    pub fn validate_for_cohort(&self) -> Result<()> {
        self.validate()?;
        if self.n_stages != usize::from(LAST_STAGE) + 1 {
            return Err(Error::invalid("n_stages", "cohort generation needs 6 stages"));
        }
        if self.states.iter().any(|s| s.tier >= 32) {
            return Err(Error::invalid("states", "tier out of range"));
        }
        let last = self.n_stages - 1;
        for s in 0..self.n_states() {
            for a in 0..self.actions_per_task {
                let row = self.row(last, s, a);
                if row.relapse > 0.0 || row.death > 0.0 {
                    return Err(Error::invalid("transition", "relapse or death after the last stage"));
                }
            }
        }
        for t in StageIndex::ALL {
            for (s, state) in self.states.iter().enumerate() {
                if state.acting_task(t).is_none() {
                    let first = self.row(t.as_usize(), s, 0);
                    if (1..self.actions_per_task).any(|a| self.row(t.as_usize(), s, a) != first) {
                        return Err(Error::invalid(
                            "transition",
                            format!("action changes dynamics of {state:?} at t={t} where no task acts"),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

fn check_distribution(name: &str, p: &[f64], len: usize) -> Result<()> {
    if p.len() != len {
        return Err(Error::DimensionMismatch { context: "distribution", expected: len, found: p.len() });
    }
    if p.iter().any(|v| !(*v >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > ROW_TOLERANCE {
        return Err(Error::invalid(name, "not a probability distribution"));
    }
    Ok(())
}

/// Parameters of the default synthetic transplant cohort.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortMdpSpec {
    pub tiers: usize,
    pub actions_per_task: usize,
    pub expert_temperature: f64,
    pub censor_prob: f64,
    pub feature_noise: f64,
    pub action_missing_prob: f64,
    /// Seeds the treatment effect tables.
    pub seed: u64,
}

impl Default for CohortMdpSpec {
    fn default() -> Self {
        CohortMdpSpec {
            tiers: 4,
            actions_per_task: 12,
            expert_temperature: 0.1,
            censor_prob: 0.03,
            feature_noise: 0.03,
            action_missing_prob: 0.0,
            seed: 0,
        }
    }
}

fn grid(tiers: usize) -> Vec<LatentState> {
    (0..tiers).flat_map(|k| GvhdStatus::ALL.map(|gvhd| LatentState { tier: k as u8, gvhd })).collect()
}

fn idx(tier: usize, gvhd: GvhdStatus) -> usize {
    tier * 4 + GvhdStatus::ALL.iter().position(|g| *g == gvhd).expect("known status")
}

/// Per-tier effect of each action: one clearly best action (1.0), one
/// runner-up (0.3), the rest in [0, 0.25].
fn effect_table(rng: &mut ChaCha8Rng, tiers: usize, actions: usize) -> Vec<Vec<f64>> {
    (0..tiers)
        .map(|_| {
            let mut order: Vec<usize> = (0..actions).collect();
            order.shuffle(rng);
            let mut eff = vec![0.0; actions];
            for (rank, &a) in order.iter().enumerate() {
                eff[a] = match rank {
                    0 => 1.0,
                    1 => 0.3,
                    _ => rng.random_range(0.0..0.25),
                };
            }
            eff
        })
        .collect()
}

struct RowBuilder {
    row: TransitionRow,
}

impl RowBuilder {
    fn new(n: usize, relapse: f64, death: f64) -> Self {
        RowBuilder { row: TransitionRow { next: vec![0.0; n], relapse, death } }
    }

    fn alive(&self) -> f64 {
        1.0 - self.row.relapse - self.row.death
    }

    /// Splits the surviving mass over `targets` in proportion to `weights`.
    fn survive(mut self, targets: &[(usize, f64)]) -> TransitionRow {
        let alive = self.alive();
        let total: f64 = targets.iter().map(|(_, w)| w).sum();
        for (s, w) in targets {
            self.row.next[*s] += alive * w / total;
        }
        self.row
    }
}

impl GroundTruthMdp {
    /// Default transplant cohort: tiers × {None, Acute, Chronic, Resolved}.
    pub fn cohort(spec: &CohortMdpSpec) -> Result<GroundTruthMdp> {
        if spec.tiers == 0 || spec.tiers > 8 {
            return Err(Error::invalid("tiers", "must lie in 1..=8"));
        }
        if spec.actions_per_task < 2 {
            return Err(Error::invalid("actions_per_task", "need at least 2 actions"));
        }
        let (k_n, a_n) = (spec.tiers, spec.actions_per_task);
        let states = grid(k_n);
        let n = states.len();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let cond = effect_table(&mut rng, k_n, a_n);
        let acute = effect_table(&mut rng, k_n, a_n);
        let chronic = effect_table(&mut rng, k_n, a_n);
        let proph = effect_table(&mut rng, k_n, a_n);

        // Hazards shrink as follow-up accumulates; none after the last stage.
        const DECAY: [f64; 6] = [1.0, 1.0, 0.8, 0.6, 0.4, 0.0];
        const CHRONIC_ONSET: [f64; 6] = [0.0, 1.0, 0.8, 0.4, 0.1, 0.0];
        let mut transition = Vec::with_capacity(6 * n * a_n);
        for t in 0..6usize {
            for state in &states {
                let k = usize::from(state.tier);
                let risk = if k_n > 1 { k as f64 / (k_n - 1) as f64 } else { 0.0 };
                let rel0 = (0.03 + 0.05 * risk) * DECAY[t];
                let death0 = (0.02 + 0.04 * risk) * DECAY[t];
                let onset = (0.10 + 0.08 * risk) * CHRONIC_ONSET[t];
                let to = |g| idx(k, g);
                for a in 0..a_n {
                    use GvhdStatus as G;
                    let row = match (t, state.gvhd) {
                        (0, _) => {
                            let fail = 0.6 * (1.0 - cond[k][a]);
                            let p_acute = 0.30 + 0.15 * risk;
                            RowBuilder::new(n, rel0 + 0.6 * fail, death0 + 0.4 * fail)
                                .survive(&[(to(G::Acute), p_acute), (to(G::None), 1.0 - p_acute)])
                        }
                        (5, G::Chronic) => {
                            let e = chronic[k][a];
                            RowBuilder::new(n, 0.0, 0.0).survive(&[(to(G::Resolved), e), (to(G::Chronic), 1.0 - e)])
                        }
                        (5, G::Acute) => RowBuilder::new(n, 0.0, 0.0).survive(&[(to(G::Resolved), 1.0)]),
                        (5, g) => RowBuilder::new(n, 0.0, 0.0).survive(&[(to(g), 1.0)]),
                        (1 | 2, G::Acute) => {
                            let e = acute[k][a];
                            let resolve = 0.3 + 0.6 * e;
                            let b = RowBuilder::new(n, rel0, death0 + 0.5 * (1.0 - e));
                            if t == 1 {
                                let rest = 1.0 - resolve;
                                b.survive(&[
                                    (to(G::Resolved), resolve),
                                    (to(G::Acute), 0.6 * rest),
                                    (to(G::Chronic), 0.4 * rest),
                                ])
                            } else {
                                b.survive(&[(to(G::Resolved), resolve), (to(G::Chronic), 1.0 - resolve)])
                            }
                        }
                        (_, G::Chronic) if t >= 2 => {
                            let e = chronic[k][a];
                            let resolve = 0.25 + 0.6 * e;
                            RowBuilder::new(n, rel0, death0 + 0.4 * (1.0 - e))
                                .survive(&[(to(G::Resolved), resolve), (to(G::Chronic), 1.0 - resolve)])
                        }
                        (_, G::Chronic) => RowBuilder::new(n, rel0, death0 + 0.2)
                            .survive(&[(to(G::Resolved), 0.55), (to(G::Chronic), 0.45)]),
                        (1, G::None) => RowBuilder::new(n, rel0, death0).survive(&[
                            (to(G::Acute), 0.10),
                            (to(G::Chronic), onset),
                            (to(G::None), 0.90 - onset),
                        ]),
                        (_, G::None) => RowBuilder::new(n, rel0, death0)
                            .survive(&[(to(G::Chronic), onset), (to(G::None), 1.0 - onset)]),
                        // Resolved, and acute GVHD past its treatment window.
                        (_, G::Resolved | G::Acute) => RowBuilder::new(n, rel0, death0)
                            .survive(&[(to(G::Chronic), 1.5 * onset), (to(G::Resolved), 1.0 - 1.5 * onset)]),
                    };
                    transition.push(row);
                }
            }
        }

        let mut initial = vec![0.0; n];
        for k in 0..k_n {
            initial[idx(k, GvhdStatus::None)] = 1.0 / k_n as f64;
        }
        let prophylaxis_preference = states
            .iter()
            .flat_map(|s| proph[usize::from(s.tier)].iter().map(|e| 0.4 * e).collect::<Vec<_>>())
            .collect();
        let mdp = GroundTruthMdp {
            states,
            n_stages: 6,
            actions_per_task: a_n,
            initial,
            transition,
            terminal_reward: RewardTable::default(),
            expert_temperature: spec.expert_temperature,
            censor_prob: spec.censor_prob,
            prophylaxis_preference,
            feature_noise: spec.feature_noise,
            action_missing_prob: spec.action_missing_prob,
        };
        mdp.validate_for_cohort()?;
        Ok(mdp)
    }

    /// Small deterministic process whose only consequential decisions are
    /// acute GVHD treatment at t = 1 and t = 2: 4 tiers × 4 statuses,
    /// 4 actions, no censoring, and a near-uniform expert so every action is
    /// observed. Covariates identify the tier exactly.
    pub fn acute_benchmark(seed: u64) -> GroundTruthMdp {
        use GvhdStatus as G;
        #[derive(Clone, Copy)]
        enum Out {
            To(GvhdStatus),
            Relapse,
            Death,
        }
        let (k_n, a_n) = (4usize, 4usize);
        let states = grid(k_n);
        let n = states.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut outcomes = |choices: [Out; 4]| -> Vec<Vec<Out>> {
            (0..k_n)
                .map(|_| {
                    let mut c = choices.to_vec();
                    c.shuffle(&mut rng);
                    c
                })
                .collect()
        };
        let first = outcomes([Out::To(G::Acute), Out::To(G::Chronic), Out::Relapse, Out::Death]);
        let second = outcomes([Out::To(G::Resolved), Out::To(G::Chronic), Out::Relapse, Out::Death]);
        let row_for = |k: usize, out: Out| -> TransitionRow {
            let mut row = TransitionRow { next: vec![0.0; n], relapse: 0.0, death: 0.0 };
            match out {
                Out::To(g) => row.next[idx(k, g)] = 1.0,
                Out::Relapse => row.relapse = 1.0,
                Out::Death => row.death = 1.0,
            }
            row
        };
        let mut transition = Vec::with_capacity(6 * n * a_n);
        for t in 0..6usize {
            for state in &states {
                let k = usize::from(state.tier);
                for a in 0..a_n {
                    let out = match (t, state.gvhd) {
                        (0, _) => Out::To(G::Acute),
                        (1, G::Acute) => first[k][a],
                        (2, G::Acute) => second[k][a],
                        (_, G::Acute) => Out::To(G::Resolved),
                        (_, g) => Out::To(g),
                    };
                    transition.push(row_for(k, out));
                }
            }
        }
        let mut initial = vec![0.0; n];
        for k in 0..k_n {
            initial[idx(k, G::None)] = 0.25;
        }
        GroundTruthMdp {
            states,
            n_stages: 6,
            actions_per_task: a_n,
            initial,
            transition,
            terminal_reward: RewardTable::default(),
            expert_temperature: 10.0,
            censor_prob: 0.0,
            prophylaxis_preference: vec![0.0; n * a_n],
            feature_noise: 0.0,
            action_missing_prob: 0.0,
        }
    }
}
