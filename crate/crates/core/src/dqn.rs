//! Deep Q-learning: replay memory, ε-greedy behavior, and a target network
//! tracked by soft updates.
//!
//! The online loop plays episodes against an [`Environment`]; the bundled
//! [`MdpEnvironment`] simulates a [`GroundTruthMdp`] and encodes the latent
//! (state, stage) pair with [`FeatureLayout::StateCode`].

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{ActionId, FeatureLayout, FeatureVector};
use crate::nn::{adam_step, init_mlp, loss_and_grad, AdamState, Checkpoint, Example, Head, MlpParams, TrainConfig};
use crate::stagewise::best_of;
use crate::synth::{reachable, GroundTruthMdp, OracleTables};
use crate::{Error, Result};

pub const AGENT_FORMAT: &str = "dtr-agent/1";
pub const HIDDEN: [usize; 2] = [32, 64];
pub const DEFAULT_CAPACITY: usize = 20_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: FeatureVector,
    pub a: ActionId,
    pub r: f64,
    /// Not read when `terminal` is set.
    pub s_next: FeatureVector,
    pub terminal: bool,
    /// Actions the bootstrap may maximize over at `s_next`; empty means all.
    pub next_admissible: Vec<ActionId>,
}

impl Transition {
    pub fn terminal(s: FeatureVector, a: ActionId, r: f64) -> Self {
        let s_next = s.clone();
        Transition { s, a, r, s_next, terminal: true, next_admissible: Vec::new() }
    }
}

/// Bounded FIFO memory; a push into a full buffer evicts the oldest entry.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("buffer_capacity", "must be positive"));
        }
        Ok(ReplayBuffer { capacity, items: VecDeque::with_capacity(capacity.min(1 << 16)) })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    pub fn push(&mut self, transition: Transition) -> Result<()> {
        if !transition.r.is_finite() {
            return Err(Error::invalid("r", "reward must be finite"));
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(transition);
        Ok(())
    }

    /// `n` draws with replacement.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Result<Vec<Transition>> {
        if self.items.len() < n || n == 0 {
            return Err(Error::invalid(
                "batch_size",
                format!("buffer holds {} transitions, batch needs {n}", self.items.len()),
            ));
        }
        Ok((0..n).map(|_| self.items[rng.random_range(0..self.items.len())].clone()).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub gamma: f64,
    pub tau: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub seed: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            gamma: 0.99,
            tau: 0.01,
            epsilon: 0.1,
            learning_rate: 1e-3,
            batch_size: 32,
            buffer_capacity: DEFAULT_CAPACITY,
            seed: 0,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::invalid("gamma", "must lie in [0, 1]"));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::invalid("tau", "must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::invalid("epsilon", "must lie in [0, 1]"));
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 {
            return Err(Error::invalid("batch_size", "batch size and capacity must be positive"));
        }
        self.optimizer().validate()
    }

    fn optimizer(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QAgent {
    /// θ
    pub q_net: MlpParams,
    /// θ′
    pub target_net: MlpParams,
    pub config: AgentConfig,
    pub buffer: ReplayBuffer,
    pub optimizer: AdamState,
}

impl QAgent {
    /// Fresh agent with θ′ = θ and an empty buffer.
    pub fn new(input_dim: usize, n_actions: usize, config: AgentConfig) -> Result<Self> {
        config.validate()?;
        let q_net = init_mlp(&[input_dim, HIDDEN[0], HIDDEN[1], n_actions], config.seed)?;
        Ok(QAgent {
            target_net: q_net.clone(),
            optimizer: AdamState::new(&q_net),
            buffer: ReplayBuffer::new(config.buffer_capacity)?,
            q_net,
            config,
        })
    }

    pub fn n_actions(&self) -> usize {
        self.q_net.output_dim()
    }

    fn all_actions(&self) -> Vec<ActionId> {
        (0..self.n_actions()).collect()
    }

    pub fn q_values(&self, s: &FeatureVector) -> Result<Vec<f64>> {
        self.q_net.forward(s.as_slice())
    }

    /// ε-greedy over `admissible`; greedy ties go to the lowest id.
    pub fn select_action(&self, s: &FeatureVector, admissible: &[ActionId], rng: &mut impl Rng) -> Result<ActionId> {
        if admissible.is_empty() {
            return Err(Error::Empty("admissible actions"));
        }
        if admissible.len() == 1 {
            return Ok(admissible[0]);
        }
        if rng.random::<f64>() < self.config.epsilon {
            return Ok(admissible[rng.random_range(0..admissible.len())]);
        }
        Ok(best_of(&self.q_values(s)?, admissible)?.0)
    }

    /// r for terminal transitions, else r + γ·max over the admissible next
    /// actions of the target network.
    pub fn td_target(&self, tr: &Transition) -> Result<f64> {
        if tr.terminal {
            return Ok(tr.r);
        }
        let q = self.target_net.forward(tr.s_next.as_slice())?;
        let all;
        let admissible = if tr.next_admissible.is_empty() {
            all = self.all_actions();
            &all
        } else {
            &tr.next_admissible
        };
        Ok(tr.r + self.config.gamma * best_of(&q, admissible)?.1)
    }

    /// One Adam step on `batch` with targets from the current θ′, followed
    /// by a soft update. Returns the batch loss before the step.
    pub fn train_on(&mut self, batch: &[Transition]) -> Result<f64> {
        let mut examples = Vec::with_capacity(batch.len());
        for tr in batch {
            examples.push(Example::value(tr.s.values.clone(), tr.a, self.td_target(tr)?));
        }
        let (loss, grad) = loss_and_grad(&self.q_net, &examples, Head::SquaredError)?;
        adam_step(&mut self.q_net, &grad, &mut self.optimizer, &self.config.optimizer())?;
        self.soft_update()?;
        Ok(loss)
    }

    /// Samples a batch from the buffer and trains on it.
    pub fn train_step(&mut self, rng: &mut impl Rng) -> Result<f64> {
        let batch = self.buffer.sample(self.config.batch_size, rng)?;
        self.train_on(&batch)
    }

    /// θ′ ← τθ + (1−τ)θ′
    pub fn soft_update(&mut self) -> Result<()> {
        if !self.q_net.same_shape(&self.target_net) {
            return Err(Error::invalid("target_net", "shape differs from q_net"));
        }
        let tau = self.config.tau;
        for (tp, p) in self.target_net.iter_mut().zip(self.q_net.iter()) {
            *tp = tau * p + (1.0 - tau) * *tp;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub state: FeatureVector,
    pub admissible: Vec<ActionId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    /// `None` once the episode has ended.
    pub next: Option<Observation>,
}

pub trait Environment {
    fn n_actions(&self) -> usize;
    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Observation;
    fn step(&mut self, action: ActionId, rng: &mut ChaCha8Rng) -> Result<StepOutcome>;
}

/// Binary code of a latent (state, stage) pair: five state bits then three
/// stage bits.
pub fn state_code(s: usize, t: usize) -> Result<FeatureVector> {
    if s >= 32 || t >= 8 {
        return Err(Error::invalid("state", format!("(s={s}, t={t}) does not fit the state code")));
    }
    let bits = s | (t << 5);
    FeatureVector::new((0..8).map(|i| f64::from(((bits >> i) & 1) as u8)).collect(), FeatureLayout::StateCode)
}

/// Episodes of a [`GroundTruthMdp`] from t = 0 to termination.
#[derive(Debug, Clone)]
pub struct MdpEnvironment<'a> {
    mdp: &'a GroundTruthMdp,
    /// Restrict choices to the expert's `n` most probable actions.
    expert_top_n: Option<(&'a OracleTables, usize)>,
    t: usize,
    s: usize,
}

impl<'a> MdpEnvironment<'a> {
    pub fn new(mdp: &'a GroundTruthMdp) -> Result<Self> {
        mdp.validate()?;
        if mdp.n_states() > 32 || mdp.n_stages > 8 {
            return Err(Error::invalid("mdp", "too large for the state code"));
        }
        Ok(MdpEnvironment { mdp, expert_top_n: None, t: 0, s: 0 })
    }

    pub fn with_expert_top_n(mut self, oracle: &'a OracleTables, n: usize) -> Self {
        self.expert_top_n = Some((oracle, n.max(1)));
        self
    }

    pub fn admissible(&self, t: usize, s: usize) -> Vec<ActionId> {
        match self.expert_top_n {
            None => (0..self.mdp.actions_per_task).collect(),
            Some((oracle, n)) => {
                let p = oracle.expert(t, s);
                let mut ids: Vec<ActionId> = (0..p.len()).collect();
                ids.sort_by(|a, b| p[*b].total_cmp(&p[*a]).then(a.cmp(b)));
                ids.truncate(n);
                ids
            }
        }
    }

    fn observe(&self) -> Observation {
        Observation {
            state: state_code(self.s, self.t).expect("checked in new"),
            admissible: self.admissible(self.t, self.s),
        }
    }
}

fn draw(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u = rng.random::<f64>() * probs.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

impl Environment for MdpEnvironment<'_> {
    fn n_actions(&self) -> usize {
        self.mdp.actions_per_task
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Observation {
        self.t = 0;
        self.s = draw(rng, &self.mdp.initial);
        self.observe()
    }

    fn step(&mut self, action: ActionId, rng: &mut ChaCha8Rng) -> Result<StepOutcome> {
        if action >= self.mdp.actions_per_task {
            return Err(Error::invalid("action", format!("{action} outside {} actions", self.mdp.actions_per_task)));
        }
        let row = self.mdp.row(self.t, self.s, action);
        let rewards = &self.mdp.terminal_reward;
        let u = rng.random::<f64>();
        if u < row.relapse {
            return Ok(StepOutcome { reward: rewards.relapse, next: None });
        }
        if u < row.relapse + row.death {
            return Ok(StepOutcome { reward: rewards.death, next: None });
        }
        self.s = draw(rng, &row.next);
        if self.t + 1 == self.mdp.n_stages {
            let category = self.mdp.states[self.s].horizon_category();
            return Ok(StepOutcome { reward: rewards.value(category).unwrap_or(0.0), next: None });
        }
        self.t += 1;
        Ok(StepOutcome { reward: 0.0, next: Some(self.observe()) })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: usize,
    pub episode: usize,
    pub loss: f64,
    /// Mean over the batch of max_a Q(s, a; θ).
    pub mean_q: f64,
}

/// Plays `episodes` episodes with ε-greedy behavior, storing every
/// transition and taking one training step per environment step once the
/// buffer holds a full batch.
pub fn run_online(
    agent: &mut QAgent,
    env: &mut impl Environment,
    episodes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<CurveRow>> {
    if env.n_actions() != agent.n_actions() {
        return Err(Error::DimensionMismatch {
            context: "environment actions",
            expected: agent.n_actions(),
            found: env.n_actions(),
        });
    }
    let mut curve = Vec::new();
    let mut step = 0usize;
    for episode in 0..episodes {
        let mut obs = env.reset(rng);
        loop {
            let a = agent.select_action(&obs.state, &obs.admissible, rng)?;
            let out = env.step(a, rng)?;
            let transition = match &out.next {
                Some(next) => Transition {
                    s: obs.state.clone(),
                    a,
                    r: out.reward,
                    s_next: next.state.clone(),
                    terminal: false,
                    next_admissible: next.admissible.clone(),
                },
                None => Transition::terminal(obs.state.clone(), a, out.reward),
            };
            agent.buffer.push(transition)?;
            step += 1;
            if agent.buffer.len() >= agent.config.batch_size {
                let batch = agent.buffer.sample(agent.config.batch_size, rng)?;
                let mean_q = batch_mean_max_q(agent, &batch)?;
                let loss = agent.train_on(&batch)?;
                curve.push(CurveRow { step, episode, loss, mean_q });
            }
            match out.next {
                Some(next) => obs = next,
                None => break,
            }
        }
    }
    Ok(curve)
}

fn batch_mean_max_q(agent: &QAgent, batch: &[Transition]) -> Result<f64> {
    let mut total = 0.0;
    for tr in batch {
        total += agent.q_values(&tr.s)?.into_iter().fold(f64::NEG_INFINITY, f64::max);
    }
    Ok(total / batch.len() as f64)
}

/// `steps` training steps over a fixed buffer of logged transitions.
pub fn train_offline(agent: &mut QAgent, steps: usize, rng: &mut ChaCha8Rng) -> Result<Vec<CurveRow>> {
    let mut curve = Vec::with_capacity(steps);
    for step in 1..=steps {
        let batch = agent.buffer.sample(agent.config.batch_size, rng)?;
        let mean_q = batch_mean_max_q(agent, &batch)?;
        let loss = agent.train_on(&batch)?;
        curve.push(CurveRow { step, episode: 0, loss, mean_q });
    }
    Ok(curve)
}

/// Mean and largest |Q(s, a; θ) − Q*(s, a)| over reachable (t, s) and all
/// actions.
pub fn oracle_q_error(agent: &QAgent, mdp: &GroundTruthMdp, oracle: &OracleTables) -> Result<(f64, f64)> {
    let reach = reachable(mdp);
    let n_s = mdp.n_states();
    let (mut total, mut worst, mut n) = (0.0, 0.0f64, 0usize);
    for t in 0..mdp.n_stages {
        for s in 0..n_s {
            if !reach[t * n_s + s] {
                continue;
            }
            let q = agent.q_values(&state_code(s, t)?)?;
            for (a, qa) in q.iter().enumerate() {
                let e = (qa - oracle.q(t, s, a)).abs();
                total += e;
                worst = worst.max(e);
                n += 1;
            }
        }
    }
    Ok((total / n as f64, worst))
}

/// Creates the seeded generator for a training run.
pub fn run_rng(config: &AgentConfig) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(config.seed)
}

pub fn curve_tsv(curve: &[CurveRow]) -> String {
    let mut out = String::from("step\tepisode\tloss\tmean_q\n");
    for r in curve {
        out.push_str(&format!("{}\t{}\t{}\t{}\n", r.step, r.episode, r.loss, r.mean_q));
    }
    out
}

#[derive(Serialize, Deserialize)]
struct AgentCheckpoint {
    format: String,
    config: AgentConfig,
    q_net: Checkpoint,
    target_net: Checkpoint,
}

impl QAgent {
    /// Saves θ, θ′ and the configuration; the replay buffer is not kept.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let ck = AgentCheckpoint {
            format: AGENT_FORMAT.into(),
            config: self.config,
            q_net: Checkpoint::new(&self.q_net, Head::SquaredError, Some(self.optimizer.clone())),
            target_net: Checkpoint::new(&self.target_net, Head::SquaredError, None),
        };
        fs::write(path, serde_json::to_string(&ck)? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck: AgentCheckpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
        if ck.format != AGENT_FORMAT {
            return Err(Error::SchemaVersion { found: ck.format, expected: AGENT_FORMAT });
        }
        ck.config.validate()?;
        let q_net = ck.q_net.params()?;
        let target_net = ck.target_net.params()?;
        if !q_net.same_shape(&target_net) {
            return Err(Error::invalid("target_net", "shape differs from q_net"));
        }
        let optimizer = ck.q_net.optimizer.clone().unwrap_or_else(|| AdamState::new(&q_net));
        Ok(QAgent {
            q_net,
            target_net,
            config: ck.config,
            buffer: ReplayBuffer::new(ck.config.buffer_capacity)?,
            optimizer,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::RewardTable;
    use crate::synth::{solve_oracle, GvhdStatus, LatentState, TransitionRow};
    use proptest::prelude::*;

    fn fv(v: f64) -> FeatureVector {
        FeatureVector::new(vec![v; 8], FeatureLayout::StateCode).unwrap()
    }

    fn tr(tag: f64) -> Transition {
        Transition::terminal(fv(tag), 0, tag)
    }

    fn agent(n_actions: usize, config: AgentConfig) -> QAgent {
        QAgent::new(8, n_actions, config).unwrap()
    }

    /// Output layer fixed to `biases` with every weight zero.
    fn constant(n_actions: usize, biases: &[f64]) -> MlpParams {
        let mut p = MlpParams::zeros(&[8, HIDDEN[0], HIDDEN[1], n_actions]).unwrap();
        p.layers[2].biases = biases.to_vec();
        p
    }

    #[test]
    fn fifo_eviction() {
        let mut b = ReplayBuffer::new(2).unwrap();
        b.push(tr(1.0)).unwrap();
        assert_eq!(b.len(), 1);
        b.push(tr(2.0)).unwrap();
        b.push(tr(3.0)).unwrap();
        assert_eq!(b.iter().map(|t| t.r).collect::<Vec<_>>(), vec![2.0, 3.0]);
    }

    #[test]
    fn default_capacity_keeps_latest() {
        let mut b = ReplayBuffer::new(DEFAULT_CAPACITY).unwrap();
        for i in 1..=25_000 {
            b.push(tr(f64::from(i))).unwrap();
        }
        assert_eq!(b.len(), 20_000);
        assert_eq!(b.iter().next().unwrap().r, 5001.0);
    }

    #[test]
    fn rejects_non_finite_reward() {
        let mut b = ReplayBuffer::new(2).unwrap();
        assert!(b.push(Transition::terminal(fv(0.0), 0, f64::NAN)).is_err());
    }

    #[test]
    fn greedy_selection_over_admissible() {
        let mut a = agent(4, AgentConfig { epsilon: 0.0, ..AgentConfig::default() });
        a.q_net = constant(4, &[0.1, 0.9, 0.5, 0.9]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(a.select_action(&fv(0.0), &[0, 1, 2, 3], &mut rng).unwrap(), 1);
        assert_eq!(a.select_action(&fv(0.0), &[3, 1], &mut rng).unwrap(), 1);
        assert_eq!(a.select_action(&fv(0.0), &[0, 2], &mut rng).unwrap(), 2);
        assert!(a.select_action(&fv(0.0), &[], &mut rng).is_err());
        let eager = agent(4, AgentConfig { epsilon: 1.0, ..AgentConfig::default() });
        assert_eq!(eager.select_action(&fv(0.0), &[2], &mut rng).unwrap(), 2);
    }

    #[test]
    fn uniform_exploration_frequencies() {
        let a = agent(4, AgentConfig { epsilon: 1.0, ..AgentConfig::default() });
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts = [0usize; 4];
        for _ in 0..100_000 {
            counts[a.select_action(&fv(0.0), &[0, 1, 2, 3], &mut rng).unwrap()] += 1;
        }
        for c in counts {
            assert!((c as f64 / 1e5 - 0.25).abs() < 0.01, "{counts:?}");
        }
    }

    #[test]
    fn td_targets() {
        let mut a = agent(2, AgentConfig::default());
        a.target_net = constant(2, &[0.3, 0.7]);
        a.q_net = constant(2, &[5.0, 5.0]);
        let mut terminal = Transition::terminal(fv(0.0), 1, 0.8);
        terminal.s_next.values = vec![f64::NAN; 8];
        assert_eq!(a.td_target(&terminal).unwrap(), 0.8);
        let step = Transition { s: fv(0.0), a: 0, r: 0.2, s_next: fv(1.0), terminal: false, next_admissible: vec![] };
        assert_eq!(a.td_target(&step).unwrap(), 0.2 + 0.99 * 0.7);
        let restricted = Transition { next_admissible: vec![0], ..step.clone() };
        assert_eq!(a.td_target(&restricted).unwrap(), 0.2 + 0.99 * 0.3);
        a.config.gamma = 0.0;
        assert_eq!(a.td_target(&step).unwrap(), 0.2);
    }

    #[test]
    fn exact_targets_leave_parameters() {
        let mut a = agent(2, AgentConfig::default());
        a.q_net = constant(2, &[0.4, 0.6]);
        a.target_net = a.q_net.clone();
        let batch = vec![Transition::terminal(fv(0.0), 0, 0.4), Transition::terminal(fv(1.0), 1, 0.6)];
        let before = a.q_net.clone();
        let loss = a.train_on(&batch).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(a.q_net, before);
    }

    #[test]
    fn insufficient_buffer() {
        let mut a = agent(2, AgentConfig::default());
        a.buffer.push(tr(0.0)).unwrap();
        assert!(a.train_step(&mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn soft_update_arithmetic() {
        let mut a = agent(2, AgentConfig { tau: 1.0, ..AgentConfig::default() });
        a.target_net = a.target_net.zeros_like();
        a.soft_update().unwrap();
        assert_eq!(a.target_net, a.q_net);

        let mut a = agent(2, AgentConfig::default());
        a.q_net.iter_mut().for_each(|p| *p = 1.0);
        a.target_net.iter_mut().for_each(|p| *p = 0.0);
        a.soft_update().unwrap();
        assert!(a.target_net.iter().all(|p| *p == 0.01));
    }

    proptest! {
        #[test]
        fn soft_update_contracts_geometrically(seed in any::<u64>(), k in 1usize..40, tau in 0.001f64..1.0) {
            let mut a = agent(3, AgentConfig { tau, seed, ..AgentConfig::default() });
            a.target_net = init_mlp(&a.q_net.layer_dims(), seed ^ 1).unwrap();
            let gap0: Vec<f64> = a.target_net.iter().zip(a.q_net.iter()).map(|(t, p)| t - p).collect();
            for _ in 0..k {
                a.soft_update().unwrap();
            }
            let factor = (1.0 - tau).powi(k as i32);
            for ((t, p), g0) in a.target_net.iter().zip(a.q_net.iter()).zip(&gap0) {
                prop_assert!(((t - p) - factor * g0).abs() <= 1e-12 * (1.0 + g0.abs()));
            }
        }
    }

    #[test]
    fn training_is_reproducible() {
        let run = || {
            let mut a = agent(3, AgentConfig { seed: 5, ..AgentConfig::default() });
            let mut rng = run_rng(&a.config);
            for i in 0..64 {
                let t = Transition {
                    s: fv(f64::from(i % 4) / 4.0),
                    a: (i % 3) as usize,
                    r: f64::from(i % 5) / 5.0,
                    s_next: fv(0.5),
                    terminal: i % 2 == 0,
                    next_admissible: vec![],
                };
                a.buffer.push(t).unwrap();
            }
            let curve = train_offline(&mut a, 50, &mut rng).unwrap();
            (a, curve)
        };
        let (a1, c1) = run();
        let (a2, c2) = run();
        assert_eq!(c1, c2);
        assert_eq!(a1, a2);
    }

    #[test]
    fn state_code_is_injective() {
        let mut seen = std::collections::HashSet::new();
        for s in 0..32 {
            for t in 0..6 {
                let v = state_code(s, t).unwrap();
                assert!(seen.insert(v.values.iter().map(|x| *x as u8).collect::<Vec<_>>()));
            }
        }
        assert!(state_code(32, 0).is_err());
    }

    /// Two states, two stages: s0 is GVHD-free, s1 has chronic GVHD.
    fn two_state_mdp() -> GroundTruthMdp {
        let row = |next: [f64; 2], relapse, death| TransitionRow { next: next.to_vec(), relapse, death };
        GroundTruthMdp {
            states: vec![
                LatentState { tier: 0, gvhd: GvhdStatus::None },
                LatentState { tier: 0, gvhd: GvhdStatus::Chronic },
            ],
            n_stages: 2,
            actions_per_task: 2,
            initial: vec![0.5, 0.5],
            transition: vec![
                row([1.0, 0.0], 0.0, 0.0),
                row([0.0, 1.0], 0.0, 0.0),
                row([0.0, 0.0], 1.0, 0.0),
                row([0.0, 1.0], 0.0, 0.0),
                row([1.0, 0.0], 0.0, 0.0),
                row([0.0, 1.0], 0.0, 0.0),
                row([0.0, 1.0], 0.0, 0.0),
                row([1.0, 0.0], 0.0, 0.0),
            ],
            terminal_reward: RewardTable::default(),
            expert_temperature: 1.0,
            censor_prob: 0.0,
            prophylaxis_preference: vec![0.0; 4],
            feature_noise: 0.0,
            action_missing_prob: 0.0,
        }
    }

    #[test]
    fn online_agent_matches_two_state_oracle() {
        let mdp = two_state_mdp();
        let oracle = solve_oracle(&mdp, 0.99).unwrap();
        let config = AgentConfig { epsilon: 0.3, seed: 3, ..AgentConfig::default() };
        let mut a = agent(2, config);
        let mut env = MdpEnvironment::new(&mdp).unwrap();
        let mut rng = run_rng(&config);
        let curve = run_online(&mut a, &mut env, 3000, &mut rng).unwrap();
        assert!(curve.len() >= 5000);
        let (_, worst) = oracle_q_error(&a, &mdp, &oracle).unwrap();
        assert!(worst < 0.05, "worst error {worst}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let a = agent(3, AgentConfig { seed: 8, ..AgentConfig::default() });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("agent.json");
        a.save(&path).unwrap();
        assert_eq!(QAgent::load(&path).unwrap(), a);
    }
}
