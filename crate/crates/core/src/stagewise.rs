//! Censoring-aware backward induction over a logged cohort.
//!
//! For each task, stages are fitted from t = 5 down to the task's first
//! stage. A stage-t sample is a patient observed past t (C_i > t) with the
//! task's action recorded at t. Its target is the terminal reward when a
//! relapse or death is observed in (t, t+1], otherwise the discounted
//! estimated value of the patient's state at t+1.
//!
//! The value at t+1 comes from one of two heads fitted just before:
//!
//! * the stage-(t+1) Q network, maximized over the admissible actions, when
//!   the task's action is recorded at t+1;
//! * a continuation head, a scalar regression over patients observed at
//!   t+1 without the task's action, otherwise. These cover stages where the
//!   task has no decision (acute GVHD after t = 2) and patients whose GVHD
//!   has resolved.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cohort::{
    encode_features, encode_state, ActionId, FeatureLayout, FeatureVector, OutcomeCategory, RewardTable, StageIndex,
    TaskKind, Trajectory, LAST_STAGE,
};
use crate::imitation::{predict_topn, ImitationModel};
use crate::nn::{fit, init_mlp, Checkpoint, Example, Head, MlpParams, TrainConfig};
use crate::{Error, Result};

pub const FORMAT: &str = "dtr-stagewise/1";
pub const HIDDEN: [usize; 2] = [32, 64];
pub const LEARNING_RATE: f64 = 1e-3;
pub const DAYS_PER_YEAR: f64 = 365.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum RewardMode {
    /// Category rewards from the reward table.
    #[default]
    Discrete,
    /// Observed survival time T_i, in years.
    SurvivalTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardSpec {
    pub table: RewardTable,
    pub mode: RewardMode,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AssignedReward {
    Value(f64),
    /// No reward exists; the target must come from imputation.
    Defer,
}

pub fn assign_reward(category: OutcomeCategory, spec: &RewardSpec) -> AssignedReward {
    match spec.table.value(category) {
        Some(v) => AssignedReward::Value(v),
        None => AssignedReward::Defer,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    ObservedTerminal,
    ImputedFutureQ,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum HeadKind {
    /// Per-action values of patients treated at the stage.
    Q,
    /// Scalar value of patients observed at the stage without treatment.
    Continuation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSample {
    pub patient_id: String,
    pub t: StageIndex,
    pub s: FeatureVector,
    /// Recorded action; 0 for continuation samples.
    pub a: ActionId,
    pub y: f64,
    pub provenance: Provenance,
}

/// Which actions a policy may choose among.
#[derive(Debug, Clone, Copy)]
pub enum AdmissibleRule<'a> {
    All,
    /// The imitation model's `n` most probable actions.
    TopN {
        model: &'a ImitationModel,
        n: usize,
    },
}

impl AdmissibleRule<'_> {
    /// Admissible actions for a state in the imitation encoding.
    pub fn actions_at(&self, x: &FeatureVector, task: TaskKind, vocab_size: usize) -> Result<Vec<ActionId>> {
        match self {
            AdmissibleRule::All => Ok((0..vocab_size).collect()),
            AdmissibleRule::TopN { model, n } => {
                if model.task != task {
                    return Err(Error::invalid("admissible", format!("imitation model is for {}", model.task)));
                }
                if model.vocabulary.size() != vocab_size {
                    return Err(Error::DimensionMismatch {
                        context: "admissible vocabulary",
                        expected: vocab_size,
                        found: model.vocabulary.size(),
                    });
                }
                let n = (*n).clamp(1, vocab_size);
                Ok(predict_topn(model, x, n)?.into_iter().map(|(a, _)| a).collect())
            }
        }
    }

    pub fn actions(
        &self,
        traj: &Trajectory,
        t: StageIndex,
        task: TaskKind,
        vocab_size: usize,
    ) -> Result<Vec<ActionId>> {
        match self {
            AdmissibleRule::All => Ok((0..vocab_size).collect()),
            AdmissibleRule::TopN { .. } => {
                let x = encode_state(traj, t, task, FeatureLayout::Imitation)?;
                self.actions_at(&x, task, vocab_size)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StagewiseConfig {
    pub gamma: f64,
    pub reward: RewardSpec,
    /// Multiply imputed values by `gamma`.
    pub discount_imputation: bool,
    /// Clamp imputed values to the reward range (discrete mode only).
    pub clip_imputation: bool,
    pub train: TrainConfig,
}

impl Default for StagewiseConfig {
    fn default() -> Self {
        StagewiseConfig {
            gamma: 0.99,
            reward: RewardSpec::default(),
            discount_imputation: true,
            clip_imputation: true,
            train: TrainConfig { learning_rate: LEARNING_RATE, epochs: 200, ..TrainConfig::default() },
        }
    }
}

impl StagewiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::invalid("gamma", "must lie in [0, 1]"));
        }
        self.train.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFitRecord {
    pub t: StageIndex,
    pub head: HeadKind,
    /// Stage whose heads supplied imputed targets.
    pub reads: Option<StageIndex>,
    pub n_samples: usize,
    pub n_observed_terminal: usize,
    pub n_imputed: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StagewiseModel {
    pub task: TaskKind,
    pub vocab_size: usize,
    pub config: StagewiseConfig,
    pub q_nets: BTreeMap<StageIndex, MlpParams>,
    pub continuation: BTreeMap<StageIndex, MlpParams>,
    /// One record per fitted head, in fitting order.
    pub fit_log: Vec<StageFitRecord>,
}

/// Features of `traj` at `t` in the 8-slot layout, for any stage.
pub fn dqn_state(traj: &Trajectory, t: StageIndex) -> Result<FeatureVector> {
    if traj.last_observation < t {
        return Err(Error::InvalidRecord {
            patient_id: traj.patient_id.clone(),
            field: "last_observation".into(),
            message: format!("patient not observed at t={t}"),
        });
    }
    let (acute, chronic) =
        traj.stage(t).map(|s| (s.acute_gvhd_active, s.chronic_gvhd_active)).unwrap_or((false, false));
    encode_features(&traj.baseline, acute, chronic, t, FeatureLayout::Dqn)
}

impl StagewiseModel {
    pub fn new(task: TaskKind, vocab_size: usize, config: StagewiseConfig) -> Result<Self> {
        if vocab_size == 0 {
            return Err(Error::Empty("action vocabulary"));
        }
        config.validate()?;
        Ok(StagewiseModel {
            task,
            vocab_size,
            config,
            q_nets: BTreeMap::new(),
            continuation: BTreeMap::new(),
            fit_log: Vec::new(),
        })
    }

    fn q_net(&self, t: StageIndex) -> Result<&MlpParams> {
        if !self.task.admits(t) {
            return Err(Error::invalid("t", format!("{} is not decided at t={t}", self.task)));
        }
        self.q_nets.get(&t).ok_or_else(|| Error::ModelUnavailable(format!("{} Q network for t={t}", self.task)))
    }

    pub fn q_values(&self, s: &FeatureVector, t: StageIndex) -> Result<Vec<f64>> {
        if s.layout != FeatureLayout::Dqn {
            return Err(Error::invalid("s", "stagewise networks take the Dqn layout"));
        }
        self.q_net(t)?.forward(s.as_slice())
    }

    /// Largest Q over `admissible`, with the maximizing action (lowest id on ties).
    pub fn max_q(&self, s: &FeatureVector, t: StageIndex, admissible: &[ActionId]) -> Result<(ActionId, f64)> {
        let q = self.q_values(s, t)?;
        best_of(&q, admissible)
    }

    /// Estimated value of `traj`'s state at `t`, before discounting or clipping.
    pub fn state_value(&self, traj: &Trajectory, t: StageIndex, admissible: &AdmissibleRule) -> Result<f64> {
        let s = dqn_state(traj, t)?;
        if self.task.admits(t) && traj.action_at(t, self.task).is_some() {
            let actions = admissible.actions(traj, t, self.task, self.vocab_size)?;
            return Ok(self.max_q(&s, t, &actions)?.1);
        }
        let head = self
            .continuation
            .get(&t)
            .ok_or_else(|| Error::ModelUnavailable(format!("{} continuation head for t={t}", self.task)))?;
        Ok(head.forward(s.as_slice())?[0])
    }

    /// Factor converting model values to reporting units (days in
    /// survival-time mode).
    pub fn report_scale(&self) -> f64 {
        match self.config.reward.mode {
            RewardMode::Discrete => 1.0,
            RewardMode::SurvivalTime => DAYS_PER_YEAR,
        }
    }

    /// Tab-separated per-head sample counts and losses.
    pub fn audit_tsv(&self) -> String {
        let mut out =
            String::from("t\thead\treads\tn_samples\tn_observed_terminal\tn_imputed\tinitial_loss\tfinal_loss\n");
        for r in &self.fit_log {
            let reads = r.reads.map(|t| t.to_string()).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                out,
                "{}\t{:?}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.t, r.head, reads, r.n_samples, r.n_observed_terminal, r.n_imputed, r.initial_loss, r.final_loss
            );
        }
        out
    }
}

pub(crate) fn best_of(q: &[f64], admissible: &[ActionId]) -> Result<(ActionId, f64)> {
    let mut best: Option<(ActionId, f64)> = None;
    for &a in admissible {
        let v =
            *q.get(a).ok_or_else(|| Error::invalid("admissible", format!("action {a} outside {} outputs", q.len())))?;
        best = match best {
            Some((ba, bv)) if bv > v || (bv == v && ba < a) => Some((ba, bv)),
            _ => Some((a, v)),
        };
    }
    best.ok_or(Error::Empty("admissible actions"))
}

/// Admissible actions ranked by descending Q, ties by ascending id.
pub fn recommend(
    model: &StagewiseModel,
    s: &FeatureVector,
    t: StageIndex,
    admissible: &[ActionId],
) -> Result<Vec<(ActionId, f64)>> {
    if admissible.is_empty() {
        return Err(Error::Empty("admissible actions"));
    }
    let q = model.q_values(s, t)?;
    let mut ranked = Vec::with_capacity(admissible.len());
    for &a in admissible {
        let v = *q.get(a).ok_or_else(|| Error::invalid("admissible", format!("action {a} outside vocabulary")))?;
        ranked.push((a, v));
    }
    ranked.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    ranked.dedup_by_key(|p| p.0);
    Ok(ranked)
}

/// Whether `traj` contributes a `head` sample for `task` at `t`.
pub fn is_included(traj: &Trajectory, t: StageIndex, task: TaskKind, head: HeadKind) -> bool {
    if !traj.followed_past(t) {
        return false;
    }
    let treated = task.admits(t) && traj.action_at(t, task).is_some();
    match head {
        HeadKind::Q => treated,
        HeadKind::Continuation => !treated,
    }
}

fn observed_target(traj: &Trajectory, spec: &RewardSpec) -> Result<f64> {
    match spec.mode {
        RewardMode::Discrete => match assign_reward(traj.terminal_category, spec) {
            AssignedReward::Value(v) => Ok(v),
            AssignedReward::Defer => Err(Error::InvalidRecord {
                patient_id: traj.patient_id.clone(),
                field: "terminal_category".into(),
                message: "data loss has no reward".into(),
            }),
        },
        RewardMode::SurvivalTime => traj.survival_time.map(|d| d / DAYS_PER_YEAR).ok_or_else(|| Error::InvalidRecord {
            patient_id: traj.patient_id.clone(),
            field: "survival_time".into(),
            message: "required for survival-time targets".into(),
        }),
    }
}

/// Stage-`t` regression samples for one head of `task`.
///
/// `next` must hold the fitted stage-(t+1) heads whenever some included
/// patient survives past t+1 without an observed terminal.
pub fn build_stage_samples(
    cohort: &[Trajectory],
    t: StageIndex,
    task: TaskKind,
    head: HeadKind,
    next: Option<&StagewiseModel>,
    admissible: &AdmissibleRule,
    config: &StagewiseConfig,
) -> Result<Vec<StageSample>> {
    if head == HeadKind::Q && !task.admits(t) {
        return Err(Error::invalid("t", format!("{task} is not decided at t={t}")));
    }
    let spec = &config.reward;
    let mut out = Vec::new();
    for traj in cohort {
        if !is_included(traj, t, task, head) {
            continue;
        }
        let a = match head {
            HeadKind::Q => traj.action_at(t, task).expect("included Q samples are treated"),
            HeadKind::Continuation => 0,
        };
        let (y, provenance) = match t.next() {
            None => (observed_target(traj, spec)?, Provenance::ObservedTerminal),
            Some(t1) if traj.event_at(t1) => (observed_target(traj, spec)?, Provenance::ObservedTerminal),
            Some(t1) => {
                let model =
                    next.ok_or_else(|| Error::invalid("next_stage_model", format!("required to impute t={t1}")))?;
                let mut v = model.state_value(traj, t1, admissible)?;
                if spec.mode == RewardMode::Discrete && config.clip_imputation {
                    v = v.clamp(0.0, spec.table.max_value());
                }
                if config.discount_imputation {
                    v *= config.gamma;
                }
                (v, Provenance::ImputedFutureQ)
            }
        };
        out.push(StageSample { patient_id: traj.patient_id.clone(), t, s: dqn_state(traj, t)?, a, y, provenance });
    }
    Ok(out)
}

fn head_seed(base: u64, t: StageIndex, head: HeadKind) -> u64 {
    base.wrapping_add(2 * u64::from(t.get()) + u64::from(head == HeadKind::Continuation))
}

/// Fits every head of `task` from the last stage backward.
pub fn fit_backward(
    cohort: &[Trajectory],
    task: TaskKind,
    vocab_size: usize,
    admissible: &AdmissibleRule,
    config: &StagewiseConfig,
) -> Result<StagewiseModel> {
    let mut model = StagewiseModel::new(task, vocab_size, *config)?;
    let first = task.first_stage();
    for t in StageIndex::ALL.into_iter().rev().filter(|t| *t >= first) {
        let mut heads = Vec::new();
        if t > first {
            heads.push(HeadKind::Continuation);
        }
        if task.admits(t) {
            heads.push(HeadKind::Q);
        }
        for head in heads {
            let samples = build_stage_samples(cohort, t, task, head, Some(&model), admissible, config)?;
            if samples.is_empty() {
                return Err(Error::NoSamples { task, stage: t });
            }
            let out_dim = match head {
                HeadKind::Q => vocab_size,
                HeadKind::Continuation => 1,
            };
            let seed = head_seed(config.train.seed, t, head);
            let mut params = init_mlp(&[FeatureLayout::Dqn.len(), HIDDEN[0], HIDDEN[1], out_dim], seed)?;
            let examples: Vec<Example> = samples.iter().map(|s| Example::value(s.s.values.clone(), s.a, s.y)).collect();
            let train = TrainConfig { seed, ..config.train };
            let report = fit(&mut params, &examples, Head::SquaredError, &train)?;
            let n_observed_terminal = samples.iter().filter(|s| s.provenance == Provenance::ObservedTerminal).count();
            model.fit_log.push(StageFitRecord {
                t,
                head,
                reads: t.next().filter(|_| n_observed_terminal < samples.len()),
                n_samples: samples.len(),
                n_observed_terminal,
                n_imputed: samples.len() - n_observed_terminal,
                initial_loss: report.initial_loss,
                final_loss: report.final_loss,
            });
            tracing::debug!(%task, %t, ?head, n = samples.len(), loss = report.final_loss, "stage fit");
            match head {
                HeadKind::Q => model.q_nets.insert(t, params),
                HeadKind::Continuation => model.continuation.insert(t, params),
            };
        }
    }
    Ok(model)
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    task: TaskKind,
    vocab_size: usize,
    config: StagewiseConfig,
    q_stages: Vec<StageIndex>,
    continuation_stages: Vec<StageIndex>,
    fit_log: Vec<StageFitRecord>,
}

pub fn manifest_name(task: TaskKind) -> String {
    format!("stagewise_{}.json", task.slug())
}

fn head_name(task: TaskKind, head: HeadKind, t: StageIndex) -> String {
    let kind = match head {
        HeadKind::Q => "q",
        HeadKind::Continuation => "v",
    };
    format!("stagewise_{}_{kind}_t{t}.json", task.slug())
}

impl StagewiseModel {
    /// Writes a manifest plus one network checkpoint per (head, stage).
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let manifest = Manifest {
            format: FORMAT.into(),
            task: self.task,
            vocab_size: self.vocab_size,
            config: self.config,
            q_stages: self.q_nets.keys().copied().collect(),
            continuation_stages: self.continuation.keys().copied().collect(),
            fit_log: self.fit_log.clone(),
        };
        fs::write(dir.join(manifest_name(self.task)), serde_json::to_string_pretty(&manifest)? + "\n")?;
        for (head, nets) in [(HeadKind::Q, &self.q_nets), (HeadKind::Continuation, &self.continuation)] {
            for (t, params) in nets {
                Checkpoint::new(params, Head::SquaredError, None).save(dir.join(head_name(self.task, head, *t)))?;
            }
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>, task: TaskKind) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(manifest_name(task)))?)?;
        if manifest.format != FORMAT {
            return Err(Error::SchemaVersion { found: manifest.format, expected: FORMAT });
        }
        if manifest.task != task {
            return Err(Error::invalid("task", format!("manifest is for {}", manifest.task)));
        }
        let mut model = StagewiseModel::new(task, manifest.vocab_size, manifest.config)?;
        model.fit_log = manifest.fit_log;
        for (head, stages) in
            [(HeadKind::Q, &manifest.q_stages), (HeadKind::Continuation, &manifest.continuation_stages)]
        {
            for t in stages {
                let params = Checkpoint::load(dir.join(head_name(task, head, *t)))?.params()?;
                let expected = match head {
                    HeadKind::Q => model.vocab_size,
                    HeadKind::Continuation => 1,
                };
                if params.input_dim() != FeatureLayout::Dqn.len() || params.output_dim() != expected {
                    return Err(Error::DimensionMismatch {
                        context: "stagewise head",
                        expected,
                        found: params.output_dim(),
                    });
                }
                match head {
                    HeadKind::Q => model.q_nets.insert(*t, params),
                    HeadKind::Continuation => model.continuation.insert(*t, params),
                };
            }
        }
        Ok(model)
    }
}

/// Stages at which stagewise Q networks exist for `task`.
pub fn covered_stages(task: TaskKind) -> &'static [StageIndex] {
    task.stages()
}

const _: () = assert!(LAST_STAGE == 5);
