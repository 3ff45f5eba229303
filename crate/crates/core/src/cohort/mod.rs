//! Patient cohort data model.
//!
//! A [`Trajectory`] is one patient's record: baseline covariates, one
//! [`StageRecord`] per observed stage, and the censoring bookkeeping
//! (`last_observation` = C_i, `terminal_observed` = M_i, the outcome
//! category and the relapse-free survival time T_i).
//!
//! Terminal events are recorded at the stage that closes the period in
//! which they happened: a relapse between t=1 and t=2 has C_i = 2. A patient
//! who reaches the four-year assessment has C_i = 5, M_i = 1 and one of the
//! two survival categories.

mod features;
mod io;

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use features::{encode_features, encode_state, low_variance_filter, FeatureLayout, FeatureVector};
pub use io::{load_cohort, read_cohort, save_cohort, write_cohort, CohortFile, SCHEMA_VERSION};

pub type ActionId = usize;

/// Days since transplant at each stage index.
pub const STAGE_DAYS: [f64; 6] = [0.0, 100.0, 182.0, 365.0, 730.0, 1460.0];

/// Index of the last stage (four years after transplant).
pub const LAST_STAGE: u8 = 5;

/// Follow-up time point: 0 = transplant, 1 = 100 days, 2 = 6 months,
/// 3 = 1 year, 4 = 2 years, 5 = 4 years.
///
/// Deserialization accepts any `u8` so that out-of-range values can be
/// reported against the offending patient by [`validate_trajectory`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StageIndex(u8);

impl StageIndex {
    pub const ALL: [StageIndex; 6] =
        [StageIndex(0), StageIndex(1), StageIndex(2), StageIndex(3), StageIndex(4), StageIndex(5)];

    pub fn new(t: u8) -> Result<Self> {
        if t <= LAST_STAGE {
            Ok(StageIndex(t))
        } else {
            Err(Error::invalid("t", format!("stage {t} outside 0..=5")))
        }
    }

    pub const fn get(self) -> u8 {
        self.0
    }

    pub const fn as_usize(self) -> usize {
        self.0 as usize
    }

    pub fn is_valid(self) -> bool {
        self.0 <= LAST_STAGE
    }

    pub fn is_last(self) -> bool {
        self.0 == LAST_STAGE
    }

    pub fn next(self) -> Option<StageIndex> {
        (self.0 < LAST_STAGE).then(|| StageIndex(self.0 + 1))
    }

    pub fn prev(self) -> Option<StageIndex> {
        self.0.checked_sub(1).map(StageIndex)
    }

    pub fn days(self) -> f64 {
        STAGE_DAYS[self.as_usize().min(5)]
    }
}

impl fmt::Display for StageIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    InitialConditioning,
    GvhdProphylaxis,
    AcuteGvhdTreatment,
    ChronicGvhdTreatment,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::InitialConditioning,
        TaskKind::GvhdProphylaxis,
        TaskKind::AcuteGvhdTreatment,
        TaskKind::ChronicGvhdTreatment,
    ];

    /// Tasks that get a value-function learner.
    pub const GVHD: [TaskKind; 2] = [TaskKind::AcuteGvhdTreatment, TaskKind::ChronicGvhdTreatment];

    /// Stages at which this task's decision is made.
    pub fn stages(self) -> &'static [StageIndex] {
        const T0: &[StageIndex] = &[StageIndex(0)];
        const ACUTE: &[StageIndex] = &[StageIndex(1), StageIndex(2)];
        const CHRONIC: &[StageIndex] = &[StageIndex(2), StageIndex(3), StageIndex(4), StageIndex(5)];
        match self {
            TaskKind::InitialConditioning | TaskKind::GvhdProphylaxis => T0,
            TaskKind::AcuteGvhdTreatment => ACUTE,
            TaskKind::ChronicGvhdTreatment => CHRONIC,
        }
    }

    pub fn admits(self, t: StageIndex) -> bool {
        self.stages().contains(&t)
    }

    pub fn first_stage(self) -> StageIndex {
        self.stages()[0]
    }

    pub fn last_stage(self) -> StageIndex {
        *self.stages().last().expect("every task has a stage")
    }

    /// Short lowercase name used for file names and CLI arguments.
    pub fn slug(self) -> &'static str {
        match self {
            TaskKind::InitialConditioning => "conditioning",
            TaskKind::GvhdProphylaxis => "prophylaxis",
            TaskKind::AcuteGvhdTreatment => "acute",
            TaskKind::ChronicGvhdTreatment => "chronic",
        }
    }

    pub fn from_slug(s: &str) -> Option<TaskKind> {
        TaskKind::ALL.into_iter().find(|t| t.slug() == s || format!("{t:?}") == s)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Donor relation in match-quality order (identical sibling best).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DonorRelation {
    IdenticalSibling,
    OtherRelative,
    UrdWellMatched,
    UrdPartiallyMatched,
    UrdMismatched,
    Other,
}

impl DonorRelation {
    pub const ALL: [DonorRelation; 6] = [
        DonorRelation::IdenticalSibling,
        DonorRelation::OtherRelative,
        DonorRelation::UrdWellMatched,
        DonorRelation::UrdPartiallyMatched,
        DonorRelation::UrdMismatched,
        DonorRelation::Other,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// HLA match rank; coincides with the category order.
    pub fn match_rank(self) -> usize {
        self as usize
    }
}

/// Comorbidity bits in the order diabetes, seizure, hypertension, other.
///
/// Serialized as a four character string of `0`/`1`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct ComorbidityFlags(pub [bool; 4]);

impl ComorbidityFlags {
    pub fn count(self) -> usize {
        self.0.iter().filter(|b| **b).count()
    }
}

impl Serialize for ComorbidityFlags {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let bits: String = self.0.iter().map(|b| if *b { '1' } else { '0' }).collect();
        s.serialize_str(&bits)
    }
}

impl<'de> Deserialize<'de> for ComorbidityFlags {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let bytes = s.as_bytes();
        if bytes.len() != 4 || bytes.iter().any(|b| *b != b'0' && *b != b'1') {
            return Err(serde::de::Error::custom(format!("comorbidity_flags must be 4 characters of 0/1, got {s:?}")));
        }
        let mut flags = [false; 4];
        for (f, b) in flags.iter_mut().zip(bytes) {
            *f = *b == b'1';
        }
        Ok(ComorbidityFlags(flags))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientBaseline {
    pub age: u32,
    pub patient_sex: u8,
    pub comorbidity_flags: ComorbidityFlags,
    pub donor_sex: u8,
    pub donor_relation: DonorRelation,
}

impl PatientBaseline {
    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.age > 120 {
            out.push(Violation::new("baseline.age", format!("age {} exceeds 120", self.age)));
        }
        if self.patient_sex > 1 {
            out.push(Violation::new("baseline.patient_sex", "must be 0 or 1"));
        }
        if self.donor_sex > 1 {
            out.push(Violation::new("baseline.donor_sex", "must be 0 or 1"));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OutcomeCategory {
    RelapseFreeGvhdFreeSurvival,
    SurvivalWithGvhd,
    Relapse,
    Death,
    DataLoss,
}

impl OutcomeCategory {
    pub const ALL: [OutcomeCategory; 5] = [
        OutcomeCategory::RelapseFreeGvhdFreeSurvival,
        OutcomeCategory::SurvivalWithGvhd,
        OutcomeCategory::Relapse,
        OutcomeCategory::Death,
        OutcomeCategory::DataLoss,
    ];

    pub fn is_event(self) -> bool {
        matches!(self, OutcomeCategory::Relapse | OutcomeCategory::Death)
    }

    pub fn is_survival(self) -> bool {
        matches!(self, OutcomeCategory::RelapseFreeGvhdFreeSurvival | OutcomeCategory::SurvivalWithGvhd)
    }
}

/// Delayed reward per outcome category. `DataLoss` has no reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardTable {
    pub relapse_free_gvhd_free_survival: f64,
    pub survival_with_gvhd: f64,
    pub relapse: f64,
    pub death: f64,
}

impl Default for RewardTable {
    fn default() -> Self {
        RewardTable { relapse_free_gvhd_free_survival: 1.0, survival_with_gvhd: 0.8, relapse: 0.2, death: 0.0 }
    }
}

impl RewardTable {
    pub fn value(&self, category: OutcomeCategory) -> Option<f64> {
        match category {
            OutcomeCategory::RelapseFreeGvhdFreeSurvival => Some(self.relapse_free_gvhd_free_survival),
            OutcomeCategory::SurvivalWithGvhd => Some(self.survival_with_gvhd),
            OutcomeCategory::Relapse => Some(self.relapse),
            OutcomeCategory::Death => Some(self.death),
            OutcomeCategory::DataLoss => None,
        }
    }

    pub fn max_value(&self) -> f64 {
        [self.relapse_free_gvhd_free_survival, self.survival_with_gvhd, self.relapse, self.death]
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Bijection between medicine-combination labels and dense action ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionVocabulary {
    pub task: TaskKind,
    labels: Vec<String>,
}

impl ActionVocabulary {
    pub fn new(task: TaskKind, labels: Vec<String>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for l in &labels {
            if !seen.insert(l.as_str()) {
                return Err(Error::invalid("labels", format!("duplicate label {l:?} for {task}")));
            }
        }
        Ok(ActionVocabulary { task, labels })
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, id: ActionId) -> Option<&str> {
        self.labels.get(id).map(String::as_str)
    }

    pub fn id_of(&self, label: &str) -> Option<ActionId> {
        self.labels.iter().position(|l| l == label)
    }
}

pub type Vocabularies = BTreeMap<TaskKind, ActionVocabulary>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub t: StageIndex,
    #[serde(default)]
    pub acute_gvhd_active: bool,
    #[serde(default)]
    pub chronic_gvhd_active: bool,
    /// Observed action per task at this stage.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub action: BTreeMap<TaskKind, ActionId>,
}

impl StageRecord {
    pub fn new(t: StageIndex) -> Self {
        StageRecord { t, acute_gvhd_active: false, chronic_gvhd_active: false, action: BTreeMap::new() }
    }
}

mod bool_as_int {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(u8::from(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        match u8::deserialize(d)? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(serde::de::Error::custom(format!("expected 0 or 1, got {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub patient_id: String,
    pub baseline: PatientBaseline,
    pub stages: Vec<StageRecord>,
    /// C_i
    pub last_observation: StageIndex,
    /// M_i
    #[serde(with = "bool_as_int")]
    pub terminal_observed: bool,
    pub terminal_category: OutcomeCategory,
    /// T_i in days.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub survival_time: Option<f64>,
}

impl Trajectory {
    pub fn stage(&self, t: StageIndex) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.t == t)
    }

    pub fn action_at(&self, t: StageIndex, task: TaskKind) -> Option<ActionId> {
        self.stage(t).and_then(|s| s.action.get(&task).copied())
    }

    /// Whether the outcome that follows the decision at `t` is known, either
    /// as an observation at a later stage (C_i > t) or, at the last stage,
    /// as the observed four-year assessment.
    pub fn followed_past(&self, t: StageIndex) -> bool {
        self.last_observation > t || (t.is_last() && self.last_observation == t && self.terminal_observed)
    }

    /// Relapse or death observed in the period ending at `t`.
    pub fn event_at(&self, t: StageIndex) -> bool {
        t.get() >= 1 && self.terminal_observed && self.terminal_category.is_event() && self.last_observation == t
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl Violation {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Violation { field: field.into(), message: message.into() }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Checks every trajectory invariant; an empty list means the record is valid.
pub fn validate_trajectory(traj: &Trajectory) -> Vec<Violation> {
    let mut out = traj.baseline.violations();
    let c = traj.last_observation;
    if !c.is_valid() {
        out.push(Violation::new("last_observation", format!("stage {c} outside 0..=5")));
    }
    let mut prev: Option<StageIndex> = None;
    for (i, stage) in traj.stages.iter().enumerate() {
        let field = |name: &str| format!("stages[{i}].{name}");
        if !stage.t.is_valid() {
            out.push(Violation::new(field("t"), format!("stage {} outside 0..=5", stage.t)));
            continue;
        }
        if let Some(p) = prev {
            if stage.t <= p {
                out.push(Violation::new(field("t"), "stages not strictly increasing"));
            }
        }
        prev = Some(stage.t);
        if stage.t > c {
            out.push(Violation::new(field("t"), "stage beyond last_observation"));
        }
        for task in stage.action.keys() {
            if !task.admits(stage.t) {
                out.push(Violation::new(field("action"), format!("{task} not admissible at t={}", stage.t)));
            }
        }
    }

    let cat = traj.terminal_category;
    if traj.terminal_observed {
        if cat == OutcomeCategory::DataLoss {
            out.push(Violation::new("terminal_category", "DataLoss with terminal_observed = 1"));
        } else if cat.is_survival() && !c.is_last() {
            out.push(Violation::new("terminal_category", "survival category requires last_observation = 5"));
        } else if cat.is_event() && c.get() == 0 {
            out.push(Violation::new("last_observation", "relapse or death cannot be recorded at t=0"));
        }
        match traj.survival_time {
            Some(d) if d.is_finite() && d > 0.0 => {}
            Some(_) => out.push(Violation::new("survival_time", "must be finite and positive")),
            None => out.push(Violation::new("survival_time", "required when terminal_observed = 1")),
        }
    } else {
        if cat != OutcomeCategory::DataLoss {
            out.push(Violation::new("terminal_category", format!("{cat:?} requires terminal_observed = 1")));
        }
        if traj.survival_time.is_some() {
            out.push(Violation::new("survival_time", "present without an observed terminal"));
        }
    }
    out
}

/// (D_t, M_t) for patient `traj`: D_t marks a relapse or death observed in
/// (t-1, t]; M_t marks the first such period.
pub fn terminal_indicator(traj: &Trajectory, t: StageIndex) -> (bool, bool) {
    let d_t = traj.event_at(t);
    let earlier = (1..t.get()).any(|k| traj.event_at(StageIndex(k)));
    (d_t, d_t && !earlier)
}

/// Patient-level random split. Each side keeps the input order.
pub fn split_cohort(
    cohort: &[Trajectory],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<Trajectory>, Vec<Trajectory>)> {
    if cohort.is_empty() {
        return Err(Error::Empty("cohort"));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid("train_fraction", "must lie in (0, 1)"));
    }
    let n_train = (train_fraction * cohort.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..cohort.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut in_train = vec![false; cohort.len()];
    for &i in &order[..n_train] {
        in_train[i] = true;
    }
    let (train, test): (Vec<_>, Vec<_>) = cohort.iter().zip(in_train).partition(|(_, is_train)| *is_train);
    Ok((train.into_iter().map(|(t, _)| t.clone()).collect(), test.into_iter().map(|(t, _)| t.clone()).collect()))
}
