//! Dynamic treatment regime optimization.
//!
//! The pipeline has two steps per decision stage: networks that imitate the
//! expert's choice of treatment ([`imitation`]), then value estimation over
//! the expert's top choices, either by censoring-aware backward induction
//! over a logged cohort ([`stagewise`]) or by deep Q-learning against a
//! simulated environment ([`dqn`]). Cohorts with a known optimal policy come
//! from [`synth`]; [`eval`] scores both steps on held-out patients and
//! [`serve`] answers recommendation queries from saved models.

// `!(x > 0.0)` style checks are how NaN gets rejected along with the range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cohort;
pub mod dqn;
mod error;
pub mod eval;
pub mod imitation;
pub mod nn;
pub mod pipeline;
pub mod serve;
pub mod stagewise;
pub mod synth;

pub use cohort::{
    ActionId, ActionVocabulary, CohortFile, DonorRelation, FeatureLayout, FeatureVector, OutcomeCategory,
    PatientBaseline, RewardTable, StageIndex, StageRecord, TaskKind, Trajectory,
};
pub use dqn::{AgentConfig, QAgent, Transition};
pub use error::{Error, Result};
pub use eval::{ValueComparison, ValueReport};
pub use imitation::{ImitationModel, TopNReport};
pub use nn::{MlpParams, TrainConfig};
pub use pipeline::PipelineConfig;
pub use serve::{ModelStore, RecommendRequest, RecommendResponse, ServiceError};
pub use stagewise::{RewardSpec, StagewiseConfig, StagewiseModel};
