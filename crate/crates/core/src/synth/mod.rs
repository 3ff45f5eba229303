//! Synthetic cohorts drawn from a latent finite-horizon process whose
//! optimal action values are known exactly.

mod generate;
mod mdp;
mod oracle;

pub use generate::{generate_cohort, outcome_counts, synthetic_vocabularies, SynthConfig, SyntheticCohort};
pub use mdp::{CohortMdpSpec, GroundTruthMdp, GvhdStatus, LatentState, TransitionRow};
pub use oracle::{
    expert_outcome_distribution, oracle_policy_value, reachable, solve_oracle, OracleTables, Policy, PolicyValue,
};
