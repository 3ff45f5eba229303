use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{solve_oracle, GroundTruthMdp, OracleTables};
use crate::cohort::CohortFile;
use crate::cohort::{
    ActionVocabulary, ComorbidityFlags, DonorRelation, OutcomeCategory, PatientBaseline, StageIndex, StageRecord,
    TaskKind, Trajectory, Vocabularies,
};
use crate::{Error, Result};

/// Donor relation frequencies of a large registry cohort, in
/// [`DonorRelation::ALL`] order.
const RELATION_WEIGHTS: [f64; 6] = [3877.0, 451.0, 686.0, 433.0, 173.0, 401.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub seed: u64,
    /// Discount the simulated expert uses to rank actions.
    pub gamma: f64,
    pub mdp: GroundTruthMdp,
}

impl SynthConfig {
    pub fn new(mdp: GroundTruthMdp, n_patients: usize, seed: u64) -> Self {
        SynthConfig { n_patients, seed, gamma: 0.99, mdp }
    }
}

/// A generated cohort together with what was hidden from the record.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCohort {
    pub cohort: CohortFile,
    /// Latent state index behind each recorded stage, parallel to
    /// `trajectories[i].stages`.
    pub latent: Vec<Vec<usize>>,
    pub oracle: OracleTables,
}

fn drug_names(task: TaskKind) -> [&'static str; 6] {
    match task {
        TaskKind::InitialConditioning => ["Bu", "Cy", "Flu", "Mel", "TBI", "ATG"],
        TaskKind::GvhdProphylaxis => ["CsA", "Tac", "MTX", "MMF", "Sir", "PTCy"],
        TaskKind::AcuteGvhdTreatment => ["MP", "Pred", "Rux", "ECP", "Bud", "Inf"],
        TaskKind::ChronicGvhdTreatment => ["Pred", "Rux", "ECP", "Ibr", "Sir", "Bel"],
    }
}

/// Drug-combination labels for each task: singletons, then pairs, and so on.
pub fn synthetic_vocabularies(actions_per_task: usize) -> Result<Vocabularies> {
    let mut masks: Vec<u32> = (1..64u32).collect();
    masks.sort_by_key(|m| (m.count_ones(), std::cmp::Reverse(m.reverse_bits())));
    if actions_per_task == 0 || actions_per_task > masks.len() {
        return Err(Error::invalid("actions_per_task", format!("must lie in 1..={}", masks.len())));
    }
    TaskKind::ALL
        .iter()
        .map(|&task| {
            let names = drug_names(task);
            let labels = masks[..actions_per_task]
                .iter()
                .map(|m| (0..6).filter(|i| m & (1 << i) != 0).map(|i| names[i]).collect::<Vec<_>>().join("+"))
                .collect();
            Ok((task, ActionVocabulary::new(task, labels)?))
        })
        .collect()
}

fn sample_index(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let total: f64 = probs.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left `u` past the last bucket.
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

fn sample_baseline(rng: &mut ChaCha8Rng, tier: usize, n_tiers: usize, noise: f64) -> PatientBaseline {
    let band_tier = if rng.random::<f64>() < noise { rng.random_range(0..n_tiers) } else { tier };
    // Ages fill the middle half of a tier's band, leaving gaps between tiers.
    let width = (60 / n_tiers).max(1) as u32;
    let lo = 18 + band_tier as u32 * width + width / 4;
    let age = rng.random_range(lo..lo + (width / 2).max(1));
    let risk = if n_tiers > 1 { tier as f64 / (n_tiers - 1) as f64 } else { 0.0 };
    let p_comorbid = 0.1 + 0.45 * risk;
    let mut flags = [false; 4];
    for f in &mut flags {
        *f = rng.random::<f64>() < p_comorbid;
    }
    let patient_sex = u8::from(rng.random::<bool>());
    let donor_sex = u8::from(rng.random::<bool>());
    let donor_relation = DonorRelation::ALL[sample_index(rng, &RELATION_WEIGHTS)];
    PatientBaseline { age, patient_sex, comorbidity_flags: ComorbidityFlags(flags), donor_sex, donor_relation }
}

/// Draws a cohort from `config.mdp` with the softmax expert.
///
/// Each stage is recorded before the per-stage censoring draw, so a patient
/// lost at `t` keeps the record of stage `t` but nothing after it.
pub fn generate_cohort(config: &SynthConfig) -> Result<SyntheticCohort> {
    let mdp = &config.mdp;
    mdp.validate_for_cohort()?;
    let oracle = solve_oracle(mdp, config.gamma)?;
    let vocabularies = synthetic_vocabularies(mdp.actions_per_task)?;
    let n_tiers = mdp.n_tiers();
    let mut trajectories = Vec::with_capacity(config.n_patients);
    let mut latent = Vec::with_capacity(config.n_patients);

    for i in 0..config.n_patients {
        // One stream per patient: changing censoring truncates a path
        // without disturbing any other patient.
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(i as u64);
        let mut s = sample_index(&mut rng, &mdp.initial);
        let baseline = sample_baseline(&mut rng, usize::from(mdp.states[s].tier), n_tiers, mdp.feature_noise);
        let mut stages = Vec::new();
        let mut path = Vec::new();
        let mut outcome = None;
        for t in StageIndex::ALL {
            let ti = t.as_usize();
            let state = mdp.states[s];
            let mut record = StageRecord::new(t);
            record.acute_gvhd_active = state.acute_active();
            record.chronic_gvhd_active = state.chronic_active();
            let acting = state.acting_task(t);
            let a = match acting {
                Some(_) => sample_index(&mut rng, oracle.expert(ti, s)),
                None => 0,
            };
            let mut recorded = Vec::new();
            if let Some(task) = acting {
                recorded.push((task, a));
            }
            if ti == 0 {
                recorded.push((TaskKind::GvhdProphylaxis, sample_index(&mut rng, oracle.prophylaxis(s))));
            }
            for (task, action) in recorded {
                if rng.random::<f64>() >= mdp.action_missing_prob {
                    record.action.insert(task, action);
                }
            }
            stages.push(record);
            path.push(s);

            if rng.random::<f64>() < mdp.censor_prob {
                outcome = Some((t, false, OutcomeCategory::DataLoss, None));
                break;
            }
            let row = mdp.row(ti, s, a);
            let u = rng.random::<f64>();
            let event = if u < row.relapse {
                Some(OutcomeCategory::Relapse)
            } else if u < row.relapse + row.death {
                Some(OutcomeCategory::Death)
            } else {
                None
            };
            if let Some(category) = event {
                let end = t.next().expect("no events after the last stage");
                let span = (end.days() - t.days()) as u32;
                let time = t.days() + f64::from(rng.random_range(1..=span));
                outcome = Some((end, true, category, Some(time)));
                break;
            }
            s = sample_index(&mut rng, &row.next);
            if t.is_last() {
                outcome = Some((t, true, mdp.states[s].horizon_category(), Some(t.days())));
            }
        }
        let (last_observation, terminal_observed, terminal_category, survival_time) =
            outcome.expect("every path ends by the last stage");
        trajectories.push(Trajectory {
            patient_id: format!("P{:06}", i + 1),
            baseline,
            stages,
            last_observation,
            terminal_observed,
            terminal_category,
            survival_time,
        });
        latent.push(path);
    }
    Ok(SyntheticCohort { cohort: CohortFile { vocabularies, trajectories }, latent, oracle })
}

/// Observed frequency of each terminal category.
pub fn outcome_counts(trajectories: &[Trajectory]) -> BTreeMap<OutcomeCategory, usize> {
    let mut out: BTreeMap<OutcomeCategory, usize> = OutcomeCategory::ALL.iter().map(|c| (*c, 0)).collect();
    for tr in trajectories {
        *out.get_mut(&tr.terminal_category).expect("all categories") += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{terminal_indicator, validate_trajectory};
    use crate::synth::{expert_outcome_distribution, CohortMdpSpec};
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn default_config(n: usize, seed: u64) -> SynthConfig {
        SynthConfig::new(GroundTruthMdp::cohort(&CohortMdpSpec::default()).unwrap(), n, seed)
    }

    #[test]
    fn generated_trajectories_are_valid() {
        let out = generate_cohort(&default_config(2000, 3)).unwrap();
        for tr in &out.cohort.trajectories {
            assert_eq!(validate_trajectory(tr), vec![], "{}", tr.patient_id);
            for (task, voc) in &out.cohort.vocabularies {
                for st in &tr.stages {
                    if let Some(a) = st.action.get(task) {
                        assert!(*a < voc.size());
                    }
                }
            }
        }
    }

    #[test]
    fn at_most_one_terminal_period() {
        let out = generate_cohort(&default_config(1000, 4)).unwrap();
        for tr in &out.cohort.trajectories {
            let hits = StageIndex::ALL.iter().filter(|t| terminal_indicator(tr, **t).1).count();
            assert!(hits <= 1);
        }
    }

    #[test]
    fn no_censoring_means_no_data_loss() {
        let spec = CohortMdpSpec { censor_prob: 0.0, ..CohortMdpSpec::default() };
        let cfg = SynthConfig::new(GroundTruthMdp::cohort(&spec).unwrap(), 1500, 5);
        let out = generate_cohort(&cfg).unwrap();
        assert!(out
            .cohort
            .trajectories
            .iter()
            .all(|t| t.terminal_category != OutcomeCategory::DataLoss && t.terminal_observed));
    }

    #[test]
    fn same_seed_same_cohort() {
        let a = generate_cohort(&default_config(300, 11)).unwrap();
        let b = generate_cohort(&default_config(300, 11)).unwrap();
        let c = generate_cohort(&default_config(300, 12)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.cohort, c.cohort);
    }

    #[test]
    fn outcome_frequencies_match_oracle() {
        let cfg = default_config(6000, 21);
        let out = generate_cohort(&cfg).unwrap();
        let expected = expert_outcome_distribution(&cfg.mdp, &out.oracle);
        let counts = outcome_counts(&out.cohort.trajectories);
        let n = cfg.n_patients as f64;
        let stat: f64 = counts
            .iter()
            .map(|(c, k)| {
                let e = expected[c] * n;
                (*k as f64 - e).powi(2) / e
            })
            .sum();
        let p = 1.0 - ChiSquared::new(4.0).unwrap().cdf(stat);
        assert!(p > 0.001, "chi2 = {stat}, p = {p}, counts {counts:?}, expected {expected:?}");
    }

    #[test]
    fn recorded_actions_follow_latent_acting_task() {
        let cfg = default_config(500, 8);
        let out = generate_cohort(&cfg).unwrap();
        for (tr, path) in out.cohort.trajectories.iter().zip(&out.latent) {
            for (st, s) in tr.stages.iter().zip(path) {
                let acting = cfg.mdp.states[*s].acting_task(st.t);
                for task in st.action.keys() {
                    assert!(Some(*task) == acting || *task == TaskKind::GvhdProphylaxis);
                }
                if let Some(task) = acting {
                    assert!(st.action.contains_key(&task));
                }
            }
        }
    }

    #[test]
    fn vocabularies_are_distinct_drug_combinations() {
        let v = synthetic_vocabularies(12).unwrap();
        assert_eq!(v.len(), 4);
        let chronic = &v[&TaskKind::ChronicGvhdTreatment];
        assert_eq!(chronic.label(0), Some("Pred"));
        assert_eq!(chronic.label(6), Some("Pred+Rux"));
        assert!(synthetic_vocabularies(64).is_err());
    }
}
