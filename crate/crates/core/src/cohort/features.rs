use serde::{Deserialize, Serialize};

use super::{PatientBaseline, StageIndex, TaskKind, Trajectory};
use crate::{Error, Result};

/// Input encodings presented to the networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureLayout {
    /// `[age/100, patient_sex, comorbidities/4, donor_sex, relation/5,
    /// hla_rank/5, acute, chronic, t/5]`
    Imitation,
    /// The imitation layout without the stage slot; the stage is carried by
    /// which per-stage regressor is used.
    Dqn,
    /// Binary code of a latent (state, stage) pair, used by the simulated
    /// environment that drives online Q-learning.
    StateCode,
}

#[allow(clippy::len_without_is_empty)]
impl FeatureLayout {
    pub const fn len(self) -> usize {
        match self {
            FeatureLayout::Imitation => 9,
            FeatureLayout::Dqn | FeatureLayout::StateCode => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub layout: FeatureLayout,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>, layout: FeatureLayout) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::DimensionMismatch {
                context: "feature vector",
                expected: layout.len(),
                found: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("values", "feature values must be finite"));
        }
        Ok(FeatureVector { values, layout })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Encodes raw patient fields. Only `Imitation` and `Dqn` layouts apply.
pub fn encode_features(
    baseline: &PatientBaseline,
    acute_gvhd_active: bool,
    chronic_gvhd_active: bool,
    t: StageIndex,
    layout: FeatureLayout,
) -> Result<FeatureVector> {
    if layout == FeatureLayout::StateCode {
        return Err(Error::invalid("layout", "StateCode does not encode patient records"));
    }
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    let mut values = vec![
        (f64::from(baseline.age) / 100.0).min(1.0),
        f64::from(baseline.patient_sex),
        baseline.comorbidity_flags.count() as f64 / 4.0,
        f64::from(baseline.donor_sex),
        baseline.donor_relation.index() as f64 / 5.0,
        baseline.donor_relation.match_rank() as f64 / 5.0,
        flag(acute_gvhd_active),
        flag(chronic_gvhd_active),
    ];
    if layout == FeatureLayout::Imitation {
        values.push(f64::from(t.get()) / 5.0);
    }
    FeatureVector::new(values, layout)
}

/// State of `traj` at stage `t` as seen by `task`'s networks.
pub fn encode_state(traj: &Trajectory, t: StageIndex, task: TaskKind, layout: FeatureLayout) -> Result<FeatureVector> {
    if !task.admits(t) {
        return Err(Error::invalid("t", format!("{task} is not decided at t={t}")));
    }
    if traj.last_observation < t {
        return Err(Error::InvalidRecord {
            patient_id: traj.patient_id.clone(),
            field: "last_observation".into(),
            message: format!("patient not observed at t={t}"),
        });
    }
    let (acute, chronic) =
        traj.stage(t).map(|s| (s.acute_gvhd_active, s.chronic_gvhd_active)).unwrap_or((false, false));
    encode_features(&traj.baseline, acute, chronic, t, layout)
}

/// `mask[j]` is true iff the sample variance of column `j` exceeds `threshold`.
pub fn low_variance_filter(rows: &[FeatureVector], threshold: f64) -> Result<Vec<bool>> {
    if rows.len() < 2 {
        return Err(Error::invalid("features", "at least 2 rows are required"));
    }
    if !(threshold >= 0.0) {
        return Err(Error::invalid("threshold", "must be non-negative"));
    }
    let width = rows[0].len();
    if let Some(bad) = rows.iter().find(|r| r.len() != width) {
        return Err(Error::DimensionMismatch { context: "low variance filter", expected: width, found: bad.len() });
    }
    let n = rows.len() as f64;
    Ok((0..width)
        .map(|j| {
            let mean = rows.iter().map(|r| r.values[j]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r.values[j] - mean).powi(2)).sum::<f64>() / (n - 1.0);
            var > threshold
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::tests::{baseline, relapse_at};
    use crate::cohort::{ComorbidityFlags, DonorRelation, StageRecord};
    use proptest::prelude::*;

    #[test]
    fn zero_patient_encodes_to_zeros() {
        let b = PatientBaseline {
            age: 0,
            patient_sex: 0,
            comorbidity_flags: ComorbidityFlags::default(),
            donor_sex: 0,
            donor_relation: DonorRelation::IdenticalSibling,
        };
        let x = encode_features(&b, false, false, StageIndex::ALL[0], FeatureLayout::Imitation).unwrap();
        assert_eq!(x.values, vec![0.0; 9]);
    }

    #[test]
    fn hand_computed_layout() {
        let mut traj = relapse_at(3, "p");
        traj.stages[2].acute_gvhd_active = true;
        let x =
            encode_state(&traj, StageIndex::ALL[2], TaskKind::AcuteGvhdTreatment, FeatureLayout::Imitation).unwrap();
        assert_eq!(x.values, vec![0.45, 1.0, 0.5, 0.0, 0.4, 0.4, 1.0, 0.0, 0.4]);
        let d = encode_state(&traj, StageIndex::ALL[2], TaskKind::ChronicGvhdTreatment, FeatureLayout::Dqn).unwrap();
        assert_eq!(d.values, x.values[..8]);
    }

    #[test]
    fn encode_rejects_inadmissible_and_unobserved() {
        let traj = relapse_at(1, "p");
        assert!(encode_state(&traj, StageIndex::ALL[1], TaskKind::InitialConditioning, FeatureLayout::Dqn).is_err());
        assert!(encode_state(&traj, StageIndex::ALL[2], TaskKind::AcuteGvhdTreatment, FeatureLayout::Dqn).is_err());
    }

    #[test]
    fn missing_stage_record_defaults_flags_to_false() {
        let mut traj = relapse_at(3, "p");
        traj.stages.retain(|s| s.t.get() != 2);
        let x = encode_state(&traj, StageIndex::ALL[2], TaskKind::ChronicGvhdTreatment, FeatureLayout::Dqn).unwrap();
        assert_eq!(&x.values[6..], &[0.0, 0.0]);
    }

    #[test]
    fn constant_column_is_masked() {
        let rows: Vec<_> = (0..5)
            .map(|i| FeatureVector::new(vec![i as f64, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], FeatureLayout::Dqn).unwrap())
            .collect();
        let mask = low_variance_filter(&rows, 0.0).unwrap();
        assert_eq!(mask, vec![true, false, false, false, false, false, false, false]);
        assert!(low_variance_filter(&rows[..1], 0.0).is_err());
    }

    fn arb_baseline() -> impl Strategy<Value = PatientBaseline> {
        (0u32..=120, 0u8..2, any::<[bool; 4]>(), 0u8..2, 0usize..6).prop_map(|(age, ps, flags, ds, rel)| {
            PatientBaseline {
                age,
                patient_sex: ps,
                comorbidity_flags: ComorbidityFlags(flags),
                donor_sex: ds,
                donor_relation: DonorRelation::ALL[rel],
            }
        })
    }

    proptest! {
        #[test]
        fn encodings_have_fixed_width_and_unit_range(b in arb_baseline(), acute: bool, chronic: bool, t in 0u8..6) {
            let t = StageIndex::new(t).unwrap();
            for layout in [FeatureLayout::Imitation, FeatureLayout::Dqn] {
                let x = encode_features(&b, acute, chronic, t, layout).unwrap();
                prop_assert_eq!(x.len(), layout.len());
                prop_assert!(x.values.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }

        #[test]
        fn mask_matches_direct_variance(data in proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 9), 2..40), threshold in 0.0f64..0.1) {
            let rows: Vec<_> = data.iter().map(|r| FeatureVector::new(r.clone(), FeatureLayout::Imitation).unwrap()).collect();
            let mask = low_variance_filter(&rows, threshold).unwrap();
            for j in 0..9 {
                let col: Vec<f64> = data.iter().map(|r| r[j]).collect();
                let n = col.len() as f64;
                let mean = col.iter().sum::<f64>() / n;
                let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
                prop_assert_eq!(mask[j], var > threshold);
            }
        }
    }

    #[test]
    fn identical_fields_identical_vectors() {
        let mut a = relapse_at(3, "a");
        let mut b = relapse_at(3, "b");
        b.baseline = baseline();
        a.stages[1] = StageRecord { acute_gvhd_active: true, ..StageRecord::new(StageIndex::ALL[1]) };
        b.stages[1] = a.stages[1].clone();
        let t = StageIndex::ALL[1];
        assert_eq!(
            encode_state(&a, t, TaskKind::AcuteGvhdTreatment, FeatureLayout::Imitation).unwrap(),
            encode_state(&b, t, TaskKind::AcuteGvhdTreatment, FeatureLayout::Imitation).unwrap()
        );
    }
}
