//! Evaluation on held-out patients: top-N accuracy curves for the imitation
//! step and DRL-versus-baseline value comparisons for the Q step.
//!
//! Plot-data files are tab-separated with a header row. Column order:
//!
//! * accuracy curves: `task`, `t` (`all` when pooled), `n`, `accuracy`,
//!   `n_test_samples`
//! * value comparisons: `t`, `drl_value`, `baseline_value`, `n_patients`
//!
//! Values in plot files are in reporting units (days in survival-time mode).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cohort::{ActionId, StageIndex, TaskKind, Trajectory};
use crate::imitation::{stage_reports, ImitationModel, LabeledState, TopNReport};
use crate::stagewise::{best_of, dqn_state, is_included, AdmissibleRule, HeadKind, StagewiseModel};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueComparison {
    pub task: TaskKind,
    pub t: StageIndex,
    pub drl_value: f64,
    pub baseline_value: f64,
    pub n_patients: usize,
}

/// Value of the greedy admissible action and mean value of the remaining
/// admissible actions for one patient.
///
/// The excluded action is the one [`drl_policy_value`] would choose, so the
/// second value never exceeds the first.
pub fn patient_values(q: &[f64], admissible: &[ActionId]) -> Result<(f64, f64)> {
    let (best, best_q) = best_of(q, admissible)?;
    // Shortfalls are nonnegative, so rounding cannot lift the mean above the max.
    let shortfall: Vec<f64> = admissible.iter().filter(|a| **a != best).map(|a| best_q - q[*a]).collect();
    if shortfall.is_empty() {
        return Err(Error::invalid("admissible", "baseline needs at least 2 admissible actions"));
    }
    Ok((best_q, best_q - shortfall.iter().sum::<f64>() / shortfall.len() as f64))
}

/// Test patients evaluated at `t`: the same population that trains the
/// stage-`t` Q network.
pub fn eligible(test: &[Trajectory], t: StageIndex, task: TaskKind) -> Vec<&Trajectory> {
    test.iter().filter(|tr| is_included(tr, t, task, HeadKind::Q)).collect()
}

struct StageScan {
    drl: Vec<f64>,
    /// `None` for patients with a single admissible action.
    baseline: Vec<Option<f64>>,
    ids: Vec<String>,
}

fn scan(model: &StagewiseModel, test: &[Trajectory], t: StageIndex, rule: &AdmissibleRule) -> Result<StageScan> {
    let patients = eligible(test, t, model.task);
    if patients.is_empty() {
        return Err(Error::NoSamples { task: model.task, stage: t });
    }
    let mut out = StageScan {
        drl: Vec::with_capacity(patients.len()),
        baseline: Vec::with_capacity(patients.len()),
        ids: Vec::with_capacity(patients.len()),
    };
    for tr in patients {
        let q = model.q_values(&dqn_state(tr, t)?, t)?;
        let admissible = rule.actions(tr, t, model.task, model.vocab_size)?;
        if admissible.len() < 2 {
            out.drl.push(best_of(&q, &admissible)?.1);
            out.baseline.push(None);
        } else {
            let (d, b) = patient_values(&q, &admissible)?;
            out.drl.push(d);
            out.baseline.push(Some(b));
        }
        out.ids.push(tr.patient_id.clone());
    }
    Ok(out)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Mean over eligible test patients of the largest admissible Q at `t`.
pub fn drl_policy_value(
    model: &StagewiseModel,
    test: &[Trajectory],
    t: StageIndex,
    rule: &AdmissibleRule,
) -> Result<f64> {
    Ok(mean(&scan(model, test, t, rule)?.drl))
}

/// Mean over eligible test patients of the average Q of the admissible
/// actions other than the greedy one.
pub fn baseline_value(
    model: &StagewiseModel,
    test: &[Trajectory],
    t: StageIndex,
    rule: &AdmissibleRule,
) -> Result<f64> {
    let s = scan(model, test, t, rule)?;
    Ok(mean(&baseline_column(&s)?))
}

fn baseline_column(s: &StageScan) -> Result<Vec<f64>> {
    s.baseline
        .iter()
        .zip(&s.ids)
        .map(|(b, id)| {
            b.ok_or_else(|| Error::InvalidRecord {
                patient_id: id.clone(),
                field: "admissible".into(),
                message: "baseline needs at least 2 admissible actions".into(),
            })
        })
        .collect()
}

/// Both values at `t` over one patient set.
pub fn compare_stage(
    model: &StagewiseModel,
    test: &[Trajectory],
    t: StageIndex,
    rule: &AdmissibleRule,
) -> Result<ValueComparison> {
    let s = scan(model, test, t, rule)?;
    let baseline = baseline_column(&s)?;
    Ok(ValueComparison {
        task: model.task,
        t,
        drl_value: mean(&s.drl),
        baseline_value: mean(&baseline),
        n_patients: s.drl.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueReport {
    pub task: TaskKind,
    pub rows: Vec<ValueComparison>,
    /// Multiplier from model units to reporting units.
    pub scale: f64,
}

/// One comparison per decision stage of the model's task.
pub fn comparison_report(model: &StagewiseModel, test: &[Trajectory], rule: &AdmissibleRule) -> Result<ValueReport> {
    let rows = model.task.stages().iter().map(|&t| compare_stage(model, test, t, rule)).collect::<Result<Vec<_>>>()?;
    Ok(ValueReport { task: model.task, rows, scale: model.report_scale() })
}

impl ValueReport {
    pub fn plot_tsv(&self) -> String {
        let mut out = String::from("t\tdrl_value\tbaseline_value\tn_patients\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}",
                r.t,
                r.drl_value * self.scale,
                r.baseline_value * self.scale,
                r.n_patients
            );
        }
        out
    }

    /// Stages where the DRL value strictly exceeds the baseline.
    pub fn strict_wins(&self) -> usize {
        self.rows.iter().filter(|r| r.drl_value > r.baseline_value).count()
    }

    pub fn summary(&self) -> String {
        let mut out = format!("value comparison: {}\n", self.task);
        for r in &self.rows {
            let _ = writeln!(
                out,
                "  t={}  drl={:.6}  baseline={:.6}  gap={:.6}  patients={}",
                r.t,
                r.drl_value * self.scale,
                r.baseline_value * self.scale,
                (r.drl_value - r.baseline_value) * self.scale,
                r.n_patients
            );
        }
        let _ = writeln!(out, "  drl > baseline at {} of {} stages", self.strict_wins(), self.rows.len());
        out
    }
}

/// Pooled and per-stage top-N accuracies of `model` on `test`.
pub fn accuracy_curves(model: &ImitationModel, test: &[LabeledState], ns: &[usize]) -> Result<Vec<TopNReport>> {
    stage_reports(model, test, ns)
}

pub fn accuracy_tsv(reports: &[TopNReport]) -> String {
    let mut out = String::from("task\tt\tn\taccuracy\tn_test_samples\n");
    for r in reports {
        let t = r.t.map(|t| t.to_string()).unwrap_or_else(|| "all".into());
        for (n, acc) in &r.accuracies {
            let _ = writeln!(out, "{}\t{t}\t{n}\t{acc}\t{}", r.task.slug(), r.n_test_samples);
        }
    }
    out
}

pub fn accuracy_summary(reports: &[TopNReport]) -> String {
    let mut out = String::new();
    for r in reports {
        let t = r.t.map(|t| format!("t={t}")).unwrap_or_else(|| "pooled".into());
        let accs: Vec<String> = r.accuracies.iter().map(|(n, a)| format!("top{n}={a:.4}")).collect();
        let _ = writeln!(out, "top-N accuracy: {} {t} (n={}): {}", r.task, r.n_test_samples, accs.join(" "));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::tests::relapse_at;
    use crate::cohort::{FeatureLayout, OutcomeCategory};
    use crate::imitation::predict_topn;
    use crate::nn::{init_mlp, MlpParams, TrainConfig};
    use crate::stagewise::{fit_backward, StagewiseConfig};
    use crate::synth::{generate_cohort, GroundTruthMdp, SynthConfig};
    use proptest::prelude::*;

    const ACUTE: TaskKind = TaskKind::AcuteGvhdTreatment;

    fn st(t: u8) -> StageIndex {
        StageIndex::new(t).unwrap()
    }

    fn constant_net(q: &[f64]) -> MlpParams {
        let mut net = MlpParams::zeros(&[8, q.len()]).unwrap();
        net.layers[0].biases = q.to_vec();
        net
    }

    fn model_with(task: TaskKind, nets: impl IntoIterator<Item = (u8, MlpParams)>, k: usize) -> StagewiseModel {
        let mut m = StagewiseModel::new(task, k, StagewiseConfig::default()).unwrap();
        for (t, net) in nets {
            m.q_nets.insert(st(t), net);
        }
        m
    }

    /// Observed past t=1 with an acute action recorded there.
    fn treated(id: &str, age: u32, action: ActionId) -> Trajectory {
        let mut tr = relapse_at(3, id);
        tr.baseline.age = age;
        tr.stages[1].acute_gvhd_active = true;
        tr.stages[1].action.insert(ACUTE, action);
        tr
    }

    #[test]
    fn single_patient_value_is_its_max_q() {
        let m = model_with(ACUTE, [(1, constant_net(&[0.3, 0.7, 0.1]))], 3);
        let v = drl_policy_value(&m, &[treated("p1", 40, 0)], st(1), &AdmissibleRule::All).unwrap();
        assert_eq!(v, 0.7);
    }

    #[test]
    fn two_actions_baseline_is_the_other() {
        let m = model_with(ACUTE, [(1, constant_net(&[0.9, 0.5]))], 2);
        let b = baseline_value(&m, &[treated("p1", 40, 1)], st(1), &AdmissibleRule::All).unwrap();
        assert_eq!(b, 0.5);
    }

    #[test]
    fn equal_q_baseline_equals_drl() {
        let m = model_with(ACUTE, [(1, constant_net(&[0.4; 4]))], 4);
        let c = compare_stage(&m, &[treated("p1", 40, 1), treated("p2", 60, 2)], st(1), &AdmissibleRule::All).unwrap();
        assert_eq!(c.baseline_value, c.drl_value);
        assert_eq!(c.n_patients, 2);
    }

    #[test]
    fn single_admissible_action_rejected_for_baseline() {
        let m = model_with(ACUTE, [(1, constant_net(&[0.9]))], 1);
        let test = [treated("p1", 40, 0)];
        assert!(drl_policy_value(&m, &test, st(1), &AdmissibleRule::All).is_ok());
        let err = baseline_value(&m, &test, st(1), &AdmissibleRule::All).unwrap_err();
        assert!(matches!(err, Error::InvalidRecord { ref patient_id, .. } if patient_id == "p1"));
    }

    #[test]
    fn all_censored_stage_is_an_error() {
        let m = model_with(ACUTE, [(1, constant_net(&[0.3, 0.7]))], 2);
        let mut censored = treated("p1", 40, 0);
        censored.last_observation = st(1);
        censored.terminal_observed = false;
        censored.terminal_category = OutcomeCategory::DataLoss;
        censored.stages.truncate(2);
        let err = drl_policy_value(&m, &[censored], st(1), &AdmissibleRule::All).unwrap_err();
        assert!(matches!(err, Error::NoSamples { stage, .. } if stage.get() == 1));
    }

    #[test]
    fn untreated_patients_are_not_evaluated() {
        let m = model_with(ACUTE, [(1, constant_net(&[0.3, 0.7]))], 2);
        let mut untreated = treated("p2", 50, 0);
        untreated.stages[1].action.clear();
        let c = compare_stage(&m, &[treated("p1", 40, 1), untreated], st(1), &AdmissibleRule::All).unwrap();
        assert_eq!(c.n_patients, 1);
    }

    fn recount(m: &StagewiseModel, test: &[Trajectory], sets: &[Vec<ActionId>]) -> (f64, f64) {
        let (mut drl, mut base) = (0.0, 0.0);
        for (tr, set) in test.iter().zip(sets) {
            let x = crate::cohort::encode_features(&tr.baseline, true, false, st(1), FeatureLayout::Dqn).unwrap();
            let q = m.q_nets[&st(1)].forward(x.as_slice()).unwrap();
            let vals: Vec<f64> = set.iter().map(|a| q[*a]).collect();
            let top = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            drl += top;
            base += (vals.iter().sum::<f64>() - top) / (vals.len() - 1) as f64;
        }
        (drl / test.len() as f64, base / test.len() as f64)
    }

    #[test]
    fn random_fixture_matches_brute_force() {
        let m = model_with(ACUTE, [(1, init_mlp(&[8, 6, 4], 21).unwrap())], 4);
        let test: Vec<Trajectory> =
            (0..5usize).map(|i| treated(&format!("p{i}"), (20 + 11 * i) as u32, i % 4)).collect();
        let c = compare_stage(&m, &test, st(1), &AdmissibleRule::All).unwrap();
        let (drl, base) = recount(&m, &test, &vec![(0..4).collect(); 5]);
        assert!((c.drl_value - drl).abs() < 1e-12);
        assert!((c.baseline_value - base).abs() < 1e-12);
    }

    #[test]
    fn top_n_rule_matches_brute_force() {
        let vocab = crate::cohort::ActionVocabulary::new(ACUTE, (0..4).map(|i| format!("a{i}")).collect()).unwrap();
        let imit = ImitationModel::new(ACUTE, vocab, 5).unwrap();
        let rule = AdmissibleRule::TopN { model: &imit, n: 3 };
        let m = model_with(ACUTE, [(1, init_mlp(&[8, 6, 4], 22).unwrap())], 4);
        let test: Vec<Trajectory> = (0..5usize).map(|i| treated(&format!("p{i}"), (22 + 9 * i) as u32, 0)).collect();
        let sets: Vec<Vec<ActionId>> = test
            .iter()
            .map(|tr| {
                let x = crate::cohort::encode_state(tr, st(1), ACUTE, FeatureLayout::Imitation).unwrap();
                predict_topn(&imit, &x, 3).unwrap().into_iter().map(|p| p.0).collect()
            })
            .collect();
        let c = compare_stage(&m, &test, st(1), &rule).unwrap();
        let (drl, base) = recount(&m, &test, &sets);
        assert!((c.drl_value - drl).abs() < 1e-12);
        assert!((c.baseline_value - base).abs() < 1e-12);
    }

    #[test]
    fn report_rows_follow_task_stages() {
        let acute = model_with(ACUTE, [(1, constant_net(&[0.2, 0.6])), (2, constant_net(&[0.5, 0.1]))], 2);
        let mut a = treated("p1", 40, 0);
        a.stages[2].action.insert(ACUTE, 1);
        let r = comparison_report(&acute, &[a], &AdmissibleRule::All).unwrap();
        let ts: Vec<u8> = r.rows.iter().map(|r| r.t.get()).collect();
        assert_eq!(ts, vec![1, 2]);

        let chronic_task = TaskKind::ChronicGvhdTreatment;
        let chronic = model_with(chronic_task, (2..=5).map(|t| (t, constant_net(&[0.1, 0.2, 0.3]))), 3);
        let mut c = relapse_at(5, "p2");
        c.last_observation = st(5);
        c.terminal_observed = true;
        c.terminal_category = OutcomeCategory::SurvivalWithGvhd;
        c.survival_time = Some(1460.0);
        c.stages.push(crate::cohort::StageRecord::new(st(5)));
        for st in c.stages.iter_mut().skip(2) {
            st.chronic_gvhd_active = true;
            st.action.insert(chronic_task, 2);
        }
        let r = comparison_report(&chronic, &[c], &AdmissibleRule::All).unwrap();
        let ts: Vec<u8> = r.rows.iter().map(|r| r.t.get()).collect();
        assert_eq!(ts, vec![2, 3, 4, 5]);
        assert_eq!(r.strict_wins(), 4);
        let tsv = r.plot_tsv();
        assert_eq!(tsv.lines().count(), 5);
        let row: Vec<f64> = tsv.lines().nth(1).unwrap().split('\t').map(|c| c.parse().unwrap()).collect();
        assert_eq!(row.len(), 4);
        assert_eq!((row[0], row[1], row[3]), (2.0, 0.3, 1.0));
        assert!((row[2] - 0.15).abs() < 1e-12);
    }

    #[test]
    fn missing_stage_network_propagates() {
        let m = model_with(ACUTE, [(1, constant_net(&[0.2, 0.6]))], 2);
        let mut a = treated("p1", 40, 0);
        a.stages[2].action.insert(ACUTE, 1);
        assert!(matches!(comparison_report(&m, &[a], &AdmissibleRule::All), Err(Error::ModelUnavailable(_))));
    }

    #[test]
    fn fitted_benchmark_value_tracks_oracle() {
        let mdp = GroundTruthMdp::acute_benchmark(5);
        let out = generate_cohort(&SynthConfig::new(mdp, 3000, 2)).unwrap();
        let cfg = StagewiseConfig {
            train: TrainConfig { learning_rate: 1e-3, epochs: 200, ..TrainConfig::default() },
            ..StagewiseConfig::default()
        };
        let trajs = &out.cohort.trajectories;
        let model = fit_backward(trajs, ACUTE, 4, &AdmissibleRule::All, &cfg).unwrap();
        for t in [st(1), st(2)] {
            let mut v_star = 0.0;
            let mut n = 0usize;
            for (tr, path) in trajs.iter().zip(&out.latent) {
                if is_included(tr, t, ACUTE, HeadKind::Q) {
                    v_star += out.oracle.v(t.as_usize(), path[t.as_usize()]);
                    n += 1;
                }
            }
            let drl = drl_policy_value(&model, trajs, t, &AdmissibleRule::All).unwrap();
            assert!((drl - v_star / n as f64).abs() < 0.05, "t={t}: {drl} vs {}", v_star / n as f64);
        }
        let r1 = comparison_report(&model, trajs, &AdmissibleRule::All).unwrap();
        let r2 = comparison_report(&model, trajs, &AdmissibleRule::All).unwrap();
        assert_eq!(r1.plot_tsv(), r2.plot_tsv());
        assert!(r1.rows.iter().all(|r| r.baseline_value <= r.drl_value));
    }

    #[test]
    fn accuracy_tsv_layout() {
        let r = TopNReport { task: ACUTE, t: None, accuracies: vec![(1, 0.5), (2, 1.0)], n_test_samples: 4 };
        let tsv = accuracy_tsv(&[r]);
        assert_eq!(tsv, "task\tt\tn\taccuracy\tn_test_samples\nacute\tall\t1\t0.5\t4\nacute\tall\t2\t1\t4\n");
    }

    proptest! {
        #[test]
        fn baseline_never_exceeds_drl(
            q in prop::collection::vec(-5.0f64..5.0, 2..10),
            mask in prop::collection::vec(any::<bool>(), 10),
        ) {
            let mut set: Vec<ActionId> = (0..q.len()).filter(|i| mask[*i]).collect();
            if set.len() < 2 {
                set = vec![0, 1];
            }
            let (d, b) = patient_values(&q, &set).unwrap();
            prop_assert!(b <= d);
            let top = set.iter().map(|a| q[*a]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(d, top);
        }

        #[test]
        fn tied_maxima_drop_only_one(v in -3.0f64..3.0, k in 2usize..8) {
            let q = vec![v; k];
            let set: Vec<ActionId> = (0..k).collect();
            let (d, b) = patient_values(&q, &set).unwrap();
            prop_assert_eq!(d, b);
        }
    }
}
