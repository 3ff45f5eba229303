//! Expert-action imitation: one classifier per task over the 9-slot
//! encoding, ranked by predicted probability.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cohort::{
    encode_state, ActionId, ActionVocabulary, FeatureLayout, FeatureVector, StageIndex, TaskKind, Trajectory,
};
use crate::nn::{fit, init_mlp, softmax, Checkpoint, Example, FitReport, Head, MlpParams, TrainConfig};
use crate::{Error, Result};

pub const HIDDEN: [usize; 2] = [16, 32];

/// Learning rate used for imitation networks.
pub const LEARNING_RATE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct ImitationModel {
    pub task: TaskKind,
    pub mlp: MlpParams,
    pub vocabulary: ActionVocabulary,
}

/// An encoded state with the expert's recorded action.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledState {
    pub t: StageIndex,
    pub x: FeatureVector,
    pub action: ActionId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopNReport {
    pub task: TaskKind,
    /// `None` when all stages are pooled.
    pub t: Option<StageIndex>,
    pub accuracies: Vec<(usize, f64)>,
    pub n_test_samples: usize,
}

impl TopNReport {
    pub fn accuracy(&self, n: usize) -> Option<f64> {
        self.accuracies.iter().find(|(k, _)| *k == n).map(|(_, a)| *a)
    }
}

/// Defaults for imitation training: the imitation learning rate, 32-sample
/// minibatches.
pub fn default_train_config() -> TrainConfig {
    TrainConfig { learning_rate: LEARNING_RATE, epochs: 200, ..TrainConfig::default() }
}

impl ImitationModel {
    pub fn new(task: TaskKind, vocabulary: ActionVocabulary, seed: u64) -> Result<Self> {
        if vocabulary.task != task {
            return Err(Error::invalid("vocabulary", format!("belongs to {}, not {task}", vocabulary.task)));
        }
        let mlp = init_mlp(&[FeatureLayout::Imitation.len(), HIDDEN[0], HIDDEN[1], vocabulary.size()], seed)?;
        Ok(ImitationModel { task, mlp, vocabulary })
    }

    fn check(&self) -> Result<()> {
        if self.mlp.input_dim() != FeatureLayout::Imitation.len() {
            return Err(Error::DimensionMismatch {
                context: "imitation input",
                expected: FeatureLayout::Imitation.len(),
                found: self.mlp.input_dim(),
            });
        }
        if self.mlp.output_dim() != self.vocabulary.size() {
            return Err(Error::DimensionMismatch {
                context: "imitation output",
                expected: self.vocabulary.size(),
                found: self.mlp.output_dim(),
            });
        }
        Ok(())
    }

    pub fn logits(&self, state: &FeatureVector) -> Result<Vec<f64>> {
        if state.layout != FeatureLayout::Imitation {
            return Err(Error::invalid("state", "imitation models take the Imitation layout"));
        }
        self.mlp.forward(state.as_slice())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        Checkpoint::new(&self.mlp, Head::SoftmaxCrossEntropy, None).save(dir.join(checkpoint_name(self.task)))?;
        fs::write(dir.join(vocab_name(self.task)), serde_json::to_string(self.vocabulary.labels())? + "\n")?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>, task: TaskKind) -> Result<Self> {
        let dir = dir.as_ref();
        let mlp = Checkpoint::load(dir.join(checkpoint_name(task)))?.params()?;
        let labels: Vec<String> = serde_json::from_str(&fs::read_to_string(dir.join(vocab_name(task)))?)?;
        let model = ImitationModel { task, mlp, vocabulary: ActionVocabulary::new(task, labels)? };
        model.check()?;
        Ok(model)
    }
}

pub fn checkpoint_name(task: TaskKind) -> String {
    format!("imitation_{}.json", task.slug())
}

pub fn vocab_name(task: TaskKind) -> String {
    format!("imitation_{}.vocab.json", task.slug())
}

/// Every recorded `task` action in `cohort`, encoded at its stage.
pub fn labeled_states(cohort: &[Trajectory], task: TaskKind) -> Result<Vec<LabeledState>> {
    let mut out = Vec::new();
    for traj in cohort {
        for st in &traj.stages {
            if let Some(&action) = st.action.get(&task) {
                out.push(LabeledState {
                    t: st.t,
                    x: encode_state(traj, st.t, task, FeatureLayout::Imitation)?,
                    action,
                });
            }
        }
    }
    Ok(out)
}

pub fn train_imitation(
    task: TaskKind,
    vocabulary: &ActionVocabulary,
    train: &[LabeledState],
    config: &TrainConfig,
) -> Result<(ImitationModel, FitReport)> {
    if train.is_empty() {
        return Err(Error::Empty("imitation training set"));
    }
    let k = vocabulary.size();
    let mut examples = Vec::with_capacity(train.len());
    for s in train {
        if s.action >= k {
            return Err(Error::invalid("action", format!("label {} outside vocabulary of {k}", s.action)));
        }
        if s.x.layout != FeatureLayout::Imitation {
            return Err(Error::invalid("x", "imitation models take the Imitation layout"));
        }
        examples.push(Example::class(s.x.values.clone(), s.action));
    }
    let mut model = ImitationModel::new(task, vocabulary.clone(), config.seed)?;
    let report = fit(&mut model.mlp, &examples, Head::SoftmaxCrossEntropy, config)?;
    tracing::debug!(%task, initial = report.initial_loss, last = report.final_loss, "imitation fit");
    Ok((model, report))
}

/// Descending by logit, ties by ascending id.
fn rank_order(logits: &[f64]) -> Vec<ActionId> {
    let mut ids: Vec<ActionId> = (0..logits.len()).collect();
    ids.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    ids
}

/// The `n` most probable actions with their softmax probabilities.
pub fn predict_topn(model: &ImitationModel, state: &FeatureVector, n: usize) -> Result<Vec<(ActionId, f64)>> {
    let k = model.vocabulary.size();
    if n == 0 || n > k {
        return Err(Error::invalid("top_n", format!("must lie in 1..={k}")));
    }
    let logits = model.logits(state)?;
    let probs = softmax(&logits);
    Ok(rank_order(&logits).into_iter().take(n).map(|a| (a, probs[a])).collect())
}

/// Position of `action` in the ranking of `logits`.
fn rank_of(logits: &[f64], action: ActionId) -> usize {
    let z = logits[action];
    logits.iter().enumerate().filter(|(j, v)| **v > z || (**v == z && *j < action)).count()
}

/// Fraction of `test` whose recorded action is among the top `n`, per `n`.
pub fn topn_accuracy(
    model: &ImitationModel,
    test: &[LabeledState],
    ns: &[usize],
    t: Option<StageIndex>,
) -> Result<TopNReport> {
    if test.is_empty() {
        return Err(Error::Empty("imitation test set"));
    }
    let k = model.vocabulary.size();
    if let Some(bad) = ns.iter().find(|n| **n == 0 || **n > k) {
        return Err(Error::invalid("n", format!("{bad} outside 1..={k}")));
    }
    let mut ranks = Vec::with_capacity(test.len());
    for s in test {
        if s.action >= k {
            return Err(Error::invalid("action", format!("label {} outside vocabulary of {k}", s.action)));
        }
        ranks.push(rank_of(&model.logits(&s.x)?, s.action));
    }
    let total = test.len() as f64;
    let accuracies = ns.iter().map(|&n| (n, ranks.iter().filter(|r| **r < n).count() as f64 / total)).collect();
    Ok(TopNReport { task: model.task, t, accuracies, n_test_samples: test.len() })
}

/// Reports pooled over all stages followed by one per stage of the task.
pub fn stage_reports(model: &ImitationModel, test: &[LabeledState], ns: &[usize]) -> Result<Vec<TopNReport>> {
    let mut out = vec![topn_accuracy(model, test, ns, None)?];
    for &t in model.task.stages() {
        let at: Vec<LabeledState> = test.iter().filter(|s| s.t == t).cloned().collect();
        if !at.is_empty() {
            out.push(topn_accuracy(model, &at, ns, Some(t))?);
        }
    }
    Ok(out)
}
