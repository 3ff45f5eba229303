//! Recommendation service logic, independent of any transport.
//!
//! Handlers are pure functions of the request and an immutable
//! [`ModelStore`]; the HTTP layer only moves JSON in and out. Every failure
//! maps to a [`ServiceError`] carrying a machine-readable code and, for
//! validation failures, the offending field.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cohort::{
    encode_state, ActionId, FeatureLayout, PatientBaseline, StageIndex, StageRecord, TaskKind, Trajectory,
};
use crate::imitation::{checkpoint_name, predict_topn, ImitationModel};
use crate::nn::{Checkpoint, Head};
use crate::stagewise::{dqn_state, manifest_name, recommend, StagewiseModel};
use crate::{Error, OutcomeCategory, Result};

/// Environment variable that overrides the model directory.
pub const MODEL_DIR_ENV: &str = "DTR_MODEL_DIR";

/// Hex digits kept from the SHA-256 of a model's contents.
const VERSION_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecommendRequest {
    pub task: TaskKind,
    pub t: u8,
    pub baseline: PatientBaseline,
    #[serde(default)]
    pub acute_gvhd_active: bool,
    #[serde(default)]
    pub chronic_gvhd_active: bool,
    pub top_n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedAction {
    pub action: String,
    pub action_id: ActionId,
    pub expert_probability: f64,
    /// `None` when no value model covers the task and stage.
    pub q_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelVersions {
    pub imitation: String,
    pub stagewise: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendResponse {
    pub task: TaskKind,
    pub t: u8,
    /// Descending expert probability, ties by ascending action id.
    pub actions: Vec<RankedAction>,
    pub model_version: ModelVersions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WhatIfStep {
    pub t: u8,
    pub action: String,
    /// Defaults to whether `task` treats acute GVHD.
    #[serde(default)]
    pub acute_gvhd_active: Option<bool>,
    /// Defaults to whether `task` treats chronic GVHD.
    #[serde(default)]
    pub chronic_gvhd_active: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WhatIfRequest {
    pub task: TaskKind,
    pub baseline: PatientBaseline,
    pub steps: Vec<WhatIfStep>,
    /// Restricts the best alternative to the expert's top `n`; absent means
    /// the whole vocabulary.
    #[serde(default)]
    pub top_n: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhatIfStage {
    pub t: u8,
    pub action: String,
    pub chosen_q: f64,
    pub best_action: String,
    pub best_q: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhatIfResponse {
    pub task: TaskKind,
    pub trace: Vec<WhatIfStage>,
    pub model_version: ModelVersions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub task: TaskKind,
    pub kind: String,
    pub version: String,
    pub vocab_size: usize,
    pub stages: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelsResponse {
    pub models: Vec<ModelInfo>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    InvalidRequest,
    ModelUnavailable,
    NotFound,
    Internal,
}

impl ErrorCode {
    pub fn http_status(self) -> u16 {
        match self {
            ErrorCode::InvalidRequest => 400,
            ErrorCode::NotFound => 404,
            ErrorCode::Internal => 500,
            ErrorCode::ModelUnavailable => 503,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceError {
    pub code: ErrorCode,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

impl ServiceError {
    pub fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        ServiceError { code: ErrorCode::InvalidRequest, message: message.into(), field: Some(field.into()) }
    }

    pub fn unavailable(message: impl Into<String>) -> Self {
        ServiceError { code: ErrorCode::ModelUnavailable, message: message.into(), field: None }
    }
}

impl From<Error> for ServiceError {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        match e {
            Error::InvalidArgument { field, .. } | Error::InvalidRecord { field, .. } => {
                ServiceError { code: ErrorCode::InvalidRequest, message, field: Some(field) }
            }
            Error::ModelUnavailable(_) => ServiceError::unavailable(message),
            _ => ServiceError { code: ErrorCode::Internal, message, field: None },
        }
    }
}

impl std::fmt::Display for ServiceError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.field {
            Some(field) => write!(f, "{:?} ({field}): {}", self.code, self.message),
            None => write!(f, "{:?}: {}", self.code, self.message),
        }
    }
}

impl std::error::Error for ServiceError {}

pub type ServiceResult<T> = std::result::Result<T, ServiceError>;

fn digest(parts: &[String]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    let mut hex = hex::encode(h.finalize());
    hex.truncate(VERSION_LEN);
    hex
}

fn imitation_version(m: &ImitationModel) -> Result<String> {
    Ok(digest(&[
        Checkpoint::new(&m.mlp, Head::SoftmaxCrossEntropy, None).to_json()?,
        serde_json::to_string(m.vocabulary.labels())?,
    ]))
}

fn stagewise_version(m: &StagewiseModel) -> Result<String> {
    let mut parts = vec![serde_json::to_string(&(m.task, m.vocab_size, m.config))?];
    for (tag, nets) in [("q", &m.q_nets), ("v", &m.continuation)] {
        for (t, net) in nets {
            parts.push(format!("{tag}{t}"));
            parts.push(Checkpoint::new(net, Head::SquaredError, None).to_json()?);
        }
    }
    Ok(digest(&parts))
}

/// Immutable set of models answering requests.
#[derive(Debug, Clone)]
pub struct ModelStore {
    imitation: BTreeMap<TaskKind, (ImitationModel, String)>,
    stagewise: BTreeMap<TaskKind, (StagewiseModel, String)>,
}

impl ModelStore {
    pub fn from_models(imitation: Vec<ImitationModel>, stagewise: Vec<StagewiseModel>) -> Result<Self> {
        let mut store = ModelStore { imitation: BTreeMap::new(), stagewise: BTreeMap::new() };
        for m in imitation {
            let v = imitation_version(&m)?;
            store.imitation.insert(m.task, (m, v));
        }
        for m in stagewise {
            if let Some((imit, _)) = store.imitation.get(&m.task) {
                if imit.vocabulary.size() != m.vocab_size {
                    return Err(Error::DimensionMismatch {
                        context: "stagewise vocabulary",
                        expected: imit.vocabulary.size(),
                        found: m.vocab_size,
                    });
                }
            }
            let v = stagewise_version(&m)?;
            store.stagewise.insert(m.task, (m, v));
        }
        Ok(store)
    }

    /// Loads every model present in `dir`; tasks without files are skipped.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        if !dir.is_dir() {
            return Err(Error::ModelUnavailable(format!("model directory {} not found", dir.display())));
        }
        let mut imitation = Vec::new();
        let mut stagewise = Vec::new();
        for task in TaskKind::ALL {
            if dir.join(checkpoint_name(task)).is_file() {
                imitation.push(ImitationModel::load(dir, task)?);
            }
            if dir.join(manifest_name(task)).is_file() {
                stagewise.push(StagewiseModel::load(dir, task)?);
            }
        }
        if imitation.is_empty() && stagewise.is_empty() {
            return Err(Error::ModelUnavailable(format!("no models in {}", dir.display())));
        }
        tracing::info!(dir = %dir.display(), imitation = imitation.len(), stagewise = stagewise.len(), "models loaded");
        ModelStore::from_models(imitation, stagewise)
    }

    pub fn is_empty(&self) -> bool {
        self.imitation.is_empty() && self.stagewise.is_empty()
    }

    pub fn imitation(&self, task: TaskKind) -> Option<&ImitationModel> {
        self.imitation.get(&task).map(|(m, _)| m)
    }

    pub fn stagewise(&self, task: TaskKind) -> Option<&StagewiseModel> {
        self.stagewise.get(&task).map(|(m, _)| m)
    }

    /// Loaded imitation models in task order.
    pub fn imitation_models(&self) -> Vec<ImitationModel> {
        self.imitation.values().map(|(m, _)| m.clone()).collect()
    }

    /// Loaded stagewise models in task order.
    pub fn stagewise_models(&self) -> Vec<StagewiseModel> {
        self.stagewise.values().map(|(m, _)| m.clone()).collect()
    }

    fn require_imitation(&self, task: TaskKind) -> ServiceResult<&(ImitationModel, String)> {
        self.imitation
            .get(&task)
            .ok_or_else(|| ServiceError::unavailable(format!("no imitation model loaded for {task}")))
    }

    fn require_stagewise(&self, task: TaskKind) -> ServiceResult<&(StagewiseModel, String)> {
        self.stagewise
            .get(&task)
            .ok_or_else(|| ServiceError::unavailable(format!("no stagewise model loaded for {task}")))
    }

    pub fn models(&self) -> ModelsResponse {
        let mut models = Vec::new();
        for (task, (m, v)) in &self.imitation {
            models.push(ModelInfo {
                task: *task,
                kind: "imitation".into(),
                version: v.clone(),
                vocab_size: m.vocabulary.size(),
                stages: task.stages().iter().map(|t| t.get()).collect(),
            });
        }
        for (task, (m, v)) in &self.stagewise {
            models.push(ModelInfo {
                task: *task,
                kind: "stagewise".into(),
                version: v.clone(),
                vocab_size: m.vocab_size,
                stages: m.q_nets.keys().map(|t| t.get()).collect(),
            });
        }
        ModelsResponse { models }
    }
}

/// `explicit` if given, else a nonempty value of [`MODEL_DIR_ENV`].
pub fn resolve_model_dir(explicit: Option<PathBuf>, env: Option<String>) -> Option<PathBuf> {
    explicit.or_else(|| env.filter(|s| !s.is_empty()).map(PathBuf::from))
}

fn check_baseline(baseline: &PatientBaseline) -> ServiceResult<()> {
    match baseline.violations().into_iter().next() {
        Some(v) => Err(ServiceError::invalid(v.field, v.message)),
        None => Ok(()),
    }
}

fn check_stage(task: TaskKind, t: u8, field: &str) -> ServiceResult<StageIndex> {
    let stage = StageIndex::new(t).map_err(|e| ServiceError::invalid(field, e.to_string()))?;
    if !task.admits(stage) {
        return Err(ServiceError::invalid(field, format!("{task} is not decided at t={t}")));
    }
    Ok(stage)
}

/// A one-patient record observed up to `t` with the given GVHD flags.
fn probe(baseline: &PatientBaseline, t: StageIndex, acute: bool, chronic: bool) -> Trajectory {
    let mut stage = StageRecord::new(t);
    stage.acute_gvhd_active = acute;
    stage.chronic_gvhd_active = chronic;
    Trajectory {
        patient_id: "request".into(),
        baseline: baseline.clone(),
        stages: vec![stage],
        last_observation: t,
        terminal_observed: false,
        terminal_category: OutcomeCategory::DataLoss,
        survival_time: None,
    }
}

pub fn handle_recommend(req: &RecommendRequest, store: &ModelStore) -> ServiceResult<RecommendResponse> {
    check_baseline(&req.baseline)?;
    let t = check_stage(req.task, req.t, "t")?;
    if req.top_n == 0 {
        return Err(ServiceError::invalid("top_n", "must be at least 1"));
    }
    let (imit, imit_version) = store.require_imitation(req.task)?;
    let traj = probe(&req.baseline, t, req.acute_gvhd_active, req.chronic_gvhd_active);
    let x = encode_state(&traj, t, req.task, FeatureLayout::Imitation)?;
    let n = req.top_n.min(imit.vocabulary.size());
    let ranked = predict_topn(imit, &x, n)?;
    let (q, stagewise_version) = match store.stagewise.get(&req.task) {
        Some((m, v)) if m.q_nets.contains_key(&t) => {
            let ids: Vec<ActionId> = ranked.iter().map(|p| p.0).collect();
            let scale = m.report_scale();
            let q: BTreeMap<ActionId, f64> =
                recommend(m, &dqn_state(&traj, t)?, t, &ids)?.into_iter().map(|(a, v)| (a, v * scale)).collect();
            (Some(q), Some(v.clone()))
        }
        _ => (None, None),
    };
    let actions = ranked
        .into_iter()
        .map(|(id, p)| RankedAction {
            action: imit.vocabulary.label(id).unwrap_or_default().to_string(),
            action_id: id,
            expert_probability: p,
            q_value: q.as_ref().and_then(|q| q.get(&id).copied()),
        })
        .collect();
    Ok(RecommendResponse {
        task: req.task,
        t: req.t,
        actions,
        model_version: ModelVersions { imitation: imit_version.clone(), stagewise: stagewise_version },
    })
}

pub fn handle_whatif(req: &WhatIfRequest, store: &ModelStore) -> ServiceResult<WhatIfResponse> {
    check_baseline(&req.baseline)?;
    let (imit, imit_version) = store.require_imitation(req.task)?;
    let (model, q_version) = store.require_stagewise(req.task)?;
    let k = imit.vocabulary.size();
    if req.top_n == Some(0) {
        return Err(ServiceError::invalid("top_n", "must be at least 1"));
    }
    let scale = model.report_scale();
    let mut trace = Vec::with_capacity(req.steps.len());
    let mut previous: Option<u8> = None;
    for (i, step) in req.steps.iter().enumerate() {
        let t = check_stage(req.task, step.t, &format!("steps[{i}].t"))?;
        if previous.is_some_and(|p| p >= step.t) {
            return Err(ServiceError::invalid(format!("steps[{i}].t"), "stages must be strictly increasing"));
        }
        previous = Some(step.t);
        let chosen = imit.vocabulary.id_of(&step.action).ok_or_else(|| {
            ServiceError::invalid(format!("steps[{i}].action"), format!("unknown action {:?}", step.action))
        })?;
        let acute = step.acute_gvhd_active.unwrap_or(req.task == TaskKind::AcuteGvhdTreatment);
        let chronic = step.chronic_gvhd_active.unwrap_or(req.task == TaskKind::ChronicGvhdTreatment);
        let traj = probe(&req.baseline, t, acute, chronic);
        let admissible: Vec<ActionId> = match req.top_n {
            None => (0..k).collect(),
            Some(n) => {
                let x = encode_state(&traj, t, req.task, FeatureLayout::Imitation)?;
                predict_topn(imit, &x, n.min(k))?.into_iter().map(|p| p.0).collect()
            }
        };
        let s = dqn_state(&traj, t)?;
        let q = model.q_values(&s, t)?;
        let ranked = recommend(model, &s, t, &admissible)?;
        let (best, best_q) = ranked[0];
        trace.push(WhatIfStage {
            t: step.t,
            action: step.action.clone(),
            chosen_q: q[chosen] * scale,
            best_action: imit.vocabulary.label(best).unwrap_or_default().to_string(),
            best_q: best_q * scale,
        });
    }
    Ok(WhatIfResponse {
        task: req.task,
        trace,
        model_version: ModelVersions { imitation: imit_version.clone(), stagewise: Some(q_version.clone()) },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub models: usize,
}

pub fn handle_health(store: &ModelStore) -> HealthResponse {
    HealthResponse { status: "ok".into(), models: store.imitation.len() + store.stagewise.len() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::tests::baseline;
    use crate::cohort::{encode_features, ActionVocabulary};
    use crate::nn::{init_mlp, MlpParams};
    use crate::stagewise::StagewiseConfig;

    const ACUTE: TaskKind = TaskKind::AcuteGvhdTreatment;

    fn fixture_store() -> ModelStore {
        let labels: Vec<String> = ["none", "mtx", "csa", "mtx+csa", "tac"].iter().map(|s| s.to_string()).collect();
        let vocab = ActionVocabulary::new(ACUTE, labels).unwrap();
        let imit = ImitationModel { task: ACUTE, mlp: init_mlp(&[9, 16, 32, 5], 3).unwrap(), vocabulary: vocab };
        let mut q = StagewiseModel::new(ACUTE, 5, StagewiseConfig::default()).unwrap();
        q.q_nets.insert(StageIndex::new(1).unwrap(), init_mlp(&[8, 32, 64, 5], 4).unwrap());
        q.q_nets.insert(StageIndex::new(2).unwrap(), init_mlp(&[8, 32, 64, 5], 5).unwrap());
        ModelStore::from_models(vec![imit], vec![q]).unwrap()
    }

    fn request(top_n: usize) -> RecommendRequest {
        RecommendRequest {
            task: ACUTE,
            t: 1,
            baseline: baseline(),
            acute_gvhd_active: true,
            chronic_gvhd_active: false,
            top_n,
        }
    }

    #[test]
    fn top_one_is_the_expert_favourite_with_its_q() {
        let store = fixture_store();
        let resp = handle_recommend(&request(1), &store).unwrap();
        assert_eq!(resp.actions.len(), 1);
        let imit = store.imitation(ACUTE).unwrap();
        let x =
            encode_features(&baseline(), true, false, StageIndex::new(1).unwrap(), FeatureLayout::Imitation).unwrap();
        let logits = imit.logits(&x).unwrap();
        let argmax = (0..5).max_by(|a, b| logits[*a].total_cmp(&logits[*b]).then(b.cmp(a))).unwrap();
        assert_eq!(resp.actions[0].action_id, argmax);
        let s = encode_features(&baseline(), true, false, StageIndex::new(1).unwrap(), FeatureLayout::Dqn).unwrap();
        let q = store.stagewise(ACUTE).unwrap().q_nets[&StageIndex::new(1).unwrap()].forward(s.as_slice()).unwrap();
        assert_eq!(resp.actions[0].q_value, Some(q[argmax]));
    }

    #[test]
    fn response_matches_direct_library_calls() {
        let store = fixture_store();
        let resp = handle_recommend(&request(4), &store).unwrap();
        let imit = store.imitation(ACUTE).unwrap();
        let t = StageIndex::new(1).unwrap();
        let x = encode_features(&baseline(), true, false, t, FeatureLayout::Imitation).unwrap();
        let direct = predict_topn(imit, &x, 4).unwrap();
        assert_eq!(resp.actions.iter().map(|a| (a.action_id, a.expert_probability)).collect::<Vec<_>>(), direct);
        for w in resp.actions.windows(2) {
            assert!(w[0].expert_probability >= w[1].expert_probability);
        }
        assert_eq!(resp.actions[2].action, imit.vocabulary.label(direct[2].0).unwrap());
    }

    #[test]
    fn list_length_is_capped_by_vocabulary() {
        let resp = handle_recommend(&request(50), &fixture_store()).unwrap();
        assert_eq!(resp.actions.len(), 5);
    }

    #[test]
    fn identical_requests_identical_responses() {
        let store = fixture_store();
        let a = serde_json::to_string(&handle_recommend(&request(3), &store).unwrap()).unwrap();
        let b = serde_json::to_string(&handle_recommend(&request(3), &store).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn validation_errors_name_the_field() {
        let store = fixture_store();
        let err = handle_recommend(&request(0), &store).unwrap_err();
        assert_eq!((err.code, err.field.as_deref()), (ErrorCode::InvalidRequest, Some("top_n")));
        let mut r = request(2);
        r.t = 4;
        assert_eq!(handle_recommend(&r, &store).unwrap_err().field.as_deref(), Some("t"));
        r.t = 9;
        assert_eq!(handle_recommend(&r, &store).unwrap_err().field.as_deref(), Some("t"));
        let mut r = request(2);
        r.baseline.age = 130;
        assert_eq!(handle_recommend(&r, &store).unwrap_err().field.as_deref(), Some("baseline.age"));
    }

    #[test]
    fn missing_model_is_unavailable() {
        let mut r = request(2);
        r.task = TaskKind::ChronicGvhdTreatment;
        r.t = 3;
        let err = handle_recommend(&r, &fixture_store()).unwrap_err();
        assert_eq!(err.code, ErrorCode::ModelUnavailable);
        assert_eq!(err.code.http_status(), 503);
    }

    #[test]
    fn imitation_only_task_has_no_q() {
        let vocab = ActionVocabulary::new(TaskKind::GvhdProphylaxis, vec!["a".into(), "b".into()]).unwrap();
        let store =
            ModelStore::from_models(vec![ImitationModel::new(TaskKind::GvhdProphylaxis, vocab, 1).unwrap()], vec![])
                .unwrap();
        let r = RecommendRequest { task: TaskKind::GvhdProphylaxis, t: 0, ..request(2) };
        let resp = handle_recommend(&r, &store).unwrap();
        assert!(resp.actions.iter().all(|a| a.q_value.is_none()));
        assert_eq!(resp.model_version.stagewise, None);
    }

    fn step(t: u8, action: &str) -> WhatIfStep {
        WhatIfStep { t, action: action.into(), acute_gvhd_active: None, chronic_gvhd_active: None }
    }

    fn whatif(steps: Vec<WhatIfStep>) -> WhatIfRequest {
        WhatIfRequest { task: ACUTE, baseline: baseline(), steps, top_n: None }
    }

    #[test]
    fn empty_sequence_gives_empty_trace() {
        assert!(handle_whatif(&whatif(vec![]), &fixture_store()).unwrap().trace.is_empty());
    }

    #[test]
    fn choosing_the_argmax_gives_equal_q() {
        let store = fixture_store();
        let probe = handle_whatif(&whatif(vec![step(1, "none")]), &store).unwrap();
        let best = probe.trace[0].best_action.clone();
        let resp = handle_whatif(&whatif(vec![step(1, &best)]), &store).unwrap();
        assert_eq!(resp.trace[0].chosen_q, resp.trace[0].best_q);
    }

    #[test]
    fn branches_match_direct_recommend_calls() {
        let store = fixture_store();
        let model = store.stagewise(ACUTE).unwrap();
        let vocab = &store.imitation(ACUTE).unwrap().vocabulary;
        for branch in [["mtx", "csa"], ["tac", "none"]] {
            let resp = handle_whatif(&whatif(vec![step(1, branch[0]), step(2, branch[1])]), &store).unwrap();
            for (stage, label) in resp.trace.iter().zip(branch) {
                let t = StageIndex::new(stage.t).unwrap();
                let s = encode_features(&baseline(), true, false, t, FeatureLayout::Dqn).unwrap();
                let ranked = recommend(model, &s, t, &(0..5).collect::<Vec<_>>()).unwrap();
                let chosen = vocab.id_of(label).unwrap();
                let chosen_q = ranked.iter().find(|p| p.0 == chosen).unwrap().1;
                assert_eq!(stage.chosen_q, chosen_q);
                assert_eq!(stage.best_q, ranked[0].1);
                assert_eq!(stage.best_action, vocab.label(ranked[0].0).unwrap());
            }
        }
    }

    #[test]
    fn whatif_rejects_bad_sequences() {
        let store = fixture_store();
        let err = handle_whatif(&whatif(vec![step(2, "mtx"), step(1, "csa")]), &store).unwrap_err();
        assert_eq!(err.field.as_deref(), Some("steps[1].t"));
        let err = handle_whatif(&whatif(vec![step(1, "aspirin")]), &store).unwrap_err();
        assert_eq!(err.field.as_deref(), Some("steps[0].action"));
        let err = handle_whatif(&whatif(vec![step(3, "mtx")]), &store).unwrap_err();
        assert_eq!(err.field.as_deref(), Some("steps[0].t"));
    }

    #[test]
    fn whatif_top_n_limits_the_alternative() {
        let store = fixture_store();
        let mut r = whatif(vec![step(1, "mtx")]);
        r.top_n = Some(1);
        let resp = handle_whatif(&r, &store).unwrap();
        let top1 = handle_recommend(&request(1), &store).unwrap();
        assert_eq!(resp.trace[0].best_action, top1.actions[0].action);
    }

    #[test]
    fn versions_survive_save_and_load() {
        let store = fixture_store();
        let dir = tempfile::tempdir().unwrap();
        store.imitation(ACUTE).unwrap().save(dir.path()).unwrap();
        store.stagewise(ACUTE).unwrap().save(dir.path()).unwrap();
        let loaded = ModelStore::load(dir.path()).unwrap();
        assert_eq!(loaded.models(), store.models());
        assert_eq!(loaded.models().models.len(), 2);
        assert_eq!(loaded.models().models[0].version.len(), VERSION_LEN);
    }

    #[test]
    fn changed_weights_change_the_version() {
        let store = fixture_store();
        let mut m = store.stagewise(ACUTE).unwrap().clone();
        let net: &mut MlpParams = m.q_nets.get_mut(&StageIndex::new(1).unwrap()).unwrap();
        net.layers[0].biases[0] += 1e-9;
        let other = ModelStore::from_models(vec![], vec![m]).unwrap();
        assert_ne!(other.models().models[0].version, store.models().models[1].version);
    }

    #[test]
    fn empty_or_missing_directory_is_unavailable() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(ModelStore::load(dir.path()), Err(Error::ModelUnavailable(_))));
        assert!(matches!(ModelStore::load(dir.path().join("nope")), Err(Error::ModelUnavailable(_))));
    }

    #[test]
    fn model_dir_precedence() {
        assert_eq!(resolve_model_dir(Some("a".into()), Some("b".into())), Some(PathBuf::from("a")));
        assert_eq!(resolve_model_dir(None, Some("b".into())), Some(PathBuf::from("b")));
        assert_eq!(resolve_model_dir(None, Some(String::new())), None);
        assert_eq!(resolve_model_dir(None, None), None);
    }

    #[test]
    fn error_json_shape() {
        let e = ServiceError::invalid("top_n", "must be at least 1");
        assert_eq!(
            serde_json::to_string(&e).unwrap(),
            r#"{"code":"invalid_request","message":"must be at least 1","field":"top_n"}"#
        );
        let e = ServiceError::unavailable("x");
        assert_eq!(serde_json::to_string(&e).unwrap(), r#"{"code":"model_unavailable","message":"x"}"#);
    }
}
