//! End-to-end run on a synthetic cohort: generate, split, train both steps,
//! evaluate, and write every artifact under one directory.
//!
//! Output layout:
//!
//! ```text
//! <out>/config.toml
//! <out>/cohort.jsonl
//! <out>/oracle_q.tsv
//! <out>/models/imitation_<task>.json (+ .vocab.json)
//! <out>/models/stagewise_<task>.json (+ per-stage heads)
//! <out>/reports/accuracy_<task>.tsv
//! <out>/reports/values_<task>.tsv
//! <out>/reports/stagewise_audit_<task>.tsv
//! <out>/reports/summary.txt
//! ```
//!
//! Every file is a pure function of the configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cohort::{save_cohort, split_cohort, CohortFile, FeatureLayout, TaskKind, Trajectory};
use crate::dqn::{oracle_q_error, run_online, run_rng, AgentConfig, CurveRow, MdpEnvironment, QAgent};
use crate::eval::{accuracy_curves, accuracy_summary, accuracy_tsv, comparison_report, ValueReport};
use crate::imitation::{default_train_config, labeled_states, train_imitation, ImitationModel, TopNReport};
use crate::nn::TrainConfig;
use crate::stagewise::{fit_backward, AdmissibleRule, StagewiseConfig, StagewiseModel};
use crate::synth::{generate_cohort, solve_oracle, CohortMdpSpec, GroundTruthMdp, SynthConfig, SyntheticCohort};
use crate::{Error, Result};

pub const MODELS_DIR: &str = "models";
pub const REPORTS_DIR: &str = "reports";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub n_patients: usize,
    /// Seeds generation and the train/test split.
    pub seed: u64,
    pub train_fraction: f64,
    pub cohort: CohortMdpSpec,
    pub imitation: TrainConfig,
    pub stagewise: StagewiseConfig,
    /// Size of the expert top-N set the Q step chooses from.
    pub admissible_top_n: usize,
    pub accuracy_ns: Vec<usize>,
    pub imitation_tasks: Vec<TaskKind>,
    pub stagewise_tasks: Vec<TaskKind>,
    pub dqn: DqnRunConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DqnEnvironment {
    /// The process behind the default synthetic cohort.
    Cohort,
    /// [`GroundTruthMdp::acute_benchmark`].
    AcuteBenchmark,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DqnRunConfig {
    pub episodes: usize,
    pub environment: DqnEnvironment,
    /// Restricts choices to the expert's top `n` when set.
    pub expert_top_n: Option<usize>,
    pub agent: AgentConfig,
}

impl Default for DqnRunConfig {
    fn default() -> Self {
        DqnRunConfig {
            episodes: 5000,
            environment: DqnEnvironment::Cohort,
            expert_top_n: None,
            agent: AgentConfig::default(),
        }
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            n_patients: 6021,
            seed: 0,
            train_fraction: 0.8,
            cohort: CohortMdpSpec::default(),
            imitation: TrainConfig { epochs: 1000, ..default_train_config() },
            stagewise: StagewiseConfig::default(),
            admissible_top_n: 5,
            accuracy_ns: (1..=10).collect(),
            imitation_tasks: TaskKind::ALL.to_vec(),
            stagewise_tasks: TaskKind::GVHD.to_vec(),
            dqn: DqnRunConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::invalid("config", e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid("config", e.to_string()))
    }

    /// Sets every seed in the configuration to `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.cohort.seed = seed;
        self.imitation.seed = seed;
        self.stagewise.train.seed = seed;
        self.dqn.agent.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 {
            return Err(Error::invalid("n_patients", "must be positive"));
        }
        if self.admissible_top_n == 0 {
            return Err(Error::invalid("admissible_top_n", "must be at least 1"));
        }
        if self.accuracy_ns.is_empty() {
            return Err(Error::invalid("accuracy_ns", "must not be empty"));
        }
        for task in &self.stagewise_tasks {
            if !self.imitation_tasks.contains(task) {
                return Err(Error::invalid(
                    "stagewise_tasks",
                    format!("{task} needs an imitation model for its admissible set"),
                ));
            }
        }
        self.imitation.validate()?;
        self.dqn.agent.validate()?;
        self.stagewise.validate()
    }

    pub fn mdp(&self) -> Result<GroundTruthMdp> {
        GroundTruthMdp::cohort(&self.cohort)
    }
}

pub fn synthesize(config: &PipelineConfig) -> Result<SyntheticCohort> {
    let synth = SynthConfig {
        n_patients: config.n_patients,
        seed: config.seed,
        gamma: config.stagewise.gamma,
        mdp: config.mdp()?,
    };
    generate_cohort(&synth)
}

pub fn split(config: &PipelineConfig, cohort: &[Trajectory]) -> Result<(Vec<Trajectory>, Vec<Trajectory>)> {
    split_cohort(cohort, config.train_fraction, config.seed)
}

/// One imitation model per task, in the order of `tasks`.
pub fn train_imitation_models(
    cohort: &CohortFile,
    train: &[Trajectory],
    tasks: &[TaskKind],
    config: &TrainConfig,
) -> Result<Vec<ImitationModel>> {
    tasks
        .iter()
        .map(|&task| {
            let vocab = cohort
                .vocabularies
                .get(&task)
                .ok_or_else(|| Error::invalid("vocabularies", format!("no vocabulary for {task}")))?;
            let (model, report) = train_imitation(task, vocab, &labeled_states(train, task)?, config)?;
            tracing::info!(%task, loss = report.final_loss, "imitation model trained");
            Ok(model)
        })
        .collect()
}

pub fn imitation_for(models: &[ImitationModel], task: TaskKind) -> Result<&ImitationModel> {
    models.iter().find(|m| m.task == task).ok_or_else(|| Error::ModelUnavailable(format!("imitation model for {task}")))
}

/// Backward-induction fits choosing among each imitation model's top `n`.
pub fn fit_stagewise_models(
    train: &[Trajectory],
    imitation: &[ImitationModel],
    tasks: &[TaskKind],
    top_n: usize,
    config: &StagewiseConfig,
) -> Result<Vec<StagewiseModel>> {
    tasks
        .iter()
        .map(|&task| {
            let model = imitation_for(imitation, task)?;
            let rule = AdmissibleRule::TopN { model, n: top_n };
            let fitted = fit_backward(train, task, model.vocabulary.size(), &rule, config)?;
            tracing::info!(%task, heads = fitted.fit_log.len(), "stagewise model fitted");
            Ok(fitted)
        })
        .collect()
}

pub fn accuracy_reports(
    imitation: &[ImitationModel],
    test: &[Trajectory],
    ns: &[usize],
) -> Result<Vec<Vec<TopNReport>>> {
    imitation
        .iter()
        .map(|m| {
            let k = m.vocabulary.size();
            let ns: Vec<usize> = ns.iter().copied().filter(|n| *n <= k).collect();
            accuracy_curves(m, &labeled_states(test, m.task)?, &ns)
        })
        .collect()
}

pub fn value_reports(
    stagewise: &[StagewiseModel],
    imitation: &[ImitationModel],
    test: &[Trajectory],
    top_n: usize,
) -> Result<Vec<ValueReport>> {
    stagewise
        .iter()
        .map(|m| {
            let rule = AdmissibleRule::TopN { model: imitation_for(imitation, m.task)?, n: top_n };
            comparison_report(m, test, &rule)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub synthetic: SyntheticCohort,
    pub n_train: usize,
    pub n_test: usize,
    pub imitation: Vec<ImitationModel>,
    pub accuracy: Vec<Vec<TopNReport>>,
    pub stagewise: Vec<StagewiseModel>,
    pub values: Vec<ValueReport>,
}

impl PipelineOutput {
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "cohort: {} patients ({} train, {} test)",
            self.synthetic.cohort.trajectories.len(),
            self.n_train,
            self.n_test
        );
        for reports in &self.accuracy {
            out.push_str(&accuracy_summary(reports));
        }
        for r in &self.values {
            out.push_str(&r.summary());
        }
        out
    }
}

pub fn run(config: &PipelineConfig) -> Result<PipelineOutput> {
    config.validate()?;
    let synthetic = synthesize(config)?;
    let (train, test) = split(config, &synthetic.cohort.trajectories)?;
    let imitation = train_imitation_models(&synthetic.cohort, &train, &config.imitation_tasks, &config.imitation)?;
    let accuracy = accuracy_reports(&imitation, &test, &config.accuracy_ns)?;
    let stagewise =
        fit_stagewise_models(&train, &imitation, &config.stagewise_tasks, config.admissible_top_n, &config.stagewise)?;
    let values = value_reports(&stagewise, &imitation, &test, config.admissible_top_n)?;
    Ok(PipelineOutput { synthetic, n_train: train.len(), n_test: test.len(), imitation, accuracy, stagewise, values })
}

#[derive(Debug, Clone)]
pub struct DqnRun {
    pub agent: QAgent,
    pub curve: Vec<CurveRow>,
    /// Mean and largest absolute error against the exact Q over reachable
    /// (stage, state) pairs.
    pub q_error: (f64, f64),
}

/// Online deep Q-learning against the configured simulator.
pub fn run_dqn(config: &PipelineConfig) -> Result<DqnRun> {
    let run = &config.dqn;
    let mdp = match run.environment {
        DqnEnvironment::Cohort => config.mdp()?,
        DqnEnvironment::AcuteBenchmark => GroundTruthMdp::acute_benchmark(config.cohort.seed),
    };
    let oracle = solve_oracle(&mdp, run.agent.gamma)?;
    let mut env = MdpEnvironment::new(&mdp)?;
    if let Some(n) = run.expert_top_n {
        env = env.with_expert_top_n(&oracle, n);
    }
    let mut agent = QAgent::new(FeatureLayout::StateCode.len(), mdp.actions_per_task, run.agent)?;
    let mut rng = run_rng(&run.agent);
    let curve = run_online(&mut agent, &mut env, run.episodes, &mut rng)?;
    let q_error = oracle_q_error(&agent, &mdp, &oracle)?;
    Ok(DqnRun { agent, curve, q_error })
}

/// Writes every artifact of `output` under `dir` and returns the paths
/// written, in order.
pub fn write_outputs(config: &PipelineConfig, output: &PipelineOutput, dir: &Path) -> Result<Vec<PathBuf>> {
    let models = dir.join(MODELS_DIR);
    let reports = dir.join(REPORTS_DIR);
    fs::create_dir_all(&models)?;
    fs::create_dir_all(&reports)?;
    let mut written = Vec::new();
    let mut put = |path: PathBuf, text: String| -> Result<()> {
        fs::write(&path, text)?;
        written.push(path);
        Ok(())
    };
    put(dir.join("config.toml"), config.to_toml()?)?;
    save_cohort(dir.join("cohort.jsonl"), &output.synthetic.cohort)?;
    put(dir.join("oracle_q.tsv"), output.synthetic.oracle.to_tsv())?;
    for m in &output.imitation {
        m.save(&models)?;
    }
    for m in &output.stagewise {
        m.save(&models)?;
        put(reports.join(format!("stagewise_audit_{}.tsv", m.task.slug())), m.audit_tsv())?;
    }
    for (m, r) in output.imitation.iter().zip(&output.accuracy) {
        put(reports.join(format!("accuracy_{}.tsv", m.task.slug())), accuracy_tsv(r))?;
    }
    for r in &output.values {
        put(reports.join(format!("values_{}.tsv", r.task.slug())), r.plot_tsv())?;
    }
    put(reports.join("summary.txt"), output.summary())?;
    Ok(written)
}
