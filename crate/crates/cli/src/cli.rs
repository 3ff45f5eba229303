//! Argument parsing and subcommand dispatch for `dtr`.

use std::fs;
use std::io::Read as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dtr_core::cohort::{load_cohort, save_cohort, CohortFile, Trajectory};
use dtr_core::dqn::curve_tsv;
use dtr_core::eval::{accuracy_summary, accuracy_tsv};
use dtr_core::pipeline::{
    accuracy_reports, fit_stagewise_models, imitation_for, run, run_dqn, split, synthesize, train_imitation_models,
    value_reports, write_outputs, DqnEnvironment, PipelineConfig, REPORTS_DIR,
};
use dtr_core::serve::{handle_recommend, resolve_model_dir, ModelStore, RecommendRequest, MODEL_DIR_ENV};
use dtr_core::synth::outcome_counts;
use dtr_core::{ImitationModel, TaskKind};

#[derive(Debug, Parser)]
#[command(
    name = "dtr",
    version,
    about = "Dynamic treatment regimes: synthetic cohorts, training, evaluation and serving"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Seed for every random choice; overrides the configuration file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML pipeline configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output file or directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum EnvironmentArg {
    Cohort,
    AcuteBenchmark,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort file (`--out` is the JSONL path).
    Synth {
        /// Number of patients.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train one imitation model per task on the training split.
    TrainImitation {
        #[arg(long)]
        cohort: PathBuf,
    },
    /// Online deep Q-learning against the synthetic simulator.
    TrainDqn {
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, value_enum)]
        environment: Option<EnvironmentArg>,
    },
    /// Backward-induction Q fits for the GVHD tasks.
    FitStagewise {
        #[arg(long)]
        cohort: PathBuf,
        /// Directory with the imitation models (defaults to $DTR_MODEL_DIR).
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Accuracy curves and value comparisons on the test split.
    Evaluate {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Answer one recommendation request (JSON file, or `-` for stdin).
    Recommend {
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        request: PathBuf,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
    /// Generate, train and evaluate in one run, writing all artifacts.
    Pipeline,
}

/// A command-line mistake; reported with usage text and exit status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn require_out(common: &Common, what: &str) -> anyhow::Result<PathBuf> {
    common.out.clone().ok_or_else(|| UsageError(format!("--out <{what}> is required")).into())
}

fn model_dir(explicit: &Option<PathBuf>) -> anyhow::Result<PathBuf> {
    resolve_model_dir(explicit.clone(), std::env::var(MODEL_DIR_ENV).ok())
        .ok_or_else(|| UsageError(format!("--models <DIR> is required (or set {MODEL_DIR_ENV})")).into())
}

pub fn load_config(common: &Common) -> anyhow::Result<PipelineConfig> {
    let mut config = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            PipelineConfig::from_toml(&text)?
        }
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        config = config.with_seed(seed);
    }
    config.validate()?;
    Ok(config)
}

fn read_cohort(path: &Path) -> anyhow::Result<CohortFile> {
    let (cohort, n) = load_cohort(path).with_context(|| format!("reading cohort {}", path.display()))?;
    tracing::info!(patients = n, path = %path.display(), "cohort loaded");
    Ok(cohort)
}

fn split_for(config: &PipelineConfig, cohort: &CohortFile) -> anyhow::Result<(Vec<Trajectory>, Vec<Trajectory>)> {
    Ok(split(config, &cohort.trajectories)?)
}

fn imitation_in(store: &ModelStore, tasks: &[TaskKind]) -> anyhow::Result<Vec<ImitationModel>> {
    let models = store.imitation_models();
    for &task in tasks {
        imitation_for(&models, task)?;
    }
    Ok(models)
}

fn write(path: PathBuf, text: String) -> anyhow::Result<()> {
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let common = &cli.common;
    match &cli.command {
        Command::Synth { n } => {
            let out = require_out(common, "FILE")?;
            let mut config = load_config(common)?;
            if let Some(n) = n {
                config.n_patients = *n;
            }
            config.validate()?;
            let synthetic = synthesize(&config)?;
            save_cohort(&out, &synthetic.cohort)?;
            println!("wrote {} patients to {}", synthetic.cohort.trajectories.len(), out.display());
            for (category, count) in outcome_counts(&synthetic.cohort.trajectories) {
                println!("  {category:?}: {count}");
            }
        }
        Command::TrainImitation { cohort } => {
            let out = require_out(common, "DIR")?;
            let config = load_config(common)?;
            let cohort = read_cohort(cohort)?;
            let (train, _) = split_for(&config, &cohort)?;
            let models = train_imitation_models(&cohort, &train, &config.imitation_tasks, &config.imitation)?;
            for m in &models {
                m.save(&out)?;
                println!("saved {} imitation model ({} actions) to {}", m.task, m.vocabulary.size(), out.display());
            }
        }
        Command::TrainDqn { episodes, environment } => {
            let out = require_out(common, "DIR")?;
            let mut config = load_config(common)?;
            if let Some(e) = episodes {
                config.dqn.episodes = *e;
            }
            if let Some(env) = environment {
                config.dqn.environment = match env {
                    EnvironmentArg::Cohort => DqnEnvironment::Cohort,
                    EnvironmentArg::AcuteBenchmark => DqnEnvironment::AcuteBenchmark,
                };
            }
            let result = run_dqn(&config)?;
            fs::create_dir_all(&out)?;
            result.agent.save(out.join("agent.json"))?;
            write(out.join("dqn_curve.tsv"), curve_tsv(&result.curve))?;
            println!(
                "{} training steps; |Q - Q*| mean {:.6}, max {:.6}",
                result.curve.len(),
                result.q_error.0,
                result.q_error.1
            );
        }
        Command::FitStagewise { cohort, models } => {
            let dir = model_dir(models)?;
            let out = common.out.clone().unwrap_or_else(|| dir.clone());
            let config = load_config(common)?;
            let cohort = read_cohort(cohort)?;
            let (train, _) = split_for(&config, &cohort)?;
            let imitation = imitation_in(&ModelStore::load(&dir)?, &config.stagewise_tasks)?;
            let fitted = fit_stagewise_models(
                &train,
                &imitation,
                &config.stagewise_tasks,
                config.admissible_top_n,
                &config.stagewise,
            )?;
            fs::create_dir_all(&out)?;
            for m in &fitted {
                m.save(&out)?;
                write(out.join(format!("stagewise_audit_{}.tsv", m.task.slug())), m.audit_tsv())?;
            }
        }
        Command::Evaluate { cohort, models } => {
            let dir = model_dir(models)?;
            let out = require_out(common, "DIR")?;
            let config = load_config(common)?;
            let cohort = read_cohort(cohort)?;
            let (_, test) = split_for(&config, &cohort)?;
            let store = ModelStore::load(&dir)?;
            let imitation = store.imitation_models();
            let stagewise = store.stagewise_models();
            let accuracy = accuracy_reports(&imitation, &test, &config.accuracy_ns)?;
            let values = value_reports(&stagewise, &imitation, &test, config.admissible_top_n)?;
            fs::create_dir_all(&out)?;
            let mut summary = String::new();
            for (m, r) in imitation.iter().zip(&accuracy) {
                write(out.join(format!("accuracy_{}.tsv", m.task.slug())), accuracy_tsv(r))?;
                summary.push_str(&accuracy_summary(r));
            }
            for r in &values {
                write(out.join(format!("values_{}.tsv", r.task.slug())), r.plot_tsv())?;
                summary.push_str(&r.summary());
            }
            write(out.join("summary.txt"), summary.clone())?;
            print!("{summary}");
        }
        Command::Recommend { models, request } => {
            let store = ModelStore::load(model_dir(models)?)?;
            let text = if request.as_os_str() == "-" {
                let mut s = String::new();
                std::io::stdin().read_to_string(&mut s)?;
                s
            } else {
                fs::read_to_string(request).with_context(|| format!("reading {}", request.display()))?
            };
            let req: RecommendRequest = serde_json::from_str(&text).context("parsing recommendation request")?;
            match handle_recommend(&req, &store) {
                Ok(resp) => println!("{}", serde_json::to_string_pretty(&resp)?),
                Err(e) => {
                    eprintln!("{}", serde_json::to_string(&e)?);
                    bail!("{e}");
                }
            }
        }
        Command::Serve { models, addr } => {
            let dir = model_dir(models)?;
            let store = Arc::new(ModelStore::load(&dir)?);
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::bind(addr).await?;
                tracing::info!(%addr, dir = %dir.display(), "serving");
                println!("listening on http://{}", listener.local_addr()?);
                axum::serve(listener, crate::http::router(store))
                    .with_graceful_shutdown(async {
                        let _ = tokio::signal::ctrl_c().await;
                    })
                    .await?;
                anyhow::Ok(())
            })?;
        }
        Command::Pipeline => {
            let out = require_out(common, "DIR")?;
            let config = load_config(common)?;
            let output = run(&config)?;
            for path in write_outputs(&config, &output, &out)? {
                println!("wrote {}", path.display());
            }
            print!("{}", fs::read_to_string(out.join(REPORTS_DIR).join("summary.txt"))?);
        }
    }
    Ok(())
}
