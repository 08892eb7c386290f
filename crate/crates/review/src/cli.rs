//! Command line: one verb per pipeline stage, plus `serve`.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use hapi_core::glm::ThresholdRule;
use hapi_core::pipeline::{
    CohortOptions, EvalIdOptions, FairnessOptions, FeatureOptions, PipelineError, Stage,
    StageReport, StageStatus, TrainIdOptions, Workspace,
};
use hapi_core::synth::GeneratorConfig;

use crate::service::{Panel, ReviewService, ServiceConfig, ServiceError};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error("server: {0}")]
    Server(#[from] std::io::Error),
}

#[derive(Debug, Parser)]
#[command(
    name = "hapi",
    version,
    about = "Pregnancy identification and complication triage over claims"
)]
pub struct Cli {
    /// Data directory holding every artifact and manifest.
    #[arg(long, global = true, default_value = "data")]
    pub data: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Force {
    /// Rerun even when the manifest says the outputs are current.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthetic claims.
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Cohorts and splits.
    #[command(subcommand)]
    Cohort(CohortCommand),
    /// Feature matrices.
    #[command(subcommand)]
    Features(FeaturesCommand),
    #[command(subcommand)]
    Train(TrainCommand),
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Every stage in order.
    All {
        #[arg(long, default_value_t = 2000)]
        patients: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[command(flatten)]
        force: Force,
    },
    /// Serve the review API.
    Serve {
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, value_enum, default_value_t = PanelArg::Test)]
        panel: PanelArg,
        /// Initial clock week; the earliest corpus week when absent.
        #[arg(long)]
        start_week: Option<i64>,
    },
}

#[derive(Debug, Subcommand)]
pub enum SynthCommand {
    Generate {
        #[arg(long, default_value_t = 2000)]
        patients: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[command(flatten)]
        force: Force,
    },
}

#[derive(Debug, Subcommand)]
pub enum CohortCommand {
    Build {
        /// Split seed; the synth seed when absent.
        #[arg(long)]
        seed: Option<u64>,
        /// Code-role TOML replacing the built-in roles.
        #[arg(long)]
        roles: Option<PathBuf>,
        #[command(flatten)]
        force: Force,
    },
}

#[derive(Debug, Subcommand)]
pub enum FeaturesCommand {
    Extract {
        /// Sampling seed; the synth seed when absent.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        force: Force,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RuleArg {
    GmeanSensSpec,
    GmeanF1,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PanelArg {
    Test,
    All,
}

#[derive(Debug, Subcommand)]
pub enum TrainCommand {
    /// Pregnancy identification model and threshold.
    Id {
        #[arg(long, value_enum, default_value_t = RuleArg::GmeanSensSpec)]
        threshold_rule: RuleArg,
        #[command(flatten)]
        force: Force,
    },
    /// Complication risk models.
    Risk {
        #[command(flatten)]
        force: Force,
    },
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    Id {
        /// Comma separated thresholds for the false-positive sweep.
        #[arg(long, value_delimiter = ',')]
        taus: Option<Vec<f64>>,
        #[command(flatten)]
        force: Force,
    },
    Risk {
        #[command(flatten)]
        force: Force,
    },
    Fairness {
        #[arg(long, default_value_t = FairnessOptions::default().min_group_size)]
        min_group_size: usize,
        #[command(flatten)]
        force: Force,
    },
}

fn print(report: &StageReport) {
    let status = match report.status {
        StageStatus::Ran => "ran",
        StageStatus::UpToDate => "up_to_date",
    };
    let outputs: Vec<&str> = report
        .manifest
        .outputs
        .iter()
        .map(|o| o.path.as_str())
        .collect();
    println!(
        "{}",
        json!({
            "stage": report.manifest.stage.as_str(),
            "status": status,
            "config_hash": report.manifest.config_hash,
            "outputs": outputs,
        })
    );
}

fn synth_seed(ws: &Workspace, stage: Stage, explicit: Option<u64>) -> Result<u64, PipelineError> {
    if let Some(s) = explicit {
        return Ok(s);
    }
    ws.manifest(Stage::Synth)
        .and_then(|m| m.seed)
        .ok_or_else(|| PipelineError::MissingArtifact {
            stage: stage.as_str(),
            path: ws.manifest_path(Stage::Synth).display().to_string(),
            producer: Stage::Synth.command(),
        })
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let ws = Workspace::new(&cli.data);
    match cli.command {
        Command::Synth(SynthCommand::Generate {
            patients,
            seed,
            force,
        }) => {
            print(&ws.synth(&GeneratorConfig::with_total(patients, seed), force.force)?);
        }
        Command::Cohort(CohortCommand::Build { seed, roles, force }) => {
            let seed = synth_seed(&ws, Stage::Cohort, seed)?;
            print(&ws.cohort(&CohortOptions { seed, roles }, force.force)?);
        }
        Command::Features(FeaturesCommand::Extract { seed, force }) => {
            let seed = synth_seed(&ws, Stage::Features, seed)?;
            print(&ws.features(&FeatureOptions::new(seed), force.force)?);
        }
        Command::Train(TrainCommand::Id {
            threshold_rule,
            force,
        }) => {
            let options = TrainIdOptions {
                threshold_rule: match threshold_rule {
                    RuleArg::GmeanSensSpec => ThresholdRule::GmeanSensSpec,
                    RuleArg::GmeanF1 => ThresholdRule::GmeanF1,
                },
                ..TrainIdOptions::default()
            };
            print(&ws.train_id(&options, force.force)?);
        }
        Command::Train(TrainCommand::Risk { force }) => print(&ws.train_risk(force.force)?),
        Command::Eval(EvalCommand::Id { taus, force }) => {
            let options = EvalIdOptions {
                taus,
                ..EvalIdOptions::default()
            };
            print(&ws.eval_id(&options, force.force)?);
        }
        Command::Eval(EvalCommand::Risk { force }) => print(&ws.eval_risk(force.force)?),
        Command::Eval(EvalCommand::Fairness {
            min_group_size,
            force,
        }) => {
            print(&ws.eval_fairness(&FairnessOptions { min_group_size }, force.force)?);
        }
        Command::All {
            patients,
            seed,
            force,
        } => {
            for r in ws.run_all(&GeneratorConfig::with_total(patients, seed), force.force)? {
                print(&r);
            }
        }
        Command::Serve {
            host,
            port,
            panel,
            start_week,
        } => {
            let config = ServiceConfig {
                panel: match panel {
                    PanelArg::Test => Panel::Test,
                    PanelArg::All => Panel::All,
                },
                start_week,
                ..ServiceConfig::new(&cli.data)
            };
            let service = Arc::new(ReviewService::open(&config)?);
            let addr: SocketAddr = format!("{host}:{port}").parse().map_err(|e| {
                std::io::Error::new(
                    std::io::ErrorKind::InvalidInput,
                    format!("{host}:{port}: {e}"),
                )
            })?;
            serve(service, addr)?;
        }
    }
    Ok(())
}

fn serve(service: Arc<ReviewService>, addr: SocketAddr) -> std::io::Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        eprintln!(
            "listening on http://{}{}",
            listener.local_addr()?,
            crate::api::PREFIX
        );
        axum::serve(listener, crate::api::router(service))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    })
}
