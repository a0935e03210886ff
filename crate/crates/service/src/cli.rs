//! The `forgedit` command tree.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use forgedit::captioner::CaptionerConfig;
use forgedit::edit::GammaGrid;
use forgedit::forgetting::ForgettingStrategy;
use forgedit::pipeline::{run_case, Case, EditMode, Manifest, NextAction, Outcome, Pipeline, SweepRequest, SweepResult};
use forgedit::store::ArtifactKind;
use forgedit::types::{EditIntention, ImageTensor, Verdict, VerdictKind};

use crate::api::{router, AppState};
use crate::config;

#[derive(Debug, Parser)]
#[command(name = "forgedit", version, about = "Single-image finetuning editor: sessions, sweeps and verdicts")]
pub struct Cli {
    /// Artifact store directory [env: FORGEDIT_STORE_DIR, default ./forgedit-store]
    #[arg(long, global = true)]
    pub store: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create a session: caption (unless --source), finetune, run the default sweep.
    Create {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        target: String,
        #[arg(long)]
        source: Option<String>,
    },
    /// Run a sweep; unset options follow the session's recommendation.
    Sweep {
        #[arg(long)]
        session: String,
        /// none, encoderattn, decoderattn or custom:<rule-file.json>
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        mode: Option<String>,
        /// Comma-separated γ (or β) values.
        #[arg(long)]
        gammas: Option<String>,
        /// Projection weight on the optimized embedding.
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Judge the latest sweep.
    Verdict {
        #[arg(long)]
        session: String,
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long, value_enum)]
        intention: Option<IntentionArg>,
        /// Index of the chosen image (Success only).
        #[arg(long)]
        chosen: Option<usize>,
    },
    /// Print the session document.
    Show {
        #[arg(long)]
        session: String,
    },
    /// Serve the HTTP API and the cockpit.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
    /// Replay a scripted case and print its artifact manifest.
    RunCase {
        #[arg(long)]
        case: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
#[value(rename_all = "PascalCase")]
pub enum KindArg {
    Success,
    Overfit,
    Underfit,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
#[value(rename_all = "PascalCase")]
pub enum IntentionArg {
    Structure,
    Appearance,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let store = config::store_dir(cli.store);
    match cli.command {
        Command::Create { image, target, source } => {
            let pipeline = config::build_pipeline(store, CaptionerConfig::default().with_env_override())?;
            let bytes = std::fs::read(&image).with_context(|| format!("reading {}", image.display()))?;
            let image = ImageTensor::from_png(&bytes)?;
            let session = pipeline.create_session(&image, &target, source.as_deref(), |p| {
                tracing::debug!(step = p.step, loss = p.loss, "finetune");
            })?;
            println!("session {}", session.id);
            println!("source prompt: {} ({:?})", session.source_prompt, session.source_prompt.origin());
            let sweep = pipeline.run_sweep(&session.id, &NextAction::initial(), None, |_, _| {})?;
            print_sweep(&pipeline, &sweep);
        }
        Command::Sweep { session, strategy, mode, gammas, alpha } => {
            let pipeline = config::build_pipeline(store, CaptionerConfig::default())?;
            let request = SweepRequest {
                mode: mode.as_deref().map(str::parse::<EditMode>).transpose()?,
                strategy: strategy.as_deref().map(ForgettingStrategy::parse_cli).transpose()?,
                grid: gammas.as_deref().map(parse_grid).transpose()?,
                alpha,
            };
            let current = pipeline.load_session(&session)?;
            let action = request.resolve(current.state.last_recommendation.as_ref());
            let sweep = pipeline.run_sweep(&session, &action, None, |_, _| {})?;
            print_sweep(&pipeline, &sweep);
        }
        Command::Verdict { session, kind, intention, chosen } => {
            let pipeline = config::build_pipeline(store, CaptionerConfig::default())?;
            let verdict = Verdict {
                kind: match kind {
                    KindArg::Success => VerdictKind::Success,
                    KindArg::Overfit => VerdictKind::Overfit,
                    KindArg::Underfit => VerdictKind::Underfit,
                },
                chosen_image: chosen,
                intention: intention.map(|i| match i {
                    IntentionArg::Structure => EditIntention::Structure,
                    IntentionArg::Appearance => EditIntention::Appearance,
                }),
            };
            match pipeline.record_verdict(&session, &verdict)? {
                Outcome::Done { chosen_image } => {
                    let s = pipeline.load_session(&session)?;
                    println!("done: image {chosen_image}");
                    if let Some(id) = s.final_image {
                        println!("{}", pipeline.store().artifact_path(ArtifactKind::Image, &id).display());
                    }
                }
                Outcome::Next(action) => println!("{}", serde_json::to_string_pretty(&action)?),
            }
        }
        Command::Show { session } => {
            let store = forgedit::store::ArtifactStore::open(store)?;
            println!("{}", serde_json::to_string_pretty(&store.load_session(&session)?)?);
        }
        Command::Serve { port, host } => serve(store, &host, port)?,
        Command::RunCase { case } => {
            let manifest = run_case_file(&case, store)?;
            println!("{}", serde_json::to_string_pretty(&manifest)?);
        }
    }
    Ok(())
}

/// Runs a case file against a pipeline with the case's stub captioner.
pub fn run_case_file(path: &Path, store: PathBuf) -> anyhow::Result<Manifest> {
    let case = Case::load(path)?;
    let pipeline = config::build_pipeline(store, CaptionerConfig::stub(case.captions.clone()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let session = run_case(&pipeline, &case, base)?;
    Ok(Manifest::from_session(&session))
}

fn parse_grid(csv: &str) -> forgedit::Result<GammaGrid> {
    let values = csv
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| forgedit::Error::Contract(format!("bad --gammas {csv:?}: {e}")))?;
    GammaGrid::new(values)
}

fn print_sweep(pipeline: &Pipeline, sweep: &SweepResult) {
    println!("sweep {} ({:?}, {})", sweep.id, sweep.mode, sweep.strategy);
    for (value, image) in sweep.grid.iter().zip(&sweep.images) {
        match image {
            Some(id) => println!("{value:.4}\t{}", pipeline.store().artifact_path(ArtifactKind::Image, id).display()),
            None => println!("{value:.4}\tfailed"),
        }
    }
}

#[tokio::main]
async fn serve(store: PathBuf, host: &str, port: u16) -> anyhow::Result<()> {
    let pipeline = config::build_pipeline(store, CaptionerConfig::default().with_env_override())?;
    let app = router(AppState::new(pipeline)?, Some(config::webui_dir()));
    let addr: SocketAddr = format!("{host}:{port}").parse()?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "serving");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
