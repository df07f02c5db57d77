//! `blenddiff`: command-line client for the blendshape diffusion service.
//! Each subcommand either talks to a running service (`--server URL`) or
//! spins up an in-process one on an ephemeral port, so single commands
//! work with no daemon running. Exit codes: 0 success, 1 runtime failure,
//! 2 usage/config error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use blenddiff_client::{Client, ClientError, EvalArgs, GenerateArgs, RefineArgs, RunConfig, Snapshot};

const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "blenddiff", version, about = "Audio-driven emotional blendshape generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration JSON.
    #[arg(long)]
    config: PathBuf,
    /// Use a running service instead of an in-process one.
    #[arg(long)]
    server: Option<String>,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP service in the foreground.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8490")]
        addr: String,
    },
    /// Generate the synthetic oracle dataset.
    OracleGen {
        #[command(flatten)]
        common: Common,
    },
    /// Train the sequence-diffusion model.
    TrainDiffusion {
        #[command(flatten)]
        common: Common,
    },
    /// Train the lip refinement model.
    TrainLip {
        #[command(flatten)]
        common: Common,
    },
    /// Sample a sequence from audio, a style clip, and a checkpoint.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Audio input: .wav (16-bit PCM mono) or a precomputed feature
        /// matrix (.fmat/.csv).
        #[arg(long)]
        audio: PathBuf,
        /// Style clip id from the dataset manifest.
        #[arg(long)]
        style: String,
        /// Denoiser checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "generated")]
        output_name: String,
    },
    /// Regenerate the mouth channels of a sequence.
    Refine {
        #[command(flatten)]
        common: Common,
        /// Sequence CSV to refine.
        #[arg(long)]
        sequence: PathBuf,
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        style: String,
        /// Lip-model checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sidecar of the input sequence (reuses its per-chunk styles).
        #[arg(long)]
        sidecar: Option<PathBuf>,
        #[arg(long, default_value = "refined")]
        output_name: String,
    },
    /// Compare a predicted sequence against a reference.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Sidecar of the prediction (enables the continuity metric).
        #[arg(long)]
        pred_sidecar: Option<PathBuf>,
        #[arg(long, default_value = "eval_report")]
        output_name: String,
        /// Also write the per-boundary jump curve CSV.
        #[arg(long)]
        jump_curve: bool,
    },
    /// Re-execute a resolved-config snapshot.
    Rerun {
        /// Snapshot JSON written by a previous command.
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        server: Option<String>,
    },
}

fn absolutize(path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        std::env::current_dir()
            .map(|cwd| cwd.join(path))
            .unwrap_or_else(|_| path.to_path_buf())
    }
}

fn load_config(common: &Common) -> Result<RunConfig, (u8, String)> {
    let mut cfg = RunConfig::load(&common.config)
        .map_err(|e| (EXIT_USAGE, e.to_string()))?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Connect to `--server` or start an in-process service on an ephemeral
/// port; the CLI is always a client of the HTTP surface.
async fn connect(server: &Option<String>) -> Result<Client, (u8, String)> {
    match server {
        Some(url) => Ok(Client::new(url.clone())),
        None => {
            let (url, _handle) = blenddiff_service::spawn_ephemeral()
                .await
                .map_err(|e| (EXIT_RUNTIME, format!("failed to start service: {e}")))?;
            Ok(Client::new(url))
        }
    }
}

fn client_exit(err: ClientError) -> (u8, String) {
    let code = if err.is_usage() { EXIT_USAGE } else { EXIT_RUNTIME };
    (code, err.to_string())
}

fn print_outcome<T: serde::Serialize>(outcome: &T) {
    match serde_json::to_string_pretty(outcome) {
        Ok(text) => println!("{text}"),
        Err(e) => eprintln!("failed to render outcome: {e}"),
    }
}

async fn run() -> Result<(), (u8, String)> {
    let cli = Cli::parse();
    match cli.command {
        Command::Serve { addr } => blenddiff_service::serve(&addr)
            .await
            .map_err(|e| (EXIT_RUNTIME, e.to_string())),
        Command::OracleGen { common } => {
            let cfg = load_config(&common)?;
            let client = connect(&common.server).await?;
            let outcome = client.oracle_gen(cfg).await.map_err(client_exit)?;
            print_outcome(&outcome);
            Ok(())
        }
        Command::TrainDiffusion { common } => {
            let cfg = load_config(&common)?;
            let client = connect(&common.server).await?;
            let outcome = client.train_diffusion(cfg).await.map_err(client_exit)?;
            print_outcome(&outcome);
            Ok(())
        }
        Command::TrainLip { common } => {
            let cfg = load_config(&common)?;
            let client = connect(&common.server).await?;
            let outcome = client.train_lip(cfg).await.map_err(client_exit)?;
            print_outcome(&outcome);
            Ok(())
        }
        Command::Generate {
            common,
            audio,
            style,
            checkpoint,
            output_name,
        } => {
            let cfg = load_config(&common)?;
            let client = connect(&common.server).await?;
            let args = GenerateArgs {
                audio: absolutize(&audio),
                style_clip: style,
                checkpoint: absolutize(&checkpoint),
                output_name,
            };
            let outcome = client.generate(cfg, args).await.map_err(client_exit)?;
            print_outcome(&outcome);
            Ok(())
        }
        Command::Refine {
            common,
            sequence,
            audio,
            style,
            checkpoint,
            sidecar,
            output_name,
        } => {
            let cfg = load_config(&common)?;
            let client = connect(&common.server).await?;
            let args = RefineArgs {
                sequence: absolutize(&sequence),
                audio: absolutize(&audio),
                style_clip: style,
                checkpoint: absolutize(&checkpoint),
                sidecar: sidecar.as_deref().map(absolutize),
                output_name,
            };
            let outcome = client.refine(cfg, args).await.map_err(client_exit)?;
            print_outcome(&outcome);
            Ok(())
        }
        Command::Eval {
            common,
            pred,
            truth,
            pred_sidecar,
            output_name,
            jump_curve,
        } => {
            let cfg = load_config(&common)?;
            let client = connect(&common.server).await?;
            let args = EvalArgs {
                pred: absolutize(&pred),
                truth: absolutize(&truth),
                pred_sidecar: pred_sidecar.as_deref().map(absolutize),
                output_name,
                jump_curve,
            };
            let outcome = client.eval(cfg, args).await.map_err(client_exit)?;
            print_outcome(&outcome);
            Ok(())
        }
        Command::Rerun { snapshot, server } => {
            let snap = Snapshot::load(&absolutize(&snapshot))
                .map_err(|e| (EXIT_USAGE, e.to_string()))?;
            let client = connect(&server).await?;
            let outcome = client.rerun(snap).await.map_err(client_exit)?;
            print_outcome(&outcome);
            Ok(())
        }
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match run().await {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, message)) => {
            eprintln!("error: {message}");
            ExitCode::from(code)
        }
    }
}
