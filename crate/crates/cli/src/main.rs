//! Command line front end for the tokensplat pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tokensplat::pipeline::{
    apply_overrides, load_config, run_command, Command, CommandArgs, RunConfig,
};

#[derive(Parser)]
#[command(
    name = "tokensplat",
    about = "Invert Gaussian-splat scenes into text-space token embeddings, reconstruct them, and edit them through prompts",
    version
)]
struct Cli {
    /// TOML config file, or a manifest.json from a previous run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory that receives the run directory.
    #[arg(long, global = true, default_value = "runs")]
    out_dir: PathBuf,

    /// Explicit run id (defaults to a deterministic config digest).
    #[arg(long, global = true)]
    run_id: Option<String>,

    /// Dotted-path config override, repeatable: --override inversion.steps=100
    #[arg(long = "override", global = true)]
    overrides: Vec<String>,

    /// Render/eval resolution override (shorthand for camera.resolution).
    #[arg(long, global = true)]
    resolution: Option<usize>,

    /// Edit intensity override (shorthand for edit.lambda).
    #[arg(long, global = true)]
    lambda: Option<f64>,

    /// Attention amplification override (shorthand for edit.attention_factor).
    #[arg(long, global = true)]
    attention_factor: Option<f64>,

    /// Inversion objective override (shorthand for inversion.loss_mode).
    #[arg(long, global = true)]
    loss_mode: Option<String>,

    #[command(subcommand)]
    command: CliCommand,
}

#[derive(Subcommand)]
enum CliCommand {
    /// Generate the synthetic corpus: scene files plus reference renders.
    GenData,
    /// Train the learned image/latent autoencoder.
    TrainCodec,
    /// Train the toy camera- and text-conditioned denoiser.
    TrainDenoiser,
    /// Invert the target scene into a pseudo-token embedding.
    Invert {
        #[arg(long)]
        denoiser: PathBuf,
        #[arg(long)]
        codec: Option<PathBuf>,
    },
    /// Score-distillation reconstruction from an embedding.
    Reconstruct {
        #[arg(long)]
        denoiser: PathBuf,
        #[arg(long)]
        embedding: PathBuf,
        #[arg(long)]
        codec: Option<PathBuf>,
    },
    /// Apply a text edit and generate personalized views.
    Edit {
        #[arg(long)]
        denoiser: PathBuf,
        #[arg(long)]
        embedding: PathBuf,
        #[arg(long)]
        codec: Option<PathBuf>,
    },
    /// Sweep pseudo-token sizes with shared seeds.
    Ablate {
        #[arg(long)]
        denoiser: PathBuf,
        #[arg(long)]
        codec: Option<PathBuf>,
    },
    /// Score a finished run directory into metrics.json.
    Eval {
        /// The run directory to evaluate.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        denoiser: Option<PathBuf>,
        #[arg(long)]
        codec: Option<PathBuf>,
    },
}

fn resolve_config(cli: &Cli) -> tokensplat::Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    let mut overrides = Vec::new();
    if let Some(seed) = cli.seed {
        overrides.push(format!("run.seed={seed}"));
    }
    if let Some(res) = cli.resolution {
        overrides.push(format!("camera.resolution={res}"));
    }
    if let Some(lambda) = cli.lambda {
        overrides.push(format!("edit.lambda={lambda}"));
    }
    if let Some(factor) = cli.attention_factor {
        overrides.push(format!("edit.attention_factor={factor}"));
    }
    if let Some(mode) = &cli.loss_mode {
        overrides.push(format!("inversion.loss_mode=\"{mode}\""));
    }
    overrides.extend(cli.overrides.iter().cloned());
    config = apply_overrides(&config, &overrides)?;
    Ok(config)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match resolve_config(&cli) {
        Ok(c) => c,
        Err(err) => {
            eprintln!("{}", error_record(&err));
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    let mut args = CommandArgs {
        out_dir: cli.out_dir.clone(),
        run_id: cli.run_id.clone(),
        ..CommandArgs::default()
    };
    let command = match &cli.command {
        CliCommand::GenData => Command::GenData,
        CliCommand::TrainCodec => Command::TrainCodec,
        CliCommand::TrainDenoiser => Command::TrainDenoiser,
        CliCommand::Invert { denoiser, codec } => {
            args.denoiser = Some(denoiser.clone());
            args.codec = codec.clone();
            Command::Invert
        }
        CliCommand::Reconstruct {
            denoiser,
            embedding,
            codec,
        } => {
            args.denoiser = Some(denoiser.clone());
            args.embedding = Some(embedding.clone());
            args.codec = codec.clone();
            Command::Reconstruct
        }
        CliCommand::Edit {
            denoiser,
            embedding,
            codec,
        } => {
            args.denoiser = Some(denoiser.clone());
            args.embedding = Some(embedding.clone());
            args.codec = codec.clone();
            Command::Edit
        }
        CliCommand::Ablate { denoiser, codec } => {
            args.denoiser = Some(denoiser.clone());
            args.codec = codec.clone();
            Command::Ablate
        }
        CliCommand::Eval {
            run,
            denoiser,
            codec,
        } => {
            args.eval_run = Some(run.clone());
            args.denoiser = denoiser.clone();
            args.codec = codec.clone();
            Command::Eval
        }
    };
    match run_command(command, &config, &args) {
        Ok(outcome) => {
            println!(
                "run {} finished: {}",
                outcome.manifest.run_id,
                outcome.root.display()
            );
            for (rel, digest) in &outcome.manifest.artifacts {
                println!("  {rel}  sha256:{}", &digest[..16]);
            }
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("{}", error_record(&err));
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn error_record(err: &tokensplat::Error) -> String {
    serde_json::json!({
        "error": err.to_string(),
        "exit_code": err.exit_code(),
    })
    .to_string()
}
