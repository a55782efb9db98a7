use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use modit_cli::ablation::run_ablation;
use modit_cli::commands::{
    cmd_eval, cmd_gen_data, cmd_sample, cmd_train, cmd_train_blink, load_config, read_dataset, Precision,
    SampleRequest, TrainRequest,
};
use modit_cli::config::RunConfig;
use modit_cli::error::{CliError, CliResult};
use modit_cli::gradcheck::{run_gradcheck, FIXTURE_SEED};

#[derive(Parser)]
#[command(name = "modit", version, about = "Diffusion transformer over expression-coefficient sequences")]
struct Cli {
    /// Run configuration (`key = value` lines).
    #[arg(long, global = true, visible_alias = "spec")]
    config: Option<PathBuf>,
    /// Replaces every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "f32")]
    precision: Precision,
    /// Main output file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic audio/expression corpus.
    GenData,
    /// Train the denoiser; writes a checkpoint and a metrics log.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Continue from this checkpoint up to `train.steps` total steps.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Metrics log path (default `<out>.metrics.tsv`).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Generate expression sequences for every audio track of a dataset.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset whose pair i supplies the source frame.
        #[arg(long)]
        beta0: PathBuf,
        /// Dataset whose pair i supplies the audio track.
        #[arg(long)]
        audio: PathBuf,
    },
    /// Compare generated sequences with references.
    Eval {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Blink checkpoint; adds the eye-distance curve.
        #[arg(long)]
        blink: Option<PathBuf>,
    },
    /// Finite-difference check of every backward pass (64-bit).
    Gradcheck {
        #[arg(long, hide = true)]
        corrupt_block: Option<String>,
    },
    /// Train and score every variant over every seed.
    Ablate {
        /// Corpus to use instead of generating one from `data.*`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the blink/pose head and store it with a constructed face basis.
    TrainBlink {
        #[arg(long)]
        data: PathBuf,
    },
}

fn require_out(out: &Option<PathBuf>) -> CliResult<&Path> {
    out.as_deref().ok_or_else(|| CliError::Usage("--out is required for this command".into()))
}

fn config(cli: &Cli) -> CliResult<RunConfig> {
    match &cli.config {
        Some(path) => load_config(Some(path), cli.seed),
        None => Err(CliError::Usage("--config is required".into())),
    }
}

fn write_report(out: &Option<PathBuf>, text: &str) -> CliResult<()> {
    if let Some(path) = out {
        modit_cli::checkpoint::write_atomic(path, text.as_bytes()).map_err(|source| CliError::Write {
            path: path.clone(),
            source,
        })?;
    }
    Ok(())
}

fn run(cli: &Cli) -> CliResult<()> {
    let cfg = config(cli)?;
    match &cli.command {
        Command::GenData => {
            let out = require_out(&cli.out)?;
            let ds = cmd_gen_data(&cfg, out)?;
            println!("wrote {} pairs of {} frames to {}", ds.pairs.len(), ds.frames, out.display());
        }
        Command::Train { data, resume, log } => {
            let req = TrainRequest {
                data,
                out: require_out(&cli.out)?,
                resume: resume.as_deref(),
                log: log.as_deref(),
            };
            println!("{}", cmd_train(&cfg, cli.precision, &req)?);
        }
        Command::Sample { checkpoint, beta0, audio } => {
            let req = SampleRequest {
                checkpoint,
                beta0_source: beta0,
                audio_source: audio,
                out: require_out(&cli.out)?,
            };
            println!("{}", cmd_sample(&cfg, &req)?);
        }
        Command::Eval { generated, reference, blink } => {
            let report = cmd_eval(generated, reference, blink.as_deref())?.to_string();
            print!("{report}");
            write_report(&cli.out, &report)?;
        }
        Command::Gradcheck { corrupt_block } => {
            let summary = run_gradcheck(FIXTURE_SEED, corrupt_block.as_deref())?;
            let report = summary.to_string();
            println!("{report}");
            write_report(&cli.out, &report)?;
            if !summary.passes() {
                let names: Vec<&str> = summary.failures().iter().map(|b| b.name.as_str()).collect();
                return Err(CliError::GradCheck(names.join(", ")));
            }
        }
        Command::Ablate { data } => {
            let ds = match data {
                Some(path) => read_dataset(path)?,
                None => modit_core::synth::gen_corpus(&cfg.synth())?,
            };
            let report = run_ablation(&cfg, &ds)?.to_string();
            print!("{report}");
            write_report(&cli.out, &report)?;
        }
        Command::TrainBlink { data } => {
            print!("{}", cmd_train_blink(&cfg, data, require_out(&cli.out)?)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("MODIT_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // only fails if a pool already exists
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
