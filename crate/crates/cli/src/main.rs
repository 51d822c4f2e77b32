use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use transfuser_cli::evaluate::PolicySource;
use transfuser_cli::train::TrainOptions;
use transfuser_cli::{ablate, attn, data, evaluate, train, CliError, RunConfig};
use transfuser_core::model::Profile;

#[derive(Parser, Debug)]
#[command(name = "transfuser", version, about = "Camera + LiDAR fusion driving: data, training, evaluation")]
struct Cli {
    /// JSON run configuration; unspecified fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed, overriding `seeds.base`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true, value_parser = parse_profile)]
    profile: Option<Profile>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Roll out the expert and record a dataset.
    GenData {
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Behavior cloning on a dataset; the checkpoint goes to --out.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Training run index (seed = base + run).
        #[arg(long, default_value_t = 0)]
        run: usize,
        /// Train on the first N frames and report their waypoint error.
        #[arg(long)]
        overfit: Option<usize>,
        /// Continue from the checkpoint in --out.
        #[arg(long)]
        resume: bool,
        /// Override `train.steps`.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Closed-loop evaluation over the route set and evaluation seeds.
    Eval {
        /// Checkpoint directory; repeat for several training runs.
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        /// Evaluate the privileged expert instead of a checkpoint.
        #[arg(long, conflicts_with = "checkpoints")]
        expert: bool,
    },
    /// Train and evaluate the fusion ablation grid.
    Ablate {
        #[arg(long)]
        data: PathBuf,
    },
    /// Cross-modal attention statistics of a trained fusion model.
    AttnStats {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Override `attention.frames`.
        #[arg(long)]
        frames: Option<usize>,
    },
}

fn parse_profile(s: &str) -> Result<Profile, String> {
    s.parse().map_err(|e: transfuser_core::model::ModelError| e.to_string())
}

fn run(cli: Cli) -> Result<bool, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seeds.base = s;
    }
    if let Some(p) = cli.profile {
        cfg.profile = p;
    }
    cfg.validate()?;
    let out = &cli.out;
    match cli.command {
        Command::GenData { force } => println!("{}", data::gen_data(&cfg, out, force)?),
        Command::Train {
            data,
            run,
            overfit,
            resume,
            steps,
        } => {
            let opts = TrainOptions {
                run,
                overfit,
                resume,
                steps,
                ..TrainOptions::default()
            };
            println!("{}", train::train(&cfg, &data, out, &opts)?);
        }
        Command::Eval { checkpoints, expert } => {
            let source = if expert {
                PolicySource::Expert
            } else {
                PolicySource::Checkpoints(checkpoints)
            };
            println!("{}", evaluate::eval(&cfg, &source, out)?);
        }
        Command::Ablate { data } => {
            let report = ablate::ablate(&cfg, &data, out)?;
            println!("{report}");
            if report.partial() {
                eprintln!("ablation budget exhausted; skipped rows are flagged");
                return Ok(false);
            }
        }
        Command::AttnStats { checkpoint, data, frames } => {
            if let Some(n) = frames {
                cfg.attention.frames = n;
            }
            println!("{}", attn::attn_stats(&cfg, &checkpoint, &data, out)?);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
