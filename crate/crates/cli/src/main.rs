use clap::{Args, Parser, Subcommand};
use scorevae::harness::commands::Outcome;
use scorevae::harness::{Component, ExperimentConfig, MethodKind, Workspace};
use scorevae::Result;
use std::path::PathBuf;
use std::process::ExitCode;

/// Train and evaluate diffusion-prior autoencoders and their baselines.
#[derive(Parser, Debug)]
#[command(name = "scorevae", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Directory for checkpoints and emitted files.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Encode with the posterior mean instead of a sample.
    #[arg(long, global = true)]
    mean_latent: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Unconditional score model.
    TrainPrior,
    /// Time-dependent encoder against the frozen prior.
    TrainEncoder,
    /// Residual corrector against the frozen prior and encoder.
    TrainCorrector,
    /// β-VAE baseline.
    TrainVae,
    /// Conditional diffusion decoder baseline, at the configured β and at β = 0.
    TrainDiffdecoder,
    /// Reconstruct the test split with one method.
    Reconstruct {
        #[arg(long, default_value = "scorevae")]
        method: String,
    },
    /// Draw samples from the prior.
    Sample,
    /// L2 reconstruction table over every trained method.
    Eval,
    /// Verify the score identities on random linear-Gaussian worlds.
    OracleCheck {
        #[arg(long, default_value_t = 1000)]
        worlds: usize,
    },
}

fn run(cli: Cli) -> Result<Outcome> {
    let mut cfg = match &cli.common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.common.seed {
        cfg.seed = seed;
    }
    cfg.eval.mean_latent |= cli.common.mean_latent;
    let ws = Workspace::open(cfg, &cli.common.out)?;
    match cli.command {
        Command::TrainPrior => ws.train(Component::Prior),
        Command::TrainEncoder => ws.train(Component::Encoder),
        Command::TrainCorrector => ws.train(Component::Corrector),
        Command::TrainVae => ws.train(Component::Vae),
        Command::TrainDiffdecoder => ws.train(Component::DiffDecoder),
        Command::Reconstruct { method } => ws.reconstruct(method.parse::<MethodKind>()?),
        Command::Sample => ws.sample(),
        Command::Eval => ws.eval(),
        Command::OracleCheck { worlds } => ws.oracle_check(worlds),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(out) => {
            print!("{}", out.summary);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
