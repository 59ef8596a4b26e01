mod artifacts;
mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use config::{Config, ConfigError};

#[derive(Parser)]
#[command(name = "fnbridge", version, about = "Bridge matching and posterior sampling in function space")]
struct Cli {
    /// Overrides `train.seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads for the parallel kernels (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    Basis {
        #[command(subcommand)]
        cmd: BasisCmd,
    },
    Bridge {
        #[command(subcommand)]
        cmd: BridgeCmd,
    },
    /// Bridge matching between two function distributions.
    Bm {
        #[command(subcommand)]
        cmd: BmCmd,
    },
    /// Posterior sampling for GP regression tasks.
    Bayes {
        #[command(subcommand)]
        cmd: BayesCmd,
    },
    Eval {
        #[command(subcommand)]
        cmd: EvalCmd,
    },
    /// Run the built-in numerical checks.
    Selftest,
}

#[derive(Subcommand)]
enum BasisCmd {
    /// Build the eigen-system and write eigs.json.
    Build {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Subcommand)]
enum BridgeCmd {
    /// Sample exact bridge paths between the configured endpoints.
    Sample {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Subcommand)]
enum BmCmd {
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    Sample {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to checkpoint.json in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        /// Output resolution, one value per axis or one for all axes.
        #[arg(long, value_delimiter = ',')]
        res: Vec<usize>,
    },
}

#[derive(Subcommand)]
enum BayesCmd {
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    Sample {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
    },
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Power of the permutation MMD test between generated and reference fields.
    Mmd {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
    },
    /// Posterior draws against the closed-form GP posterior.
    Gp {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        samples: PathBuf,
    },
}

fn load(path: &Path, seed: Option<u64>) -> Result<Config> {
    let mut cfg = Config::load(path)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

enum Outcome {
    Ok,
    ChecksFailed,
}

fn run(cli: Cli) -> Result<Outcome> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let out = cli.out_dir.as_path();
    let seed = cli.seed;
    match cli.cmd {
        Cmd::Basis { cmd: BasisCmd::Build { config } } => commands::basis_build(&load(&config, seed)?, out)?,
        Cmd::Bridge { cmd: BridgeCmd::Sample { config } } => commands::bridge_sample(&load(&config, seed)?, out)?,
        Cmd::Bm { cmd: BmCmd::Train { config } } => commands::bm_train_cmd(&load(&config, seed)?, out)?,
        Cmd::Bm { cmd: BmCmd::Sample { config, checkpoint, n, res } } => {
            commands::bm_sample_cmd(&load(&config, seed)?, out, checkpoint.as_deref(), n, &res)?
        }
        Cmd::Bayes { cmd: BayesCmd::Train { config } } => commands::bayes_train_cmd(&load(&config, seed)?, out)?,
        Cmd::Bayes { cmd: BayesCmd::Sample { config, checkpoint, n } } => {
            commands::bayes_sample_cmd(&load(&config, seed)?, out, checkpoint.as_deref(), n)?
        }
        Cmd::Eval { cmd: EvalCmd::Mmd { config, generated, reference } } => {
            commands::eval_mmd(&load(&config, seed)?, out, &generated, &reference)?
        }
        Cmd::Eval { cmd: EvalCmd::Gp { config, samples } } => commands::eval_gp(&load(&config, seed)?, out, &samples)?,
        Cmd::Selftest => {
            if !commands::selftest_cmd()? {
                return Ok(Outcome::ChecksFailed);
            }
        }
    }
    Ok(Outcome::Ok)
}

/// 2 for bad input, 3 for numerical breakdown, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() || cause.is::<toml::de::Error>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<fnbridge::Error>() {
            return match e {
                e if e.is_numerical() => 3,
                fnbridge::Error::Io(_) => 1,
                _ => 2,
            };
        }
        if let Some(e) = cause.downcast_ref::<std::io::Error>() {
            if e.kind() == std::io::ErrorKind::NotFound {
                return 2;
            }
        }
    }
    1
}

fn main() -> ExitCode {
    fnbridge::tune_allocator();
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::ChecksFailed) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
