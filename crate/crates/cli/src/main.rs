use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use emcid_cli::commands::{self, Context};
use emcid_cli::config::LoadedConfig;
use emcid_cli::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "emcid", version, about = "Two-stage concept editing for a toy text-to-image model")]
struct Cli {
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory; defaults to the configured checkpoint directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the encoder and denoiser and check the generation gate.
    Train,
    /// Estimate per-layer key statistics over the corpus.
    Covariance {
        #[arg(long)]
        model: PathBuf,
    },
    /// Optimize one value per (request, layer).
    Stage1 {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        requests: PathBuf,
    },
    /// Write stage-I values into the encoder.
    Edit {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        payloads: PathBuf,
        #[arg(long)]
        covariance: Option<PathBuf>,
    },
    /// Benchmark metrics between a pre- and post-edit model.
    Eval {
        #[arg(long)]
        pre: PathBuf,
        #[arg(long)]
        post: PathBuf,
        /// JSON list of [source, destination] pairs.
        #[arg(long)]
        edits: PathBuf,
    },
    /// Rectify misunderstood aliases.
    Rectify {
        #[arg(long)]
        model: PathBuf,
        /// `alias:class,...`; defaults to every misunderstood alias.
        #[arg(long)]
        aliases: Option<String>,
        /// Use reference images instead of class prompts.
        #[arg(long)]
        images_only: bool,
        #[arg(long)]
        covariance: Option<PathBuf>,
    },
    /// Balance the attributes a concept generates.
    Debias {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        concept: String,
        #[arg(long, value_delimiter = ',', required = true)]
        attributes: Vec<String>,
        #[arg(long)]
        covariance: Option<PathBuf>,
    },
    /// Edit and preservation residuals across the configured α grid.
    SweepAlpha {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        payloads: PathBuf,
        #[arg(long)]
        covariance: Option<PathBuf>,
    },
    /// Benchmark metrics across the configured layer ranges.
    SweepLayers {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        payloads: PathBuf,
        #[arg(long)]
        edits: PathBuf,
        #[arg(long)]
        covariance: Option<PathBuf>,
    },
    /// Benchmark metrics across the configured edit counts.
    SweepScale {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        covariance: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    let loaded = LoadedConfig::load(cli.config.as_deref(), cli.seed)?;
    let workers = match cli.workers {
        Some(0) => return Err(CliError::Config("--workers must be positive".into())),
        Some(n) => n,
        None => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    let mut ctx = Context::new(loaded, cli.out, workers);
    pool.install(|| match &cli.command {
        Command::Train => commands::train(&mut ctx),
        Command::Covariance { model } => commands::covariance(&mut ctx, model),
        Command::Stage1 { model, requests } => commands::stage1(&mut ctx, model, requests),
        Command::Edit { model, payloads, covariance } => {
            commands::edit(&mut ctx, model, payloads, covariance.as_deref())
        }
        Command::Eval { pre, post, edits } => commands::eval(&mut ctx, pre, post, edits),
        Command::Rectify { model, aliases, images_only, covariance } => {
            commands::rectify(&mut ctx, model, aliases.as_deref(), *images_only, covariance.as_deref())
        }
        Command::Debias { model, concept, attributes, covariance } => {
            commands::debias(&mut ctx, model, concept, attributes, covariance.as_deref())
        }
        Command::SweepAlpha { model, payloads, covariance } => {
            commands::sweep_alpha(&mut ctx, model, payloads, covariance.as_deref())
        }
        Command::SweepLayers { model, payloads, edits, covariance } => {
            commands::sweep_layers(&mut ctx, model, payloads, edits, covariance.as_deref())
        }
        Command::SweepScale { model, covariance } => commands::sweep_scale(&mut ctx, model, covariance.as_deref()),
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
