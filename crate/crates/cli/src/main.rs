//! `embench`: generate or ingest a corpus, train concept embeddings, run the
//! benchmarks and summarise them.

mod commands;
mod config;
mod manifest;
mod report;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "embench", version, about = "Train and benchmark clinical concept embeddings")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Overrides `output_dir`.
    #[arg(long, short, global = true)]
    output_dir: Option<PathBuf>,
    /// Overrides the global seed.
    #[arg(long, global = true, env = "EMBENCH_SEED")]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, short, global = true)]
    jobs: Option<usize>,
    /// Overrides any config key, e.g. `--set train.cbow.epochs=3`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Overrides `corpus.min_visits`.
    #[arg(long, global = true)]
    min_visits: Option<usize>,
    /// More logging (-v info, -vv debug).
    #[arg(long, short, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with planted clusters.
    Generate,
    /// Train embeddings for the configured methods.
    Train {
        /// Comma-separated methods; overrides `train.methods`.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
    },
    /// Run the configured evaluations on trained embeddings.
    Evaluate {
        /// Comma-separated methods; overrides `evaluate.methods`.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        /// Comma-separated evaluations; overrides `evaluate.run`.
        #[arg(long, value_delimiter = ',')]
        run: Option<Vec<String>>,
    },
    /// Merge stage outputs into summary.csv.
    Report,
}

fn toml_list(items: &[String]) -> String {
    format!("[{}]", items.iter().map(|s| format!("{:?}", s.trim())).collect::<Vec<_>>().join(","))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let g = &cli.global;
    let level = match g.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = g.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global().context("configuring worker pool")?;
    }

    let mut overrides = g.overrides.clone();
    if let Some(dir) = &g.output_dir {
        overrides.push(format!("output_dir={:?}", dir.display().to_string()));
    }
    if let Some(n) = g.min_visits {
        overrides.push(format!("corpus.min_visits={n}"));
    }
    match &cli.command {
        Command::Train { methods: Some(m) } => overrides.push(format!("train.methods={}", toml_list(m))),
        Command::Evaluate { methods, run } => {
            if let Some(m) = methods {
                overrides.push(format!("evaluate.methods={}", toml_list(m)));
            }
            if let Some(r) = run {
                overrides.push(format!("evaluate.run={}", toml_list(r)));
            }
        }
        _ => {}
    }
    let cfg = config::load(g.config.as_deref(), &overrides, g.seed)?;

    match cli.command {
        Command::Generate => commands::generate(&cfg),
        Command::Train { .. } => commands::train(&cfg),
        Command::Evaluate { .. } => commands::evaluate(&cfg),
        Command::Report => commands::report(&cfg),
    }
}
