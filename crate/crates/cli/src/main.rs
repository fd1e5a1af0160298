mod stages;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use pcic_core::config::RunConfig;

#[derive(Parser, Debug)]
#[command(
    name = "pcic",
    version,
    about = "Batch buy-it-again recommender: category repurchase model plus in-category item ranking",
    after_long_help = long_help()
)]
struct Cli {
    /// `key = value` configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one key; repeatable. Applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Shorthand for --set split.label_window_days=N.
    #[arg(long, global = true, value_name = "N")]
    label_window_days: Option<u32>,

    /// Shorthand for --set paths.work_dir=DIR.
    #[arg(long, global = true, value_name = "DIR")]
    work_dir: Option<PathBuf>,

    /// Shorthand for --set paths.input=FILE.
    #[arg(long, global = true, value_name = "FILE")]
    input: Option<PathBuf>,

    /// Shorthand for --set run.seed=N.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Shorthand for --set run.threads=N.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Validate the input CSV and write the canonical transaction file.
    Ingest,
    /// Temporal split into feature and label periods; writes labels.
    Split,
    /// Life tables, ARIMA forecasts and the 11-column feature matrix.
    Featurize,
    /// Train the category model on a user holdout.
    Train,
    /// Score and rank every user's categories.
    Score,
    /// Merge category and item ranks into top-K lists.
    Recommend,
    /// Cross-validate against the baselines and print the comparison grid.
    Evaluate,
    /// Write a synthetic transaction file and its truth file.
    Synth,
    /// Permutation importance of each feature on the validation users.
    Importance,
    /// Print the effective configuration.
    Config,
}

fn long_help() -> String {
    format!(
        "Stages hand off through files in paths.work_dir: \
         ingest -> split -> featurize -> train -> score -> recommend; \
         evaluate and importance read the same artifacts.\n\n\
         Configuration keys (key, default, meaning):\n{}",
        RunConfig::describe_keys()
    )
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        cfg.apply_text(&text)
            .with_context(|| format!("in config {}", path.display()))?;
    }
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(m) = cli.label_window_days {
        cfg.set("split.label_window_days", &m.to_string())?;
    }
    if let Some(d) = &cli.work_dir {
        cfg.work_dir = d.clone();
    }
    if let Some(i) = &cli.input {
        cfg.input = i.clone();
    }
    if let Some(s) = cli.seed {
        cfg.pipeline.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .context("configuring worker threads")?;
    }
    match cli.command {
        Command::Config => {
            print!("{}", cfg.to_text());
            return Ok(());
        }
        Command::Synth => stages::synth(&cfg)?,
        Command::Ingest => stages::ingest(&cfg)?,
        Command::Split => stages::split(&cfg)?,
        Command::Featurize => stages::featurize(&cfg)?,
        Command::Train => stages::train(&cfg)?,
        Command::Score => stages::score(&cfg)?,
        Command::Recommend => stages::recommend(&cfg)?,
        Command::Evaluate => stages::evaluate(&cfg)?,
        Command::Importance => stages::importance(&cfg)?,
    }
    stages::write_manifest(&cfg, cli.command.name())
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::Split => "split",
            Command::Featurize => "featurize",
            Command::Train => "train",
            Command::Score => "score",
            Command::Recommend => "recommend",
            Command::Evaluate => "evaluate",
            Command::Synth => "synth",
            Command::Importance => "importance",
            Command::Config => "config",
        }
    }
}
