use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use cultlab::attribution::aggregate;
use cultlab::model::load_checkpoint;
use cultlab::pipeline::{Pipeline, RunConfig, Stage};
use cultlab::world::read_jsonl;
use cultlab::Variant;

/// Environment variable naming the directory where trained models are cached.
const CACHE_ENV: &str = "CULTLAB_CACHE";

#[derive(Parser)]
#[command(name = "cultlab", version, about = "Culture-neuron attribution, selection and ablation on a desk-scale transformer")]
struct Cli {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set selection.t_mlp=2`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output root; each stage writes into its own subdirectory.
    #[arg(long, short, default_value = "runs/default", global = true)]
    out: PathBuf,
    /// Replace existing outputs instead of refusing.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads; defaults to the number of available cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Trained-model cache directory (also read from CULTLAB_CACHE).
    #[arg(long, global = true)]
    cache: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the world and every dataset.
    Generate,
    /// Pretrain the model.
    Train,
    /// Score neurons; with --model and --dataset scores a single dataset.
    Score(ScoreArgs),
    /// Select culture-general and culture-specific neurons.
    Select,
    /// Evaluate the selected sets under masking.
    Ablate,
    /// Module-selective fine-tuning runs.
    Finetune,
    /// Verify the artifact chain and write the merged summary.
    Report,
    /// Run every stage in order.
    Run,
    /// Print the effective configuration.
    Config,
}

#[derive(Args)]
struct ScoreArgs {
    /// Checkpoint directory for single-table scoring.
    #[arg(long, requires = "dataset")]
    model: Option<PathBuf>,
    /// Dataset JSONL for single-table scoring.
    #[arg(long, requires = "model")]
    dataset: Option<PathBuf>,
    #[arg(long, default_value = "max")]
    variant: Variant,
    /// Output CSV for single-table scoring.
    #[arg(long, requires = "model")]
    output: Option<PathBuf>,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let text = match &cli.config {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => String::new(),
    };
    Ok(RunConfig::from_toml_with(&text, &cli.overrides)?)
}

fn score_one(model: &Path, dataset: &Path, variant: Variant, output: Option<&Path>, force: bool) -> Result<()> {
    let model = load_checkpoint(model)?;
    let data = read_jsonl(dataset)?;
    let table = aggregate(&model, &data, variant)?;
    let csv = table.to_csv();
    match output {
        Some(path) => {
            if path.exists() && !force {
                return Err(cultlab::Error::Config(format!(
                    "{} exists; pass --force to overwrite",
                    path.display()
                ))
                .into());
            }
            fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!(cultlab::Error::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("starting the worker pool")?;
    }
    if let Command::Score(ScoreArgs {
        model: Some(model),
        dataset: Some(dataset),
        variant,
        output,
    }) = &cli.command
    {
        return score_one(model, dataset, *variant, output.as_deref(), cli.force);
    }
    let config = load_config(&cli)?;
    let stage = match cli.command {
        Command::Config => {
            print!("{}", config.to_toml());
            return Ok(());
        }
        Command::Generate => Some(Stage::Generate),
        Command::Train => Some(Stage::Train),
        Command::Score(_) => Some(Stage::Score),
        Command::Select => Some(Stage::Select),
        Command::Ablate => Some(Stage::Ablate),
        Command::Finetune => Some(Stage::Finetune),
        Command::Report => Some(Stage::Report),
        Command::Run => None,
    };
    let cache = cli.cache.or_else(|| std::env::var_os(CACHE_ENV).map(PathBuf::from));
    let pipeline = Pipeline {
        force: cli.force,
        cache,
        ..Pipeline::new(config, cli.out)
    };
    let stages = match stage {
        Some(s) => vec![s],
        None => Stage::ALL.to_vec(),
    };
    for s in stages {
        eprintln!("cultlab: {s}");
        let m = pipeline.run(s)?;
        eprintln!("cultlab: {s} wrote {} files", m.outputs.len());
    }
    if stage.is_none() || stage == Some(Stage::Report) {
        print!("{}", pipeline.summary()?.to_csv());
    }
    Ok(())
}

/// 2 for configuration and provenance problems, 3 for numeric failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<cultlab::Error>()) {
        Some(e) if e.is_numeric() => 3,
        Some(_) => 2,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
