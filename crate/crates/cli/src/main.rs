use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hier_core::config::{parse_override, PipelineConfig};
use hier_core::corpus::write_corpus_jsonl;
use hier_core::pipeline::{Pipeline, Stage};
use hier_core::synth::generate_synthetic;
use hier_core::CoreError;

/// Two-level long-document classifier.
#[derive(Parser, Debug)]
#[command(name = "hier", version)]
struct Cli {
    /// JSON config file; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Artifact directory (default: `artifacts` next to the config).
    #[arg(long, global = true)]
    artifacts: Option<PathBuf>,
    /// Seed for every stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Input source of the configured document model.
    #[arg(long, global = true, value_enum)]
    variant: Option<VariantArg>,
    /// `section.key=value`, repeatable. Values are parsed as JSON when possible.
    #[arg(long = "stage-override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// No progress output on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
enum VariantArg {
    Alpha,
    Beta,
    AlphaNc,
    BetaNc,
}

impl VariantArg {
    fn as_str(self) -> &'static str {
        match self {
            VariantArg::Alpha => "alpha",
            VariantArg::Beta => "beta",
            VariantArg::AlphaNc => "alpha_nc",
            VariantArg::BetaNc => "beta_nc",
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic corpus (to corpus.path unless --out is given).
    Synth {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse the corpus and build the vocabulary.
    Ingest,
    /// Fine-tune the chunk encoder.
    TrainChunk,
    /// Extract [CLS] vectors for every chunk.
    Embed,
    /// Fit the parametric UMAP reducer and reduce all vectors.
    Reduce,
    /// Run HDBSCAN on reduced train and validation vectors.
    Cluster,
    /// Train the configured document model.
    TrainDoc,
    /// Run the variant grid and write the results table.
    Evaluate,
    /// Every stage in order, skipping up-to-date ones.
    Pipeline,
}

enum Failure {
    Usage(String),
    Stage(String),
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Stage(other.to_string()),
        }
    }
}

fn load_config(cli: &Cli) -> Result<(PipelineConfig, PathBuf), Failure> {
    let mut overrides = cli
        .overrides
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(v) = cli.variant {
        overrides.push(("doc_model.source".into(), serde_json::Value::String(v.as_str().into())));
    }
    let (mut config, base) = match &cli.config {
        Some(path) => {
            let cfg = PipelineConfig::load(path, &overrides)?;
            (cfg, path.parent().map(PathBuf::from).unwrap_or_else(|| PathBuf::from(".")))
        }
        None => (PipelineConfig::from_json("{}", &overrides, std::path::Path::new("."))?, PathBuf::from(".")),
    };
    if let Some(seed) = cli.seed {
        config.set_seed(seed);
    }
    let dir = cli
        .artifacts
        .clone()
        .or_else(|| config.artifacts.clone())
        .unwrap_or_else(|| base.join("artifacts"));
    Ok((config, dir))
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let (config, dir) = load_config(cli)?;
    let stage = match &cli.command {
        Command::Synth { out } => {
            let docs = generate_synthetic(&config.synth).map_err(|e| Failure::Usage(e.to_string()))?;
            let path = out.clone().unwrap_or_else(|| config.corpus.path.clone());
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Failure::Stage(e.to_string()))?;
            }
            std::fs::write(&path, write_corpus_jsonl(&docs)).map_err(|e| Failure::Stage(e.to_string()))?;
            if !cli.quiet {
                eprintln!("[synth] {} documents written to {}", docs.len(), path.display());
            }
            return Ok(());
        }
        Command::Ingest => Stage::Ingest,
        Command::TrainChunk => Stage::TrainChunk,
        Command::Embed => Stage::Embed,
        Command::Reduce => Stage::Reduce,
        Command::Cluster => Stage::Cluster,
        Command::TrainDoc => Stage::TrainDoc,
        Command::Evaluate => Stage::Evaluate,
        Command::Pipeline => {
            let mut p = Pipeline::new(config, &dir);
            p.verbose = !cli.quiet;
            p.run_pipeline()?;
            print_table(&p);
            return Ok(());
        }
    };
    let mut p = Pipeline::new(config, &dir);
    p.verbose = !cli.quiet;
    p.run_stage(stage)?;
    if stage == Stage::Evaluate {
        print_table(&p);
    }
    Ok(())
}

fn print_table(p: &Pipeline) {
    if let Ok(table) = std::fs::read_to_string(p.path(hier_core::pipeline::files::TABLE)) {
        print!("{table}");
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Stage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
