use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use medqa_rag::runner::{self, ExperimentConfig, RunError, RunOptions};
use medqa_rag::strategies::Strategy;
use medqa_rag::textcorpus::ChunkingConfig;
use medqa_rag::vecindex;

#[derive(Parser)]
#[command(
    name = "medqa",
    version,
    about = "Retrieval-augmented multiple-choice QA benchmark runner"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Normalize and chunk a corpus into a JSON-lines file.
    Ingest {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = ChunkingConfig::default().chunk_size)]
        chunk_size: usize,
        #[arg(long, default_value_t = ChunkingConfig::default().overlap)]
        overlap: usize,
    },
    /// Embed chunks into the vector cache used by `run`.
    Index {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Chunks from `ingest`; defaults to chunking the configured corpus.
        #[arg(long)]
        chunks: Option<PathBuf>,
    },
    /// Run an experiment.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Discard existing results instead of resuming.
        #[arg(long)]
        fresh: bool,
    },
    /// Recompute rationale metrics for an existing results file.
    Score {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Defaults to results.csv in the output directory.
        #[arg(long)]
        results: Option<PathBuf>,
    },
    /// Compare two reports side by side.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Also write the comparison as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long, short)]
    config: PathBuf,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    concurrency: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, RunError> {
        let mut cfg = ExperimentConfig::from_file(&self.config)?;
        if let Some(s) = &self.strategy {
            cfg.strategy = Strategy::parse(s)
                .ok_or_else(|| RunError::Config(format!("unknown strategy {s:?}")))?;
        }
        if let Some(m) = &self.model {
            cfg.settings.model_id = m.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(c) = self.concurrency {
            cfg.concurrency = c;
        }
        if let Some(k) = self.k {
            cfg.settings.k = k;
        }
        if let Some(d) = &self.output_dir {
            cfg.output_dir = d.clone();
        }
        if let Some(d) = &self.cache_dir {
            cfg.cache_dir = Some(d.clone());
        }
        Ok(cfg)
    }
}

fn call_log_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join(runner::CALL_LOG_FILE)
}

fn index(cfg: &ExperimentConfig, chunks: Option<&Path>) -> Result<i32, RunError> {
    let cache = cfg
        .cache_dir
        .as_deref()
        .ok_or_else(|| RunError::Config("index needs a cache_dir".into()))?;
    let chunks = match (chunks, &cfg.corpus) {
        (Some(p), _) => runner::read_chunks(p)?,
        (None, Some(c)) => {
            let docs = medqa_rag::textcorpus::load_corpus(&c.manifest)?;
            medqa_rag::textcorpus::chunk_corpus(&docs, &c.chunking)?
        }
        (None, None) => {
            return Err(RunError::Config(
                "no chunks file and no [corpus] section".into(),
            ))
        }
    };
    let providers = runner::build_providers(cfg, Some(&call_log_path(cfg)))?;
    let idx = vecindex::build_index(
        &chunks,
        &providers.embedder,
        Some(&runner::index_dir(cache)),
    )?;
    println!("indexed {} chunks (dim {})", idx.len(), idx.dimension());
    Ok(0)
}

fn run(cfg: &ExperimentConfig, fresh: bool) -> Result<i32, RunError> {
    cfg.validate()?;
    let providers = runner::build_providers(cfg, Some(&call_log_path(cfg)))?;
    let outcome = runner::run_experiment(cfg, &providers, &RunOptions { fresh })?;
    print!("{}", runner::render_report(&outcome.report));
    println!("results: {}", outcome.results_path.display());
    println!("report:  {}", outcome.report_path.display());
    if let Some(why) = &outcome.aborted {
        eprintln!("run stopped early: {why}");
    }
    Ok(outcome.exit_code())
}

fn score(cfg: &ExperimentConfig, results: Option<&Path>) -> Result<i32, RunError> {
    cfg.validate()?;
    let default_path = cfg.output_dir.join(runner::RESULTS_FILE);
    let path = results.unwrap_or(&default_path);
    let rows = runner::read_results_csv(path)?;
    let providers = runner::build_providers(cfg, None)?;
    let rows = match runner::rescore(&rows, &providers.embedder, &cfg.metrics) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("scoring failed: {e}");
            return Ok(2);
        }
    };
    runner::write_results_csv(&rows, cfg.strategy, path)?;
    let prompts = cfg.load_prompts()?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let report = runner::build_report(&rows, cfg.echo(&prompts), rows.len());
    runner::write_report(&report, dir)?;
    print!("{}", runner::render_report(&report));
    Ok(0)
}

fn compare(a: &Path, b: &Path, csv: Option<&Path>) -> Result<i32, RunError> {
    let cmp = runner::compare_reports(&runner::read_report(a)?, &runner::read_report(b)?)?;
    print!("{}", cmp.to_text());
    if let Some(p) = csv {
        std::fs::write(p, cmp.to_csv()).map_err(|source| RunError::Io {
            path: p.to_path_buf(),
            source,
        })?;
    }
    Ok(0)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Ingest {
            manifest,
            out,
            chunk_size,
            overlap,
        } => {
            let chunking = ChunkingConfig {
                chunk_size: *chunk_size,
                overlap: *overlap,
            };
            runner::ingest_corpus(manifest, &chunking, out).map(|chunks| {
                println!("wrote {} chunks to {}", chunks.len(), out.display());
                0
            })
        }
        Command::Index { cfg, chunks } => cfg.load().and_then(|c| index(&c, chunks.as_deref())),
        Command::Run { cfg, fresh } => cfg.load().and_then(|c| run(&c, *fresh)),
        Command::Score { cfg, results } => cfg.load().and_then(|c| score(&c, results.as_deref())),
        Command::Compare { a, b, csv } => compare(a, b, csv.as_deref()),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
