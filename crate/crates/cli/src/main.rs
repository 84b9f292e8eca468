use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use synthqa_cli::config::CorpusInput;
use synthqa_cli::manifest::Manifest;
use synthqa_cli::pipeline::{self, Stage};
use synthqa_cli::{BackendMode, PipelineError, RunConfig};
use synthqa_core::review::QueueFilter;
use synthqa_review::ServeOptions;
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "synthqa", version, about = "Build and curate synthetic QnA datasets from technical documents")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides both the generation and the embedding backend.
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendArg>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory for every stage's files.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Corpus file; repeat for several. Replaces the configured corpus.
    #[arg(long, global = true)]
    corpus: Vec<PathBuf>,
    #[arg(long, global = true)]
    benchmark: Option<PathBuf>,
    #[arg(long, global = true)]
    target_chars: Option<usize>,
    #[arg(long, global = true)]
    max_chars: Option<usize>,
    #[arg(long, global = true)]
    min_chars: Option<usize>,
    #[arg(long, global = true)]
    n_pairs: Option<usize>,
    #[arg(long, global = true)]
    dim: Option<usize>,
    /// Fixed cluster count instead of silhouette selection.
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    perplexity: Option<f64>,
    #[arg(long, global = true)]
    iterations: Option<usize>,
    #[arg(long, global = true)]
    threshold: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Remote,
    Mock,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and chunk the corpus.
    Ingest,
    /// Summarize every chunk.
    Summarize,
    /// Embed chunk texts.
    Embed,
    /// Cluster chunk vectors and write a 2-D scatter.
    Cluster,
    /// Generate QnA pairs per chunk.
    Generate,
    /// Score pairs, measure lexical diversity and project against the benchmark.
    Evaluate,
    /// Curated JSON-lines from the scored pairs and the review log.
    Export,
    /// Every stage in order.
    RunAll,
    /// Check that recorded output hashes match the files on disk.
    Verify,
    Review {
        #[command(subcommand)]
        command: ReviewCommand,
    },
}

#[derive(Subcommand)]
enum ReviewCommand {
    /// Serve the review API (and optionally a static UI) over the run directory.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8787")]
        bind: SocketAddr,
        #[arg(long)]
        ui_dir: Option<PathBuf>,
        /// Queue shown when a request names none.
        #[arg(long, default_value = "flagged")]
        status: String,
    },
}

fn build_config(g: &GlobalArgs) -> Result<RunConfig, PipelineError> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(b) = g.backend {
        cfg.set_backend(match b {
            BackendArg::Remote => BackendMode::Remote,
            BackendArg::Mock => BackendMode::Mock,
        });
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(o) = &g.out {
        cfg.out_dir = o.clone();
    }
    if !g.corpus.is_empty() {
        cfg.corpus = g.corpus.iter().map(|p| CorpusInput { path: p.clone(), format: None }).collect();
    }
    if let Some(b) = &g.benchmark {
        cfg.benchmark_path = Some(b.clone());
    }
    if let Some(v) = g.target_chars {
        cfg.chunking.target_chars = v;
    }
    if let Some(v) = g.max_chars {
        cfg.chunking.max_chars = v;
    }
    if let Some(v) = g.min_chars {
        cfg.chunking.min_chars = v;
    }
    if let Some(v) = g.n_pairs {
        cfg.generation.n_pairs = v;
    }
    if let Some(v) = g.dim {
        cfg.embedding.dim = Some(v);
    }
    if g.k.is_some() {
        cfg.clustering.k = g.k;
    }
    if let Some(v) = g.perplexity {
        cfg.tsne.perplexity = v;
    }
    if let Some(v) = g.iterations {
        cfg.tsne.iterations = v;
    }
    if let Some(v) = g.threshold {
        cfg.threshold = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report(stage: Stage, outcome: &pipeline::StageOutcome) {
    println!("{}: wrote {}", stage.name(), outcome.outputs.join(", "));
    for w in &outcome.warnings {
        println!("{}: warning: {w}", stage.name());
    }
}

fn serve(cfg: &RunConfig, bind: SocketAddr, ui_dir: Option<PathBuf>, status: &str) -> Result<()> {
    let filter: QueueFilter = serde_json::from_value(serde_json::Value::String(status.into()))
        .map_err(|_| PipelineError::Validation(format!("unknown queue status {status:?}")))?;
    let dir = &cfg.out_dir;
    let dataset = dir.join(pipeline::SCORED_PAIRS_FILE);
    if !dataset.is_file() {
        return Err(PipelineError::MissingStage { stage: "evaluate", path: dataset.display().to_string() }.into());
    }
    let mut opts = ServeOptions::new(dataset, dir.join(pipeline::DECISIONS_FILE));
    opts.bind = bind;
    opts.ui_dir = ui_dir;
    opts.default_filter = filter;
    opts.chunks_path = Some(dir.join(pipeline::CHUNKS_FILE)).filter(|p| p.is_file());
    opts.report_path = Some(dir.join(pipeline::REPORT_FILE)).filter(|p| p.is_file());
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().context("starting runtime")?;
    rt.block_on(synthqa_review::serve(opts))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = build_config(&cli.global)?;
    let stage = match cli.command {
        Command::Ingest => Stage::Ingest,
        Command::Summarize => Stage::Summarize,
        Command::Embed => Stage::Embed,
        Command::Cluster => Stage::Cluster,
        Command::Generate => Stage::Generate,
        Command::Evaluate => Stage::Evaluate,
        Command::Export => Stage::Export,
        Command::RunAll => {
            for (stage, outcome) in Stage::ALL.iter().zip(pipeline::run_all(&cfg)?) {
                report(*stage, &outcome);
            }
            if let Ok(text) = std::fs::read_to_string(cfg.out_dir.join(pipeline::REPORT_TEXT_FILE)) {
                print!("{text}");
            }
            return Ok(());
        }
        Command::Verify => {
            let manifest = Manifest::load_or_new(&cfg.out_dir, &cfg.run_id(), cfg.seed)?;
            if manifest.stages.is_empty() {
                bail!(PipelineError::Validation(format!(
                    "no manifest entries for this config in {}",
                    cfg.out_dir.display()
                )));
            }
            let bad = manifest.verify(&cfg.out_dir);
            if !bad.is_empty() {
                bail!(PipelineError::Validation(format!("hash mismatch: {}", bad.join(", "))));
            }
            println!("verified {} stages", manifest.stages.len());
            return Ok(());
        }
        Command::Review { command: ReviewCommand::Serve { bind, ui_dir, status } } => {
            return serve(&cfg, bind, ui_dir, &status);
        }
    };
    let outcome = pipeline::run_stage(stage, &cfg)?;
    report(stage, &outcome);
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<PipelineError>().map_or(1, PipelineError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
