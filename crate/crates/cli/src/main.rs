//! Command-line driver: staged runs of the privacy evaluation pipeline.

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use privleak_core::analysis::{agreement_report, load_annotations};
use privleak_core::pipeline::{compare_table, run_until, ReportBundle, RunConfig, RunStage};
use privleak_core::score::{ClaimSupportScore, RecordPrivacy};

#[derive(Parser)]
#[command(
    name = "privleak",
    about = "Semantic privacy leakage evaluation for sanitized text datasets",
    version
)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the configured seeds (repeatable).
    #[arg(long = "seed", global = true)]
    seeds: Vec<u64>,

    /// Force the deterministic offline mock providers.
    #[arg(long, global = true)]
    mock_providers: bool,

    /// Override the provider response cache directory.
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,

    /// Override the output directory.
    #[arg(long = "out", global = true)]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decompose the original dataset into atomic claims.
    Atomize,
    /// Build the adversary's auxiliary bundles for every seed and strategy.
    Aux,
    /// Produce every configured sanitized dataset.
    Sanitize,
    /// Link auxiliary bundles to sanitized records.
    Link,
    /// Judge semantic claim support for linked records.
    Score,
    /// Evaluate task utility and coherence.
    Utility,
    /// Run categorization and the aux-only baseline.
    Analyze {
        /// Compute agreement statistics from a human annotation file
        /// (line-delimited {record_id, index, ratings}).
        #[arg(long)]
        annotations: Option<PathBuf>,
    },
    /// Execute every stage and write report.json plus CSV tables.
    Run,
    /// Render a CSV table from an existing report.json.
    Report {
        /// Metric columns, comma separated.
        #[arg(long, value_delimiter = ',')]
        metrics: Vec<String>,
        /// Method rows, comma separated; defaults to the configured order.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
    },
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let path = cli
        .config
        .as_ref()
        .context("--config PATH is required for this subcommand")?;
    let mut config = RunConfig::from_toml_file(path)
        .with_context(|| format!("loading config {}", path.display()))?;
    if !cli.seeds.is_empty() {
        config.seeds = cli.seeds.clone();
    }
    if cli.mock_providers {
        config.providers.mock = true;
    }
    if let Some(dir) = &cli.cache_dir {
        config.providers.cache_dir = Some(dir.clone());
    }
    if let Some(dir) = &cli.out_dir {
        config.out_dir = dir.clone();
    }
    Ok(config)
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Atomize => stage(&cli, RunStage::Atomize),
        Command::Aux => stage(&cli, RunStage::Aux),
        Command::Sanitize => stage(&cli, RunStage::Sanitize),
        Command::Link => stage(&cli, RunStage::Link),
        Command::Score => stage(&cli, RunStage::Score),
        Command::Utility => stage(&cli, RunStage::Utility),
        Command::Analyze { annotations } => analyze(&cli, annotations.as_deref()),
        Command::Run => run_full(&cli),
        Command::Report { metrics, methods } => report(&cli, metrics, methods),
    }
}

fn stage(cli: &Cli, stage: RunStage) -> anyhow::Result<()> {
    let config = load_config(cli)?;
    run_until(config, stage)?;
    eprintln!("stage complete");
    Ok(())
}

fn analyze(cli: &Cli, annotations: Option<&std::path::Path>) -> anyhow::Result<()> {
    let config = load_config(cli)?;
    let out_dir = config.out_dir.clone();
    run_until(config, RunStage::Analyze)?;
    if let Some(path) = annotations {
        let rows = load_annotations(path)?;
        // Join against the scores persisted for the first method and seed
        // found under the output directory.
        let scores = collect_model_scores(&out_dir)?;
        let report = agreement_report(&rows, &scores)?;
        println!("{}", serde_json_string(&report)?);
    }
    eprintln!("analysis complete");
    Ok(())
}

fn serde_json_string<T: serde::Serialize>(value: &T) -> anyhow::Result<String> {
    Ok(serde_json::to_string_pretty(value)?)
}

fn collect_model_scores(out_dir: &std::path::Path) -> anyhow::Result<Vec<ClaimSupportScore>> {
    let stages = out_dir.join("stages");
    let mut scores = Vec::new();
    for entry in std::fs::read_dir(&stages)
        .with_context(|| format!("no stage outputs under {}", stages.display()))?
    {
        let path = entry?.path();
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        if !name.starts_with("score-") || !name.ends_with(".jsonl") {
            continue;
        }
        let text = std::fs::read_to_string(&path)?;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let record: RecordPrivacy = serde_json::from_str(line)?;
            scores.extend(record.claim_scores);
        }
    }
    Ok(scores)
}

fn run_full(cli: &Cli) -> anyhow::Result<()> {
    let config = load_config(cli)?;
    let out_dir = config.out_dir.clone();
    let bundle = privleak_core::pipeline::run(config)?;
    eprintln!(
        "run {} complete: {} methods, report at {}",
        bundle.run_name,
        bundle.methods.len(),
        out_dir.join("report.json").display()
    );
    if !bundle.failures.is_empty() {
        for failure in &bundle.failures {
            eprintln!(
                "FAILED stage={} method={} : {}",
                failure.stage, failure.method, failure.message
            );
        }
        bail!("{} stage failure(s); partial report written", bundle.failures.len());
    }
    Ok(())
}

fn report(cli: &Cli, metrics: &[String], methods: &[String]) -> anyhow::Result<()> {
    let config = load_config(cli)?;
    let report_path = config.out_dir.join("report.json");
    let text = std::fs::read_to_string(&report_path)
        .with_context(|| format!("no report at {}; run `privleak run` first", report_path.display()))?;
    let bundle: ReportBundle = serde_json::from_str(&text)?;
    let method_refs: Vec<&str> = if methods.is_empty() {
        bundle.method_order.iter().map(|s| s.as_str()).collect()
    } else {
        methods.iter().map(|s| s.as_str()).collect()
    };
    let default_metrics = [
        "lexical_distance",
        "semantic_distance",
        "task_utility",
        "text_coherence",
    ];
    let metric_refs: Vec<&str> = if metrics.is_empty() {
        default_metrics
            .iter()
            .copied()
            .filter(|m| {
                bundle
                    .methods
                    .values()
                    .any(|r| r.metric(m).is_some())
            })
            .collect()
    } else {
        metrics.iter().map(|s| s.as_str()).collect()
    };
    let table = compare_table(&bundle, &metric_refs, &method_refs)?;
    print!("{table}");
    Ok(())
}
