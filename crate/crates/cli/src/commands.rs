use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use dapfl::affinity::{build_affinity_matrix, parse_stats_table, raw_affinity_table};
use dapfl::data::heatmap_csv;
use dapfl::engine::{run_experiment_with, weights_csv, MetricsLog, RunOptions};
use dapfl::{ExperimentConfig, Strategy};

use crate::manifest::{config_hash, run_dir, RunManifest};

#[derive(Debug, Parser)]
#[command(
    name = "dapfl",
    version,
    about = "Dynamic affinity personalized FL simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment and write its metrics.
    Run(RunArgs),
    /// Run every strategy x seed combination and tabulate last-10 accuracy.
    Compare(CompareArgs),
    /// Print the affinity matrix of a class-count table.
    Affinity(AffinityArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Experiment config file (flat `key = value` lines).
    #[arg(long)]
    pub config: PathBuf,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Root output directory.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Also write per-round aggregation weights (weights.csv).
    #[arg(long)]
    pub dump_weights: bool,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    /// Comma-separated strategy names.
    #[arg(long, value_delimiter = ',', required = true)]
    pub strategies: Vec<String>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', required = true)]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Args)]
pub struct AffinityArgs {
    /// Whitespace-separated class counts, one client per line.
    #[arg(long)]
    pub stats: PathBuf,
}

pub fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => cmd_run(&args),
        Command::Compare(args) => cmd_compare(&args),
        Command::Affinity(args) => cmd_affinity(&args.stats),
    }
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(&args.config)
        .with_context(|| format!("reading config {}", args.config.display()))?;
    let mut cfg = ExperimentConfig::from_text(&text)
        .with_context(|| format!("in config {}", args.config.display()))?;
    cfg.apply_overrides(args.set.iter().map(String::as_str))
        .context("in --set overrides")?;
    Ok(cfg)
}

pub const ROUNDS_FILE: &str = "rounds.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const PARTITION_FILE: &str = "partition.csv";
pub const WEIGHTS_FILE: &str = "weights.csv";

/// Runs one experiment into its own directory under `out`. Result files are
/// only written once the experiment has finished successfully.
fn run_one(cfg: &ExperimentConfig, out: &Path, dump_weights: bool) -> Result<MetricsLog> {
    let dir = run_dir(out, cfg);
    let manifest = RunManifest::start(&dir, cfg, vec![cfg.seed])?;
    log::info!("{} seed {} -> {}", cfg.strategy, cfg.seed, dir.display());
    let outcome = run_experiment_with(cfg, RunOptions { dump_weights })
        .map_err(anyhow::Error::from)
        .and_then(|log| write_results(&dir, &log, dump_weights).map(|files| (log, files)));
    match outcome {
        Ok((log, files)) => {
            manifest.finish(files)?;
            Ok(log)
        }
        Err(e) => {
            manifest.fail(&e)?;
            Err(e)
        }
    }
}

fn write_results(dir: &Path, log: &MetricsLog, dump_weights: bool) -> Result<Vec<String>> {
    let mut files = vec![
        (ROUNDS_FILE, log.rounds_csv()),
        (SUMMARY_FILE, log.summary_csv()),
        (PARTITION_FILE, heatmap_csv(&log.stats)),
    ];
    if dump_weights {
        files.push((WEIGHTS_FILE, weights_csv(&log.weights)));
    }
    for (name, body) in &files {
        fs::write(dir.join(name), body).with_context(|| format!("writing {name}"))?;
    }
    Ok(files.into_iter().map(|(n, _)| n.to_string()).collect())
}

pub fn cmd_run(args: &RunArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let log = run_one(&cfg, &args.common.out, args.common.dump_weights)?;
    log::info!("done: last-10 accuracy {:.4}", log.summary.last_avg);
    Ok(())
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub strategy: Strategy,
    pub n_seeds: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
}

pub fn comparison_rows(results: &[(Strategy, f64)], order: &[Strategy]) -> Vec<ComparisonRow> {
    order
        .iter()
        .map(|&s| {
            let xs: Vec<f64> = results.iter().filter(|r| r.0 == s).map(|r| r.1).collect();
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let std = if xs.len() > 1 {
                (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            ComparisonRow {
                strategy: s,
                n_seeds: xs.len(),
                mean,
                std,
            }
        })
        .collect()
}

pub const COMPARISON_HEADER: &str = "strategy,n_seeds,mean_last10_acc,std_last10_acc";

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = format!("{COMPARISON_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{:.6},{:.6}",
            r.strategy, r.n_seeds, r.mean, r.std
        )
        .unwrap();
    }
    out
}

pub fn cmd_compare(args: &CompareArgs) -> Result<()> {
    let base = load_config(&args.common)?;
    if args.seeds.is_empty() || args.strategies.is_empty() {
        bail!("need at least one strategy and one seed");
    }
    let strategies = args
        .strategies
        .iter()
        .map(|s| s.parse::<Strategy>())
        .collect::<Result<Vec<_>, _>>()?;

    let arms: Vec<ExperimentConfig> = strategies
        .iter()
        .flat_map(|&s| {
            let base = &base;
            args.seeds.iter().map(move |&seed| ExperimentConfig {
                strategy: s,
                seed,
                ..base.clone()
            })
        })
        .collect();
    let results = arms
        .par_iter()
        .map(|cfg| {
            run_one(cfg, &args.common.out, args.common.dump_weights)
                .with_context(|| format!("arm strategy={} seed={}", cfg.strategy, cfg.seed))
                .map(|log| (cfg.strategy, log.summary.last_avg))
        })
        .collect::<Result<Vec<_>>>()?;

    let rows = comparison_rows(&results, &strategies);
    let table = comparison_csv(&rows);
    let path = args
        .common
        .out
        .join(format!("comparison-{}.csv", config_hash(&base)));
    fs::write(&path, &table).with_context(|| format!("writing {}", path.display()))?;
    log::info!("comparison written to {}", path.display());
    Ok(())
}

pub fn cmd_affinity(stats_path: &Path) -> Result<()> {
    let text = fs::read_to_string(stats_path)
        .with_context(|| format!("reading {}", stats_path.display()))?;
    let stats = parse_stats_table(&text).with_context(|| format!("in {}", stats_path.display()))?;
    let k = stats[0].n_classes();
    let raw = raw_affinity_table(&stats, k)?;
    let matrix = build_affinity_matrix(&stats, k)?;
    print!("{}", render_affinity(&raw, &matrix));
    Ok(())
}

fn render_affinity(raw: &[Vec<Option<f64>>], matrix: &dapfl::AffinityMatrix) -> String {
    let n = matrix.n_clients();
    let mut out = String::from("raw affinity (- = no overlap)\n");
    for (i, row) in raw.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(j, v)| match v {
                _ if i == j => format!("{:>8}", "."),
                Some(x) => format!("{x:>8.4}"),
                None => format!("{:>8}", "-"),
            })
            .collect();
        writeln!(out, "{i:>4} {}", cells.join("")).unwrap();
    }
    out.push_str("normalized affinity\n");
    for i in 0..n {
        let cells: String = matrix.row(i).iter().map(|v| format!("{v:>8.4}")).collect();
        writeln!(out, "{i:>4} {cells}").unwrap();
    }
    out.push_str("top-3 peers\n");
    for i in 0..n {
        let peers: Vec<String> = matrix
            .top_peers(i, 3)
            .into_iter()
            .map(|(j, v)| format!("{j}:{v:.4}"))
            .collect();
        writeln!(out, "{i:>4} {}", peers.join(" ")).unwrap();
    }
    out
}
