use std::path::PathBuf;
use std::process::ExitCode;

use adp_core::config::{load_config_from, RunConfig};
use adp_core::eval::RetrievalMetrics;
use adp_core::run::{cmd_eval, cmd_schedule, cmd_train, evaluate, EpochRecord, FeatureSource};
use adp_core::schedules::format_sig;
use adp_core::selftest::{format_table, run_selftest};
use adp_core::Error;
use clap::{Args, Parser, Subcommand};

/// Aligned Divergent Pathways: train, evaluate and inspect a branched
/// self-ensemble on synthetic multi-domain identity data.
#[derive(Parser, Debug)]
#[command(name = "adp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write the metrics log and checkpoint.
    Train(Common),
    /// Evaluate a checkpoint on the held-out and held-in retrieval splits.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to load; defaults to the configured `io.checkpoint`.
        checkpoint: Option<PathBuf>,
        /// Replace model features with one-hot identity vectors.
        #[arg(long)]
        perfect_features: bool,
    },
    /// Write the per-epoch learning-rate table and print column maxima.
    Schedule(Common),
    /// Run the invariant suite and print a pass/fail table.
    Selftest {
        /// Swap in a broken Chebyshev distance (negative control).
        #[arg(long, hide = true)]
        corrupt_chebyshev: bool,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// Config file of `section.key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable, applied after the config file.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Start from the full-size preset instead of the desk-scale one.
    #[arg(long)]
    paper_defaults: bool,
    /// Output directory (same as `--set io.out_dir=DIR`).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> adp_core::Result<RunConfig> {
        let base = if self.paper_defaults {
            RunConfig::full_size()
        } else {
            RunConfig::desk()
        };
        let mut overrides = self.overrides.clone();
        if let Some(out) = &self.out {
            overrides.push(format!("io.out_dir={}", out.display()));
        }
        load_config_from(base, self.config.as_deref(), &overrides)
    }
}

fn print_epoch(r: &EpochRecord) {
    let branches: Vec<String> = r.lr_branches.iter().map(|v| format_sig(*v, 6)).collect();
    println!(
        "epoch {:>3}  total {}  ce {}  triplet {}  dcml {}  lr main {}  branches [{}]",
        r.epoch,
        format_sig(r.total, 6),
        format_sig(r.ce, 6),
        format_sig(r.triplet, 6),
        format_sig(r.dcml, 6),
        format_sig(r.lr_main, 6),
        branches.join(", ")
    );
}

fn print_metrics(label: &str, m: &RetrievalMetrics) {
    println!(
        "{label}: mAP {:.4}  Rank-1 {:.4}  ({} queries)",
        m.map,
        m.rank1,
        m.per_query_ap.len()
    );
}

fn run(cli: Cli) -> adp_core::Result<bool> {
    match cli.command {
        Command::Train(common) => {
            let config = common.load()?;
            let report = cmd_train(&config, print_epoch)?;
            println!("metrics: {}", report.metrics_csv.display());
            println!("checkpoint: {}", report.checkpoint.display());
            Ok(true)
        }
        Command::Eval {
            common,
            checkpoint,
            perfect_features,
        } => {
            let config = common.load()?;
            let report = if perfect_features {
                evaluate(&config, FeatureSource::PerfectIdentity)?
            } else {
                let path = checkpoint.unwrap_or_else(|| config.output_path(&config.io.checkpoint));
                cmd_eval(&config, &path)?
            };
            print_metrics("held-out domain", &report.heldout);
            if let Some(heldin) = &report.heldin {
                print_metrics("held-in domains", heldin);
            }
            Ok(true)
        }
        Command::Schedule(common) => {
            let config = common.load()?;
            let path = config.output_path(&config.io.schedule_csv);
            let report = cmd_schedule(&config, &path)?;
            let mut names = vec!["lr_main".to_string()];
            names.extend((1..report.maxima.len()).map(|b| format!("lr_b{b}")));
            for (name, max) in names.iter().zip(&report.maxima) {
                println!("max {name} = {}", format_sig(*max, 10));
            }
            let global = report
                .maxima
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            println!("global max = {}", format_sig(global, 10));
            println!("schedule: {}", report.path.display());
            Ok(true)
        }
        Command::Selftest { corrupt_chebyshev } => {
            adp_core::losses::inject_chebyshev_fault(corrupt_chebyshev);
            let outcomes = run_selftest();
            print!("{}", format_table(&outcomes));
            let failed: Vec<&str> = outcomes
                .iter()
                .filter(|o| !o.passed)
                .map(|o| o.name)
                .collect();
            if failed.is_empty() {
                println!("all {} checks passed", outcomes.len());
                Ok(true)
            } else {
                eprintln!("failed: {}", failed.join("; "));
                Ok(false)
            }
        }
    }
}

/// Exit codes: 0 success, 1 invalid usage, config or failed self-test,
/// 2 runtime failure (non-finite loss, I/O, checkpoint mismatch).
fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_validation() {
        1
    } else {
        2
    }
}
