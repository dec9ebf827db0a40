//! Experiment CLI: loads a TOML run config, applies flag overrides, trains
//! with the selected method across seeds, and writes deterministic result
//! files (curves, final metrics, diagnostics, ledger, bucket and tuple dumps)
//! into the output directory.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use c3_core::harness::{run, Method, RunConfig};

#[derive(Parser, Debug)]
#[command(
    name = "c3",
    about = "Budget-matched counterfactual credit-assignment experiments on synthetic cooperative protocols"
)]
struct Cli {
    /// TOML config file mirroring the run-config fields; defaults apply when
    /// omitted.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Training method: c3 | mappo | magrpo | c3_wo_replay | c3_wo_loo |
    /// sft_eval_only.
    #[arg(long, value_parser = parse_method)]
    method: Option<Method>,

    /// Seed or comma-separated seed list, e.g. `--seed 0` or `--seed 0,1,2`.
    #[arg(long)]
    seed: Option<String>,

    /// Terminal evaluator calls per instance per update.
    #[arg(long)]
    budget: Option<usize>,

    /// Training epochs over the task suite.
    #[arg(long)]
    epochs: Option<usize>,

    /// Common random numbers across candidates within a bucket: on | off.
    #[arg(long, value_parser = parse_on_off)]
    crn: Option<bool>,

    /// Output directory; one subdirectory per method and seed.
    #[arg(long, default_value = "c3_out")]
    out: PathBuf,

    /// Worker threads for replay-level parallelism. Outputs are identical at
    /// any worker count.
    #[arg(long)]
    workers: Option<usize>,
}

fn parse_method(input: &str) -> Result<Method, String> {
    input.parse()
}

fn parse_seeds(input: &str) -> Result<Vec<u64>, String> {
    input
        .split(',')
        .map(|part| {
            part.trim()
                .parse::<u64>()
                .map_err(|e| format!("bad seed {part:?}: {e}"))
        })
        .collect()
}

fn parse_on_off(input: &str) -> Result<bool, String> {
    match input {
        "on" => Ok(true),
        "off" => Ok(false),
        other => Err(format!("expected on|off, got {other:?}")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    let mut config = match &cli.config {
        Some(path) => match RunConfig::load(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::FAILURE;
            }
        },
        None => RunConfig::default(),
    };
    if let Some(method) = cli.method {
        config.method = method;
    }
    if let Some(seeds) = &cli.seed {
        config.seeds = match parse_seeds(seeds) {
            Ok(s) => s,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::FAILURE;
            }
        };
    }
    if let Some(budget) = cli.budget {
        config.budget_b = budget;
    }
    if let Some(epochs) = cli.epochs {
        config.epochs = epochs;
    }
    if let Some(crn) = cli.crn {
        config.crn = crn;
    }
    if let Some(workers) = cli.workers {
        config.workers = workers;
    }

    match run(&config, &cli.out) {
        Ok(summary) => {
            for outcome in &summary.outcomes {
                let m = &outcome.metrics;
                println!(
                    "method={} seed={} greedy_return={:.4} greedy_success={:.4} pass@1={:.4} pass@{}={:.4} tse={} fidelity={:.4}",
                    summary.method,
                    outcome.seed,
                    m.greedy_return,
                    m.greedy_success,
                    m.pass_at_1,
                    config.eval.pass_k,
                    m.pass_at_k,
                    outcome.ledger.last().map_or(0, |r| r.tse_cumulative),
                    outcome.diagnostics.fidelity_rho,
                );
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
