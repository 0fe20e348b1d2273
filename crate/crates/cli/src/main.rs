use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedsched::harness::{self, ExperimentConfig, HarnessError};

/// Wireless federated learning experiments with latency-aware scheduling.
#[derive(Parser)]
#[command(name = "fedsched", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run all trials of one configuration and write history.csv and summary.csv.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `master_seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `policy`, e.g. FC, FixedN(5), RD(5), PF(5), CS-L, AS-H.
        #[arg(long)]
        policy: Option<String>,
        /// Overrides `trials`.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Run one configuration per value of a key and write sweep.csv.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// One of phi, R_m, policy, error_rel_std, fixed_n.
        #[arg(long)]
        key: String,
        /// Comma-separated values. Parenthesized commas stay inside a value.
        #[arg(long)]
        values: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the default configuration.
    Defaults,
}

/// Splits on commas that are not inside parentheses.
fn split_values(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0usize;
    let mut cur = String::new();
    for ch in s.chars() {
        match ch {
            '(' => depth += 1,
            ')' => depth = depth.saturating_sub(1),
            ',' if depth == 0 => {
                out.push(std::mem::take(&mut cur).trim().to_string());
                continue;
            }
            _ => {}
        }
        cur.push(ch);
    }
    out.push(cur.trim().to_string());
    out.retain(|v| !v.is_empty());
    out
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Run { config, out, seed, policy, trials } => {
            let mut cfg = harness::read_config(&config)?;
            if let Some(s) = seed {
                cfg.master_seed = s;
            }
            if let Some(p) = policy {
                cfg.set("policy", &p)?;
            }
            if let Some(t) = trials {
                cfg.trials = t;
            }
            cfg.validate()?;
            let outcomes = harness::run(&cfg, &out)?;
            for o in &outcomes {
                let acc = o.history.best_accuracy().map_or("-".to_string(), |a| format!("{a:.4}"));
                eprintln!(
                    "trial {}: {} rounds, best accuracy {acc}, best loss {:.6}",
                    o.trial,
                    o.rounds(),
                    o.history.best_loss
                );
            }
        }
        Command::Sweep { config, key, values, out } => {
            let cfg = harness::read_config(&config)?;
            let values = split_values(&values);
            for p in harness::sweep(&cfg, &key, &values, &out)? {
                let acc = p.mean_best_accuracy.map_or("-".to_string(), |a| format!("{a:.4}"));
                eprintln!("{key} = {}: mean best accuracy {acc}, mean rounds {:.1}", p.value, p.mean_rounds);
            }
        }
        Command::Defaults => print!("{}", ExperimentConfig::default().to_text()),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
