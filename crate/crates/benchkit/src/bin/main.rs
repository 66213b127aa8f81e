//! Benchmark CLI: generate synthetic data, run the streaming scenario,
//! and re-render reports from CSV.

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use streamkv_benchkit::{gen_dataset, run_scenario, LatencyReport, Mode, ScenarioConfig};
use streamkv_engine::{Engine, ServiceConfig};

#[derive(Parser)]
#[command(name = "streamkv-bench", about = "Streaming inference benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Stateful,
    RequestDriven,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic OHLCV dataset, one record per line.
    GenerateData {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 925)]
        count: usize,
        /// Output path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the streaming scenario and emit a CSV report plus a summary.
    Run {
        #[arg(long, value_enum, default_value = "stateful")]
        mode: ModeArg,
        #[arg(long, default_value_t = 100)]
        init: usize,
        #[arg(long, default_value_t = 15)]
        iterations: usize,
        #[arg(long, default_value_t = 55)]
        samples_per_iter: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        max_tokens: usize,
        /// Allow ready-position speculative exits.
        #[arg(long)]
        speculative: bool,
        /// Register these questions as flash queries.
        #[arg(long)]
        flash: Vec<String>,
        /// Service config TOML; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// CSV output path.
        #[arg(long, default_value = "report.csv")]
        csv: PathBuf,
    },
    /// Parse a CSV report and print its summary.
    Report {
        #[arg(long)]
        csv: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenerateData { seed, count, out } => {
            let mut text = String::new();
            for record in gen_dataset(seed, count) {
                text.push_str(&record.to_record_string());
                text.push('\n');
            }
            match out {
                Some(path) => {
                    std::fs::write(&path, text)
                        .with_context(|| format!("writing {}", path.display()))?;
                    eprintln!("wrote {count} records");
                }
                None => print!("{text}"),
            }
        }
        Command::Run {
            mode,
            init,
            iterations,
            samples_per_iter,
            seed,
            max_tokens,
            speculative,
            flash,
            config,
            csv,
        } => {
            let service = match config {
                Some(path) => ServiceConfig::from_path(&path)?,
                None => ServiceConfig::default(),
            };
            let engine = Engine::new(service)?;
            let cfg = ScenarioConfig {
                mode: match mode {
                    ModeArg::Stateful => Mode::Stateful,
                    ModeArg::RequestDriven => Mode::RequestDriven,
                },
                init_samples: init,
                iterations,
                samples_per_iter,
                data_seed: seed,
                max_tokens,
                allow_speculative: speculative,
                fixed_query: None,
                flash_questions: flash,
            };
            eprintln!(
                "running {} scenario: {} init + {} x {} samples",
                cfg.mode.name(),
                cfg.init_samples,
                cfg.iterations,
                cfg.samples_per_iter
            );
            let report = run_scenario(&engine, &cfg)?;
            std::fs::write(&csv, report.to_csv())
                .with_context(|| format!("writing {}", csv.display()))?;
            print!("{}", report.render_summary());
            eprintln!("csv written to {}", csv.display());
        }
        Command::Report { csv } => {
            let text = std::fs::read_to_string(&csv)
                .with_context(|| format!("reading {}", csv.display()))?;
            let report = LatencyReport::from_csv(&text)?;
            print!("{}", report.render_summary());
        }
    }
    Ok(())
}
