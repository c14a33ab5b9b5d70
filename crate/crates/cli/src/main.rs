//! Command-line driver: synthetic log generation, pipeline runs, the
//! verification suite and budget reporting.
//!
//! Exit codes: 0 success, 1 input or configuration error, 2 invariant or
//! verification failure.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use symtrends_core::anonymize::ledger_report;
use symtrends_core::config::PipelineConfig;
use symtrends_core::error::{Error, Result};
use symtrends_core::ingest::{load_query_log, RegionHierarchy, SymptomLexicon};
use symtrends_core::pipeline::{planned_ledger, run_pipeline};
use symtrends_core::synth::{generate_log, write_log_csv, SynthParams};
use symtrends_core::verify::run_verification;

#[derive(Parser)]
#[command(
    name = "symtrends",
    version,
    about = "Differentially private search-trends aggregation pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic query log.
    Synth {
        /// Pipeline config supplying the hierarchy and lexicon paths.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        users: u32,
        #[arg(long)]
        days: u32,
        #[arg(long)]
        seed: u64,
        /// Output path; defaults to the config's log path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Mean queries per user per day.
        #[arg(long, default_value_t = 3.0)]
        rate: f64,
        /// Probability that a query is a symptom search.
        #[arg(long, default_value_t = 0.4)]
        symptom_propensity: f64,
        /// Probability that a query is issued away from the home county.
        #[arg(long, default_value_t = 0.05)]
        travel_prob: f64,
        /// First day of the log (YYYY-MM-DD).
        #[arg(long, default_value = "2020-02-03")]
        start_date: String,
    },
    /// Run the pipeline: ingest, bound, aggregate, anonymize, report.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the master seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Restrict to a subset of granularity levels, e.g. `--levels 0,2`.
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<u8>>,
        /// Also dump raw per-user intermediates under <output_dir>/debug.
        /// These cross the privacy boundary; never publish them.
        #[arg(long)]
        debug_unsafe: bool,
    },
    /// Sensitivity, sampler and empirical-epsilon verification suite.
    Verify {
        #[arg(long)]
        config: PathBuf,
        /// Seed for the statistical checks (default: the config seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the epsilon budget ledger for a configuration as CSV.
    BudgetReport {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    match dispatch() {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            let mut source = std::error::Error::source(&err);
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn dispatch() -> Result<ExitCode> {
    match Cli::parse().command {
        Command::Synth {
            config,
            users,
            days,
            seed,
            out,
            rate,
            symptom_propensity,
            travel_prob,
            start_date,
        } => {
            let config = PipelineConfig::from_toml_path(&config)?;
            let hierarchy = RegionHierarchy::from_csv_path(&config.hierarchy_path)?;
            let lexicon = SymptomLexicon::from_csv_path(&config.lexicon_path)?;
            let params = SynthParams {
                users,
                days,
                start_date: start_date.parse().map_err(|_| {
                    Error::InvalidConfig(format!("start date `{start_date}` is not YYYY-MM-DD"))
                })?,
                seed,
                queries_per_user_day: rate,
                symptom_propensity,
                travel_prob,
            };
            let rows = generate_log(&params, &hierarchy, &lexicon)?;
            let out_path = out.unwrap_or_else(|| config.log_path.clone());
            if let Some(parent) = out_path.parent() {
                fs::create_dir_all(parent).map_err(|source| Error::Io {
                    path: parent.to_owned(),
                    source,
                })?;
            }
            let file = fs::File::create(&out_path).map_err(|source| Error::Io {
                path: out_path.clone(),
                source,
            })?;
            write_log_csv(&rows, file)?;
            println!("wrote {} rows to {}", rows.len(), out_path.display());
            Ok(ExitCode::SUCCESS)
        }

        Command::Run {
            config,
            seed,
            levels,
            debug_unsafe,
        } => {
            let mut config = PipelineConfig::from_toml_path(&config)?;
            config.apply_overrides(seed, levels.as_deref(), debug_unsafe)?;
            let summary = run_pipeline(&config)?;
            println!("config hash: {}", summary.config_hash);
            println!(
                "records: {} total, {} kept, {} dropped; plan entries: {}",
                summary.records_total,
                summary.kept_rows,
                summary.dropped_rows,
                summary.plan_entries
            );
            println!(
                "epsilon: symptom {:.6} + normalization {:.6} = {:.6} (delta = 0)",
                summary.ledger.symptom_total,
                summary.ledger.normalization_total,
                summary.ledger.total
            );
            for file in [
                &summary.files.data,
                &summary.files.diagnostics,
                &summary.files.plan,
                &summary.files.ledger,
                &summary.files.metadata,
            ] {
                println!("wrote {}", file.display());
            }
            Ok(ExitCode::SUCCESS)
        }

        Command::Verify { config, seed } => {
            let config = PipelineConfig::from_toml_path(&config)?;
            let hierarchy = RegionHierarchy::from_csv_path(&config.hierarchy_path)?;
            let lexicon = SymptomLexicon::from_csv_path(&config.lexicon_path)?;
            let log = match load_query_log(&config.log_path, &lexicon, &hierarchy) {
                Ok(events) => Some(events),
                // A missing log is fine for verification; the bundled
                // fixture and the statistical checks still run.
                Err(Error::Io { .. }) => None,
                Err(other) => return Err(other),
            };
            let report = run_verification(
                log.as_deref(),
                &hierarchy,
                &config.shares,
                seed.unwrap_or(config.master_seed),
            )?;
            print!("{report}");
            if report.pass() {
                println!("verification: PASS");
                Ok(ExitCode::SUCCESS)
            } else {
                println!("verification: FAIL");
                Ok(ExitCode::from(2))
            }
        }

        Command::BudgetReport { config } => {
            let config = PipelineConfig::from_toml_path(&config)?;
            let report = ledger_report(&planned_ledger(&config)?);
            let mut buffer = Vec::new();
            report.write_csv(&mut buffer)?;
            print!("{}", String::from_utf8_lossy(&buffer));
            Ok(ExitCode::SUCCESS)
        }
    }
}
