use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use feddp::bounds::BoundMechanism;
use feddp::error::FedDpError;
use feddp::harness::{
    format_plan, plan, run_experiment, sweep, write_results, ExperimentConfig, SweepAxis,
};
use feddp::validation::run_validation_battery;

const EXIT_CONFIG: u8 = 2;
const EXIT_VALIDATION: u8 = 3;
const EXIT_RUNTIME: u8 = 4;

#[derive(Parser)]
#[command(name = "feddp", about = "Federated SGD with client-side DP and (T*, b*) planning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment (repeated trials) from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "results")]
        out: PathBuf,
        /// Override the number of repeated trials.
        #[arg(long)]
        repeat: Option<usize>,
        /// Override the base seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one experiment per value of a swept axis.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        axis: SweepAxisArg,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Evaluate the bound minimizers and print every candidate (T, b).
    Plan {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate the bound constants from the configured dataset/partition.
    Estimate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        local_steps: usize,
        #[arg(long, default_value_t = 0.5)]
        local_learning_rate: f64,
        #[arg(long, default_value_t = 0.05)]
        convergence_tol: f64,
    },
    /// Run the oracle/analytic agreement checks; nonzero exit on failure.
    Validate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SweepAxisArg {
    B,
    T,
    Epsilon,
    DataFraction,
}

impl From<SweepAxisArg> for SweepAxis {
    fn from(axis: SweepAxisArg) -> Self {
        match axis {
            SweepAxisArg::B => SweepAxis::B,
            SweepAxisArg::T => SweepAxis::T,
            SweepAxisArg::Epsilon => SweepAxis::Epsilon,
            SweepAxisArg::DataFraction => SweepAxis::DataFraction,
        }
    }
}

fn exit_code_for(err: &FedDpError) -> u8 {
    match err {
        FedDpError::InvalidConfig(_) | FedDpError::InvalidParameter(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn run(cli: Cli) -> Result<(), (u8, String)> {
    let fail = |e: FedDpError| (exit_code_for(&e), e.to_string());
    match cli.command {
        Command::Train {
            config,
            out,
            repeat,
            seed,
        } => {
            let mut config = ExperimentConfig::from_file(&config).map_err(fail)?;
            if let Some(repeat) = repeat {
                config.repeat = repeat;
            }
            if let Some(seed) = seed {
                config.seed = seed;
            }
            config.validate().map_err(fail)?;
            let results = run_experiment(&config).map_err(fail)?;
            write_results(&results, &out).map_err(fail)?;
            println!(
                "b = {}, T = {}, mean final loss {:.6}, mean final acc {}",
                results.summary.resolved_b,
                results.summary.resolved_t,
                results.summary.mean_final_loss,
                results
                    .summary
                    .mean_final_acc
                    .map(|a| format!("{a:.4}"))
                    .unwrap_or_else(|| "n/a".into())
            );
            Ok(())
        }
        Command::Sweep {
            config,
            axis,
            values,
            out,
        } => {
            let config = ExperimentConfig::from_file(&config).map_err(fail)?;
            let summary = sweep(&config, axis.into(), &values, Some(&out)).map_err(fail)?;
            println!("value\tmean_loss\tstd_loss\tmean_acc");
            for row in &summary.rows {
                println!(
                    "{}\t{:.6}\t{:.6}\t{}",
                    row.value,
                    row.mean_final_loss,
                    row.std_final_loss,
                    row.mean_final_acc
                        .map(|a| format!("{a:.4}"))
                        .unwrap_or_else(|| "n/a".into())
                );
            }
            for failure in &summary.failures {
                eprintln!("failed: {failure}");
            }
            if summary.rows.is_empty() {
                return Err((EXIT_RUNTIME, "every sweep value failed".into()));
            }
            Ok(())
        }
        Command::Plan { config, out } => {
            let config = ExperimentConfig::from_file(&config).map_err(fail)?;
            let (train, _) = config.load_data().map_err(fail)?;
            let partition = config.build_partition(&train).map_err(fail)?;
            let constants = config.resolve_constants(&partition).map_err(fail)?;
            let mechanism = BoundMechanism::from_kind(config.mechanism.kind)
                .ok_or((EXIT_CONFIG, "plan needs a DP mechanism".to_string()))?;
            let plan_file = plan(mechanism, &constants, config.t_cap).map_err(fail)?;
            print!("{}", format_plan(&plan_file));
            if let Some(out) = out {
                let json = serde_json::to_string_pretty(&plan_file)
                    .map_err(|e| (EXIT_RUNTIME, e.to_string()))?;
                std::fs::write(&out, json).map_err(|e| (EXIT_RUNTIME, e.to_string()))?;
            }
            Ok(())
        }
        Command::Estimate {
            config,
            out,
            local_steps,
            local_learning_rate,
            convergence_tol,
        } => {
            let config = ExperimentConfig::from_file(&config).map_err(fail)?;
            let (train, _) = config.load_data().map_err(fail)?;
            let partition = config.build_partition(&train).map_err(fail)?;
            let probe = config
                .probe_config(local_steps, local_learning_rate, convergence_tol)
                .map_err(fail)?;
            let constants =
                feddp::bounds::estimate_constants(&partition, &probe).map_err(fail)?;
            let json = serde_json::to_string_pretty(&constants)
                .map_err(|e| (EXIT_RUNTIME, e.to_string()))?;
            match out {
                Some(path) => std::fs::write(&path, json)
                    .map_err(|e| (EXIT_RUNTIME, e.to_string()))?,
                None => println!("{json}"),
            }
            Ok(())
        }
        Command::Validate { seed } => {
            let outcomes = run_validation_battery(seed).map_err(fail)?;
            let mut all_passed = true;
            for outcome in &outcomes {
                println!(
                    "{} {}: {}",
                    if outcome.passed { "PASS" } else { "FAIL" },
                    outcome.name,
                    outcome.detail
                );
                all_passed &= outcome.passed;
            }
            if all_passed {
                Ok(())
            } else {
                Err((EXIT_VALIDATION, "validation checks failed".into()))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, message)) => {
            eprintln!("error: {message}");
            ExitCode::from(code)
        }
    }
}
