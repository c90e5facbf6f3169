use std::path::PathBuf;
use std::process::ExitCode;

use aclf::baselines::ControllerVariant;
use aclf_lab::config::default_table;
use aclf_lab::{build_runs, parse_config, run_experiment, ConfigError};
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

/// Simulation laboratory for adaptive CLF-constrained MPC.
///
/// Exit codes: 0 success, 1 internal error, 2 configuration error.
#[derive(Parser)]
#[command(name = "aclf-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every scenario of a configuration and write results
    Run {
        config: PathBuf,
        /// Output directory (overrides experiment.output_dir)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Scenarios run concurrently (overrides experiment.jobs)
        #[arg(long)]
        jobs: Option<usize>,
        /// Base seed (overrides experiment.seed)
        #[arg(long)]
        seed: Option<u64>,
        /// Override a key: section.key=value or scenario.NAME.key=value (NAME may be *)
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Parse and check a configuration, then print it with all defaults filled in
    Validate {
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// List the controller variants
    ListVariants,
}

fn quoted(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn load(config: &PathBuf, overrides: &[String]) -> Result<aclf_lab::ExperimentConfig, ConfigError> {
    let cfg = parse_config(config, overrides)?;
    build_runs(&cfg)?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let command = Cli::command().after_long_help(default_table());
    let cli = match Cli::from_arg_matches(&command.get_matches()) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match cli.command {
        Command::ListVariants => {
            for v in ControllerVariant::ALL {
                println!("{:<28}{}", v.name(), v.description());
            }
            ExitCode::SUCCESS
        }
        Command::Validate { config, set } => match load(&config, &set) {
            Ok(cfg) => {
                print!("{}", cfg.to_file_string());
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
        },
        Command::Run {
            config,
            out,
            jobs,
            seed,
            mut set,
        } => {
            if let Some(o) = out {
                set.push(format!("experiment.output_dir={}", quoted(&o.display().to_string())));
            }
            if let Some(j) = jobs {
                set.push(format!("experiment.jobs={j}"));
            }
            if let Some(s) = seed {
                set.push(format!("experiment.seed={s}"));
            }
            let cfg = match load(&config, &set) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            match run_experiment(&cfg) {
                Ok(report) => {
                    if let Ok(text) = std::fs::read_to_string(report.out_dir.join("summary.txt")) {
                        print!("{text}");
                    }
                    if let Ok(text) = std::fs::read_to_string(report.out_dir.join("sweep.txt")) {
                        print!("\n{text}");
                    }
                    println!("\nresults written to {}", report.out_dir.display());
                    if report.internal_errors.is_empty() {
                        ExitCode::SUCCESS
                    } else {
                        for e in &report.internal_errors {
                            eprintln!("internal error: {e}");
                        }
                        ExitCode::from(1)
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(1)
                }
            }
        }
    }
}
