use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dcl_core::config::{parse_config, RunList, Seeds};
use dcl_core::persist::save_run;
use dcl_core::report::write_report;
use dcl_core::sim::{run_experiment, Execution};
use dcl_core::DclError;

#[derive(Parser)]
#[command(name = "dcl", version, about = "Distributed continual learning simulator")]
struct Cli {
    /// Worker threads for agent-parallel training.
    #[arg(long, env = "DCL_WORKERS", global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute every run in a config file and store the records.
    Run {
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Run seeds 0..N instead of the configured seeds.
        #[arg(long)]
        seeds: Option<u64>,
        /// Train agents one after another instead of in parallel.
        #[arg(long)]
        sequential: bool,
    },
    /// Write summary tables and plot data for a results directory.
    Report { dir: PathBuf },
    /// Parse a config file and list the runs it expands to.
    Validate { config: PathBuf },
}

enum Failure {
    Parse(String),
    Runtime(String),
}

impl From<DclError> for Failure {
    fn from(e: DclError) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn load(path: &Path) -> Result<RunList, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Parse(format!("{}: {e}", path.display())))?;
    parse_config(&text).map_err(|e| Failure::Parse(format!("{}: {e}", path.display())))
}

fn run(config: &Path, out: &Path, seeds: Option<u64>, exec: Execution) -> Result<(), Failure> {
    let list = load(config)?;
    let mut failed = 0;
    for mut cfg in list.runs {
        if let Some(n) = seeds {
            cfg.seeds = Seeds::Count(n);
        }
        cfg.validate().map_err(|e| Failure::Parse(e.to_string()))?;
        let record = run_experiment(&cfg, exec)?;
        let entry = save_run(out, &record)?;
        let s = record.summary();
        println!(
            "{}\t{}\tfinal {:.2} ± {:.2}\tauc {:.2}\tB/edge {:.0}",
            s.name, entry.config_hash, s.final_accuracy, s.final_accuracy_se, s.auc, s.budget_per_edge
        );
        for f in &record.failures {
            eprintln!("{}: seed {} aborted: {}", s.name, f.seed, f.error);
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} seed(s) aborted")));
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    match cli.command {
        Command::Run {
            config,
            out,
            seeds,
            sequential,
        } => {
            let exec = if sequential { Execution::Sequential } else { Execution::Parallel };
            run(&config, &out, seeds, exec)
        }
        Command::Report { dir } => {
            for path in write_report(&dir)? {
                println!("{}", path.display());
            }
            Ok(())
        }
        Command::Validate { config } => {
            let list = load(&config)?;
            for cfg in &list.runs {
                cfg.validate().map_err(|e| Failure::Parse(e.to_string()))?;
                println!("{}\t{}", cfg.name, cfg.hash());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Parse(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
