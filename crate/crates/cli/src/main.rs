use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nfbench_core::sweep::{self, ExecuteOptions, RunRecord, RunStatus, SweepConfig};

/// Normalizing-flow benchmark sweeps.
#[derive(Parser)]
#[command(name = "nfbench", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the runs a config expands to.
    Plan {
        #[arg(long)]
        config: PathBuf,
        /// Also write the plan as JSON to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every run, writing one record per run.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        /// Skip runs whose record already exists.
        #[arg(long)]
        resume: bool,
    },
    /// Tabulate the records under a run directory.
    Report {
        /// Directory given to `run --out`.
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<ExitCode, Box<dyn std::error::Error>> {
    match command {
        Command::Plan { config, out } => {
            let runs = sweep::plan(&SweepConfig::load(&config)?);
            for r in &runs {
                let flag = r.flagged.as_deref().map(|f| format!("  [flagged: {f}]")).unwrap_or_default();
                println!("{}  seed={}{flag}", r.id, r.seed);
            }
            println!("{} runs", runs.len());
            if let Some(path) = out {
                let json = serde_json::to_vec_pretty(&runs)?;
                std::fs::write(&path, json).map_err(|e| format!("{}: {e}", path.display()))?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Run { config, out, parallel, resume } => {
            let runs = sweep::plan(&SweepConfig::load(&config)?);
            let records = sweep::execute(&runs, &ExecuteOptions { out_dir: out, parallelism: parallel, resume })?;
            let failed: Vec<_> = records
                .iter()
                .filter_map(|r| match &r.status {
                    RunStatus::Failed { error } => Some((r.spec.id.as_str(), error.as_str())),
                    RunStatus::Succeeded => None,
                })
                .collect();
            println!("{} runs, {} failed", records.len(), failed.len());
            for (id, error) in &failed {
                println!("  {id}: {error}");
            }
            Ok(if failed.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(2) })
        }
        Command::Report { records, out } => {
            let all = RunRecord::load_all(&records)?;
            let files = sweep::report(&all, &out)?;
            print!("{}", std::fs::read_to_string(&files.summary)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}
