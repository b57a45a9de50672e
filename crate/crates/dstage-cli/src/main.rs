use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use dstage_cli::config::{FileConfig, ScenarioKind};
use dstage_cli::csvout::{write_records, write_summary};
use dstage_cli::driver::{run_cell, run_matrix, Calibrator};

/// Duplicate-aware scheduling simulator: run scheme comparisons over staged
/// cluster pipelines and emit plot-ready CSV.
#[derive(Parser)]
#[command(name = "dstage", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one (scenario, scheme, load, seed) cell and write per-request
    /// records.
    Run {
        /// data-parallel | network | nfv
        #[arg(long)]
        scenario: String,
        /// single | cloning | cloning-prio | das | hedged[:DUR] | appto[:DUR]
        /// | tied, plus hedged-low / hedged-high calibration presets.
        #[arg(long)]
        scheme: String,
        /// Offered primary load in (0, 1).
        #[arg(long)]
        load: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Request count (overrides config/preset).
        #[arg(long)]
        requests: Option<usize>,
        /// TOML config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Records CSV path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a schemes x loads x seeds matrix and write the summary table.
    Matrix {
        #[arg(long)]
        scenario: String,
        /// Comma-separated scheme list.
        #[arg(long, value_delimiter = ',')]
        schemes: Vec<String>,
        /// Comma-separated load list.
        #[arg(long, value_delimiter = ',')]
        loads: Vec<f64>,
        /// Comma-separated seed list.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        requests: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a single-copy calibration at the given load and print its p95
    /// (the hedged/appto threshold default).
    Calibrate {
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        load: f64,
        /// Calibrate without the noise model (aggressive preset).
        #[arg(long, default_value_t = false)]
        clean: bool,
        #[arg(long)]
        requests: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<(FileConfig, PathBuf)> {
    match path {
        Some(p) => {
            let base = p.parent().unwrap_or(std::path::Path::new(".")).to_path_buf();
            Ok((FileConfig::load(p)?, base))
        }
        None => Ok((FileConfig::default(), PathBuf::from("."))),
    }
}

fn resolve_scenario(cli_value: &str, file: &FileConfig) -> Result<ScenarioKind> {
    if !cli_value.is_empty() {
        return ScenarioKind::parse(cli_value);
    }
    match &file.scenario {
        Some(s) => ScenarioKind::parse(s),
        None => ScenarioKind::parse(cli_value),
    }
}

fn out_writer(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            scenario,
            scheme,
            load,
            seed,
            requests,
            config,
            out,
        } => {
            let (file, base) = load_config(&config)?;
            let kind = resolve_scenario(&scenario, &file)?;
            let mut calibrator = Calibrator::new();
            let cell = run_cell(kind, &scheme, &file, &base, load, seed, requests, &mut calibrator)?;
            write_records(out_writer(&out)?, &cell.output.records)?;
            eprintln!(
                "{} {scheme} load {load} seed {seed}: {} requests, {}/{} completed, stable {}, residual {}",
                kind.token(),
                cell.output.totals.offered,
                cell.output.totals.completed,
                cell.output.totals.offered,
                cell.verdict.stable,
                cell.output.residual_jobs,
            );
            Ok(())
        }
        Command::Matrix {
            scenario,
            schemes,
            loads,
            seeds,
            requests,
            config,
            out,
        } => {
            let (file, base) = load_config(&config)?;
            let kind = resolve_scenario(&scenario, &file)?;
            anyhow::ensure!(!schemes.is_empty(), "--schemes is empty");
            anyhow::ensure!(!loads.is_empty(), "--loads is empty");
            anyhow::ensure!(!seeds.is_empty(), "--seeds is empty");
            let (rows, failures) =
                run_matrix(kind, &schemes, &loads, &seeds, &file, &base, requests);
            write_summary(out_writer(&out)?, &rows)?;
            for (cell, err) in &failures {
                eprintln!("cell {cell} failed: {err:#}");
            }
            anyhow::ensure!(failures.is_empty(), "{} cell(s) failed", failures.len());
            Ok(())
        }
        Command::Calibrate {
            scenario,
            load,
            clean,
            requests,
            config,
        } => {
            let (file, base) = load_config(&config)?;
            let kind = resolve_scenario(&scenario, &file)?;
            let mut calibrator = Calibrator::new();
            let p95 = calibrator.p95(kind, &file, &base, load, clean, requests)?;
            println!("{p95}");
            Ok(())
        }
    }
}
