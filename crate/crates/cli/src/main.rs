//! `gradesync` command-line front end.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use gradesync::parallel::Execution;
use gradesync::scenario::{self, ScenarioError, ScenarioName, Settings};

const EXIT_USAGE: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Csv,
}

/// Run clock-synchronization scenarios and write their results as CSV.
#[derive(Debug, Parser)]
#[command(name = "gradesync", version)]
struct Cli {
    /// fig1-pairwise, fig2-stepsize, fig3-multihop, scaling or theory-check
    #[arg(long, required_unless_present = "report", conflicts_with = "report")]
    scenario: Option<String>,

    /// Override a preset value (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,

    /// key=value file applied before --set and --seed
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Output directory [default: out/<scenario>]
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,

    #[arg(long)]
    seed: Option<u64>,

    #[arg(long, value_enum, default_value = "csv")]
    format: Format,

    /// Run independent trials and seeds on one thread
    #[arg(long)]
    sequential: bool,

    /// Summarize existing skew CSV files instead of running a scenario
    #[arg(long, num_args = 1.., value_name = "SKEW_CSV")]
    report: Vec<PathBuf>,
}

fn run(cli: Cli) -> Result<(), ScenarioError> {
    let Format::Csv = cli.format;
    if !cli.report.is_empty() {
        print!("{}", scenario::report_summary(&cli.report)?);
        return Ok(());
    }
    let name: ScenarioName = cli.scenario.as_deref().unwrap_or_default().parse()?;
    let mut settings = Settings::preset(name);
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).map_err(|e| {
            ScenarioError::Usage(format!("cannot read config {}: {e}", path.display()))
        })?;
        settings.apply(&scenario::parse_config(&text)?)?;
    }
    let overrides = cli
        .sets
        .iter()
        .map(|s| scenario::parse_override(s))
        .collect::<Result<Vec<_>, _>>()?;
    settings.apply(&overrides)?;
    if let Some(seed) = cli.seed {
        settings.seed = seed;
    }
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    let output = scenario::run_scenario(&settings, exec)?;
    let dir = cli
        .out
        .unwrap_or_else(|| PathBuf::from("out").join(name.name()));
    output.write_to(&dir)?;
    for line in &output.report {
        println!("{line}");
    }
    for (file, _) in &output.files {
        println!("wrote {}", dir.join(file).display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                ScenarioError::Usage(_) => EXIT_USAGE,
                _ => EXIT_RUNTIME,
            })
        }
    }
}
