use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use smoothfbo_bench::checks;
use smoothfbo_bench::config::{expand_grid, parse_file, ExperimentConfig, ParsedConfig};
use smoothfbo_bench::grid::{cells_from, run_grid, Cell};
use smoothfbo_bench::summary::{summarize_dir, SUMMARY_FILE};

#[derive(Parser)]
#[command(
    name = "smoothfbo",
    version,
    about = "Smoothed online functional bilevel optimization experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one config over its seeds.
    Run(RunArgs),
    /// Run every combination of the `grid.*` keys in a config.
    Grid(RunArgs),
    /// Rebuild the summary from the ledgers in a directory.
    Summarize {
        /// Directory holding ledger CSVs; defaults to --out.
        dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the analytic and structural checks.
    Check,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds, replacing the config's list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    /// Window override.
    #[arg(long)]
    w: Option<usize>,
}

fn out_dir(flag: Option<PathBuf>, fallback: &Path) -> PathBuf {
    std::env::var_os("SMOOTHFBO_OUT")
        .map(PathBuf::from)
        .or(flag)
        .unwrap_or_else(|| fallback.to_path_buf())
}

fn load(args: &RunArgs, allow_grid: bool) -> Result<(Vec<Cell>, PathBuf), String> {
    let text = match &args.config {
        Some(p) => fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?,
        None => String::new(),
    };
    let mut parsed: ParsedConfig = parse_file(&text).map_err(|e| e.to_string())?;
    if !allow_grid && !parsed.grid.is_empty() {
        return Err("config has grid.* keys; use the `grid` subcommand".into());
    }
    if let Some(seeds) = &args.seeds {
        parsed.base.seeds = seeds.clone();
    }
    if let Some(w) = args.w {
        parsed.base.w = w;
        parsed.grid.remove("w");
    }
    let cells = expand_grid(&parsed).map_err(|e| e.to_string())?;
    let out = out_dir(args.out.clone(), &parsed.base.out);
    Ok((cells_from(cells), out))
}

fn run(args: RunArgs, allow_grid: bool) -> ExitCode {
    let (cells, out) = match load(&args, allow_grid) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(2);
        }
    };
    match run_grid(&cells, args.parallel, &out) {
        Ok(report) => {
            let failed = report.failures();
            println!(
                "{} runs, {} failed; summary at {}",
                report.records.len(),
                failed,
                report.summary_path.display()
            );
            if failed == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => run(args, false),
        Command::Grid(args) => run(args, true),
        Command::Summarize { dir, out } => {
            let default_out = ExperimentConfig::default().out;
            let out = out_dir(out, &default_out);
            let dir = dir.unwrap_or_else(|| out.clone());
            let summary = match summarize_dir(&dir) {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(1);
                }
            };
            if let Err(e) = fs::create_dir_all(&out)
                .and_then(|_| fs::write(out.join(SUMMARY_FILE), summary.to_csv()))
            {
                eprintln!("error: writing summary: {e}");
                return ExitCode::from(1);
            }
            print!("{}", summary.to_csv());
            ExitCode::SUCCESS
        }
        Command::Check => {
            let outcomes = checks::run_all();
            for o in &outcomes {
                println!("{}", o.line());
            }
            if outcomes.iter().all(|o| o.passed) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
    }
}
