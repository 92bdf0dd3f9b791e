//! `apex`: run, compare and plot multi-objective flow-policy experiments.

use std::path::PathBuf;
use std::process::ExitCode;

use apex_core::harness::{self, Figure, RunConfig};
use apex_core::{pareto, Error};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "apex", version, about = "Adaptive multi-objective GRPO on a toy flow-matching policy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write its run directory.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        /// Mode override (apex, static, wo_dsan, only_lp, wo_lp, wo_cp, wo_pn, specialist_<k>).
        #[arg(long)]
        mode: Option<String>,
        /// Continue the run in --out from its latest checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Windowed-HV comparison of finished runs.
    Compare {
        runs: Vec<PathBuf>,
        /// Index of the run the deltas are taken against.
        #[arg(long, default_value_t = 0)]
        full: usize,
        #[arg(long)]
        json: bool,
    },
    /// Delimited-text series for one figure.
    EmitPlotData {
        runs: Vec<PathBuf>,
        /// dynamics, factors, hv, variance or stability.
        #[arg(long)]
        figure: String,
        #[arg(long)]
        out: PathBuf,
        /// Trailing moving-average window.
        #[arg(long)]
        smooth: Option<usize>,
    },
    /// Parse a configuration and print every effective key.
    ValidateConfig {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Exact hypervolume of points in a delimited file.
    Hv {
        points: PathBuf,
        /// Comma-separated reference point.
        #[arg(long)]
        reference: String,
    },
}

fn load_config(path: Option<&PathBuf>) -> apex_core::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_file(p),
        None => Ok(RunConfig::default()),
    }
}

fn execute(cli: Cli) -> apex_core::Result<()> {
    match cli.command {
        Command::Run { config, seed, out, steps, mode, resume } => {
            let summary = if resume {
                harness::resume(&out, None, steps)?
            } else {
                let mut cfg = load_config(config.as_ref())?;
                if let Some(s) = seed {
                    cfg.seed = s;
                }
                if let Some(s) = steps {
                    cfg.steps = s;
                }
                if let Some(m) = mode {
                    cfg.mode = m.parse()?;
                }
                cfg.validate()?;
                harness::run(cfg, &out)?
            };
            println!(
                "{} seed {}: {} steps, final HV {:.4e}, final means {:?}",
                summary.mode, summary.seed, summary.steps, summary.final_hv, summary.final_means
            );
        }
        Command::Compare { runs, full, json } => {
            let report = harness::compare(&runs, full)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", report.to_text());
            }
        }
        Command::EmitPlotData { runs, figure, out, smooth } => {
            let figure: Figure = figure.parse()?;
            for p in harness::emit_plot_data(&runs, figure, &out, smooth)? {
                println!("{}", p.display());
            }
        }
        Command::ValidateConfig { config } => {
            print!("{}", load_config(config.as_ref())?.snapshot());
        }
        Command::Hv { points, reference } => {
            let reference: Vec<f64> = reference
                .split(',')
                .map(|s| s.trim().parse::<f64>().map_err(|e| Error::config(format!("reference {s:?}: {e}"))))
                .collect::<apex_core::Result<_>>()?;
            let (_, pts) = pareto::read_points(std::fs::File::open(&points)?)?;
            println!("{}", pareto::hypervolume_exact(&pts, &reference)?);
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Io(_) | Error::Json(_) => 1,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
