use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fluxmc::config::{Command, ExperimentConfig};
use fluxmc::experiments;
use fluxmc::store::{load_store, read_header};
use fluxmc::Error;

/// Monte Carlo posterior uncertainty for linear flux inversions.
#[derive(Debug, Parser)]
#[command(name = "fluxmc", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// JSON experiment configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override a config leaf by dotted path, e.g. `ensemble.members=100`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,

    /// Master seed (`ensemble.master_seed`).
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Worker threads, 0 for all cores (`ensemble.workers`).
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,

    /// Output directory (`output.dir`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Only print errors.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Two-parameter example: exact vs Monte Carlo posterior covariance.
    Toy2d,
    /// Inflation and deflation factor table.
    Factors,
    /// Synthetic inversion with functional interval timeseries.
    Synthetic,
    /// Coverage simulation for the variance and endpoint intervals.
    Coverage,
    /// Run or inspect ensembles.
    #[command(subcommand)]
    Ensemble(EnsembleCmd),
    /// Functional reports from a saved ensemble.
    Report {
        /// `.ens` file; defaults to `report.ensemble` from the config.
        ensemble: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum EnsembleCmd {
    /// Run an ensemble and save it as `ensemble.ens`.
    Run,
    /// Print the header of an `.ens` file.
    Info { path: PathBuf },
}

const EXIT_CONFIG: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;
const EXIT_NONCONVERGENCE: u8 = 3;

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_)
        | Error::InvalidArgument(_)
        | Error::Dimension { .. }
        | Error::Unsupported(_)
        | Error::InsufficientSamples { .. }
        | Error::Store(_)
        | Error::Io(_) => EXIT_CONFIG,
        Error::NonFinite(_) | Error::NotPositiveDefinite(_) | Error::AdjointMismatch { .. } => {
            EXIT_NUMERICAL
        }
        Error::EnsembleFailures { .. } | Error::NotConverged(_) => EXIT_NONCONVERGENCE,
    }
}

fn load_config(command: Command, g: &GlobalArgs) -> fluxmc::Result<ExperimentConfig> {
    let mut sets = g.sets.clone();
    if let Some(seed) = g.seed {
        sets.push(format!("ensemble.master_seed={seed}"));
    }
    if let Some(w) = g.workers {
        sets.push(format!("ensemble.workers={w}"));
    }
    if let Some(out) = &g.out {
        let s = serde_json::to_string(&out.to_string_lossy()).expect("string serializes");
        sets.push(format!("output.dir={s}"));
    }
    ExperimentConfig::load(command, g.config.as_deref(), &sets)
}

fn announce(dir: &Path) {
    log::info!("wrote results to {}", dir.display());
}

fn run(cli: Cli) -> fluxmc::Result<()> {
    let g = &cli.global;
    match cli.command {
        Cmd::Toy2d => {
            let cfg = load_config(Command::Toy2d, g)?;
            let out = experiments::toy2d(&cfg)?;
            print!("{}", out.summary());
            experiments::write_toy2d(&out, &cfg.output.dir)?;
            announce(&cfg.output.dir);
        }
        Cmd::Factors => {
            let cfg = load_config(Command::Factors, g)?;
            let rows = experiments::factors(&cfg)?;
            println!("{:>9} {:>10} {:>10}", "M", "L", "R");
            for r in &rows {
                println!("{:>9} {:>10.6} {:>10.6}", r.members, r.deflation, r.inflation);
            }
            experiments::write_factors(&rows, &cfg.output.dir)?;
            announce(&cfg.output.dir);
        }
        Cmd::Synthetic => {
            let cfg = load_config(Command::Synthetic, g)?;
            let out = experiments::synthetic(&cfg)?;
            print!("{}", out.summary());
            experiments::write_synthetic(&out, &cfg, &cfg.output.dir)?;
            announce(&cfg.output.dir);
        }
        Cmd::Coverage => {
            let cfg = load_config(Command::Coverage, g)?;
            let out = experiments::coverage(&cfg)?;
            print!("{}", out.summary());
            experiments::write_coverage(&out, &cfg.output.dir)?;
            announce(&cfg.output.dir);
        }
        Cmd::Ensemble(EnsembleCmd::Run) => {
            let cfg = load_config(Command::Ensemble, g)?;
            let run = experiments::ensemble_run(&cfg)?;
            let summary = experiments::write_ensemble_run(&run, &cfg.output.dir)?;
            println!(
                "{} members (of {}) saved to {}",
                summary.members,
                summary.requested_members,
                cfg.output.dir.join("ensemble.ens").display()
            );
            if !summary.nonconverged.is_empty() {
                println!("non-converged members: {:?}", summary.nonconverged);
            }
        }
        Cmd::Ensemble(EnsembleCmd::Info { path }) => {
            let header = read_header(&path)?;
            println!("format version {}", header.version);
            println!(
                "{}",
                serde_json::to_string_pretty(&header.metadata).expect("metadata serializes")
            );
            println!("checksum sha256:{}", header.checksum);
        }
        Cmd::Report { ensemble } => {
            let cfg = load_config(Command::Report, g)?;
            let path = ensemble
                .or_else(|| cfg.report.ensemble.clone())
                .ok_or_else(|| Error::Config("no ensemble file given".into()))?;
            let store = load_store(&path)?;
            let entries = experiments::report(&cfg, &store)?;
            println!(
                "{:<10} {:>12} {:>12} {:>12} {:>12} {:>12}",
                "label", "phi_map", "sigma_hat", "deflated_hw", "nominal_hw", "inflated_hw"
            );
            for e in &entries {
                let r = &e.report;
                println!(
                    "{:<10} {:>12} {:>12} {:>12} {:>12} {:>12}",
                    e.label,
                    experiments::sig6(r.phi_map),
                    experiments::sig6(r.sigma_hat),
                    experiments::sig6(r.deflated_interval.1 - r.phi_map),
                    experiments::sig6(r.nominal_interval.1 - r.phi_map),
                    experiments::sig6(r.inflated_interval.1 - r.phi_map)
                );
            }
            experiments::write_report(&entries, &cfg.output.dir)?;
            announce(&cfg.output.dir);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.global.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
