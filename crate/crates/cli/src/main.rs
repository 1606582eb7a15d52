//! `sttsim`: run, sweep and trace-generation front end.
//!
//! Exit status: 0 success, 2 config error, 3 trace error, 4 invariant or
//! protocol violation, 1 anything else (I/O, report writing).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sttsim_core::config::{RunConfig, ENV_PREFIX};
use sttsim_core::metrics::write_report;
use sttsim_core::sweep::{run_sweep, Axis, Execution};
use sttsim_core::{simulate, Error, ReportFormat, Result, Trace};

#[derive(Parser)]
#[command(name = "sttsim", version, about = "STTRAM cache attack and mitigation simulator")]
#[command(after_help = "Any config key can be overridden from the environment: \
    STTSIM_<SECTION>__<KEY>=value, e.g. STTSIM_POLICY__KIND=bypass.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Json => ReportFormat::Json,
            Format::Csv => ReportFormat::Csv,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one configuration over one trace.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Trace file; defaults to the trace the config names or generates.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
    },
    /// Run every value on one axis against an unattacked baseline.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// attack_duration, policy or checkpoint_interval.
        #[arg(long)]
        axis: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        /// Run points one after another instead of on the thread pool.
        #[arg(long)]
        sequential: bool,
    },
    /// Write a synthetic trace described by the `trace.*` keys of a config.
    GenTrace {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    cfg.apply_env(std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)))?;
    Ok(cfg)
}

fn load_trace(cfg: &RunConfig, path: Option<&Path>) -> Result<Trace> {
    match path {
        Some(p) => Trace::load(p),
        None => cfg.load_trace(),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| Error::ReportWrite {
        path: path.to_path_buf(),
        source,
    })
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            trace,
            out,
            format,
        } => {
            let cfg = load_config(&config)?;
            let trace = load_trace(&cfg, trace.as_deref())?;
            let report = simulate(&cfg, &trace)?;
            write_report(&report, format.into(), &out)
        }
        Command::Sweep {
            config,
            axis,
            out,
            trace,
            format,
            sequential,
        } => {
            let axis: Axis = axis.parse()?;
            let cfg = load_config(&config)?;
            let trace = load_trace(&cfg, trace.as_deref())?;
            let exec = if sequential {
                Execution::Sequential
            } else {
                Execution::default()
            };
            let result = run_sweep(&cfg, &trace, axis, exec)?;
            fs::create_dir_all(&out).map_err(|source| Error::ReportWrite {
                path: out.clone(),
                source,
            })?;
            match format {
                Format::Csv => write_file(&out.join(format!("{axis}.csv")), &result.to_csv()?),
                Format::Json => write_file(&out.join(format!("{axis}.json")), &result.to_json()?),
            }
        }
        Command::GenTrace { spec, seed, out } => {
            let cfg = load_config(&spec)?;
            let trace = cfg.trace.synthetic.generate(seed)?;
            let header = format!(
                "synthetic trace: seed {seed}, {} requests, id {}",
                trace.len(),
                trace.id()
            );
            trace.save(&out, &header)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sttsim: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
