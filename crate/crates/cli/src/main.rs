//! Operator surface: capacity planning, correctness verification, routing
//! inspection, simulation, and parameter sweeps.
//!
//! Exit codes: 0 success, 1 check failure, 2 config error.

mod output;
mod route_check;

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

use relay_core::config::{SimMode, SystemConfig};
use relay_core::sim::{run, sweep, SweepParam};
use relay_core::trigger::compute_capacity_plan;
use relay_core::verify::verify_equivalence;

#[derive(Debug, Parser)]
#[command(name = "relay", version, about = "Prefix-cache relay serving toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// Path to the TOML config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<(SystemConfig, String), CliError> {
        match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
                let cfg = SystemConfig::from_toml(&text)
                    .map_err(|e| CliError::Config(e.to_string()))?;
                Ok((cfg, path.display().to_string()))
            }
            None => Ok((SystemConfig::default(), "<defaults>".to_string())),
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the admission capacity plan derived from the trigger section.
    Plan {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Run the cached-vs-full equivalence suite on randomized toy instances.
    Verify {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value_t = 100)]
        trials: u32,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Element width for the tolerance; defaults to the model config.
        #[arg(long)]
        elem_bytes: Option<usize>,
        /// Inject cache corruption: the check must then fail.
        #[arg(long)]
        corrupt: bool,
    },
    /// Map keys through a pool spec and report churn after removals.
    RouteCheck {
        /// Pool spec TOML file.
        #[arg(long)]
        pool: PathBuf,
        /// Number of generated sample keys.
        #[arg(long, default_value_t = 10_000)]
        keys: usize,
        /// Key list file (one key per line) instead of generated keys.
        #[arg(long)]
        key_file: Option<PathBuf>,
        /// Instance to remove for the churn diff.
        #[arg(long)]
        remove: Option<u32>,
        /// Output directory for CSV reports (stdout summary otherwise).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one simulation and write report, trial, trace, and admission CSVs.
    Simulate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value = "relay")]
        mode: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Run one simulation per parameter value and tabulate the reports.
    Sweep {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value = "relay")]
        mode: String,
        /// One of: seq-len, items, dim, layers, retrieval-slack,
        /// concurrency, offered-qps, dram-hit.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Check(String),
    Io(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Check(m) => write!(f, "check failed: {m}"),
            CliError::Io(m) => write!(f, "io error: {m}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Check(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io(_) => 1,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Plan { config, format } => cmd_plan(&config, format),
        Command::Verify {
            config,
            trials,
            seed,
            elem_bytes,
            corrupt,
        } => cmd_verify(&config, trials, seed, elem_bytes, corrupt),
        Command::RouteCheck {
            pool,
            keys,
            key_file,
            remove,
            out,
        } => route_check::cmd_route_check(&pool, keys, key_file.as_deref(), remove, out.as_deref()),
        Command::Simulate {
            config,
            mode,
            seed,
            out,
            format,
        } => cmd_simulate(&config, &mode, seed, &out, format),
        Command::Sweep {
            config,
            mode,
            param,
            values,
            seed,
            out,
        } => cmd_sweep(&config, &mode, &param, &values, seed, &out),
    }
}

fn cmd_plan(config: &ConfigArg, format: Format) -> Result<(), CliError> {
    let (cfg, _) = config.load()?;
    let plan =
        compute_capacity_plan(&cfg.trigger).map_err(|e| CliError::Config(e.to_string()))?;
    let specials = (cfg.trigger.r2 * cfg.trigger.n_instances as f64).floor() as u64;
    if specials == 0 {
        eprintln!(
            "warning: r2 * n_instances = {:.2} rounds down to zero special instances; q_max is 0",
            cfg.trigger.r2 * cfg.trigger.n_instances as f64
        );
    }
    match format {
        Format::Json => {
            println!(
                "{}",
                serde_json::to_string_pretty(&plan).map_err(|e| CliError::Io(e.to_string()))?
            );
        }
        Format::Text => {
            println!("l_max: {}", plan.l_max);
            println!("q_admit_max: {}", plan.q_admit_max);
            println!("q_max: {}", plan.q_max);
            println!(
                "binding_constraint: {}",
                match plan.binding_constraint {
                    relay_core::trigger::Binding::Hbm => "hbm",
                    relay_core::trigger::Binding::Compute => "compute",
                }
            );
        }
    }
    Ok(())
}

fn cmd_verify(
    config: &ConfigArg,
    trials: u32,
    seed: u64,
    elem_bytes: Option<usize>,
    corrupt: bool,
) -> Result<(), CliError> {
    let (cfg, _) = config.load()?;
    let elem_bytes = elem_bytes.unwrap_or(cfg.model.elem_bytes);
    if elem_bytes != 4 && elem_bytes != 8 {
        return Err(CliError::Config(format!(
            "elem_bytes must be 4 or 8, got {elem_bytes}"
        )));
    }
    let out = verify_equivalence(elem_bytes, trials, seed, corrupt)
        .map_err(|e| CliError::Config(e.to_string()))?;
    println!(
        "trials: {}  max_deviation: {:.3e}  epsilon: {:.0e}  passed: {}",
        out.trials, out.max_deviation, out.epsilon, out.passed
    );
    if !out.passed {
        return Err(CliError::Check(format!(
            "max deviation {:.3e} exceeds epsilon {:.0e}",
            out.max_deviation, out.epsilon
        )));
    }
    Ok(())
}

fn parse_mode(mode: &str) -> Result<SimMode, CliError> {
    SimMode::from_str(mode).map_err(|e| CliError::Config(e.to_string()))
}

fn cmd_simulate(
    config: &ConfigArg,
    mode: &str,
    seed: u64,
    out: &std::path::Path,
    format: Format,
) -> Result<(), CliError> {
    let (cfg, config_path) = config.load()?;
    let mode = parse_mode(mode)?;
    let output = run(&cfg, mode, seed).map_err(|e| CliError::Config(e.to_string()))?;
    output::write_simulation(out, &cfg, &config_path, mode, seed, &output)?;
    match format {
        Format::Json => println!(
            "{}",
            serde_json::to_string_pretty(&output.report).map_err(|e| CliError::Io(e.to_string()))?
        ),
        Format::Text => print!("{}", output.report.text_summary()),
    }
    if !output.report.audit.passed {
        let offending = output
            .report
            .audit
            .offending
            .clone()
            .unwrap_or_else(|| "<no trace line>".to_string());
        return Err(CliError::Check(format!(
            "invariant audit failed at: {offending}"
        )));
    }
    Ok(())
}

fn cmd_sweep(
    config: &ConfigArg,
    mode: &str,
    param: &str,
    values: &str,
    seed: u64,
    out: &std::path::Path,
) -> Result<(), CliError> {
    let (cfg, config_path) = config.load()?;
    let mode = parse_mode(mode)?;
    let param = SweepParam::from_str(param).map_err(|e| CliError::Config(e.to_string()))?;
    let values: Vec<f64> = values
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|e| CliError::Config(format!("bad value '{v}': {e}")))
        })
        .collect::<Result<_, _>>()?;
    if values.is_empty() {
        return Err(CliError::Config("no sweep values given".into()));
    }
    let rows =
        sweep(&cfg, mode, param, &values, seed).map_err(|e| CliError::Config(e.to_string()))?;
    output::write_sweep(out, &cfg, &config_path, mode, seed, param, &rows)?;
    println!(
        "{:>12}  {:>8}  {:>12}  {:>12}  {:>10}  {:>12}",
        param.as_str(),
        "slo_met",
        "success",
        "pipe_p99_ms",
        "rank_p99",
        "dram_hit"
    );
    for row in &rows {
        println!(
            "{:>12}  {:>8}  {:>12.4}  {:>12.2}  {:>10.2}  {:>12.3}",
            row.value,
            row.report.slo_met,
            row.report.success_rate,
            row.report.pipeline.p99_ms,
            row.report.rank.p99_ms,
            row.report.cache.dram_hit_rate
        );
    }
    Ok(())
}
