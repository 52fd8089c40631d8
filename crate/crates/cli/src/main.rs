use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use noxwatch::screening::Method;
use noxwatch_cli::commands::{ingest, map, profile, report, screen, simulate};
use noxwatch_cli::{CliError, PipelineConfig};

/// NOx high-emitter screening and reduction mapping for heavy-duty diesel fleets.
#[derive(Debug, Parser)]
#[command(name = "noxwatch", version)]
struct Cli {
    /// Pipeline config (TOML).
    #[arg(long, global = true, default_value = "noxwatch.toml")]
    config: PathBuf,
    /// RNG seed for `simulate`; overrides the fleet spec.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Repeat for more log output on stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    National,
    #[value(alias = "obmrsd")]
    ObmRsd,
    Both,
}

impl MethodArg {
    fn methods(self) -> Vec<Method> {
        match self {
            MethodArg::National => vec![Method::National],
            MethodArg::ObmRsd => vec![Method::ObmRsd],
            MethodArg::Both => Method::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse and clean the OBM and RSD inputs.
    Ingest,
    /// Build per-bin profiles and screening thresholds.
    Profile {
        /// Threshold multiplier applied to bin means.
        #[arg(long)]
        multiplier: Option<f64>,
        #[arg(long)]
        min_samples: Option<usize>,
    },
    /// Screen RSD passes and compute emission factors.
    Screen {
        #[arg(long, value_enum, default_value = "both")]
        method: MethodArg,
        /// Fixed NO limit of the national method, ppm.
        #[arg(long)]
        national_limit: Option<f64>,
        #[arg(long)]
        window_days: Option<i64>,
    },
    /// Accumulate the spatial reduction grid.
    Map {
        /// Defaults to the config's `[map] method`.
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
    },
    /// Generate a synthetic fleet with known high emitters.
    Simulate {
        /// Fleet spec (TOML); defaults apply to omitted keys.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        vehicles: Option<usize>,
        #[arg(long)]
        he_fraction: Option<f64>,
        #[arg(long)]
        he_multiplier: Option<f64>,
    },
    /// Combine the stage summaries into report.json.
    Report,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::Profile { .. } => "profile",
            Command::Screen { .. } => "screen",
            Command::Map { .. } => "map",
            Command::Simulate { .. } => "simulate",
            Command::Report => "report",
        }
    }
}

fn to_value<T: serde::Serialize>(v: T) -> Result<Value, CliError> {
    serde_json::to_value(v).map_err(|e| CliError::data(e.to_string()))
}

fn run(cli: Cli) -> Result<Value, CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    if let Command::Simulate {
        spec,
        out,
        vehicles,
        he_fraction,
        he_multiplier,
    } = &cli.command
    {
        let mut fleet = match spec {
            Some(p) => simulate::load_spec(p)?,
            None => Default::default(),
        };
        if let Some(s) = cli.seed {
            fleet.seed = s;
        }
        if let Some(n) = vehicles {
            fleet.n_vehicles = *n;
        }
        if let Some(f) = he_fraction {
            fleet.he_fraction = *f;
        }
        if let Some(m) = he_multiplier {
            fleet.he_ratio_multiplier = *m;
        }
        return to_value(simulate::run(&fleet, out)?);
    }

    let mut cfg = PipelineConfig::load(&cli.config)?;
    if cli.seed.is_some() {
        log::debug!("--seed has no effect on `{}`", cli.command.name());
    }
    match cli.command {
        Command::Ingest => to_value(ingest::run(&cfg)?),
        Command::Profile {
            multiplier,
            min_samples,
        } => {
            if let Some(m) = multiplier {
                cfg.thresholds.multiplier = m;
            }
            if let Some(n) = min_samples {
                cfg.thresholds.min_samples = n;
            }
            cfg.validate()?;
            to_value(profile::run(&cfg)?)
        }
        Command::Screen {
            method,
            national_limit,
            window_days,
        } => {
            if let Some(l) = national_limit {
                cfg.screening.national_limit_ppm = l;
            }
            if let Some(d) = window_days {
                cfg.screening.window_days = d;
            }
            cfg.validate()?;
            to_value(screen::run(&cfg, &method.methods())?)
        }
        Command::Map { method } => {
            let method = match method {
                None => cfg.map.method,
                Some(MethodArg::National) => Method::National,
                Some(MethodArg::ObmRsd) => Method::ObmRsd,
                Some(MethodArg::Both) => {
                    return Err(CliError::Config("map takes a single method".into()));
                }
            };
            to_value(map::run(&cfg, method)?)
        }
        Command::Report => to_value(report::run(&cfg)?),
        Command::Simulate { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let command = cli.command.name();
    let (body, code) = match run(cli) {
        Ok(summary) => (
            json!({"command": command, "status": "ok", "summary": summary}),
            0,
        ),
        Err(e) => {
            eprintln!("noxwatch {command}: {e}");
            let code = e.exit_code();
            (
                json!({"command": command, "status": "error", "exit_code": code, "message": e.to_string()}),
                code,
            )
        }
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&body).expect("summary is valid JSON")
    );
    ExitCode::from(code as u8)
}
