//! `psce`: principal survival causal effects from the command line.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error,
//! 4 numerical failure.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "psce", version, about = "Principal survival causal effects under noncompliance")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the working models and write survival curves for every method.
    Estimate(Shared),
    /// Standardized mean differences across observed cells.
    Balance(Shared),
    /// Sweep the principal ignorability and monotonicity sensitivity parameters.
    Sensitivity(SensitivityArgs),
    /// Run the Monte Carlo scenario matrix.
    Simulate(SimulateArgs),
}

#[derive(Args, Debug, Clone)]
struct Shared {
    #[arg(long)]
    input: Option<PathBuf>,
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long = "out-dir")]
    out_dir: Option<PathBuf>,
    #[arg(long = "grid-points")]
    grid_points: Option<usize>,
    #[arg(long = "t-max")]
    t_max: Option<f64>,
    #[arg(long = "bootstrap-B")]
    bootstrap_b: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Comma-separated subset of sr1,sr2,sr3,mr.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Comma-separated subset of a,c,n.
    #[arg(long, value_delimiter = ',')]
    strata: Option<Vec<String>>,
    /// Covariate columns; by default every column not named below.
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<String>>,
    #[arg(long = "z-col")]
    z_col: Option<String>,
    #[arg(long = "s-col")]
    s_col: Option<String>,
    #[arg(long = "time-col")]
    time_col: Option<String>,
    #[arg(long = "event-col")]
    event_col: Option<String>,
}

#[derive(Args, Debug)]
struct SensitivityArgs {
    #[command(flatten)]
    shared: Shared,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    xi1: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    xi0: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    eta1: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    eta0: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    zeta: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    shared: Shared,
    /// `observational` or `randomized`.
    #[arg(long)]
    design: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    scenarios: Option<Vec<usize>>,
    #[arg(long = "oracle-draws")]
    oracle_draws: Option<usize>,
}

fn merge_shared(cfg: &mut RunConfig, a: &Shared) {
    macro_rules! set {
        ($field:ident) => {
            if let Some(v) = a.$field.clone() {
                cfg.$field = v;
            }
        };
    }
    if a.input.is_some() {
        cfg.input = a.input.clone();
    }
    if a.t_max.is_some() {
        cfg.t_max = a.t_max;
    }
    if a.bootstrap_b.is_some() {
        cfg.bootstrap_b = a.bootstrap_b;
    }
    if a.threads.is_some() {
        cfg.threads = a.threads;
    }
    set!(seed);
    set!(out_dir);
    set!(grid_points);
    set!(alpha);
    set!(methods);
    set!(strata);
    let cols = &mut cfg.columns;
    if let Some(c) = &a.covariates {
        cols.covariates = c.clone();
    }
    for (target, flag) in [
        (&mut cols.z, &a.z_col),
        (&mut cols.s, &a.s_col),
        (&mut cols.time, &a.time_col),
        (&mut cols.event, &a.event_col),
    ] {
        if let Some(v) = flag {
            *target = v.clone();
        }
    }
}

fn base_config(a: &Shared) -> Result<RunConfig, CliError> {
    let mut cfg = match &a.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    merge_shared(&mut cfg, a);
    Ok(cfg)
}

fn resolve(command: &Command) -> Result<RunConfig, CliError> {
    let cfg = match command {
        Command::Estimate(a) | Command::Balance(a) => base_config(a)?,
        Command::Sensitivity(s) => {
            let mut cfg = base_config(&s.shared)?;
            let grid = &mut cfg.sensitivity;
            for (target, flag) in [
                (&mut grid.xi1, &s.xi1),
                (&mut grid.xi0, &s.xi0),
                (&mut grid.eta1, &s.eta1),
                (&mut grid.eta0, &s.eta0),
                (&mut grid.zeta, &s.zeta),
            ] {
                if let Some(v) = flag {
                    *target = v.clone();
                }
            }
            cfg
        }
        Command::Simulate(s) => {
            let mut cfg = base_config(&s.shared)?;
            let sim = &mut cfg.simulation;
            if let Some(d) = &s.design {
                sim.design = d.clone();
            }
            if let Some(n) = s.n {
                sim.n = n;
            }
            if let Some(r) = s.reps {
                sim.reps = r;
            }
            if let Some(sc) = &s.scenarios {
                sim.scenarios = sc.clone();
            }
            if let Some(d) = s.oracle_draws {
                sim.oracle_draws = d;
            }
            cfg
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve(&cli.command)?;
    if let Some(t) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Estimate(_) => commands::estimate(&cfg),
        Command::Balance(_) => commands::balance(&cfg),
        Command::Sensitivity(_) => commands::sensitivity(&cfg),
        Command::Simulate(_) => commands::simulate(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("psce: {} error: {e}", e.kind());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
