//! `bilevel-dual <command> [--config PATH] [--seed N] [--out PATH] [--jobs N]`
//!
//! Exit codes: 0 success, 1 failed check, 2 configuration or output error,
//! 3 solver failure.

mod config;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use bilevel_dual::checks::{run_all, CheckOptions};
use bilevel_dual::experiments::invopt::{build_invopt_blp, gen_invopt, gen_invopt_noiseless, random_start};
use bilevel_dual::experiments::result::{fmt_f64, write_rows, OutputFormat};
use bilevel_dual::experiments::routing::{build_stackelberg_blp, scale_strategy, RoutingInstance};
use bilevel_dual::experiments::{invopt_sweep, stackelberg_grid, ExperimentError};
use bilevel_dual::homotopy::{run, DriverConfig, SolveReport};
use bilevel_dual::SolveError;
use clap::{Parser, Subcommand};
use serde::Serialize;

use config::{Command, ConfigError, ProblemKind, RunConfig};

#[derive(Parser)]
#[command(name = "bilevel-dual", version, about = "Duality-based bilevel solver and experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Inverse optimization sweep over seeded instances.
    Invopt(Overrides),
    /// Stackelberg routing over an (alpha, phi) grid.
    Stackelberg(Overrides),
    /// One continuation run on a single instance; writes the iteration log.
    Solve(Overrides),
    /// Gradient, duality and nesting self-checks; writes a JSON summary.
    Check(Overrides),
}

#[derive(clap::Args)]
struct Overrides {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot write {path}: {source}")]
    Output { path: String, source: io::Error },
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error("{0} check(s) failed")]
    ChecksFailed(usize),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::ChecksFailed(_) => 1,
            CliError::Config(_) | CliError::Output { .. } => 2,
            CliError::Experiment(ExperimentError::InvalidInstance(_)) => 2,
            CliError::Solve(_) | CliError::Experiment(_) => 3,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}

fn load(command: Command, o: &Overrides) -> Result<RunConfig, CliError> {
    let mut cfg = match &o.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.check_command(command)?;
    if o.seed.is_some() {
        cfg.seed = o.seed;
    }
    if o.out.is_some() {
        cfg.output_path.clone_from(&o.out);
    }
    if o.jobs.is_some() {
        cfg.jobs = o.jobs;
    }
    Ok(cfg)
}

fn execute(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Invopt(o) => cmd_invopt(&load(Command::Invopt, &o)?),
        Cmd::Stackelberg(o) => cmd_stackelberg(&load(Command::Stackelberg, &o)?),
        Cmd::Solve(o) => cmd_solve(&load(Command::Solve, &o)?),
        Cmd::Check(o) => cmd_check(&load(Command::Check, &o)?),
    }
}

fn emit(cfg: &RunConfig, body: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> Result<(), CliError> {
    let (name, result) = match &cfg.output_path {
        Some(path) => {
            let name = path.display().to_string();
            let result = File::create(path).and_then(|f| {
                let mut w = BufWriter::new(f);
                body(&mut w)?;
                w.flush()
            });
            (name, result)
        }
        None => {
            let mut w = io::stdout().lock();
            ("stdout".to_string(), body(&mut w).and_then(|_| w.flush()))
        }
    };
    result.map_err(|source| CliError::Output { path: name, source })
}

fn cmd_invopt(cfg: &RunConfig) -> Result<(), CliError> {
    let schedule = cfg.schedule()?;
    let opts = cfg.driver_options()?;
    let n = cfg.n.unwrap_or(100);
    if n == 0 {
        return Err(ConfigError::Invalid("n must be at least 1".into()).into());
    }
    let rows = invopt_sweep(
        cfg.count.unwrap_or(200),
        cfg.seed.unwrap_or(0),
        n,
        cfg.noiseless.unwrap_or(false),
        &schedule,
        &opts,
        cfg.jobs(),
    );
    emit(cfg, |w| write_rows(&rows, cfg.format(), w))
}

fn cmd_stackelberg(cfg: &RunConfig) -> Result<(), CliError> {
    let schedule = cfg.schedule()?;
    let opts = cfg.driver_options()?;
    let (alphas, phis) = cfg.grid()?;
    let rows = stackelberg_grid(&alphas, &phis, &schedule, &opts, cfg.jobs());
    emit(cfg, |w| write_rows(&rows, cfg.format(), w))
}

#[derive(Serialize)]
struct SolveOutput<'a> {
    problem: &'static str,
    x0: &'a [f64],
    x_final: &'a [f64],
    report: &'a SolveReport,
}

fn cmd_solve(cfg: &RunConfig) -> Result<(), CliError> {
    let schedule = cfg.schedule()?;
    let opts = cfg.driver_options()?;
    let seed = cfg.seed.unwrap_or(0);
    let (name, p, x0) = match cfg.problem.unwrap_or(ProblemKind::Invopt) {
        ProblemKind::Invopt => {
            let n = cfg.n.unwrap_or(100);
            let inst = if cfg.noiseless.unwrap_or(false) {
                gen_invopt_noiseless(n, seed)?
            } else {
                gen_invopt(n, seed)?
            };
            let x0 = cfg.x0.clone().unwrap_or_else(|| vec![random_start(seed)]);
            ("invopt", build_invopt_blp(&inst)?, x0)
        }
        ProblemKind::Stackelberg => {
            let inst = RoutingInstance::new(cfg.alpha.unwrap_or(0.5), cfg.phi.unwrap_or(0.5))?;
            let x0 = cfg.x0.clone().unwrap_or_else(|| scale_strategy(&inst, 1e-12));
            ("stackelberg", build_stackelberg_blp(&inst)?, x0)
        }
    };
    if x0.len() != p.x_dim() {
        return Err(ConfigError::Invalid(format!("x0 needs {} entries", p.x_dim())).into());
    }
    let (x, report) = run(&p, &DriverConfig::new(x0.clone(), schedule), &opts)?;
    emit(cfg, |w| match cfg.format() {
        OutputFormat::Json => {
            let out = SolveOutput {
                problem: name,
                x0: &x0,
                x_final: &x,
                report: &report,
            };
            serde_json::to_writer_pretty(&mut *w, &out).map_err(io::Error::other)?;
            w.write_all(b"\n")
        }
        OutputFormat::Csv => {
            writeln!(
                w,
                "k,epsilon,mu,start_objective,objective,max_residual,dbp_major_iterations,dbp_inner_iterations,dbp_status,restored,x,wall_ms"
            )?;
            for r in &report.iterations {
                let xs: Vec<String> = r.x.iter().map(|v| fmt_f64(*v)).collect();
                let status = r
                    .dbp_status
                    .and_then(|s| serde_json::to_value(s).ok())
                    .and_then(|v| v.as_str().map(str::to_owned))
                    .unwrap_or_else(|| "failed".into());
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{},{},{},{},{}",
                    r.k,
                    fmt_f64(r.epsilon),
                    fmt_f64(r.mu),
                    fmt_f64(r.start_objective),
                    fmt_f64(r.objective),
                    fmt_f64(r.max_residual),
                    r.dbp_major_iterations,
                    r.dbp_inner_iterations,
                    status,
                    r.restored,
                    xs.join(";"),
                    fmt_f64(r.wall_ms)
                )?;
            }
            Ok(())
        }
    })
}

fn cmd_check(cfg: &RunConfig) -> Result<(), CliError> {
    let summary = run_all(&CheckOptions {
        seed: cfg.seed.unwrap_or(CheckOptions::default().seed),
        inject_gradient_bug: cfg.inject_gradient_bug.unwrap_or(false),
    });
    for c in &summary.checks {
        eprintln!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    emit(cfg, |w| {
        serde_json::to_writer_pretty(&mut *w, &summary).map_err(io::Error::other)?;
        w.write_all(b"\n")
    })?;
    let failed = summary.checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(CliError::ChecksFailed(failed));
    }
    Ok(())
}
