mod commands;
mod config;
mod error;
mod output;
mod scenario;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::commands::Outcome;
use crate::config::{check_schema, View};
use crate::error::CliError;
use crate::output::Artifacts;
use crate::scenario::Builder;

/// Monte Carlo solvers for backward stochastic Volterra integral equations with jumps.
///
/// Exit status: 0 on success, 2 when a mathematical check fails, 1 on errors.
#[derive(Parser)]
#[command(name = "bsvie", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario file (TOML).
    config: PathBuf,
    /// Overrides `mc.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `mc.n_paths`.
    #[arg(long)]
    paths: Option<u64>,
    /// Output directory; falls back to `outputs.dir`, then `$BSVIE_OUT_DIR`, then `./bsvie-out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Caps the number of worker threads.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// General nonlinear solver: surface, node values, convergence report.
    Solve(Common),
    /// Closed-form evaluation of a linear equation.
    SolveLinear(Common),
    /// Resolvent table of the kernel in `[linear]`.
    Kernel(Common),
    /// Risk measure values of the position in `[psi]`.
    Risk(Common),
    /// Risk-measure axiom suite.
    Axioms(Common),
    /// Comparison hypotheses and ordering of two problems on common paths.
    Compare(Common),
    /// Semimartingale constructions and their identity check.
    Semimartingale {
        #[command(flatten)]
        common: Common,
        /// Construction type; overrides `semimartingale.type`.
        #[arg(long = "type", value_parser = clap::value_parser!(u8).range(1..=3))]
        kind: Option<u8>,
    },
    /// Brute-force nested Monte Carlo estimate of the initial value.
    Oracle(Common),
}

impl Command {
    fn parts(&self) -> (&'static str, &Common) {
        match self {
            Command::Solve(c) => ("solve", c),
            Command::SolveLinear(c) => ("solve-linear", c),
            Command::Kernel(c) => ("kernel", c),
            Command::Risk(c) => ("risk", c),
            Command::Axioms(c) => ("axioms", c),
            Command::Compare(c) => ("compare", c),
            Command::Semimartingale { common, .. } => ("semimartingale", common),
            Command::Oracle(c) => ("oracle", c),
        }
    }
}

fn set(root: &mut Table, section: &str, key: &str, v: Value) {
    let entry = root.entry(section).or_insert_with(|| Value::Table(Table::new()));
    if let Value::Table(t) = entry {
        t.insert(key.to_string(), v);
    }
}

fn load(path: &PathBuf) -> Result<Table, CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Read {
        path: path.clone(),
        source,
    })?;
    text.parse::<Table>().map_err(|e| CliError::Toml {
        path: path.clone(),
        message: e.to_string(),
    })
}

fn run(cli: Cli) -> Result<Outcome, CliError> {
    let (name, common) = cli.command.parts();
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Threads(e.to_string()))?;
    }
    let mut root = load(&common.config)?;
    if let Some(seed) = common.seed {
        set(&mut root, "mc", "seed", Value::Integer(seed as i64));
    }
    if let Some(paths) = common.paths {
        set(&mut root, "mc", "n_paths", Value::Integer(paths as i64));
    }
    if let Command::Semimartingale { kind: Some(k), .. } = &cli.command {
        set(&mut root, "semimartingale", "type", Value::Integer(*k as i64));
    }
    let errors = check_schema(&root, name);
    if !errors.is_empty() {
        return Err(CliError::Schema(errors));
    }

    // hash of the effective configuration, overrides included
    let canonical = toml::to_string(&root).expect("a parsed table serializes");
    let hash = format!("{:x}", Sha256::digest(canonical.as_bytes()));

    let view = View::root(&root);
    let dir = common
        .out
        .clone()
        .or_else(|| view.get("outputs").str("dir").map(PathBuf::from))
        .or_else(|| std::env::var_os("BSVIE_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("bsvie-out"));
    let dump = view.get("outputs").bool_or("paths_csv", false);
    let builder = Builder::new(view);
    let mut out = Artifacts::new(dir, hash, builder.seed())?;

    let outcome = match name {
        "solve" => commands::solve_cmd(builder, &mut out, dump),
        "solve-linear" => commands::solve_linear_cmd(builder, &mut out, dump),
        "kernel" => commands::kernel_cmd(builder, &mut out),
        "risk" => commands::risk_cmd(builder, &mut out, dump),
        "axioms" => commands::axioms_cmd(builder, &mut out, dump),
        "compare" => commands::compare_cmd(builder, &mut out, dump),
        "semimartingale" => commands::semimartingale_cmd(builder, &mut out, dump),
        "oracle" => commands::oracle_cmd(builder, &mut out),
        _ => unreachable!("clap restricts the subcommands"),
    }?;
    let dir = out.finish(name)?;
    let status = match outcome {
        Outcome::Pass => "ok",
        Outcome::VerdictFailure => "verdict failure",
    };
    println!("{name}: {status}; artifacts in {}", dir.display());
    Ok(outcome)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::VerdictFailure) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
