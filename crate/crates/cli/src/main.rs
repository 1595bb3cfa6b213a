use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

use commands::{Failure, EXIT_OK};
use config::{Command, Overrides};

#[derive(Parser)]
#[command(name = "adp", version, about = "Policy iteration for stochastic LQR from sampled data")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Model-based Riccati solution P*, K*.
    Solve(Common),
    /// Simulate one closed-loop trajectory to CSV.
    Simulate(Common),
    /// Data-driven policy iteration on the simulated plant.
    Adp(Common),
    /// Sampling-period sweep with rate fits, CSV, JSON and SVG output.
    Sweep(Common),
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output path prefix.
    #[arg(long)]
    out: Option<String>,
    /// Rollouts per iteration (adp and sweep).
    #[arg(long = "n-mc")]
    n_mc: Option<usize>,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    threads: Option<usize>,
    /// Validate and print the plan without running.
    #[arg(long)]
    dry_run: bool,
}

fn run(command: Command, common: &Common) -> Result<i32, Failure> {
    let raw = config::load(&common.config).map_err(Failure::config)?;
    let overrides = Overrides {
        seed: common.seed,
        output: common.out.clone(),
        n_mc: common.n_mc,
    };
    let resolved = config::resolve(raw, &overrides, command).map_err(Failure::config)?;
    if common.threads == Some(0) {
        return Err(Failure::config("--threads must be at least 1"));
    }

    if common.dry_run {
        let plan = serde_json::json!({
            "version": commands::VERSION,
            "command": format!("{command:?}").to_lowercase(),
            "threads": common.threads,
            "outputs": commands::planned_outputs(&resolved, command),
            "config": resolved.config,
        });
        println!("{}", serde_json::to_string_pretty(&plan).expect("serializable"));
        return Ok(EXIT_OK);
    }

    let body = || match command {
        Command::Solve => commands::solve(&resolved),
        Command::Simulate => commands::simulate(&resolved),
        Command::Adp => commands::adp(&resolved),
        Command::Sweep => commands::sweep(&resolved),
    };
    match common.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Failure::config(format!("thread pool: {e}")))?
            .install(body),
        None => body(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, common) = match &cli.command {
        Cmd::Solve(c) => (Command::Solve, c),
        Cmd::Simulate(c) => (Command::Simulate, c),
        Cmd::Adp(c) => (Command::Adp, c),
        Cmd::Sweep(c) => (Command::Sweep, c),
    };
    let code = match run(command, common) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    };
    ExitCode::from(code as u8)
}
