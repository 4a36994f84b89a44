use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod config;
mod plots;
mod run;

use config::ScenarioConfig;
use run::{run_scenario, Command};

/// Weak-formulation mean-field game solver.
#[derive(Parser)]
#[command(name = "weakmfg", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate the control-free forward ensemble.
    Simulate(RunArgs),
    /// Solve the backward equation on the ensemble's own law.
    SolveBsde(RunArgs),
    /// Picard iteration to the equilibrium flow.
    SolveMfg(RunArgs),
    /// Equilibrium plus the configured representation diagnostics.
    Diagnose(RunArgs),
    /// Check the structural assumptions on the model.
    VerifyAssumptions(RunArgs),
    /// Write plot-ready data files for a finished run.
    EmitPlots {
        /// Run directory.
        #[arg(long = "out")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Run directory (overrides `output` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, args) = match cli.command {
        Cmd::Simulate(a) => (Command::Simulate, a),
        Cmd::SolveBsde(a) => (Command::SolveBsde, a),
        Cmd::SolveMfg(a) => (Command::SolveMfg, a),
        Cmd::Diagnose(a) => (Command::Diagnose, a),
        Cmd::VerifyAssumptions(a) => (Command::VerifyAssumptions, a),
        Cmd::EmitPlots { out } => {
            return match plots::emit_plots(&out) {
                Ok(files) => {
                    for f in files {
                        println!("{}", out.join(f).display());
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(1)
                }
            };
        }
    };

    if let Some(n) = args.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: --threads: {e}");
            return ExitCode::from(1);
        }
    }
    let text = match std::fs::read_to_string(&args.config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", args.config.display());
            return ExitCode::from(1);
        }
    };
    let mut cfg = match ScenarioConfig::parse(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let dir = args
        .out
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(&cfg.scenario));

    let outcome = run_scenario(command, &cfg, &text, &dir);
    match &outcome.message {
        Some(m) => eprintln!("error: {m}"),
        None => println!("{}", outcome.dir.display()),
    }
    ExitCode::from(outcome.exit_code as u8)
}
