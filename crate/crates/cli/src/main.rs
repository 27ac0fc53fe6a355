//! `pdra`: run, sweep and check resilient allocation experiments.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use resilient_pdra::experiment::{
    check_trace, execute, load_config, Mode, Outcome, RunConfig, EXIT_FAILURE,
};

#[derive(Parser)]
#[command(
    name = "pdra",
    version,
    about = "Attack-resilient primal-dual resource allocation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute the runs described by a config file.
    Run(RunArgs),
    /// Execute a step-size or alpha sweep (`sweep_gamma` unless the config or `--mode` says otherwise).
    Sweep(RunArgs),
    /// Re-check a trace CSV against its bounds and its recorded summary.
    Check { trace: PathBuf },
}

#[derive(Args)]
struct RunArgs {
    config: PathBuf,
    /// Run this single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Write artifacts here instead of the configured directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// baseline, attacked_naive, resilient, sweep_gamma or sweep_alpha.
    #[arg(long)]
    mode: Option<String>,
}

fn prepare(args: &RunArgs, sweep: bool) -> Result<RunConfig> {
    let mut config =
        load_config(&args.config).with_context(|| format!("loading {}", args.config.display()))?;
    if let Some(m) = &args.mode {
        config.mode = m.parse::<Mode>()?;
    }
    if sweep {
        if args.mode.is_none() && !config.mode.is_sweep() {
            config.mode = Mode::SweepGamma;
        }
        if !config.mode.is_sweep() {
            bail!("`sweep` needs a sweep mode, got `{}`", config.mode.as_str());
        }
    }
    if let Some(s) = args.seed {
        config.seeds = vec![s];
    }
    if let Some(dir) = &args.out_dir {
        config.output_dir = dir.clone();
    }
    config.validate()?;
    Ok(config)
}

fn report(outcome: &Outcome) {
    let s = &outcome.summary;
    for run in &s.runs {
        let failed: Vec<&str> = run
            .checks
            .iter()
            .filter(|(_, ok)| !**ok)
            .map(|(k, _)| k.as_str())
            .collect();
        println!(
            "{:<28} steady_residual_sq={:.3e} final_residual_sq={:.3e} {}",
            run.label,
            run.summary.steady_state_residual_sq,
            run.summary.final_residual_sq,
            if failed.is_empty() {
                "pass".to_string()
            } else {
                format!("FAIL {}", failed.join(","))
            }
        );
    }
    if let Some(rows) = &s.grid {
        println!(
            "index,gamma,gamma_l2_over_upsilon,alpha,contraction_factor,steady_state_residual_sq"
        );
        for r in rows {
            println!(
                "{},{:.4e},{:.4},{},{:.6},{:.4e}",
                r.index,
                r.gamma,
                r.gamma_l2_over_upsilon,
                r.alpha,
                r.contraction_factor,
                r.steady_state_residual_sq
            );
        }
    }
    for (name, ok) in &s.checks {
        println!("{name}: {}", if *ok { "pass" } else { "FAIL" });
    }
    println!(
        "{} ({} runs) -> {}",
        if s.passed {
            "all checks passed"
        } else {
            "bound check failed"
        },
        s.runs.len(),
        outcome.output_dir.display()
    );
}

fn run() -> Result<i32> {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_FAILURE } else { 0 };
            let _ = e.print();
            return Ok(code);
        }
    };
    match cli.command {
        Command::Run(args) => {
            let outcome = execute(&prepare(&args, false)?)?;
            report(&outcome);
            Ok(outcome.exit_code)
        }
        Command::Sweep(args) => {
            let outcome = execute(&prepare(&args, true)?)?;
            report(&outcome);
            Ok(outcome.exit_code)
        }
        Command::Check { trace } => {
            let r = check_trace(&trace).with_context(|| format!("checking {}", trace.display()))?;
            println!("{}: {} rows", r.trace, r.rows);
            match &r.recorded {
                Some(rec) => println!(
                    "summary: {} (recorded as {})",
                    if r.consistent {
                        "consistent"
                    } else {
                        "MISMATCH"
                    },
                    rec.label
                ),
                None => println!("summary: none found, using flags stored in the trace"),
            }
            for (name, ok) in &r.checks {
                println!("{name}: {}", if *ok { "pass" } else { "FAIL" });
            }
            Ok(r.exit_code)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_FAILURE as u8)
        }
    }
}
