use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qcd_cli::commands::{parse_fault, verify_outcome};
use qcd_cli::{
    cmd_calibrate, cmd_oc_sweep, cmd_simulate, cmd_verify, CliError, RunConfig, VerifyOptions,
};

#[derive(Parser)]
#[command(name = "qcd", version, about = "Multistream quickest change detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `mc.master_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `mc.workers`.
    #[arg(long, env = "QCD_WORKERS")]
    workers: Option<usize>,
    /// Output location; falls back to `output` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Threshold from the `[target]` section.
    Calibrate(RunArgs),
    /// Stopping times under no change and under a prior-drawn change.
    Simulate(RunArgs),
    /// PFA and delay ratios over `sweep.alphas`.
    OcSweep(RunArgs),
    /// Oracle suites.
    Verify {
        /// Suite name or `all`.
        #[arg(default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// JSON report path.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

fn load(args: &RunArgs) -> Result<(RunConfig, Option<PathBuf>), CliError> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.mc.master_seed = seed;
    }
    if let Some(workers) = args.workers {
        config.mc.workers = workers;
    }
    let out = args.out.clone().or_else(|| config.output.clone());
    Ok((config, out))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Calibrate(args) => {
            let (config, out) = load(&args)?;
            let report = cmd_calibrate(&config, out.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Simulate(args) => {
            let (config, out) = load(&args)?;
            let out = out.unwrap_or_else(|| PathBuf::from("qcd-out"));
            let result = cmd_simulate(&config, &out)?;
            let pfa = result.summary.pfa.estimate;
            println!("pfa {} (se {}) -> {}", pfa.mean, pfa.stderr, out.display());
        }
        Command::OcSweep(args) => {
            let (config, out) = load(&args)?;
            let out = out.unwrap_or_else(|| PathBuf::from("qcd-out"));
            let rows = cmd_oc_sweep(&config, &out)?;
            println!("{} rows -> {}", rows.len(), out.join("oc.csv").display());
        }
        Command::Verify {
            suite,
            seeds,
            seed,
            out,
            inject_fault,
        } => {
            let opts = VerifyOptions {
                suite,
                seeds,
                base_seed: seed,
                fault: inject_fault.as_deref().map(parse_fault).transpose()?,
            };
            let reports = cmd_verify(&opts, out.as_deref())?;
            for r in &reports {
                println!(
                    "{:<14} {} checks={} max_error={:.3e} tol={:.1e} ({})",
                    r.suite,
                    if r.passed { "PASS" } else { "FAIL" },
                    r.checks,
                    r.max_error,
                    r.tolerance,
                    r.invariant
                );
            }
            verify_outcome(&reports)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("qcd: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
