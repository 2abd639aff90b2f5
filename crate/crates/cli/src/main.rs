use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sur_core::experiment::{
    cmd_check, cmd_compare, cmd_run, ExperimentConfig, ExperimentError, Overrides,
};

#[derive(Parser)]
#[command(
    name = "sur",
    version,
    about = "Stepwise uncertainty reduction experiments on finite grids"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run replicated SUR experiments for one functional.
    Run(Common),
    /// Run the randomized verification suites.
    Check {
        #[command(flatten)]
        common: Common,
        /// Check a deliberately corrupted functional (the report must fail).
        #[arg(long)]
        corrupt: bool,
    },
    /// Run several functionals on shared truths.
    Compare(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    config: PathBuf,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of replications (overrides `replications`).
    #[arg(long)]
    replications: Option<usize>,
    /// Base seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, ExperimentError> {
        let overrides = Overrides {
            output_dir: self.out.clone(),
            replications: self.replications,
            seed: self.seed,
        };
        ExperimentConfig::load(&self.config, &overrides)
    }
}

fn execute(cli: Cli) -> Result<bool, ExperimentError> {
    match cli.command {
        Command::Run(common) => {
            let outcome = cmd_run(&common.load()?)?;
            let s = &outcome.summary;
            println!(
                "{}: {} replication(s), {} steps, median H_n/H_0 = {:.4e}",
                s.label, s.replications, s.n_steps, s.h_ratio.median
            );
            for m in &s.metrics {
                println!("  {} median final = {:.4e}", m.name, m.final_value.median);
            }
            println!(
                "  quasi-SUR violations = {}, variance violations = {}, averaged supermartingale {}",
                s.quasi_sur_violations,
                s.variance_violations,
                if s.averaged_supermartingale.pass { "ok" } else { "FAILED" }
            );
            println!("wrote {}", outcome.output_dir.display());
            Ok(true)
        }
        Command::Check { common, corrupt } => {
            let report = cmd_check(&common.load()?, corrupt)?;
            for line in report.lines() {
                println!("{line}");
            }
            println!(
                "{}",
                if report.pass {
                    "all suites passed"
                } else {
                    "some suites FAILED"
                }
            );
            Ok(report.pass)
        }
        Command::Compare(common) => {
            let outcome = cmd_compare(&common.load()?)?;
            for e in &outcome.summary.entries {
                println!(
                    "{}: median H_n/H_0 = {:.4e}, median H_n nonincreasing: {}",
                    e.label, e.summary.h_ratio.median, e.median_h_nonincreasing
                );
            }
            println!("wrote {}", outcome.output_dir.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
