use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cmpc::scenario::{
    load_config, run_experiment, validate_config, Overrides, ScenarioError, Trigger,
};

/// Contingency MPC experiment runner.
#[derive(Parser)]
#[command(name = "cmpc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its CSV files.
    Run {
        config: PathBuf,
        /// Output directory; overrides `out` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated contingency weights, e.g. 0,0.5,1.
        #[arg(long, value_delimiter = ',')]
        pc: Option<Vec<f64>>,
        /// Trigger time in seconds (toy: pop step), or `never`.
        #[arg(long)]
        trigger: Option<Trigger<f64>>,
    },
    /// Parse and check a config without running it.
    Validate { config: PathBuf },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_FLAGGED: u8 = 3;

fn fail(e: &ScenarioError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(if e.is_config_error() { EXIT_CONFIG } else { 1 })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Validate { config } => match validate_config(&config) {
            Ok(cfg) => {
                println!("{}: ok ({})", config.display(), cfg.kind.as_str());
                ExitCode::SUCCESS
            }
            Err(e) => fail(&e),
        },
        Command::Run {
            config,
            out,
            pc,
            trigger,
        } => {
            let cfg = match load_config(
                &config,
                &Overrides {
                    out,
                    pcs: pc,
                    trigger,
                },
            ) {
                Ok(c) => c,
                Err(e) => return fail(&e),
            };
            let outcome = match run_experiment(&cfg) {
                Ok(o) => o,
                Err(e) => return fail(&e),
            };
            println!(
                "wrote {} files to {}",
                outcome.files.len(),
                outcome.dir.display()
            );
            if outcome.flagged.is_empty() {
                return ExitCode::SUCCESS;
            }
            for f in &outcome.flagged {
                let steps: Vec<String> = f.steps.iter().map(|s| s.to_string()).collect();
                eprintln!(
                    "solver failure in run {}: steps {}",
                    f.run,
                    steps.join(", ")
                );
            }
            ExitCode::from(EXIT_FLAGGED)
        }
    }
}
