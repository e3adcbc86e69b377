use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use fraclab_cli::{run, CliError, Command, ExperimentConfig, RunOptions};

#[derive(Debug, Parser)]
#[command(name = "fraclab", version, about = "Thin obstacle problems for L_a and the map S(p) = p + v_p")]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of extra grid refinements.
    #[arg(long, default_value_t = 0)]
    refine: u32,
    #[arg(long)]
    seed: Option<u64>,
    /// Zero runtimes and run stages sequentially so reports are bit-identical.
    #[arg(long)]
    deterministic: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let opts = RunOptions { out: cli.out, refine: cli.refine, seed: cli.seed, deterministic: cli.deterministic };
    let result = ExperimentConfig::load(&cli.config)
        .map_err(CliError::from)
        .and_then(|cfg| run(cli.command, &cfg, &opts));
    match result {
        Ok(report) => {
            for c in &report.checks {
                println!(
                    "{} {:<40} measured {:>12.4e}  tolerance {:>10.3e}  {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.measured,
                    c.tolerance,
                    c.note
                );
            }
            ExitCode::from(report.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
