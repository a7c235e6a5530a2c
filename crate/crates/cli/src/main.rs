use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use seasonal_dstm_cli::commands::{cmd_explore, cmd_fit, cmd_simulate, cmd_summarize};
use seasonal_dstm_cli::config::{describe, resolve, Layers};
use seasonal_dstm_cli::{classify, error_report};

#[derive(Parser)]
#[command(name = "seasonal-dstm", version, about = "Harmonic dynamic spatio-temporal model of daily min/max temperature")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON config file layered over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set sampler.n_iter=200`. Repeatable.
    #[arg(long = "set", value_name = "K=V", global = true)]
    set: Vec<String>,
    /// Seed for both simulation and sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; outputs do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset and its truth record.
    Simulate,
    /// Run the Gibbs sampler and write posterior draws.
    Fit,
    /// Shift maps, semi-annual contributions and amplitude/phase fields.
    Summarize,
    /// Two-period t-statistic screen of per-year least-squares fits.
    Explore,
    /// Print the resolved configuration with the source of every value.
    PrintConfig,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let layers = Layers { config_file: cli.config.clone(), overrides: cli.set.clone(), seed: cli.seed, output: cli.out.clone() };
    let result = resolve(&layers).and_then(|resolved| {
        let mut config = resolved.config.clone();
        if cli.threads == 0 {
            return Err(seasonal_dstm::Error::InvalidArgument("--threads must be at least 1".into()));
        }
        config.sampler.threads = cli.threads;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build()
            .map_err(|e| seasonal_dstm::Error::InvalidArgument(format!("thread pool: {e}")))?;
        pool.install(|| match cli.command {
            Command::Simulate => cmd_simulate(&config),
            Command::Fit => cmd_fit(&config),
            Command::Summarize => cmd_summarize(&config),
            Command::Explore => cmd_explore(&config),
            Command::PrintConfig => {
                println!("{}", serde_json::to_string_pretty(&describe(&resolved))?);
                Ok(())
            }
        })
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_report(&e));
            ExitCode::from(classify(&e).0 as u8)
        }
    }
}
