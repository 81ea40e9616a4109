use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fssda_core::experiment::config::DEFAULT_CONFIG_TOML;
use fssda_core::experiment::{runner, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "fssda",
    version,
    about = "Federated semi-supervised domain adaptation simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured method on every pair, mode and seed.
    Run(Common),
    /// Compare fixed imitation weights against the adaptive rule.
    SweepLambda(Common),
    /// Multi-source training next to each single source.
    Multisource(Common),
    /// Write the generated domains to CSV.
    GenData(Common),
    /// Print the annotated default configuration.
    PrintDefaultConfig,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file; defaults apply to anything it omits.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a key, e.g. --set federation.rounds=20. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; takes precedence over FSSDA_OUTPUT_DIR and the config.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> fssda_core::Result<(ExperimentConfig, PathBuf)> {
        let config = match &self.config {
            Some(path) => ExperimentConfig::load(path, &self.overrides)?,
            None => ExperimentConfig::from_toml("", &self.overrides)?,
        };
        let out = self.out.clone().unwrap_or_else(|| config.output_dir());
        Ok((config, out))
    }
}

fn run(cli: Cli) -> fssda_core::Result<()> {
    let (common, driver): (
        &Common,
        fn(&ExperimentConfig, Option<&std::path::Path>) -> _,
    ) = match &cli.command {
        Command::PrintDefaultConfig => {
            print!("{DEFAULT_CONFIG_TOML}");
            return Ok(());
        }
        Command::GenData(common) => {
            let (config, out) = common.load()?;
            for file in runner::gen_data(&config, &out)? {
                println!("{}", file.display());
            }
            return Ok(());
        }
        Command::Run(c) => (c, runner::run_experiment),
        Command::SweepLambda(c) => (c, runner::run_lambda_sweep),
        Command::Multisource(c) => (c, runner::run_multisource),
    };
    let (config, out) = common.load()?;
    let report = driver(&config, Some(&out))?;
    print!("{}", report.summary.to_text());
    println!("wrote {} files under {}", report.files.len(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
