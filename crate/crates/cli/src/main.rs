use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ctvo_cli::{cmd_compare, cmd_run_async, cmd_run_baseline, cmd_simulate, CliError, RunConfig};
use ctvo_sim::scenario::presets;
use ctvo_sim::ScenarioConfig;

#[derive(Parser)]
#[command(name = "ctvo", version, about = "Continuous-time event-based visual odometry runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an event stream and ground truth from a scenario.
    Simulate {
        /// Scenario TOML file.
        #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
        config: Option<PathBuf>,
        /// Built-in scenario: circle, figure_eight, decelerating_line, ur5_sweep.
        #[arg(long)]
        preset: Option<String>,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output_dir: PathBuf,
    },
    /// Run the asynchronous estimator.
    RunAsync(RunArgs),
    /// Run the frame-batching bundle adjustment baseline.
    RunBaseline(RunArgs),
    /// Compare two run directories.
    Compare {
        run_a: PathBuf,
        run_b: PathBuf,
        #[arg(long)]
        output_dir: PathBuf,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    /// Run configuration TOML file.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(dir) = &self.output_dir {
            cfg.output_dir = dir.clone();
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { config, preset, seed, output_dir } => {
            let mut scenario = match (config, preset) {
                (Some(path), _) => ScenarioConfig::load(&path)?,
                (None, Some(name)) => presets::by_name(&name, 0)
                    .ok_or_else(|| CliError::Config(format!("unknown preset `{name}`")))?,
                (None, None) => unreachable!("clap requires one of --config/--preset"),
            };
            if let Some(seed) = seed {
                scenario.seed = seed;
            }
            let data = cmd_simulate(&scenario, &output_dir)?;
            println!("events = {}", data.events.len());
            println!("ground_truth_samples = {}", data.ground_truth.map_or(0, |g| g.len()));
        }
        Command::RunAsync(args) => {
            let out = cmd_run_async(&args.load()?)?;
            print!("{}", out.report.to_text());
        }
        Command::RunBaseline(args) => {
            let out = cmd_run_baseline(&args.load()?)?;
            print!("{}", out.report.to_text());
        }
        Command::Compare { run_a, run_b, output_dir } => {
            let cmp = cmd_compare(&run_a, &run_b, &output_dir)?;
            print!("{}", cmp.table);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.render());
            ExitCode::FAILURE
        }
    }
}
