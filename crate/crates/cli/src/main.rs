//! `rendertime`: one binary for every workflow.
//!
//! Options can also come from a JSON config file (`--config`), keyed by
//! subcommand name with option names in snake_case. Flags on the command
//! line override the file.

mod cmd;
mod opts;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use opts::CliError;

#[derive(Parser)]
#[command(name = "rendertime", version, about = "Rendering-time prediction for volume raycasting")]
struct Cli {
    /// JSON config file; each subcommand reads its own section.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic volumes and their manifest.
    GenVolumes(cmd::data::GenVolumesArgs),
    /// Render sampled views of every volume and record timings.
    Collect(cmd::data::CollectArgs),
    /// Train the volume autoencoder or the time predictor.
    Train(cmd::train::TrainArgs),
    /// Predict frame time for one view, or fill estimates into a task file.
    Predict(cmd::analyze::PredictArgs),
    /// Report RMSE of a model on a dataset split, or of given predictions.
    Eval(cmd::analyze::EvalArgs),
    /// Retrain the predictor with input groups zeroed and compare RMSE.
    Ablate(cmd::analyze::AblateArgs),
    /// Compare LPT schedules under each time estimator.
    Schedule(cmd::analyze::ScheduleArgs),
    /// Run the step-size controller along a camera path.
    ControlBench(cmd::control::ControlBenchArgs),
    /// Measure the step-size curve G.
    GBuild(cmd::control::GBuildArgs),
    /// Start the HTTP service.
    Serve(cmd::serve::ServeArgs),
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("RENDERTIME_THREADS") else { return Ok(()) };
    let n: usize = match v.trim().parse() {
        Ok(n) if n > 0 => n,
        _ => return opts::usage(format!("RENDERTIME_THREADS must be a positive integer, got {v:?}")),
    };
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    let cfg = cli.config.as_deref();
    match cli.command {
        Command::GenVolumes(a) => cmd::data::gen_volumes(opts::merge(a, cfg, "gen-volumes")?),
        Command::Collect(a) => cmd::data::collect(opts::merge(a, cfg, "collect")?),
        Command::Train(a) => cmd::train::train(opts::merge(a, cfg, "train")?),
        Command::Predict(a) => cmd::analyze::predict(opts::merge(a, cfg, "predict")?),
        Command::Eval(a) => cmd::analyze::eval(opts::merge(a, cfg, "eval")?),
        Command::Ablate(a) => cmd::analyze::ablate(opts::merge(a, cfg, "ablate")?),
        Command::Schedule(a) => cmd::analyze::schedule(opts::merge(a, cfg, "schedule")?),
        Command::ControlBench(a) => cmd::control::control_bench(opts::merge(a, cfg, "control-bench")?),
        Command::GBuild(a) => cmd::control::g_build(opts::merge(a, cfg, "g-build")?),
        Command::Serve(a) => cmd::serve::serve(opts::merge(a, cfg, "serve")?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
