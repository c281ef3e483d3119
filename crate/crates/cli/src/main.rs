mod commands;
mod error;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use error::CliError;
use settings::{Common, Settings};

/// Touchscreen liquid sensing toolkit.
#[derive(Debug, Parser)]
#[command(name = "droplex", version, about)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Adulteration,
    Containers,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelChoice {
    Physics,
    Quadratic,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Classifier {
    Cnn,
    Forest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FoldModeArg {
    Region,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Raw,
    Measured,
    SampleDelta,
    Compensated,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a scenario script, or generate a labelled dataset directory.
    Simulate {
        /// JSON list of operations, or {"config": ..., "ops": [...]}.
        #[arg(long, conflicts_with = "task")]
        scenario: Option<PathBuf>,
        #[arg(long, value_enum)]
        task: Option<Task>,
        /// Simulator configuration (JSON).
        #[arg(long = "sim-config")]
        sim_config: Option<PathBuf>,
        #[arg(long = "per-class", default_value_t = 8)]
        per_class: usize,
        #[arg(long = "pre-frames", default_value_t = 10)]
        pre_frames: usize,
        #[arg(long = "post-frames", default_value_t = 50)]
        post_frames: usize,
        /// Class separation for the adulteration task (0 = identical).
        #[arg(long, default_value_t = 1.0)]
        separation: f64,
        /// Round readings to whole device units.
        #[arg(long)]
        quantize: bool,
    },
    /// Fit sensitivity and compensation maps from calibration points.
    Calibrate {
        /// CSV with columns x,y,value.
        #[arg(long, conflicts_with = "simulate_stride")]
        points: Option<PathBuf>,
        /// Collect points from the simulator on a grid with this stride.
        #[arg(long = "simulate-stride")]
        simulate_stride: Option<usize>,
        #[arg(long = "sim-config")]
        sim_config: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        rows: usize,
        #[arg(long, default_value_t = 52)]
        cols: usize,
    },
    /// Detect droplets on one frame, or deposit events over a session.
    Detect {
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[arg(long, value_enum, default_value_t = KindArg::SampleDelta)]
        kind: KindArg,
        /// Average this many frames ending at --frame.
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        compensation: Option<PathBuf>,
        /// Report deposit events instead of droplets.
        #[arg(long)]
        events: bool,
        /// Use the causal trigger with running statistics.
        #[arg(long, requires = "events")]
        streaming: bool,
    },
    /// Fit the physics-informed and/or quadratic model to property data.
    Fit {
        /// CSV with columns sigma,eps_r,observed.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = ModelChoice::Both)]
        model: ModelChoice,
        /// Observations are in device units (sign inverted).
        #[arg(long = "device-units")]
        device_units: bool,
    },
    /// Train a CNN on every labelled session and save the model.
    Train {
        #[arg(long)]
        sessions: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long)]
        compensation: Option<PathBuf>,
    },
    /// Cross-validated evaluation.
    Eval {
        #[arg(long)]
        sessions: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Classifier::Cnn)]
        classifier: Classifier,
        #[arg(long = "fold-mode", value_enum, default_value_t = FoldModeArg::Region)]
        fold_mode: FoldModeArg,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long)]
        compensation: Option<PathBuf>,
    },
    /// Write a viewer bundle: session, detections per frame, deposit events.
    Export {
        #[arg(long)]
        compensation: Option<PathBuf>,
    },
    /// Serve sessions over line-delimited JSON on TCP.
    Serve {
        #[arg(long)]
        sessions: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:7878")]
        addr: String,
        #[arg(long)]
        compensation: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let settings = Settings::resolve(&cli.common)?;
    commands::run(&settings, cli.command)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let err = CliError::usage(e.to_string().trim().to_string());
            eprintln!("{}", err.to_json());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", err.to_json());
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
