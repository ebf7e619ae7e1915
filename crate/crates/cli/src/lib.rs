//! `berrypick` command line: collect expert demos, train policies,
//! evaluate them on the cluster-state matrix, replay episodes with
//! predicted-trajectory overlays and serve the teleop websocket.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use berrypick_core::dataset::DatasetError;
use berrypick_core::eval::EvalError;
use berrypick_core::expert::ExpertError;
use berrypick_core::image::ImageError;
use berrypick_core::policy::{PolicyError, Variant};
use berrypick_core::runtime::RuntimeError;
use berrypick_core::sim::{parse_camera_list, CameraLabel, SimError};
use berrypick_teleop::TeleopError;
use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};

pub use config::{parse_states, RunConfig, ECHO_FILE};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Failed(String),
    #[error(transparent)]
    Expert(#[from] ExpertError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Teleop(#[from] TeleopError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 2 for usage errors, 1 for everything that failed while running.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "berrypick", version, about = "Simulated clustered-strawberry picking with a SCARA arm")]
pub struct Cli {
    /// TOML file layered over the built-in defaults
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override any config key, e.g. `--set policy.width=64`
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// More log output (-v info, -vv debug)
    #[arg(short, long, action = ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Record scripted expert demonstrations
    Collect(CollectArgs),
    /// Train a chunked policy on a dataset
    Train(TrainArgs),
    /// Evaluate checkpoints over cluster states with paired seeds
    Eval(EvalArgs),
    /// Re-render a stored episode, optionally with predicted trajectories
    Replay(ReplayArgs),
    /// Serve the teleoperation websocket
    Serve(ServeArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SourceArg {
    Expert,
    Teleop,
}

fn variant_arg(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: PolicyError| e.to_string())
}

/// Parsed `--states` value.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StateList(pub Vec<usize>);

/// Parsed `--cams` value.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CameraList(pub Vec<CameraLabel>);

fn states_arg(s: &str) -> Result<StateList, String> {
    parse_states(s).map(StateList)
}

fn cams_arg(s: &str) -> Result<CameraList, String> {
    parse_camera_list(s).map(CameraList)
}

#[derive(Args, Debug)]
pub struct CollectArgs {
    #[arg(long)]
    pub episodes: Option<usize>,
    /// e.g. `1,2,3,4,5` or `1-5`
    #[arg(long, value_parser = states_arg)]
    pub states: Option<StateList>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = SourceArg::Expert)]
    pub source: SourceArg,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// act, epact-l or epact-ee
    #[arg(long, value_parser = variant_arg)]
    pub variant: Option<Variant>,
    /// `up`, `down` or `up,down`
    #[arg(long, value_parser = cams_arg)]
    pub cams: Option<CameraList>,
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub chunk: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Checkpoint directory; must not hold a checkpoint already
    #[arg(long, value_name = "CKPT")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// One or more checkpoint directories (repeat or comma-separate)
    #[arg(long, required = true, num_args = 1.., value_delimiter = ',')]
    pub ckpt: Vec<PathBuf>,
    #[arg(long, value_parser = states_arg)]
    pub states: Option<StateList>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Parent of the timestamped run directory
    #[arg(long, value_name = "DIR")]
    pub report: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    #[arg(long)]
    pub episode: u64,
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Checkpoint whose predictions are drawn
    #[arg(long, value_name = "CKPT")]
    pub ckpt: Option<PathBuf>,
    /// Draw predicted end-effector trajectories on each frame
    #[arg(long)]
    pub overlay: bool,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub state_id: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub fps: Option<f64>,
    /// Dataset directory for kept recordings
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    init_logging(cli.verbose);
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
