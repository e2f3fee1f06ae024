//! `spikyspace`: train, convert, run and profile spiking state-space forecasters.

mod commands;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "spikyspace", version, about = "Spiking state-space time-series forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a quantized model and write an ANN checkpoint.
    Train(TrainArgs),
    /// Convert an ANN checkpoint into a spike-driven one.
    Convert(ConvertArgs),
    /// Forecast the steps after the end of a series, or after every window.
    Forecast(ForecastArgs),
    /// Check activation bounds, spike codecs and ANN/SNN equivalence.
    Verify(VerifyArgs),
    /// Count operations of spike-driven inference and estimate energy.
    Energy(EnergyArgs),
    /// Score a checkpoint with R² and RRSE per horizon step.
    Eval(EvalArgs),
    /// Write (t, true, predicted) rows for external plotting.
    PlotData(PlotArgs),
    /// Write a synthetic two-variable series of coupled noisy sinusoids.
    Synth(SynthArgs),
}

#[derive(Args, Clone)]
pub struct DataArgs {
    /// CSV file: one row per time step, one numeric column per variable.
    #[arg(long)]
    pub data: PathBuf,
    /// The first row holds data, not column names.
    #[arg(long)]
    pub no_header: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Val,
    Test,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Forecast horizon G.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Input window length H.
    #[arg(long)]
    pub history: Option<usize>,
    /// Activation bit width.
    #[arg(long)]
    pub bits: Option<u32>,
    /// `key = value` file with training, model and split settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Arithmetic used during training.
    #[arg(long, value_enum, default_value = "f64")]
    pub precision: Precision,
    /// Suppress per-epoch progress.
    #[arg(long)]
    pub quiet: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ConvertArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Raise scan thresholds to T·θ so saturated neurons fire once.
    #[arg(long)]
    pub threshold_scale: bool,
}

#[derive(Args)]
pub struct ForecastArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Forecast after every history window instead of only the last one.
    #[arg(long)]
    pub all_windows: bool,
    /// Output CSV; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct VerifyArgs {
    /// Checkpoint to test for ANN/SNN equivalence and codec round trips.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Series whose windows drive the equivalence check; random inputs otherwise.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub no_header: bool,
    /// Random input windows when no data is given.
    #[arg(long, default_value_t = 32)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Grid spacing of the activation deviation scan over [-10, 10].
    #[arg(long, default_value_t = 0.001)]
    pub grid_step: f64,
}

#[derive(Args)]
pub struct EnergyArgs {
    /// Converted (SNN) checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Energy table with `e_acc`, `e_mac`, `e_shift`, `e_cmp` in joules.
    #[arg(long)]
    pub table: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: Split,
    /// Settings file supplying split ratios.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Profile at most this many windows.
    #[arg(long)]
    pub max_windows: Option<usize>,
    /// Also write the report as `key = value` lines.
    #[arg(long)]
    pub kv_out: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value = "test")]
    pub split: Split,
    /// Settings file supplying split ratios.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    /// Standard deviation of the additive Gaussian noise.
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// How a successful run ended.
pub enum Status {
    Ok,
    VerifyFailed,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let res = match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Convert(a) => commands::convert(&a),
        Command::Forecast(a) => commands::forecast(&a),
        Command::Verify(a) => verify::run(&a),
        Command::Energy(a) => commands::energy(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::PlotData(a) => commands::plot_data(&a),
        Command::Synth(a) => commands::synth(&a),
    };
    match res {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::VerifyFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
