//! `pedflow`: batch pipeline for hourly pedestrian-count forecasting.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | any other error |
//! | 2 | input file or directory not found |
//! | 3 | malformed input (parse error, duplicate observation) |
//! | 4 | invalid graph parameter |
//! | 5 | checkpoint and graph fingerprints differ |
//! | 6 | unknown sensor id |

mod artifact;
mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::ModelName;

#[derive(Debug, Parser)]
#[command(name = "pedflow", version, about = "Pedestrian volume forecasting pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every command.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override any config key, e.g. `--set train.hidden=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse a raw count CSV into an hourly panel.
    Ingest(IngestArgs),
    /// Impute, cluster weeks and drop anomalous ones.
    Preprocess(PreprocessArgs),
    /// Build the sensor graph from coordinates and a medoid week.
    BuildGraph(BuildGraphArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Hyperparameter grid search.
    Grid(GridArgs),
    /// Per-horizon metrics on the test split.
    Evaluate(EvaluateArgs),
    /// Forecast the hours after the end of a panel.
    Forecast(ForecastArgs),
    /// Truth and 1-hour-ahead predictions per sensor, as CSV and SVG.
    ExportPlot(ExportPlotArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// TOML file with the column mapping (the `[schema]` table of a config).
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub locations: Option<PathBuf>,
    /// Keep this many sensors with the fewest missing hours.
    #[arg(long)]
    pub select_sensors: Option<usize>,
    /// Panel CSV to write; a `.sensors.json` sidecar is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub panel: Option<PathBuf>,
    /// Candidate cluster counts, e.g. `2,3,4,5`.
    #[arg(long, value_delimiter = ',')]
    pub k_range: Option<Vec<usize>>,
    #[arg(long)]
    pub runs: Option<usize>,
    /// Tukey fence multiplier.
    #[arg(long)]
    pub q: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BuildGraphArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub panel: Option<PathBuf>,
    /// Rescaled medoid week written by `preprocess`.
    #[arg(long)]
    pub medoid: Option<PathBuf>,
    /// Sensor coordinates, if the panel sidecar lacks them.
    #[arg(long)]
    pub locations: Option<PathBuf>,
    #[arg(long, allow_hyphen_values = true)]
    pub kappa: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub beta: Option<f64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum)]
    pub model: Option<ModelName>,
    #[arg(long)]
    pub panel: Option<PathBuf>,
    #[arg(long)]
    pub graph: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum)]
    pub model: Option<ModelName>,
    #[arg(long)]
    pub panel: Option<PathBuf>,
    #[arg(long)]
    pub graph: Option<PathBuf>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub panel: Option<PathBuf>,
    /// Overrides the graph directory stored in the checkpoint.
    #[arg(long)]
    pub graph: Option<PathBuf>,
    /// 1-based horizons to report, e.g. `1,2,3,4,5`.
    #[arg(long, value_delimiter = ',')]
    pub horizons: Option<Vec<usize>>,
    /// Metrics CSV; defaults to `metrics.csv` next to the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ForecastArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub panel: Option<PathBuf>,
    #[arg(long)]
    pub graph: Option<PathBuf>,
    /// Hours to forecast; defaults to the trained output length.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportPlotArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub panel: Option<PathBuf>,
    #[arg(long)]
    pub graph: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub sensors: Vec<String>,
    /// Weeks of the test segment to plot.
    #[arg(long, default_value_t = 1)]
    pub weeks: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest(a) => commands::ingest(a),
        Command::Preprocess(a) => commands::preprocess(a),
        Command::BuildGraph(a) => commands::build_graph(a),
        Command::Train(a) => commands::train(a),
        Command::Grid(a) => commands::grid(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Forecast(a) => commands::forecast(a),
        Command::ExportPlot(a) => commands::export_plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use pedflow::Error as E;
    let Some(e) = err.chain().find_map(|c| c.downcast_ref::<E>()) else {
        return 1;
    };
    match e {
        E::InputNotFound(_) => 2,
        E::Parse { .. } | E::DuplicateObservation { .. } | E::Csv(_) => 3,
        E::InvalidGraph(_) => 4,
        E::FingerprintMismatch { .. } => 5,
        E::UnknownSensor(_) => 6,
        _ => 1,
    }
}
