//! Loss, optimizer, training loop, grid search, evaluation and the VAR
//! baseline.

pub mod grid;
pub mod metrics;
pub mod optim;
pub mod trainer;
pub mod var;

pub use grid::{grid_search, CellResult, GridData, GridEvent, GridPoint, GridReport, GridSpec, RepeatResult};
pub use metrics::{evaluate, forecast_windows, mae_loss, Forecaster, HorizonMetrics, MetricsReport, NeuralForecaster};
pub use optim::{adam_step, sampling_probability, AdamConfig, AdamState};
pub use trainer::{train, validation_loss, LogRecord, RecordKind, TrainConfig, TrainLog, TrainOutcome};
pub use var::{var_fit, var_forecast, var_order_select, OrderSelection, VarFit};
