//! Spatio-temporal forecasting of hourly pedestrian counts on a sensor graph.
//!
//! The crate covers the whole pipeline:
//!
//! * [`ingest`]: CSV loading, sensor selection, hour-of-day imputation,
//!   chronological splits, sliding windows and z-score normalization.
//! * [`dtw`]: exact dynamic time warping.
//! * [`clustering`]: week slicing, k-medoids over week distances, silhouette
//!   based selection of `k` and Tukey removal of abnormal weeks.
//! * [`graph`]: thresholded Gaussian kernel adjacencies (geographic and
//!   DTW based), their weighted combination and diffusion transition matrices.
//! * [`model`]: a small tape-based reverse-mode autodiff engine and the
//!   GRU / DCGRU sequence-to-sequence forecaster built on top of it.
//! * [`training`]: losses, Adam, scheduled sampling, the epoch loop, grid
//!   search, per-horizon metrics and the VAR baseline.

pub mod clustering;
pub mod dtw;
pub mod error;
pub mod graph;
pub mod ingest;
pub mod matrix_io;
pub mod model;
pub mod training;

pub use error::{Error, Result};
