//! The run artifact written by `train` and `grid` and read by every
//! downstream command.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pedflow::graph::{combine_adjacency, SensorGraph};
use pedflow::ingest::{Normalizer, SplitSpec};
use pedflow::model::{ModelCheckpoint, Seq2SeqModel, Supports};
use pedflow::training::{Forecaster, NeuralForecaster, VarFit};
use serde::{Deserialize, Serialize};

use crate::config::ModelName;

pub const ARTIFACT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TrainedModel {
    Neural(ModelCheckpoint),
    Var(VarFit),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifact {
    pub format_version: u32,
    pub model: ModelName,
    pub l_in: usize,
    pub l_out: usize,
    pub split: SplitSpec,
    /// Present for neural models, which train on normalized values.
    pub normalizer: Option<Normalizer>,
    /// Graph directory the model was trained against, as given on the command line.
    pub graph_dir: Option<PathBuf>,
    /// Weight of the DTW adjacency used to rebuild the graph.
    pub beta: f64,
    pub trained: TrainedModel,
    pub best_epoch: Option<usize>,
    pub val_loss: Option<f64>,
}

impl RunArtifact {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).context("serializing checkpoint")?;
        text.push('\n');
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                anyhow::Error::new(pedflow::Error::InputNotFound(path.to_path_buf()))
            } else {
                anyhow::Error::new(e).context(format!("reading {}", path.display()))
            }
        })?;
        let artifact: Self =
            serde_json::from_str(&text).with_context(|| format!("invalid checkpoint {}", path.display()))?;
        if artifact.format_version != ARTIFACT_FORMAT_VERSION {
            bail!(
                "checkpoint format version {} is not supported (expected {ARTIFACT_FORMAT_VERSION})",
                artifact.format_version
            );
        }
        Ok(artifact)
    }

    /// Restores a forecaster. `graph_dir` overrides the stored graph path.
    pub fn restore(&self, graph_dir: Option<&Path>) -> Result<LoadedModel> {
        match &self.trained {
            TrainedModel::Var(fit) => Ok(LoadedModel::Var(fit.clone())),
            TrainedModel::Neural(ckpt) => {
                let supports = if ckpt.graph_fingerprint.is_some() {
                    let dir = graph_dir
                        .or(self.graph_dir.as_deref())
                        .context("this model needs a graph; pass --graph")?;
                    let graph = load_graph(dir, self.beta)?;
                    Some(Supports::from_graph(&graph, ckpt.shape.k_max)?)
                } else {
                    None
                };
                let model = ckpt.to_model(supports)?;
                let normalizer = self.normalizer.clone().context("neural checkpoint lacks a normalizer")?;
                Ok(LoadedModel::Neural { model, normalizer })
            }
        }
    }
}

pub enum LoadedModel {
    Var(VarFit),
    Neural { model: Seq2SeqModel, normalizer: Normalizer },
}

impl LoadedModel {
    pub fn forecaster(&self) -> Box<dyn Forecaster + '_> {
        match self {
            LoadedModel::Var(fit) => Box::new(fit.clone()),
            LoadedModel::Neural { model, normalizer } => Box::new(NeuralForecaster { model, normalizer }),
        }
    }
}

/// Loads a saved graph and recombines its two adjacencies with `beta`.
pub fn load_graph(dir: &Path, beta: f64) -> Result<SensorGraph> {
    if !dir.exists() {
        return Err(pedflow::Error::InputNotFound(dir.to_path_buf()).into());
    }
    let saved = SensorGraph::load(dir)?;
    Ok(combine_adjacency(saved.sensor_ids, saved.w_geo, saved.w_ts, beta)?)
}
