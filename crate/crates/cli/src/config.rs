use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use pedflow::clustering::AnomalyConfig;
use pedflow::graph::GraphConfig;
use pedflow::ingest::{CountSchema, SplitSpec};
use pedflow::training::{GridSpec, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ModelName {
    Var,
    Gru,
    Dcgru,
    DcgruDtw,
}

impl fmt::Display for ModelName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelName::Var => "var",
            ModelName::Gru => "gru",
            ModelName::Dcgru => "dcgru",
            ModelName::DcgruDtw => "dcgru-dtw",
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Raw count CSV.
    pub input: Option<PathBuf>,
    /// `sensor_id,latitude,longitude[,name]` CSV.
    pub locations: Option<PathBuf>,
    /// Panel used for training and evaluation.
    pub panel: Option<PathBuf>,
    /// Rescaled medoid week for the DTW adjacency.
    pub medoid: Option<PathBuf>,
    /// Directory written by `build-graph`.
    pub graph: Option<PathBuf>,
    /// Run directory for `train` and `grid`.
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestOptions {
    /// Keep only this many sensors, those with the fewest missing hours.
    pub select_sensors: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub l_in: usize,
    pub l_out: usize,
    pub step: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            l_in: 12,
            l_out: 5,
            step: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VarOptions {
    pub orders: Vec<usize>,
    pub folds: usize,
}

impl Default for VarOptions {
    fn default() -> Self {
        Self {
            orders: vec![1, 2, 3],
            folds: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub horizons: Vec<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            horizons: vec![1, 2, 3, 4, 5],
        }
    }
}

/// Everything a run needs. Loaded from TOML; every key can be overridden
/// with `--set section.key=value` or a dedicated flag.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<ModelName>,
    pub paths: Paths,
    pub schema: CountSchema,
    pub ingest: IngestOptions,
    pub preprocess: AnomalyConfig,
    pub graph: GraphConfig,
    pub window: WindowConfig,
    pub split: SplitSpec,
    pub train: TrainConfig,
    pub var: VarOptions,
    pub grid: GridSpec,
    pub evaluate: EvalOptions,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                anyhow::Error::new(pedflow::Error::InputNotFound(path.to_path_buf()))
            } else {
                anyhow::Error::new(e).context(format!("reading {}", path.display()))
            }
        })?;
        toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    /// Applies `key.path=value` overrides. Values are parsed as TOML and
    /// fall back to plain strings.
    pub fn with_overrides(self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self);
        }
        let mut root = toml::Table::try_from(&self).context("serializing config")?;
        for item in overrides {
            let Some((key, raw)) = item.split_once('=') else {
                bail!("override `{item}` is not of the form key=value");
            };
            let value = parse_value(raw.trim());
            set_path(&mut root, key.trim(), value).with_context(|| format!("applying override `{item}`"))?;
        }
        root.try_into().context("config after overrides is invalid")
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serializing config")
    }

    /// Writes the effective configuration into `dir`.
    pub fn echo(&self, dir: &Path, name: &str) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(name);
        std::fs::write(&path, self.to_toml()?).with_context(|| format!("writing {}", path.display()))
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut table = root;
    for p in parents {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .with_context(|| format!("`{p}` is not a section"))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = RunConfig::default();
        let text = c.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_apply_and_unknown_keys_fail() {
        let c = RunConfig::default()
            .with_overrides(&["train.epochs=3".into(), "graph.beta=0.5".into(), "model=\"gru\"".into()])
            .unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.graph.beta, 0.5);
        assert_eq!(c.model, Some(ModelName::Gru));
        assert!(RunConfig::default().with_overrides(&["train.nope=1".into()]).is_err());
        assert!(toml::from_str::<RunConfig>("bogus = 1").is_err());
    }

    #[test]
    fn bare_strings_accepted() {
        let c = RunConfig::default().with_overrides(&["paths.panel=data/p.csv".into()]).unwrap();
        assert_eq!(c.paths.panel, Some(PathBuf::from("data/p.csv")));
    }
}
