use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Normalizer, WindowSample};
use crate::model::Seq2SeqModel;

/// Mean absolute error and its gradient with respect to `pred`.
///
/// The subgradient at exact ties is zero.
pub fn mae_loss(pred: &Array2<f64>, target: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    if pred.dim() != target.dim() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?}, target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let count = pred.len() as f64;
    if pred.is_empty() {
        return Err(Error::InvalidArgument("empty prediction".into()));
    }
    let diff = pred - target;
    let loss = diff.iter().map(|d| d.abs()).sum::<f64>() / count;
    let grad = diff.mapv(|d| {
        if d > 0.0 {
            1.0 / count
        } else if d < 0.0 {
            -1.0 / count
        } else {
            0.0
        }
    });
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    /// Hours ahead; 0 for the aggregate over all horizons.
    pub horizon: usize,
    pub mae: f64,
    /// Percentage over cells with nonzero truth.
    pub mape: f64,
    pub rmse: f64,
    pub count: usize,
    /// Cells left out of MAPE because the true count is zero.
    pub mape_excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub horizons: Vec<HorizonMetrics>,
    pub aggregate: HorizonMetrics,
}

#[derive(Debug, Default, Clone, Copy)]
struct Acc {
    abs: f64,
    sq: f64,
    pct: f64,
    count: usize,
    pct_count: usize,
    excluded: usize,
}

impl Acc {
    fn push(&mut self, pred: f64, truth: f64) {
        let e = pred - truth;
        self.abs += e.abs();
        self.sq += e * e;
        self.count += 1;
        if truth == 0.0 {
            self.excluded += 1;
        } else {
            self.pct += (e / truth).abs();
            self.pct_count += 1;
        }
    }

    fn finish(&self, horizon: usize) -> HorizonMetrics {
        let n = self.count.max(1) as f64;
        HorizonMetrics {
            horizon,
            mae: self.abs / n,
            mape: if self.pct_count == 0 {
                f64::NAN
            } else {
                100.0 * self.pct / self.pct_count as f64
            },
            rmse: (self.sq / n).sqrt(),
            count: self.count,
            mape_excluded: self.excluded,
        }
    }
}

impl MetricsReport {
    /// Metrics from paired `steps × N` predictions and truths in count scale.
    pub fn from_pairs(preds: &[Array2<f64>], truths: &[Array2<f64>]) -> Result<Self> {
        if preds.len() != truths.len() || preds.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{} predictions for {} targets",
                preds.len(),
                truths.len()
            )));
        }
        let steps = truths[0].nrows();
        let mut per = vec![Acc::default(); steps];
        let mut all = Acc::default();
        for (p, t) in preds.iter().zip(truths) {
            if p.dim() != t.dim() || t.nrows() != steps {
                return Err(Error::ShapeMismatch(format!("prediction {:?}, target {:?}", p.dim(), t.dim())));
            }
            for (h, acc) in per.iter_mut().enumerate() {
                for (&pv, &tv) in p.row(h).iter().zip(t.row(h)) {
                    acc.push(pv, tv);
                    all.push(pv, tv);
                }
            }
        }
        Ok(Self {
            horizons: per.iter().enumerate().map(|(h, a)| a.finish(h + 1)).collect(),
            aggregate: all.finish(0),
        })
    }

    pub fn horizon(&self, h: usize) -> Option<&HorizonMetrics> {
        self.horizons.iter().find(|m| m.horizon == h)
    }

    /// Keeps only the listed horizons (1-based), in the given order.
    pub fn restrict(&self, horizons: &[usize]) -> Result<Self> {
        let picked = horizons
            .iter()
            .map(|&h| {
                self.horizon(h)
                    .copied()
                    .ok_or_else(|| Error::InvalidArgument(format!("horizon {h} not available")))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            horizons: picked,
            aggregate: self.aggregate,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("horizon,mae,mape,rmse,count,mape_excluded\n");
        for m in self.horizons.iter().chain(std::iter::once(&self.aggregate)) {
            let label = if m.horizon == 0 { "all".to_string() } else { m.horizon.to_string() };
            let _ = writeln!(out, "{label},{},{},{},{},{}", m.mae, m.mape, m.rmse, m.count, m.mape_excluded);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Anything that turns a window of observed counts into count forecasts.
pub trait Forecaster: Sync {
    /// `input` is `l_in × N` in count scale; returns `steps × N` counts.
    fn forecast(&self, input: &Array2<f64>, steps: usize) -> Result<Array2<f64>>;
}

/// A sequence model trained on normalized values.
#[derive(Debug, Clone, Copy)]
pub struct NeuralForecaster<'a> {
    pub model: &'a Seq2SeqModel,
    pub normalizer: &'a Normalizer,
}

impl Forecaster for NeuralForecaster<'_> {
    fn forecast(&self, input: &Array2<f64>, steps: usize) -> Result<Array2<f64>> {
        let x = self.normalizer.normalize_array(input)?;
        let y = self.model.predict(&x, steps)?;
        self.normalizer.denormalize_array(&y)
    }
}

/// Autoregressive forecasts for every window, in window order.
pub fn forecast_windows(model: &dyn Forecaster, windows: &[WindowSample]) -> Result<Vec<Array2<f64>>> {
    windows
        .par_iter()
        .map(|w| model.forecast(&w.input, w.target.nrows()))
        .collect()
}

/// Per-horizon metrics of `model` on count-scale windows.
pub fn evaluate(model: &dyn Forecaster, windows: &[WindowSample]) -> Result<MetricsReport> {
    if windows.is_empty() {
        return Err(Error::InvalidArgument("no evaluation windows".into()));
    }
    let preds = forecast_windows(model, windows)?;
    let truths: Vec<_> = windows.iter().map(|w| w.target.clone()).collect();
    MetricsReport::from_pairs(&preds, &truths)
}
