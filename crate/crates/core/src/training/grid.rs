use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{evaluate, MetricsReport, NeuralForecaster};
use super::trainer::{mix_seed, train, TrainConfig};
use crate::error::{Error, Result};
use crate::graph::BETA_GRID;
use crate::ingest::{Normalizer, WindowSample};
use crate::model::Seq2SeqModel;

/// One combination of searched hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub layers: usize,
    pub k_max: usize,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub learning_rates: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub layers: Vec<usize>,
    pub k_max: Vec<usize>,
    pub betas: Vec<f64>,
    pub repeats: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            learning_rates: vec![0.001, 0.005, 0.01],
            batch_sizes: vec![32, 64],
            layers: vec![1, 2],
            k_max: vec![1, 2, 3],
            betas: BETA_GRID.to_vec(),
            repeats: 3,
        }
    }
}

impl GridSpec {
    /// Cartesian product in a fixed nesting order.
    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for &learning_rate in &self.learning_rates {
            for &batch_size in &self.batch_sizes {
                for &layers in &self.layers {
                    for &k_max in &self.k_max {
                        for &beta in &self.betas {
                            out.push(GridPoint {
                                learning_rate,
                                batch_size,
                                layers,
                                k_max,
                                beta,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

/// Windows shared by every grid cell.
#[derive(Debug, Clone, Copy)]
pub struct GridData<'a> {
    /// Normalized.
    pub train: &'a [WindowSample],
    /// Normalized.
    pub val: &'a [WindowSample],
    /// Count scale.
    pub test: &'a [WindowSample],
    pub normalizer: &'a Normalizer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepeatResult {
    pub repeat: usize,
    pub seed: u64,
    /// Best validation loss and its epoch, or the failure message.
    pub outcome: std::result::Result<(f64, usize), String>,
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub point: GridPoint,
    pub repeats: Vec<RepeatResult>,
    /// Index into `repeats` of the chosen run.
    pub selected: Option<usize>,
    pub test: Option<MetricsReport>,
    pub model: Option<Seq2SeqModel>,
}

impl CellResult {
    pub fn val_loss(&self) -> Option<f64> {
        self.selected
            .and_then(|i| self.repeats[i].outcome.as_ref().ok())
            .map(|&(l, _)| l)
    }

    pub fn failed(&self) -> bool {
        self.selected.is_none()
    }
}

/// What happened in a grid run, in order, for auditing that test metrics are
/// only computed after selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridEvent {
    Trained { cell: usize, repeat: usize },
    Selected { cell: usize, repeat: usize },
    Tested { cell: usize },
}

#[derive(Debug, Clone)]
pub struct GridReport {
    pub cells: Vec<CellResult>,
    /// Cell with the lowest selected validation loss (lowest index on ties).
    pub best: Option<usize>,
    pub events: Vec<GridEvent>,
}

impl GridReport {
    /// One row per (cell, repeat); `selected` marks the chosen repeat of
    /// each cell and `best` the overall winner.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "cell,learning_rate,batch_size,layers,k_max,beta,repeat,seed,status,val_loss,best_epoch,selected,best,test_mae_h1,test_mape_h1,test_rmse_h1,test_mae,test_mape,test_rmse\n",
        );
        for (c, cell) in self.cells.iter().enumerate() {
            let p = cell.point;
            for (r, rep) in cell.repeats.iter().enumerate() {
                let selected = cell.selected == Some(r);
                let (status, val, epoch) = match &rep.outcome {
                    Ok((l, e)) => ("ok".to_string(), format!("{l:?}"), e.to_string()),
                    Err(msg) => (format!("failed: {}", msg.replace([',', '\n'], " ")), String::new(), String::new()),
                };
                let test = match (&cell.test, selected) {
                    (Some(t), true) => {
                        let h1 = t.horizons.first().copied().unwrap_or(t.aggregate);
                        let a = t.aggregate;
                        format!("{},{},{},{},{},{}", h1.mae, h1.mape, h1.rmse, a.mae, a.mape, a.rmse)
                    }
                    _ => ",,,,,".to_string(),
                };
                let _ = writeln!(
                    out,
                    "{c},{},{},{},{},{},{},{},{status},{val},{epoch},{},{},{test}",
                    p.learning_rate,
                    p.batch_size,
                    p.layers,
                    p.k_max,
                    p.beta,
                    rep.repeat,
                    rep.seed,
                    u8::from(selected),
                    u8::from(selected && self.best == Some(c)),
                );
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Trains `repeats` seeded runs per grid point, picks each cell's run by
/// validation loss, then evaluates only the picked runs on the test windows.
///
/// `make_model` builds an initialized model for a point and seed (including
/// the graph for that point's `beta` and `k_max`). Cells run in parallel.
/// A failed run is recorded and does not abort the grid.
pub fn grid_search<F>(
    points: &[GridPoint],
    repeats: usize,
    base: &TrainConfig,
    data: GridData<'_>,
    make_model: F,
) -> Result<GridReport>
where
    F: Fn(&GridPoint, u64) -> Result<Seq2SeqModel> + Sync,
{
    if points.is_empty() {
        return Err(Error::InvalidArgument("empty grid".into()));
    }
    if repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be at least 1".into()));
    }

    // Training and selection.
    let trained: Vec<(Vec<RepeatResult>, Option<(usize, Seq2SeqModel)>)> = points
        .par_iter()
        .enumerate()
        .map(|(c, point)| {
            let mut results = Vec::with_capacity(repeats);
            let mut best: Option<(usize, f64, Seq2SeqModel)> = None;
            for r in 0..repeats {
                let seed = mix_seed(base.seed, c as u64, r as u64);
                let cfg = TrainConfig {
                    learning_rate: point.learning_rate,
                    batch_size: point.batch_size,
                    layers: point.layers,
                    k_max: point.k_max,
                    seed,
                    ..base.clone()
                };
                let run = make_model(point, seed).and_then(|m| train(m, data.train, data.val, &cfg));
                let outcome = match run {
                    Ok(out) => {
                        let l = out.best_val_loss;
                        if best.as_ref().is_none_or(|(_, bl, _)| l < *bl) {
                            best = Some((r, l, out.model));
                        }
                        Ok((l, out.best_epoch))
                    }
                    Err(e) => Err(e.to_string()),
                };
                results.push(RepeatResult {
                    repeat: r,
                    seed,
                    outcome,
                });
            }
            (results, best.map(|(r, _, m)| (r, m)))
        })
        .collect();

    let mut events = Vec::new();
    for (c, (reps, best)) in trained.iter().enumerate() {
        for r in 0..reps.len() {
            events.push(GridEvent::Trained { cell: c, repeat: r });
        }
        if let Some((r, _)) = best {
            events.push(GridEvent::Selected { cell: c, repeat: *r });
        }
    }

    // Test metrics, only for the selected runs.
    let tests: Vec<Option<std::result::Result<MetricsReport, String>>> = trained
        .par_iter()
        .map(|(_, best)| {
            best.as_ref().map(|(_, m)| {
                let f = NeuralForecaster {
                    model: m,
                    normalizer: data.normalizer,
                };
                evaluate(&f, data.test).map_err(|e| e.to_string())
            })
        })
        .collect();

    let mut cells = Vec::with_capacity(points.len());
    for (c, ((mut reps, best), test)) in trained.into_iter().zip(tests).enumerate() {
        let (selected, model) = match best {
            Some((r, m)) => (Some(r), Some(m)),
            None => (None, None),
        };
        let test = match test {
            Some(Ok(t)) => {
                events.push(GridEvent::Tested { cell: c });
                Some(t)
            }
            Some(Err(msg)) => {
                if let Some(r) = selected {
                    reps[r].outcome = Err(format!("evaluation failed: {msg}"));
                }
                None
            }
            None => None,
        };
        let selected = if test.is_some() { selected } else { None };
        cells.push(CellResult {
            point: points[c],
            repeats: reps,
            selected,
            test,
            model: if selected.is_some() { model } else { None },
        });
    }

    let best = cells
        .iter()
        .enumerate()
        .filter_map(|(c, cell)| cell.val_loss().map(|l| (c, l)))
        .fold(None, |acc: Option<(usize, f64)>, (c, l)| match acc {
            Some((_, bl)) if bl <= l => acc,
            _ => Some((c, l)),
        })
        .map(|(c, _)| c);

    Ok(GridReport { cells, best, events })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Normalizer;
    use crate::model::{CellKind, ModelShape};
    use ndarray::Array2;

    fn windows(count: usize, offset: usize, scale: f64) -> Vec<WindowSample> {
        (0..count)
            .map(|w| {
                let f = |t: usize, i: usize| scale * ((t as f64) * 0.4 + i as f64).sin();
                WindowSample {
                    input: Array2::from_shape_fn((3, 2), |(t, i)| f(offset + w + t, i)),
                    target: Array2::from_shape_fn((2, 2), |(t, i)| f(offset + w + 3 + t, i)),
                    anchor: offset + w + 2,
                }
            })
            .collect()
    }

    fn identity_normalizer() -> Normalizer {
        Normalizer::new(vec!["s0".into(), "s1".into()], vec![0.0, 0.0], vec![1.0, 1.0]).unwrap()
    }

    fn gru(point: &GridPoint, seed: u64, hidden: usize) -> Result<Seq2SeqModel> {
        let shape = ModelShape {
            kind: CellKind::Gru,
            num_nodes: 2,
            layers: point.layers,
            hidden,
            k_max: point.k_max,
        };
        Seq2SeqModel::new(shape, None, seed)
    }

    #[test]
    fn spec_default_grid_size() {
        assert_eq!(GridSpec::default().points().len(), 3 * 2 * 2 * 3 * 9);
    }

    #[test]
    fn selection_uses_validation_and_tests_after() {
        let norm = identity_normalizer();
        let tw = windows(16, 0, 1.0);
        let vw = windows(6, 30, 1.0);
        // Test targets come from a different regime; selection must not see it.
        let test = windows(6, 50, 3.0);
        let data = GridData {
            train: &tw,
            val: &vw,
            test: &test,
            normalizer: &norm,
        };
        let points = vec![
            GridPoint { learning_rate: 0.01, batch_size: 4, layers: 1, k_max: 1, beta: 0.0 },
            GridPoint { learning_rate: 0.01, batch_size: 4, layers: 2, k_max: 1, beta: 0.0 },
        ];
        let base = TrainConfig { epochs: 3, tau: 5.0, ..Default::default() };
        let report = grid_search(&points, 2, &base, data, |p, s| gru(p, s, 4)).unwrap();
        assert_eq!(report.cells.len(), 2);
        for (c, cell) in report.cells.iter().enumerate() {
            let sel = cell.selected.unwrap();
            let best_val = cell
                .repeats
                .iter()
                .map(|r| r.outcome.as_ref().unwrap().0)
                .fold(f64::INFINITY, f64::min);
            assert_eq!(cell.val_loss().unwrap(), best_val);
            assert_eq!(cell.repeats[sel].outcome.as_ref().unwrap().0, best_val);
            let tested = report.events.iter().position(|e| *e == GridEvent::Tested { cell: c }).unwrap();
            let last_train = report
                .events
                .iter()
                .rposition(|e| matches!(e, GridEvent::Trained { .. } | GridEvent::Selected { .. }))
                .unwrap();
            assert!(tested > last_train);
        }
        let best = report.best.unwrap();
        let other = 1 - best;
        assert!(report.cells[best].val_loss().unwrap() <= report.cells[other].val_loss().unwrap());
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 1 + 4);
    }

    #[test]
    fn failed_cells_are_marked() {
        let norm = identity_normalizer();
        let tw = windows(8, 0, 1.0);
        let data = GridData { train: &tw, val: &tw, test: &tw, normalizer: &norm };
        let points = vec![
            GridPoint { learning_rate: 0.01, batch_size: 4, layers: 1, k_max: 1, beta: 0.0 },
            GridPoint { learning_rate: 0.01, batch_size: 4, layers: 3, k_max: 1, beta: 0.0 },
        ];
        let base = TrainConfig { epochs: 1, ..Default::default() };
        let report = grid_search(&points, 1, &base, data, |p, s| gru(p, s, 3)).unwrap();
        assert!(!report.cells[0].failed());
        assert!(report.cells[1].failed());
        assert_eq!(report.best, Some(0));
        assert!(report.to_csv().contains("failed"));
    }
}
