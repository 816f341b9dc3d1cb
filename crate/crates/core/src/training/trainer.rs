use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::mae_loss;
use super::optim::{adam_step, sampling_probability, AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::ingest::WindowSample;
use crate::model::Seq2SeqModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub layers: usize,
    pub hidden: usize,
    pub k_max: usize,
    pub epochs: usize,
    /// Decay constant of the scheduled-sampling probability.
    pub tau: f64,
    /// Overrides the schedule with a constant probability when set.
    pub fixed_eps: Option<f64>,
    pub seed: u64,
    /// Evaluate the samples of a batch on the thread pool. Gradients are
    /// summed in sample order either way, so results do not change.
    pub parallel: bool,
    /// Record elapsed seconds in the log; off keeps logs byte-identical.
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 64,
            layers: 2,
            hidden: 64,
            k_max: 2,
            epochs: 50,
            tau: 3000.0,
            fixed_eps: None,
            seed: 0,
            parallel: true,
            log_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate {} is not positive", self.learning_rate)));
        }
        if let Some(e) = self.fixed_eps {
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::InvalidArgument(format!("fixed eps {e} outside [0, 1]")));
            }
        } else {
            sampling_probability(0, self.tau)?;
        }
        Ok(())
    }

    fn eps(&self, iteration: u64) -> Result<f64> {
        match self.fixed_eps {
            Some(e) => Ok(e),
            None => sampling_probability(iteration, self.tau),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Train,
    Validation,
}

/// One log line. Validation records carry the epoch's mean validation loss
/// and no batch index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub kind: RecordKind,
    pub epoch: usize,
    pub batch: Option<usize>,
    pub loss: f64,
    pub eps: f64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn validation_losses(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.kind == RecordKind::Validation)
            .map(|r| r.loss)
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("kind,epoch,batch,loss,eps,wall_secs\n");
        for r in &self.records {
            let kind = match r.kind {
                RecordKind::Train => "train",
                RecordKind::Validation => "val",
            };
            let batch = r.batch.map(|b| b.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{kind},{},{batch},{:?},{:?},{:.3}", r.epoch, r.loss, r.eps, r.wall_secs);
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: Seq2SeqModel,
    /// 1-based.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub log: TrainLog,
}

pub(crate) fn mix_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn check_windows(model: &Seq2SeqModel, windows: &[WindowSample], what: &str) -> Result<()> {
    if windows.is_empty() {
        return Err(Error::InvalidArgument(format!("no {what} windows")));
    }
    let n = model.shape().num_nodes;
    let (l_in, l_out) = (windows[0].input.nrows(), windows[0].target.nrows());
    if windows
        .iter()
        .any(|w| w.input.dim() != (l_in, n) || w.target.dim() != (l_out, n))
    {
        return Err(Error::ShapeMismatch(format!("{what} windows do not all match {l_in}+{l_out} rows by {n} nodes")));
    }
    Ok(())
}

/// Mean autoregressive MAE over `windows` (normalized scale).
pub fn validation_loss(model: &Seq2SeqModel, windows: &[WindowSample], parallel: bool) -> Result<f64> {
    let one = |w: &WindowSample| -> Result<f64> {
        let pred = model.predict(&w.input, w.target.nrows())?;
        Ok(mae_loss(&pred, &w.target)?.0)
    };
    let losses: Vec<f64> = if parallel {
        windows.par_iter().map(one).collect::<Result<_>>()?
    } else {
        windows.iter().map(one).collect::<Result<_>>()?
    };
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Mean loss and summed-then-averaged gradients of one mini-batch.
fn batch_gradients(
    model: &Seq2SeqModel,
    batch: &[&WindowSample],
    eps: f64,
    seed: u64,
    parallel: bool,
) -> Result<(f64, Vec<Array2<f64>>)> {
    let one = |(i, w): (usize, &&WindowSample)| -> Result<(f64, Vec<Array2<f64>>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, i as u64, 0));
        let mut pass = model.forward(&w.input, Some(&w.target), w.target.nrows(), eps, &mut rng)?;
        let (loss, d_pred) = mae_loss(&pass.predictions, &w.target)?;
        Ok((loss, pass.backward(&d_pred)?))
    };
    let per_sample: Vec<_> = if parallel {
        batch.par_iter().enumerate().map(one).collect::<Result<_>>()?
    } else {
        batch.iter().enumerate().map(one).collect::<Result<_>>()?
    };
    let scale = 1.0 / batch.len() as f64;
    let mut iter = per_sample.into_iter();
    let (mut loss, mut grads) = iter.next().expect("nonempty batch");
    for (l, g) in iter {
        loss += l;
        for (acc, gi) in grads.iter_mut().zip(g) {
            *acc += &gi;
        }
    }
    for g in &mut grads {
        g.mapv_inplace(|v| v * scale);
    }
    Ok((loss * scale, grads))
}

/// Trains `model` with Adam on normalized windows and keeps the parameters
/// of the epoch with the lowest validation loss (earliest on ties).
pub fn train(
    mut model: Seq2SeqModel,
    train_windows: &[WindowSample],
    val_windows: &[WindowSample],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_windows(&model, train_windows, "training")?;
    check_windows(&model, val_windows, "validation")?;

    let started = Instant::now();
    let wall = || {
        if config.log_wall_time {
            started.elapsed().as_secs_f64()
        } else {
            0.0
        }
    };
    let adam = AdamConfig::with_learning_rate(config.learning_rate);
    let mut state = AdamState::new(model.params());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 1, 0));
    let mut order: Vec<usize> = (0..train_windows.len()).collect();
    let mut log = TrainLog::default();
    let mut best: Option<(usize, f64, Vec<Array2<f64>>)> = None;
    let mut iteration: u64 = 0;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&WindowSample> = chunk.iter().map(|&i| &train_windows[i]).collect();
            let eps = config.eps(iteration)?;
            let sample_seed = mix_seed(config.seed, 2, iteration);
            let (loss, grads) = batch_gradients(&model, &batch, eps, sample_seed, config.parallel)?;
            if !loss.is_finite() || grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::Diverged { epoch, batch: b, loss });
            }
            adam_step(model.params_mut(), &grads, &mut state, &adam)?;
            log.records.push(LogRecord {
                kind: RecordKind::Train,
                epoch,
                batch: Some(b),
                loss,
                eps,
                wall_secs: wall(),
            });
            iteration += 1;
        }
        let val = validation_loss(&model, val_windows, config.parallel)?;
        if !val.is_finite() {
            return Err(Error::Diverged {
                epoch,
                batch: order.len().div_ceil(config.batch_size),
                loss: val,
            });
        }
        log.records.push(LogRecord {
            kind: RecordKind::Validation,
            epoch,
            batch: None,
            loss: val,
            eps: 0.0,
            wall_secs: wall(),
        });
        if best.as_ref().is_none_or(|(_, l, _)| val < *l) {
            best = Some((epoch, val, model.params().to_vec()));
        }
    }

    let (best_epoch, best_val_loss, params) = best.expect("at least one epoch");
    model.set_params(params)?;
    Ok(TrainOutcome {
        model,
        best_epoch,
        best_val_loss,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::combine_adjacency;
    use crate::model::{CellKind, ModelShape, Supports};

    /// Each node follows a sine with a node-dependent phase; easy to predict.
    fn windows(count: usize, n: usize, offset: usize) -> Vec<WindowSample> {
        (0..count)
            .map(|w| {
                let t0 = offset + w;
                let f = |t: usize, i: usize| ((t as f64) * 0.5 + i as f64).sin();
                WindowSample {
                    input: Array2::from_shape_fn((3, n), |(t, i)| f(t0 + t, i)),
                    target: Array2::from_shape_fn((2, n), |(t, i)| f(t0 + 3 + t, i)),
                    anchor: t0 + 2,
                }
            })
            .collect()
    }

    fn dcgru(n: usize, seed: u64) -> Seq2SeqModel {
        let ids = (0..n).map(|i| format!("s{i}")).collect();
        let w = Array2::from_shape_fn((n, n), |(i, j)| if i.abs_diff(j) == 1 { 1.0 } else { 0.0 });
        let g = combine_adjacency(ids, w, Array2::zeros((n, n)), 0.0).unwrap();
        let shape = ModelShape {
            kind: CellKind::Dcgru,
            num_nodes: n,
            layers: 1,
            hidden: 8,
            k_max: 2,
        };
        Seq2SeqModel::new(shape, Some(Supports::from_graph(&g, 2).unwrap()), seed).unwrap()
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            learning_rate: 0.01,
            batch_size: 8,
            epochs: 6,
            tau: 10.0,
            ..Default::default()
        }
    }

    #[test]
    fn zero_epochs_rejected() {
        let c = TrainConfig { epochs: 0, ..cfg() };
        assert!(train(dcgru(3, 0), &windows(10, 3, 0), &windows(4, 3, 40), &c).is_err());
    }

    #[test]
    fn easy_data_improves_and_keeps_best_epoch() {
        let out = train(dcgru(3, 1), &windows(40, 3, 0), &windows(10, 3, 50), &cfg()).unwrap();
        let val = out.log.validation_losses();
        assert_eq!(val.len(), 6);
        assert!(val[out.best_epoch - 1] < val[0]);
        assert_eq!(out.best_val_loss, val.iter().cloned().fold(f64::INFINITY, f64::min));
        let again = validation_loss(&out.model, &windows(10, 3, 50), false).unwrap();
        assert_eq!(again, out.best_val_loss);
    }

    #[test]
    fn log_is_reproducible_and_mode_independent() {
        let tw = windows(20, 3, 0);
        let vw = windows(5, 3, 30);
        let seq = TrainConfig { parallel: false, ..cfg() };
        let a = train(dcgru(3, 2), &tw, &vw, &seq).unwrap();
        let b = train(dcgru(3, 2), &tw, &vw, &seq).unwrap();
        let c = train(dcgru(3, 2), &tw, &vw, &cfg()).unwrap();
        assert_eq!(a.log.to_text(), b.log.to_text());
        assert_eq!(a.log.to_text(), c.log.to_text());
        assert_eq!(a.model.params(), c.model.params());
    }

    #[test]
    fn frozen_sampling_extremes_run() {
        for e in [0.0, 1.0] {
            let c = TrainConfig { fixed_eps: Some(e), epochs: 2, ..cfg() };
            let out = train(dcgru(3, 3), &windows(12, 3, 0), &windows(4, 3, 20), &c).unwrap();
            assert!(out.log.records.iter().filter(|r| r.kind == RecordKind::Train).all(|r| r.eps == e));
        }
    }

    #[test]
    fn divergence_reported() {
        let mut tw = windows(8, 3, 0);
        tw[0].target[[0, 0]] = f64::NAN;
        let c = TrainConfig { batch_size: 100, ..cfg() };
        let err = train(dcgru(3, 4), &tw, &windows(4, 3, 20), &c).unwrap_err();
        assert!(matches!(err, Error::Diverged { epoch: 1, batch: 0, .. }));
    }
}
