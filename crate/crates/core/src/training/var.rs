//! Vector autoregression fitted by per-equation least squares.

use nalgebra::DMatrix;
use ndarray::{s, Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::metrics::Forecaster;
use crate::error::{Error, Result};

/// `x_t = c + A_1 x_{t-1} + ... + A_p x_{t-p} + e_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarFit {
    pub order: usize,
    pub intercept: Array1<f64>,
    /// `coefs[l]` is the `N × N` matrix for lag `l + 1`.
    pub coefs: Vec<Array2<f64>>,
    pub intercept_se: Array1<f64>,
    pub coef_se: Vec<Array2<f64>>,
    /// Per-equation residual variance.
    pub residual_variance: Array1<f64>,
}

impl VarFit {
    pub fn num_series(&self) -> usize {
        self.intercept.len()
    }

    /// Prediction for the row after `history`, using its last `order` rows.
    fn one_step(&self, history: &[Array1<f64>]) -> Array1<f64> {
        let mut out = self.intercept.clone();
        for (lag, a) in self.coefs.iter().enumerate() {
            out += &a.dot(&history[history.len() - 1 - lag]);
        }
        out
    }
}

fn design(values: ArrayView2<'_, f64>, order: usize, rows: std::ops::Range<usize>) -> Array2<f64> {
    let n = values.ncols();
    let mut z = Array2::zeros((rows.len(), 1 + n * order));
    for (r, t) in rows.enumerate() {
        z[[r, 0]] = 1.0;
        for lag in 1..=order {
            z.slice_mut(s![r, 1 + (lag - 1) * n..1 + lag * n])
                .assign(&values.row(t - lag));
        }
    }
    z
}

/// Fits a VAR of the given order to the `T × N` series.
pub fn var_fit(values: ArrayView2<'_, f64>, order: usize) -> Result<VarFit> {
    let (t, n) = values.dim();
    if order == 0 {
        return Err(Error::InvalidArgument("VAR order must be at least 1".into()));
    }
    let k = 1 + n * order;
    if t <= order || t - order <= k {
        return Err(Error::NotEnoughData(format!(
            "{t} rows cannot identify a VAR({order}) on {n} series"
        )));
    }
    let z = design(values, order, order..t);
    let y = values.slice(s![order.., ..]).to_owned();
    let ztz = z.t().dot(&z);
    let zty = z.t().dot(&y);

    let gram = DMatrix::from_fn(k, k, |i, j| ztz[[i, j]]);
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::SingularDesign(format!("VAR({order}) design is rank deficient")))?;
    let rhs = DMatrix::from_fn(k, n, |i, j| zty[[i, j]]);
    let beta = chol.solve(&rhs);
    let inv = chol.inverse();
    if beta.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularDesign(format!("VAR({order}) solution is not finite")));
    }
    let b = Array2::from_shape_fn((k, n), |(i, j)| beta[(i, j)]);

    let resid = &y - &z.dot(&b);
    let dof = (t - order - k) as f64;
    let residual_variance = resid.map_axis(ndarray::Axis(0), |c| c.iter().map(|e| e * e).sum::<f64>() / dof);
    let se = Array2::from_shape_fn((k, n), |(i, j)| (residual_variance[j] * inv[(i, i)]).max(0.0).sqrt());

    // Row 1 + (lag-1)*n + m of `b` holds the effect of series m at that lag
    // on equation j, i.e. entry (j, m) of A_lag.
    let unpack = |m: &Array2<f64>, lag: usize| {
        m.slice(s![1 + lag * n..1 + (lag + 1) * n, ..]).t().to_owned()
    };
    Ok(VarFit {
        order,
        intercept: b.row(0).to_owned(),
        coefs: (0..order).map(|l| unpack(&b, l)).collect(),
        intercept_se: se.row(0).to_owned(),
        coef_se: (0..order).map(|l| unpack(&se, l)).collect(),
        residual_variance,
    })
}

/// Iterated forecasts for `steps` rows after `history` (`≥ order` rows).
pub fn var_forecast(fit: &VarFit, history: ArrayView2<'_, f64>, steps: usize) -> Result<Array2<f64>> {
    let n = fit.num_series();
    if history.ncols() != n {
        return Err(Error::ShapeMismatch(format!(
            "history has {} series, model has {n}",
            history.ncols()
        )));
    }
    if history.nrows() < fit.order {
        return Err(Error::NotEnoughData(format!(
            "VAR({}) needs {} history rows, got {}",
            fit.order,
            fit.order,
            history.nrows()
        )));
    }
    let mut buf: Vec<Array1<f64>> = history
        .slice(s![history.nrows() - fit.order.., ..])
        .rows()
        .into_iter()
        .map(|r| r.to_owned())
        .collect();
    let mut out = Array2::zeros((steps, n));
    for h in 0..steps {
        let next = fit.one_step(&buf);
        out.row_mut(h).assign(&next);
        buf.push(next);
    }
    Ok(out)
}

impl Forecaster for VarFit {
    fn forecast(&self, input: &Array2<f64>, steps: usize) -> Result<Array2<f64>> {
        var_forecast(self, input.view(), steps)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderSelection {
    pub order: usize,
    /// `(order, mean validation MAE)` for every candidate that was scored.
    pub scores: Vec<(usize, f64)>,
}

/// Picks the order with the lowest rolling-origin one-step MAE.
///
/// The first half of the series is the initial training span; the rest is
/// split into `folds` consecutive blocks. For each block the model is refit
/// on everything before it and scored on one-step forecasts inside it. Ties
/// go to the smaller order.
pub fn var_order_select(values: ArrayView2<'_, f64>, candidates: &[usize], folds: usize) -> Result<OrderSelection> {
    let mut orders = candidates.to_vec();
    orders.sort_unstable();
    orders.dedup();
    match orders.as_slice() {
        [] => return Err(Error::InvalidArgument("no candidate orders".into())),
        [only] => {
            return Ok(OrderSelection {
                order: *only,
                scores: Vec::new(),
            })
        }
        _ => {}
    }
    if folds == 0 {
        return Err(Error::InvalidArgument("folds must be at least 1".into()));
    }
    let t = values.nrows();
    let initial = t / 2;
    let block = (t - initial) / folds;
    if block == 0 {
        return Err(Error::NotEnoughData(format!("{t} rows cannot hold {folds} validation folds")));
    }
    let max_order = *orders.last().expect("nonempty");
    if initial <= max_order {
        return Err(Error::NotEnoughData(format!("{t} rows too short for order {max_order}")));
    }

    let mut scores = Vec::with_capacity(orders.len());
    for &p in &orders {
        let mut total = 0.0;
        for f in 0..folds {
            let origin = initial + f * block;
            let end = if f + 1 == folds { t } else { origin + block };
            let fit = var_fit(values.slice(s![..origin, ..]), p)?;
            let z = design(values, p, origin..end);
            let mut coef = Array2::zeros((1 + values.ncols() * p, values.ncols()));
            coef.row_mut(0).assign(&fit.intercept);
            for (l, a) in fit.coefs.iter().enumerate() {
                coef.slice_mut(s![1 + l * values.ncols()..1 + (l + 1) * values.ncols(), ..])
                    .assign(&a.t());
            }
            let pred = z.dot(&coef);
            let truth = values.slice(s![origin..end, ..]);
            total += (&pred - &truth).iter().map(|e| e.abs()).sum::<f64>() / pred.len() as f64;
        }
        scores.push((p, total / folds as f64));
    }
    Ok(OrderSelection {
        order: lowest_score(&scores),
        scores,
    })
}

/// Order with the lowest score; earlier (smaller) orders win ties.
fn lowest_score(scores: &[(usize, f64)]) -> usize {
    let mut best = scores[0];
    for &(p, s) in &scores[1..] {
        if s < best.1 {
            best = (p, s);
        }
    }
    best.0
}
