//! Exact, unconstrained dynamic time warping.
//!
//! The warping step set is `{(1,0), (0,1), (1,1)}` with both boundary points
//! anchored, so the distance is symmetric and `dtw(x, x) == 0`.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pointwise cost between two scalar observations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalCost {
    #[default]
    Absolute,
    Squared,
}

impl LocalCost {
    #[inline]
    pub fn eval(self, a: f64, b: f64) -> f64 {
        match self {
            LocalCost::Absolute => (a - b).abs(),
            LocalCost::Squared => (a - b) * (a - b),
        }
    }
}

/// A nonempty series of finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct Series(Vec<f64>);

impl Series {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptySeries);
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidArgument("series contains non-finite points".into()));
        }
        Ok(Self(points))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for Series {
    type Error = Error;

    fn try_from(points: Vec<f64>) -> Result<Self> {
        Series::new(points)
    }
}

/// Zero-based index pairs from `(0, 0)` to `(n - 1, m - 1)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WarpingPath(Vec<(usize, usize)>);

impl WarpingPath {
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.0
    }

    /// Checks boundary, monotonicity and step-size conditions for series of
    /// lengths `n` and `m`.
    pub fn is_valid(&self, n: usize, m: usize) -> bool {
        let p = &self.0;
        if p.first() != Some(&(0, 0)) || p.last() != Some(&(n - 1, m - 1)) {
            return false;
        }
        p.windows(2).all(|w| {
            let di = w[1].0 as isize - w[0].0 as isize;
            let dj = w[1].1 as isize - w[0].1 as isize;
            matches!((di, dj), (1, 0) | (0, 1) | (1, 1))
        })
    }

    /// Sum of local costs along the path.
    pub fn cost(&self, x: &[f64], y: &[f64], cost: LocalCost) -> f64 {
        self.0.iter().map(|&(i, j)| cost.eval(x[i], y[j])).sum()
    }
}

fn check(x: &[f64], y: &[f64]) -> Result<()> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::EmptySeries);
    }
    Ok(())
}

/// DTW distance using two rolling rows of the cumulative cost table.
pub fn dtw_distance(x: &[f64], y: &[f64], cost: LocalCost) -> Result<f64> {
    check(x, y)?;
    // Iterate over the longer series in the outer loop; the table is symmetric
    // under transposition so the result does not change.
    let (outer, inner) = if x.len() >= y.len() { (x, y) } else { (y, x) };
    let m = inner.len();
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut curr = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for &a in outer {
        curr[0] = f64::INFINITY;
        for j in 1..=m {
            let best = prev[j - 1].min(prev[j]).min(curr[j - 1]);
            curr[j] = cost.eval(a, inner[j - 1]) + best;
        }
        std::mem::swap(&mut prev, &mut curr);
        prev[0] = f64::INFINITY;
    }
    Ok(prev[m])
}

/// DTW distance together with one optimal warping path.
///
/// Backtracking prefers the diagonal step, then a step in `x`, then in `y`.
pub fn dtw_path(x: &[f64], y: &[f64], cost: LocalCost) -> Result<(f64, WarpingPath)> {
    check(x, y)?;
    let (n, m) = (x.len(), y.len());
    let mut table = Array2::from_elem((n + 1, m + 1), f64::INFINITY);
    table[[0, 0]] = 0.0;
    for i in 1..=n {
        for j in 1..=m {
            let best = table[[i - 1, j - 1]]
                .min(table[[i - 1, j]])
                .min(table[[i, j - 1]]);
            table[[i, j]] = cost.eval(x[i - 1], y[j - 1]) + best;
        }
    }
    let mut path = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n, m);
    while (i, j) != (1, 1) {
        let diag = table[[i - 1, j - 1]];
        let up = table[[i - 1, j]];
        let left = table[[i, j - 1]];
        if diag <= up && diag <= left {
            i -= 1;
            j -= 1;
        } else if up <= left {
            i -= 1;
        } else {
            j -= 1;
        }
        path.push((i - 1, j - 1));
    }
    path.reverse();
    Ok((table[[n, m]], WarpingPath(path)))
}

/// Symmetric matrix of DTW distances between every pair of series.
///
/// Upper-triangle entries are computed in parallel; each entry is independent
/// so the result does not depend on scheduling.
pub fn pairwise_dtw<S: AsRef<[f64]> + Sync>(series: &[S], cost: LocalCost) -> Result<Array2<f64>> {
    let n = series.len();
    if let Some(i) = series.iter().position(|s| s.as_ref().is_empty()) {
        return Err(Error::EmptySeriesInPair(i));
    }
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect();
    let values: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| dtw_distance(series[i].as_ref(), series[j].as_ref(), cost))
        .collect::<Result<_>>()?;
    let mut out = Array2::zeros((n, n));
    for (&(i, j), d) in pairs.iter().zip(values) {
        out[[i, j]] = d;
        out[[j, i]] = d;
    }
    Ok(out)
}
