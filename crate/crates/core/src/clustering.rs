//! Abnormal-week detection.
//!
//! The panel is cut into 168-hour weeks, each sensor column is min-max
//! rescaled within its week, and weeks are compared by the sum of per-sensor
//! DTW distances. Weeks are clustered with k-medoids, `k` is chosen by the
//! silhouette score, and weeks that sit too far from their reference medoid
//! (Tukey's upper fence) are dropped.

use std::collections::HashMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use chrono::{Datelike, NaiveDateTime, Timelike, Weekday};
use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dtw::{dtw_distance, LocalCost};
use crate::error::{Error, Result};
use crate::ingest::{PanelSeries, TIMESTAMP_FORMAT};

pub const HOURS_PER_WEEK: usize = 168;

/// One rescaled week of data.
#[derive(Debug, Clone, PartialEq)]
pub struct WeekSlice {
    /// `168 x N`, each non-constant column spanning exactly `[0, 1]`.
    pub data: Array2<f64>,
    pub week_index: usize,
    /// First panel row of the week.
    pub start_row: usize,
    pub start: NaiveDateTime,
    /// Per-sensor `(min, max)` before rescaling.
    pub original_range: Vec<(f64, f64)>,
}

impl WeekSlice {
    /// Min-max rescales each column of `raw`. Constant columns become zeros.
    pub fn rescale(
        raw: ArrayView2<'_, f64>,
        week_index: usize,
        start_row: usize,
        start: NaiveDateTime,
    ) -> Self {
        let mut data = raw.to_owned();
        let mut original_range = Vec::with_capacity(raw.ncols());
        for mut col in data.columns_mut() {
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            original_range.push((lo, hi));
            let span = hi - lo;
            if span > 0.0 {
                col.mapv_inplace(|v| (v - lo) / span);
            } else {
                col.fill(0.0);
            }
        }
        Self {
            data,
            week_index,
            start_row,
            start,
            original_range,
        }
    }

    pub fn num_sensors(&self) -> usize {
        self.data.ncols()
    }

    pub fn column(&self, sensor: usize) -> Vec<f64> {
        self.data.column(sensor).to_vec()
    }
}

/// Row of the first week start: the first midnight (optionally on `weekday`)
/// from which a whole contiguous week follows.
fn first_week_start(panel: &PanelSeries, weekday: Option<Weekday>) -> Option<usize> {
    let ts = panel.timestamps();
    (0..ts.len()).find(|&r| {
        ts[r].hour() == 0
            && weekday.is_none_or(|w| ts[r].weekday() == w)
            && r + HOURS_PER_WEEK <= ts.len()
    })
}

/// Cuts a contiguous panel into consecutive rescaled weeks.
///
/// Weeks start at the first midnight (on `week_start` when given); the
/// partial leading and trailing weeks are dropped.
pub fn slice_weeks(panel: &PanelSeries, week_start: Option<Weekday>) -> Result<Vec<WeekSlice>> {
    if panel.len() < HOURS_PER_WEEK {
        return Err(Error::NotEnoughData(format!(
            "panel has {} hours, a week needs {HOURS_PER_WEEK}",
            panel.len()
        )));
    }
    if panel.has_missing() {
        return Err(Error::InvalidArgument(
            "panel has missing values; impute before slicing weeks".into(),
        ));
    }
    if !panel.is_contiguous() {
        return Err(Error::InvalidArgument(
            "week slicing needs a contiguous hourly panel".into(),
        ));
    }
    let first = first_week_start(panel, week_start).ok_or_else(|| {
        Error::NotEnoughData("no complete week aligned to the requested start".into())
    })?;
    let values = panel.values();
    let ts = panel.timestamps();
    let count = (panel.len() - first) / HOURS_PER_WEEK;
    Ok((0..count)
        .map(|w| {
            let row = first + w * HOURS_PER_WEEK;
            WeekSlice::rescale(
                values.slice(ndarray::s![row..row + HOURS_PER_WEEK, ..]),
                w,
                row,
                ts[row],
            )
        })
        .collect())
}

/// Sum over sensors of the DTW distance between matching columns.
pub fn week_distance(a: &WeekSlice, b: &WeekSlice, cost: LocalCost) -> Result<f64> {
    if a.num_sensors() != b.num_sensors() {
        return Err(Error::ShapeMismatch(format!(
            "weeks have {} and {} sensors",
            a.num_sensors(),
            b.num_sensors()
        )));
    }
    let mut total = 0.0;
    for i in 0..a.num_sensors() {
        total += dtw_distance(&a.column(i), &b.column(i), cost)?;
    }
    Ok(total)
}

/// Symmetric, nonnegative, zero-diagonal distances between `W` items.
#[derive(Debug, Clone, PartialEq)]
pub struct WeekDistanceMatrix(Array2<f64>);

impl WeekDistanceMatrix {
    pub fn new(a: Array2<f64>) -> Result<Self> {
        let (r, c) = a.dim();
        if r != c || r == 0 {
            return Err(Error::InvalidDistanceMatrix(format!("shape {r}x{c}")));
        }
        for i in 0..r {
            if a[[i, i]] != 0.0 {
                return Err(Error::InvalidDistanceMatrix(format!("nonzero diagonal at {i}")));
            }
            for j in 0..r {
                let v = a[[i, j]];
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::InvalidDistanceMatrix(format!(
                        "entry ({i},{j}) = {v} is not a nonnegative number"
                    )));
                }
                if v != a[[j, i]] {
                    return Err(Error::InvalidDistanceMatrix(format!(
                        "not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        Ok(Self(a))
    }

    /// Pairwise week distances, computed in parallel.
    pub fn from_weeks(weeks: &[WeekSlice], cost: LocalCost) -> Result<Self> {
        let w = weeks.len();
        let pairs: Vec<(usize, usize)> = (0..w)
            .flat_map(|i| (i + 1..w).map(move |j| (i, j)))
            .collect();
        let values: Vec<f64> = pairs
            .par_iter()
            .map(|&(i, j)| week_distance(&weeks[i], &weeks[j], cost))
            .collect::<Result<_>>()?;
        let mut a = Array2::zeros((w, w));
        for (&(i, j), d) in pairs.iter().zip(values) {
            a[[i, j]] = d;
            a[[j, i]] = d;
        }
        Self::new(a)
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[[i, j]]
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.0
    }
}

/// Result of one k-medoids run.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    /// Medoid item indices, sorted ascending; cluster `c` has medoid `medoids[c]`.
    pub medoids: Vec<usize>,
    /// Cluster label of every item.
    pub labels: Vec<usize>,
    pub total_cost: f64,
    /// Total cost after each assignment step.
    pub cost_history: Vec<f64>,
    pub iterations: usize,
}

impl Clustering {
    pub fn k(&self) -> usize {
        self.medoids.len()
    }

    /// Medoid item index each item is assigned to.
    pub fn assigned_medoid(&self, item: usize) -> usize {
        self.medoids[self.labels[item]]
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k()];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }

    /// Cluster with the most members; ties go to the lower label.
    pub fn largest_cluster(&self) -> usize {
        let sizes = self.cluster_sizes();
        (0..sizes.len())
            .max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a)))
            .expect("at least one cluster")
    }
}

/// Nearest medoid for every item; ties go to the lowest medoid index. A
/// medoid always belongs to its own cluster, so no cluster is empty.
fn assign(distances: &WeekDistanceMatrix, medoids: &[usize]) -> (Vec<usize>, f64) {
    let mut total = 0.0;
    let labels = (0..distances.len())
        .map(|i| {
            if let Some(own) = medoids.iter().position(|&m| m == i) {
                return own;
            }
            let mut best = 0;
            for c in 1..medoids.len() {
                if distances.get(i, medoids[c]) < distances.get(i, medoids[best]) {
                    best = c;
                }
            }
            total += distances.get(i, medoids[best]);
            best
        })
        .collect();
    (labels, total)
}

/// Alternating k-medoids from a given set of initial medoids.
///
/// Each round assigns every item to its nearest medoid and then replaces each
/// cluster's medoid by the member minimizing the summed distance to the rest
/// of the cluster (the current medoid is kept on ties). Stops when the medoids
/// no longer change or after `max_iter` rounds.
pub fn kmedoids_from(
    distances: &WeekDistanceMatrix,
    initial: &[usize],
    max_iter: usize,
) -> Result<Clustering> {
    let w = distances.len();
    let k = initial.len();
    if k == 0 || k > w {
        return Err(Error::InvalidArgument(format!("k = {k} with {w} items")));
    }
    if max_iter == 0 {
        return Err(Error::InvalidArgument("max_iter must be at least 1".into()));
    }
    let mut medoids = initial.to_vec();
    medoids.sort_unstable();
    medoids.dedup();
    if medoids.len() != k || medoids.iter().any(|&m| m >= w) {
        return Err(Error::InvalidArgument(format!(
            "initial medoids {initial:?} must be distinct indices below {w}"
        )));
    }

    let mut cost_history = Vec::new();
    let mut iterations = 0;
    loop {
        let (labels, cost) = assign(distances, &medoids);
        cost_history.push(cost);
        iterations += 1;

        let mut updated = medoids.clone();
        for (c, slot) in updated.iter_mut().enumerate() {
            let members: Vec<usize> = (0..w).filter(|&i| labels[i] == c).collect();
            let within = |cand: usize| members.iter().map(|&j| distances.get(cand, j)).sum::<f64>();
            let mut best = medoids[c];
            let mut best_cost = within(best);
            for &cand in &members {
                let cst = within(cand);
                if cst < best_cost {
                    best = cand;
                    best_cost = cst;
                }
            }
            *slot = best;
        }
        updated.sort_unstable();

        if updated == medoids || iterations >= max_iter {
            let changed = updated != medoids;
            medoids = updated;
            let (labels, total_cost) = assign(distances, &medoids);
            if changed {
                cost_history.push(total_cost);
            }
            return Ok(Clustering {
                medoids,
                labels,
                total_cost,
                cost_history,
                iterations,
            });
        }
        medoids = updated;
    }
}

/// k-medoids with `k` distinct medoids drawn uniformly from `seed`.
pub fn kmedoids(
    distances: &WeekDistanceMatrix,
    k: usize,
    max_iter: usize,
    seed: u64,
) -> Result<Clustering> {
    let w = distances.len();
    if k == 0 || k > w {
        return Err(Error::InvalidArgument(format!("k = {k} with {w} items")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let initial = sample(&mut rng, w, k).into_vec();
    kmedoids_from(distances, &initial, max_iter)
}

/// Per-item silhouette values.
///
/// Members of singleton clusters score 0.
pub fn silhouette_samples(distances: &WeekDistanceMatrix, clustering: &Clustering) -> Result<Vec<f64>> {
    let w = distances.len();
    if clustering.labels.len() != w {
        return Err(Error::ShapeMismatch(format!(
            "clustering covers {} items, distances {w}",
            clustering.labels.len()
        )));
    }
    let k = clustering.k();
    if k < 2 && w > 1 {
        return Err(Error::InvalidArgument(
            "silhouette needs at least two clusters".into(),
        ));
    }
    let sizes = clustering.cluster_sizes();
    Ok((0..w)
        .map(|i| {
            let own = clustering.labels[i];
            if sizes[own] <= 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; k];
            for j in 0..w {
                if j != i {
                    sums[clustering.labels[j]] += distances.get(i, j);
                }
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..k)
                .filter(|&c| c != own && sizes[c] > 0)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let denom = a.max(b);
            if denom > 0.0 {
                (b - a) / denom
            } else {
                0.0
            }
        })
        .collect())
}

/// Mean silhouette over all items, in `[-1, 1]`.
pub fn silhouette(distances: &WeekDistanceMatrix, clustering: &Clustering) -> Result<f64> {
    let s = silhouette_samples(distances, clustering)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

/// Outcome of [`select_k`].
#[derive(Debug, Clone)]
pub struct KSelection {
    pub best_k: usize,
    /// Most frequent clustering among the restarts at `best_k`.
    pub clustering: Clustering,
    /// `(k, best silhouette over restarts)` for every candidate.
    pub scores: Vec<(usize, f64)>,
    /// How many restarts at `best_k` produced the returned clustering.
    pub frequency: usize,
}

/// Seed of restart `run` for candidate `k`.
fn restart_seed(seed: u64, k: usize, run: usize) -> u64 {
    // splitmix64 finalizer over the packed triple
    let mut z = seed
        .wrapping_add((k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((run as u64).wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Chooses `k` by the best silhouette over `runs` seeded restarts per
/// candidate.
///
/// Equal silhouettes prefer the smaller `k`. The returned clustering is the
/// one produced most often at the chosen `k` (ties: higher silhouette, then
/// first seen).
pub fn select_k(
    distances: &WeekDistanceMatrix,
    k_range: &[usize],
    runs: usize,
    max_iter: usize,
    seed: u64,
) -> Result<KSelection> {
    if k_range.is_empty() {
        return Err(Error::InvalidArgument("empty k range".into()));
    }
    if runs == 0 {
        return Err(Error::InvalidArgument("runs must be at least 1".into()));
    }
    let w = distances.len();
    let mut ks = k_range.to_vec();
    ks.sort_unstable();
    ks.dedup();
    if let Some(&bad) = ks.iter().find(|&&k| k < 2 || k > w) {
        return Err(Error::InvalidArgument(format!(
            "k = {bad} outside [2, {w}]"
        )));
    }

    let mut best: Option<(usize, f64, Vec<(Clustering, f64)>)> = None;
    let mut scores = Vec::with_capacity(ks.len());
    for &k in &ks {
        let results: Vec<(Clustering, f64)> = (0..runs)
            .into_par_iter()
            .map(|run| {
                let c = kmedoids(distances, k, max_iter, restart_seed(seed, k, run))?;
                let s = silhouette(distances, &c)?;
                Ok((c, s))
            })
            .collect::<Result<_>>()?;
        let top = results.iter().map(|(_, s)| *s).fold(f64::NEG_INFINITY, f64::max);
        scores.push((k, top));
        if best.as_ref().is_none_or(|(_, s, _)| top > *s) {
            best = Some((k, top, results));
        }
    }
    let (best_k, _, results) = best.expect("k range is nonempty");

    let mut counts: HashMap<&[usize], (usize, usize)> = HashMap::new();
    for (idx, (c, _)) in results.iter().enumerate() {
        counts.entry(c.medoids.as_slice()).or_insert((0, idx)).0 += 1;
    }
    let (&_, &(frequency, pick)) = counts
        .iter()
        .max_by(|(_, &(fa, ia)), (_, &(fb, ib))| {
            fa.cmp(&fb)
                .then(results[ia].1.total_cmp(&results[ib].1))
                .then(ib.cmp(&ia))
        })
        .expect("runs >= 1");
    Ok(KSelection {
        best_k,
        clustering: results[pick].0.clone(),
        scores,
        frequency,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantileMethod {
    /// Linear interpolation between order statistics at position `p (n - 1)`.
    #[default]
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TukeyConfig {
    pub q: f64,
    pub quantile_method: QuantileMethod,
}

impl Default for TukeyConfig {
    fn default() -> Self {
        Self {
            q: 1.5,
            quantile_method: QuantileMethod::Linear,
        }
    }
}

/// Quantile of already sorted values.
pub fn quantile(sorted: &[f64], p: f64, method: QuantileMethod) -> f64 {
    match method {
        QuantileMethod::Linear => {
            let pos = p * (sorted.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}

/// Upper Tukey fence `Q3 + q (Q3 - Q1)`.
pub fn tukey_upper_fence(values: &[f64], config: &TukeyConfig) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("no values for Tukey fence".into()));
    }
    if !(config.q > 0.0) {
        return Err(Error::InvalidArgument(format!("Tukey q must be positive, got {}", config.q)));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q1 = quantile(&sorted, 0.25, config.quantile_method);
    let q3 = quantile(&sorted, 0.75, config.quantile_method);
    Ok(q3 + config.q * (q3 - q1))
}

/// Indices of values strictly above the upper Tukey fence.
pub fn tukey_filter(values: &[f64], config: &TukeyConfig) -> Result<Vec<usize>> {
    let fence = tukey_upper_fence(values, config)?;
    Ok(values
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > fence)
        .map(|(i, _)| i)
        .collect())
}

/// Which medoid a week's outlier distance is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutlierReference {
    /// Distance to the medoid of the largest cluster, one fence over all weeks.
    #[default]
    DominantMedoid,
    /// Distance to the week's own medoid, one fence per cluster.
    NearestMedoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnomalyConfig {
    pub k_range: Vec<usize>,
    pub runs: usize,
    pub max_iter: usize,
    pub seed: u64,
    pub tukey: TukeyConfig,
    pub reference: OutlierReference,
    pub cost: LocalCost,
    pub week_start: Option<Weekday>,
}

impl Default for AnomalyConfig {
    fn default() -> Self {
        Self {
            k_range: vec![2, 3, 4, 5],
            runs: 1000,
            max_iter: 100,
            seed: 0,
            tukey: TukeyConfig::default(),
            reference: OutlierReference::DominantMedoid,
            cost: LocalCost::Absolute,
            week_start: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemovedWeek {
    pub week_index: usize,
    pub start: NaiveDateTime,
    pub distance: f64,
    pub critical_value: f64,
}

#[derive(Debug, Clone)]
pub struct AnomalyReport {
    /// Panel with the flagged weeks deleted.
    pub panel: PanelSeries,
    pub removed: Vec<RemovedWeek>,
    pub weeks: Vec<WeekSlice>,
    pub selection: KSelection,
    /// Medoid week of every cluster, in cluster order.
    pub medoids: Vec<WeekSlice>,
    /// Index into `medoids` of the largest cluster.
    pub dominant: usize,
}

impl AnomalyReport {
    pub fn dominant_medoid(&self) -> &WeekSlice {
        &self.medoids[self.dominant]
    }
}

/// Full abnormal-week pipeline on a contiguous, imputed panel.
///
/// Candidates in `k_range` larger than the number of weeks are skipped.
pub fn remove_abnormal_weeks(panel: &PanelSeries, config: &AnomalyConfig) -> Result<AnomalyReport> {
    let weeks = slice_weeks(panel, config.week_start)?;
    let w = weeks.len();
    let ks: Vec<usize> = config.k_range.iter().copied().filter(|&k| k <= w).collect();
    if ks.is_empty() {
        return Err(Error::NotEnoughData(format!(
            "{w} weeks is too few for k range {:?}",
            config.k_range
        )));
    }
    let distances = WeekDistanceMatrix::from_weeks(&weeks, config.cost)?;
    let selection = select_k(&distances, &ks, config.runs, config.max_iter, config.seed)?;
    let clustering = &selection.clustering;
    let dominant = clustering.largest_cluster();

    let mut removed = Vec::new();
    match config.reference {
        OutlierReference::DominantMedoid => {
            let centre = clustering.medoids[dominant];
            let d: Vec<f64> = (0..w).map(|j| distances.get(j, centre)).collect();
            let fence = tukey_upper_fence(&d, &config.tukey)?;
            for j in tukey_filter(&d, &config.tukey)? {
                removed.push(RemovedWeek {
                    week_index: j,
                    start: weeks[j].start,
                    distance: d[j],
                    critical_value: fence,
                });
            }
        }
        OutlierReference::NearestMedoid => {
            for c in 0..clustering.k() {
                let members: Vec<usize> = (0..w).filter(|&j| clustering.labels[j] == c).collect();
                let d: Vec<f64> = members
                    .iter()
                    .map(|&j| distances.get(j, clustering.medoids[c]))
                    .collect();
                let fence = tukey_upper_fence(&d, &config.tukey)?;
                for i in tukey_filter(&d, &config.tukey)? {
                    let j = members[i];
                    removed.push(RemovedWeek {
                        week_index: j,
                        start: weeks[j].start,
                        distance: d[i],
                        critical_value: fence,
                    });
                }
            }
            removed.sort_by_key(|r| r.week_index);
        }
    }

    let mut keep = vec![true; panel.len()];
    for r in &removed {
        let start = weeks[r.week_index].start_row;
        keep[start..start + HOURS_PER_WEEK].fill(false);
    }
    let rows: Vec<usize> = (0..panel.len()).filter(|&r| keep[r]).collect();
    let cleaned = panel.select_rows(&rows)?;
    let medoids = clustering.medoids.iter().map(|&m| weeks[m].clone()).collect();
    Ok(AnomalyReport {
        panel: cleaned,
        removed,
        medoids,
        dominant,
        selection,
        weeks,
    })
}

/// Medoid week as a panel of rescaled values with the week's timestamps.
pub fn medoid_panel(panel: &PanelSeries, medoid: &WeekSlice) -> Result<PanelSeries> {
    let ts = panel.timestamps()[medoid.start_row..medoid.start_row + HOURS_PER_WEEK].to_vec();
    PanelSeries::complete(medoid.data.clone(), ts, panel.sensors().to_vec())
}

/// Writes `week_index,start,distance,critical_value` rows.
pub fn write_removed_weeks(removed: &[RemovedWeek], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(["week_index", "start", "distance", "critical_value"])?;
    for r in removed {
        w.write_record([
            r.week_index.to_string(),
            r.start.format(TIMESTAMP_FORMAT).to_string(),
            r.distance.to_string(),
            r.critical_value.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dtw::oracle::brute_force_dtw;
    use crate::ingest::test_support::panel_from;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::Rng;

    fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
        fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if cur.len() == k {
                out.push(cur.clone());
                return;
            }
            for i in start..n {
                cur.push(i);
                rec(i + 1, n, k, cur, out);
                cur.pop();
            }
        }
        let mut out = Vec::new();
        rec(0, n, k, &mut Vec::new(), &mut out);
        out
    }

    fn line_distances(points: &[f64]) -> WeekDistanceMatrix {
        let n = points.len();
        WeekDistanceMatrix::new(Array2::from_shape_fn((n, n), |(i, j)| (points[i] - points[j]).abs()))
            .unwrap()
    }

    fn random_distances(w: usize, seed: u64) -> WeekDistanceMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<(f64, f64)> = (0..w).map(|_| (rng.random::<f64>(), rng.random::<f64>())).collect();
        WeekDistanceMatrix::new(Array2::from_shape_fn((w, w), |(i, j)| {
            ((pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2)).sqrt()
        }))
        .unwrap()
    }

    #[test]
    fn slices_and_rescales() {
        let values = Array2::from_shape_fn((336 + 5, 2), |(r, c)| if c == 0 { 10.0 + (r % 168) as f64 * 100.0 / 167.0 } else { 7.0 });
        let weeks = slice_weeks(&panel_from(values), None).unwrap();
        assert_eq!(weeks.len(), 2);
        let col = weeks[0].column(0);
        assert_eq!(col.iter().copied().fold(f64::INFINITY, f64::min), 0.0);
        assert_eq!(col.iter().copied().fold(f64::NEG_INFINITY, f64::max), 1.0);
        assert_eq!(weeks[0].original_range[0], (10.0, 110.0));
        assert!(weeks[0].column(1).iter().all(|&v| v == 0.0));
        assert!(slice_weeks(&panel_from(Array2::zeros((100, 1))), None).is_err());
    }

    #[test]
    fn week_distance_is_sum_of_dtw() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let start = crate::ingest::test_support::hour(0);
        let a = WeekSlice::rescale(Array2::from_shape_fn((8, 3), |_| rng.random_range(0..10) as f64).view(), 0, 0, start);
        let b = WeekSlice::rescale(Array2::from_shape_fn((8, 3), |_| rng.random_range(0..10) as f64).view(), 1, 0, start);
        let want: f64 = (0..3).map(|i| brute_force_dtw(&a.column(i), &b.column(i), LocalCost::Absolute)).sum();
        let got = week_distance(&a, &b, LocalCost::Absolute).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert_eq!(week_distance(&a, &a, LocalCost::Absolute).unwrap(), 0.0);
        let one = WeekSlice::rescale(a.data.slice(ndarray::s![.., 0..1]), 0, 0, start);
        let other = WeekSlice::rescale(b.data.slice(ndarray::s![.., 0..1]), 0, 0, start);
        assert_eq!(
            week_distance(&one, &other, LocalCost::Absolute).unwrap(),
            dtw_distance(&one.column(0), &other.column(0), LocalCost::Absolute).unwrap()
        );
        assert!(week_distance(&one, &a, LocalCost::Absolute).is_err());
    }

    #[test]
    fn distance_matrix_validation() {
        assert!(WeekDistanceMatrix::new(ndarray::array![[0.0, 1.0], [2.0, 0.0]]).is_err());
        assert!(WeekDistanceMatrix::new(ndarray::array![[0.0, -1.0], [-1.0, 0.0]]).is_err());
    }

    #[test]
    fn k_equals_w_is_zero_cost() {
        let d = random_distances(6, 1);
        let c = kmedoids(&d, 6, 10, 9).unwrap();
        assert_eq!(c.total_cost, 0.0);
        assert_eq!(c.medoids, (0..6).collect::<Vec<_>>());
        assert!(kmedoids(&d, 7, 10, 0).is_err());
    }

    #[test]
    fn k_one_is_global_medoid() {
        let d = random_distances(9, 4);
        let want = (0..9)
            .min_by(|&a, &b| {
                let sa: f64 = (0..9).map(|j| d.get(a, j)).sum();
                let sb: f64 = (0..9).map(|j| d.get(b, j)).sum();
                sa.total_cmp(&sb)
            })
            .unwrap();
        for seed in 0..5 {
            assert_eq!(kmedoids(&d, 1, 50, seed).unwrap().medoids, vec![want]);
        }
    }

    #[test]
    fn two_groups_one_medoid_each() {
        let d = line_distances(&[0.0, 0.2, 0.5, 0.9, 20.0, 20.3, 20.4]);
        // exhaustive optimum over medoid pairs
        let best = combinations(7, 2)
            .into_iter()
            .min_by(|a, b| assign(&d, a).1.total_cmp(&assign(&d, b).1))
            .unwrap();
        for i in 0..4 {
            for j in 4..7 {
                let c = kmedoids_from(&d, &[i, j], 50).unwrap();
                assert_eq!(c.medoids, best);
            }
        }
    }

    #[test]
    fn silhouette_hand_values() {
        let d = line_distances(&[0.0, 0.1, 10.0, 10.1]);
        let c = kmedoids_from(&d, &[0, 2], 10).unwrap();
        let s = silhouette_samples(&d, &c).unwrap();
        assert!((s[0] - (10.05 - 0.1) / 10.05).abs() < 1e-12);
        assert!((s[0] - 0.990_049_751).abs() < 1e-8);

        let singleton = line_distances(&[0.0, 5.0, 5.5]);
        let c = kmedoids_from(&singleton, &[0, 1], 10).unwrap();
        assert_eq!(silhouette_samples(&singleton, &c).unwrap()[0], 0.0);

        let equal = WeekDistanceMatrix::new(Array2::from_shape_fn((4, 4), |(i, j)| if i == j { 0.0 } else { 1.0 })).unwrap();
        let c = kmedoids_from(&equal, &[0, 1], 10).unwrap();
        assert_eq!(silhouette(&equal, &c).unwrap(), 0.0);

        let c1 = kmedoids(&d, 1, 10, 0).unwrap();
        assert!(silhouette(&d, &c1).is_err());
    }

    #[test]
    fn select_k_planted_groups() {
        let d = line_distances(&[0.0, 0.3, 0.6, 1.0, 30.0, 30.5, 30.8, 31.0]);
        let sel = select_k(&d, &[2, 3, 4], 50, 100, 11).unwrap();
        assert_eq!(sel.best_k, 2);
        assert_eq!(sel.clustering.medoids.len(), 2);
        assert!(sel.clustering.labels[..4].iter().all(|&l| l == sel.clustering.labels[0]));
        assert!(sel.clustering.labels[4..].iter().all(|&l| l == sel.clustering.labels[4]));
        assert_ne!(sel.clustering.labels[0], sel.clustering.labels[4]);
    }

    #[test]
    fn select_k_degenerate_prefers_small_k() {
        let equal = WeekDistanceMatrix::new(Array2::from_shape_fn((6, 6), |(i, j)| if i == j { 0.0 } else { 1.0 })).unwrap();
        let sel = select_k(&equal, &[4, 2, 3], 5, 10, 0).unwrap();
        assert_eq!(sel.best_k, 2);
        assert!(sel.scores.iter().all(|&(_, s)| s == 0.0));
        assert!(select_k(&equal, &[], 5, 10, 0).is_err());
    }

    #[test]
    fn select_k_single_run() {
        let d = random_distances(7, 2);
        let sel = select_k(&d, &[3], 1, 100, 5).unwrap();
        let direct = kmedoids(&d, 3, 100, restart_seed(5, 3, 0)).unwrap();
        assert_eq!(sel.clustering, direct);
        assert_eq!(sel.frequency, 1);
    }

    #[test]
    fn tukey_examples() {
        let cfg = TukeyConfig::default();
        assert_eq!(cfg.q, 1.5);
        assert_eq!(tukey_filter(&[1.0, 2.0, 3.0, 4.0, 100.0], &cfg).unwrap(), vec![4]);
        assert_eq!(tukey_upper_fence(&[1.0, 2.0, 3.0, 4.0, 100.0], &cfg).unwrap(), 7.0);
        assert!(tukey_filter(&[2.5; 6], &cfg).unwrap().is_empty());
        assert!(tukey_filter(&[], &cfg).is_err());
    }

    fn periodic_panel(weeks: usize, flat_week: Option<usize>, seed: u64, noise: f64) -> PanelSeries {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = weeks * HOURS_PER_WEEK;
        let values = Array2::from_shape_fn((t, 3), |(r, c)| {
            if flat_week == Some(r / HOURS_PER_WEEK) {
                return 0.0;
            }
            let h = (r % 24) as f64;
            let day = (r / 24) % 7;
            let base = if day >= 5 { 60.0 } else { 100.0 };
            base * (1.0 + (std::f64::consts::PI * (h - 6.0) / 12.0).sin().max(0.0) * (c + 1) as f64)
                + noise * rng.random::<f64>()
        });
        panel_from(values)
    }

    #[test]
    fn flat_week_is_removed() {
        let panel = periodic_panel(12, Some(7), 1, 5.0);
        let cfg = AnomalyConfig { runs: 20, k_range: vec![2, 3], ..Default::default() };
        let report = remove_abnormal_weeks(&panel, &cfg).unwrap();
        assert_eq!(report.removed.iter().map(|r| r.week_index).collect::<Vec<_>>(), vec![7]);
        assert_eq!(report.panel.len(), 11 * HOURS_PER_WEEK);
        let kept: Vec<_> = report.panel.timestamps().to_vec();
        let mut it = panel.timestamps().iter();
        assert!(kept.iter().all(|t| it.any(|u| u == t)));
        assert_ne!(report.dominant_medoid().week_index, 7);
    }

    #[test]
    fn both_references_flag_flat_week() {
        let panel = periodic_panel(12, Some(7), 1, 0.05);
        for reference in [OutlierReference::NearestMedoid, OutlierReference::DominantMedoid] {
            let cfg = AnomalyConfig {
                runs: 20,
                k_range: vec![2],
                reference,
                ..Default::default()
            };
            let report = remove_abnormal_weeks(&panel, &cfg).unwrap();
            assert!(report.selection.clustering.cluster_sizes().iter().all(|&s| s > 0));
            assert_eq!(report.removed.iter().map(|r| r.week_index).collect::<Vec<_>>(), vec![7]);
        }
    }

    #[test]
    fn clean_panel_mostly_kept() {
        let panel = periodic_panel(6, None, 2, 5.0);
        let cfg = AnomalyConfig { runs: 10, k_range: vec![2], ..Default::default() };
        let report = remove_abnormal_weeks(&panel, &cfg).unwrap();
        let removed = report.removed.len();
        assert_eq!(report.panel.len(), panel.len() - removed * HOURS_PER_WEEK);
    }

    proptest! {
        #[test]
        fn prop_kmedoids_cost_non_increasing(w in 2usize..12, k in 1usize..5, seed in 0u64..500) {
            prop_assume!(k <= w);
            let d = random_distances(w, seed);
            let c = kmedoids(&d, k, 20, seed).unwrap();
            prop_assert!(c.iterations <= 20);
            for pair in c.cost_history.windows(2) {
                prop_assert!(pair[1] <= pair[0] + 1e-12);
            }
            for (i, &l) in c.labels.iter().enumerate() {
                let own = d.get(i, c.medoids[l]);
                prop_assert!(c.medoids.iter().all(|&m| d.get(i, m) >= own));
            }
            for (label, &m) in c.medoids.iter().enumerate() {
                prop_assert_eq!(c.labels[m], label);
            }
        }

        #[test]
        fn prop_full_restart_is_global(w in 2usize..=8, k in 1usize..=3, seed in 0u64..200) {
            prop_assume!(k <= w);
            let d = random_distances(w, seed);
            let subsets = combinations(w, k);
            let global = subsets.iter().map(|s| assign(&d, s).1).fold(f64::INFINITY, f64::min);
            let found = subsets
                .iter()
                .map(|s| kmedoids_from(&d, s, 100).unwrap().total_cost)
                .fold(f64::INFINITY, f64::min);
            prop_assert!((found - global).abs() < 1e-12);
        }

        #[test]
        fn prop_silhouette_bounded(w in 3usize..12, k in 2usize..5, seed in 0u64..500) {
            prop_assume!(k <= w);
            let d = random_distances(w, seed);
            let c = kmedoids(&d, k, 20, seed).unwrap();
            let s = silhouette(&d, &c).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
        }
    }
}
