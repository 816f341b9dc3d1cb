//! Sensor graph construction.
//!
//! Two thresholded Gaussian kernel adjacencies are built, one from great-circle
//! distances between sensors and one from DTW distances between the sensors'
//! typical weekly profiles, and combined as `W = W_geo + beta * W_ts`. The
//! diffusion model consumes the forward (`D_O^-1 W`) and reverse
//! (`D_I^-1 W^T`) random-walk transition matrices.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clustering::WeekSlice;
use crate::dtw::{pairwise_dtw, LocalCost};
use crate::error::{Error, Result};
use crate::ingest::SensorMeta;
use crate::matrix_io;

pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Candidate values of `beta` for grid search.
pub const BETA_GRID: [f64; 9] = [0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    /// Threshold above which (normalized) distances get zero weight.
    pub kappa: f64,
    /// Weight of the DTW adjacency in the combined graph.
    pub beta: f64,
    /// Divide each distance matrix by its largest off-diagonal entry before
    /// thresholding.
    pub normalize_distances: bool,
    /// Pointwise cost used for DTW between weekly profiles.
    pub cost: LocalCost,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            kappa: 0.1,
            beta: 1.0,
            normalize_distances: true,
            cost: LocalCost::Absolute,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0) || !self.kappa.is_finite() {
            return Err(Error::InvalidGraph(format!("kappa must be positive, got {}", self.kappa)));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::InvalidGraph(format!("beta must be nonnegative, got {}", self.beta)));
        }
        Ok(())
    }
}

/// Great-circle distance in kilometres.
pub fn haversine_km(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (lat1, lon1) = (a.0.to_radians(), a.1.to_radians());
    let (lat2, lon2) = (b.0.to_radians(), b.1.to_radians());
    let h = ((lat2 - lat1) / 2.0).sin().powi(2)
        + lat1.cos() * lat2.cos() * ((lon2 - lon1) / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

pub fn geo_distances(sensors: &[SensorMeta]) -> Result<Array2<f64>> {
    let coords = sensors
        .iter()
        .map(SensorMeta::coordinates)
        .collect::<Result<Vec<_>>>()?;
    let n = coords.len();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let v = haversine_km(coords[i], coords[j]);
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    Ok(d)
}

fn upper_triangle(d: &Array2<f64>) -> Vec<f64> {
    let n = d.nrows();
    (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| d[[i, j]])
        .collect()
}

/// Sample standard deviation (`n - 1` denominator); `None` below two values.
pub fn sample_std(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    Some((values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

fn check_distances(d: &Array2<f64>) -> Result<()> {
    let (r, c) = d.dim();
    if r != c || r == 0 {
        return Err(Error::InvalidDistanceMatrix(format!("shape {r}x{c}")));
    }
    for ((i, j), &v) in d.indexed_iter() {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::InvalidDistanceMatrix(format!("entry ({i},{j}) = {v}")));
        }
        if (v - d[[j, i]]).abs() > 1e-9 * v.abs().max(1.0) {
            return Err(Error::InvalidDistanceMatrix(format!("not symmetric at ({i},{j})")));
        }
    }
    Ok(())
}

/// Thresholded Gaussian kernel `exp(-d^2 / sigma^2)` for `d <= kappa`, else 0.
///
/// With `normalize` set, distances are first divided by their largest
/// off-diagonal entry. `sigma` is the sample standard deviation of the
/// (normalized) upper-triangle distances. A single node yields `[[1]]`.
pub fn gaussian_kernel_adjacency(d: &Array2<f64>, kappa: f64, normalize: bool) -> Result<Array2<f64>> {
    check_distances(d)?;
    if !(kappa > 0.0) {
        return Err(Error::InvalidGraph(format!("kappa must be positive, got {kappa}")));
    }
    let n = d.nrows();
    if n == 1 {
        return Ok(Array2::ones((1, 1)));
    }
    let upper = upper_triangle(d);
    let max = upper.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return Err(Error::DegenerateKernel("all distances are zero".into()));
    }
    let scale = if normalize { max } else { 1.0 };
    let scaled: Vec<f64> = upper.iter().map(|v| v / scale).collect();
    let sigma = sample_std(&scaled);
    let mut w = Array2::zeros((n, n));
    for ((i, j), &raw) in d.indexed_iter() {
        let v = raw / scale;
        w[[i, j]] = if v == 0.0 {
            1.0
        } else if v > kappa {
            0.0
        } else {
            match sigma {
                Some(s) if s > 0.0 => (-(v * v) / (s * s)).exp(),
                _ => {
                    return Err(Error::DegenerateKernel(
                        "distance standard deviation is undefined or zero".into(),
                    ))
                }
            }
        };
    }
    Ok(w)
}

/// DTW adjacency between the sensor columns of a typical (medoid) week.
///
/// When every profile is identical all DTW distances vanish and the kernel's
/// limit, a matrix of ones, is returned.
pub fn ts_adjacency(medoid: &WeekSlice, config: &GraphConfig) -> Result<Array2<f64>> {
    config.validate()?;
    let columns: Vec<Vec<f64>> = (0..medoid.num_sensors()).map(|i| medoid.column(i)).collect();
    let d = pairwise_dtw(&columns, config.cost)?;
    if d.iter().all(|&v| v == 0.0) {
        return Ok(Array2::ones(d.dim()));
    }
    gaussian_kernel_adjacency(&d, config.kappa, config.normalize_distances)
}

/// Geographic adjacency from sensor coordinates.
pub fn geo_adjacency(sensors: &[SensorMeta], config: &GraphConfig) -> Result<Array2<f64>> {
    config.validate()?;
    gaussian_kernel_adjacency(&geo_distances(sensors)?, config.kappa, config.normalize_distances)
}

/// `D^-1 W` with all-zero rows for zero-degree nodes.
fn row_normalize(w: &Array2<f64>) -> Array2<f64> {
    let mut p = w.clone();
    for mut row in p.rows_mut() {
        let deg: f64 = row.sum();
        if deg > 0.0 {
            row /= deg;
        } else {
            row.fill(0.0);
        }
    }
    p
}

/// Combined adjacency with its diffusion transition matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorGraph {
    pub sensor_ids: Vec<String>,
    pub beta: f64,
    pub w: Array2<f64>,
    pub w_geo: Array2<f64>,
    pub w_ts: Array2<f64>,
    /// `D_O^-1 W`.
    pub p_fwd: Array2<f64>,
    /// `D_I^-1 W^T`.
    pub p_rev: Array2<f64>,
}

/// `W = W_geo + beta * W_ts` and both transition matrices.
pub fn combine_adjacency(
    sensor_ids: Vec<String>,
    w_geo: Array2<f64>,
    w_ts: Array2<f64>,
    beta: f64,
) -> Result<SensorGraph> {
    let n = sensor_ids.len();
    if w_geo.dim() != (n, n) || w_ts.dim() != (n, n) {
        return Err(Error::ShapeMismatch(format!(
            "{n} sensors, W_geo {:?}, W_ts {:?}",
            w_geo.dim(),
            w_ts.dim()
        )));
    }
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::InvalidGraph(format!("beta must be nonnegative, got {beta}")));
    }
    if w_geo.iter().chain(w_ts.iter()).any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidGraph("adjacency entries must be nonnegative".into()));
    }
    let w = &w_geo + &(beta * &w_ts);
    let p_fwd = row_normalize(&w);
    let p_rev = row_normalize(&w.t().to_owned());
    Ok(SensorGraph {
        sensor_ids,
        beta,
        w,
        w_geo,
        w_ts,
        p_fwd,
        p_rev,
    })
}

impl SensorGraph {
    pub fn num_nodes(&self) -> usize {
        self.sensor_ids.len()
    }

    /// Hex SHA-256 over the node count and the bit patterns of `W`.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.w.nrows() as u64).to_le_bytes());
        for v in self.w.iter() {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Identity graph: every node only connected to itself.
    pub fn identity(sensor_ids: Vec<String>) -> Result<Self> {
        let n = sensor_ids.len();
        combine_adjacency(sensor_ids, Array2::eye(n), Array2::zeros((n, n)), 0.0)
    }

    /// Writes `w.csv`, `w_geo.csv`, `w_ts.csv`, `w_sparse.csv` and
    /// `graph.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        matrix_io::write_dense(&dir.join("w.csv"), &self.sensor_ids, &self.w)?;
        matrix_io::write_dense(&dir.join("w_geo.csv"), &self.sensor_ids, &self.w_geo)?;
        matrix_io::write_dense(&dir.join("w_ts.csv"), &self.sensor_ids, &self.w_ts)?;
        matrix_io::write_triplets(&dir.join("w_sparse.csv"), &self.w)?;
        let meta = GraphMeta {
            format_version: GRAPH_FORMAT_VERSION,
            sensor_ids: self.sensor_ids.clone(),
            beta: self.beta,
            fingerprint: self.fingerprint(),
        };
        let path = dir.join("graph.json");
        fs::write(&path, serde_json::to_string_pretty(&meta)? + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Reads a graph written by [`SensorGraph::save`], checking its fingerprint.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("graph.json");
        let raw = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: GraphMeta = serde_json::from_str(&raw)?;
        if meta.format_version != GRAPH_FORMAT_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported graph format version {}",
                meta.format_version
            )));
        }
        let (ids_geo, w_geo) = matrix_io::read_dense(&dir.join("w_geo.csv"))?;
        let (ids_ts, w_ts) = matrix_io::read_dense(&dir.join("w_ts.csv"))?;
        if ids_geo != meta.sensor_ids || ids_ts != meta.sensor_ids {
            return Err(Error::ShapeMismatch("graph matrices disagree on sensor ids".into()));
        }
        let graph = combine_adjacency(meta.sensor_ids, w_geo, w_ts, meta.beta)?;
        let found = graph.fingerprint();
        if found != meta.fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: meta.fingerprint,
                found,
            });
        }
        Ok(graph)
    }
}

const GRAPH_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct GraphMeta {
    format_version: u32,
    sensor_ids: Vec<String>,
    beta: f64,
    fingerprint: String,
}

/// Powers `0..k_max` of the forward and reverse transition matrices.
pub fn transition_powers(graph: &SensorGraph, k_max: usize) -> Result<(Vec<Array2<f64>>, Vec<Array2<f64>>)> {
    if k_max == 0 {
        return Err(Error::InvalidArgument("k_max must be at least 1".into()));
    }
    let powers = |p: &Array2<f64>| {
        let mut out = vec![Array2::eye(p.nrows())];
        for _ in 1..k_max {
            let next = out.last().expect("nonempty").dot(p);
            out.push(next);
        }
        out
    };
    Ok((powers(&graph.p_fwd), powers(&graph.p_rev)))
}

/// Builds the full graph from sensor coordinates and a medoid week.
pub fn build_graph(sensors: &[SensorMeta], medoid: Option<&WeekSlice>, config: &GraphConfig) -> Result<SensorGraph> {
    config.validate()?;
    let ids: Vec<String> = sensors.iter().map(|s| s.sensor_id.clone()).collect();
    let n = ids.len();
    let w_geo = geo_adjacency(sensors, config)?;
    let w_ts = match medoid {
        Some(m) => {
            if m.num_sensors() != n {
                return Err(Error::ShapeMismatch(format!(
                    "medoid has {} sensors, graph {n}",
                    m.num_sensors()
                )));
            }
            ts_adjacency(m, config)?
        }
        None => Array2::zeros((n, n)),
    };
    combine_adjacency(ids, w_geo, w_ts, config.beta)
}

/// Row sums, used by tests and diagnostics.
pub fn row_sums(m: &Array2<f64>) -> Vec<f64> {
    m.sum_axis(Axis(1)).to_vec()
}
