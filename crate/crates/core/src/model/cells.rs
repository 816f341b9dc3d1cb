//! Diffusion convolution and the two recurrent cells.
//!
//! The functions ending in `_on` record onto a [`Tape`] and are what the
//! sequence model uses. The plain functions evaluate a single step eagerly.

use std::sync::Arc;

use ndarray::Array2;

use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{transition_powers, SensorGraph};

/// Forward and reverse transition powers `0..k_max` of one graph.
///
/// Support `m = dir * k_max + k` is `P_fwd^k` for `dir = 0` and `P_rev^k` for
/// `dir = 1`. Zeroth powers are the identity and are stored as `None`.
#[derive(Debug, Clone)]
pub struct Supports {
    num_nodes: usize,
    k_max: usize,
    mats: Vec<Option<Arc<Array2<f64>>>>,
    fingerprint: Option<String>,
}

impl Supports {
    pub fn new(forward: Vec<Array2<f64>>, reverse: Vec<Array2<f64>>) -> Result<Self> {
        let k_max = forward.len();
        if k_max == 0 || reverse.len() != k_max {
            return Err(Error::ShapeMismatch(format!(
                "{} forward and {} reverse powers",
                forward.len(),
                reverse.len()
            )));
        }
        let n = forward[0].nrows();
        let mut mats = Vec::with_capacity(2 * k_max);
        for (k, m) in forward.into_iter().chain(reverse).enumerate() {
            if m.dim() != (n, n) {
                return Err(Error::ShapeMismatch(format!("power of shape {:?}, expected {n}x{n}", m.dim())));
            }
            let is_identity = k % k_max == 0 && m == Array2::<f64>::eye(n);
            mats.push(if is_identity { None } else { Some(Arc::new(m)) });
        }
        Ok(Self {
            num_nodes: n,
            k_max,
            mats,
            fingerprint: None,
        })
    }

    pub fn from_graph(graph: &SensorGraph, k_max: usize) -> Result<Self> {
        let (fwd, rev) = transition_powers(graph, k_max)?;
        let mut s = Self::new(fwd, rev)?;
        s.fingerprint = Some(graph.fingerprint());
        Ok(s)
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    /// Number of support matrices, `2 * k_max`.
    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn fingerprint(&self) -> Option<&str> {
        self.fingerprint.as_deref()
    }

    /// Support `m` as a dense matrix.
    pub fn dense(&self, m: usize) -> Array2<f64> {
        match &self.mats[m] {
            Some(a) => a.as_ref().clone(),
            None => Array2::eye(self.num_nodes),
        }
    }
}

/// Diffusion filter stored as a `(2 * k_max * input_dim) × output_dim` weight.
///
/// Row `(dir * k_max + k) * input_dim + p`, column `q` holds the coefficient
/// for output feature `q`, input feature `p`, step `k` and direction `dir`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionFilter {
    pub weight: Array2<f64>,
    /// Shape `1 × output_dim`.
    pub bias: Array2<f64>,
    pub k_max: usize,
    pub input_dim: usize,
}

impl DiffusionFilter {
    pub fn zeros(input_dim: usize, output_dim: usize, k_max: usize) -> Self {
        Self {
            weight: Array2::zeros((2 * k_max * input_dim, output_dim)),
            bias: Array2::zeros((1, output_dim)),
            k_max,
            input_dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn row(&self, p: usize, k: usize, dir: usize) -> usize {
        (dir * self.k_max + k) * self.input_dim + p
    }

    pub fn theta(&self, q: usize, p: usize, k: usize, dir: usize) -> f64 {
        self.weight[[self.row(p, k, dir), q]]
    }

    pub fn set_theta(&mut self, q: usize, p: usize, k: usize, dir: usize, value: f64) {
        let r = self.row(p, k, dir);
        self.weight[[r, q]] = value;
    }

    fn check(&self, supports: &Supports, x: (usize, usize)) -> Result<()> {
        if self.k_max != supports.k_max() {
            return Err(Error::ShapeMismatch(format!(
                "filter has {} diffusion steps, supports have {}",
                self.k_max,
                supports.k_max()
            )));
        }
        if self.weight.nrows() != 2 * self.k_max * self.input_dim || self.bias.dim() != (1, self.output_dim()) {
            return Err(Error::ShapeMismatch("inconsistent filter tensors".into()));
        }
        if x != (supports.num_nodes(), self.input_dim) {
            return Err(Error::ShapeMismatch(format!(
                "signal {:?}, expected ({}, {})",
                x,
                supports.num_nodes(),
                self.input_dim
            )));
        }
        Ok(())
    }
}

/// Plain GRU weights over the concatenation `[input, hidden]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruCellParams {
    pub w_r: Array2<f64>,
    pub b_r: Array2<f64>,
    pub w_z: Array2<f64>,
    pub b_z: Array2<f64>,
    pub w_c: Array2<f64>,
    pub b_c: Array2<f64>,
}

impl GruCellParams {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        let w = || Array2::zeros((input_dim + hidden, hidden));
        let b = || Array2::zeros((1, hidden));
        Self {
            w_r: w(),
            b_r: b(),
            w_z: w(),
            b_z: b(),
            w_c: w(),
            b_c: b(),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_r.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.w_r.nrows() - self.hidden()
    }

    pub fn tensors(&self) -> [&Array2<f64>; 6] {
        [&self.w_r, &self.b_r, &self.w_z, &self.b_z, &self.w_c, &self.b_c]
    }
}

/// DCGRU gates. Each filter carries its own bias, so `theta_r.bias`,
/// `theta_z.bias` and `theta_c.bias` play the roles of `b_r`, `b_u`, `b_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct DcgruCellParams {
    pub theta_r: DiffusionFilter,
    pub theta_z: DiffusionFilter,
    pub theta_c: DiffusionFilter,
    pub hidden_size: usize,
}

impl DcgruCellParams {
    pub fn zeros(input_dim: usize, hidden: usize, k_max: usize) -> Self {
        let f = || DiffusionFilter::zeros(input_dim + hidden, hidden, k_max);
        Self {
            theta_r: f(),
            theta_z: f(),
            theta_c: f(),
            hidden_size: hidden,
        }
    }

    pub fn tensors(&self) -> [&Array2<f64>; 6] {
        [
            &self.theta_r.weight,
            &self.theta_r.bias,
            &self.theta_z.weight,
            &self.theta_z.bias,
            &self.theta_c.weight,
            &self.theta_c.bias,
        ]
    }
}

/// Horizontal stack `[S_0 x, S_1 x, ..., S_{2K-1} x]`.
pub fn diffusion_features_on(tape: &mut Tape, supports: &Supports, x: Var) -> Var {
    let blocks: Vec<Var> = supports
        .mats
        .iter()
        .map(|m| match m {
            Some(s) => tape.left_mul(s, x),
            None => x,
        })
        .collect();
    tape.concat_cols(&blocks)
}

/// Diffusion convolution without activation.
pub fn diffusion_conv_on(tape: &mut Tape, supports: &Supports, x: Var, weight: Var, bias: Var) -> Var {
    let f = diffusion_features_on(tape, supports, x);
    let lin = tape.matmul(f, weight);
    tape.add_bias(lin, bias)
}

/// Parameter handles of one cell in the order
/// `[w_r, b_r, w_z, b_z, w_c, b_c]`.
pub type CellVars = [Var; 6];

fn gated_update(tape: &mut Tape, h: Var, z: Var, c: Var) -> Var {
    let keep = tape.mul(z, h);
    let one_minus_z = tape.one_minus(z);
    let fresh = tape.mul(one_minus_z, c);
    tape.add(keep, fresh)
}

pub fn gru_step_on(tape: &mut Tape, x: Var, h: Var, p: &CellVars) -> Var {
    let [w_r, b_r, w_z, b_z, w_c, b_c] = *p;
    let xh = tape.concat_cols(&[x, h]);
    let lin_r = tape.matmul(xh, w_r);
    let pre_r = tape.add_bias(lin_r, b_r);
    let r = tape.sigmoid(pre_r);
    let lin_z = tape.matmul(xh, w_z);
    let pre_z = tape.add_bias(lin_z, b_z);
    let z = tape.sigmoid(pre_z);
    let rh = tape.mul(r, h);
    let xrh = tape.concat_cols(&[x, rh]);
    let lin_c = tape.matmul(xrh, w_c);
    let pre_c = tape.add_bias(lin_c, b_c);
    let c = tape.tanh(pre_c);
    gated_update(tape, h, z, c)
}

pub fn dcgru_step_on(tape: &mut Tape, supports: &Supports, x: Var, h: Var, p: &CellVars) -> Var {
    let [w_r, b_r, w_z, b_z, w_c, b_c] = *p;
    let xh = tape.concat_cols(&[x, h]);
    let feats = diffusion_features_on(tape, supports, xh);
    let lin_r = tape.matmul(feats, w_r);
    let pre_r = tape.add_bias(lin_r, b_r);
    let r = tape.sigmoid(pre_r);
    let lin_z = tape.matmul(feats, w_z);
    let pre_z = tape.add_bias(lin_z, b_z);
    let z = tape.sigmoid(pre_z);
    let rh = tape.mul(r, h);
    let xrh = tape.concat_cols(&[x, rh]);
    let pre_c = diffusion_conv_on(tape, supports, xrh, w_c, b_c);
    let c = tape.tanh(pre_c);
    gated_update(tape, h, z, c)
}

/// `N × Q` output of one diffusion filter applied to an `N × P` signal.
pub fn diffusion_convolution(x: &Array2<f64>, filter: &DiffusionFilter, supports: &Supports) -> Result<Array2<f64>> {
    filter.check(supports, x.dim())?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let w = tape.constant(filter.weight.clone());
    let b = tape.constant(filter.bias.clone());
    let out = diffusion_conv_on(&mut tape, supports, xv, w, b);
    Ok(tape.value(out).clone())
}

fn check_state(x: &Array2<f64>, h: &Array2<f64>, input_dim: usize, hidden: usize) -> Result<()> {
    if x.ncols() != input_dim || h.ncols() != hidden || x.nrows() != h.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "input {:?} and hidden {:?} for a cell with {input_dim} inputs and {hidden} units",
            x.dim(),
            h.dim()
        )));
    }
    Ok(())
}

fn constants(tape: &mut Tape, tensors: [&Array2<f64>; 6]) -> CellVars {
    tensors.map(|t| tape.constant(t.clone()))
}

/// One GRU step applied independently to every row (node) of `x` and `h_prev`.
pub fn gru_cell_step(x: &Array2<f64>, h_prev: &Array2<f64>, params: &GruCellParams) -> Result<Array2<f64>> {
    check_state(x, h_prev, params.input_dim(), params.hidden())?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let hv = tape.constant(h_prev.clone());
    let p = constants(&mut tape, params.tensors());
    let out = gru_step_on(&mut tape, xv, hv, &p);
    Ok(tape.value(out).clone())
}

pub fn dcgru_cell_step(
    x: &Array2<f64>,
    h_prev: &Array2<f64>,
    params: &DcgruCellParams,
    supports: &Supports,
) -> Result<Array2<f64>> {
    let hidden = params.hidden_size;
    let input_dim = params.theta_r.input_dim.checked_sub(hidden).ok_or_else(|| {
        Error::ShapeMismatch("filter input width smaller than the hidden size".into())
    })?;
    check_state(x, h_prev, input_dim, hidden)?;
    for f in [&params.theta_r, &params.theta_z, &params.theta_c] {
        if f.output_dim() != hidden {
            return Err(Error::ShapeMismatch("filter output width differs from the hidden size".into()));
        }
        f.check(supports, (x.nrows(), input_dim + hidden))?;
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let hv = tape.constant(h_prev.clone());
    let p = constants(&mut tape, params.tensors());
    let out = dcgru_step_on(&mut tape, supports, xv, hv, &p);
    Ok(tape.value(out).clone())
}
