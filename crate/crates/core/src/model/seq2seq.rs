use ndarray::{Array2, Axis};
use rand::distr::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cells::{dcgru_step_on, gru_step_on, CellVars, DcgruCellParams, DiffusionFilter, GruCellParams, Supports};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Recurrent cell used by every layer of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Gru,
    Dcgru,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub kind: CellKind,
    pub num_nodes: usize,
    /// Stacked layers in both the encoder and the decoder.
    pub layers: usize,
    pub hidden: usize,
    /// Diffusion steps; ignored for GRU cells.
    pub k_max: usize,
}

impl ModelShape {
    pub fn validate(&self) -> Result<()> {
        if self.num_nodes == 0 || self.hidden == 0 {
            return Err(Error::InvalidArgument("model needs at least one node and one hidden unit".into()));
        }
        if !(1..=2).contains(&self.layers) {
            return Err(Error::InvalidArgument(format!("layers must be 1 or 2, got {}", self.layers)));
        }
        if self.kind == CellKind::Dcgru && self.k_max == 0 {
            return Err(Error::InvalidArgument("k_max must be at least 1".into()));
        }
        Ok(())
    }

    fn cell_input(&self, layer: usize) -> usize {
        if layer == 0 {
            1
        } else {
            self.hidden
        }
    }

    /// Names and shapes of every parameter tensor in storage order.
    pub fn param_layout(&self) -> Vec<(String, (usize, usize))> {
        let mut out = Vec::new();
        for part in ["encoder", "decoder"] {
            for layer in 0..self.layers {
                let rows = match self.kind {
                    CellKind::Gru => self.cell_input(layer) + self.hidden,
                    CellKind::Dcgru => 2 * self.k_max * (self.cell_input(layer) + self.hidden),
                };
                let (w, b) = match self.kind {
                    CellKind::Gru => (["w_r", "w_z", "w_c"], ["b_r", "b_z", "b_c"]),
                    CellKind::Dcgru => (["theta_r", "theta_z", "theta_c"], ["b_r", "b_u", "b_c"]),
                };
                for g in 0..3 {
                    out.push((format!("{part}.{layer}.{}", w[g]), (rows, self.hidden)));
                    out.push((format!("{part}.{layer}.{}", b[g]), (1, self.hidden)));
                }
            }
        }
        out.push(("projection.weight".into(), (self.hidden, 1)));
        out.push(("projection.bias".into(), (1, 1)));
        out
    }
}

/// Encoder-decoder over graph signals with one feature per node.
#[derive(Debug, Clone)]
pub struct Seq2SeqModel {
    shape: ModelShape,
    supports: Option<Supports>,
    params: Vec<Array2<f64>>,
}

/// Result of [`Seq2SeqModel::forward`]; owns the tape for the backward pass.
#[derive(Debug)]
pub struct ForwardPass {
    tape: Tape,
    output: Var,
    shapes: Vec<(usize, usize)>,
    /// `l_out × N` predictions.
    pub predictions: Array2<f64>,
    /// Whether each decoder step after the first was fed the true target.
    pub teacher_forced: Vec<bool>,
}

impl ForwardPass {
    /// Parameter gradients given `d loss / d predictions` (`l_out × N`).
    pub fn backward(&mut self, loss_gradient: &Array2<f64>) -> Result<Vec<Array2<f64>>> {
        let seed = loss_gradient.t().to_owned();
        let grads = self.tape.backward(self.output, &seed)?;
        Ok(self
            .shapes
            .iter()
            .enumerate()
            .map(|(i, &s)| grads.param(i, s))
            .collect())
    }
}

impl Seq2SeqModel {
    /// All parameters zero.
    pub fn zeros(shape: ModelShape, supports: Option<Supports>) -> Result<Self> {
        shape.validate()?;
        match (shape.kind, &supports) {
            (CellKind::Dcgru, None) => {
                return Err(Error::InvalidArgument("DCGRU model requires graph supports".into()))
            }
            (CellKind::Dcgru, Some(s)) if s.num_nodes() != shape.num_nodes || s.k_max() != shape.k_max => {
                return Err(Error::ShapeMismatch(format!(
                    "supports for {} nodes and {} steps, model has {} and {}",
                    s.num_nodes(),
                    s.k_max(),
                    shape.num_nodes,
                    shape.k_max
                )))
            }
            _ => {}
        }
        let supports = if shape.kind == CellKind::Gru { None } else { supports };
        let params = shape
            .param_layout()
            .into_iter()
            .map(|(_, s)| Array2::zeros(s))
            .collect();
        Ok(Self {
            shape,
            supports,
            params,
        })
    }

    /// Weights uniform in `±sqrt(1 / fan_in)` with `fan_in` the weight's row
    /// count; biases zero.
    pub fn new(shape: ModelShape, supports: Option<Supports>, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(shape, supports)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = model.shape.param_layout();
        for (p, (name, _)) in model.params.iter_mut().zip(layout) {
            let last = name.rsplit('.').next().unwrap_or_default();
            if last == "bias" || last.starts_with("b_") {
                continue;
            }
            let bound = (1.0 / p.nrows() as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            p.mapv_inplace(|_| dist.sample(&mut rng));
        }
        Ok(model)
    }

    pub fn shape(&self) -> &ModelShape {
        &self.shape
    }

    pub fn supports(&self) -> Option<&Supports> {
        self.supports.as_ref()
    }

    pub fn graph_fingerprint(&self) -> Option<&str> {
        self.supports.as_ref().and_then(Supports::fingerprint)
    }

    pub fn params(&self) -> &[Array2<f64>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.params
    }

    pub fn param_names(&self) -> Vec<String> {
        self.shape.param_layout().into_iter().map(|(n, _)| n).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Array2::len).sum()
    }

    /// Replaces every parameter tensor, checking shapes.
    pub fn set_params(&mut self, params: Vec<Array2<f64>>) -> Result<()> {
        if params.len() != self.params.len()
            || params.iter().zip(&self.params).any(|(a, b)| a.dim() != b.dim())
        {
            return Err(Error::ShapeMismatch("parameter tensors do not match the model layout".into()));
        }
        self.params = params;
        Ok(())
    }

    fn cell_offset(&self, decoder: bool, layer: usize) -> usize {
        6 * (usize::from(decoder) * self.shape.layers + layer)
    }

    /// GRU parameters of one cell; `None` for DCGRU models.
    pub fn gru_cell(&self, decoder: bool, layer: usize) -> Option<GruCellParams> {
        if self.shape.kind != CellKind::Gru || layer >= self.shape.layers {
            return None;
        }
        let p = &self.params[self.cell_offset(decoder, layer)..][..6];
        Some(GruCellParams {
            w_r: p[0].clone(),
            b_r: p[1].clone(),
            w_z: p[2].clone(),
            b_z: p[3].clone(),
            w_c: p[4].clone(),
            b_c: p[5].clone(),
        })
    }

    /// DCGRU parameters of one cell; `None` for GRU models.
    pub fn dcgru_cell(&self, decoder: bool, layer: usize) -> Option<DcgruCellParams> {
        if self.shape.kind != CellKind::Dcgru || layer >= self.shape.layers {
            return None;
        }
        let p = &self.params[self.cell_offset(decoder, layer)..][..6];
        let filter = |w: &Array2<f64>, b: &Array2<f64>| DiffusionFilter {
            weight: w.clone(),
            bias: b.clone(),
            k_max: self.shape.k_max,
            input_dim: self.shape.cell_input(layer) + self.shape.hidden,
        };
        Some(DcgruCellParams {
            theta_r: filter(&p[0], &p[1]),
            theta_z: filter(&p[2], &p[3]),
            theta_c: filter(&p[4], &p[5]),
            hidden_size: self.shape.hidden,
        })
    }

    fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().enumerate().map(|(i, p)| tape.param(i, p)).collect()
    }

    fn step(&self, tape: &mut Tape, pvars: &[Var], decoder: bool, layer: usize, x: Var, h: Var) -> Var {
        let off = self.cell_offset(decoder, layer);
        let cell: CellVars = pvars[off..off + 6].try_into().expect("six tensors per cell");
        match &self.supports {
            Some(s) => dcgru_step_on(tape, s, x, h, &cell),
            None => gru_step_on(tape, x, h, &cell),
        }
    }

    fn stack_step(&self, tape: &mut Tape, pvars: &[Var], decoder: bool, x: Var, hidden: &mut [Var]) -> Var {
        let mut input = x;
        for (layer, h) in hidden.iter_mut().enumerate() {
            *h = self.step(tape, pvars, decoder, layer, input, *h);
            input = *h;
        }
        input
    }

    fn encode_on(&self, tape: &mut Tape, pvars: &[Var], inputs: &[Var]) -> Vec<Var> {
        let zero = tape.constant(Array2::zeros((self.shape.num_nodes, self.shape.hidden)));
        let mut hidden = vec![zero; self.shape.layers];
        for &x in inputs {
            self.stack_step(tape, pvars, false, x, &mut hidden);
        }
        hidden
    }

    #[allow(clippy::too_many_arguments)]
    fn decode_on<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        pvars: &[Var],
        mut hidden: Vec<Var>,
        steps: usize,
        teacher: Option<&Array2<f64>>,
        eps: f64,
        rng: &mut R,
    ) -> Result<(Vec<Var>, Vec<bool>)> {
        if !(0.0..=1.0).contains(&eps) {
            return Err(Error::InvalidArgument(format!("sampling probability {eps} outside [0, 1]")));
        }
        if eps > 0.0 {
            match teacher {
                None => {
                    return Err(Error::InvalidArgument(
                        "a positive sampling probability needs teacher targets".into(),
                    ))
                }
                Some(t) if t.dim() != (steps, self.shape.num_nodes) => {
                    return Err(Error::ShapeMismatch(format!(
                        "teacher {:?}, expected ({steps}, {})",
                        t.dim(),
                        self.shape.num_nodes
                    )))
                }
                _ => {}
            }
        }
        let n = self.shape.num_nodes;
        let (w_out, b_out) = (pvars[pvars.len() - 2], pvars[pvars.len() - 1]);
        let mut x = tape.constant(Array2::zeros((n, 1)));
        let mut outputs = Vec::with_capacity(steps);
        let mut forced = Vec::with_capacity(steps.saturating_sub(1));
        for t in 0..steps {
            if t > 0 {
                let use_truth = if eps >= 1.0 {
                    true
                } else if eps <= 0.0 {
                    false
                } else {
                    rng.random::<f64>() < eps
                };
                forced.push(use_truth);
                x = if use_truth {
                    let truth = teacher.expect("checked above").row(t - 1).to_owned().insert_axis(Axis(1));
                    tape.constant(truth)
                } else {
                    outputs[t - 1]
                };
            }
            let top = self.stack_step(tape, pvars, true, x, &mut hidden);
            let lin = tape.matmul(top, w_out);
            outputs.push(tape.add_bias(lin, b_out));
        }
        Ok((outputs, forced))
    }

    fn check_inputs(&self, input: &Array2<f64>) -> Result<()> {
        if input.nrows() == 0 {
            return Err(Error::InvalidArgument("input sequence is empty".into()));
        }
        if input.ncols() != self.shape.num_nodes {
            return Err(Error::ShapeMismatch(format!(
                "input has {} nodes, model has {}",
                input.ncols(),
                self.shape.num_nodes
            )));
        }
        Ok(())
    }

    fn input_vars(tape: &mut Tape, input: &Array2<f64>) -> Vec<Var> {
        input
            .rows()
            .into_iter()
            .map(|r| tape.constant(r.to_owned().insert_axis(Axis(1))))
            .collect()
    }

    /// Encoder then decoder on one `l_in × N` input, recording a tape.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        input: &Array2<f64>,
        teacher: Option<&Array2<f64>>,
        steps: usize,
        eps: f64,
        rng: &mut R,
    ) -> Result<ForwardPass> {
        self.check_inputs(input)?;
        if steps == 0 {
            return Err(Error::InvalidArgument("at least one output step is required".into()));
        }
        let mut tape = Tape::new();
        let pvars = self.register(&mut tape);
        let xs = Self::input_vars(&mut tape, input);
        let context = self.encode_on(&mut tape, &pvars, &xs);
        let (outputs, teacher_forced) = self.decode_on(&mut tape, &pvars, context, steps, teacher, eps, rng)?;
        let output = tape.concat_cols(&outputs);
        let predictions = tape.value(output).t().to_owned();
        Ok(ForwardPass {
            tape,
            output,
            shapes: self.params.iter().map(Array2::dim).collect(),
            predictions,
            teacher_forced,
        })
    }

    /// Final hidden state of each layer after reading `input` (`l_in × N`).
    pub fn encode(&self, input: &Array2<f64>) -> Result<Vec<Array2<f64>>> {
        self.check_inputs(input)?;
        let mut tape = Tape::new();
        let pvars = self.register(&mut tape);
        let xs = Self::input_vars(&mut tape, input);
        let hidden = self.encode_on(&mut tape, &pvars, &xs);
        Ok(hidden.into_iter().map(|h| tape.value(h).clone()).collect())
    }

    /// Decoder rollout from a context of per-layer `N × hidden` states.
    pub fn decode<R: Rng + ?Sized>(
        &self,
        context: &[Array2<f64>],
        steps: usize,
        teacher: Option<&Array2<f64>>,
        eps: f64,
        rng: &mut R,
    ) -> Result<Array2<f64>> {
        let want = (self.shape.num_nodes, self.shape.hidden);
        if context.len() != self.shape.layers || context.iter().any(|c| c.dim() != want) {
            return Err(Error::ShapeMismatch(format!(
                "context must hold {} states of shape {want:?}",
                self.shape.layers
            )));
        }
        let mut tape = Tape::new();
        let pvars = self.register(&mut tape);
        let hidden = context.iter().map(|c| tape.constant(c.clone())).collect();
        let (outputs, _) = self.decode_on(&mut tape, &pvars, hidden, steps, teacher, eps, rng)?;
        let mut out = Array2::zeros((steps, self.shape.num_nodes));
        for (t, o) in outputs.iter().enumerate() {
            out.row_mut(t).assign(&tape.value(*o).column(0));
        }
        Ok(out)
    }

    /// Autoregressive `steps × N` prediction.
    pub fn predict(&self, input: &Array2<f64>, steps: usize) -> Result<Array2<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(self.forward(input, None, steps, 0.0, &mut rng)?.predictions)
    }
}
