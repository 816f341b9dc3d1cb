use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::cells::Supports;
use super::seq2seq::{CellKind, ModelShape, Seq2SeqModel};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Row-major values.
    pub data: Vec<f64>,
}

/// Serializable snapshot of a [`Seq2SeqModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    pub shape: ModelShape,
    /// Fingerprint of the adjacency the model was trained on; `None` for GRU.
    pub graph_fingerprint: Option<String>,
    pub tensors: Vec<NamedTensor>,
}

impl ModelCheckpoint {
    pub fn from_model(model: &Seq2SeqModel) -> Self {
        let tensors = model
            .param_names()
            .into_iter()
            .zip(model.params())
            .map(|(name, p)| NamedTensor {
                name,
                rows: p.nrows(),
                cols: p.ncols(),
                data: p.iter().copied().collect(),
            })
            .collect();
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            shape: *model.shape(),
            graph_fingerprint: model.graph_fingerprint().map(str::to_owned),
            tensors,
        }
    }

    /// Rebuilds the model. DCGRU checkpoints need supports built from a graph
    /// with the recorded fingerprint.
    pub fn to_model(&self, supports: Option<Supports>) -> Result<Seq2SeqModel> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format {}",
                self.format_version
            )));
        }
        let supports = match self.shape.kind {
            CellKind::Gru => None,
            CellKind::Dcgru => {
                let s = supports.ok_or_else(|| Error::Checkpoint("DCGRU checkpoint needs a graph".into()))?;
                let found = s.fingerprint().unwrap_or_default();
                let expected = self.graph_fingerprint.as_deref().unwrap_or_default();
                if found != expected {
                    return Err(Error::FingerprintMismatch {
                        expected: expected.to_owned(),
                        found: found.to_owned(),
                    });
                }
                Some(s)
            }
        };
        let mut model = Seq2SeqModel::zeros(self.shape, supports)?;
        let layout = self.shape.param_layout();
        if layout.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors stored, layout needs {}",
                self.tensors.len(),
                layout.len()
            )));
        }
        let params = layout
            .iter()
            .zip(&self.tensors)
            .map(|((name, shape), t)| {
                if *name != t.name || *shape != (t.rows, t.cols) {
                    return Err(Error::Checkpoint(format!(
                        "tensor {} {}x{} does not match {name} {shape:?}",
                        t.name, t.rows, t.cols
                    )));
                }
                Array2::from_shape_vec(*shape, t.data.clone()).map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        model.set_params(params)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::SensorGraph;
    use crate::model::seq2seq::CellKind;

    fn graph(n: usize) -> SensorGraph {
        let ids = (0..n).map(|i| format!("s{i}")).collect();
        let w = Array2::from_shape_fn((n, n), |(i, j)| if i != j { 1.0 / (1 + i + j) as f64 } else { 0.0 });
        crate::graph::combine_adjacency(ids, w, Array2::zeros((n, n)), 0.0).unwrap()
    }

    #[test]
    fn json_round_trip_is_exact() {
        let shape = ModelShape {
            kind: CellKind::Dcgru,
            num_nodes: 3,
            layers: 2,
            hidden: 4,
            k_max: 2,
        };
        let g = graph(3);
        let m = Seq2SeqModel::new(shape, Some(Supports::from_graph(&g, 2).unwrap()), 8).unwrap();
        let ck = ModelCheckpoint::from_model(&m);
        let json = serde_json::to_string(&ck).unwrap();
        let back: ModelCheckpoint = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ck);
        let m2 = back.to_model(Some(Supports::from_graph(&g, 2).unwrap())).unwrap();
        assert_eq!(m2.params(), m.params());

        let mut other = graph(3);
        other.w[[0, 1]] += 1.0;
        let err = back.to_model(Some(Supports::from_graph(&other, 2).unwrap())).unwrap_err();
        assert!(matches!(err, Error::FingerprintMismatch { .. }));
    }

    #[test]
    fn gru_checkpoint_ignores_graph() {
        let shape = ModelShape {
            kind: CellKind::Gru,
            num_nodes: 2,
            layers: 1,
            hidden: 2,
            k_max: 1,
        };
        let m = Seq2SeqModel::new(shape, None, 1).unwrap();
        let ck = ModelCheckpoint::from_model(&m);
        assert!(ck.graph_fingerprint.is_none());
        assert_eq!(ck.to_model(None).unwrap().params(), m.params());
        let mut bad = ck.clone();
        bad.tensors[0].rows += 1;
        assert!(bad.to_model(None).is_err());
    }
}
