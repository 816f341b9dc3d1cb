//! Recurrent graph models and their gradients.

pub mod cells;
pub mod checkpoint;
pub mod seq2seq;
pub mod tape;

pub use cells::{
    dcgru_cell_step, diffusion_convolution, gru_cell_step, DcgruCellParams, DiffusionFilter, GruCellParams, Supports,
};
pub use checkpoint::{ModelCheckpoint, NamedTensor, CHECKPOINT_FORMAT_VERSION};
pub use seq2seq::{CellKind, ForwardPass, ModelShape, Seq2SeqModel};
pub use tape::{Gradients, Tape, Var};
