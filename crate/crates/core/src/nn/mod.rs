//! Model layers and architectures.
//!
//! Parameters live in [`ModelParameters`] as named tensors; a forward pass
//! binds them to a [`Tape`](crate::Tape) and the layer functions operate on
//! the resulting vars. Batches of `B` graphs are stacked row-wise, so every
//! node-level activation is `[B·N × width]`.

mod checkpoint;
mod layers;
mod model;
mod params;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use layers::{gcn_layer, gru_encode, gru_step, gtn_layer, linear};
pub use model::{
    forward, forward_baseline, forward_rgtn, infer, predict, probabilities, ForwardOutput, InputBatch, ModelGraph,
};
pub use params::{
    Architecture, BoundModel, GruParams, GtnLayerParams, LinearParams, ModelKind, ModelParameters, NamedTensor,
    TensorSpec, SUMMARY_STATS,
};
