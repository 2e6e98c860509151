//! Fault localization in zonal MVDC shipboard networks with a recurrent
//! graph transformer: a GRU encodes each measurement node's current history,
//! and two multi-head graph-transformer layers with edge features mix the
//! node states before a graph-level classifier.
//!
//! The crate also contains everything around the model: a small
//! reverse-mode autodiff engine, a lumped-parameter DC network simulator that
//! produces labelled line-to-line fault windows, dataset persistence, SGD
//! training, and evaluation metrics.

pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod sim;
pub mod train;

pub use autodiff::{Tape, Tensor, Var};
pub use dataset::{generate_dataset, Dataset, DatasetManifest, DatasetSpec, Split};
pub use error::{Error, Result};
pub use graph::{default_graph, Neighborhood, SystemGraph, TimeSeriesSample};
pub use metrics::{compute_metrics, evaluate, ConfusionMatrix, Metrics, SweepTable};
pub use nn::{Architecture, Checkpoint, ModelGraph, ModelKind, ModelParameters};
pub use sim::{simulate_window, FaultScenario};
pub use train::{train, TrainConfig, TrainData, TrainLog, TrainState};
