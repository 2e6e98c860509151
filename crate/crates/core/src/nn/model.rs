use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::{Neighborhood, PairSet, SystemGraph, TimeSeriesSample};

use super::layers::{gcn_layer, gru_encode, gtn_layer, linear};
use super::params::{BoundModel, ModelKind, ModelParameters, SUMMARY_STATS};

/// Graph-side constants shared by every forward pass.
#[derive(Clone, Debug)]
pub struct ModelGraph {
    pub nodes: usize,
    pub pairs: PairSet,
    pub a_hat: Arc<Tensor>,
}

impl ModelGraph {
    pub fn new(graph: &SystemGraph, neighborhood: Neighborhood) -> Self {
        ModelGraph {
            nodes: graph.node_count(),
            pairs: graph.pair_set(neighborhood),
            a_hat: Arc::new(graph.normalized_adjacency()),
        }
    }
}

/// A batch of windows stored sample-major as `[B][K][N][F]`.
#[derive(Clone, Debug, PartialEq)]
pub struct InputBatch {
    pub size: usize,
    pub steps: usize,
    pub nodes: usize,
    pub features: usize,
    pub values: Vec<f64>,
    pub labels: Vec<usize>,
}

impl InputBatch {
    pub fn from_samples(samples: &[&TimeSeriesSample]) -> Result<Self> {
        let first = samples.first().ok_or(Error::EmptySplit)?;
        let (steps, nodes, features) = (first.steps, first.nodes, first.features);
        let mut values = Vec::with_capacity(samples.len() * steps * nodes * features);
        let mut labels = Vec::with_capacity(samples.len());
        for s in samples {
            if (s.steps, s.nodes, s.features) != (steps, nodes, features) {
                return Err(Error::shape(
                    "InputBatch",
                    &[steps, nodes, features],
                    &[s.steps, s.nodes, s.features],
                ));
            }
            values.extend_from_slice(&s.values);
            labels.push(s.label as usize);
        }
        Ok(InputBatch {
            size: samples.len(),
            steps,
            nodes,
            features,
            values,
            labels,
        })
    }

    fn sample_len(&self) -> usize {
        self.steps * self.nodes * self.features
    }

    /// Node features of step `k` for the whole batch, `[B·N × F]`.
    pub fn step(&self, k: usize) -> Tensor {
        let row = self.nodes * self.features;
        let mut data = Vec::with_capacity(self.size * row);
        for b in 0..self.size {
            let start = b * self.sample_len() + k * row;
            data.extend_from_slice(&self.values[start..start + row]);
        }
        Tensor::matrix(self.size * self.nodes, self.features, data).expect("consistent sizes")
    }

    /// Per-node temporal mean, std, min and max of every feature, `[B·N × 4F]`.
    pub fn summary(&self) -> Tensor {
        let (n, f, k) = (self.nodes, self.features, self.steps);
        let width = SUMMARY_STATS * f;
        let mut data = vec![0.0; self.size * n * width];
        for b in 0..self.size {
            let sample = &self.values[b * self.sample_len()..(b + 1) * self.sample_len()];
            for i in 0..n {
                for c in 0..f {
                    let series = (0..k).map(|t| sample[(t * n + i) * f + c]);
                    let mean = series.clone().sum::<f64>() / k as f64;
                    let var = series.clone().map(|x| (x - mean) * (x - mean)).sum::<f64>() / k as f64;
                    let min = series.clone().fold(f64::INFINITY, f64::min);
                    let max = series.fold(f64::NEG_INFINITY, f64::max);
                    let row = (b * n + i) * width;
                    data[row + c * SUMMARY_STATS..row + (c + 1) * SUMMARY_STATS]
                        .copy_from_slice(&[mean, var.sqrt(), min, max]);
                }
            }
        }
        Tensor::matrix(self.size * n, width, data).expect("consistent sizes")
    }

    /// Each sample flattened to one row, `[B × K·N·F]`.
    pub fn flat(&self) -> Tensor {
        Tensor::matrix(self.size, self.sample_len(), self.values.clone()).expect("consistent sizes")
    }
}

/// Logits `[B × classes]` and the attention weights of every graph layer.
pub struct ForwardOutput<'t> {
    pub logits: Var<'t>,
    pub attention: Vec<Vec<f64>>,
}

fn check_input(model: &BoundModel<'_>, graph: &ModelGraph, input: &InputBatch) -> Result<()> {
    let a = &model.architecture;
    if input.nodes != graph.nodes || input.nodes != a.nodes || input.features != a.features {
        return Err(Error::shape(
            "forward",
            &[a.steps, a.nodes, a.features],
            &[input.steps, input.nodes, input.features],
        ));
    }
    if a.kind == ModelKind::Mlp && input.steps != a.steps {
        return Err(Error::shape("forward (mlp)", &[a.steps], &[input.steps]));
    }
    Ok(())
}

/// GRU encoder, two graph-transformer layers with ReLU and dropout in
/// between, mean pooling over nodes and a linear classifier.
pub fn forward_rgtn<'t, R: Rng + ?Sized>(
    tape: &'t Tape,
    model: &BoundModel<'t>,
    graph: &ModelGraph,
    input: &InputBatch,
    training: bool,
    rng: &mut R,
) -> Result<ForwardOutput<'t>> {
    check_input(model, graph, input)?;
    let gru = model
        .gru
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument(format!("{} model has no GRU", model.architecture.kind)))?;
    let xs: Vec<Var<'t>> = (0..input.steps).map(|k| tape.constant(input.step(k))).collect();
    let h = gru_encode(&xs, gru)?;
    graph_stack(h, model, graph, training, rng)
}

fn graph_stack<'t, R: Rng + ?Sized>(
    h: Var<'t>,
    model: &BoundModel<'t>,
    graph: &ModelGraph,
    training: bool,
    rng: &mut R,
) -> Result<ForwardOutput<'t>> {
    let rate = model.architecture.dropout;
    let [l1, l2] = model.gtn.as_slice() else {
        return Err(Error::InvalidArgument("expected two graph-transformer layers".into()));
    };
    let (h1, a1) = gtn_layer(h, &graph.pairs, l1)?;
    let h1 = h1.relu().dropout(rate, training, rng)?;
    let (h2, a2) = gtn_layer(h1, &graph.pairs, l2)?;
    let pooled = h2.relu().segment_mean(graph.nodes)?;
    Ok(ForwardOutput {
        logits: linear(pooled, &model.head)?,
        attention: vec![a1, a2],
    })
}

/// Spatial-only and flat baselines.
///
/// MLP flattens the window. GCN, GAT and GTN replace the GRU summary with
/// per-node temporal statistics; GAT is GTN without edge features.
pub fn forward_baseline<'t, R: Rng + ?Sized>(
    tape: &'t Tape,
    model: &BoundModel<'t>,
    graph: &ModelGraph,
    input: &InputBatch,
    training: bool,
    rng: &mut R,
) -> Result<ForwardOutput<'t>> {
    check_input(model, graph, input)?;
    let rate = model.architecture.dropout;
    match model.architecture.kind {
        ModelKind::Mlp => {
            let mut h = tape.constant(input.flat());
            for layer in &model.mlp {
                h = linear(h, layer)?.relu().dropout(rate, training, rng)?;
            }
            Ok(ForwardOutput {
                logits: linear(h, &model.head)?,
                attention: Vec::new(),
            })
        }
        ModelKind::Gcn => {
            let [w1, w2] = model.gcn.as_slice() else {
                return Err(Error::InvalidArgument("expected two GCN layers".into()));
            };
            let x = tape.constant(input.summary());
            let h = gcn_layer(x, &graph.a_hat, *w1)?.dropout(rate, training, rng)?;
            let pooled = gcn_layer(h, &graph.a_hat, *w2)?.segment_mean(graph.nodes)?;
            Ok(ForwardOutput {
                logits: linear(pooled, &model.head)?,
                attention: Vec::new(),
            })
        }
        ModelKind::Gat | ModelKind::Gtn => graph_stack(tape.constant(input.summary()), model, graph, training, rng),
        ModelKind::Rgtn => Err(Error::InvalidArgument("rgtn is not a baseline".into())),
    }
}

/// Dispatches on the bound model's kind.
pub fn forward<'t, R: Rng + ?Sized>(
    tape: &'t Tape,
    model: &BoundModel<'t>,
    graph: &ModelGraph,
    input: &InputBatch,
    training: bool,
    rng: &mut R,
) -> Result<ForwardOutput<'t>> {
    match model.architecture.kind {
        ModelKind::Rgtn => forward_rgtn(tape, model, graph, input, training, rng),
        _ => forward_baseline(tape, model, graph, input, training, rng),
    }
}

/// Evaluation-mode logits `[B × classes]`.
pub fn infer(params: &ModelParameters, graph: &ModelGraph, input: &InputBatch) -> Result<Tensor> {
    let tape = Tape::new();
    let bound = params.bind(&tape, false)?;
    // Dropout is inactive in evaluation mode, so the generator is never drawn from.
    let mut unused = crate::rng::stream(0, "eval");
    let out = forward(&tape, &bound, graph, input, false, &mut unused)?;
    let logits = out.logits.value().clone();
    Ok(logits)
}

/// Row-wise softmax of a logit matrix.
pub fn probabilities(logits: &Tensor) -> Result<Tensor> {
    let (rows, cols) = logits.dims2()?;
    let mut out = logits.clone();
    for r in 0..rows {
        let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    Ok(out)
}

/// Index of the largest logit per row (first one on ties).
pub fn predict(logits: &Tensor) -> Result<Vec<usize>> {
    let (rows, cols) = logits.dims2()?;
    Ok((0..rows)
        .map(|r| {
            let row = &logits.data()[r * cols..(r + 1) * cols];
            (0..cols).fold(0, |best, c| if row[c] > row[best] { c } else { best })
        })
        .collect())
}
