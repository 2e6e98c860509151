//! Confusion matrices, macro-averaged classification metrics and the
//! noise-robustness sweep.

mod export;

use serde::{Deserialize, Serialize};

use crate::dataset::{generate_dataset, DatasetSpec, Split};
use crate::error::{Error, Result};
use crate::graph::{SystemGraph, TimeSeriesSample};
use crate::nn::{infer, predict, InputBatch, ModelGraph, ModelKind, ModelParameters};
use crate::train::{train, TrainConfig, TrainData, TrainState};

pub use export::{confusion_csv, confusion_svg, curves_svg, metrics_csv, sweep_csv};

/// Samples per forward pass during evaluation.
pub const EVAL_BATCH: usize = 16;

/// Counts indexed `[true class][predicted class]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<usize>]) -> Result<Self> {
        let classes = rows.len();
        if rows.iter().any(|r| r.len() != classes) {
            return Err(Error::InvalidArgument("confusion matrix must be square".into()));
        }
        Ok(ConfusionMatrix {
            classes,
            counts: rows.concat(),
        })
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        if truth >= self.classes || predicted >= self.classes {
            return Err(Error::LabelOutOfRange(truth.max(predicted)));
        }
        self.counts[truth * self.classes + predicted] += 1;
        Ok(())
    }

    pub fn get(&self, truth: usize, predicted: usize) -> usize {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.classes).map(|k| self.get(k, k)).sum()
    }

    /// Row sums: how many samples of each class were seen.
    pub fn support(&self) -> Vec<usize> {
        (0..self.classes)
            .map(|k| (0..self.classes).map(|j| self.get(k, j)).sum())
            .collect()
    }

    /// Column sums: how often each class was predicted.
    pub fn predicted(&self) -> Vec<usize> {
        (0..self.classes)
            .map(|j| (0..self.classes).map(|k| self.get(k, j)).sum())
            .collect()
    }

    /// Correct predictions over all predictions; 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.trace() as f64 / n as f64,
        }
    }

    /// Each row divided by its sum; rows without samples stay zero.
    pub fn row_normalized(&self) -> Vec<Vec<f64>> {
        let support = self.support();
        (0..self.classes)
            .map(|k| {
                (0..self.classes)
                    .map(|j| match support[k] {
                        0 => 0.0,
                        s => self.get(k, j) as f64 / s as f64,
                    })
                    .collect()
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

/// Accuracy plus macro recall and precision over the classes that appear in
/// the truth or the predictions, and F1 as the harmonic mean of the two
/// macro averages. A ratio with a zero denominator counts as 0.
pub fn compute_metrics(cm: &ConfusionMatrix) -> Metrics {
    let support = cm.support();
    let predicted = cm.predicted();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let active: Vec<usize> = (0..cm.classes).filter(|&k| support[k] + predicted[k] > 0).collect();
    let (recall, precision) = if active.is_empty() {
        (0.0, 0.0)
    } else {
        let n = active.len() as f64;
        (
            active.iter().map(|&k| ratio(cm.get(k, k), support[k])).sum::<f64>() / n,
            active.iter().map(|&k| ratio(cm.get(k, k), predicted[k])).sum::<f64>() / n,
        )
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Metrics {
        accuracy: cm.accuracy(),
        recall,
        precision,
        f1,
    }
}

/// Evaluation-mode predictions of `params` on `samples`, tallied.
pub fn evaluate<'a>(
    params: &ModelParameters,
    graph: &ModelGraph,
    samples: impl IntoIterator<Item = &'a TimeSeriesSample>,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(params.architecture.classes);
    let samples: Vec<&TimeSeriesSample> = samples.into_iter().collect();
    for chunk in samples.chunks(EVAL_BATCH) {
        let input = InputBatch::from_samples(chunk)?;
        let predictions = predict(&infer(params, graph, &input)?)?;
        for (&truth, p) in input.labels.iter().zip(predictions) {
            cm.record(truth, p)?;
        }
    }
    Ok(cm)
}

/// Test accuracy of every model kind at every noise level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub models: Vec<ModelKind>,
    pub levels: Vec<f64>,
    /// `accuracy[m][l]` for model `models[m]` at noise `levels[l]`.
    pub accuracy: Vec<Vec<f64>>,
}

/// Generates one dataset per noise level (same seed), trains each model kind
/// on it with `base` (model kind replaced) and records the best test accuracy.
pub fn noise_sweep(
    graph: &SystemGraph,
    models: &[ModelKind],
    levels: &[f64],
    base: &TrainConfig,
    data_seed: u64,
    spec: &DatasetSpec,
    mut progress: impl FnMut(ModelKind, f64, &TrainState),
) -> Result<SweepTable> {
    let model_graph = ModelGraph::new(graph, base.neighborhood);
    let mut accuracy = vec![vec![0.0; levels.len()]; models.len()];
    for (l, &level) in levels.iter().enumerate() {
        let dataset = generate_dataset(graph, data_seed, level, spec)?;
        let train_set = dataset.normalized(Split::Train)?;
        let test_set = dataset.normalized(Split::Test)?;
        let first = &train_set[0];
        for (m, &kind) in models.iter().enumerate() {
            let cfg = TrainConfig { model: kind, ..base.clone() };
            let state = TrainState::new(&cfg, first.nodes, first.steps, first.features)?;
            let data = TrainData {
                graph: &model_graph,
                train: &train_set,
                test: &test_set,
            };
            let done = train(state, &data, |_| Ok(()))?;
            accuracy[m][l] = evaluate(&done.best_parameters, &model_graph, &test_set)?.accuracy();
            progress(kind, level, &done);
        }
    }
    Ok(SweepTable {
        models: models.to_vec(),
        levels: levels.to_vec(),
        accuracy,
    })
}
