//! Loss, SGD and the training loop.
//!
//! Every random draw during training comes from a stream keyed by the config
//! seed and the epoch (and batch, for dropout), so a run resumed from a
//! checkpoint at epoch `t` continues exactly as the uninterrupted run would.

mod config;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::dataset::batches;
use crate::error::{Error, Result};
use crate::graph::TimeSeriesSample;
use crate::metrics::{evaluate, ConfusionMatrix};
use crate::nn::{forward, predict, InputBatch, ModelGraph, ModelParameters};
use crate::rng;

pub use config::{Selection, TrainConfig};

/// Mean softmax cross-entropy of a logit matrix, for evaluation outside a tape.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let tape = Tape::new();
    let loss = tape.cross_entropy(tape.constant(logits.clone()), labels)?;
    let v = loss.value().data()[0];
    Ok(v)
}

/// `w ← w − lr·g` for every tensor.
pub fn sgd_step(params: &mut ModelParameters, grads: &[Tensor], lr: f64) -> Result<()> {
    if grads.len() != params.tensors.len() {
        return Err(Error::shape("sgd_step", &[params.tensors.len()], &[grads.len()]));
    }
    for (p, g) in params.tensors.iter_mut().zip(grads) {
        if p.tensor.shape() != g.shape() {
            return Err(Error::shape("sgd_step", p.tensor.shape(), g.shape()));
        }
        for (w, d) in p.tensor.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * d;
        }
    }
    Ok(())
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// One forward/backward pass over a batch. Returns the loss, the
/// per-tensor gradients and the predicted classes.
pub fn batch_gradients(
    params: &ModelParameters,
    graph: &ModelGraph,
    input: &InputBatch,
    training: bool,
    dropout_rng: &mut rng::Rng,
) -> Result<(f64, Vec<Tensor>, Vec<usize>)> {
    let tape = Tape::new();
    let bound = params.bind(&tape, true)?;
    let out = forward(&tape, &bound, graph, input, training, dropout_rng)?;
    let predictions = predict(&out.logits.value())?;
    let loss = tape.cross_entropy(out.logits, &input.labels)?;
    let value = loss.value().data()[0];
    let mut g = tape.backward(loss)?;
    let grads = bound
        .vars
        .iter()
        .map(|&v| g.take(v).unwrap_or_else(|| Tensor::zeros(&v.shape())))
        .collect();
    Ok((value, grads, predictions))
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    /// Accuracy of the training-mode predictions made during the epoch.
    pub train_acc: f64,
    pub test_acc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_acc: Option<f64>,
    /// Wall-clock seconds spent on the epoch, evaluation included.
    pub seconds: f64,
}

impl TrainLog {
    /// The row with the timing zeroed, for comparing runs.
    pub fn untimed(&self) -> TrainLog {
        TrainLog {
            seconds: 0.0,
            ..self.clone()
        }
    }
}

/// Comma-separated log with a header row: epoch, loss, train_acc, test_acc.
pub fn log_csv(log: &[TrainLog]) -> String {
    let mut out = String::from("epoch,loss,train_acc,test_acc\n");
    for row in log {
        out.push_str(&format!("{},{},{},{}\n", row.epoch, row.loss, row.train_acc, row.test_acc));
    }
    out
}

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainState {
    pub config: TrainConfig,
    pub epochs_completed: usize,
    /// Parameters after the last completed epoch.
    pub current_parameters: ModelParameters,
    /// Parameters of the epoch with the best selection accuracy.
    pub best_parameters: ModelParameters,
    pub best_accuracy: f64,
    pub best_epoch: usize,
    pub log: Vec<TrainLog>,
}

impl TrainState {
    /// Fresh state with initialized parameters.
    pub fn new(config: &TrainConfig, nodes: usize, steps: usize, features: usize) -> Result<Self> {
        config.validate()?;
        let params = ModelParameters::init(config.architecture(nodes, steps, features), config.seed)?;
        Ok(TrainState {
            config: config.clone(),
            epochs_completed: 0,
            current_parameters: params.clone(),
            best_parameters: params,
            best_accuracy: f64::NEG_INFINITY,
            best_epoch: 0,
            log: Vec::new(),
        })
    }

    pub fn is_finished(&self) -> bool {
        self.epochs_completed >= self.config.epochs
    }
}

/// Normalized samples a run trains and evaluates on.
pub struct TrainData<'a> {
    pub graph: &'a ModelGraph,
    pub train: &'a [TimeSeriesSample],
    pub test: &'a [TimeSeriesSample],
}

/// Positions of `train` held out for validation-mode selection: a seeded
/// permutation's first `fraction` of every class.
pub fn validation_positions(train: &[TimeSeriesSample], fraction: f64, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut r = rng::stream(seed, "validation");
    let mut out = Vec::new();
    let classes = train.iter().map(|s| s.label as usize + 1).max().unwrap_or(0);
    for class in 0..classes {
        let mut members: Vec<usize> = (0..train.len()).filter(|&i| train[i].label as usize == class).collect();
        members.shuffle(&mut r);
        let take = (members.len() as f64 * fraction).round() as usize;
        out.extend_from_slice(&members[..take.min(members.len())]);
    }
    out.sort_unstable();
    out
}

/// Runs (or continues) training until `config.epochs` epochs are complete.
///
/// `on_epoch` sees the state after every epoch, e.g. to write a checkpoint;
/// an error from it stops the run.
pub fn train(
    state: TrainState,
    data: &TrainData<'_>,
    mut on_epoch: impl FnMut(&TrainState) -> Result<()>,
) -> Result<TrainState> {
    let mut state = state;
    let cfg = state.config.clone();
    cfg.validate()?;
    let (fit, val): (Vec<&TimeSeriesSample>, Vec<&TimeSeriesSample>) = match cfg.selection {
        Selection::Test => (data.train.iter().collect(), Vec::new()),
        Selection::Validation => {
            let held = validation_positions(data.train, cfg.validation_fraction, cfg.seed);
            let mut is_held = vec![false; data.train.len()];
            held.iter().for_each(|&i| is_held[i] = true);
            let (v, f): (Vec<_>, Vec<_>) = data.train.iter().enumerate().partition(|(i, _)| is_held[*i]);
            (f.into_iter().map(|p| p.1).collect(), v.into_iter().map(|p| p.1).collect())
        }
    };
    if fit.is_empty() {
        return Err(Error::EmptySplit);
    }

    while state.epochs_completed < cfg.epochs {
        let epoch = state.epochs_completed;
        let started = Instant::now();
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let order = batches(fit.len(), cfg.batch_size, Some(cfg.seed), epoch)?;
        let n_batches = order.len();
        for (b, positions) in order.into_iter().enumerate() {
            let samples: Vec<&TimeSeriesSample> = positions.iter().map(|&p| fit[p]).collect();
            let input = InputBatch::from_samples(&samples)?;
            let mut dropout = rng::stream(cfg.seed, &format!("dropout/{epoch}/{b}"));
            let (loss, mut grads, predictions) =
                batch_gradients(&state.current_parameters, data.graph, &input, true, &mut dropout)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: b, loss });
            }
            let norm = clip_gradients(&mut grads, cfg.clip_norm);
            if !norm.is_finite() {
                return Err(Error::Diverged { epoch, batch: b, loss: norm });
            }
            sgd_step(&mut state.current_parameters, &grads, cfg.learning_rate)?;
            loss_sum += loss;
            correct += predictions.iter().zip(&input.labels).filter(|(p, l)| p == l).count();
        }

        let test_acc = accuracy_on(&state.current_parameters, data.graph, data.test)?;
        let val_acc = if val.is_empty() {
            None
        } else {
            Some(evaluate(&state.current_parameters, data.graph, val.iter().copied())?.accuracy())
        };
        let selection = val_acc.unwrap_or(test_acc);
        if selection > state.best_accuracy {
            state.best_accuracy = selection;
            state.best_epoch = epoch + 1;
            state.best_parameters = state.current_parameters.clone();
        }
        state.log.push(TrainLog {
            epoch: epoch + 1,
            loss: loss_sum / n_batches as f64,
            train_acc: correct as f64 / fit.len() as f64,
            test_acc,
            val_acc,
            seconds: started.elapsed().as_secs_f64(),
        });
        state.epochs_completed += 1;
        on_epoch(&state)?;
    }
    Ok(state)
}

fn accuracy_on(params: &ModelParameters, graph: &ModelGraph, samples: &[TimeSeriesSample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    Ok(evaluate(params, graph, samples.iter())?.accuracy())
}

/// Confusion matrix of `params` on `samples`; shorthand used by callers that
/// already hold a finished state.
pub fn confusion(params: &ModelParameters, graph: &ModelGraph, samples: &[TimeSeriesSample]) -> Result<ConfusionMatrix> {
    evaluate(params, graph, samples.iter())
}
