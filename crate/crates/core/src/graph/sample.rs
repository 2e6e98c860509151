use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::FaultScenario;

/// Window length in samples (0.6 s at 100 Hz).
pub const WINDOW_STEPS: usize = 60;
/// Standard deviations below this are clamped before dividing.
pub const STD_FLOOR: f64 = 1e-6;

/// One labelled window of node measurements, stored `[steps × nodes × features]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesSample {
    pub steps: usize,
    pub nodes: usize,
    pub features: usize,
    pub values: Vec<f64>,
    pub label: u8,
    pub scenario: FaultScenario,
}

impl TimeSeriesSample {
    pub fn channels(&self) -> usize {
        self.nodes * self.features
    }

    /// Row of `nodes × features` values at time step `t`.
    pub fn step(&self, t: usize) -> &[f64] {
        let c = self.channels();
        &self.values[t * c..(t + 1) * c]
    }

    pub fn at(&self, t: usize, node: usize, feature: usize) -> f64 {
        self.values[(t * self.nodes + node) * self.features + feature]
    }

    /// Time series of one channel.
    pub fn channel(&self, channel: usize) -> Vec<f64> {
        let c = self.channels();
        (0..self.steps).map(|t| self.values[t * c + channel]).collect()
    }
}

/// Maps an ordered fault position list to its class label.
///
/// No fault is class 0, a single fault at `p` is class `p`, the successive
/// pair (1, 4) is class 8 and the successive triple (1, 3, 5) is class 9.
pub fn label_for_positions(positions: &[u8]) -> Result<u8> {
    match positions {
        [] => Ok(0),
        [p @ 1..=7] => Ok(*p),
        [1, 4] => Ok(8),
        [1, 3, 5] => Ok(9),
        other => Err(Error::Scenario(format!(
            "fault positions {other:?} are not a supported scenario"
        ))),
    }
}

/// Per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Two-pass population statistics over every time step of every sample.
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a TimeSeriesSample> + Clone) -> Result<Self> {
        let mut iter = samples.clone().into_iter();
        let first = iter.next().ok_or(Error::EmptySplit)?;
        let channels = first.channels();
        let mut sum = vec![0.0; channels];
        let mut count = 0usize;
        for s in samples.clone() {
            if s.channels() != channels {
                return Err(Error::shape("norm stats", &[channels], &[s.channels()]));
            }
            for t in 0..s.steps {
                for (acc, v) in sum.iter_mut().zip(s.step(t)) {
                    *acc += v;
                }
            }
            count += s.steps;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0; channels];
        for s in samples {
            for t in 0..s.steps {
                for ((acc, v), m) in sq.iter_mut().zip(s.step(t)).zip(&mean) {
                    *acc += (v - m) * (v - m);
                }
            }
        }
        let std = sq.iter().map(|s| (s / count as f64).sqrt()).collect();
        Ok(NormStats { mean, std })
    }
}

/// Standardizes each channel with the given statistics, flooring the
/// standard deviation at [`STD_FLOOR`].
pub fn normalize_features(raw: &TimeSeriesSample, stats: &NormStats) -> Result<TimeSeriesSample> {
    let c = raw.channels();
    if stats.mean.len() != c || stats.std.len() != c {
        return Err(Error::shape("normalize_features", &[c], &[stats.mean.len(), stats.std.len()]));
    }
    let mut out = raw.clone();
    for (i, v) in out.values.iter_mut().enumerate() {
        let ch = i % c;
        *v = (*v - stats.mean[ch]) / stats.std[ch].max(STD_FLOOR);
    }
    Ok(out)
}
