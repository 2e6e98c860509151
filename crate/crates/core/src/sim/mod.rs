//! Lumped-parameter simulator for the four-zone MVDC network.
//!
//! Each time step re-solves the resistive network for the current load and
//! fault state. Fault onsets are smoothed by a first-order RL response of the
//! faulted cable, and each onset starts with an unlimited discharge surge that
//! decays as the source current limits take over.

mod network;
mod window;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use crate::graph::LineModel;
pub use network::{Branch, DcNetwork, OperatingPoint, Shunt, Source};
pub use window::{
    simulate_window, solve_steady_state, ElectricalModel, SimulatedWindow, SteadyState, LIMIT_RESPONSE, LOAD_JITTER,
};

use crate::error::{Error, Result};
use crate::graph::{label_for_positions, TimeSeriesSample, WINDOW_STEPS};
use crate::rng;

/// Sampling interval in seconds (100 Hz).
pub const SAMPLE_INTERVAL: f64 = 0.01;
/// Window duration in seconds.
pub const WINDOW_SECONDS: f64 = WINDOW_STEPS as f64 * SAMPLE_INTERVAL;
/// Spacing between successive faults in one window.
pub const FAULT_SPACING: f64 = 0.05;
/// Minimum fault-free lead-in before the first onset.
pub const MIN_PREFAULT: f64 = 0.10;
/// Latest first-fault onset drawn by [`FaultScenario::random`].
pub const MAX_FIRST_ONSET: f64 = 0.35;
/// Range of the fault impedance drawn by [`FaultScenario::random`].
pub const FAULT_IMPEDANCE_RANGE: (f64, f64) = (0.01, 0.2);
/// Range of the per-load scaling factors.
pub const LOAD_SCALING_RANGE: (f64, f64) = (0.7, 1.3);
/// Largest accepted noise level.
pub const MAX_NOISE: f64 = 0.2;

/// Everything needed to reproduce one simulated window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaultScenario {
    /// Fault positions in order of occurrence (1..=7).
    pub positions: Vec<u8>,
    /// Onset time of each fault, seconds from the window start.
    pub onsets: Vec<f64>,
    /// Pole-to-pole fault resistance, ohm.
    pub fault_impedance: f64,
    /// Multiplier on the rated power of each load node, in node order.
    pub load_scaling: Vec<f64>,
    /// Measurement noise level p.
    pub noise: f64,
    #[serde(with = "rng::seed_string")]
    pub seed: u64,
}

impl FaultScenario {
    /// Fault-free window at nominal load. The load vector is left empty and
    /// means "all ones" to the simulator.
    pub fn normal(seed: u64) -> Self {
        FaultScenario {
            positions: Vec::new(),
            onsets: Vec::new(),
            fault_impedance: FAULT_IMPEDANCE_RANGE.1,
            load_scaling: Vec::new(),
            noise: 0.0,
            seed,
        }
    }

    /// Draws a scenario of the given class: load factors, fault impedance and
    /// first onset are uniform over their ranges, later faults follow at
    /// [`FAULT_SPACING`].
    pub fn random(label: u8, loads: usize, noise: f64, seed: u64) -> Result<Self> {
        let positions: Vec<u8> = match label {
            0 => vec![],
            1..=7 => vec![label],
            8 => vec![1, 4],
            9 => vec![1, 3, 5],
            other => return Err(Error::LabelOutOfRange(other as usize)),
        };
        let mut r = rng::stream(seed, "scenario");
        let load_scaling = (0..loads)
            .map(|_| r.random_range(LOAD_SCALING_RANGE.0..=LOAD_SCALING_RANGE.1))
            .collect();
        let fault_impedance = r.random_range(FAULT_IMPEDANCE_RANGE.0..=FAULT_IMPEDANCE_RANGE.1);
        let first = r.random_range(MIN_PREFAULT..=MAX_FIRST_ONSET);
        let onsets = (0..positions.len()).map(|k| first + k as f64 * FAULT_SPACING).collect();
        Ok(FaultScenario {
            positions,
            onsets,
            fault_impedance,
            load_scaling,
            noise,
            seed,
        })
    }

    pub fn label(&self) -> Result<u8> {
        label_for_positions(&self.positions)
    }

    /// Checks everything that does not depend on the network.
    pub fn validate(&self) -> Result<()> {
        self.label()?;
        if self.onsets.len() != self.positions.len() {
            return Err(Error::Scenario(format!(
                "{} fault positions but {} onset times",
                self.positions.len(),
                self.onsets.len()
            )));
        }
        if let Some(&first) = self.onsets.first() {
            if !(first >= MIN_PREFAULT - 1e-12) {
                return Err(Error::Scenario(format!(
                    "first onset {first} s leaves less than {MIN_PREFAULT} s of pre-fault data"
                )));
            }
        }
        for &t in &self.onsets {
            if !(t < WINDOW_SECONDS) {
                return Err(Error::Scenario(format!("onset {t} s lies outside the window")));
            }
        }
        for w in self.onsets.windows(2) {
            if ((w[1] - w[0]) - FAULT_SPACING).abs() > 1e-9 {
                return Err(Error::Scenario(format!(
                    "successive onsets {} s and {} s are not {FAULT_SPACING} s apart",
                    w[0], w[1]
                )));
            }
        }
        if !(self.fault_impedance > 0.0) {
            return Err(Error::Scenario(format!(
                "fault impedance {} must be positive",
                self.fault_impedance
            )));
        }
        if let Some(s) = self
            .load_scaling
            .iter()
            .find(|&&s| !(LOAD_SCALING_RANGE.0..=LOAD_SCALING_RANGE.1).contains(&s))
        {
            return Err(Error::Scenario(format!("load scaling {s} outside [0.7, 1.3]")));
        }
        if !(0.0..=MAX_NOISE).contains(&self.noise) {
            return Err(Error::Scenario(format!("noise level {} outside [0, {MAX_NOISE}]", self.noise)));
        }
        Ok(())
    }
}

/// Current through a pole-to-pole fault fed from pole voltages `v1` and `v2`
/// through line impedances `z_l1`, `z_l2` and fault impedance `z_f`.
pub fn fault_current(v1: f64, v2: f64, z_f: f64, z_l1: f64, z_l2: f64) -> Result<f64> {
    let z = z_f + z_l1 + z_l2;
    if !(z > 0.0) {
        return Err(Error::InvalidArgument(format!("total fault path impedance {z} must be positive")));
    }
    Ok((v1 - v2) / z)
}

/// Adds zero-mean Gaussian noise with per-channel standard deviation
/// `p × RMS(channel)`.
pub fn add_noise(sample: &TimeSeriesSample, p: f64, seed: u64) -> Result<TimeSeriesSample> {
    if !(0.0..=MAX_NOISE).contains(&p) {
        return Err(Error::InvalidArgument(format!("noise level {p} outside [0, {MAX_NOISE}]")));
    }
    let mut out = sample.clone();
    if p == 0.0 {
        return Ok(out);
    }
    let c = sample.channels();
    let mut rms = vec![0.0; c];
    for (i, v) in sample.values.iter().enumerate() {
        rms[i % c] += v * v;
    }
    for r in &mut rms {
        *r = (*r / sample.steps as f64).sqrt();
    }
    let mut r = rng::stream(seed, "noise");
    for (i, v) in out.values.iter_mut().enumerate() {
        let z: f64 = StandardNormal.sample(&mut r);
        *v += p * rms[i % c] * z;
    }
    Ok(out)
}

/// Default rising-edge threshold for [`surge_onsets`], as a fraction of the
/// total current at the first step.
pub const SURGE_THRESHOLD: f64 = 0.5;

/// Steps at which a new current surge starts.
///
/// The total step-to-step change summed over all channels is normalized by
/// the total current of the first step; a surge starts where that signed
/// change first rises above `threshold`.
pub fn surge_onsets(sample: &TimeSeriesSample, threshold: f64) -> Vec<usize> {
    let c = sample.channels();
    if sample.steps < 2 {
        return Vec::new();
    }
    let base: f64 = sample.step(0).iter().map(|v| v.abs()).sum::<f64>().max(f64::MIN_POSITIVE);
    let rise: Vec<f64> = (1..sample.steps)
        .map(|k| {
            let (prev, cur) = (sample.step(k - 1), sample.step(k));
            (0..c).map(|i| cur[i] - prev[i]).sum::<f64>() / base
        })
        .collect();
    (0..rise.len())
        .filter(|&i| rise[i] > threshold && (i == 0 || rise[i - 1] <= threshold))
        .map(|i| i + 1)
        .collect()
}
