use rand_distr::{Distribution, StandardNormal};

use super::network::{Branch, DcNetwork, OperatingPoint, Shunt, Source};
use super::{add_noise, fault_current, FaultScenario, SAMPLE_INTERVAL};
use crate::error::{Error, Result};
use crate::graph::{LineModel, NodeKind, SystemGraph, TimeSeriesSample, WINDOW_STEPS};
use crate::rng;

/// Relative standard deviation of the per-step load fluctuation.
pub const LOAD_JITTER: f64 = 0.002;
/// Time constant with which source current limits take over after an onset.
pub const LIMIT_RESPONSE: f64 = 0.03;

/// Electrical parameters of a graph built from a topology config.
#[derive(Clone, Debug)]
pub struct ElectricalModel {
    nodes: usize,
    lines: Vec<LineModel>,
    fault_segments: Vec<usize>,
    sources: Vec<Source>,
    /// (node, conductance at rated power).
    loads: Vec<(usize, f64)>,
    nominal_voltage: f64,
}

impl ElectricalModel {
    pub fn from_graph(graph: &SystemGraph) -> Result<Self> {
        let cfg = graph
            .config()
            .ok_or_else(|| Error::Topology("graph carries no electrical ratings".into()))?;
        let v = cfg.nominal_voltage;
        let mut sources = Vec::new();
        let mut loads = Vec::new();
        for (i, n) in cfg.nodes.iter().enumerate() {
            match n.kind {
                NodeKind::Source => {
                    let rating = n.rating_mw.unwrap_or_default() * 1e6;
                    sources.push(Source {
                        node: i,
                        emf: v,
                        resistance: cfg.source_droop * v * v / rating,
                        current_limit: Some(cfg.current_limit_factor * rating / v),
                    });
                }
                NodeKind::Converter | NodeKind::Load => {
                    loads.push((i, n.load_mw.unwrap_or_default() * 1e6 / (v * v)));
                }
                NodeKind::Switchboard => {}
            }
        }
        if sources.is_empty() {
            return Err(Error::Topology("network has no sources".into()));
        }
        Ok(ElectricalModel {
            nodes: graph.node_count(),
            lines: graph.lines().to_vec(),
            fault_segments: graph.fault_segments().to_vec(),
            sources,
            loads,
            nominal_voltage: v,
        })
    }

    pub fn nominal_voltage(&self) -> f64 {
        self.nominal_voltage
    }

    pub fn load_count(&self) -> usize {
        self.loads.len()
    }

    pub fn node_count(&self) -> usize {
        self.nodes
    }

    pub fn segment(&self, position: u8) -> Result<LineModel> {
        (position as usize)
            .checked_sub(1)
            .and_then(|p| self.fault_segments.get(p))
            .map(|&s| self.lines[s])
            .ok_or_else(|| Error::Scenario(format!("unknown fault position {position}")))
    }

    /// Upper bound on any current in the network: every source shorted at
    /// its terminals with no current limit.
    pub fn bolted_fault_bound(&self) -> f64 {
        self.sources.iter().map(|s| s.emf / s.resistance).sum()
    }

    /// Time constant of the faulted cable: half the segment in series with
    /// the fault on each side.
    pub fn fault_time_constant(&self, position: u8, z_f: f64) -> Result<f64> {
        let seg = self.segment(position)?;
        Ok(0.5 * seg.inductance / (z_f + 0.5 * seg.resistance))
    }

    /// Builds the network for the given load factors and faulted positions.
    /// Each fault splits its segment at the midpoint, which becomes node
    /// `node_count() + k` for the `k`-th fault.
    pub fn network(&self, load_factors: &[f64], faults: &[u8], z_f: f64, limited: bool) -> Result<DcNetwork> {
        if load_factors.len() != self.loads.len() {
            return Err(Error::Scenario(format!(
                "{} load factors for {} loads",
                load_factors.len(),
                self.loads.len()
            )));
        }
        let mut net = DcNetwork::new(self.nodes + faults.len());
        let mut split = vec![None; self.lines.len()];
        for (k, &p) in faults.iter().enumerate() {
            let idx = (p as usize)
                .checked_sub(1)
                .and_then(|p| self.fault_segments.get(p))
                .copied()
                .ok_or_else(|| Error::Scenario(format!("unknown fault position {p}")))?;
            if split[idx].is_some() {
                return Err(Error::Scenario(format!("position {p} faulted twice")));
            }
            split[idx] = Some(self.nodes + k);
        }
        for (line, mid) in self.lines.iter().zip(&split) {
            match mid {
                None => net.branches.push(Branch {
                    a: line.from,
                    b: line.to,
                    resistance: line.resistance,
                }),
                Some(m) => {
                    let half = 0.5 * line.resistance;
                    net.branches.push(Branch { a: line.from, b: *m, resistance: half });
                    net.branches.push(Branch { a: *m, b: line.to, resistance: half });
                }
            }
        }
        for (k, _) in faults.iter().enumerate() {
            net.shunts.push(Shunt {
                node: self.nodes + k,
                conductance: 1.0 / z_f,
            });
        }
        for (&(node, g), f) in self.loads.iter().zip(load_factors) {
            net.shunts.push(Shunt {
                node,
                conductance: g * f,
            });
        }
        for s in &self.sources {
            net.sources.push(Source {
                current_limit: if limited { s.current_limit } else { None },
                ..*s
            });
        }
        Ok(net)
    }
}

/// A solved network together with the network it was solved on.
#[derive(Clone, Debug)]
pub struct SteadyState {
    pub network: DcNetwork,
    pub point: OperatingPoint,
}

impl SteadyState {
    /// Current through each of the first `nodes` nodes.
    pub fn measured(&self, nodes: usize) -> Vec<f64> {
        let mut t = self.point.throughput(&self.network);
        t.truncate(nodes);
        t
    }
}

/// Fault-free operating point with the given per-load scaling factors (an
/// empty slice means rated load everywhere).
pub fn solve_steady_state(graph: &SystemGraph, load_scaling: &[f64]) -> Result<SteadyState> {
    let model = ElectricalModel::from_graph(graph)?;
    let ones;
    let loads = if load_scaling.is_empty() {
        ones = vec![1.0; model.load_count()];
        &ones
    } else {
        load_scaling
    };
    if loads.iter().any(|f| !(*f >= 0.0)) {
        return Err(Error::Scenario("load scaling must be non-negative".into()));
    }
    let network = model.network(loads, &[], 1.0, true)?;
    let point = network.solve()?;
    Ok(SteadyState { network, point })
}

/// One simulated window with the electrical detail behind the measurements.
#[derive(Clone, Debug)]
pub struct SimulatedWindow {
    /// Measured node currents, noise included.
    pub sample: TimeSeriesSample,
    /// Noise-free node currents `[steps × nodes]`.
    pub clean: Vec<f64>,
    /// Node voltages `[steps × nodes]`.
    pub voltages: Vec<f64>,
    /// Voltage at each fault location per step, one vector per scenario fault.
    pub fault_voltages: Vec<Vec<f64>>,
    /// Current into each fault per step (zero before its onset).
    pub fault_currents: Vec<Vec<f64>>,
    pub nominal_voltage: f64,
}

/// Simulates a 0.6 s window sampled at 100 Hz.
///
/// Loads fluctuate slightly from step to step; that randomness is drawn
/// before anything fault related, so the pre-fault part of a window depends
/// only on the loads and the seed.
pub fn simulate_window(graph: &SystemGraph, scenario: &FaultScenario) -> Result<SimulatedWindow> {
    scenario.validate()?;
    let model = ElectricalModel::from_graph(graph)?;
    let n = model.node_count();
    let nf = scenario.positions.len();
    let base = if scenario.load_scaling.is_empty() {
        vec![1.0; model.load_count()]
    } else {
        scenario.load_scaling.clone()
    };
    if base.len() != model.load_count() {
        return Err(Error::Scenario(format!(
            "{} load factors for {} loads",
            base.len(),
            model.load_count()
        )));
    }
    let segments = scenario
        .positions
        .iter()
        .map(|&p| model.segment(p))
        .collect::<Result<Vec<_>>>()?;
    let taus = scenario
        .positions
        .iter()
        .map(|&p| model.fault_time_constant(p, scenario.fault_impedance))
        .collect::<Result<Vec<_>>>()?;

    let mut jitter_rng = rng::stream(scenario.seed, "load-jitter");
    let jitter: Vec<Vec<f64>> = (0..WINDOW_STEPS)
        .map(|_| {
            base.iter()
                .map(|b| {
                    let z: f64 = StandardNormal.sample(&mut jitter_rng);
                    b * (1.0 + LOAD_JITTER * z)
                })
                .collect()
        })
        .collect();

    // State layout: node currents, node voltages, fault-location voltages.
    let width = 2 * n + nf;
    let observe = |ss: &SteadyState, active: usize| -> Vec<f64> {
        let mut z = ss.measured(n);
        z.extend_from_slice(&ss.point.voltages[..n]);
        for (k, seg) in segments.iter().enumerate() {
            z.push(if k < active {
                ss.point.voltages[n + k]
            } else {
                0.5 * (ss.point.voltages[seg.from] + ss.point.voltages[seg.to])
            });
        }
        z
    };
    let solve = |loads: &[f64], active: usize, limited: bool| -> Result<SteadyState> {
        let network = model.network(loads, &scenario.positions[..active], scenario.fault_impedance, limited)?;
        let point = network.solve()?;
        Ok(SteadyState { network, point })
    };

    let mut state = vec![0.0; width];
    let mut trace = Vec::with_capacity(WINDOW_STEPS * width);
    for (k, loads) in jitter.iter().enumerate() {
        let t = k as f64 * SAMPLE_INTERVAL;
        let active = scenario.onsets.iter().filter(|&&on| on <= t + 1e-12).count();
        if active == 0 {
            state = observe(&solve(loads, 0, true)?, 0);
        } else {
            let onset = scenario.onsets[active - 1];
            let limited = observe(&solve(loads, active, true)?, active);
            let surge = observe(&solve(loads, active, false)?, active);
            let decay = (-(t - onset) / LIMIT_RESPONSE).exp();
            let target: Vec<f64> = limited.iter().zip(&surge).map(|(l, s)| l + (s - l) * decay).collect();
            let elapsed = if k > 0 && onset > (k - 1) as f64 * SAMPLE_INTERVAL + 1e-12 {
                t - onset
            } else {
                SAMPLE_INTERVAL
            };
            let tau = taus[active - 1];
            let keep = if tau > 0.0 { (-elapsed / tau).exp() } else { 0.0 };
            for (s, g) in state.iter_mut().zip(&target) {
                *s = g + (*s - g) * keep;
            }
        }
        trace.extend_from_slice(&state);
    }

    let mut clean = Vec::with_capacity(WINDOW_STEPS * n);
    let mut voltages = Vec::with_capacity(WINDOW_STEPS * n);
    let mut fault_voltages = vec![Vec::with_capacity(WINDOW_STEPS); nf];
    let mut fault_currents = vec![Vec::with_capacity(WINDOW_STEPS); nf];
    for k in 0..WINDOW_STEPS {
        let row = &trace[k * width..(k + 1) * width];
        let t = k as f64 * SAMPLE_INTERVAL;
        clean.extend_from_slice(&row[..n]);
        voltages.extend_from_slice(&row[n..2 * n]);
        for f in 0..nf {
            let v = row[2 * n + f];
            fault_voltages[f].push(v);
            let i = if scenario.onsets[f] <= t + 1e-12 {
                fault_current(v, 0.0, scenario.fault_impedance, 0.0, 0.0)?
            } else {
                0.0
            };
            fault_currents[f].push(i);
        }
    }

    let clean_sample = TimeSeriesSample {
        steps: WINDOW_STEPS,
        nodes: n,
        features: 1,
        values: clean.clone(),
        label: scenario.label()?,
        scenario: scenario.clone(),
    };
    let sample = add_noise(&clean_sample, scenario.noise, scenario.seed)?;
    Ok(SimulatedWindow {
        sample,
        clean,
        voltages,
        fault_voltages,
        fault_currents,
        nominal_voltage: model.nominal_voltage(),
    })
}
