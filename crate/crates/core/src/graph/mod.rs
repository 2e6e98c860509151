//! Static measurement graph and per-sample node time series.

mod config;
mod sample;

use std::collections::{HashSet, VecDeque};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use config::{EdgeSpec, FaultPositionSpec, NodeKind, NodeSpec, TopologyConfig, DEFAULT_TOPOLOGY};
pub use sample::{label_for_positions, normalize_features, NormStats, TimeSeriesSample, STD_FLOOR, WINDOW_STEPS};

use crate::autodiff::{AttentionLayout, Tensor};
use crate::error::{Error, Result};

/// Measurement locations in the shipped network.
pub const MEASUREMENT_NODES: usize = 20;
/// Physical cable segments in the shipped network.
pub const CABLE_SEGMENTS: usize = 30;
/// Distinct single-fault positions.
pub const FAULT_POSITIONS: usize = 7;
/// Edge feature width: normalized resistance, normalized inductance, virtual flag.
pub const EDGE_FEATURES: usize = 3;

/// One cable segment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineModel {
    pub from: usize,
    pub to: usize,
    pub resistance: f64,
    pub inductance: f64,
}

/// Which node pairs take part in attention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Neighborhood {
    /// Physical edges plus self-loops.
    Local,
    /// Every ordered node pair; non-adjacent pairs are virtual edges.
    #[default]
    Global,
}

impl FromStr for Neighborhood {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(Neighborhood::Local),
            "global" => Ok(Neighborhood::Global),
            other => Err(Error::InvalidArgument(format!("unknown neighborhood {other:?}"))),
        }
    }
}

/// Attention pair structure with one edge-feature row per pair.
#[derive(Clone, Debug)]
pub struct PairSet {
    pub layout: Arc<AttentionLayout>,
    /// `[pairs × EDGE_FEATURES]`.
    pub features: Tensor,
}

/// Static topology: nodes, cables, adjacency with self-loops and edge features.
#[derive(Clone, Debug)]
pub struct SystemGraph {
    nodes: usize,
    lines: Vec<LineModel>,
    /// Directed entries: both orientations of every line, then one self-loop per node.
    directed: Vec<(usize, usize)>,
    /// `[directed.len() × EDGE_FEATURES]`.
    edge_features: Tensor,
    adjacency: Tensor,
    degree: Vec<f64>,
    fault_segments: Vec<usize>,
    config: Option<TopologyConfig>,
}

impl SystemGraph {
    /// Builds a graph from arbitrary lines. No count requirements apply, so
    /// this also serves small test graphs.
    pub fn from_lines(nodes: usize, lines: Vec<LineModel>) -> Result<Self> {
        if nodes == 0 {
            return Err(Error::Topology("graph has no nodes".into()));
        }
        let mut seen = HashSet::new();
        for l in &lines {
            if l.from >= nodes || l.to >= nodes {
                return Err(Error::Topology(format!(
                    "edge ({}, {}) references a node outside 0..{nodes}",
                    l.from, l.to
                )));
            }
            if l.from == l.to {
                return Err(Error::Topology(format!("explicit self-loop on node {}", l.from)));
            }
            if !(l.resistance > 0.0) || !(l.inductance >= 0.0) {
                return Err(Error::Topology(format!(
                    "edge ({}, {}) needs resistance > 0 and inductance >= 0",
                    l.from, l.to
                )));
            }
            let key = (l.from.min(l.to), l.from.max(l.to));
            if !seen.insert(key) {
                return Err(Error::Topology(format!("duplicate edge {key:?}")));
            }
        }

        let r_max = lines.iter().map(|l| l.resistance).fold(0.0, f64::max);
        let l_max = lines.iter().map(|l| l.inductance).fold(0.0, f64::max);
        let norm = |v: f64, max: f64| if max > 0.0 { v / max } else { 0.0 };

        let mut directed = Vec::with_capacity(2 * lines.len() + nodes);
        let mut feats = Vec::with_capacity((2 * lines.len() + nodes) * EDGE_FEATURES);
        for l in &lines {
            for (a, b) in [(l.from, l.to), (l.to, l.from)] {
                directed.push((a, b));
                feats.extend([norm(l.resistance, r_max), norm(l.inductance, l_max), 0.0]);
            }
        }
        for i in 0..nodes {
            directed.push((i, i));
            feats.extend([0.0, 0.0, 1.0]);
        }
        let edge_features = Tensor::matrix(directed.len(), EDGE_FEATURES, feats)?;

        let mut adjacency = Tensor::zeros(&[nodes, nodes]);
        for &(a, b) in &directed {
            adjacency.data_mut()[a * nodes + b] = 1.0;
        }
        let degree = (0..nodes)
            .map(|i| adjacency.data()[i * nodes..(i + 1) * nodes].iter().sum())
            .collect();

        Ok(SystemGraph {
            nodes,
            lines,
            directed,
            edge_features,
            adjacency,
            degree,
            fault_segments: Vec::new(),
            config: None,
        })
    }

    pub fn node_count(&self) -> usize {
        self.nodes
    }

    pub fn lines(&self) -> &[LineModel] {
        &self.lines
    }

    pub fn directed_edges(&self) -> &[(usize, usize)] {
        &self.directed
    }

    pub fn edge_features(&self) -> &Tensor {
        &self.edge_features
    }

    /// Ã: adjacency with self-loops.
    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }

    /// Diagonal of D̃.
    pub fn degree(&self) -> &[f64] {
        &self.degree
    }

    /// Line index for each fault position, position 1 first.
    pub fn fault_segments(&self) -> &[usize] {
        &self.fault_segments
    }

    pub fn fault_segment(&self, position: u8) -> Result<&LineModel> {
        let idx = (position as usize)
            .checked_sub(1)
            .and_then(|p| self.fault_segments.get(p))
            .ok_or_else(|| Error::Scenario(format!("unknown fault position {position}")))?;
        Ok(&self.lines[*idx])
    }

    pub fn config(&self) -> Option<&TopologyConfig> {
        self.config.as_ref()
    }

    /// Hash of the topology source text, empty for programmatic graphs.
    pub fn config_hash(&self) -> &str {
        self.config.as_ref().map_or("", |c| c.source_hash.as_str())
    }

    pub fn is_connected(&self) -> bool {
        let mut visited = vec![false; self.nodes];
        let mut queue = VecDeque::from([0]);
        visited[0] = true;
        while let Some(i) = queue.pop_front() {
            for j in 0..self.nodes {
                if !visited[j] && self.adjacency.data()[i * self.nodes + j] != 0.0 {
                    visited[j] = true;
                    queue.push_back(j);
                }
            }
        }
        visited.into_iter().all(|v| v)
    }

    /// D̃^{-1/2} Ã D̃^{-1/2}.
    pub fn normalized_adjacency(&self) -> Tensor {
        let n = self.nodes;
        let inv_sqrt: Vec<f64> = self.degree.iter().map(|d| 1.0 / d.sqrt()).collect();
        Tensor::from_fn(&[n, n], |idx| {
            let (i, j) = (idx / n, idx % n);
            inv_sqrt[i] * self.adjacency.data()[idx] * inv_sqrt[j]
        })
    }

    /// Attention pairs for a neighbourhood, grouped by target node.
    ///
    /// Physical edges carry their normalized impedance features; self-loops
    /// and virtual edges carry `[0, 0, 1]`.
    pub fn pair_set(&self, neighborhood: Neighborhood) -> PairSet {
        let n = self.nodes;
        let mut feature_of = vec![None; n * n];
        for (idx, &(a, b)) in self.directed.iter().enumerate() {
            feature_of[a * n + b] = Some(idx);
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut neighbors = Vec::new();
        let mut feats = Vec::new();
        offsets.push(0);
        for i in 0..n {
            for j in 0..n {
                let row = feature_of[i * n + j];
                if neighborhood == Neighborhood::Local && row.is_none() {
                    continue;
                }
                neighbors.push(j);
                match row {
                    Some(r) => feats.extend_from_slice(
                        &self.edge_features.data()[r * EDGE_FEATURES..(r + 1) * EDGE_FEATURES],
                    ),
                    None => feats.extend([0.0, 0.0, 1.0]),
                }
            }
            offsets.push(neighbors.len());
        }
        let pairs = neighbors.len();
        PairSet {
            layout: Arc::new(AttentionLayout {
                nodes: n,
                offsets,
                neighbors,
            }),
            features: Tensor::matrix(pairs, EDGE_FEATURES, feats).expect("consistent sizes"),
        }
    }
}

/// Builds the measurement graph from a topology config.
///
/// The config must describe exactly [`MEASUREMENT_NODES`] nodes,
/// [`CABLE_SEGMENTS`] cables and [`FAULT_POSITIONS`] fault positions, and
/// the resulting network must be connected.
pub fn build_topology(config: &TopologyConfig) -> Result<SystemGraph> {
    if config.nodes.len() != MEASUREMENT_NODES {
        return Err(Error::Topology(format!(
            "expected {MEASUREMENT_NODES} nodes, found {}",
            config.nodes.len()
        )));
    }
    if config.edges.len() != CABLE_SEGMENTS {
        return Err(Error::Topology(format!(
            "expected {CABLE_SEGMENTS} edges, found {}",
            config.edges.len()
        )));
    }
    if !(config.nominal_voltage > 0.0) || !(config.current_limit_factor > 0.0) || !(config.source_droop > 0.0) {
        return Err(Error::Topology(
            "nominal_voltage, source_droop and current_limit_factor must be positive".into(),
        ));
    }
    let mut names = HashSet::new();
    for n in &config.nodes {
        if !names.insert(n.name.as_str()) {
            return Err(Error::Topology(format!("duplicate node name {:?}", n.name)));
        }
        match n.kind {
            NodeKind::Source if !n.rating_mw.is_some_and(|r| r > 0.0) => {
                return Err(Error::Topology(format!("source {:?} needs rating_mw > 0", n.name)));
            }
            NodeKind::Converter | NodeKind::Load if !n.load_mw.is_some_and(|p| p >= 0.0) => {
                return Err(Error::Topology(format!("load {:?} needs load_mw >= 0", n.name)));
            }
            _ => {}
        }
    }
    let lines = config
        .edges
        .iter()
        .map(|e| {
            Ok(LineModel {
                from: config.node_index(&e.from)?,
                to: config.node_index(&e.to)?,
                resistance: e.resistance,
                inductance: e.inductance,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut graph = SystemGraph::from_lines(config.nodes.len(), lines)?;
    if !graph.is_connected() {
        return Err(Error::Topology("network is not connected".into()));
    }

    if config.fault_positions.len() != FAULT_POSITIONS {
        return Err(Error::Topology(format!(
            "expected {FAULT_POSITIONS} fault positions, found {}",
            config.fault_positions.len()
        )));
    }
    let mut segments = vec![usize::MAX; FAULT_POSITIONS];
    for fp in &config.fault_positions {
        let slot = (fp.position as usize)
            .checked_sub(1)
            .filter(|&p| p < FAULT_POSITIONS)
            .ok_or_else(|| Error::Topology(format!("fault position {} outside 1..=7", fp.position)))?;
        let (a, b) = (config.node_index(&fp.from)?, config.node_index(&fp.to)?);
        let line = graph
            .lines
            .iter()
            .position(|l| (l.from, l.to) == (a, b) || (l.from, l.to) == (b, a))
            .ok_or_else(|| Error::Topology(format!("fault position {} is not on a cable", fp.position)))?;
        if segments[slot] != usize::MAX {
            return Err(Error::Topology(format!("fault position {} listed twice", fp.position)));
        }
        segments[slot] = line;
    }
    graph.fault_segments = segments;
    graph.config = Some(config.clone());
    Ok(graph)
}

/// The shipped four-zone graph.
pub fn default_graph() -> SystemGraph {
    build_topology(&TopologyConfig::default_mvdc4zone()).expect("shipped topology is valid")
}
