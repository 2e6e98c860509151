use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::sha256_hex;

/// The shipped four-zone topology, `topology/mvdc4zone.cfg`.
pub const DEFAULT_TOPOLOGY: &str = include_str!("../../../../topology/mvdc4zone.cfg");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Source,
    Switchboard,
    Converter,
    Load,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub name: String,
    pub zone: u8,
    pub kind: NodeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rating_mw: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub load_mw: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeSpec {
    pub from: String,
    pub to: String,
    /// Loop resistance in ohm.
    pub resistance: f64,
    /// Loop inductance in henry.
    pub inductance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultPositionSpec {
    pub position: u8,
    pub from: String,
    pub to: String,
}

/// Parsed topology file. See `topology/mvdc4zone.cfg` for the format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    pub name: String,
    pub nominal_voltage: f64,
    /// Per-unit voltage droop of a source at rated current.
    pub source_droop: f64,
    /// Converter current limit as a multiple of rated current.
    pub current_limit_factor: f64,
    #[serde(rename = "node")]
    pub nodes: Vec<NodeSpec>,
    #[serde(rename = "edge")]
    pub edges: Vec<EdgeSpec>,
    #[serde(rename = "fault_position")]
    pub fault_positions: Vec<FaultPositionSpec>,
    /// SHA-256 of the text the config was parsed from.
    #[serde(skip)]
    pub source_hash: String,
}

impl TopologyConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg: TopologyConfig =
            toml::from_str(text).map_err(|e| Error::Topology(format!("parse error: {e}")))?;
        cfg.source_hash = sha256_hex(text.as_bytes());
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn default_mvdc4zone() -> Self {
        Self::parse(DEFAULT_TOPOLOGY).expect("shipped topology parses")
    }

    pub fn node_index(&self, name: &str) -> Result<usize> {
        self.nodes
            .iter()
            .position(|n| n.name == name)
            .ok_or_else(|| Error::Topology(format!("unknown node {name:?}")))
    }
}
