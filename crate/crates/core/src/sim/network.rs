//! Modified nodal analysis for resistive DC networks.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Branch {
    pub a: usize,
    pub b: usize,
    pub resistance: f64,
}

/// Conductance from a node to the return conductor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Shunt {
    pub node: usize,
    pub conductance: f64,
}

/// Voltage source behind a series resistance. With `resistance == 0` the
/// source is ideal and cannot be current limited.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Source {
    pub node: usize,
    pub emf: f64,
    pub resistance: f64,
    pub current_limit: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DcNetwork {
    pub nodes: usize,
    pub branches: Vec<Branch>,
    pub shunts: Vec<Shunt>,
    pub sources: Vec<Source>,
}

/// Solved steady state. Branch currents flow `a → b`; source currents are
/// injected into their node; shunt currents leave their node.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatingPoint {
    pub voltages: Vec<f64>,
    pub branch_currents: Vec<f64>,
    pub shunt_currents: Vec<f64>,
    pub source_currents: Vec<f64>,
    /// Sources that ended at their current limit.
    pub limited: Vec<bool>,
}

impl DcNetwork {
    pub fn new(nodes: usize) -> Self {
        DcNetwork {
            nodes,
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<()> {
        for b in &self.branches {
            if b.a >= self.nodes || b.b >= self.nodes || !(b.resistance > 0.0) {
                return Err(Error::InvalidArgument(format!("bad branch {b:?}")));
            }
        }
        for s in &self.shunts {
            if s.node >= self.nodes || !(s.conductance >= 0.0) {
                return Err(Error::InvalidArgument(format!("bad shunt {s:?}")));
            }
        }
        for s in &self.sources {
            if s.node >= self.nodes || !(s.resistance >= 0.0) {
                return Err(Error::InvalidArgument(format!("bad source {s:?}")));
            }
            if s.current_limit.is_some() && s.resistance == 0.0 {
                return Err(Error::InvalidArgument("an ideal source cannot be current limited".into()));
            }
        }
        Ok(())
    }

    /// Solves the network, converting any source whose current would exceed
    /// its limit into a constant-current injection at the limit.
    pub fn solve(&self) -> Result<OperatingPoint> {
        self.validate()?;
        let mut limited = vec![false; self.sources.len()];
        let max_rounds = 2 * self.sources.len() + 2;
        for _ in 0..max_rounds {
            let voltages = self.solve_linear(&limited)?;
            let mut changed = false;
            for (k, s) in self.sources.iter().enumerate() {
                let Some(limit) = s.current_limit else { continue };
                let free = (s.emf - voltages[s.node]) / s.resistance;
                if !limited[k] && free > limit {
                    limited[k] = true;
                    changed = true;
                } else if limited[k] && free < limit {
                    limited[k] = false;
                    changed = true;
                }
            }
            if !changed {
                return Ok(self.operating_point(voltages, limited));
            }
        }
        Err(Error::InvalidArgument("current limiting did not settle".into()))
    }

    fn solve_linear(&self, limited: &[bool]) -> Result<Vec<f64>> {
        let n = self.nodes;
        let ideal: Vec<usize> = (0..self.sources.len())
            .filter(|&k| self.sources[k].resistance == 0.0)
            .collect();
        let size = n + ideal.len();
        let mut a = DMatrix::<f64>::zeros(size, size);
        let mut rhs = DVector::<f64>::zeros(size);
        for br in &self.branches {
            let g = 1.0 / br.resistance;
            a[(br.a, br.a)] += g;
            a[(br.b, br.b)] += g;
            a[(br.a, br.b)] -= g;
            a[(br.b, br.a)] -= g;
        }
        for s in &self.shunts {
            a[(s.node, s.node)] += s.conductance;
        }
        for (k, s) in self.sources.iter().enumerate() {
            if s.resistance == 0.0 {
                continue;
            }
            if limited[k] {
                rhs[s.node] += s.current_limit.expect("only limited sources are clamped");
            } else {
                let g = 1.0 / s.resistance;
                a[(s.node, s.node)] += g;
                rhs[s.node] += s.emf * g;
            }
        }
        for (row, &k) in ideal.iter().enumerate() {
            let s = &self.sources[k];
            let r = n + row;
            a[(s.node, r)] -= 1.0;
            a[(r, s.node)] += 1.0;
            rhs[r] = s.emf;
        }
        let lu = a.lu();
        let x = lu.solve(&rhs).ok_or(Error::SingularNetwork)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularNetwork);
        }
        let mut v: Vec<f64> = x.iter().copied().collect();
        // Ideal-source currents are recomputed from KCL in `operating_point`.
        v.truncate(n);
        Ok(v)
    }

    fn operating_point(&self, voltages: Vec<f64>, limited: Vec<bool>) -> OperatingPoint {
        let branch_currents: Vec<f64> = self
            .branches
            .iter()
            .map(|b| (voltages[b.a] - voltages[b.b]) / b.resistance)
            .collect();
        let shunt_currents: Vec<f64> = self.shunts.iter().map(|s| voltages[s.node] * s.conductance).collect();
        let mut source_currents = vec![0.0; self.sources.len()];
        // Net outflow per node excluding sources, used to close KCL on ideal sources.
        let mut outflow = vec![0.0; self.nodes];
        for (b, i) in self.branches.iter().zip(&branch_currents) {
            outflow[b.a] += i;
            outflow[b.b] -= i;
        }
        for (s, i) in self.shunts.iter().zip(&shunt_currents) {
            outflow[s.node] += i;
        }
        for (k, s) in self.sources.iter().enumerate() {
            if s.resistance > 0.0 {
                source_currents[k] = if limited[k] {
                    s.current_limit.unwrap_or_default()
                } else {
                    (s.emf - voltages[s.node]) / s.resistance
                };
                outflow[s.node] -= source_currents[k];
            }
        }
        for (k, s) in self.sources.iter().enumerate() {
            if s.resistance == 0.0 {
                let share = self.sources.iter().filter(|o| o.resistance == 0.0 && o.node == s.node).count();
                source_currents[k] = outflow[s.node] / share as f64;
            }
        }
        OperatingPoint {
            voltages,
            branch_currents,
            shunt_currents,
            source_currents,
            limited,
        }
    }
}

impl OperatingPoint {
    /// Net current leaving each node (should be zero everywhere).
    pub fn kcl_residuals(&self, net: &DcNetwork) -> Vec<f64> {
        let mut r = vec![0.0; net.nodes];
        for (b, i) in net.branches.iter().zip(&self.branch_currents) {
            r[b.a] += i;
            r[b.b] -= i;
        }
        for (s, i) in net.shunts.iter().zip(&self.shunt_currents) {
            r[s.node] += i;
        }
        for (s, i) in net.sources.iter().zip(&self.source_currents) {
            r[s.node] -= i;
        }
        r
    }

    /// Current passing through each node: half the sum of magnitudes of all
    /// currents incident to it. By KCL this equals total inflow.
    pub fn throughput(&self, net: &DcNetwork) -> Vec<f64> {
        let mut t = vec![0.0; net.nodes];
        for (b, i) in net.branches.iter().zip(&self.branch_currents) {
            t[b.a] += i.abs();
            t[b.b] += i.abs();
        }
        for (s, i) in net.shunts.iter().zip(&self.shunt_currents) {
            t[s.node] += i.abs();
        }
        for (s, i) in net.sources.iter().zip(&self.source_currents) {
            t[s.node] += i.abs();
        }
        t.iter_mut().for_each(|v| *v *= 0.5);
        t
    }
}
