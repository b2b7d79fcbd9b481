//! Single-phase radial feeders: data model, Newton-Raphson power flow and
//! finite-difference sensitivities.
//!
//! Everything is per unit on a 1 MVA base with node 0 the slack bus at
//! `1.0∠0`. Injections are positive when power flows into the network, so
//! loads enter with a negative sign.

mod linear;
mod powerflow;
mod pv;

pub use linear::{evaluate_linear, injection_sweep, linearize, linearize_series, Sensitivities};
pub use powerflow::{solve_power_flow, PowerFlowOptions, PowerFlowSolution};
pub use pv::{pv_constraint_polytope, HalfPlane};

use std::collections::BTreeMap;
use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// kW per per-unit on the 1 MVA base.
pub const KW_PER_PU: f64 = 1000.0;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid feeder: {0}")]
    InvalidFeeder(String),
    #[error("power flow did not converge after {iterations} iterations (mismatch {residual:e} pu)")]
    NonConvergence {
        iterations: usize,
        residual: f64,
        history: Vec<f64>,
    },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("series error: {0}")]
    Series(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: usize,
    #[serde(default)]
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceKind {
    Pv,
}

/// A controllable inverter-interfaced device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Device {
    pub id: String,
    pub kind: DeviceKind,
    pub bus: usize,
    pub rating_kva: f64,
}

impl Device {
    pub fn rating_pu(&self) -> f64 {
        self.rating_kva / KW_PER_PU
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeederModel {
    #[serde(default)]
    pub name: String,
    pub nodes: Vec<Node>,
    pub branches: Vec<Branch>,
    #[serde(default)]
    pub devices: Vec<Device>,
}

impl FeederModel {
    pub fn from_json(text: &str) -> Result<Self, GridError> {
        let f: Self = serde_json::from_str(text)?;
        f.validate()?;
        Ok(f)
    }

    pub fn from_reader<R: Read>(r: R) -> Result<Self, GridError> {
        let f: Self = serde_json::from_reader(r)?;
        f.validate()?;
        Ok(f)
    }

    /// Two nodes joined by one branch.
    pub fn two_bus(r: f64, x: f64) -> Self {
        Self::line(1, r, x)
    }

    /// `n` branches in series from the substation, all with the same impedance.
    pub fn line(n: usize, r: f64, x: f64) -> Self {
        Self {
            name: format!("{}-bus line", n + 1),
            nodes: (0..=n).map(|id| Node { id, name: String::new() }).collect(),
            branches: (0..n).map(|k| Branch { from: k, to: k + 1, r, x }).collect(),
            devices: Vec::new(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn validate(&self) -> Result<(), GridError> {
        let bad = |m: String| Err(GridError::InvalidFeeder(m));
        let n = self.nodes.len();
        if n < 2 {
            return bad("a feeder needs the substation and at least one node".into());
        }
        for (k, node) in self.nodes.iter().enumerate() {
            if node.id != k {
                return bad(format!("node ids must be 0..{}; position {k} has id {}", n - 1, node.id));
            }
        }
        if self.branches.len() != n - 1 {
            return bad(format!("a radial feeder with {n} nodes has {} branches, found {}", n - 1, self.branches.len()));
        }
        // union-find: n−1 edges without a cycle span the tree
        let mut parent: Vec<usize> = (0..n).collect();
        fn root(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        for (k, b) in self.branches.iter().enumerate() {
            if b.from >= n || b.to >= n || b.from == b.to {
                return bad(format!("branch {k} joins {} and {}", b.from, b.to));
            }
            if !(b.r >= 0.0 && b.r.is_finite() && b.x.is_finite()) {
                return bad(format!("branch {k} has impedance {} + j{}", b.r, b.x));
            }
            if b.r == 0.0 && b.x == 0.0 {
                return bad(format!("branch {k} has zero impedance"));
            }
            let (a, c) = (root(&mut parent, b.from), root(&mut parent, b.to));
            if a == c {
                return bad(format!("branch {k} closes a loop"));
            }
            parent[a] = c;
        }
        let mut ids = std::collections::HashSet::new();
        for d in &self.devices {
            if d.bus >= n {
                return bad(format!("device {} sits on missing node {}", d.id, d.bus));
            }
            if !(d.rating_kva > 0.0) {
                return bad(format!("device {} has rating {}", d.id, d.rating_kva));
            }
            if !ids.insert(&d.id) {
                return bad(format!("duplicate device id {}", d.id));
            }
        }
        Ok(())
    }

    /// Hop distance of every node from the substation.
    pub fn depths(&self) -> Vec<usize> {
        let n = self.num_nodes();
        let mut adj = vec![Vec::new(); n];
        for b in &self.branches {
            adj[b.from].push(b.to);
            adj[b.to].push(b.from);
        }
        let mut depth = vec![usize::MAX; n];
        depth[0] = 0;
        let mut queue = std::collections::VecDeque::from([0]);
        while let Some(i) = queue.pop_front() {
            for &k in &adj[i] {
                if depth[k] == usize::MAX {
                    depth[k] = depth[i] + 1;
                    queue.push_back(k);
                }
            }
        }
        depth
    }
}

/// Uncontrollable demand per step and node, in pu (positive = consumption).
#[derive(Debug, Clone, PartialEq)]
pub struct LoadSeries {
    pub steps: Vec<Vec<(f64, f64)>>,
}

impl LoadSeries {
    /// Reads `t,node,p_kw,q_kvar`; missing (t, node) pairs are zero.
    pub fn from_csv<R: Read>(r: R, num_nodes: usize) -> Result<Self, GridError> {
        #[derive(Deserialize)]
        struct Row {
            t: usize,
            node: usize,
            p_kw: f64,
            q_kvar: f64,
        }
        let mut rows = Vec::new();
        for rec in csv::Reader::from_reader(r).deserialize() {
            let row: Row = rec?;
            if row.node >= num_nodes {
                return Err(GridError::Series(format!("load on missing node {}", row.node)));
            }
            rows.push(row);
        }
        let len = rows.iter().map(|r| r.t + 1).max().unwrap_or(0);
        let mut steps = vec![vec![(0.0, 0.0); num_nodes]; len];
        for r in rows {
            let cell = &mut steps[r.t][r.node];
            cell.0 += r.p_kw / KW_PER_PU;
            cell.1 += r.q_kvar / KW_PER_PU;
        }
        Ok(Self { steps })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Net injections at step `t` (loads negated); steps past the end repeat
    /// the last one.
    pub fn injections(&self, t: usize) -> Vec<(f64, f64)> {
        let s = &self.steps[t.min(self.steps.len() - 1)];
        s.iter().map(|&(p, q)| (-p, -q)).collect()
    }
}

/// Available active power per device and step, in pu.
#[derive(Debug, Clone, PartialEq)]
pub struct AvailabilitySeries {
    pub by_device: BTreeMap<String, Vec<f64>>,
}

impl AvailabilitySeries {
    /// Reads `t,device,p_avail_kw`.
    pub fn from_csv<R: Read>(r: R) -> Result<Self, GridError> {
        #[derive(Deserialize)]
        struct Row {
            t: usize,
            device: String,
            p_avail_kw: f64,
        }
        let mut by_device: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for rec in csv::Reader::from_reader(r).deserialize() {
            let row: Row = rec?;
            if !(row.p_avail_kw >= 0.0) {
                return Err(GridError::Series(format!(
                    "negative availability {} for {} at t={}",
                    row.p_avail_kw, row.device, row.t
                )));
            }
            let v = by_device.entry(row.device).or_default();
            if v.len() <= row.t {
                v.resize(row.t + 1, f64::NAN);
            }
            v[row.t] = row.p_avail_kw / KW_PER_PU;
        }
        for (id, v) in &by_device {
            if let Some(t) = v.iter().position(|x| x.is_nan()) {
                return Err(GridError::Series(format!("device {id} has no value at t={t}")));
            }
        }
        Ok(Self { by_device })
    }

    /// Value at step `t`, holding the last value past the end.
    pub fn get(&self, device: &str, t: usize) -> Option<f64> {
        self.by_device.get(device).map(|v| v[t.min(v.len() - 1)])
    }
}
