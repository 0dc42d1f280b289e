//! Feeder graph model.
//!
//! A [`GridModel`] is an immutable, validated description of a single-phase
//! equivalent distribution feeder. Nodes are stored in block order: the PCC
//! at index 0, then every generator, then every load. The agent set (PCC plus
//! generators) is therefore the index range `0..m`.

mod file;

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::ops::Range;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use file::{
    load_grid, load_grid_file, parse_grid, parse_load_file, save_grid, GridDocument, LoadDocument,
};

/// Default admissible deviation of a line angle from the common angle, in radians.
pub const DEFAULT_ANGLE_TOLERANCE: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Pcc,
    Generator,
    Load,
}

impl NodeKind {
    pub fn is_agent(self) -> bool {
        matches!(self, NodeKind::Pcc | NodeKind::Generator)
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            NodeKind::Pcc => "pcc",
            NodeKind::Generator => "generator",
            NodeKind::Load => "load",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Node {
    /// Identifier as it appears in the grid file.
    pub id: u32,
    pub kind: NodeKind,
}

/// A power line. `source` and `target` are internal node indices.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub source: usize,
    pub target: usize,
    /// Series resistance, ohms.
    pub resistance: f64,
    /// Series reactance, ohms.
    pub reactance: f64,
}

impl Edge {
    /// Impedance magnitude |z_e| in ohms.
    pub fn magnitude(&self) -> f64 {
        self.resistance.hypot(self.reactance)
    }

    /// Impedance angle in radians.
    pub fn angle(&self) -> f64 {
        self.reactance.atan2(self.resistance)
    }
}

/// Node and edge description used to build a [`GridModel`]. Node and edge
/// endpoints are referenced by file id.
#[derive(Clone, Debug, Default)]
pub struct GridSpec {
    pub nodes: Vec<Node>,
    /// `(from id, to id, resistance, reactance)`
    pub edges: Vec<(u32, u32, f64, f64)>,
    pub u_nominal: f64,
    pub pcc_phase: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridOptions {
    pub angle_tolerance: f64,
    /// Accept grids with cycles. Neighbour discovery is unavailable for them.
    pub allow_meshed: bool,
}

impl Default for GridOptions {
    fn default() -> Self {
        GridOptions {
            angle_tolerance: DEFAULT_ANGLE_TOLERANCE,
            allow_meshed: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum GridError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("grid has no PCC node")]
    MissingPcc,
    #[error("grid has more than one PCC node: {0:?}")]
    DuplicatePcc(Vec<u32>),
    #[error("duplicate node id {0}")]
    DuplicateNode(u32),
    #[error("edge references unknown node {0}")]
    UnknownNode(u32),
    #[error("edge {from}-{to} is a self loop")]
    SelfLoop { from: u32, to: u32 },
    #[error("edge {from}-{to} has impedance magnitude {magnitude} (must be positive and finite)")]
    BadImpedance { from: u32, to: u32, magnitude: f64 },
    #[error("grid needs at least two nodes, got {0}")]
    TooFewNodes(usize),
    #[error("grid is disconnected: node {0} is not reachable from the PCC")]
    Disconnected(u32),
    #[error("grid is meshed ({edges} edges for {nodes} nodes); pass allow_meshed to accept it")]
    Meshed { nodes: usize, edges: usize },
    #[error(
        "edge {from}-{to} has angle {angle:.4} rad, {deviation:.4} rad away from the common \
         angle {theta:.4} (tolerance {tolerance})"
    )]
    AngleSpread {
        from: u32,
        to: u32,
        angle: f64,
        theta: f64,
        deviation: f64,
        tolerance: f64,
    },
    #[error("nominal voltage must be positive and finite, got {0}")]
    BadNominalVoltage(f64),
    #[error("injection refers to unknown node {0}")]
    UnknownInjectionNode(u32),
    #[error("injection at PCC node {0} is not allowed")]
    PccInjection(u32),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridModel {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    theta: f64,
    u_nominal: f64,
    pcc_phase: f64,
    agent_count: usize,
    radial: bool,
    options: GridOptions,
    index: HashMap<u32, usize>,
}

impl GridModel {
    /// Validate `spec` and build the model, reordering nodes into
    /// PCC / generators / loads blocks.
    pub fn new(spec: GridSpec, options: GridOptions) -> Result<Self, GridError> {
        let GridSpec {
            nodes: raw_nodes,
            edges: raw_edges,
            u_nominal,
            pcc_phase,
        } = spec;

        if !(u_nominal.is_finite() && u_nominal > 0.0) {
            return Err(GridError::BadNominalVoltage(u_nominal));
        }
        if raw_nodes.len() < 2 {
            return Err(GridError::TooFewNodes(raw_nodes.len()));
        }
        let pccs: Vec<u32> = raw_nodes
            .iter()
            .filter(|n| n.kind == NodeKind::Pcc)
            .map(|n| n.id)
            .collect();
        match pccs.len() {
            0 => return Err(GridError::MissingPcc),
            1 => {}
            _ => return Err(GridError::DuplicatePcc(pccs)),
        }

        // Stable block ordering keeps the relative file order inside each block.
        let mut nodes = Vec::with_capacity(raw_nodes.len());
        for kind in [NodeKind::Pcc, NodeKind::Generator, NodeKind::Load] {
            nodes.extend(raw_nodes.iter().copied().filter(|n| n.kind == kind));
        }
        let mut index = HashMap::with_capacity(nodes.len());
        for (i, node) in nodes.iter().enumerate() {
            if index.insert(node.id, i).is_some() {
                return Err(GridError::DuplicateNode(node.id));
            }
        }
        let agent_count = nodes.iter().filter(|n| n.kind.is_agent()).count();

        let mut edges = Vec::with_capacity(raw_edges.len());
        for &(from, to, resistance, reactance) in &raw_edges {
            let source = *index.get(&from).ok_or(GridError::UnknownNode(from))?;
            let target = *index.get(&to).ok_or(GridError::UnknownNode(to))?;
            if source == target {
                return Err(GridError::SelfLoop { from, to });
            }
            let edge = Edge {
                source,
                target,
                resistance,
                reactance,
            };
            let magnitude = edge.magnitude();
            if !(magnitude.is_finite() && magnitude > 0.0) {
                return Err(GridError::BadImpedance {
                    from,
                    to,
                    magnitude,
                });
            }
            edges.push(edge);
        }

        let n = nodes.len();
        if let Some(unreached) = first_unreachable(n, &edges) {
            return Err(GridError::Disconnected(nodes[unreached].id));
        }
        let radial = edges.len() == n - 1;
        if !radial && !options.allow_meshed {
            return Err(GridError::Meshed {
                nodes: n,
                edges: edges.len(),
            });
        }

        let theta = weighted_mean_angle(&edges);
        let grid = GridModel {
            nodes,
            edges,
            theta,
            u_nominal,
            pcc_phase,
            agent_count,
            radial,
            options,
            index,
        };
        grid.check_angle_spread(options.angle_tolerance)?;
        Ok(grid)
    }

    /// Re-run the common-angle check against `tolerance`.
    pub fn check_angle_spread(&self, tolerance: f64) -> Result<(), GridError> {
        let worst = self
            .edges
            .iter()
            .map(|e| (e, (e.angle() - self.theta).abs()))
            .max_by(|a, b| a.1.total_cmp(&b.1));
        match worst {
            Some((edge, deviation)) if deviation > tolerance => Err(GridError::AngleSpread {
                from: self.nodes[edge.source].id,
                to: self.nodes[edge.target].id,
                angle: edge.angle(),
                theta: self.theta,
                deviation,
                tolerance,
            }),
            _ => Ok(()),
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Number of nodes, n.
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Number of agents (PCC plus generators), m.
    pub fn agent_count(&self) -> usize {
        self.agent_count
    }

    pub fn generator_count(&self) -> usize {
        self.agent_count - 1
    }

    /// Index range of the agents, PCC included.
    pub fn agents(&self) -> Range<usize> {
        0..self.agent_count
    }

    pub fn generators(&self) -> Range<usize> {
        1..self.agent_count
    }

    pub fn loads(&self) -> Range<usize> {
        self.agent_count..self.nodes.len()
    }

    /// Common impedance angle, the |z_e|-weighted mean of the line angles.
    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn u_nominal(&self) -> f64 {
        self.u_nominal
    }

    pub fn pcc_phase(&self) -> f64 {
        self.pcc_phase
    }

    /// PCC voltage phasor U_N e^{jφ}.
    pub fn pcc_voltage(&self) -> Complex64 {
        Complex64::from_polar(self.u_nominal, self.pcc_phase)
    }

    pub fn is_radial(&self) -> bool {
        self.radial
    }

    pub fn options(&self) -> GridOptions {
        self.options
    }

    pub fn index_of(&self, id: u32) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn id_of(&self, index: usize) -> u32 {
        self.nodes[index].id
    }

    /// Copy of the grid with a different nominal voltage; everything else
    /// is unchanged.
    pub fn with_nominal_voltage(&self, u_nominal: f64) -> Result<GridModel, GridError> {
        if !(u_nominal.is_finite() && u_nominal > 0.0) {
            return Err(GridError::BadNominalVoltage(u_nominal));
        }
        let mut grid = self.clone();
        grid.u_nominal = u_nominal;
        Ok(grid)
    }

    /// Copy of the grid with every impedance multiplied by `factor`.
    pub fn with_scaled_impedances(&self, factor: f64) -> GridModel {
        let mut grid = self.clone();
        for e in &mut grid.edges {
            e.resistance *= factor;
            e.reactance *= factor;
        }
        grid
    }

    /// Adjacency lists over internal indices: `(neighbour, edge index)`.
    pub fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for (k, e) in self.edges.iter().enumerate() {
            adj[e.source].push((e.target, k));
            adj[e.target].push((e.source, k));
        }
        adj
    }

    /// Edge indices on the tree path from `from` to `to`. `None` if the grid
    /// is meshed.
    pub fn tree_path(&self, from: usize, to: usize) -> Option<Vec<usize>> {
        if !self.radial {
            return None;
        }
        let adj = self.adjacency();
        let mut parent: Vec<Option<(usize, usize)>> = vec![None; self.nodes.len()];
        let mut seen = vec![false; self.nodes.len()];
        let mut queue = VecDeque::from([from]);
        seen[from] = true;
        while let Some(v) = queue.pop_front() {
            if v == to {
                break;
            }
            for &(w, k) in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    parent[w] = Some((v, k));
                    queue.push_back(w);
                }
            }
        }
        let mut path = Vec::new();
        let mut v = to;
        while v != from {
            let (p, k) = parent[v]?;
            path.push(k);
            v = p;
        }
        path.reverse();
        Some(path)
    }

    /// Incidence matrix A ∈ {0, ±1}^{|E|×n}: −1 at the source, +1 at the target.
    pub fn incidence_matrix(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.edges.len(), self.nodes.len());
        for (k, e) in self.edges.iter().enumerate() {
            a[(k, e.source)] = -1.0;
            a[(k, e.target)] = 1.0;
        }
        a
    }

    /// Weighted Laplacian L = A^T Z^{-1} A with Z = diag(|z_e|), siemens.
    pub fn laplacian(&self) -> DMatrix<f64> {
        let n = self.nodes.len();
        let mut l = DMatrix::zeros(n, n);
        for e in &self.edges {
            let y = 1.0 / e.magnitude();
            let (s, t) = (e.source, e.target);
            l[(s, s)] += y;
            l[(t, t)] += y;
            l[(s, t)] -= y;
            l[(t, s)] -= y;
        }
        l
    }
}

fn weighted_mean_angle(edges: &[Edge]) -> f64 {
    let (num, den) = edges.iter().fold((0.0, 0.0), |(num, den), e| {
        let w = e.magnitude();
        (num + w * e.angle(), den + w)
    });
    num / den
}

fn first_unreachable(n: usize, edges: &[Edge]) -> Option<usize> {
    let mut adj = vec![Vec::new(); n];
    for e in edges {
        adj[e.source].push(e.target);
        adj[e.target].push(e.source);
    }
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(v) = stack.pop() {
        for &w in &adj[v] {
            if !seen[w] {
                seen[w] = true;
                stack.push(w);
            }
        }
    }
    seen.iter().position(|s| !s)
}

/// Complex power injected at every node, watts + j·vars. Entry 0 (the PCC)
/// is always zero: the slack bus injection is an output of the power flow.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerInjection {
    s: Vec<Complex64>,
}

impl PowerInjection {
    pub fn zeros(n: usize) -> Self {
        PowerInjection {
            s: vec![Complex64::new(0.0, 0.0); n],
        }
    }

    /// Build from a full-length vector; the PCC entry is discarded.
    pub fn from_vec(mut s: Vec<Complex64>) -> Self {
        if let Some(first) = s.first_mut() {
            *first = Complex64::new(0.0, 0.0);
        }
        PowerInjection { s }
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.s
    }

    pub fn get(&self, node: usize) -> Complex64 {
        self.s[node]
    }

    /// Set the injection at `node`. Writes to the PCC are ignored.
    pub fn set(&mut self, node: usize, value: Complex64) {
        if node != 0 {
            self.s[node] = value;
        }
    }

    pub fn set_reactive(&mut self, node: usize, q: f64) {
        if node != 0 {
            self.s[node].im = q;
        }
    }

    /// Multiply every injection by `factor`.
    pub fn scaled(&self, factor: f64) -> PowerInjection {
        PowerInjection {
            s: self.s.iter().map(|s| s * factor).collect(),
        }
    }

    pub fn active(&self, range: Range<usize>) -> Vec<f64> {
        self.s[range].iter().map(|s| s.re).collect()
    }

    pub fn reactive(&self, range: Range<usize>) -> Vec<f64> {
        self.s[range].iter().map(|s| s.im).collect()
    }

    /// Sign-convention lint: loads should absorb active power and generators
    /// should inject it. Violations are reported, not rejected.
    pub fn lint(&self, grid: &GridModel) -> Vec<String> {
        let mut warnings = Vec::new();
        for (v, node) in grid.nodes().iter().enumerate().skip(1) {
            let p = self.s[v].re;
            match node.kind {
                NodeKind::Load if p > 0.0 => warnings.push(format!(
                    "load node {} injects positive active power {p} W",
                    node.id
                )),
                NodeKind::Generator if p < 0.0 => warnings.push(format!(
                    "generator node {} absorbs active power {p} W",
                    node.id
                )),
                _ => {}
            }
        }
        warnings
    }
}
