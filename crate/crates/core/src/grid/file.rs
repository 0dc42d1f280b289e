//! TOML grid and load files.
//!
//! Grid file layout:
//!
//! ```toml
//! [meta]
//! name = "two-node"     # optional
//! u_nominal = 1000.0    # volts RMS
//! pcc_phase = 0.0       # radians
//!
//! [[nodes]]
//! id = 0
//! kind = "pcc"          # pcc | generator | load
//!
//! [[nodes]]
//! id = 1
//! kind = "generator"
//! p = 0.0               # optional injected active power, W
//! q = 0.0               # optional injected reactive power, var
//!
//! [[edges]]
//! from = 0
//! to = 1
//! resistance = 0.8776   # ohms
//! reactance = 0.4794    # ohms
//! ```
//!
//! Load files carry `[[loads]]` tables with `node`, `p`, `q` and override the
//! injections of the nodes they list.

use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{GridError, GridModel, GridOptions, GridSpec, Node, NodeKind, PowerInjection};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridDocument {
    pub meta: MetaSection,
    pub nodes: Vec<NodeEntry>,
    pub edges: Vec<EdgeEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub u_nominal: f64,
    #[serde(default)]
    pub pcc_phase: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeEntry {
    pub id: u32,
    pub kind: NodeKind,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub p: f64,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub q: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeEntry {
    pub from: u32,
    pub to: u32,
    pub resistance: f64,
    pub reactance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadDocument {
    pub loads: Vec<LoadEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadEntry {
    pub node: u32,
    pub p: f64,
    pub q: f64,
}

fn is_zero(x: &f64) -> bool {
    *x == 0.0
}

impl GridDocument {
    pub fn from_toml(text: &str) -> Result<Self, GridError> {
        toml::from_str(text).map_err(|e| GridError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("grid documents always serialise")
    }

    /// Validate into a model plus the injections listed on the nodes.
    pub fn into_model(self, options: GridOptions) -> Result<(GridModel, PowerInjection), GridError> {
        let spec = GridSpec {
            nodes: self
                .nodes
                .iter()
                .map(|n| Node {
                    id: n.id,
                    kind: n.kind,
                })
                .collect(),
            edges: self
                .edges
                .iter()
                .map(|e| (e.from, e.to, e.resistance, e.reactance))
                .collect(),
            u_nominal: self.meta.u_nominal,
            pcc_phase: self.meta.pcc_phase,
        };
        let grid = GridModel::new(spec, options)?;
        let mut s = PowerInjection::zeros(grid.node_count());
        for entry in &self.nodes {
            let v = grid.index_of(entry.id).expect("node was just indexed");
            if v == 0 && (entry.p != 0.0 || entry.q != 0.0) {
                return Err(GridError::PccInjection(entry.id));
            }
            s.set(v, Complex64::new(entry.p, entry.q));
        }
        for warning in s.lint(&grid) {
            log::warn!("{warning}");
        }
        Ok((grid, s))
    }

    /// Document describing `grid`, in internal (block) node order.
    pub fn from_model(grid: &GridModel, injections: Option<&PowerInjection>) -> Self {
        let nodes = grid
            .nodes()
            .iter()
            .enumerate()
            .map(|(v, n)| {
                let s = injections.map_or(Complex64::new(0.0, 0.0), |s| s.get(v));
                NodeEntry {
                    id: n.id,
                    kind: n.kind,
                    p: s.re,
                    q: s.im,
                }
            })
            .collect();
        let edges = grid
            .edges()
            .iter()
            .map(|e| EdgeEntry {
                from: grid.id_of(e.source),
                to: grid.id_of(e.target),
                resistance: e.resistance,
                reactance: e.reactance,
            })
            .collect();
        GridDocument {
            meta: MetaSection {
                name: None,
                u_nominal: grid.u_nominal(),
                pcc_phase: grid.pcc_phase(),
            },
            nodes,
            edges,
        }
    }
}

/// Parse a grid file into a model plus the node injections it lists.
pub fn parse_grid(
    text: &str,
    options: GridOptions,
) -> Result<(GridModel, PowerInjection), GridError> {
    GridDocument::from_toml(text)?.into_model(options)
}

/// Parse a grid file, discarding any injections.
pub fn load_grid(text: &str, options: GridOptions) -> Result<GridModel, GridError> {
    parse_grid(text, options).map(|(grid, _)| grid)
}

pub fn load_grid_file(
    path: impl AsRef<Path>,
    options: GridOptions,
) -> Result<(GridModel, PowerInjection), GridError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| GridError::Parse(format!("{}: {e}", path.display())))?;
    parse_grid(&text, options)
}

/// Serialise `grid` (and optionally its injections) as a grid file.
pub fn save_grid(grid: &GridModel, injections: Option<&PowerInjection>) -> String {
    GridDocument::from_model(grid, injections).to_toml()
}

/// Apply a load file on top of `base`.
pub fn parse_load_file(
    grid: &GridModel,
    base: &PowerInjection,
    text: &str,
) -> Result<PowerInjection, GridError> {
    let doc: LoadDocument = toml::from_str(text).map_err(|e| GridError::Parse(e.to_string()))?;
    let mut s = base.clone();
    for entry in doc.loads {
        let v = grid
            .index_of(entry.node)
            .ok_or(GridError::UnknownInjectionNode(entry.node))?;
        if v == 0 {
            return Err(GridError::PccInjection(entry.node));
        }
        s.set(v, Complex64::new(entry.p, entry.q));
    }
    Ok(s)
}
