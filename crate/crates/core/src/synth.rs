//! Random radial feeders for property checks and benchmarks.

use std::ops::RangeInclusive;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::approx::green_matrix;
use crate::grid::{GridModel, GridOptions, GridSpec, Node, NodeKind, PowerInjection};

#[derive(Clone, Debug)]
pub struct RadialGridSpec {
    pub nodes: RangeInclusive<usize>,
    /// Range of line impedance magnitudes, ohms.
    pub impedance: (f64, f64),
    /// Common line angle, radians.
    pub theta: f64,
    /// Probability that a non-PCC node is a generator.
    pub generator_probability: f64,
    pub min_generators: usize,
    pub max_generators: usize,
    pub u_nominal: f64,
}

impl Default for RadialGridSpec {
    fn default() -> Self {
        RadialGridSpec {
            nodes: 2..=60,
            impedance: (0.05, 2.0),
            theta: 0.5,
            generator_probability: 0.3,
            min_generators: 1,
            max_generators: usize::MAX,
            u_nominal: 1000.0,
        }
    }
}

/// Random tree: node k attaches to a uniformly chosen earlier node. File ids
/// are shuffled so the block reordering of the loader is exercised.
pub fn random_radial_grid<R: Rng + ?Sized>(rng: &mut R, spec: &RadialGridSpec) -> GridModel {
    let n = rng.random_range(spec.nodes.clone()).max(2);
    let mut kinds = vec![NodeKind::Load; n];
    kinds[0] = NodeKind::Pcc;
    let mut generators = 0;
    for kind in kinds.iter_mut().skip(1) {
        if generators < spec.max_generators && rng.random_bool(spec.generator_probability) {
            *kind = NodeKind::Generator;
            generators += 1;
        }
    }
    let mut loads: Vec<usize> = (1..n).filter(|&v| kinds[v] == NodeKind::Load).collect();
    loads.shuffle(rng);
    while generators < spec.min_generators.min(n - 1) {
        let v = loads.pop().expect("enough load nodes to promote");
        kinds[v] = NodeKind::Generator;
        generators += 1;
    }

    let mut ids: Vec<u32> = (0..n as u32).map(|i| i * 7 + 100).collect();
    ids.shuffle(rng);

    let (lo, hi) = spec.impedance;
    let edges = (1..n)
        .map(|v| {
            let parent = rng.random_range(0..v);
            let mag = rng.random_range(lo..=hi);
            let (from, to) = if rng.random_bool(0.5) { (parent, v) } else { (v, parent) };
            (ids[from], ids[to], mag * spec.theta.cos(), mag * spec.theta.sin())
        })
        .collect();
    let mut nodes: Vec<Node> = (0..n)
        .map(|v| Node {
            id: ids[v],
            kind: kinds[v],
        })
        .collect();
    nodes.shuffle(rng);

    GridModel::new(
        GridSpec {
            nodes,
            edges,
            u_nominal: spec.u_nominal,
            pcc_phase: rng.random_range(-0.5..0.5),
        },
        GridOptions::default(),
    )
    .expect("generated trees are valid")
}

/// Random constant-power injections. Each node draws |s_v| up to
/// `total_fraction / (n − 1) · U_N² / Z_eff(0, v)`, which keeps the total
/// first-order voltage drop anywhere below `total_fraction`. Loads absorb
/// power at a lagging power factor; generators inject a little active power
/// and no reactive power.
pub fn random_injections<R: Rng + ?Sized>(
    rng: &mut R,
    grid: &GridModel,
    total_fraction: f64,
) -> PowerInjection {
    let x = green_matrix(grid).expect("valid grid");
    let n = grid.node_count();
    let u2 = grid.u_nominal() * grid.u_nominal();
    let mut s = PowerInjection::zeros(n);
    for v in 1..n {
        let cap = total_fraction / (n - 1) as f64 * u2 / x[(v, v)];
        let mag = rng.random_range(0.2..=1.0) * cap;
        let value = if grid.nodes()[v].kind == NodeKind::Load {
            let pf_angle: f64 = rng.random_range(0.1..0.6);
            -Complex64::from_polar(mag, pf_angle)
        } else {
            Complex64::new(rng.random_range(0.0..0.3) * mag, 0.0)
        };
        s.set(v, value);
    }
    s
}
