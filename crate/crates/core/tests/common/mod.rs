//! Shared helpers for the integration tests, including reference solvers
//! written independently of the library code paths.

#![allow(dead_code)]

use std::collections::VecDeque;
use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use voltvar_core::grid::{load_grid_file, GridModel, GridOptions, PowerInjection};

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

pub fn bundled_feeder() -> (GridModel, PowerInjection) {
    load_grid_file(data_dir().join("ieee37_like.toml"), GridOptions::default())
        .expect("bundled feeder loads")
}

/// Bus admittance matrix of the common-angle plant, built straight from the
/// edge list: Y = e^{-jθ} Σ_e (1_s − 1_t)(1_s − 1_t)ᵀ / |z_e|.
pub fn admittance(grid: &GridModel) -> DMatrix<Complex64> {
    let n = grid.node_count();
    let rot = Complex64::from_polar(1.0, -grid.theta());
    let mut y = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
    for e in grid.edges() {
        let g = rot / e.resistance.hypot(e.reactance);
        let (s, t) = (e.source, e.target);
        y[(s, s)] += g;
        y[(t, t)] += g;
        y[(s, t)] -= g;
        y[(t, s)] -= g;
    }
    y
}

/// Damped Newton–Raphson on u_v · conj((Y u)_v) = s_v in rectangular
/// coordinates, with backtracking on the mismatch norm. Once a Newton step
/// is below 1e-10·U_N it is taken in full and the iteration stops.
pub fn newton_powerflow(grid: &GridModel, s: &[Complex64]) -> Option<Vec<Complex64>> {
    let n = grid.node_count();
    let y = admittance(grid);
    let u_n = grid.u_nominal();
    let mut u = vec![grid.pcc_voltage(); n];
    let mismatch = |u: &[Complex64]| -> Vec<Complex64> {
        (1..n)
            .map(|v| {
                let iv: Complex64 = (0..n).map(|w| y[(v, w)] * u[w]).sum();
                u[v] * iv.conj() - s[v]
            })
            .collect()
    };
    let norm = |f: &[Complex64]| f.iter().map(|c| c.norm()).fold(0.0, f64::max);
    let dim = n - 1;
    let mut f = mismatch(&u);
    for _ in 0..100 {
        let yu: Vec<Complex64> = (0..n)
            .map(|v| (0..n).map(|w| y[(v, w)] * u[w]).sum())
            .collect();
        let mut jac = DMatrix::<f64>::zeros(2 * dim, 2 * dim);
        for r in 1..n {
            for c in 1..n {
                let own = if r == c { yu[r].conj() } else { Complex64::new(0.0, 0.0) };
                let d_re = own + u[r] * y[(r, c)].conj();
                let d_im = Complex64::i() * own - Complex64::i() * u[r] * y[(r, c)].conj();
                let (i, j) = (r - 1, c - 1);
                jac[(i, j)] = d_re.re;
                jac[(dim + i, j)] = d_re.im;
                jac[(i, dim + j)] = d_im.re;
                jac[(dim + i, dim + j)] = d_im.im;
            }
        }
        let rhs = DVector::from_iterator(
            2 * dim,
            f.iter().map(|c| -c.re).chain(f.iter().map(|c| -c.im)),
        );
        let delta = jac.lu().solve(&rhs)?;
        if delta.amax() <= 1e-10 * u_n {
            // Quadratic convergence: the remaining error is below roundoff.
            for v in 1..n {
                u[v] += Complex64::new(delta[v - 1], delta[dim + v - 1]);
            }
            return Some(u);
        }
        let mut t = 1.0;
        let before = norm(&f);
        loop {
            let trial: Vec<Complex64> = (0..n)
                .map(|v| {
                    if v == 0 {
                        u[0]
                    } else {
                        u[v] + t * Complex64::new(delta[v - 1], delta[dim + v - 1])
                    }
                })
                .collect();
            let ft = mismatch(&trial);
            if norm(&ft) < before || t < 1e-3 {
                u = trial;
                f = ft;
                break;
            }
            t *= 0.5;
        }
    }
    None
}

/// Sum of |z_e| along the unique path, found by BFS over the edge list.
pub fn path_impedance(grid: &GridModel, from: usize, to: usize) -> f64 {
    let n = grid.node_count();
    let mut adj = vec![Vec::new(); n];
    for e in grid.edges() {
        let z = e.resistance.hypot(e.reactance);
        adj[e.source].push((e.target, z));
        adj[e.target].push((e.source, z));
    }
    let mut dist = vec![f64::NAN; n];
    dist[from] = 0.0;
    let mut queue = VecDeque::from([from]);
    while let Some(v) = queue.pop_front() {
        for &(w, z) in &adj[v] {
            if dist[w].is_nan() {
                dist[w] = dist[v] + z;
                queue.push_back(w);
            }
        }
    }
    dist[to]
}

/// Uniformly random subset of the non-PCC nodes of size `k`, sorted.
pub fn random_subset<R: Rng>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (1..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    let mut out = pool[..k].to_vec();
    out.sort_unstable();
    out
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |a, v| a.max(v.abs()))
}

/// ∞-norm (max absolute row sum).
pub fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}
