//! Linearised feeder model.
//!
//! Everything here is derived from the Laplacian: the Green matrix `X`
//! (grounded at the PCC), its generator/load blocks `M`, `N`, `Q`, the gain
//! matrix `G` used by the agents, cyber-layer neighbour sets, and the
//! step-size bound for the dual update.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::GridModel;

/// Threshold below which a gain matrix entry counts as structurally zero.
pub const SPARSITY_EPSILON: f64 = 1e-9;

/// Condition number of `M` above which a warning is logged.
const CONDITION_WARNING: f64 = 1e12;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("grounded Laplacian is singular (grid disconnected?)")]
    SingularGroundedLaplacian,
    #[error("generator block M is not positive definite")]
    NotPositiveDefinite,
    #[error("Kron reduction failed: load block of the Laplacian is singular")]
    SingularLoadBlock,
    #[error("grid has no generator agents")]
    NoGenerators,
    #[error("neighbour sets need a radial grid")]
    Meshed,
    #[error("agent list must start with the PCC and contain distinct valid nodes")]
    InvalidAgents,
}

/// Step-size bound for the dual update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "value")]
pub enum GammaBound {
    Bounded(f64),
    /// sin θ = 0: the bound is infinite and callers pick γ freely.
    Unbounded,
}

impl GammaBound {
    pub fn value(self) -> Option<f64> {
        match self {
            GammaBound::Bounded(g) => Some(g),
            GammaBound::Unbounded => None,
        }
    }
}

/// Green matrix X: zero row and column at the PCC, inverse of the grounded
/// Laplacian elsewhere.
pub fn green_matrix(grid: &GridModel) -> Result<DMatrix<f64>, ModelError> {
    let n = grid.node_count();
    let l = grid.laplacian();
    let grounded = l.view((1, 1), (n - 1, n - 1)).into_owned();
    let inv = grounded
        .cholesky()
        .ok_or(ModelError::SingularGroundedLaplacian)?
        .inverse();
    let mut x = DMatrix::zeros(n, n);
    x.view_mut((1, 1), (n - 1, n - 1)).copy_from(&inv);
    symmetrize(&mut x);
    Ok(x)
}

/// (1_h − 1_k)^T X (1_h − 1_k).
pub fn effective_impedance(x: &DMatrix<f64>, h: usize, k: usize) -> f64 {
    if h == k {
        return 0.0;
    }
    x[(h, h)] + x[(k, k)] - 2.0 * x[(h, k)]
}

#[derive(Clone, Debug, PartialEq)]
pub struct Blocks {
    /// Generator × generator, (m−1)×(m−1).
    pub m: DMatrix<f64>,
    /// Generator × load, (m−1)×(n−m).
    pub n: DMatrix<f64>,
    /// Load × load, (n−m)×(n−m).
    pub q: DMatrix<f64>,
}

/// Split `x` into its generator/load blocks. The grid must be in block order,
/// which [`GridModel`] guarantees.
pub fn block_decompose(x: &DMatrix<f64>, grid: &GridModel) -> Result<Blocks, ModelError> {
    let n = grid.node_count();
    let m = grid.agent_count();
    let g = m - 1;
    let blocks = Blocks {
        m: x.view((1, 1), (g, g)).into_owned(),
        n: x.view((1, m), (g, n - m)).into_owned(),
        q: x.view((m, m), (n - m, n - m)).into_owned(),
    };
    if g > 0 && blocks.m.clone().cholesky().is_none() {
        return Err(ModelError::NotPositiveDefinite);
    }
    Ok(blocks)
}

/// Gain matrix G = [[1ᵀM⁻¹1, −1ᵀM⁻¹], [−M⁻¹1, M⁻¹]].
pub fn gain_matrix(m: &DMatrix<f64>) -> Result<DMatrix<f64>, ModelError> {
    let g = m.nrows();
    let mut out = DMatrix::zeros(g + 1, g + 1);
    if g == 0 {
        return Ok(out);
    }
    let m_inv = m
        .clone()
        .cholesky()
        .ok_or(ModelError::NotPositiveDefinite)?
        .inverse();
    let cond = condition_number(m);
    if cond > CONDITION_WARNING {
        log::warn!("generator block M is ill-conditioned (cond = {cond:.3e})");
    }
    let row_sums = m_inv.column_sum();
    out[(0, 0)] = row_sums.sum();
    for i in 0..g {
        out[(0, i + 1)] = -row_sums[i];
        out[(i + 1, 0)] = -row_sums[i];
    }
    out.view_mut((1, 1), (g, g)).copy_from(&m_inv);
    symmetrize(&mut out);
    Ok(out)
}

/// Kron reduction of the Laplacian onto `agents`: L_CC − L_CL L_LL⁻¹ L_LC.
///
/// Off-diagonal entries are the negated g-parameters: the current magnitude
/// at agent h when agent k is a unit source, every other agent is shorted and
/// every non-agent node is open.
pub fn g_parameter_oracle(grid: &GridModel, agents: &[usize]) -> Result<DMatrix<f64>, ModelError> {
    let n = grid.node_count();
    let mut is_agent = vec![false; n];
    for &a in agents {
        if a >= n || is_agent[a] {
            return Err(ModelError::InvalidAgents);
        }
        is_agent[a] = true;
    }
    if agents.first() != Some(&0) {
        return Err(ModelError::InvalidAgents);
    }
    let passive: Vec<usize> = (0..n).filter(|&v| !is_agent[v]).collect();
    let l = grid.laplacian();
    let pick = |rows: &[usize], cols: &[usize]| {
        DMatrix::from_fn(rows.len(), cols.len(), |i, j| l[(rows[i], cols[j])])
    };
    let l_cc = pick(agents, agents);
    if passive.is_empty() {
        return Ok(l_cc);
    }
    let l_cl = pick(agents, &passive);
    let l_ll = pick(&passive, &passive);
    let solved = l_ll
        .lu()
        .solve(&l_cl.transpose())
        .ok_or(ModelError::SingularLoadBlock)?;
    let mut reduced = l_cc - l_cl * solved;
    symmetrize(&mut reduced);
    Ok(reduced)
}

/// Cyber-layer neighbours: k ∈ N(h) iff the tree path from h to k visits no
/// agent besides h and k.
pub fn neighbor_sets(
    grid: &GridModel,
    agents: &[usize],
) -> Result<BTreeMap<usize, BTreeSet<usize>>, ModelError> {
    if !grid.is_radial() {
        return Err(ModelError::Meshed);
    }
    let n = grid.node_count();
    let mut is_agent = vec![false; n];
    for &a in agents {
        if a >= n {
            return Err(ModelError::InvalidAgents);
        }
        is_agent[a] = true;
    }
    let adj = grid.adjacency();
    let mut out = BTreeMap::new();
    for &h in agents {
        let mut found = BTreeSet::new();
        let mut seen = vec![false; n];
        seen[h] = true;
        let mut queue = VecDeque::from([h]);
        while let Some(v) = queue.pop_front() {
            for &(w, _) in &adj[v] {
                if seen[w] {
                    continue;
                }
                seen[w] = true;
                if is_agent[w] {
                    found.insert(w);
                } else {
                    queue.push_back(w);
                }
            }
        }
        out.insert(h, found);
    }
    Ok(out)
}

/// Largest eigenvalue magnitude of a symmetric matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(0.0_f64, |acc, l| acc.max(l.abs()))
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let eig = m.clone().symmetric_eigen().eigenvalues;
    let (lo, hi) = eig
        .iter()
        .fold((f64::INFINITY, 0.0_f64), |(lo, hi), l| {
            (lo.min(l.abs()), hi.max(l.abs()))
        });
    hi / lo
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Step-size bound U_N² / (sin²θ · (m−1) · D).
pub fn gamma_bound(grid: &GridModel, model: &ApproxModel) -> Result<GammaBound, ModelError> {
    bound_from(grid.u_nominal(), grid.theta(), grid.generator_count(), model.d)
}

fn bound_from(u_nominal: f64, theta: f64, generators: usize, d: f64) -> Result<GammaBound, ModelError> {
    if generators == 0 {
        return Err(ModelError::NoGenerators);
    }
    let sin = theta.sin();
    if sin == 0.0 {
        return Ok(GammaBound::Unbounded);
    }
    Ok(GammaBound::Bounded(
        u_nominal * u_nominal / (sin * sin * generators as f64 * d),
    ))
}

/// Linearised voltages e^{jφ}(U_N·1 + e^{jθ}/U_N · X s̄).
pub fn approximate_voltages(grid: &GridModel, x: &DMatrix<f64>, s: &[Complex64]) -> Vec<Complex64> {
    let u_n = grid.u_nominal();
    let rot = Complex64::from_polar(1.0, grid.theta());
    let phase = Complex64::from_polar(1.0, grid.pcc_phase());
    let n = grid.node_count();
    (0..n)
        .map(|v| {
            let mut acc = Complex64::new(0.0, 0.0);
            for w in 1..n {
                acc += s[w].conj() * x[(v, w)];
            }
            phase * (u_n + rot * acc / u_n)
        })
        .collect()
}

/// The linearised model bundle for one grid.
#[derive(Clone, Debug)]
pub struct ApproxModel {
    pub x: DMatrix<f64>,
    pub blocks: Blocks,
    pub g: DMatrix<f64>,
    /// `None` for meshed grids.
    pub neighbors: Option<BTreeMap<usize, BTreeSet<usize>>>,
    /// max_h Z_eff(0, h) over generators, ohms.
    pub d: f64,
    pub rho_m: f64,
    pub gamma_max: GammaBound,
    /// M⁻¹.
    pub m_inv: DMatrix<f64>,
    /// M⁻¹N.
    pub m_inv_n: DMatrix<f64>,
    pub theta: f64,
    pub u_nominal: f64,
}

impl ApproxModel {
    pub fn build(grid: &GridModel) -> Result<Self, ModelError> {
        let x = green_matrix(grid)?;
        let blocks = block_decompose(&x, grid)?;
        let g = gain_matrix(&blocks.m)?;
        let agents: Vec<usize> = grid.agents().collect();
        let neighbors = if grid.is_radial() {
            Some(neighbor_sets(grid, &agents)?)
        } else {
            None
        };
        let d = grid
            .generators()
            .map(|h| effective_impedance(&x, 0, h))
            .fold(0.0_f64, f64::max);
        let rho_m = spectral_radius(&blocks.m);
        let gamma_max = if grid.generator_count() == 0 {
            GammaBound::Unbounded
        } else {
            bound_from(grid.u_nominal(), grid.theta(), grid.generator_count(), d)?
        };
        let m_inv = g.view((1, 1), (grid.generator_count(), grid.generator_count())).into_owned();
        let m_inv_n = &m_inv * &blocks.n;
        Ok(ApproxModel {
            x,
            blocks,
            g,
            neighbors,
            d,
            rho_m,
            gamma_max,
            m_inv,
            m_inv_n,
            theta: grid.theta(),
            u_nominal: grid.u_nominal(),
        })
    }

    pub fn generator_count(&self) -> usize {
        self.blocks.m.nrows()
    }

    /// Agents that agent `h` exchanges measurements with. On radial grids
    /// this is N(h); on meshed grids, the off-diagonal support of row h of G.
    pub fn communication_neighbors(&self, h: usize) -> Vec<usize> {
        match &self.neighbors {
            Some(sets) => sets[&h].iter().copied().collect(),
            None => (0..self.g.nrows())
                .filter(|&k| k != h && self.g[(h, k)].abs() > SPARSITY_EPSILON)
                .collect(),
        }
    }

    /// Linearised normalised squared generator voltages
    /// v̂_G = 1 + 2/U_N² · (cosθ (M p_G + N p_L) + sinθ (M q_G + N q_L)).
    pub fn v_hat(&self, p_g: &[f64], q_g: &[f64], p_l: &[f64], q_l: &[f64]) -> DVector<f64> {
        let (m, n) = (&self.blocks.m, &self.blocks.n);
        let p = m * DVector::from_column_slice(p_g) + n * DVector::from_column_slice(p_l);
        let q = m * DVector::from_column_slice(q_g) + n * DVector::from_column_slice(q_l);
        let scale = 2.0 / (self.u_nominal * self.u_nominal);
        (p * self.theta.cos() + q * self.theta.sin()).map(|x| 1.0 + scale * x)
    }

    /// Structured dump for inspection.
    pub fn export(&self, grid: &GridModel) -> ModelExport {
        let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..m.nrows())
                .map(|i| m.row(i).iter().copied().collect())
                .collect()
        };
        ModelExport {
            node_ids: grid.nodes().iter().map(|n| n.id).collect(),
            agent_ids: grid.agents().map(|v| grid.id_of(v)).collect(),
            theta: self.theta,
            u_nominal: self.u_nominal,
            x: rows(&self.x),
            m: rows(&self.blocks.m),
            g: rows(&self.g),
            neighbors: self.neighbors.as_ref().map(|sets| {
                sets.iter()
                    .map(|(h, ks)| (grid.id_of(*h), ks.iter().map(|&k| grid.id_of(k)).collect()))
                    .collect()
            }),
            d: self.d,
            rho_m: self.rho_m,
            gamma_max: self.gamma_max,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelExport {
    pub node_ids: Vec<u32>,
    pub agent_ids: Vec<u32>,
    pub theta: f64,
    pub u_nominal: f64,
    pub x: Vec<Vec<f64>>,
    pub m: Vec<Vec<f64>>,
    pub g: Vec<Vec<f64>>,
    /// Keyed by agent file id; absent for meshed grids.
    pub neighbors: Option<BTreeMap<u32, Vec<u32>>>,
    pub d: f64,
    pub rho_m: f64,
    pub gamma_max: GammaBound,
}
