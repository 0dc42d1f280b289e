//! Nonlinear steady-state power flow.
//!
//! With every non-PCC node a constant-power device, the steady state is the
//! fixed point of
//!
//! ```text
//! u ← u_0·1 + e^{jθ} X (s̄ ⊘ ū)
//! ```
//!
//! where X is the PCC-grounded Green matrix. In the usual operating regime
//! (injected currents small compared with U_N/|Z|) the map is a contraction.

use std::io::Write;

use nalgebra::DMatrix;
use num_complex::Complex64;
use thiserror::Error;

use crate::approx::{green_matrix, ModelError};
use crate::grid::GridModel;

/// Floor added to |s_v| in the relative power mismatch, VA.
pub const S_FLOOR: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverOptions {
    /// Stop when the largest voltage change is below `tolerance · U_N`.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Abort when any |u_v| leaves `[lo, hi] · U_N`.
    pub collapse_band: (f64, f64),
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tolerance: 1e-10,
            max_iterations: 200,
            collapse_band: (0.5, 1.5),
        }
    }
}

#[derive(Debug, Error)]
pub enum PowerFlowError {
    #[error("expected {expected} entries, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("power flow did not converge in {iterations} iterations (last step {last_step:.3e} pu)")]
    NonConvergence {
        iterations: usize,
        last_step: f64,
        /// Largest voltage change per iteration, per unit.
        trace: Vec<f64>,
    },
    #[error(
        "voltage collapse at iteration {iteration}: |u| at node {node} is {magnitude_pu:.4} pu"
    )]
    VoltageCollapse {
        iteration: usize,
        node: u32,
        magnitude_pu: f64,
        trace: Vec<f64>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One solution of the steady-state equations.
#[derive(Clone, Debug, PartialEq)]
pub struct SteadyState {
    /// Node voltage phasors, V RMS.
    pub u: Vec<Complex64>,
    /// Injected node currents, A RMS.
    pub i: Vec<Complex64>,
    /// Branch currents, A RMS, oriented source → target.
    pub xi: Vec<Complex64>,
    pub iterations: usize,
    /// Largest relative mismatch over the steady-state equations.
    pub residual: f64,
}

impl SteadyState {
    fn from_voltages(
        grid: &GridModel,
        laplacian: &DMatrix<f64>,
        s: &[Complex64],
        u: Vec<Complex64>,
        iterations: usize,
    ) -> Self {
        let i = injected_currents_with(grid, laplacian, &u);
        let xi = branch_currents(grid, &u);
        let mut state = SteadyState {
            u,
            i,
            xi,
            iterations,
            residual: 0.0,
        };
        state.residual = residuals(grid, s, &state).max();
        state
    }

    /// Flat no-load profile u = U_N e^{jφ}·1.
    pub fn flat(grid: &GridModel) -> Self {
        let n = grid.node_count();
        let laplacian = grid.laplacian();
        let zeros = vec![Complex64::new(0.0, 0.0); n];
        SteadyState::from_voltages(grid, &laplacian, &zeros, vec![grid.pcc_voltage(); n], 0)
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.u.iter().map(|u| u.norm()).collect()
    }

    /// Complex power u_v ī_v actually exchanged at every node.
    pub fn node_powers(&self) -> Vec<Complex64> {
        self.u
            .iter()
            .zip(&self.i)
            .map(|(u, i)| u * i.conj())
            .collect()
    }
}

/// Relative mismatches of the steady-state equations.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Residuals {
    /// ‖Aᵀξ + i‖∞ / (‖i‖∞ + S_FLOOR/U_N)
    pub kcl: f64,
    /// ‖Au + e^{jθ} Z ξ‖∞ / U_N
    pub kvl: f64,
    /// |u_0 − U_N e^{jφ}| / U_N
    pub pcc: f64,
    /// max_v |u_v ī_v − s_v| / (|s_v| + S_FLOOR)
    pub power: f64,
}

impl Residuals {
    pub fn max(&self) -> f64 {
        self.kcl.max(self.kvl).max(self.pcc).max(self.power)
    }
}

pub fn residuals(grid: &GridModel, s: &[Complex64], state: &SteadyState) -> Residuals {
    let u_n = grid.u_nominal();
    let rot = Complex64::from_polar(1.0, grid.theta());
    let n = grid.node_count();

    let mut kcl_vec = state.i.clone();
    let mut kvl_max: f64 = 0.0;
    for (k, e) in grid.edges().iter().enumerate() {
        kcl_vec[e.source] -= state.xi[k];
        kcl_vec[e.target] += state.xi[k];
        let drop = state.u[e.target] - state.u[e.source] + rot * e.magnitude() * state.xi[k];
        kvl_max = kvl_max.max(drop.norm());
    }
    let i_max = state.i.iter().fold(0.0_f64, |a, i| a.max(i.norm()));
    let kcl_max = kcl_vec.iter().fold(0.0_f64, |a, r| a.max(r.norm()));

    let power = (1..n)
        .map(|v| (state.u[v] * state.i[v].conj() - s[v]).norm() / (s[v].norm() + S_FLOOR))
        .fold(0.0_f64, f64::max);

    Residuals {
        kcl: kcl_max / (i_max + S_FLOOR / u_n),
        kvl: kvl_max / u_n,
        pcc: (state.u[0] - grid.pcc_voltage()).norm() / u_n,
        power,
    }
}

/// Fixed-point power flow solver with the Green matrix cached.
#[derive(Clone, Debug)]
pub struct PowerFlow<'g> {
    grid: &'g GridModel,
    x: DMatrix<f64>,
    laplacian: DMatrix<f64>,
    options: SolverOptions,
}

impl<'g> PowerFlow<'g> {
    pub fn new(grid: &'g GridModel, options: SolverOptions) -> Result<Self, PowerFlowError> {
        Ok(PowerFlow {
            grid,
            x: green_matrix(grid)?,
            laplacian: grid.laplacian(),
            options,
        })
    }

    pub fn grid(&self) -> &'g GridModel {
        self.grid
    }

    pub fn options(&self) -> SolverOptions {
        self.options
    }

    pub fn solve(
        &self,
        s: &[Complex64],
        warm_start: Option<&[Complex64]>,
    ) -> Result<SteadyState, PowerFlowError> {
        let grid = self.grid;
        let n = grid.node_count();
        if s.len() != n {
            return Err(PowerFlowError::DimensionMismatch {
                expected: n,
                got: s.len(),
            });
        }
        let u0 = grid.pcc_voltage();
        let u_n = grid.u_nominal();
        let rot = Complex64::from_polar(1.0, grid.theta());

        let mut u = match warm_start {
            Some(w) if w.len() != n => {
                return Err(PowerFlowError::DimensionMismatch {
                    expected: n,
                    got: w.len(),
                })
            }
            Some(w) => {
                let mut u = w.to_vec();
                u[0] = u0;
                u
            }
            None => vec![u0; n],
        };

        let (lo, hi) = self.options.collapse_band;
        let mut trace = Vec::new();
        let mut current = vec![Complex64::new(0.0, 0.0); n];
        let mut next = vec![u0; n];
        for iteration in 1..=self.options.max_iterations {
            for v in 1..n {
                current[v] = (s[v] / u[v]).conj();
            }
            let mut step: f64 = 0.0;
            for v in 1..n {
                let mut acc = Complex64::new(0.0, 0.0);
                for w in 1..n {
                    acc += current[w] * self.x[(v, w)];
                }
                next[v] = u0 + rot * acc;
                step = step.max((next[v] - u[v]).norm());
            }
            std::mem::swap(&mut u, &mut next);
            let step_pu = step / u_n;
            trace.push(step_pu);

            if let Some((v, mag)) = (1..n)
                .map(|v| (v, u[v].norm() / u_n))
                .find(|&(_, mag)| !(lo..=hi).contains(&mag))
            {
                return Err(PowerFlowError::VoltageCollapse {
                    iteration,
                    node: grid.id_of(v),
                    magnitude_pu: mag,
                    trace,
                });
            }
            if step_pu <= self.options.tolerance {
                return Ok(SteadyState::from_voltages(
                    grid,
                    &self.laplacian,
                    s,
                    u,
                    iteration,
                ));
            }
        }
        Err(PowerFlowError::NonConvergence {
            iterations: self.options.max_iterations,
            last_step: trace.last().copied().unwrap_or(f64::NAN),
            trace,
        })
    }
}

/// Solve the power flow with default options.
pub fn solve_powerflow(
    grid: &GridModel,
    s: &[Complex64],
    warm_start: Option<&[Complex64]>,
) -> Result<SteadyState, PowerFlowError> {
    PowerFlow::new(grid, SolverOptions::default())?.solve(s, warm_start)
}

/// ξ = −e^{−jθ} Z⁻¹ A u.
pub fn branch_currents(grid: &GridModel, u: &[Complex64]) -> Vec<Complex64> {
    let rot = Complex64::from_polar(1.0, -grid.theta());
    grid.edges()
        .iter()
        .map(|e| -rot * (u[e.target] - u[e.source]) / e.magnitude())
        .collect()
}

/// i = e^{−jθ} L u.
pub fn injected_currents(grid: &GridModel, u: &[Complex64]) -> Vec<Complex64> {
    injected_currents_with(grid, &grid.laplacian(), u)
}

fn injected_currents_with(grid: &GridModel, l: &DMatrix<f64>, u: &[Complex64]) -> Vec<Complex64> {
    let rot = Complex64::from_polar(1.0, -grid.theta());
    let n = grid.node_count();
    (0..n)
        .map(|v| {
            let mut acc = Complex64::new(0.0, 0.0);
            for w in 0..n {
                acc += u[w] * l[(v, w)];
            }
            rot * acc
        })
        .collect()
}

/// Line losses Σ_e |ξ_e|² Re(z_e), watts.
pub fn losses(grid: &GridModel, state: &SteadyState) -> f64 {
    let cos = grid.theta().cos();
    grid.edges()
        .iter()
        .zip(&state.xi)
        .map(|(e, xi)| xi.norm_sqr() * e.magnitude() * cos)
        .sum()
}

/// ūᵀ L u. Physical losses equal cos θ times its real part.
pub fn loss_quadratic_form(grid: &GridModel, u: &[Complex64]) -> Complex64 {
    grid.edges()
        .iter()
        .map(|e| {
            let d = u[e.target] - u[e.source];
            Complex64::new(d.norm_sqr() / e.magnitude(), 0.0)
        })
        .sum()
}

/// Debug dump: `node,u_abs,u_angle,p,q` per node.
pub fn write_state_csv<W: Write>(
    grid: &GridModel,
    state: &SteadyState,
    out: W,
) -> Result<(), csv::Error> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(["node", "u_abs", "u_angle", "p", "q"])?;
    for (v, s) in state.node_powers().iter().enumerate() {
        writer.write_record([
            grid.id_of(v).to_string(),
            state.u[v].norm().to_string(),
            state.u[v].arg().to_string(),
            s.re.to_string(),
            s.im.to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}
