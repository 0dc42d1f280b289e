//! Centralised reference solver for the linearised optimal reactive power flow problem.
//!
//! With w = q_G + M⁻¹N q_L the linearised problem reads
//!
//! ```text
//! minimise   wᵀ M w / U_N²
//! subject to b − v̂_G(w) ≤ 0,   v̂_G = 1 + 2/U_N² (cosθ (M p_G + N p_L) + sinθ M w)
//! ```
//!
//! Stationarity forces w = sinθ λ, so w vanishes off the active set and the
//! active part solves sinθ M_SS w_S = c_S in closed form. Every active set is
//! tried; the feasible one with nonnegative multipliers is the optimum.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::Serialize;
use thiserror::Error;

use crate::approx::ApproxModel;
use crate::grid::{GridModel, PowerInjection};
use crate::powerflow::{losses, PowerFlow, PowerFlowError, SolverOptions};

/// Largest generator count handled by exhaustive enumeration.
pub const ENUMERATION_LIMIT: usize = 20;

const ITERATIVE_MAX_ITERATIONS: usize = 1_000_000;
const ITERATIVE_GAMMA_FRACTION: f64 = 0.1;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("voltage bound is unreachable for the given loads")]
    Infeasible,
    #[error("input length mismatch: {0}")]
    Dimension(String),
    #[error("iterative oracle needs a finite step-size bound")]
    NoStepBound,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleMethod {
    ActiveSetEnumeration,
    /// Projected dual ascent, used beyond [`ENUMERATION_LIMIT`] generators.
    IterativeOracle,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleSolution {
    /// Optimal generator reactive injections, var.
    pub q: Vec<f64>,
    /// Multipliers of b − v̂_G ≤ 0.
    pub lambda: Vec<f64>,
    pub active: Vec<bool>,
    pub method: OracleMethod,
}

/// Injections split into the generator and load blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct InjectionSplit {
    pub p_g: Vec<f64>,
    pub q_g: Vec<f64>,
    pub p_l: Vec<f64>,
    pub q_l: Vec<f64>,
}

impl InjectionSplit {
    pub fn new(grid: &GridModel, s: &PowerInjection) -> Self {
        InjectionSplit {
            p_g: s.active(grid.generators()),
            q_g: s.reactive(grid.generators()),
            p_l: s.active(grid.loads()),
            q_l: s.reactive(grid.loads()),
        }
    }
}

struct Problem {
    m: DMatrix<f64>,
    sin: f64,
    /// Right-hand side c of sinθ M w ≥ c.
    c: DVector<f64>,
    /// M⁻¹N q_L.
    offset: DVector<f64>,
    u2: f64,
}

impl Problem {
    fn new(
        model: &ApproxModel,
        q_l: &[f64],
        p_g: &[f64],
        p_l: &[f64],
        u_min: f64,
    ) -> Result<Self, OracleError> {
        let g = model.generator_count();
        let loads = model.blocks.n.ncols();
        if p_g.len() != g || p_l.len() != loads || q_l.len() != loads {
            return Err(OracleError::Dimension(format!(
                "expected {g} generators and {loads} loads"
            )));
        }
        let u2 = model.u_nominal * model.u_nominal;
        let b = u_min * u_min / u2;
        let m = model.blocks.m.clone();
        let n = &model.blocks.n;
        let p = &m * DVector::from_column_slice(p_g) + n * DVector::from_column_slice(p_l);
        let c = p.map(|x| (b - 1.0) * u2 / 2.0 - model.theta.cos() * x);
        // M⁻¹N q_L computed by solving with M, independently of the cached model product.
        let nq = n * DVector::from_column_slice(q_l);
        let offset = if g == 0 {
            DVector::zeros(0)
        } else {
            m.clone().lu().solve(&nq).expect("M is positive definite")
        };
        Ok(Problem {
            m,
            sin: model.theta.sin(),
            c,
            offset,
            u2,
        })
    }

    fn slack(&self, w: &DVector<f64>) -> DVector<f64> {
        (&self.m * w) * self.sin - &self.c
    }

    fn tolerance(&self) -> f64 {
        1e-12 * self.u2
    }
}

/// Solve the linearised optimal reactive power flow problem for the given disturbances.
pub fn centralized_oracle(
    model: &ApproxModel,
    q_l: &[f64],
    p_g: &[f64],
    p_l: &[f64],
    u_min: f64,
) -> Result<OracleSolution, OracleError> {
    let problem = Problem::new(model, q_l, p_g, p_l, u_min)?;
    let g = model.generator_count();
    let (w, lambda, method) = if g <= ENUMERATION_LIMIT {
        let (w, lambda) = enumerate_active_sets(&problem)?;
        (w, lambda, OracleMethod::ActiveSetEnumeration)
    } else {
        let (w, lambda) = iterative(model, &problem)?;
        (w, lambda, OracleMethod::IterativeOracle)
    };
    let q = &w - &problem.offset;
    let active = lambda.iter().map(|&l| l > 0.0).collect();
    Ok(OracleSolution {
        q: q.iter().copied().collect(),
        lambda: lambda.iter().copied().collect(),
        active,
        method,
    })
}

fn enumerate_active_sets(p: &Problem) -> Result<(DVector<f64>, DVector<f64>), OracleError> {
    let g = p.m.nrows();
    let tol = p.tolerance();
    let mut best: Option<(f64, DVector<f64>, DVector<f64>)> = None;
    for mask in 0u32..(1u32 << g) {
        let set: Vec<usize> = (0..g).filter(|&i| mask & (1 << i) != 0).collect();
        if !set.is_empty() && p.sin == 0.0 {
            continue;
        }
        let mut w = DVector::zeros(g);
        if !set.is_empty() {
            let m_ss = DMatrix::from_fn(set.len(), set.len(), |i, j| p.m[(set[i], set[j])]);
            let c_s = DVector::from_fn(set.len(), |i, _| p.c[set[i]] / p.sin);
            let Some(chol) = m_ss.cholesky() else { continue };
            let w_s = chol.solve(&c_s);
            for (i, &h) in set.iter().enumerate() {
                w[h] = w_s[i];
            }
        }
        let lambda = if p.sin == 0.0 { DVector::zeros(g) } else { &w / p.sin };
        let lambda_scale = lambda.amax().max(1.0);
        if set.iter().any(|&h| lambda[h] < -1e-12 * lambda_scale) {
            continue;
        }
        let slack = p.slack(&w);
        if (0..g).any(|h| mask & (1 << h) == 0 && slack[h] < -tol) {
            continue;
        }
        let objective = w.dot(&(&p.m * &w));
        if best.as_ref().is_none_or(|(f, _, _)| objective < *f) {
            best = Some((objective, w, lambda.map(|l| l.max(0.0))));
        }
    }
    best.map(|(_, w, l)| (w, l)).ok_or(OracleError::Infeasible)
}

fn iterative(model: &ApproxModel, p: &Problem) -> Result<(DVector<f64>, DVector<f64>), OracleError> {
    let bound = model.gamma_max.value().ok_or(OracleError::NoStepBound)?;
    let gamma = ITERATIVE_GAMMA_FRACTION * bound;
    let g = p.m.nrows();
    let mut lambda = DVector::<f64>::zeros(g);
    for _ in 0..ITERATIVE_MAX_ITERATIONS {
        let w = &lambda * p.sin;
        // b − v̂ = −(2/U²)·slack
        let violation = p.slack(&w) * (-2.0 / p.u2);
        let next = (&lambda + violation * gamma).map(|l| l.max(0.0));
        let change = (&next - &lambda).amax();
        lambda = next;
        if change <= 1e-15 * lambda.amax().max(1.0) {
            break;
        }
    }
    let w = &lambda * p.sin;
    if p.slack(&w).min() < -1e3 * p.tolerance() {
        return Err(OracleError::Infeasible);
    }
    Ok((w, lambda))
}

/// Residuals of the equilibrium conditions on the linearised model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct KktResiduals {
    /// ‖sinθ λ − (q + M⁻¹N q_L)‖∞ / max(1 var, ‖q‖∞, ‖M⁻¹N q_L‖∞)
    pub stationarity: f64,
    /// max_h (b − v̂_h)_+
    pub primal: f64,
    /// max_h (−λ_h)_+ / max(1, ‖λ‖∞)
    pub dual: f64,
    /// max_h |λ_h (b − v̂_h)| / max(1, ‖λ‖∞)
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn worst(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.dual)
            .max(self.complementarity)
    }
}

pub fn kkt_residuals(
    model: &ApproxModel,
    split: &InjectionSplit,
    q: &[f64],
    lambda: &[f64],
    u_min: f64,
) -> KktResiduals {
    let u2 = model.u_nominal * model.u_nominal;
    let b = u_min * u_min / u2;
    let v = model.v_hat(&split.p_g, q, &split.p_l, &split.q_l);
    let offset = &model.m_inv_n * DVector::from_column_slice(&split.q_l);
    let q = DVector::from_column_slice(q);
    let lambda = DVector::from_column_slice(lambda);
    let sin = model.theta.sin();
    let q_scale = q.amax().max(offset.amax()).max(1.0);
    let l_scale = lambda.amax().max(1.0);
    let stationarity = (&lambda * sin - (&q + &offset)).amax() / q_scale;
    let gap = v.map(|v| b - v);
    KktResiduals {
        stationarity,
        primal: gap.iter().fold(0.0_f64, |a, &g| a.max(g)),
        dual: lambda.iter().fold(0.0_f64, |a, &l| a.max(-l)) / l_scale,
        complementarity: lambda
            .iter()
            .zip(gap.iter())
            .fold(0.0_f64, |a, (l, g)| a.max((l * g).abs()))
            / l_scale,
    }
}

/// Line losses of the nonlinear plant when the generators inject `q`.
pub fn nonlinear_losses(
    grid: &GridModel,
    injections: &PowerInjection,
    q: &[f64],
) -> Result<f64, PowerFlowError> {
    let mut s = injections.clone();
    for (h, &qh) in grid.generators().zip(q) {
        let p = s.get(h).re;
        s.set(h, Complex64::new(p, qh));
    }
    let state = PowerFlow::new(grid, SolverOptions::default())?.solve(s.as_slice(), None)?;
    Ok(losses(grid, &state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{GridOptions, GridSpec, Node, NodeKind};
    use approx::assert_relative_eq;

    fn gen_load_chain() -> GridModel {
        let theta: f64 = 0.5;
        GridModel::new(
            GridSpec {
                nodes: vec![
                    Node { id: 0, kind: NodeKind::Pcc },
                    Node { id: 1, kind: NodeKind::Generator },
                    Node { id: 2, kind: NodeKind::Load },
                ],
                edges: vec![
                    (0, 1, 2.0 * theta.cos(), 2.0 * theta.sin()),
                    (1, 2, 3.0 * theta.cos(), 3.0 * theta.sin()),
                ],
                u_nominal: 1000.0,
                pcc_phase: 0.0,
            },
            GridOptions::default(),
        )
        .unwrap()
    }

    #[test]
    fn interior_solution_cancels_load_reactive_power() {
        let grid = gen_load_chain();
        let model = ApproxModel::build(&grid).unwrap();
        let sol = centralized_oracle(&model, &[-2000.0], &[0.0], &[-5000.0], 900.0).unwrap();
        // −M⁻¹N q_L with M = N = 2.
        assert_relative_eq!(sol.q[0], 2000.0, epsilon = 1e-9);
        assert_eq!(sol.lambda, vec![0.0]);
        assert_eq!(sol.method, OracleMethod::ActiveSetEnumeration);
    }

    #[test]
    fn binding_bound_is_met_with_equality() {
        let grid = gen_load_chain();
        let model = ApproxModel::build(&grid).unwrap();
        let (q_l, p_g, p_l) = ([-2000.0], [0.0], [-20000.0]);
        let u_min = 990.0;
        let sol = centralized_oracle(&model, &q_l, &p_g, &p_l, u_min).unwrap();
        assert!(sol.lambda[0] > 0.0);
        let v = model.v_hat(&p_g, &sol.q, &p_l, &q_l);
        assert_relative_eq!(v[0], 0.99 * 0.99, epsilon = 1e-12);
        let split = InjectionSplit {
            p_g: p_g.to_vec(),
            q_g: vec![0.0],
            p_l: p_l.to_vec(),
            q_l: q_l.to_vec(),
        };
        let kkt = kkt_residuals(&model, &split, &sol.q, &sol.lambda, u_min);
        assert!(kkt.worst() < 1e-10, "{kkt:?}");
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let model = ApproxModel::build(&gen_load_chain()).unwrap();
        assert!(matches!(
            centralized_oracle(&model, &[], &[0.0], &[0.0], 900.0),
            Err(OracleError::Dimension(_))
        ));
    }

    #[test]
    fn iterative_oracle_agrees_with_enumeration() {
        let grid = gen_load_chain();
        let model = ApproxModel::build(&grid).unwrap();
        let problem = Problem::new(&model, &[-2000.0], &[0.0], &[-20000.0], 990.0).unwrap();
        let (w_e, l_e) = enumerate_active_sets(&problem).unwrap();
        let (w_i, l_i) = iterative(&model, &problem).unwrap();
        assert_relative_eq!(w_e[0], w_i[0], max_relative = 1e-9);
        assert_relative_eq!(l_e[0], l_i[0], max_relative = 1e-9);
    }
}
