//! Distributed feedback controllers.
//!
//! Every generator agent h keeps a multiplier λ_h ≥ 0 and a reactive power
//! command q_h. One update reads voltage phasors at h and at its cyber-layer
//! neighbours, then
//!
//! ```text
//! λ_h ← [λ_h + γ (U_min²/U_N² − |u_h|²/U_N²)]_+
//! q_h ← q_h + sinθ λ_h + Σ_{k ∈ N(h) ∪ {h}} G_hk |u_h||u_k| sin(∠u_k − ∠u_h − θ)
//! ```
//!
//! The k = h term is the row-h diagonal of the gain matrix; together with
//! G·1 = 0 it makes the sum track −(q_G + M⁻¹N q_L).
//!
//! [`ControlLoop`] closes the loop through the nonlinear power flow.
//! [`LinearizedLoop`] runs the same updates against the linearised voltage
//! model, which is the system the step-size bound is proved for.

use std::collections::BTreeMap;

use nalgebra::DVector;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::approx::ApproxModel;
use crate::grid::{GridModel, PowerInjection};
use crate::powerflow::{PowerFlow, PowerFlowError, SolverOptions, SteadyState};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("agent {agent} is missing a measurement from node {node}")]
    MissingMeasurement { agent: usize, node: usize },
    #[error("power flow failed after applying q = {q:?}: {source}")]
    PlantDiverged {
        q: Vec<f64>,
        #[source]
        source: PowerFlowError,
    },
    #[error("initial power flow failed: {0}")]
    InitialState(#[source] PowerFlowError),
    #[error("invalid control parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Phasor {
    /// Volts RMS.
    pub magnitude: f64,
    /// Radians.
    pub angle: f64,
}

impl From<Complex64> for Phasor {
    fn from(u: Complex64) -> Self {
        Phasor {
            magnitude: u.norm(),
            angle: u.arg(),
        }
    }
}

/// Voltage phasors gathered by one agent: its own and its neighbours'.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Measurement {
    readings: BTreeMap<usize, Phasor>,
}

impl Measurement {
    pub fn new() -> Self {
        Measurement::default()
    }

    pub fn insert(&mut self, node: usize, phasor: Phasor) {
        self.readings.insert(node, phasor);
    }

    pub fn get(&self, node: usize) -> Option<Phasor> {
        self.readings.get(&node).copied()
    }

    /// Exact readings of `nodes` from a steady state.
    pub fn from_state(state: &SteadyState, nodes: impl IntoIterator<Item = usize>) -> Self {
        Measurement {
            readings: nodes
                .into_iter()
                .map(|v| (v, Phasor::from(state.u[v])))
                .collect(),
        }
    }
}

/// Controller state of one generator agent.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentState {
    /// Node index of the agent.
    pub id: usize,
    /// Multiplier of the voltage constraint, var.
    pub lambda: f64,
    /// Commanded reactive injection, var.
    pub q: f64,
    /// G_hh, siemens.
    pub self_gain: f64,
    /// (k, G_hk) for every k ∈ N(h).
    pub neighbor_gains: Vec<(usize, f64)>,
}

impl AgentState {
    pub fn new(id: usize, model: &ApproxModel, q: f64) -> Self {
        AgentState {
            id,
            lambda: 0.0,
            q,
            self_gain: model.g[(id, id)],
            neighbor_gains: model
                .communication_neighbors(id)
                .into_iter()
                .map(|k| (k, model.g[(id, k)]))
                .collect(),
        }
    }

    /// Nodes whose voltages this agent reads, itself first.
    pub fn measured_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        std::iter::once(self.id).chain(self.neighbor_gains.iter().map(|&(k, _)| k))
    }
}

/// Projected dual ascent step on λ_h.
pub fn dual_update(state: &AgentState, own_voltage: f64, gamma: f64, u_min: f64, u_nominal: f64) -> f64 {
    let u_n2 = u_nominal * u_nominal;
    let violation = (u_min * u_min - own_voltage * own_voltage) / u_n2;
    (state.lambda + gamma * violation).max(0.0)
}

/// Primal step on q_h. `state.lambda` must already hold the updated multiplier.
pub fn primal_update(state: &AgentState, meas: &Measurement, theta: f64) -> Result<f64, AgentError> {
    let missing = |node| AgentError::MissingMeasurement {
        agent: state.id,
        node,
    };
    let own = meas.get(state.id).ok_or_else(|| missing(state.id))?;
    let term = |gain: f64, other: Phasor| {
        gain * own.magnitude * other.magnitude * (other.angle - own.angle - theta).sin()
    };
    let mut q = state.q + theta.sin() * state.lambda + term(state.self_gain, own);
    for &(k, gain) in &state.neighbor_gains {
        q += term(gain, meas.get(k).ok_or_else(|| missing(k))?);
    }
    Ok(q)
}

/// Zero-mean Gaussian perturbation of measured phasors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeasurementNoise {
    /// Standard deviation of the magnitude error, volts.
    pub magnitude_std: f64,
    /// Standard deviation of the angle error, radians.
    pub angle_std: f64,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ControlParams {
    pub gamma: f64,
    /// Lower voltage bound, volts.
    pub u_min: f64,
    /// Off by default.
    pub noise: Option<MeasurementNoise>,
    /// Reactive capability clamp `(q_min, q_max)`, var. Off by default.
    pub q_limits: Option<(f64, f64)>,
}

impl ControlParams {
    pub fn new(gamma: f64, u_min: f64) -> Self {
        ControlParams {
            gamma,
            u_min,
            noise: None,
            q_limits: None,
        }
    }

    fn validate(&self) -> Result<(), AgentError> {
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(AgentError::InvalidParameter(format!("gamma = {}", self.gamma)));
        }
        if !(self.u_min.is_finite() && self.u_min > 0.0) {
            return Err(AgentError::InvalidParameter(format!("u_min = {}", self.u_min)));
        }
        if let Some((lo, hi)) = self.q_limits {
            if !(lo <= hi) {
                return Err(AgentError::InvalidParameter(format!("q limits ({lo}, {hi})")));
            }
        }
        Ok(())
    }
}

/// Uniform choice of the generator that fires next, as a position in
/// `0..generators`. This is the jump chain of i.i.d. exponential timers.
pub fn pick_agent<R: Rng + ?Sized>(rng: &mut R, generators: usize) -> usize {
    rng.random_range(0..generators)
}

/// Agents acting on the nonlinear plant.
#[derive(Clone, Debug)]
pub struct ControlLoop<'a> {
    grid: &'a GridModel,
    solver: PowerFlow<'a>,
    injections: PowerInjection,
    agents: Vec<AgentState>,
    params: ControlParams,
    state: SteadyState,
    noise: Option<(Normal<f64>, Normal<f64>, ChaCha8Rng)>,
}

impl<'a> ControlLoop<'a> {
    /// Agents start with λ = 0 and q taken from the generator entries of
    /// `injections`.
    pub fn new(
        grid: &'a GridModel,
        model: &ApproxModel,
        injections: PowerInjection,
        params: ControlParams,
        solver_options: SolverOptions,
    ) -> Result<Self, AgentError> {
        params.validate()?;
        let solver = PowerFlow::new(grid, solver_options).map_err(AgentError::InitialState)?;
        let agents = grid
            .generators()
            .map(|h| AgentState::new(h, model, injections.get(h).im))
            .collect();
        let state = solver
            .solve(injections.as_slice(), None)
            .map_err(AgentError::InitialState)?;
        let noise = params
            .noise
            .map(|n| -> Result<_, AgentError> {
                let bad = |_| AgentError::InvalidParameter("noise standard deviation".into());
                Ok((
                    Normal::new(0.0, n.magnitude_std).map_err(bad)?,
                    Normal::new(0.0, n.angle_std).map_err(bad)?,
                    ChaCha8Rng::seed_from_u64(n.seed),
                ))
            })
            .transpose()?;
        Ok(ControlLoop {
            grid,
            solver,
            injections,
            agents,
            params,
            state,
            noise,
        })
    }

    pub fn grid(&self) -> &'a GridModel {
        self.grid
    }

    pub fn state(&self) -> &SteadyState {
        &self.state
    }

    pub fn agents(&self) -> &[AgentState] {
        &self.agents
    }

    pub fn injections(&self) -> &PowerInjection {
        &self.injections
    }

    pub fn params(&self) -> &ControlParams {
        &self.params
    }

    pub fn q(&self) -> Vec<f64> {
        self.agents.iter().map(|a| a.q).collect()
    }

    pub fn lambda(&self) -> Vec<f64> {
        self.agents.iter().map(|a| a.lambda).collect()
    }

    /// Change the injection at `node`. For generator nodes only the active
    /// part is taken; the reactive part stays under agent control. Call
    /// [`ControlLoop::refresh`] afterwards to let the plant settle.
    pub fn set_injection(&mut self, node: usize, s: Complex64) {
        if self.grid.generators().contains(&node) {
            let q = self.injections.get(node).im;
            self.injections.set(node, Complex64::new(s.re, q));
        } else {
            self.injections.set(node, s);
        }
    }

    /// Re-solve the plant with the current injections.
    pub fn refresh(&mut self) -> Result<&SteadyState, AgentError> {
        self.resolve()?;
        Ok(&self.state)
    }

    fn resolve(&mut self) -> Result<(), AgentError> {
        match self
            .solver
            .solve(self.injections.as_slice(), Some(&self.state.u))
        {
            Ok(state) => {
                self.state = state;
                Ok(())
            }
            Err(source) => Err(AgentError::PlantDiverged {
                q: self.q(),
                source,
            }),
        }
    }

    fn measure(&mut self, agent: usize) -> Measurement {
        let nodes: Vec<usize> = self.agents[agent].measured_nodes().collect();
        let mut meas = Measurement::from_state(&self.state, nodes.iter().copied());
        if let Some((mag, ang, rng)) = &mut self.noise {
            for &v in &nodes {
                let mut p = meas.get(v).expect("just measured");
                p.magnitude += mag.sample(rng);
                p.angle += ang.sample(rng);
                meas.insert(v, p);
            }
        }
        meas
    }

    fn update_agent(&mut self, agent: usize, meas: &Measurement) -> Result<(), AgentError> {
        let ControlParams {
            gamma,
            u_min,
            q_limits,
            ..
        } = self.params;
        let theta = self.grid.theta();
        let u_n = self.grid.u_nominal();
        let a = &mut self.agents[agent];
        let own = meas.get(a.id).ok_or(AgentError::MissingMeasurement {
            agent: a.id,
            node: a.id,
        })?;
        a.lambda = dual_update(a, own.magnitude, gamma, u_min, u_n);
        let mut q = primal_update(a, meas, theta)?;
        if let Some((lo, hi)) = q_limits {
            q = q.clamp(lo, hi);
        }
        a.q = q;
        Ok(())
    }

    fn apply_commands(&mut self) {
        for a in &self.agents {
            self.injections.set_reactive(a.id, a.q);
        }
    }

    /// All generators update from the same pre-step measurements, then the
    /// new commands are applied together.
    pub fn sync_step(&mut self) -> Result<&SteadyState, AgentError> {
        let readings: Vec<Measurement> = (0..self.agents.len()).map(|a| self.measure(a)).collect();
        for (a, meas) in readings.iter().enumerate() {
            self.update_agent(a, meas)?;
        }
        self.apply_commands();
        self.resolve()?;
        Ok(&self.state)
    }

    /// One uniformly chosen generator updates with fresh measurements.
    /// Returns the node index of the agent that fired.
    pub fn async_step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<usize, AgentError> {
        let agent = pick_agent(rng, self.agents.len());
        let meas = self.measure(agent);
        self.update_agent(agent, &meas)?;
        self.apply_commands();
        self.resolve()?;
        Ok(self.agents[agent].id)
    }

    /// Lowest generator voltage magnitude, per unit.
    pub fn min_generator_voltage_pu(&self) -> f64 {
        let u_n = self.grid.u_nominal();
        self.grid
            .generators()
            .map(|h| self.state.u[h].norm() / u_n)
            .fold(f64::INFINITY, f64::min)
    }
}

/// The agent updates run against the linearised voltage model:
///
/// ```text
/// λ(t+1) = [λ(t) + γ (b·1 − v̂_G(q(t)))]_+
/// q(t+1) = sinθ λ(t+1) − M⁻¹N q_L
/// ```
///
/// In the asynchronous variant only the firing component changes.
#[derive(Clone, Debug)]
pub struct LinearizedLoop<'m> {
    model: &'m ApproxModel,
    p_g: Vec<f64>,
    p_l: Vec<f64>,
    q_l: Vec<f64>,
    b: f64,
    gamma: f64,
    q: DVector<f64>,
    lambda: DVector<f64>,
    compensation: DVector<f64>,
}

impl<'m> LinearizedLoop<'m> {
    pub fn new(
        grid: &GridModel,
        model: &'m ApproxModel,
        injections: &PowerInjection,
        gamma: f64,
        u_min: f64,
    ) -> Self {
        let q_l = injections.reactive(grid.loads());
        let compensation = &model.m_inv_n * DVector::from_column_slice(&q_l);
        let u_n = grid.u_nominal();
        LinearizedLoop {
            model,
            p_g: injections.active(grid.generators()),
            p_l: injections.active(grid.loads()),
            q_l,
            b: u_min * u_min / (u_n * u_n),
            gamma,
            q: DVector::from_vec(injections.reactive(grid.generators())),
            lambda: DVector::zeros(grid.generator_count()),
            compensation,
        }
    }

    pub fn q(&self) -> &DVector<f64> {
        &self.q
    }

    pub fn lambda(&self) -> &DVector<f64> {
        &self.lambda
    }

    pub fn v_hat(&self) -> DVector<f64> {
        self.model
            .v_hat(&self.p_g, self.q.as_slice(), &self.p_l, &self.q_l)
    }

    pub fn sync_step(&mut self) {
        let v = self.v_hat();
        let sin = self.model.theta.sin();
        for h in 0..self.q.len() {
            self.lambda[h] = (self.lambda[h] + self.gamma * (self.b - v[h])).max(0.0);
            self.q[h] = sin * self.lambda[h] - self.compensation[h];
        }
    }

    /// Returns the position (0-based among generators) that fired.
    pub fn async_step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> usize {
        let h = pick_agent(rng, self.q.len());
        let v = self.v_hat();
        self.lambda[h] = (self.lambda[h] + self.gamma * (self.b - v[h])).max(0.0);
        self.q[h] = self.model.theta.sin() * self.lambda[h] - self.compensation[h];
        h
    }
}
