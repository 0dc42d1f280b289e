//! Steady-state distribution feeder simulation and distributed reactive power
//! control.
//!
//! The crate is organised bottom-up:
//!
//! * [`grid`]: feeder graph, incidence/Laplacian operators, grid files.
//! * [`powerflow`]: nonlinear steady-state solver (the physical plant).
//! * [`approx`]: linearised model: Green matrix, gain matrix, neighbour
//!   sets, step-size bound.
//! * [`agents`]: per-generator feedback controllers, synchronous and
//!   asynchronous schedules.
//! * [`harness`]: scenarios, the centralised reference solver, traces and
//!   their CSV/SVG emission.
//! * [`synth`]: random radial feeders for property checks.

pub mod agents;
pub mod approx;
pub mod grid;
pub mod harness;
pub mod powerflow;
pub mod synth;

pub use num_complex::Complex64;

pub use agents::{AgentState, ControlLoop, ControlParams, Measurement, Phasor};
pub use approx::{ApproxModel, GammaBound};
pub use grid::{GridModel, GridOptions, NodeKind, PowerInjection};
pub use powerflow::{PowerFlow, SolverOptions, SteadyState};
