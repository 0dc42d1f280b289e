use serde::Serialize;

use super::HarnessError;
use crate::approx::{approximate_voltages, green_matrix};
use crate::grid::{GridModel, PowerInjection};
use crate::powerflow::{PowerFlow, SolverOptions};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ApproxErrorRow {
    pub scale: f64,
    pub u_nominal: f64,
    /// max_v |u_exact − u_approx|, volts.
    pub max_error: f64,
}

/// Compare the nonlinear solution with the linearised voltages while the
/// nominal voltage is scaled by each factor in `scales` (loads unchanged).
pub fn approximation_check(
    grid: &GridModel,
    s: &PowerInjection,
    scales: &[f64],
) -> Result<Vec<ApproxErrorRow>, HarnessError> {
    if scales.is_empty() {
        return Err(HarnessError::Scenario("no scale factors given".into()));
    }
    if scales.iter().any(|&c| !(c.is_finite() && c > 0.0))
        || scales.windows(2).any(|w| w[1] <= w[0])
    {
        return Err(HarnessError::Scenario(
            "scale factors must be positive and strictly increasing".into(),
        ));
    }
    let x = green_matrix(grid)?;
    scales
        .iter()
        .map(|&scale| {
            let scaled = grid.with_nominal_voltage(scale * grid.u_nominal())?;
            let exact = PowerFlow::new(&scaled, SolverOptions::default())?
                .solve(s.as_slice(), None)?;
            let approx = approximate_voltages(&scaled, &x, s.as_slice());
            let max_error = exact
                .u
                .iter()
                .zip(&approx)
                .map(|(a, b)| (a - b).norm())
                .fold(0.0_f64, f64::max);
            Ok(ApproxErrorRow {
                scale,
                u_nominal: scaled.u_nominal(),
                max_error,
            })
        })
        .collect()
}
