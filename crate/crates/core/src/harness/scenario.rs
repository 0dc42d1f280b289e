//! Scenario files and the closed-loop runner.
//!
//! ```toml
//! grid = "ieee37_like.toml"     # relative to this file
//! loads = "peak_loads.toml"     # optional, applied on top of the grid file
//! mode = "sync"                 # or "async"
//! steps = 300
//! seed = 7
//! u_min_pu = 0.96               # or u_min = <volts>
//! gamma = { fraction_of_bound = 0.5 }   # or { absolute = 1e-4 }
//!
//! [[profile]]                   # zero-order hold from `step` on
//! step = 100
//! node = 712
//! p = -120000.0
//! q = -60000.0
//! ```

use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::trace::{SimTrace, TraceRow};
use super::HarnessError;
use crate::agents::{ControlLoop, ControlParams, MeasurementNoise};
use crate::approx::{ApproxModel, GammaBound};
use crate::grid::{load_grid_file, parse_load_file, GridModel, GridOptions, PowerInjection};
use crate::powerflow::{losses, SolverOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Sync,
    Async,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sync" => Ok(Mode::Sync),
            "async" => Ok(Mode::Async),
            other => Err(format!("unknown mode {other:?} (expected sync or async)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaSpec {
    Absolute(f64),
    FractionOfBound(f64),
}

impl GammaSpec {
    pub fn resolve(self, bound: GammaBound) -> Result<f64, HarnessError> {
        let gamma = match (self, bound) {
            (GammaSpec::Absolute(g), _) => g,
            (GammaSpec::FractionOfBound(f), GammaBound::Bounded(b)) => f * b,
            (GammaSpec::FractionOfBound(_), GammaBound::Unbounded) => {
                return Err(HarnessError::Scenario(
                    "step-size bound is unbounded on this grid; give an absolute gamma".into(),
                ))
            }
        };
        if gamma.is_finite() && gamma > 0.0 {
            Ok(gamma)
        } else {
            Err(HarnessError::Scenario(format!("gamma resolves to {gamma}")))
        }
    }
}

/// A profile point as written in the scenario file (node by file id).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileEntry {
    pub step: usize,
    pub node: u32,
    pub p: f64,
    pub q: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseEntry {
    pub magnitude_std: f64,
    pub angle_std: f64,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default)]
    pub grid: Option<PathBuf>,
    #[serde(default)]
    pub loads: Option<PathBuf>,
    pub mode: Mode,
    pub gamma: GammaSpec,
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub u_min_pu: Option<f64>,
    /// Volts; takes precedence over `u_min_pu`.
    #[serde(default)]
    pub u_min: Option<f64>,
    #[serde(default)]
    pub profile: Vec<ProfileEntry>,
    #[serde(default)]
    pub noise: Option<NoiseEntry>,
    #[serde(default)]
    pub q_limits: Option<(f64, f64)>,
}

impl ScenarioFile {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Scenario(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serialises")
    }
}

/// A resolved override: from `step` on, node `node` (model index) injects `s`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoadOverride {
    pub step: usize,
    pub node: usize,
    pub s: Complex64,
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub grid: GridModel,
    pub base: PowerInjection,
    /// Sorted by step.
    pub profile: Vec<LoadOverride>,
    pub mode: Mode,
    pub gamma: GammaSpec,
    pub steps: usize,
    /// Volts.
    pub u_min: f64,
    pub seed: u64,
    pub noise: Option<MeasurementNoise>,
    pub q_limits: Option<(f64, f64)>,
    pub solver: SolverOptions,
}

impl Scenario {
    /// Constant-load scenario with γ at half the bound and U_min at 96 %.
    pub fn new(grid: GridModel, base: PowerInjection, mode: Mode, steps: usize) -> Self {
        let u_min = 0.96 * grid.u_nominal();
        Scenario {
            grid,
            base,
            profile: Vec::new(),
            mode,
            gamma: GammaSpec::FractionOfBound(0.5),
            steps,
            u_min,
            seed: 0,
            noise: None,
            q_limits: None,
            solver: SolverOptions::default(),
        }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        Self::from_file_with_grid(path, None)
    }

    /// Like [`Scenario::from_file`], with `grid` replacing the file's own
    /// grid reference.
    pub fn from_file_with_grid(
        path: impl AsRef<Path>,
        grid: Option<&Path>,
    ) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Scenario(format!("{}: {e}", path.display())))?;
        let file = ScenarioFile::from_toml(&text)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        Self::resolve(file, dir, grid)
    }

    /// Resolve `file`, reading relative paths against `dir`.
    pub fn resolve(
        file: ScenarioFile,
        dir: &Path,
        grid_override: Option<&Path>,
    ) -> Result<Self, HarnessError> {
        let grid_path = match (grid_override, &file.grid) {
            (Some(p), _) => p.to_path_buf(),
            (None, Some(p)) => dir.join(p),
            (None, None) => {
                return Err(HarnessError::Scenario("no grid file given".into()));
            }
        };
        let (grid, mut base) = load_grid_file(&grid_path, GridOptions::default())?;
        if let Some(loads) = &file.loads {
            let loads = dir.join(loads);
            let text = std::fs::read_to_string(&loads)
                .map_err(|e| HarnessError::Scenario(format!("{}: {e}", loads.display())))?;
            base = parse_load_file(&grid, &base, &text)?;
        }
        let mut profile = file
            .profile
            .iter()
            .map(|e| {
                let node = grid.index_of(e.node).ok_or_else(|| {
                    HarnessError::Scenario(format!("profile names unknown node {}", e.node))
                })?;
                if node == 0 {
                    return Err(HarnessError::Scenario(format!(
                        "profile sets an injection at the PCC node {}",
                        e.node
                    )));
                }
                Ok(LoadOverride {
                    step: e.step,
                    node,
                    s: Complex64::new(e.p, e.q),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        profile.sort_by_key(|o| o.step);
        let u_min = match (file.u_min, file.u_min_pu) {
            (Some(v), _) => v,
            (None, Some(pu)) => pu * grid.u_nominal(),
            (None, None) => 0.96 * grid.u_nominal(),
        };
        let noise = file.noise.map(|n| MeasurementNoise {
            magnitude_std: n.magnitude_std,
            angle_std: n.angle_std,
            seed: n.seed.unwrap_or(file.seed ^ 0x9e37_79b9_7f4a_7c15),
        });
        let scenario = Scenario {
            grid,
            base,
            profile,
            mode: file.mode,
            gamma: file.gamma,
            steps: file.steps,
            u_min,
            seed: file.seed,
            noise,
            q_limits: file.q_limits,
            solver: SolverOptions::default(),
        };
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.steps == 0 {
            return Err(HarnessError::Scenario("step count must be at least 1".into()));
        }
        if !(self.u_min > 0.0 && self.u_min < self.grid.u_nominal()) {
            return Err(HarnessError::Scenario(format!(
                "u_min = {} V must lie in (0, {})",
                self.u_min,
                self.grid.u_nominal()
            )));
        }
        if self.base.len() != self.grid.node_count() {
            return Err(HarnessError::Scenario("base injections do not match the grid".into()));
        }
        Ok(())
    }
}

/// Run the closed loop on the nonlinear plant. Profile overrides scheduled
/// for step `t` are applied, and the plant re-solved, before step `t`
/// executes. Each row is recorded after its step.
pub fn run_scenario(scenario: &Scenario) -> Result<SimTrace, HarnessError> {
    scenario.validate()?;
    let grid = &scenario.grid;
    let model = ApproxModel::build(grid)?;
    let gamma = scenario.gamma.resolve(model.gamma_max)?;
    let mut params = ControlParams::new(gamma, scenario.u_min);
    params.noise = scenario.noise;
    params.q_limits = scenario.q_limits;
    let mut plant = ControlLoop::new(grid, &model, scenario.base.clone(), params, scenario.solver)?;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);

    let mut trace = SimTrace {
        agent_ids: grid.generators().map(|h| grid.id_of(h)).collect(),
        rows: Vec::with_capacity(scenario.steps),
    };
    let u_n = grid.u_nominal();
    let mut pending = scenario.profile.iter().peekable();
    for step in 0..scenario.steps {
        let mut changed = false;
        while let Some(o) = pending.next_if(|o| o.step <= step) {
            plant.set_injection(o.node, o.s);
            changed = true;
        }
        let outcome = (|| {
            if changed {
                plant.refresh()?;
            }
            match scenario.mode {
                Mode::Sync => plant.sync_step().map(|_| ()),
                Mode::Async => plant.async_step(&mut rng).map(|_| ()),
            }
        })();
        if let Err(source) = outcome {
            log::warn!("run stopped at step {step}: {source}");
            return Err(HarnessError::Diverged {
                step,
                trace: Box::new(trace),
                source,
            });
        }
        let state = plant.state();
        let violation = grid
            .generators()
            .map(|h| (scenario.u_min - state.u[h].norm()).max(0.0) / u_n)
            .fold(0.0, f64::max);
        trace.rows.push(TraceRow {
            step,
            losses_w: losses(grid, state),
            min_v_pu: plant.min_generator_voltage_pu(),
            violation_pu: violation,
            q: plant.q(),
            lambda: plant.lambda(),
            pf_iterations: state.iterations,
        });
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::parse_grid;

    const FEEDER: &str = r#"
[meta]
u_nominal = 1000.0
pcc_phase = 0.0

[[nodes]]
id = 0
kind = "pcc"

[[nodes]]
id = 1
kind = "generator"

[[nodes]]
id = 2
kind = "generator"

[[nodes]]
id = 3
kind = "load"
p = -20000.0
q = -10000.0

[[edges]]
from = 0
to = 1
resistance = 0.3
reactance = 0.15

[[edges]]
from = 1
to = 2
resistance = 0.3
reactance = 0.15

[[edges]]
from = 1
to = 3
resistance = 0.2
reactance = 0.1
"#;

    fn scenario(mode: Mode) -> Scenario {
        let (grid, base) = parse_grid(FEEDER, GridOptions::default()).unwrap();
        Scenario::new(grid, base, mode, 40)
    }

    #[test]
    fn zero_load_is_flat() {
        let mut sc = scenario(Mode::Sync);
        sc.base = PowerInjection::zeros(sc.grid.node_count());
        let trace = run_scenario(&sc).unwrap();
        assert_eq!(trace.len(), 40);
        for row in &trace.rows {
            assert!(row.losses_w.abs() < 1e-9);
            assert!((row.min_v_pu - 1.0).abs() < 1e-12);
            assert!(row.q.iter().all(|q| q.abs() < 1e-6), "{:?}", row.q);
        }
    }

    #[test]
    fn runs_are_deterministic() {
        for mode in [Mode::Sync, Mode::Async] {
            let mut sc = scenario(mode);
            sc.seed = 11;
            assert_eq!(run_scenario(&sc).unwrap(), run_scenario(&sc).unwrap());
        }
    }

    #[test]
    fn overrides_apply_before_their_step() {
        let mut sc = scenario(Mode::Sync);
        sc.steps = 6;
        sc.profile.push(LoadOverride {
            step: 3,
            node: 3,
            s: Complex64::new(-60000.0, -30000.0),
        });
        let trace = run_scenario(&sc).unwrap();
        assert!(trace.rows[3].losses_w > 2.0 * trace.rows[2].losses_w);
    }

    #[test]
    fn invalid_scenarios_are_rejected() {
        let mut sc = scenario(Mode::Sync);
        sc.steps = 0;
        assert!(run_scenario(&sc).is_err());
        let mut sc = scenario(Mode::Sync);
        sc.u_min = 1000.0;
        assert!(run_scenario(&sc).is_err());
        let mut sc = scenario(Mode::Sync);
        sc.gamma = GammaSpec::Absolute(-1.0);
        assert!(run_scenario(&sc).is_err());
    }

    #[test]
    fn divergence_keeps_partial_trace() {
        let mut sc = scenario(Mode::Sync);
        sc.steps = 10;
        sc.profile.push(LoadOverride {
            step: 4,
            node: 3,
            s: Complex64::new(-5.0e6, -2.0e6),
        });
        match run_scenario(&sc) {
            Err(HarnessError::Diverged { step, trace, .. }) => {
                assert_eq!(step, 4);
                assert_eq!(trace.len(), 4);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn file_form_parses() {
        let text = r#"
mode = "async"
steps = 5
seed = 3
u_min_pu = 0.95
gamma = { fraction_of_bound = 0.25 }

[[profile]]
step = 2
node = 3
p = -1.0
q = 0.0
"#;
        let file = ScenarioFile::from_toml(text).unwrap();
        assert_eq!(file.mode, Mode::Async);
        assert_eq!(file.gamma, GammaSpec::FractionOfBound(0.25));
        assert_eq!(file.profile.len(), 1);
        let back = ScenarioFile::from_toml(&file.to_toml()).unwrap();
        assert_eq!(back, file);
    }
}
