//! Run configuration: a JSON document naming the problem, the lattice, the
//! solver and Monte Carlo settings, the equilibrium plan and the output
//! directory. Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::equilibrium::EquilibriumTestPlan;
use crate::error::{Error, Result};
use crate::grids::{FeedbackControl, GridSpec};
use crate::hjbx::{ResidualThresholds, SolverOptions};
use crate::model::registry::Params;
use crate::model::{ControlSet, DynamicsSpec, PayoffSpec, ProblemSpec, Registry};
use crate::regulator::{regulator_problem_sampled, RegulatorParams, DEFAULT_CONTROL_SAMPLES};
use crate::sde::SimConfig;

/// A registered evaluator and its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Component {
    pub name: String,
    #[serde(default)]
    pub params: Params,
}

impl Component {
    fn zero() -> Self {
        Component {
            name: "zero".into(),
            params: Params::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlsConfig {
    /// Box `∏ [lo_i, hi_i]` with `resolution` samples per dimension.
    Interval {
        bounds: Vec<[f64; 2]>,
        resolution: usize,
    },
    Finite {
        points: Vec<Vec<f64>>,
    },
}

impl ControlsConfig {
    pub fn build(&self) -> Result<ControlSet> {
        match self {
            ControlsConfig::Interval { bounds, resolution } => {
                let b: Vec<(f64, f64)> = bounds.iter().map(|&[lo, hi]| (lo, hi)).collect();
                ControlSet::interval(&b, *resolution)
            }
            ControlsConfig::Finite { points } => ControlSet::finite(points.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomProblem {
    pub horizon: f64,
    pub dynamics: Component,
    pub drift_bound: f64,
    pub diffusion_bound: f64,
    pub ellipticity_floor: f64,
    pub controls: ControlsConfig,
    pub terminal: Component,
    #[serde(default = "Component::zero")]
    pub aggregator: Component,
    #[serde(default)]
    pub running: Option<Component>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
#[allow(clippy::large_enum_variant)]
pub enum ProblemConfig {
    Regulator {
        #[serde(flatten)]
        params: RegulatorParams,
        #[serde(default = "default_samples")]
        control_samples: usize,
    },
    Custom(CustomProblem),
}

fn default_samples() -> usize {
    DEFAULT_CONTROL_SAMPLES
}

impl ProblemConfig {
    pub fn horizon(&self) -> f64 {
        match self {
            ProblemConfig::Regulator { params, .. } => params.horizon,
            ProblemConfig::Custom(c) => c.horizon,
        }
    }

    pub fn regulator(&self) -> Option<&RegulatorParams> {
        match self {
            ProblemConfig::Regulator { params, .. } => Some(params),
            ProblemConfig::Custom(_) => None,
        }
    }

    pub fn controls(&self) -> Result<ControlSet> {
        match self {
            ProblemConfig::Regulator {
                params,
                control_samples,
            } => ControlSet::interval(&[(-params.a, params.a)], *control_samples),
            ProblemConfig::Custom(c) => c.controls.build(),
        }
    }

    pub fn build(&self, registry: &Registry) -> Result<ProblemSpec> {
        match self {
            ProblemConfig::Regulator {
                params,
                control_samples,
            } => regulator_problem_sampled(params, *control_samples),
            ProblemConfig::Custom(c) => {
                let cfg = |what: &str, e: String| Error::Config(format!("{what}: {e}"));
                let model = registry
                    .dynamics(&c.dynamics.name, &c.dynamics.params)
                    .map_err(|e| cfg("dynamics", e))?;
                let n = model.dim_state();
                let dynamics = DynamicsSpec::new(
                    c.dynamics.name.clone(),
                    model,
                    c.drift_bound,
                    c.diffusion_bound,
                    c.ellipticity_floor,
                )?;
                let terminal = registry
                    .terminal(&c.terminal.name, &c.terminal.params, n)
                    .map_err(|e| cfg("terminal", e))?;
                let aggregator = registry
                    .aggregator(&c.aggregator.name, &c.aggregator.params, n)
                    .map_err(|e| cfg("aggregator", e))?;
                let running = match &c.running {
                    Some(r) => Some(
                        registry
                            .running(&r.name, &r.params, n)
                            .map_err(|e| cfg("running", e))?,
                    ),
                    None => None,
                };
                let label = format!("{} / {}", c.terminal.name, c.aggregator.name);
                let payoffs = PayoffSpec::new(label, terminal, aggregator, running);
                ProblemSpec::new(dynamics, c.controls.build()?, payoffs, c.horizon)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisConfig {
    pub lo: f64,
    pub hi: f64,
    pub nodes: usize,
}

/// Uniform lattice over `[0, T] × ∏ [lo_i, hi_i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub t_nodes: usize,
    pub x: Vec<AxisConfig>,
}

impl GridConfig {
    pub fn build(&self, horizon: f64) -> Result<GridSpec> {
        let axes: Vec<(f64, f64, usize)> = self.x.iter().map(|a| (a.lo, a.hi, a.nodes)).collect();
        GridSpec::uniform(horizon, self.t_nodes, &axes)
    }
}

/// Base control of an equilibrium test or simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum BaseControl {
    /// The closed-form equilibrium (regulator problems only).
    ClosedForm,
    /// The control table of an extended-HJB solve on the configured grid.
    Solve,
    Constant(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointConfig {
    pub t: f64,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquilibriumConfig {
    pub base: BaseControl,
    pub points: Vec<PointConfig>,
    /// Constant deviation controls.
    pub deviations: Vec<Vec<f64>>,
    pub h: Vec<f64>,
    pub radii: Vec<f64>,
    pub n_paths: usize,
    pub dt: f64,
    #[serde(default)]
    pub antithetic: bool,
}

impl EquilibriumConfig {
    pub fn plan(&self, controls: &ControlSet, seed: u64) -> Result<EquilibriumTestPlan> {
        let deviations = self
            .deviations
            .iter()
            .map(|u| FeedbackControl::constant(u, controls))
            .collect::<Result<_>>()?;
        Ok(EquilibriumTestPlan {
            test_points: self.points.iter().map(|p| (p.t, p.x.clone())).collect(),
            deviations,
            h_sequence: self.h.clone(),
            radii: self.radii.clone(),
            cfg: SimConfig::new(self.n_paths, self.dt, seed).antithetic(self.antithetic),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub control: BaseControl,
    pub start: PointConfig,
    pub n_paths: usize,
    pub dt: f64,
    #[serde(default)]
    pub antithetic: bool,
    /// Paths written to `paths.csv`; the estimates use all of them.
    #[serde(default = "default_written")]
    pub write_paths: usize,
}

fn default_written() -> usize {
    100
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationConfig {
    pub probes: usize,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        ValidationConfig { probes: 256 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemConfig,
    pub grid: GridConfig,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub thresholds: ResidualThresholds,
    #[serde(default)]
    pub validation: ValidationConfig,
    #[serde(default)]
    pub equilibrium: Option<EquilibriumConfig>,
    #[serde(default)]
    pub simulate: Option<SimulateConfig>,
    #[serde(default = "default_out")]
    pub output: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("line {}, column {}: {e}", e.line(), e.column())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Canonical JSON text of the config, hashed into every report. The
    /// output directory is left out so relocated runs hash alike.
    pub fn canonical_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output");
        }
        v.to_string()
    }

    /// The quadratic-regulator demonstration with the default parameters:
    /// `a = 1`, `σ = 0.5`, `T = 1`, `x₀ = 0` on `x ∈ [−2, 2]`.
    pub fn regulator_preset() -> Self {
        Self::regulator(RegulatorParams::default())
    }

    /// Regulator run on `x ∈ [−2, 2]` (81 nodes) with a stable time step.
    /// Test points, `h` values and step sizes scale with `T`; the
    /// deviations are `±a` and `±a/2`.
    pub fn regulator(params: RegulatorParams) -> Self {
        let dx: f64 = 4.0 / 80.0;
        let t_nodes = if params.sigma > 0.0 && params.horizon > 0.0 {
            let dt_max = dx * dx / (params.sigma * params.sigma);
            (params.horizon / dt_max).ceil() as usize + 1
        } else {
            3
        };
        let horizon = params.horizon;
        let mut deviations = vec![
            vec![params.a],
            vec![-params.a],
            vec![0.5 * params.a],
            vec![-0.5 * params.a],
        ];
        deviations.dedup();
        let h: Vec<f64> = [0.2, 0.1, 0.05, 0.025]
            .iter()
            .map(|f| f * horizon)
            .collect();
        let radius = (10.0 * params.sigma * h[0].sqrt()).max(5.0);
        let point = |t: f64, x: f64| PointConfig { t, x: vec![x] };
        RunConfig {
            problem: ProblemConfig::Regulator {
                params,
                control_samples: DEFAULT_CONTROL_SAMPLES,
            },
            grid: GridConfig {
                t_nodes: t_nodes.max(3),
                x: vec![AxisConfig {
                    lo: -2.0,
                    hi: 2.0,
                    nodes: 81,
                }],
            },
            solver: SolverOptions::default(),
            thresholds: ResidualThresholds::default(),
            validation: ValidationConfig::default(),
            equilibrium: Some(EquilibriumConfig {
                base: BaseControl::ClosedForm,
                points: vec![
                    point(0.0, 0.0),
                    point(0.5 * horizon, 1.0),
                    point(0.5 * horizon, -1.0),
                ],
                deviations,
                h,
                radii: vec![radius],
                n_paths: 20_000,
                dt: 0.0125 * horizon,
                antithetic: true,
            }),
            simulate: Some(SimulateConfig {
                control: BaseControl::ClosedForm,
                start: point(0.0, 0.0),
                n_paths: 100_000,
                dt: 1e-3 * horizon,
                antithetic: false,
                write_paths: 100,
            }),
            output: default_out(),
            seed: 20_240_601,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_round_trips() {
        let cfg = RunConfig::regulator_preset();
        let back = RunConfig::from_json(&cfg.canonical_json()).unwrap();
        assert_eq!(back, cfg);
        let mut moved = cfg.clone();
        moved.output = "elsewhere".into();
        assert_eq!(moved.canonical_json(), cfg.canonical_json());
    }

    #[test]
    fn preset_grid_is_stable() {
        let cfg = RunConfig::regulator_preset();
        let spec = cfg.problem.build(&Registry::with_builtins()).unwrap();
        let grid = cfg.grid.build(spec.horizon).unwrap();
        assert!(grid.t.step() <= crate::hjbx::stable_dt(&spec, &grid));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v: serde_json::Value =
            serde_json::from_str(&RunConfig::regulator_preset().canonical_json()).unwrap();
        v["grid"]["bogus"] = 1.into();
        assert!(RunConfig::from_json(&v.to_string()).is_err());
        let mut v: serde_json::Value =
            serde_json::from_str(&RunConfig::regulator_preset().canonical_json()).unwrap();
        v["problem"]["bogus"] = 1.into();
        assert!(RunConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn custom_problem_builds_from_the_registry() {
        let text = r#"{
            "problem": {
                "kind": "custom",
                "horizon": 1.0,
                "dynamics": {"name": "regulator", "params": {"sigma": 0.5}},
                "drift_bound": 1.0, "diffusion_bound": 0.5, "ellipticity_floor": 0.25,
                "controls": {"kind": "interval", "bounds": [[-1, 1]], "resolution": 5},
                "terminal": {"name": "squared_distance"}
            },
            "grid": {"t_nodes": 11, "x": [{"lo": -1, "hi": 1, "nodes": 11}]}
        }"#;
        let cfg = RunConfig::from_json(text).unwrap();
        let spec = cfg.problem.build(&Registry::with_builtins()).unwrap();
        assert_eq!(spec.controls.samples().len(), 5);
        assert!(!spec.is_general());
        assert_eq!(spec.payoffs.terminal(1.0, &[2.0], &[1.0]).unwrap(), 1.0);
    }

    #[test]
    fn syntax_errors_carry_a_location() {
        let err = RunConfig::from_json("{\n  \"grid\": ").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }
}
