//! The time-inconsistent quadratic regulator
//!
//! `dX = −u² dt + σ dW`, `U = [−a, a]`, `F(x, y) = (x − y)²`, `G = H = 0`,
//!
//! as a closed-form oracle. The equilibrium is `û ≡ 0` with
//! `V = σ²(T − t)`, `f = (x − y)² + σ²(T − t)` and `g = x`. Every control
//! attains the extended-HJB supremum on the diagonal; `û = 0` is the
//! minimal-norm member of that tie.
//!
//! The candidate `K(t, x) = (x − x₀)² + σ²(T − t)` obtained by freezing the
//! reference point at `x₀` does not solve the classical HJB equation, which
//! is what makes the problem time-inconsistent.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grids::{FeedbackControl, GridFunction, GridSpec};
use crate::hjbx::{
    residual_report, standard_hjb_residual, ClosedFormQuadruple, ResidualReport,
    ResidualThresholds, StandardHjbReport, BOUNDARY_BAND, TIE_TOLERANCE,
};
use crate::model::builtins::{ControlSquaredDrift, QuadraticForm, Zero};
use crate::model::{ControlSet, DynamicsSpec, PayoffSpec, ProblemSpec};

/// Control samples per problem unless configured otherwise.
pub const DEFAULT_CONTROL_SAMPLES: usize = 41;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegulatorParams {
    /// Control bound, `U = [−a, a]`. Zero gives the singleton `{0}`.
    pub a: f64,
    pub sigma: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    /// Anchor of the time-consistent comparison value.
    pub x0: f64,
}

impl Default for RegulatorParams {
    fn default() -> Self {
        RegulatorParams {
            a: 1.0,
            sigma: 0.5,
            horizon: 1.0,
            x0: 0.0,
        }
    }
}

impl RegulatorParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.a.is_finite() && self.a >= 0.0) {
            return Err(Error::domain(format!(
                "control bound a must be finite and non-negative, got {}",
                self.a
            )));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::domain(format!(
                "sigma must be positive for ellipticity, got {}",
                self.sigma
            )));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::domain(format!(
                "horizon T must be positive, got {}",
                self.horizon
            )));
        }
        if !self.x0.is_finite() {
            return Err(Error::domain("anchor x0 must be finite"));
        }
        Ok(())
    }

    fn check_control(&self, u: f64) -> Result<()> {
        if u.is_nan() || u.abs() > self.a {
            return Err(Error::domain(format!(
                "control {u} lies outside [-{a}, {a}]",
                a = self.a
            )));
        }
        Ok(())
    }
}

/// Regulator problem with [`DEFAULT_CONTROL_SAMPLES`] control samples.
pub fn regulator_problem(p: &RegulatorParams) -> Result<ProblemSpec> {
    regulator_problem_sampled(p, DEFAULT_CONTROL_SAMPLES)
}

/// Regulator problem with declared bounds `|μ| ≤ a²`, `|σ| ≤ σ` and
/// ellipticity floor `σ²`.
pub fn regulator_problem_sampled(p: &RegulatorParams, samples: usize) -> Result<ProblemSpec> {
    p.validate()?;
    let dynamics = DynamicsSpec::new(
        "regulator",
        Arc::new(ControlSquaredDrift { sigma: p.sigma }),
        p.a * p.a,
        p.sigma,
        p.sigma * p.sigma,
    )?;
    let controls = ControlSet::interval(&[(-p.a, p.a)], samples)?;
    let payoffs = PayoffSpec::new(
        "squared distance",
        Arc::new(QuadraticForm::squared_distance(1, 1.0)),
        Arc::new(Zero),
        None,
    );
    ProblemSpec::new(dynamics, controls, payoffs, p.horizon)
}

/// `(û ≡ 0, σ²(T − t), (x − y)² + σ²(T − t), x)`.
pub fn regulator_closed_form(p: &RegulatorParams) -> Result<ClosedFormQuadruple> {
    p.validate()?;
    let controls = ControlSet::interval(&[(-p.a, p.a)], 2)?;
    let control = FeedbackControl::constant(&[0.0], &controls)?;
    let (sigma2, horizon) = (p.sigma * p.sigma, p.horizon);
    Ok(ClosedFormQuadruple::new(
        control,
        move |t, _x| sigma2 * (horizon - t),
        move |t, x, _s, y| (x[0] - y[0]).powi(2) + sigma2 * (horizon - t),
        |_t, x, out| out[0] = x[0],
    ))
}

/// Exact values under the constant control `u`, from Gaussian moments of
/// `X_T = x − u²(T − t) + σ(W_T − W_t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConstantControlValues {
    /// `f_u(t, x, y) = (x − u²(T − t) − y)² + σ²(T − t)`.
    pub f: f64,
    /// `g_u(t, x) = x − u²(T − t)`.
    pub g: f64,
    /// `J_u(t, x) = f_u(t, x, x) = (u²(T − t))² + σ²(T − t)`.
    pub j: f64,
}

pub fn constant_control_values(
    p: &RegulatorParams,
    u: f64,
    t: f64,
    x: f64,
    y: f64,
) -> Result<ConstantControlValues> {
    p.validate()?;
    p.check_control(u)?;
    if !(0.0..=p.horizon).contains(&t) {
        return Err(Error::domain(format!(
            "t = {t} lies outside [0, {}]",
            p.horizon
        )));
    }
    let tau = p.horizon - t;
    let shift = u * u * tau;
    let var = p.sigma * p.sigma * tau;
    Ok(ConstantControlValues {
        f: (x - shift - y).powi(2) + var,
        g: x - shift,
        j: shift * shift + var,
    })
}

/// `K(t, x) = (x − x₀)² + σ²(T − t)`.
pub fn time_consistent_value(p: &RegulatorParams, t: f64, x: f64) -> f64 {
    (x - p.x0).powi(2) + p.sigma * p.sigma * (p.horizon - t)
}

/// `K` tabulated on the `(t, x)` part of `grid`.
pub fn time_consistent_table(p: &RegulatorParams, grid: &GridSpec) -> Result<GridFunction> {
    if grid.dim() != 1 {
        return Err(Error::domain("the regulator is one-dimensional"));
    }
    GridFunction::from_fn(grid.space_time(), 1, |t, x, _, o| {
        o[0] = time_consistent_value(p, t, x[0]);
        Ok(())
    })
}

/// The classical HJB residual of `K` next to the extended-HJB report of the
/// closed-form equilibrium on the same grid.
#[derive(Debug, Clone, Serialize)]
pub struct CounterexampleReport {
    pub standard: StandardHjbReport,
    pub extended: ResidualReport,
    /// `K` fails the classical equation while the equilibrium passes the
    /// extended system.
    pub time_inconsistent: bool,
}

pub fn counterexample_check(
    p: &RegulatorParams,
    grid: &GridSpec,
    thresholds: &ResidualThresholds,
) -> Result<CounterexampleReport> {
    let spec = regulator_problem(p)?;
    grid.check_horizon(spec.horizon)?;
    if grid.dim() != 1 {
        return Err(Error::domain("the regulator is one-dimensional"));
    }
    let k = time_consistent_table(p, grid)?;
    let standard = standard_hjb_residual(&k, &spec, &[p.x0], thresholds.hjb)?;
    let cand = regulator_closed_form(p)?.tabulate(&spec, grid)?;
    let extended = residual_report(&cand, &spec, &cand.grid().clone(), thresholds)?;
    let time_inconsistent = !standard.solves && extended.pass;
    Ok(CounterexampleReport {
        standard,
        extended,
        time_inconsistent,
    })
}

/// `max |V − σ²(T − t)|` over the nodes of `v` outside the boundary band.
pub fn value_gap(p: &RegulatorParams, v: &GridFunction) -> f64 {
    let grid = v.grid();
    let mut gap: f64 = 0.0;
    for k in 0..grid.t.len() {
        let t = grid.t.node(k);
        for i in 0..grid.x.size() {
            if !grid.x.near_boundary(i, BOUNDARY_BAND) {
                gap = gap.max((v.at(k, 0, i, 0) - p.sigma * p.sigma * (p.horizon - t)).abs());
            }
        }
    }
    gap
}

/// Lower bound `2a²(x₀ − x_min)(1 − tie tolerance)` on the classical
/// residual over a grid starting at `x_min < x₀`.
pub fn counterexample_bound(p: &RegulatorParams, x_min: f64) -> f64 {
    2.0 * p.a * p.a * (p.x0 - x_min).max(0.0) * (1.0 - TIE_TOLERANCE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::validate_problem;

    fn default_grid(nx: usize, nt: usize) -> GridSpec {
        GridSpec::uniform(1.0, nt, &[(-2.0, 2.0, nx)]).unwrap()
    }

    #[test]
    fn default_problem_is_admissible() {
        let spec = regulator_problem(&RegulatorParams::default()).unwrap();
        let report = validate_problem(&spec, 64, 7);
        assert!(report.all_pass, "{report:?}");
    }

    #[test]
    fn problem_ingredients() {
        let spec = regulator_problem(&RegulatorParams::default()).unwrap();
        assert_eq!(spec.payoffs.terminal(1.0, &[0.3], &[0.3]).unwrap(), 0.0);
        assert_eq!(spec.payoffs.terminal(1.0, &[2.0], &[1.0]).unwrap(), 1.0);
        assert_eq!(spec.payoffs.aggregate(1.0, &[2.0], &[1.0]).unwrap(), 0.0);
        let mut mu = [0.0];
        spec.dynamics.drift(0.0, &[0.0], &[0.5], &mut mu).unwrap();
        assert_eq!(mu[0], -0.25);
        assert_eq!(spec.dynamics.drift_bound, 1.0);
        assert_eq!(spec.dynamics.ellipticity_floor, 0.25);
        assert_eq!(spec.controls.samples().len(), DEFAULT_CONTROL_SAMPLES);
        assert_eq!(spec.controls.minimal_norm(), &[0.0]);
    }

    #[test]
    fn zero_bound_is_a_singleton() {
        let p = RegulatorParams {
            a: 0.0,
            ..Default::default()
        };
        let spec = regulator_problem(&p).unwrap();
        assert_eq!(spec.controls.samples(), &[vec![0.0]]);
    }

    #[test]
    fn invalid_parameters() {
        let bad = [
            RegulatorParams {
                sigma: 0.0,
                ..Default::default()
            },
            RegulatorParams {
                a: -1.0,
                ..Default::default()
            },
            RegulatorParams {
                horizon: 0.0,
                ..Default::default()
            },
            RegulatorParams {
                x0: f64::NAN,
                ..Default::default()
            },
        ];
        for p in bad {
            assert!(regulator_problem(&p).is_err(), "{p:?}");
        }
    }

    #[test]
    fn closed_form_values() {
        let c = regulator_closed_form(&RegulatorParams::default()).unwrap();
        assert_eq!(c.value(1.0, &[17.0]), 0.0);
        assert_eq!(c.aux(0.0, &[2.0], 0.0, &[1.0]), 1.25);
        assert_eq!(c.mean(0.3, &[-4.0]), vec![-4.0]);
        assert_eq!(c.control.as_constant(), Some(&[0.0][..]));
    }

    #[test]
    fn constant_control_examples() {
        let p = RegulatorParams::default();
        let v = constant_control_values(&p, 1.0, 0.0, 0.0, 0.0).unwrap();
        assert_eq!((v.f, v.g, v.j), (1.25, -1.0, 1.25));
        let v = constant_control_values(&p, 0.5, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(v.f, 0.3125);
        assert!(constant_control_values(&p, 1.5, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn zero_control_reproduces_the_closed_form() {
        let p = RegulatorParams::default();
        let c = regulator_closed_form(&p).unwrap();
        for &(t, x, y) in &[(0.0, 0.0, 0.0), (0.4, 1.5, -0.5), (1.0, 2.0, 1.0)] {
            let v = constant_control_values(&p, 0.0, t, x, y).unwrap();
            assert_eq!(v.f, c.aux(t, &[x], t, &[y]));
            assert_eq!(v.g, c.mean(t, &[x])[0]);
            assert_eq!(v.j, c.value(t, &[x]));
        }
    }

    #[test]
    fn time_consistent_examples() {
        let p = RegulatorParams::default();
        assert_eq!(time_consistent_value(&p, 1.0, 3.0), 9.0);
        assert_eq!(time_consistent_value(&p, 0.0, p.x0), 0.25);
        assert_eq!(time_consistent_value(&p, 0.0, -1.0), 1.25);
    }

    #[test]
    fn closed_form_passes_the_residual_report() {
        let p = RegulatorParams::default();
        let spec = regulator_problem(&p).unwrap();
        let grid = default_grid(41, 11);
        let cand = regulator_closed_form(&p)
            .unwrap()
            .tabulate(&spec, &grid)
            .unwrap();
        let report =
            residual_report(&cand, &spec, cand.grid(), &ResidualThresholds::default()).unwrap();
        assert!(report.pass, "{:?}", report.checks);
    }

    #[test]
    fn counterexample_examples() {
        let p = RegulatorParams::default();
        let grid = default_grid(41, 11);
        let r = counterexample_check(&p, &grid, &ResidualThresholds::default()).unwrap();
        assert!(r.time_inconsistent);
        assert!((r.standard.residual_at(0.0, &[-1.0]).unwrap() - 2.0).abs() < 1e-10);
        assert!(r.standard.residual_at(0.0, &[0.0]).unwrap().abs() < 1e-10);
        assert!(r.standard.residual_at(0.0, &[1.0]).unwrap().abs() < 1e-10);
        assert!(r.standard.max_residual >= counterexample_bound(&p, -2.0));
    }
}
