use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::ProblemSpec;
use crate::error::EvalError;

/// Half-width of the box `[-R, R]^n` from which probe states are drawn.
pub const PROBE_RADIUS: f64 = 10.0;

/// Tolerance for the `G_y` versus central-difference comparison.
pub const GRADIENT_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    Unevaluable,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionCheck {
    pub name: String,
    pub status: CheckStatus,
    /// Worst statistic observed over the probes.
    pub worst: Option<f64>,
    pub threshold: Option<f64>,
    pub detail: String,
}

impl AssumptionCheck {
    pub fn failed(name: &str, detail: impl Into<String>) -> Self {
        AssumptionCheck {
            name: name.to_owned(),
            status: CheckStatus::Fail,
            worst: None,
            threshold: None,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub probes: usize,
    pub seed: u64,
    pub checks: Vec<AssumptionCheck>,
    pub all_pass: bool,
}

impl ValidationReport {
    pub fn from_checks(probes: usize, seed: u64, checks: Vec<AssumptionCheck>) -> Self {
        let all_pass = checks
            .iter()
            .all(|c| matches!(c.status, CheckStatus::Pass | CheckStatus::Skipped));
        ValidationReport {
            probes,
            seed,
            checks,
            all_pass,
        }
    }

    pub fn check(&self, name: &str) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Running maximum of a statistic that may become unevaluable.
struct Tracker {
    worst: f64,
    error: Option<String>,
}

impl Tracker {
    fn new(init: f64) -> Self {
        Tracker {
            worst: init,
            error: None,
        }
    }

    fn observe(&mut self, v: Result<f64, EvalError>, better_is_low: bool) {
        if self.error.is_some() {
            return;
        }
        match v {
            Ok(v) if v.is_finite() => {
                if (better_is_low && v > self.worst) || (!better_is_low && v < self.worst) {
                    self.worst = v;
                }
            }
            Ok(v) => self.error = Some(format!("non-finite value {v}")),
            Err(e) => self.error = Some(e.0),
        }
    }

    fn finish(self, name: &str, threshold: f64, pass: bool, what: &str) -> AssumptionCheck {
        match self.error {
            Some(e) => AssumptionCheck {
                name: name.to_owned(),
                status: CheckStatus::Unevaluable,
                worst: None,
                threshold: Some(threshold),
                detail: e,
            },
            None => AssumptionCheck {
                name: name.to_owned(),
                status: if pass {
                    CheckStatus::Pass
                } else {
                    CheckStatus::Fail
                },
                worst: Some(self.worst),
                threshold: Some(threshold),
                detail: format!("{what} = {:e} (threshold {:e})", self.worst, threshold),
            },
        }
    }
}

fn frobenius(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn bound_ok(worst: f64, bound: f64) -> bool {
    worst <= bound * (1.0 + 1e-12) + 1e-15
}

/// Spot-checks the standing assumptions at `probes` pseudorandom points:
/// bounded drift and diffusion, the ellipticity floor, `G_y` against central
/// differences of `G`, and any declared growth bounds on `F`.
///
/// Evaluation failures mark the affected check as unevaluable; nothing
/// escapes as an error. The result is a deterministic function of
/// `(spec, probes, seed)`.
pub fn validate_problem(spec: &ProblemSpec, probes: usize, seed: u64) -> ValidationReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.dim_state();
    let d = spec.dynamics.dim_noise();
    let model = &spec.dynamics.model;
    let payoffs = &spec.payoffs;

    let mut drift = Tracker::new(0.0);
    let mut diffusion = Tracker::new(0.0);
    let mut elliptic = Tracker::new(f64::INFINITY);
    let mut gradient = Tracker::new(0.0);
    let mut growth = Tracker::new(0.0);

    let mut mu = vec![0.0; n];
    let mut sigma = vec![0.0; n * d];
    let mut grad = vec![0.0; n];
    let mut yp = vec![0.0; n];

    for _ in 0..probes {
        let t = rng.random_range(0.0..=spec.horizon);
        let x: Vec<f64> = (0..n)
            .map(|_| rng.random_range(-PROBE_RADIUS..=PROBE_RADIUS))
            .collect();
        let y: Vec<f64> = (0..n)
            .map(|_| rng.random_range(-PROBE_RADIUS..=PROBE_RADIUS))
            .collect();
        let u = spec.controls.sample_uniform(&mut rng);

        drift.observe(
            model.drift(t, &x, &u, &mut mu).map(|_| frobenius(&mu)),
            true,
        );

        let sig = model.diffusion(t, &x, &u, &mut sigma);
        diffusion.observe(sig.clone().map(|_| frobenius(&sigma)), true);
        elliptic.observe(
            sig.map(|_| {
                let s = DMatrix::from_row_slice(n, d, &sigma);
                let cov = &s * s.transpose();
                cov.symmetric_eigenvalues().min()
            }),
            false,
        );

        if payoffs.aggregator.has_gradient() {
            let agg = &payoffs.aggregator;
            let stat = agg.grad_y(t, &x, &y, &mut grad).and_then(|_| {
                let mut worst: f64 = 0.0;
                for i in 0..n {
                    let h = 1e-4 * (1.0 + y[i].abs());
                    yp.copy_from_slice(&y);
                    yp[i] = y[i] + h;
                    let up = agg.eval(t, &x, &yp)?;
                    yp[i] = y[i] - h;
                    let dn = agg.eval(t, &x, &yp)?;
                    let fd = (up - dn) / (2.0 * h);
                    worst = worst.max((grad[i] - fd).abs() / (1.0 + fd.abs()));
                }
                Ok(worst)
            });
            gradient.observe(stat, true);
        }

        for g in &payoffs.growth {
            let x2: f64 = x.iter().map(|v| v * v).sum();
            let stat = payoffs
                .terminal
                .eval(t, &x, &g.y)
                .map(|f| f.abs() / (g.c0 * (1.0 + x2)));
            growth.observe(stat, true);
        }
    }

    let mut checks = Vec::new();
    let w = drift.worst;
    checks.push(drift.finish(
        "drift_bounded",
        spec.dynamics.drift_bound,
        bound_ok(w, spec.dynamics.drift_bound),
        "max |mu|",
    ));
    let w = diffusion.worst;
    checks.push(diffusion.finish(
        "diffusion_bounded",
        spec.dynamics.diffusion_bound,
        bound_ok(w, spec.dynamics.diffusion_bound),
        "max |sigma|",
    ));
    let w = elliptic.worst;
    let floor = spec.dynamics.ellipticity_floor;
    checks.push(elliptic.finish(
        "ellipticity",
        floor,
        w >= floor * (1.0 - 1e-12),
        "min eigenvalue of sigma sigma^T",
    ));
    if payoffs.aggregator.has_gradient() {
        let w = gradient.worst;
        checks.push(gradient.finish(
            "gradient_consistency",
            GRADIENT_TOL,
            w <= GRADIENT_TOL,
            "max |G_y - fd| / (1 + |fd|)",
        ));
    } else {
        checks.push(AssumptionCheck {
            name: "gradient_consistency".into(),
            status: CheckStatus::Skipped,
            worst: None,
            threshold: Some(GRADIENT_TOL),
            detail: "aggregator declares no gradient".into(),
        });
    }
    if payoffs.growth.is_empty() {
        checks.push(AssumptionCheck {
            name: "terminal_growth".into(),
            status: CheckStatus::Skipped,
            worst: None,
            threshold: Some(1.0),
            detail: "no growth constants declared".into(),
        });
    } else {
        let w = growth.worst;
        checks.push(growth.finish(
            "terminal_growth",
            1.0,
            w <= 1.0,
            "max |F| / (C0 (1 + |x|^2))",
        ));
    }
    ValidationReport::from_checks(probes, seed, checks)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::model::builtins::{
        ControlSquaredDrift, FnAggregator, FnDynamics, QuadraticForm, Zero,
    };
    use crate::model::{ControlSet, DynamicsSpec, GrowthBound, PayoffSpec};

    fn regulator_like(aggregator: Arc<dyn crate::model::Aggregator>) -> ProblemSpec {
        let dynamics = DynamicsSpec::new(
            "regulator",
            Arc::new(ControlSquaredDrift { sigma: 0.5 }),
            1.0,
            0.5,
            0.25,
        )
        .unwrap();
        let payoffs = PayoffSpec::new(
            "test",
            Arc::new(QuadraticForm::squared_distance(1, 1.0)),
            aggregator,
            None,
        );
        ProblemSpec::new(
            dynamics,
            ControlSet::interval(&[(-1.0, 1.0)], 41).unwrap(),
            payoffs,
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn regulator_passes_all_checks() {
        let report = validate_problem(&regulator_like(Arc::new(Zero)), 500, 7);
        assert!(report.all_pass, "{report:?}");
    }

    #[test]
    fn zero_diffusion_fails_ellipticity() {
        let dynamics = DynamicsSpec::new(
            "flat",
            Arc::new(FnDynamics::new(
                1,
                1,
                1,
                |_, _, _, o| {
                    o[0] = 0.0;
                    Ok(())
                },
                |_, _, _, o| {
                    o[0] = 0.0;
                    Ok(())
                },
            )),
            1.0,
            1.0,
            0.1,
        )
        .unwrap();
        let mut spec = regulator_like(Arc::new(Zero));
        spec.dynamics = dynamics;
        let report = validate_problem(&spec, 50, 1);
        assert_eq!(
            report.check("ellipticity").unwrap().status,
            CheckStatus::Fail
        );
        assert!(!report.all_pass);
    }

    #[test]
    fn gradient_check_detects_wrong_derivative() {
        let good = FnAggregator::new(|_, _, y| Ok(y[0] * y[0])).with_gradient(|_, _, y, o| {
            o[0] = 2.0 * y[0];
            Ok(())
        });
        let report = validate_problem(&regulator_like(Arc::new(good)), 300, 3);
        assert_eq!(
            report.check("gradient_consistency").unwrap().status,
            CheckStatus::Pass
        );

        let bad = FnAggregator::new(|_, _, y| Ok(y[0] * y[0])).with_gradient(|_, _, y, o| {
            o[0] = 3.0 * y[0];
            Ok(())
        });
        let report = validate_problem(&regulator_like(Arc::new(bad)), 300, 3);
        let c = report.check("gradient_consistency").unwrap();
        assert_eq!(c.status, CheckStatus::Fail);
        let worst = c.worst.unwrap();
        assert!(worst > 0.4 && worst <= 0.5, "worst = {worst}");
    }

    #[test]
    fn failing_evaluator_is_unevaluable() {
        let broken = FnAggregator::new(|_, _, _| Err(EvalError::new("boom")))
            .with_gradient(|_, _, _, _| Err(EvalError::new("boom")));
        let report = validate_problem(&regulator_like(Arc::new(broken)), 10, 3);
        assert_eq!(
            report.check("gradient_consistency").unwrap().status,
            CheckStatus::Unevaluable
        );
        assert!(!report.all_pass);
    }

    #[test]
    fn growth_bound_is_checked() {
        let mut spec = regulator_like(Arc::new(Zero));
        spec.payoffs = spec.payoffs.clone().with_growth(vec![GrowthBound {
            y: vec![0.0],
            c0: 1.0,
        }]);
        assert!(validate_problem(&spec, 200, 5).all_pass);
        spec.payoffs = spec.payoffs.clone().with_growth(vec![GrowthBound {
            y: vec![5.0],
            c0: 0.1,
        }]);
        let r = validate_problem(&spec, 200, 5);
        assert_eq!(
            r.check("terminal_growth").unwrap().status,
            CheckStatus::Fail
        );
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let spec = regulator_like(Arc::new(Zero));
        assert_eq!(
            validate_problem(&spec, 64, 11),
            validate_problem(&spec, 64, 11)
        );
    }
}
