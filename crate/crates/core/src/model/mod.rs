//! Problem data: controlled dynamics, the control set `U`, the payoff maps
//! `F`, `G`, `H` and the horizon.

use std::cmp::Ordering;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, EvalError, Result};

pub mod builtins;
pub mod registry;
mod validate;

pub use registry::Registry;
pub use validate::{validate_problem, AssumptionCheck, CheckStatus, ValidationReport};

/// Drift and diffusion of a controlled Itô diffusion `dX = μ dt + σ dW`.
///
/// Implementations must be re-entrant: evaluations may happen concurrently
/// from several worker threads.
pub trait Dynamics: Send + Sync {
    fn dim_state(&self) -> usize;
    fn dim_noise(&self) -> usize;
    fn dim_control(&self) -> usize;

    /// Writes `μ(t, x, u)` (length `n`) into `out`.
    fn drift(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) -> Result<(), EvalError>;

    /// Writes `σ(t, x, u)` as a row-major `n × d` matrix into `out`.
    fn diffusion(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) -> Result<(), EvalError>;
}

/// Terminal payoff `F(s, x, y)`. Problems without explicit time dependence
/// ignore `s`.
pub trait TerminalPayoff: Send + Sync {
    fn eval(&self, s: f64, x: &[f64], y: &[f64]) -> Result<f64, EvalError>;

    fn depends_on_time(&self) -> bool {
        false
    }
}

/// The nonlinear term `G(s, x, y)` applied to `E[X_T]`, with its gradient in `y`.
pub trait Aggregator: Send + Sync {
    fn eval(&self, s: f64, x: &[f64], y: &[f64]) -> Result<f64, EvalError>;

    /// Writes `∇_y G(s, x, y)` into `out`.
    fn grad_y(&self, s: f64, x: &[f64], y: &[f64], out: &mut [f64]) -> Result<(), EvalError>;

    fn has_gradient(&self) -> bool {
        true
    }

    fn depends_on_time(&self) -> bool {
        false
    }
}

/// Running payoff `H(r, x, u, s, y)`.
pub trait RunningPayoff: Send + Sync {
    fn eval(&self, r: f64, x: &[f64], u: &[f64], s: f64, y: &[f64]) -> Result<f64, EvalError>;
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ControlKind {
    Interval {
        lo: Vec<f64>,
        hi: Vec<f64>,
        resolution: usize,
    },
    Finite {
        points: Vec<Vec<f64>>,
    },
}

/// Compact control set `U ⊂ R^k`, either a box or a finite list of points,
/// together with the discretisation used for argmax searches.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControlSet {
    #[serde(flatten)]
    kind: ControlKind,
    #[serde(skip)]
    samples: Vec<Vec<f64>>,
}

const MEMBERSHIP_TOL: f64 = 1e-12;

impl ControlSet {
    /// Box `∏ [lo_i, hi_i]` sampled with `resolution` points per dimension
    /// (always including both endpoints).
    pub fn interval(bounds: &[(f64, f64)], resolution: usize) -> Result<Self> {
        if bounds.is_empty() {
            return Err(Error::domain("control set needs at least one dimension"));
        }
        for (i, &(lo, hi)) in bounds.iter().enumerate() {
            if !lo.is_finite() || !hi.is_finite() {
                return Err(Error::domain(format!(
                    "control bound in dimension {i} is not finite"
                )));
            }
            if lo > hi {
                return Err(Error::domain(format!(
                    "control set is not compact: dimension {i} has lo = {lo} > hi = {hi}"
                )));
            }
        }
        if resolution < 2 {
            return Err(Error::domain("control resolution must be at least 2"));
        }
        let axes: Vec<Vec<f64>> = bounds
            .iter()
            .map(|&(lo, hi)| {
                if lo == hi {
                    vec![lo]
                } else {
                    // Endpoints are set exactly: `lo·m/m` can round away from `lo`.
                    let m = (resolution - 1) as f64;
                    (0..resolution)
                        .map(|i| match i {
                            0 => lo,
                            i if i + 1 == resolution => hi,
                            i => (lo * (m - i as f64) + hi * i as f64) / m,
                        })
                        .collect()
                }
            })
            .collect();
        let mut samples = vec![Vec::with_capacity(bounds.len())];
        for axis in &axes {
            samples = samples
                .into_iter()
                .flat_map(|prefix| {
                    axis.iter().map(move |&v| {
                        let mut p = prefix.clone();
                        p.push(v);
                        p
                    })
                })
                .collect();
        }
        sort_tie_break(&mut samples);
        Ok(ControlSet {
            kind: ControlKind::Interval {
                lo: bounds.iter().map(|b| b.0).collect(),
                hi: bounds.iter().map(|b| b.1).collect(),
                resolution,
            },
            samples,
        })
    }

    pub fn finite(points: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = points.first() else {
            return Err(Error::domain("finite control set is empty"));
        };
        let k = first.len();
        if k == 0 || points.iter().any(|p| p.len() != k) {
            return Err(Error::domain(
                "finite control points must share a positive dimension",
            ));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::domain("finite control points must be finite"));
        }
        let mut samples = points.clone();
        sort_tie_break(&mut samples);
        samples.dedup();
        Ok(ControlSet {
            kind: ControlKind::Finite { points },
            samples,
        })
    }

    pub fn dim(&self) -> usize {
        self.samples[0].len()
    }

    /// Discretisation of `U` in tie-break order: increasing Euclidean norm,
    /// then lexicographic.
    pub fn samples(&self) -> &[Vec<f64>] {
        &self.samples
    }

    /// The element selected when every sample ties.
    pub fn minimal_norm(&self) -> &[f64] {
        &self.samples[0]
    }

    pub fn is_finite_set(&self) -> bool {
        matches!(self.kind, ControlKind::Finite { .. })
    }

    /// Corners of the box (or the points of a finite set).
    pub fn vertices(&self) -> Vec<Vec<f64>> {
        match &self.kind {
            ControlKind::Interval { lo, hi, .. } => {
                let mut out = vec![Vec::new()];
                for (l, h) in lo.iter().zip(hi) {
                    out = out
                        .into_iter()
                        .flat_map(|p: Vec<f64>| {
                            let ends = if l == h { vec![*l] } else { vec![*l, *h] };
                            ends.into_iter().map(move |v| {
                                let mut q = p.clone();
                                q.push(v);
                                q
                            })
                        })
                        .collect();
                }
                out
            }
            ControlKind::Finite { points } => points.clone(),
        }
    }

    pub fn contains(&self, u: &[f64]) -> bool {
        if u.len() != self.dim() {
            return false;
        }
        match &self.kind {
            ControlKind::Interval { lo, hi, .. } => u
                .iter()
                .zip(lo.iter().zip(hi))
                .all(|(v, (l, h))| *v >= l - MEMBERSHIP_TOL && *v <= h + MEMBERSHIP_TOL),
            ControlKind::Finite { points } => points.iter().any(|p| {
                p.iter()
                    .zip(u)
                    .all(|(a, b)| (a - b).abs() <= MEMBERSHIP_TOL)
            }),
        }
    }

    /// Nearest element of `U` (clamping for boxes, nearest point for finite sets).
    pub fn project(&self, u: &[f64], out: &mut [f64]) {
        match &self.kind {
            ControlKind::Interval { lo, hi, .. } => {
                for i in 0..out.len() {
                    out[i] = u[i].clamp(lo[i], hi[i]);
                }
            }
            ControlKind::Finite { .. } => {
                let best = self
                    .samples
                    .iter()
                    .min_by(|a, b| {
                        sq_dist(a, u)
                            .partial_cmp(&sq_dist(b, u))
                            .unwrap_or(Ordering::Equal)
                    })
                    .expect("non-empty");
                out.copy_from_slice(best);
            }
        }
    }

    /// Uniform draw from `U` (uniform over points for a finite set).
    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match &self.kind {
            ControlKind::Interval { lo, hi, .. } => lo
                .iter()
                .zip(hi)
                .map(|(l, h)| {
                    if l == h {
                        *l
                    } else {
                        rng.random_range(*l..=*h)
                    }
                })
                .collect(),
            ControlKind::Finite { points } => points[rng.random_range(0..points.len())].clone(),
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn norm_sq(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum()
}

fn sort_tie_break(samples: &mut [Vec<f64>]) {
    samples.sort_by(|a, b| {
        norm_sq(a)
            .partial_cmp(&norm_sq(b))
            .unwrap_or(Ordering::Equal)
            .then_with(|| {
                a.iter()
                    .zip(b)
                    .map(|(x, y)| x.partial_cmp(y).unwrap_or(Ordering::Equal))
                    .find(|o| *o != Ordering::Equal)
                    .unwrap_or(Ordering::Equal)
            })
    });
}

/// Dynamics plus the user-asserted bounds `|μ| ≤ drift_bound`,
/// `|σ| ≤ diffusion_bound` (Frobenius) and the ellipticity floor `λ`.
#[derive(Clone)]
pub struct DynamicsSpec {
    pub label: String,
    pub model: Arc<dyn Dynamics>,
    pub drift_bound: f64,
    pub diffusion_bound: f64,
    pub ellipticity_floor: f64,
}

impl DynamicsSpec {
    pub fn new(
        label: impl Into<String>,
        model: Arc<dyn Dynamics>,
        drift_bound: f64,
        diffusion_bound: f64,
        ellipticity_floor: f64,
    ) -> Result<Self> {
        if model.dim_state() == 0 || model.dim_noise() == 0 || model.dim_control() == 0 {
            return Err(Error::domain(
                "state, noise and control dimensions must be positive",
            ));
        }
        if !(drift_bound.is_finite() && drift_bound >= 0.0) {
            return Err(Error::domain("drift bound must be finite and non-negative"));
        }
        if !(diffusion_bound.is_finite() && diffusion_bound >= 0.0) {
            return Err(Error::domain(
                "diffusion bound must be finite and non-negative",
            ));
        }
        if !(ellipticity_floor.is_finite() && ellipticity_floor > 0.0) {
            return Err(Error::domain("ellipticity floor must be positive"));
        }
        Ok(DynamicsSpec {
            label: label.into(),
            model,
            drift_bound,
            diffusion_bound,
            ellipticity_floor,
        })
    }

    pub fn dim_state(&self) -> usize {
        self.model.dim_state()
    }

    pub fn dim_noise(&self) -> usize {
        self.model.dim_noise()
    }

    pub fn drift(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) -> Result<()> {
        self.model.drift(t, x, u, out).map_err(Error::eval("drift"))
    }

    pub fn diffusion(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) -> Result<()> {
        self.model
            .diffusion(t, x, u, out)
            .map_err(Error::eval("diffusion"))
    }

    /// Writes `σσᵀ` (row-major `n × n`) into `cov`, using `sigma` as scratch
    /// space of length `n·d`.
    pub fn covariance(
        &self,
        t: f64,
        x: &[f64],
        u: &[f64],
        sigma: &mut [f64],
        cov: &mut [f64],
    ) -> Result<()> {
        let n = self.dim_state();
        let d = self.dim_noise();
        self.diffusion(t, x, u, sigma)?;
        for i in 0..n {
            for j in i..n {
                let c: f64 = (0..d).map(|l| sigma[i * d + l] * sigma[j * d + l]).sum();
                cov[i * n + j] = c;
                cov[j * n + i] = c;
            }
        }
        Ok(())
    }
}

impl fmt::Debug for DynamicsSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DynamicsSpec")
            .field("label", &self.label)
            .field("n", &self.model.dim_state())
            .field("d", &self.model.dim_noise())
            .field("drift_bound", &self.drift_bound)
            .field("diffusion_bound", &self.diffusion_bound)
            .field("ellipticity_floor", &self.ellipticity_floor)
            .finish()
    }
}

/// Growth constant `C₀` asserted for one reference `y`:
/// `|F(s, x, y)| ≤ C₀ (1 + |x|²)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GrowthBound {
    pub y: Vec<f64>,
    pub c0: f64,
}

#[derive(Clone)]
pub struct PayoffSpec {
    pub label: String,
    pub terminal: Arc<dyn TerminalPayoff>,
    pub aggregator: Arc<dyn Aggregator>,
    pub running: Option<Arc<dyn RunningPayoff>>,
    pub growth: Vec<GrowthBound>,
}

impl PayoffSpec {
    pub fn new(
        label: impl Into<String>,
        terminal: Arc<dyn TerminalPayoff>,
        aggregator: Arc<dyn Aggregator>,
        running: Option<Arc<dyn RunningPayoff>>,
    ) -> Self {
        PayoffSpec {
            label: label.into(),
            terminal,
            aggregator,
            running,
            growth: Vec::new(),
        }
    }

    pub fn with_growth(mut self, growth: Vec<GrowthBound>) -> Self {
        self.growth = growth;
        self
    }

    /// True for the general case: a running payoff is present or `F`/`G`
    /// depend on the reference time.
    pub fn is_general(&self) -> bool {
        self.running.is_some()
            || self.terminal.depends_on_time()
            || self.aggregator.depends_on_time()
    }

    pub fn terminal(&self, s: f64, x: &[f64], y: &[f64]) -> Result<f64> {
        self.terminal
            .eval(s, x, y)
            .map_err(Error::eval("terminal payoff F"))
    }

    pub fn aggregate(&self, s: f64, x: &[f64], y: &[f64]) -> Result<f64> {
        self.aggregator
            .eval(s, x, y)
            .map_err(Error::eval("aggregator G"))
    }

    pub fn aggregate_grad(&self, s: f64, x: &[f64], y: &[f64], out: &mut [f64]) -> Result<()> {
        if !self.aggregator.has_gradient() {
            return Err(Error::Unsupported(
                "aggregator G declares no gradient in y".into(),
            ));
        }
        self.aggregator
            .grad_y(s, x, y, out)
            .map_err(Error::eval("gradient G_y"))
    }

    /// `H(r, x, u, s, y)`, or zero when no running payoff is declared.
    pub fn running(&self, r: f64, x: &[f64], u: &[f64], s: f64, y: &[f64]) -> Result<f64> {
        match &self.running {
            Some(h) => h
                .eval(r, x, u, s, y)
                .map_err(Error::eval("running payoff H")),
            None => Ok(0.0),
        }
    }
}

impl fmt::Debug for PayoffSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PayoffSpec")
            .field("label", &self.label)
            .field("running", &self.running.is_some())
            .field("growth", &self.growth)
            .finish()
    }
}

/// A complete time-inconsistent control problem.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub dynamics: DynamicsSpec,
    pub controls: ControlSet,
    pub payoffs: PayoffSpec,
    pub horizon: f64,
}

impl ProblemSpec {
    pub fn new(
        dynamics: DynamicsSpec,
        controls: ControlSet,
        payoffs: PayoffSpec,
        horizon: f64,
    ) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::domain(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        if controls.dim() != dynamics.model.dim_control() {
            return Err(Error::domain(format!(
                "control set has dimension {} but the dynamics expect {}",
                controls.dim(),
                dynamics.model.dim_control()
            )));
        }
        for g in &payoffs.growth {
            if g.y.len() != dynamics.dim_state() {
                return Err(Error::domain(
                    "growth bound reference y has the wrong dimension",
                ));
            }
        }
        Ok(ProblemSpec {
            dynamics,
            controls,
            payoffs,
            horizon,
        })
    }

    pub fn dim_state(&self) -> usize {
        self.dynamics.dim_state()
    }

    pub fn dim_control(&self) -> usize {
        self.controls.dim()
    }

    pub fn is_general(&self) -> bool {
        self.payoffs.is_general()
    }

    fn check_time(&self, what: &str, t: f64) -> Result<()> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(Error::domain(format!(
                "{what} = {t} lies outside [0, {}]",
                self.horizon
            )));
        }
        Ok(())
    }
}

/// Point evaluations of every payoff ingredient.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValueTerms {
    pub terminal: f64,
    pub aggregate: f64,
    pub aggregate_grad: Option<Vec<f64>>,
    pub running: Option<f64>,
}

/// Evaluates `F(s, x, y)`, `G(s, x, y)`, `G_y(s, x, y)` and, when declared,
/// `H(t, x, u, s, y)`.
pub fn evaluate_value_terms(
    spec: &ProblemSpec,
    t: f64,
    x: &[f64],
    y: &[f64],
    s: f64,
    u: &[f64],
) -> Result<ValueTerms> {
    spec.check_time("t", t)?;
    spec.check_time("s", s)?;
    let n = spec.dim_state();
    if x.len() != n || y.len() != n {
        return Err(Error::domain("state arguments have the wrong dimension"));
    }
    if !spec.controls.contains(u) {
        return Err(Error::domain(format!("control {u:?} lies outside U")));
    }
    let terminal = spec.payoffs.terminal(s, x, y)?;
    let aggregate = spec.payoffs.aggregate(s, x, y)?;
    let aggregate_grad = if spec.payoffs.aggregator.has_gradient() {
        let mut g = vec![0.0; n];
        spec.payoffs.aggregate_grad(s, x, y, &mut g)?;
        Some(g)
    } else {
        None
    };
    let running = match &spec.payoffs.running {
        Some(_) => Some(spec.payoffs.running(t, x, u, s, y)?),
        None => None,
    };
    Ok(ValueTerms {
        terminal,
        aggregate,
        aggregate_grad,
        running,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interval_samples_include_vertices_and_zero() {
        let u = ControlSet::interval(&[(-1.0, 1.0)], 41).unwrap();
        assert_eq!(u.samples().len(), 41);
        assert_eq!(u.minimal_norm(), &[0.0]);
        for v in u.vertices() {
            assert!(u.samples().contains(&v));
        }
        assert!(u.samples().iter().all(|s| u.contains(s)));
    }

    #[test]
    fn tie_break_order_is_norm_then_lexicographic() {
        let u = ControlSet::interval(&[(-1.0, 1.0)], 3).unwrap();
        assert_eq!(u.samples(), &[vec![0.0], vec![-1.0], vec![1.0]]);
    }

    #[test]
    fn reversed_bounds_are_not_compact() {
        let err = ControlSet::interval(&[(1.0, -1.0)], 5).unwrap_err();
        assert!(err.to_string().contains("not compact"));
    }

    #[test]
    fn degenerate_box_is_a_singleton() {
        let u = ControlSet::interval(&[(0.0, 0.0)], 41).unwrap();
        assert_eq!(u.samples(), &[vec![0.0]]);
    }

    #[test]
    fn finite_set_projection_and_membership() {
        let u = ControlSet::finite(vec![vec![-1.0], vec![1.0]]).unwrap();
        assert!(u.contains(&[1.0]));
        assert!(!u.contains(&[0.0]));
        let mut out = [0.0];
        u.project(&[0.4], &mut out);
        assert_eq!(out, [1.0]);
        assert!(ControlSet::finite(vec![]).is_err());
    }

    #[test]
    fn two_dimensional_box_vertices() {
        let u = ControlSet::interval(&[(-1.0, 1.0), (0.0, 2.0)], 3).unwrap();
        assert_eq!(u.samples().len(), 9);
        let v = u.vertices();
        assert_eq!(v.len(), 4);
        assert!(v.iter().all(|p| u.samples().contains(p)));
    }
}
