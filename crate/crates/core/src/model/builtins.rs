//! Named built-in dynamics and payoffs, plus closure adapters for
//! user-supplied evaluators.

use std::sync::Arc;

use crate::error::EvalError;

use super::{Aggregator, Dynamics, RunningPayoff, TerminalPayoff};

/// Scalar dynamics `dX = -u² dt + σ dW`.
#[derive(Debug, Clone, Copy)]
pub struct ControlSquaredDrift {
    pub sigma: f64,
}

impl Dynamics for ControlSquaredDrift {
    fn dim_state(&self) -> usize {
        1
    }
    fn dim_noise(&self) -> usize {
        1
    }
    fn dim_control(&self) -> usize {
        1
    }
    fn drift(&self, _t: f64, _x: &[f64], u: &[f64], out: &mut [f64]) -> Result<(), EvalError> {
        out[0] = -u[0] * u[0];
        Ok(())
    }
    fn diffusion(&self, _t: f64, _x: &[f64], _u: &[f64], out: &mut [f64]) -> Result<(), EvalError> {
        out[0] = self.sigma;
        Ok(())
    }
}

/// `dX = (B u + c) dt + Σ dW` with constant `B` (`n × k`), `c` and `Σ` (`n × d`).
#[derive(Debug, Clone)]
pub struct ControlledDrift {
    n: usize,
    d: usize,
    k: usize,
    gain: Vec<f64>,
    offset: Vec<f64>,
    sigma: Vec<f64>,
}

impl ControlledDrift {
    pub fn new(
        gain: Vec<Vec<f64>>,
        offset: Vec<f64>,
        sigma: Vec<Vec<f64>>,
    ) -> Result<Self, String> {
        let n = gain.len();
        if n == 0 || sigma.len() != n || offset.len() != n {
            return Err("gain, offset and sigma must have one row per state dimension".into());
        }
        let k = gain[0].len();
        let d = sigma[0].len();
        if k == 0 || d == 0 {
            return Err("gain and sigma rows must be non-empty".into());
        }
        if gain.iter().any(|r| r.len() != k) || sigma.iter().any(|r| r.len() != d) {
            return Err("ragged gain or sigma matrix".into());
        }
        Ok(ControlledDrift {
            n,
            d,
            k,
            gain: gain.into_iter().flatten().collect(),
            offset,
            sigma: sigma.into_iter().flatten().collect(),
        })
    }
}

impl Dynamics for ControlledDrift {
    fn dim_state(&self) -> usize {
        self.n
    }
    fn dim_noise(&self) -> usize {
        self.d
    }
    fn dim_control(&self) -> usize {
        self.k
    }
    fn drift(&self, _t: f64, _x: &[f64], u: &[f64], out: &mut [f64]) -> Result<(), EvalError> {
        for (i, o) in out.iter_mut().enumerate().take(self.n) {
            let row = &self.gain[i * self.k..(i + 1) * self.k];
            *o = self.offset[i] + row.iter().zip(u).map(|(b, v)| b * v).sum::<f64>();
        }
        Ok(())
    }
    fn diffusion(&self, _t: f64, _x: &[f64], _u: &[f64], out: &mut [f64]) -> Result<(), EvalError> {
        out.copy_from_slice(&self.sigma);
        Ok(())
    }
}

/// Scalar dynamics with control acting on both coefficients:
/// `dX = κ u dt + (σ₀ + ν |u|) dW`.
#[derive(Debug, Clone, Copy)]
pub struct ControlledVolatility {
    pub drift_gain: f64,
    pub base_sigma: f64,
    pub vol_gain: f64,
}

impl Dynamics for ControlledVolatility {
    fn dim_state(&self) -> usize {
        1
    }
    fn dim_noise(&self) -> usize {
        1
    }
    fn dim_control(&self) -> usize {
        1
    }
    fn drift(&self, _t: f64, _x: &[f64], u: &[f64], out: &mut [f64]) -> Result<(), EvalError> {
        out[0] = self.drift_gain * u[0];
        Ok(())
    }
    fn diffusion(&self, _t: f64, _x: &[f64], u: &[f64], out: &mut [f64]) -> Result<(), EvalError> {
        out[0] = self.base_sigma + self.vol_gain * u[0].abs();
        Ok(())
    }
}

/// General quadratic form
/// `xᵀP x + xᵀQ y + yᵀR y + p·x + q·y + c`, optionally scaled by `e^{-ρ s}`.
#[derive(Debug, Clone)]
pub struct QuadraticForm {
    n: usize,
    xx: Vec<f64>,
    xy: Vec<f64>,
    yy: Vec<f64>,
    lin_x: Vec<f64>,
    lin_y: Vec<f64>,
    constant: f64,
    rate: f64,
}

impl QuadraticForm {
    pub fn new(
        xx: Vec<Vec<f64>>,
        xy: Vec<Vec<f64>>,
        yy: Vec<Vec<f64>>,
        lin_x: Vec<f64>,
        lin_y: Vec<f64>,
        constant: f64,
    ) -> Result<Self, String> {
        let n = lin_x.len();
        if n == 0 || lin_y.len() != n {
            return Err("linear coefficient vectors must share a positive length".into());
        }
        let flat = |m: Vec<Vec<f64>>, name: &str| -> Result<Vec<f64>, String> {
            if m.len() != n || m.iter().any(|r| r.len() != n) {
                return Err(format!("{name} must be {n}x{n}"));
            }
            Ok(m.into_iter().flatten().collect())
        };
        Ok(QuadraticForm {
            n,
            xx: flat(xx, "xx")?,
            xy: flat(xy, "xy")?,
            yy: flat(yy, "yy")?,
            lin_x,
            lin_y,
            constant,
            rate: 0.0,
        })
    }

    /// `w |x - y|²`.
    pub fn squared_distance(n: usize, weight: f64) -> Self {
        let mut id = vec![0.0; n * n];
        for i in 0..n {
            id[i * n + i] = weight;
        }
        QuadraticForm {
            n,
            xx: id.clone(),
            xy: id.iter().map(|v| -2.0 * v).collect(),
            yy: id,
            lin_x: vec![0.0; n],
            lin_y: vec![0.0; n],
            constant: 0.0,
            rate: 0.0,
        }
    }

    /// Multiplies the whole form by `e^{-rate · s}`, making it depend on the
    /// reference time.
    pub fn discounted(mut self, rate: f64) -> Self {
        self.rate = rate;
        self
    }

    fn scale(&self, s: f64) -> f64 {
        if self.rate == 0.0 {
            1.0
        } else {
            (-self.rate * s).exp()
        }
    }

    fn value(&self, s: f64, x: &[f64], y: &[f64]) -> f64 {
        let n = self.n;
        let mut v = self.constant;
        for i in 0..n {
            v += self.lin_x[i] * x[i] + self.lin_y[i] * y[i];
            for j in 0..n {
                v += x[i] * self.xx[i * n + j] * x[j]
                    + x[i] * self.xy[i * n + j] * y[j]
                    + y[i] * self.yy[i * n + j] * y[j];
            }
        }
        self.scale(s) * v
    }

    fn gradient_y(&self, s: f64, x: &[f64], y: &[f64], out: &mut [f64]) {
        let n = self.n;
        let k = self.scale(s);
        for (j, o) in out.iter_mut().enumerate().take(n) {
            let mut g = self.lin_y[j];
            for (i, (xi, yi)) in x.iter().zip(y).enumerate().take(n) {
                g += xi * self.xy[i * n + j] + (self.yy[i * n + j] + self.yy[j * n + i]) * yi;
            }
            *o = k * g;
        }
    }
}

impl TerminalPayoff for QuadraticForm {
    fn eval(&self, s: f64, x: &[f64], y: &[f64]) -> Result<f64, EvalError> {
        Ok(self.value(s, x, y))
    }
    fn depends_on_time(&self) -> bool {
        self.rate != 0.0
    }
}

impl Aggregator for QuadraticForm {
    fn eval(&self, s: f64, x: &[f64], y: &[f64]) -> Result<f64, EvalError> {
        Ok(self.value(s, x, y))
    }
    fn grad_y(&self, s: f64, x: &[f64], y: &[f64], out: &mut [f64]) -> Result<(), EvalError> {
        self.gradient_y(s, x, y, out);
        Ok(())
    }
    fn depends_on_time(&self) -> bool {
        self.rate != 0.0
    }
}

/// `A cos(ω Σᵢ (xᵢ - yᵢ))`.
#[derive(Debug, Clone, Copy)]
pub struct CosineDistance {
    pub amplitude: f64,
    pub frequency: f64,
}

impl TerminalPayoff for CosineDistance {
    fn eval(&self, _s: f64, x: &[f64], y: &[f64]) -> Result<f64, EvalError> {
        let z: f64 = x.iter().zip(y).map(|(a, b)| a - b).sum();
        Ok(self.amplitude * (self.frequency * z).cos())
    }
}

/// Identically zero payoff; usable as `F`, `G` or `H`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Zero;

impl TerminalPayoff for Zero {
    fn eval(&self, _s: f64, _x: &[f64], _y: &[f64]) -> Result<f64, EvalError> {
        Ok(0.0)
    }
}

impl Aggregator for Zero {
    fn eval(&self, _s: f64, _x: &[f64], _y: &[f64]) -> Result<f64, EvalError> {
        Ok(0.0)
    }
    fn grad_y(&self, _s: f64, _x: &[f64], _y: &[f64], out: &mut [f64]) -> Result<(), EvalError> {
        out.fill(0.0);
        Ok(())
    }
}

impl RunningPayoff for Zero {
    fn eval(&self, _r: f64, _x: &[f64], _u: &[f64], _s: f64, _y: &[f64]) -> Result<f64, EvalError> {
        Ok(0.0)
    }
}

/// Hyperbolically discounted control cost
/// `H(r, x, u, s, y) = -w |u|² / (1 + ρ |r - s|)`.
#[derive(Debug, Clone, Copy)]
pub struct DiscountedControlCost {
    pub weight: f64,
    pub rate: f64,
}

impl RunningPayoff for DiscountedControlCost {
    fn eval(&self, r: f64, _x: &[f64], u: &[f64], s: f64, _y: &[f64]) -> Result<f64, EvalError> {
        let u2: f64 = u.iter().map(|v| v * v).sum();
        Ok(-self.weight * u2 / (1.0 + self.rate * (r - s).abs()))
    }
}

type DriftFn = dyn Fn(f64, &[f64], &[f64], &mut [f64]) -> Result<(), EvalError> + Send + Sync;

/// Dynamics backed by closures.
pub struct FnDynamics {
    n: usize,
    d: usize,
    k: usize,
    drift: Arc<DriftFn>,
    diffusion: Arc<DriftFn>,
}

impl FnDynamics {
    pub fn new<D, S>(n: usize, d: usize, k: usize, drift: D, diffusion: S) -> Self
    where
        D: Fn(f64, &[f64], &[f64], &mut [f64]) -> Result<(), EvalError> + Send + Sync + 'static,
        S: Fn(f64, &[f64], &[f64], &mut [f64]) -> Result<(), EvalError> + Send + Sync + 'static,
    {
        FnDynamics {
            n,
            d,
            k,
            drift: Arc::new(drift),
            diffusion: Arc::new(diffusion),
        }
    }
}

impl Dynamics for FnDynamics {
    fn dim_state(&self) -> usize {
        self.n
    }
    fn dim_noise(&self) -> usize {
        self.d
    }
    fn dim_control(&self) -> usize {
        self.k
    }
    fn drift(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) -> Result<(), EvalError> {
        (self.drift)(t, x, u, out)
    }
    fn diffusion(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) -> Result<(), EvalError> {
        (self.diffusion)(t, x, u, out)
    }
}

type ScalarFn = dyn Fn(f64, &[f64], &[f64]) -> Result<f64, EvalError> + Send + Sync;
type GradFn = dyn Fn(f64, &[f64], &[f64], &mut [f64]) -> Result<(), EvalError> + Send + Sync;

/// Terminal payoff backed by a closure.
pub struct FnTerminal {
    f: Arc<ScalarFn>,
    time_dependent: bool,
}

impl FnTerminal {
    pub fn new<F>(f: F) -> Self
    where
        F: Fn(f64, &[f64], &[f64]) -> Result<f64, EvalError> + Send + Sync + 'static,
    {
        FnTerminal {
            f: Arc::new(f),
            time_dependent: false,
        }
    }

    pub fn time_dependent(mut self) -> Self {
        self.time_dependent = true;
        self
    }
}

impl TerminalPayoff for FnTerminal {
    fn eval(&self, s: f64, x: &[f64], y: &[f64]) -> Result<f64, EvalError> {
        (self.f)(s, x, y)
    }
    fn depends_on_time(&self) -> bool {
        self.time_dependent
    }
}

/// Aggregator backed by closures; the gradient is optional.
pub struct FnAggregator {
    g: Arc<ScalarFn>,
    grad: Option<Arc<GradFn>>,
    time_dependent: bool,
}

impl FnAggregator {
    pub fn new<G>(g: G) -> Self
    where
        G: Fn(f64, &[f64], &[f64]) -> Result<f64, EvalError> + Send + Sync + 'static,
    {
        FnAggregator {
            g: Arc::new(g),
            grad: None,
            time_dependent: false,
        }
    }

    pub fn with_gradient<D>(mut self, grad: D) -> Self
    where
        D: Fn(f64, &[f64], &[f64], &mut [f64]) -> Result<(), EvalError> + Send + Sync + 'static,
    {
        self.grad = Some(Arc::new(grad));
        self
    }

    pub fn time_dependent(mut self) -> Self {
        self.time_dependent = true;
        self
    }
}

impl Aggregator for FnAggregator {
    fn eval(&self, s: f64, x: &[f64], y: &[f64]) -> Result<f64, EvalError> {
        (self.g)(s, x, y)
    }
    fn grad_y(&self, s: f64, x: &[f64], y: &[f64], out: &mut [f64]) -> Result<(), EvalError> {
        match &self.grad {
            Some(d) => d(s, x, y, out),
            None => Err(EvalError::new("no gradient declared")),
        }
    }
    fn has_gradient(&self) -> bool {
        self.grad.is_some()
    }
    fn depends_on_time(&self) -> bool {
        self.time_dependent
    }
}

type RunningFn = dyn Fn(f64, &[f64], &[f64], f64, &[f64]) -> Result<f64, EvalError> + Send + Sync;

/// Running payoff backed by a closure.
pub struct FnRunning(Arc<RunningFn>);

impl FnRunning {
    pub fn new<H>(h: H) -> Self
    where
        H: Fn(f64, &[f64], &[f64], f64, &[f64]) -> Result<f64, EvalError> + Send + Sync + 'static,
    {
        FnRunning(Arc::new(h))
    }
}

impl RunningPayoff for FnRunning {
    fn eval(&self, r: f64, x: &[f64], u: &[f64], s: f64, y: &[f64]) -> Result<f64, EvalError> {
        (self.0)(r, x, u, s, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_form_value_and_gradient() {
        // G(x, y) = x·y
        let g = QuadraticForm::new(
            vec![vec![0.0]],
            vec![vec![1.0]],
            vec![vec![0.0]],
            vec![0.0],
            vec![0.0],
            0.0,
        )
        .unwrap();
        assert_eq!(Aggregator::eval(&g, 0.0, &[3.0], &[5.0]).unwrap(), 15.0);
        let mut d = [0.0];
        g.grad_y(0.0, &[3.0], &[5.0], &mut d).unwrap();
        assert_eq!(d, [3.0]);
    }

    #[test]
    fn squared_distance_matches_formula() {
        let f = QuadraticForm::squared_distance(2, 1.0);
        let v = TerminalPayoff::eval(&f, 0.0, &[1.0, 2.0], &[0.0, 4.0]).unwrap();
        assert_eq!(v, 1.0 + 4.0);
        let mut d = [0.0; 2];
        f.grad_y(0.0, &[1.0, 2.0], &[0.0, 4.0], &mut d).unwrap();
        assert_eq!(d, [-2.0, 4.0]);
    }

    #[test]
    fn discounted_form_is_time_dependent() {
        let f = QuadraticForm::squared_distance(1, 1.0).discounted(0.5);
        assert!(TerminalPayoff::depends_on_time(&f));
        let v = TerminalPayoff::eval(&f, 2.0, &[1.0], &[0.0]).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn controlled_drift_shapes() {
        let m =
            ControlledDrift::new(vec![vec![1.0, 0.5]], vec![0.1], vec![vec![0.3, 0.4]]).unwrap();
        assert_eq!((m.dim_state(), m.dim_noise(), m.dim_control()), (1, 2, 2));
        let mut out = [0.0];
        m.drift(0.0, &[0.0], &[1.0, 2.0], &mut out).unwrap();
        assert!((out[0] - 2.1).abs() < 1e-15);
        assert!(ControlledDrift::new(vec![vec![1.0]], vec![], vec![vec![1.0]]).is_err());
    }
}
