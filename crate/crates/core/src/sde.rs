//! Euler–Maruyama simulation of the controlled SDE and Monte Carlo estimates
//! of `f_u`, `g_u` and `J`.
//!
//! Path `p` draws its normals from a ChaCha8 stream keyed by `(seed, p)`, so
//! results do not depend on the number of worker threads. With antithetic
//! sampling, paths `2i` and `2i + 1` share stream `i` with opposite signs and
//! standard errors are computed from pair means.

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grids::{FeedbackControl, SpikeControl};
use crate::model::ProblemSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
    #[serde(default)]
    pub antithetic: bool,
}

impl SimConfig {
    pub fn new(n_paths: usize, dt: f64, seed: u64) -> Self {
        SimConfig {
            n_paths,
            dt,
            seed,
            antithetic: false,
        }
    }

    pub fn antithetic(mut self, on: bool) -> Self {
        self.antithetic = on;
        self
    }

    pub fn validate(&self, horizon: f64) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0 && self.dt <= horizon) {
            return Err(Error::domain(format!(
                "dt = {} must lie in (0, T = {horizon}]",
                self.dt
            )));
        }
        if self.n_paths < 2 {
            return Err(Error::domain("n_paths must be at least 2"));
        }
        if self.antithetic && (!self.n_paths.is_multiple_of(2) || self.n_paths < 4) {
            return Err(Error::domain(
                "antithetic sampling needs an even n_paths ≥ 4",
            ));
        }
        Ok(())
    }
}

/// Time nodes `t, t + dt, …, T`; the final step is shortened to land on `T`.
pub fn time_nodes(t: f64, horizon: f64, dt: f64) -> Vec<f64> {
    let span = horizon - t;
    if span <= 0.0 {
        return vec![horizon];
    }
    let m = ((span / dt) - 1e-9).ceil().max(1.0) as usize;
    let mut times: Vec<f64> = (0..m).map(|i| t + i as f64 * dt).collect();
    times.push(horizon);
    times
}

/// Mean and standard error of a scalar or vector quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub n_paths: usize,
}

impl Estimate {
    pub fn exact(value: Vec<f64>, n_paths: usize) -> Self {
        let stderr = vec![0.0; value.len()];
        Estimate {
            mean: value,
            stderr,
            n_paths,
        }
    }

    /// Scalar mean.
    pub fn value(&self) -> f64 {
        self.mean[0]
    }

    /// Scalar standard error.
    pub fn se(&self) -> f64 {
        self.stderr[0]
    }

    /// `|mean − target| ≤ k·stderr` componentwise.
    pub fn within(&self, target: &[f64], k: f64) -> bool {
        self.mean
            .iter()
            .zip(&self.stderr)
            .zip(target)
            .all(|((m, s), t)| (m - t).abs() <= k * s)
    }

    /// JSON record `{mean, stderr, n_paths, seed}`; scalars are written as
    /// numbers.
    pub fn to_json(&self, seed: u64) -> serde_json::Value {
        let pack = |v: &[f64]| {
            if v.len() == 1 {
                serde_json::json!(v[0])
            } else {
                serde_json::json!(v)
            }
        };
        serde_json::json!({
            "mean": pack(&self.mean),
            "stderr": pack(&self.stderr),
            "n_paths": self.n_paths,
            "seed": seed,
        })
    }
}

/// Sample paths started at a common point.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBatch {
    pub start_t: f64,
    pub start_x: Vec<f64>,
    pub times: Vec<f64>,
    /// `n_paths × times.len() × n`, row-major.
    pub states: Vec<f64>,
    pub n_paths: usize,
    pub dim: usize,
    /// For spike controls: per path, the first step index at which the path
    /// lies outside the ball during the spike window.
    pub exit_flags: Option<Vec<Option<usize>>>,
}

impl PathBatch {
    pub fn state(&self, path: usize, step: usize) -> &[f64] {
        let at = (path * self.times.len() + step) * self.dim;
        &self.states[at..at + self.dim]
    }

    pub fn terminal(&self, path: usize) -> &[f64] {
        self.state(path, self.times.len() - 1)
    }

    /// One row per `(path, step)`: `path, step, t, x0, …`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["path".to_owned(), "step".to_owned(), "t".to_owned()];
        header.extend((0..self.dim).map(|i| format!("x{i}")));
        if self.exit_flags.is_some() {
            header.push("exited".to_owned());
        }
        out.write_record(&header)?;
        for p in 0..self.n_paths {
            for (k, t) in self.times.iter().enumerate() {
                let mut row = vec![p.to_string(), k.to_string(), t.to_string()];
                row.extend(self.state(p, k).iter().map(f64::to_string));
                if let Some(flags) = &self.exit_flags {
                    row.push(flags[p].is_some_and(|e| e <= k).to_string());
                }
                out.write_record(&row)?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Gaussian increments for one path.
struct Noise {
    rng: ChaCha8Rng,
    sign: f64,
}

impl Noise {
    fn for_path(cfg: &SimConfig, path: usize) -> Self {
        let (stream, sign) = if cfg.antithetic {
            (path / 2, if path.is_multiple_of(2) { 1.0 } else { -1.0 })
        } else {
            (path, 1.0)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(stream as u64);
        Noise { rng, sign }
    }

    #[inline]
    fn draw(&mut self) -> f64 {
        let z: f64 = self.rng.sample(StandardNormal);
        self.sign * z
    }
}

/// Reference `(s, y)` for the running payoff integral.
#[derive(Debug, Clone, Copy)]
struct RunningRef<'a> {
    s: f64,
    y: &'a [f64],
}

struct PathResult {
    terminal: Vec<f64>,
    running: f64,
    exit: Option<usize>,
}

/// Buffers reused across the steps of one path.
struct Stepper<'a> {
    spec: &'a ProblemSpec,
    control: &'a FeedbackControl,
    times: &'a [f64],
    u: Vec<f64>,
    mu: Vec<f64>,
    sigma: Vec<f64>,
    z: Vec<f64>,
}

impl<'a> Stepper<'a> {
    fn new(spec: &'a ProblemSpec, control: &'a FeedbackControl, times: &'a [f64]) -> Self {
        let n = spec.dim_state();
        let d = spec.dynamics.dim_noise();
        Stepper {
            spec,
            control,
            times,
            u: vec![0.0; spec.dim_control()],
            mu: vec![0.0; n],
            sigma: vec![0.0; n * d],
            z: vec![0.0; d],
        }
    }

    /// Runs one path from `x`, overwriting it with `X_T`. `record` receives
    /// every state including the start.
    fn run(
        &mut self,
        path: usize,
        x: &mut [f64],
        noise: &mut Noise,
        running: Option<RunningRef<'_>>,
        spike: Option<&SpikeControl>,
        mut record: Option<&mut Vec<f64>>,
    ) -> Result<PathResult> {
        let d = self.z.len();
        let mut integral = 0.0;
        let mut exit = None;
        if let Some(r) = record.as_deref_mut() {
            r.extend_from_slice(x);
        }
        for k in 0..self.times.len() - 1 {
            let t = self.times[k];
            let h = self.times[k + 1] - t;
            if let Some(sp) = spike {
                if exit.is_none() && spike_window(sp, t) && !in_ball(sp, x) {
                    exit = Some(k);
                }
            }
            self.control.eval(t, x, &mut self.u);
            self.spec.dynamics.drift(t, x, &self.u, &mut self.mu)?;
            self.spec
                .dynamics
                .diffusion(t, x, &self.u, &mut self.sigma)?;
            if let Some(r) = running {
                integral += h * self.spec.payoffs.running(t, x, &self.u, r.s, r.y)?;
            }
            let sq = h.sqrt();
            for zj in self.z.iter_mut() {
                *zj = noise.draw() * sq;
            }
            for (i, xi) in x.iter_mut().enumerate() {
                let diffusion: f64 = (0..d).map(|j| self.sigma[i * d + j] * self.z[j]).sum();
                *xi += self.mu[i] * h + diffusion;
            }
            if x.iter().any(|v| !v.is_finite()) || !integral.is_finite() {
                return Err(Error::NonFinite { path, step: k + 1 });
            }
            if let Some(r) = record.as_deref_mut() {
                r.extend_from_slice(x);
            }
        }
        Ok(PathResult {
            terminal: x.to_vec(),
            running: integral,
            exit,
        })
    }
}

fn spike_window(sp: &SpikeControl, t: f64) -> bool {
    let eps = 1e-10 * (1.0 + sp.end.abs());
    t >= sp.start - eps && t < sp.end - eps
}

fn in_ball(sp: &SpikeControl, x: &[f64]) -> bool {
    let d2: f64 = x
        .iter()
        .zip(&sp.center)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    d2 <= sp.radius * sp.radius
}

fn as_spike(c: &FeedbackControl) -> Option<&SpikeControl> {
    match c {
        FeedbackControl::Spike(s) => Some(s),
        _ => None,
    }
}

fn check_start(
    spec: &ProblemSpec,
    control: &FeedbackControl,
    t: f64,
    x: &[f64],
    cfg: &SimConfig,
) -> Result<()> {
    cfg.validate(spec.horizon)?;
    if x.len() != spec.dim_state() {
        return Err(Error::domain("start state has the wrong dimension"));
    }
    if control.dim() != spec.dim_control() {
        return Err(Error::domain("control dimension differs from dim U"));
    }
    if !(0.0..=spec.horizon).contains(&t) {
        return Err(Error::domain(format!(
            "start time {t} lies outside [0, {}]",
            spec.horizon
        )));
    }
    Ok(())
}

fn run_all(
    spec: &ProblemSpec,
    control: &FeedbackControl,
    t: f64,
    x: &[f64],
    cfg: &SimConfig,
    running: Option<RunningRef<'_>>,
) -> Result<Vec<PathResult>> {
    let times = time_nodes(t, spec.horizon, cfg.dt);
    let spike = as_spike(control);
    (0..cfg.n_paths)
        .into_par_iter()
        .map_init(
            || Stepper::new(spec, control, &times),
            |stepper, p| {
                let mut state = x.to_vec();
                let mut noise = Noise::for_path(cfg, p);
                stepper.run(p, &mut state, &mut noise, running, spike, None)
            },
        )
        .collect()
}

/// Euler–Maruyama paths with the control frozen at each step's left endpoint.
pub fn simulate_paths(
    spec: &ProblemSpec,
    control: &FeedbackControl,
    start: (f64, &[f64]),
    cfg: &SimConfig,
) -> Result<PathBatch> {
    let (t, x) = start;
    check_start(spec, control, t, x, cfg)?;
    if t >= spec.horizon {
        return Err(Error::domain("simulation must start before the horizon"));
    }
    let times = time_nodes(t, spec.horizon, cfg.dt);
    let spike = as_spike(control);
    let per_path: Vec<(Vec<f64>, Option<usize>)> = (0..cfg.n_paths)
        .into_par_iter()
        .map_init(
            || Stepper::new(spec, control, &times),
            |stepper, p| {
                let mut state = x.to_vec();
                let mut rec = Vec::with_capacity(times.len() * x.len());
                let mut noise = Noise::for_path(cfg, p);
                let r = stepper.run(p, &mut state, &mut noise, None, spike, Some(&mut rec))?;
                Ok((rec, r.exit))
            },
        )
        .collect::<Result<_>>()?;
    let mut states = Vec::with_capacity(cfg.n_paths * times.len() * x.len());
    let mut exits = Vec::with_capacity(cfg.n_paths);
    for (rec, e) in per_path {
        states.extend_from_slice(&rec);
        exits.push(e);
    }
    Ok(PathBatch {
        start_t: t,
        start_x: x.to_vec(),
        times,
        states,
        n_paths: cfg.n_paths,
        dim: x.len(),
        exit_flags: spike.map(|_| exits),
    })
}

/// Componentwise mean and standard error of `samples` (`n_paths × width`),
/// pairing consecutive rows under antithetic sampling.
fn summarize(samples: &[f64], width: usize, cfg: &SimConfig) -> Estimate {
    let rows = samples.len() / width;
    let group = if cfg.antithetic { 2 } else { 1 };
    let m = rows / group;
    let mut mean = vec![0.0; width];
    let mut stderr = vec![0.0; width];
    for c in 0..width {
        let unit = |i: usize| -> f64 {
            (0..group)
                .map(|j| samples[(i * group + j) * width + c])
                .sum::<f64>()
                / group as f64
        };
        let mu = (0..m).map(unit).sum::<f64>() / m as f64;
        let var = (0..m).map(|i| (unit(i) - mu).powi(2)).sum::<f64>() / (m as f64 - 1.0);
        mean[c] = mu;
        stderr[c] = (var / m as f64).sqrt();
    }
    Estimate {
        mean,
        stderr,
        n_paths: rows,
    }
}

/// Monte Carlo estimate of `f_u(t, x, s, y) = E[F(s, X_T, y) + ∫_t^T H(r, X_r, u, s, y) dr]`
/// with left-endpoint quadrature of the running payoff.
pub fn estimate_f(
    spec: &ProblemSpec,
    control: &FeedbackControl,
    start: (f64, &[f64]),
    reference: (f64, &[f64]),
    cfg: &SimConfig,
) -> Result<Estimate> {
    let (t, x) = start;
    let (s, y) = reference;
    check_start(spec, control, t, x, cfg)?;
    if y.len() != x.len() {
        return Err(Error::domain("reference y has the wrong dimension"));
    }
    if t >= spec.horizon {
        return Ok(Estimate::exact(
            vec![spec.payoffs.terminal(s, x, y)?],
            cfg.n_paths,
        ));
    }
    let running = spec.payoffs.running.as_ref().map(|_| RunningRef { s, y });
    let paths = run_all(spec, control, t, x, cfg, running)?;
    let samples: Vec<f64> = paths
        .iter()
        .map(|p| Ok(spec.payoffs.terminal(s, &p.terminal, y)? + p.running))
        .collect::<Result<_>>()?;
    Ok(summarize(&samples, 1, cfg))
}

/// Monte Carlo estimate of `g_u(t, x) = E[X_T]`.
pub fn estimate_g(
    spec: &ProblemSpec,
    control: &FeedbackControl,
    start: (f64, &[f64]),
    cfg: &SimConfig,
) -> Result<Estimate> {
    let (t, x) = start;
    check_start(spec, control, t, x, cfg)?;
    if t >= spec.horizon {
        return Ok(Estimate::exact(x.to_vec(), cfg.n_paths));
    }
    let paths = run_all(spec, control, t, x, cfg, None)?;
    let samples: Vec<f64> = paths
        .iter()
        .flat_map(|p| p.terminal.iter().copied())
        .collect();
    Ok(summarize(&samples, x.len(), cfg))
}

/// Per-path terms of `J` at `(t, x)`: `F(t, X_T, x) + ∫H` and `X_T`.
fn value_samples(
    spec: &ProblemSpec,
    paths: &[PathResult],
    t: f64,
    x: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = x.len();
    let mut fs = Vec::with_capacity(paths.len());
    let mut xs = Vec::with_capacity(paths.len() * n);
    for p in paths {
        fs.push(spec.payoffs.terminal(t, &p.terminal, x)? + p.running);
        xs.extend_from_slice(&p.terminal);
    }
    Ok((fs, xs))
}

fn mean_rows(xs: &[f64], n: usize) -> Vec<f64> {
    let rows = xs.len() / n;
    (0..n)
        .map(|c| (0..rows).map(|i| xs[i * n + c]).sum::<f64>() / rows as f64)
        .collect()
}

/// `G` and `G_y` at the sample mean of `X_T`. The gradient is zero for the
/// built-in zero aggregator and required otherwise.
fn aggregate_at(spec: &ProblemSpec, t: f64, x: &[f64], m: &[f64]) -> Result<(f64, Vec<f64>)> {
    let gval = spec.payoffs.aggregate(t, x, m)?;
    let mut grad = vec![0.0; x.len()];
    spec.payoffs.aggregate_grad(t, x, m, &mut grad)?;
    Ok((gval, grad))
}

/// Monte Carlo estimate of `J(t, x, u) = E[F(X_T, x)] + G(x, E[X_T])`
/// (plus the running payoff in the general case). The standard error uses
/// the delta-method influence `F_i + G_y · X_T,i`.
pub fn estimate_j(
    spec: &ProblemSpec,
    control: &FeedbackControl,
    start: (f64, &[f64]),
    cfg: &SimConfig,
) -> Result<Estimate> {
    let (t, x) = start;
    check_start(spec, control, t, x, cfg)?;
    if t >= spec.horizon {
        let v = spec.payoffs.terminal(t, x, x)? + spec.payoffs.aggregate(t, x, x)?;
        return Ok(Estimate::exact(vec![v], cfg.n_paths));
    }
    let running = spec
        .payoffs
        .running
        .as_ref()
        .map(|_| RunningRef { s: t, y: x });
    let paths = run_all(spec, control, t, x, cfg, running)?;
    let n = x.len();
    let (fs, xs) = value_samples(spec, &paths, t, x)?;
    let m = mean_rows(&xs, n);
    let (gval, grad) = aggregate_at(spec, t, x, &m)?;
    let psi: Vec<f64> = fs
        .iter()
        .enumerate()
        .map(|(i, f)| f + dot(&grad, &xs[i * n..(i + 1) * n]))
        .collect();
    let f_mean = summarize(&fs, 1, cfg).mean[0];
    let spread = summarize(&psi, 1, cfg);
    Ok(Estimate {
        mean: vec![f_mean + gval],
        stderr: spread.stderr,
        n_paths: cfg.n_paths,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Spike control `u_{t+h}`: `dev` on `[t, t + h) × B[center, radius]`,
/// `base` elsewhere.
pub fn spike_control(
    base: &FeedbackControl,
    dev: &FeedbackControl,
    t: f64,
    h: f64,
    radius: f64,
    center: &[f64],
) -> Result<FeedbackControl> {
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::domain(format!(
            "spike duration h = {h} must be positive"
        )));
    }
    if !(radius.is_finite() && radius > 0.0) {
        return Err(Error::domain(format!(
            "spike radius {radius} must be positive"
        )));
    }
    if base.dim() != dev.dim() {
        return Err(Error::domain(
            "base and deviation controls differ in dimension",
        ));
    }
    Ok(FeedbackControl::Spike(Arc::new(SpikeControl {
        base: base.clone(),
        dev: dev.clone(),
        start: t,
        end: t + h,
        center: center.to_vec(),
        radius,
    })))
}

/// `J(a) − J(b)` from common random numbers, with the fraction of paths
/// that leave a spike ball during its window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedDifference {
    pub estimate: Estimate,
    pub exit_fraction: f64,
}

/// Simulates both controls on identical noise and estimates `J(a) − J(b)`.
/// The per-pair influence is `(F_a − F_b) + (G_y(m_a)·X_a − G_y(m_b)·X_b)`,
/// so swapping `a` and `b` negates every term exactly.
pub fn paired_value_difference(
    spec: &ProblemSpec,
    a: &FeedbackControl,
    b: &FeedbackControl,
    start: (f64, &[f64]),
    cfg: &SimConfig,
) -> Result<PairedDifference> {
    let (t, x) = start;
    check_start(spec, a, t, x, cfg)?;
    check_start(spec, b, t, x, cfg)?;
    if t >= spec.horizon {
        return Ok(PairedDifference {
            estimate: Estimate::exact(vec![0.0], cfg.n_paths),
            exit_fraction: 0.0,
        });
    }
    let times = time_nodes(t, spec.horizon, cfg.dt);
    let running = spec
        .payoffs
        .running
        .as_ref()
        .map(|_| RunningRef { s: t, y: x });
    let (sa, sb) = (as_spike(a), as_spike(b));
    let pairs: Vec<(PathResult, PathResult)> = (0..cfg.n_paths)
        .into_par_iter()
        .map_init(
            || (Stepper::new(spec, a, &times), Stepper::new(spec, b, &times)),
            |(st_a, st_b), p| {
                let mut xa = x.to_vec();
                let mut xb = x.to_vec();
                let ra = st_a.run(p, &mut xa, &mut Noise::for_path(cfg, p), running, sa, None)?;
                let rb = st_b.run(p, &mut xb, &mut Noise::for_path(cfg, p), running, sb, None)?;
                Ok((ra, rb))
            },
        )
        .collect::<Result<_>>()?;
    let exited = pairs
        .iter()
        .filter(|(ra, rb)| ra.exit.is_some() || rb.exit.is_some())
        .count();
    let (pa, pb): (Vec<PathResult>, Vec<PathResult>) = pairs.into_iter().unzip();
    let n = x.len();
    let (fa, xa) = value_samples(spec, &pa, t, x)?;
    let (fb, xb) = value_samples(spec, &pb, t, x)?;
    let (ga, grad_a) = aggregate_at(spec, t, x, &mean_rows(&xa, n))?;
    let (gb, grad_b) = aggregate_at(spec, t, x, &mean_rows(&xb, n))?;
    let dfs: Vec<f64> = fa.iter().zip(&fb).map(|(p, q)| p - q).collect();
    let psi: Vec<f64> = (0..dfs.len())
        .map(|i| {
            let ta = dot(&grad_a, &xa[i * n..(i + 1) * n]);
            let tb = dot(&grad_b, &xb[i * n..(i + 1) * n]);
            dfs[i] + (ta - tb)
        })
        .collect();
    let d_mean = summarize(&dfs, 1, cfg).mean[0];
    let spread = summarize(&psi, 1, cfg);
    Ok(PairedDifference {
        estimate: Estimate {
            mean: vec![d_mean + (ga - gb)],
            stderr: spread.stderr,
            n_paths: cfg.n_paths,
        },
        exit_fraction: exited as f64 / cfg.n_paths as f64,
    })
}
