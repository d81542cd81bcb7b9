use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::residual::{kolmogorov_residual, NormSummary, BOUNDARY_BAND, TIE_TOLERANCE};
use super::{AuxTable, CandidateQuadruple};
use crate::error::{Error, Result};
use crate::grids::stencil::{Jet, SliceView};
use crate::grids::{
    diamond_grid, Axis, Coefficients, FeedbackControl, GridFunction, GridSpec, MAX_GRID_DIM,
};
use crate::model::ProblemSpec;

/// Largest number of stored values for per-reference `f` families.
const MAX_FAMILY_VALUES: usize = 200_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeScheme {
    #[default]
    Explicit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    /// Policy-iteration sweeps after the initial march.
    pub max_outer_iters: usize,
    /// Control values closer than this (max norm) count as unchanged.
    pub control_tolerance: f64,
    pub time_scheme: TimeScheme,
    /// Refine the time axis instead of refusing an unstable step.
    pub auto_dt: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_outer_iters: 10,
            control_tolerance: 0.0,
            time_scheme: TimeScheme::Explicit,
            auto_dt: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepLog {
    pub sweep: usize,
    pub control_changes: usize,
    pub kolmogorov_f: NormSummary,
    pub kolmogorov_g: NormSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceLog {
    pub sweeps: Vec<SweepLog>,
    pub converged: bool,
    pub dt: f64,
    pub stable_dt: f64,
    pub dx: f64,
    pub nt: usize,
    /// `‖f-residual‖_L² / (Δt + Δx²)` of the final sweep.
    pub error_constant: f64,
}

/// Solver output: the candidate, its control table and the sweep log.
#[derive(Debug, Clone)]
pub struct Solution {
    pub candidate: CandidateQuadruple,
    pub control_table: GridFunction,
    pub grid: GridSpec,
    pub log: ConvergenceLog,
}

/// Explicit stability limit `Δx_min² / (n · max diag σσᵀ)`, with the
/// diagonal bounded by the declared `|σ|²`.
pub fn stable_dt(spec: &ProblemSpec, grid: &GridSpec) -> f64 {
    let n = grid.dim() as f64;
    let diag = spec.dynamics.diffusion_bound.powi(2);
    if diag == 0.0 {
        return f64::INFINITY;
    }
    grid.x.min_step().powi(2) / (n * diag)
}

fn prepare_grid(spec: &ProblemSpec, grid: &GridSpec, auto_dt: bool) -> Result<(GridSpec, f64)> {
    grid.check_horizon(spec.horizon)?;
    if grid.dim() != spec.dim_state() {
        return Err(Error::domain(
            "grid dimension differs from the state dimension",
        ));
    }
    if grid.y.as_ref().is_some_and(|y| !y.same_nodes(&grid.x)) {
        return Err(Error::domain(
            "the y lattice must coincide with the x lattice",
        ));
    }
    let mut grid = grid.with_diagonal_y();
    let limit = stable_dt(spec, &grid);
    let dt = grid.t.step();
    if dt > limit * (1.0 + 1e-9) {
        if !auto_dt {
            return Err(Error::Stability {
                dt,
                required_dt: limit,
            });
        }
        let steps = (spec.horizon / limit).ceil() as usize;
        grid.t = Axis::uniform(0.0, spec.horizon, steps + 1)?;
    }
    Ok((grid, limit))
}

enum Policy<'a> {
    Optimize { warm: Option<&'a [f64]> },
    Fixed(&'a FeedbackControl),
}

struct Marched {
    f: Vec<Vec<f64>>,
    g: Vec<f64>,
    controls: Vec<f64>,
}

/// Local data for choosing the control at one node from next-slice values.
struct Selection<'a> {
    spec: &'a ProblemSpec,
    t: f64,
    x: &'a [f64],
    fx: Jet,
    g: [Jet; MAX_GRID_DIM],
    grad: [f64; MAX_GRID_DIM],
}

impl Selection<'_> {
    /// Spatial part of the reduced Hamiltonian; time derivatives do not
    /// depend on `u`.
    fn value(&self, u: &[f64]) -> Result<f64> {
        let c = Coefficients::eval(&self.spec.dynamics, self.t, self.x, u)?;
        let n = self.x.len();
        let coupling: f64 = (0..n)
            .map(|i| self.grad[i] * c.apply_spatial(&self.g[i]))
            .sum();
        let h = self
            .spec
            .payoffs
            .running(self.t, self.x, u, self.t, self.x)?;
        let v = c.apply_spatial(&self.fx) + coupling + h;
        if !v.is_finite() {
            return Err(Error::domain(format!(
                "non-finite Hamiltonian at t = {}, x = {:?}",
                self.t, self.x
            )));
        }
        Ok(v)
    }

    /// Maximiser with ties broken by sample order (minimal norm, then
    /// lexicographic); a warm-start value in the tie set is kept.
    fn choose(&self, warm: Option<&[f64]>) -> Result<Vec<f64>> {
        let samples = self.spec.controls.samples();
        let values: Vec<f64> = samples
            .iter()
            .map(|u| self.value(u))
            .collect::<Result<_>>()?;
        let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if let Some(w) = warm {
            if self.value(w)? >= best - TIE_TOLERANCE {
                return Ok(w.to_vec());
            }
        }
        let pick = values
            .iter()
            .position(|v| *v >= best - TIE_TOLERANCE)
            .expect("non-empty U");
        Ok(samples[pick].clone())
    }
}

/// One explicit backward march. `f` families are stored `[t][y][x]`.
fn march(spec: &ProblemSpec, grid: &GridSpec, policy: Policy<'_>) -> Result<Marched> {
    let n = grid.dim();
    let kd = spec.dim_control();
    let lat = &grid.x;
    let nx = lat.size();
    let ylat = grid.y.as_ref().expect("diagonal y lattice");
    let ny = ylat.size();
    let kt = grid.t.len();
    let slice = ny * nx;
    let general = spec.is_general();
    let running = spec.payoffs.running.is_some();
    let nfam = if general { kt } else { 1 };
    if nfam * kt * slice > MAX_FAMILY_VALUES {
        return Err(Error::Unsupported(format!(
            "f would need {} values; use a coarser grid",
            nfam * kt * slice
        )));
    }
    let t_end = grid.t.node(kt - 1);
    let ref_time = |j: usize| if general { grid.t.node(j) } else { t_end };

    let mut fams: Vec<Vec<f64>> = Vec::with_capacity(nfam);
    for j in 0..nfam {
        let mut fam = vec![0.0; kt * slice];
        let s = ref_time(j);
        let last = &mut fam[(kt - 1) * slice..];
        let mut x = vec![0.0; n];
        let mut y = vec![0.0; n];
        for iy in 0..ny {
            ylat.coords(iy, &mut y);
            for i in 0..nx {
                lat.coords(i, &mut x);
                last[iy * nx + i] = spec.payoffs.terminal(s, &x, &y)?;
            }
        }
        fams.push(fam);
    }
    let mut g = vec![0.0; kt * nx * n];
    for i in 0..nx {
        lat.coords(
            i,
            &mut g[((kt - 1) * nx + i) * n..((kt - 1) * nx + i + 1) * n],
        );
    }
    let mut controls = vec![0.0; kt * nx * kd];

    for k in (0..kt - 1).rev() {
        let t = grid.t.node(k);
        let dt = grid.t.node(k + 1) - t;
        let fam_k = &fams[if general { k } else { 0 }];
        let next_f = &fam_k[(k + 1) * slice..(k + 2) * slice];
        let next_g = &g[(k + 1) * nx * n..(k + 2) * nx * n];
        let chosen: Vec<(Vec<f64>, Coefficients)> = (0..nx)
            .into_par_iter()
            .map(|i| {
                let mut xb = [0.0; MAX_GRID_DIM];
                lat.coords(i, &mut xb[..n]);
                let x = &xb[..n];
                let u = match &policy {
                    Policy::Fixed(c) => c.eval_vec(t, x),
                    Policy::Optimize { warm } => {
                        let mut sel = Selection {
                            spec,
                            t,
                            x,
                            fx: Jet::spatial(
                                SliceView::scalar(&next_f[i * nx..(i + 1) * nx]),
                                lat,
                                i,
                            ),
                            g: [Jet::default(); MAX_GRID_DIM],
                            grad: [0.0; MAX_GRID_DIM],
                        };
                        for c in 0..n {
                            sel.g[c] = Jet::spatial(SliceView::new(next_g, n, c), lat, i);
                        }
                        spec.payoffs.aggregate_grad(
                            t,
                            x,
                            &next_g[i * n..(i + 1) * n],
                            &mut sel.grad[..n],
                        )?;
                        let w = warm.map(|w| &w[(k * nx + i) * kd..(k * nx + i + 1) * kd]);
                        sel.choose(w)?
                    }
                };
                let c = Coefficients::eval(&spec.dynamics, t, x, &u)?;
                Ok((u, c))
            })
            .collect::<Result<_>>()?;
        for (i, (u, _)) in chosen.iter().enumerate() {
            controls[(k * nx + i) * kd..(k * nx + i + 1) * kd].copy_from_slice(u);
        }

        for (j, fam) in fams.iter_mut().enumerate() {
            let (head, tail) = fam.split_at_mut((k + 1) * slice);
            let cur = &mut head[k * slice..];
            let next = &tail[..slice];
            if general && j > k {
                cur.copy_from_slice(next);
                continue;
            }
            let s = ref_time(j);
            cur.par_chunks_mut(nx)
                .enumerate()
                .try_for_each(|(iy, row)| -> Result<()> {
                    let next_row = &next[iy * nx..(iy + 1) * nx];
                    let mut xb = [0.0; MAX_GRID_DIM];
                    let mut yb = [0.0; MAX_GRID_DIM];
                    ylat.coords(iy, &mut yb[..n]);
                    for i in 0..nx {
                        let (u, c) = &chosen[i];
                        let jet = Jet::spatial(SliceView::scalar(next_row), lat, i);
                        let mut rate = c.apply_spatial(&jet);
                        if running {
                            lat.coords(i, &mut xb[..n]);
                            rate += spec.payoffs.running(t, &xb[..n], u, s, &yb[..n])?;
                        }
                        row[i] = next_row[i] + dt * rate;
                    }
                    Ok(())
                })?;
        }

        let (head, tail) = g.split_at_mut((k + 1) * nx * n);
        let cur = &mut head[k * nx * n..];
        let next = &tail[..nx * n];
        for i in 0..nx {
            let (_, c) = &chosen[i];
            for comp in 0..n {
                let jet = Jet::spatial(SliceView::new(next, n, comp), lat, i);
                cur[i * n + comp] = next[i * n + comp] + dt * c.apply_spatial(&jet);
            }
        }
    }
    let (head, tail) = controls.split_at_mut((kt - 1) * nx * kd);
    tail.copy_from_slice(&head[(kt - 2) * nx * kd..]);
    Ok(Marched {
        f: fams,
        g,
        controls,
    })
}

fn assemble(
    spec: &ProblemSpec,
    grid: &GridSpec,
    marched: Marched,
) -> Result<(CandidateQuadruple, GridFunction)> {
    let st = grid.space_time();
    let kd = spec.dim_control();
    let table = GridFunction::from_values(st.clone(), kd, marched.controls)?;
    let control = FeedbackControl::tabulated(table.clone(), &spec.controls)?;
    let fams = marched
        .f
        .into_iter()
        .map(|v| GridFunction::from_values(grid.clone(), 1, v))
        .collect::<Result<Vec<_>>>()?;
    let f = if spec.is_general() {
        AuxTable::PerReference(fams)
    } else {
        AuxTable::Shared(fams.into_iter().next().expect("one family"))
    };
    let g = GridFunction::from_values(st, grid.dim(), marched.g)?;
    let diag = f.diagonal()?;
    let gg = diamond_grid(&spec.payoffs, &g)?;
    let v = diag.zip_with(&gg, |a, b| a + b)?;
    Ok((CandidateQuadruple { control, v, f, g }, table))
}

fn count_changes(a: &[f64], b: &[f64], kd: usize, upto: usize, tol: f64) -> usize {
    a[..upto]
        .chunks(kd)
        .zip(b[..upto].chunks(kd))
        .filter(|(p, q)| p.iter().zip(q.iter()).any(|(x, y)| (x - y).abs() > tol))
        .count()
}

/// Explicit backward march with outer policy-iteration sweeps.
///
/// Each time slice picks, per node, the maximiser of the reduced Hamiltonian
/// `A^u f^{t,x} + H_G^u g + H` evaluated on the already computed next slice,
/// then steps every `f` family and `g` back under that control. `V` is
/// assembled as `f(t,x,t,x) + G◇g`. Later sweeps keep the previous control
/// wherever it still ties for the maximum; the solver has converged once a
/// sweep changes no control value. Sweep 0 alone never counts as converged.
pub fn solve_extended_hjb(
    spec: &ProblemSpec,
    grid: &GridSpec,
    opts: &SolverOptions,
) -> Result<Solution> {
    let (grid, limit) = prepare_grid(spec, grid, opts.auto_dt)?;
    let kd = spec.dim_control();
    let nx = grid.x.size();
    let kt = grid.t.len();
    let mut prev: Vec<f64> = spec.controls.minimal_norm().repeat(kt * nx);
    let mut sweeps = Vec::new();
    let mut converged = false;
    let mut result = None;
    for sweep in 0..=opts.max_outer_iters {
        let warm = (sweep > 0).then_some(prev.as_slice());
        let marched = march(spec, &grid, Policy::Optimize { warm })?;
        let changes = count_changes(
            &marched.controls,
            &prev,
            kd,
            (kt - 1) * nx * kd,
            opts.control_tolerance,
        );
        prev.clone_from(&marched.controls);
        let (cand, table) = assemble(spec, &grid, marched)?;
        let (kf, kg) = residual_norms(&cand, spec)?;
        sweeps.push(SweepLog {
            sweep,
            control_changes: changes,
            kolmogorov_f: kf,
            kolmogorov_g: kg,
        });
        result = Some((cand, table));
        if sweep > 0 && changes == 0 {
            converged = true;
            break;
        }
    }
    let (candidate, control_table) = result.expect("at least one sweep");
    let dt = grid.t.step();
    let dx = grid.x.min_step();
    let last = sweeps.last().expect("at least one sweep");
    let error_constant = last.kolmogorov_f.l2 / (dt + dx * dx);
    Ok(Solution {
        candidate,
        control_table,
        log: ConvergenceLog {
            converged,
            dt,
            stable_dt: limit,
            dx,
            nt: kt,
            error_constant,
            sweeps,
        },
        grid,
    })
}

fn residual_norms(
    cand: &CandidateQuadruple,
    spec: &ProblemSpec,
) -> Result<(NormSummary, NormSummary)> {
    let kol = kolmogorov_residual(cand, spec)?;
    let grid = cand.grid();
    let nx = grid.x.size();
    let band = |i: usize| grid.x.near_boundary(i, BOUNDARY_BAND);
    let dt = grid.t.step();
    let vol = grid.x.cell_volume();
    let summarize = |vals: &mut dyn Iterator<Item = (usize, f64)>, weight: f64| {
        let mut s = NormSummary::default();
        let mut sq = 0.0;
        for (i, r) in vals {
            if band(i) {
                s.band_sup = s.band_sup.max(r.abs());
                s.band_nodes += 1;
            } else {
                s.sup = s.sup.max(r.abs());
                sq += r * r;
                s.interior_nodes += 1;
            }
        }
        s.l2 = (sq * weight).sqrt();
        s
    };
    let kt = grid.t.len();
    let ny = grid.ny();
    let mut f_iter = kol.f.families().into_iter().flat_map(|(j, fam)| {
        (j..kt - 1).flat_map(move |k| {
            (0..ny).flat_map(move |iy| fam.x_slice(k, iy).iter().copied().enumerate())
        })
    });
    let kf = summarize(&mut f_iter, dt * vol * vol);
    let n = grid.dim();
    let mut g_iter = (0..(kt - 1) * nx * n).map(|idx| ((idx / n) % nx, kol.g.values()[idx]));
    let kg = summarize(&mut g_iter, dt * vol);
    Ok((kf, kg))
}

/// Solves the Kolmogorov part (`f` families and `g`) under a fixed control
/// and assembles `V = f(t,x,t,x) + G◇g`.
pub fn solve_kolmogorov(
    spec: &ProblemSpec,
    grid: &GridSpec,
    control: &FeedbackControl,
) -> Result<CandidateQuadruple> {
    let (grid, _) = prepare_grid(spec, grid, false)?;
    if control.dim() != spec.dim_control() {
        return Err(Error::domain("control dimension differs from dim U"));
    }
    let marched = march(spec, &grid, Policy::Fixed(control))?;
    let (mut cand, _) = assemble(spec, &grid, marched)?;
    cand.control = control.clone();
    Ok(cand)
}

/// Classical dynamic programming `W_k = W_{k+1} + Δt · max_u A^u W_{k+1}`
/// with terminal value `F(T, x, anchor)` and the same stencils and
/// tie-breaking as the extended solver. Returns `W` and the control table.
pub fn solve_standard_hjb(
    spec: &ProblemSpec,
    grid: &GridSpec,
    anchor: &[f64],
    opts: &SolverOptions,
) -> Result<(GridFunction, GridFunction)> {
    if spec.is_general() {
        return Err(Error::Unsupported(
            "standard HJB solve needs a problem without reference time".into(),
        ));
    }
    if anchor.len() != spec.dim_state() {
        return Err(Error::domain("anchor has the wrong dimension"));
    }
    let (grid, _) = prepare_grid(spec, grid, opts.auto_dt)?;
    let lat = &grid.x;
    let n = grid.dim();
    let nx = lat.size();
    let kt = grid.t.len();
    let kd = spec.dim_control();
    let t_end = grid.t.node(kt - 1);
    let mut w = vec![0.0; kt * nx];
    let mut x = vec![0.0; n];
    for i in 0..nx {
        lat.coords(i, &mut x);
        w[(kt - 1) * nx + i] = spec.payoffs.terminal(t_end, &x, anchor)?;
    }
    let mut controls = vec![0.0; kt * nx * kd];
    for k in (0..kt - 1).rev() {
        let t = grid.t.node(k);
        let dt = grid.t.node(k + 1) - t;
        let (head, tail) = w.split_at_mut((k + 1) * nx);
        let next = &tail[..nx];
        let chosen: Vec<(Vec<f64>, f64)> = (0..nx)
            .into_par_iter()
            .map(|i| {
                let mut xb = [0.0; MAX_GRID_DIM];
                lat.coords(i, &mut xb[..n]);
                let sel = Selection {
                    spec,
                    t,
                    x: &xb[..n],
                    fx: Jet::spatial(SliceView::scalar(next), lat, i),
                    g: [Jet::default(); MAX_GRID_DIM],
                    grad: [0.0; MAX_GRID_DIM],
                };
                let u = sel.choose(None)?;
                let c = Coefficients::eval(&spec.dynamics, t, &xb[..n], &u)?;
                let h = spec.payoffs.running(t, &xb[..n], &u, t, &xb[..n])?;
                Ok((u, next[i] + dt * (c.apply_spatial(&sel.fx) + h)))
            })
            .collect::<Result<_>>()?;
        for (i, (u, v)) in chosen.into_iter().enumerate() {
            head[k * nx + i] = v;
            controls[(k * nx + i) * kd..(k * nx + i + 1) * kd].copy_from_slice(&u);
        }
    }
    let (head, tail) = controls.split_at_mut((kt - 1) * nx * kd);
    tail.copy_from_slice(&head[(kt - 2) * nx * kd..]);
    let st = grid.space_time();
    Ok((
        GridFunction::from_values(st.clone(), 1, w)?,
        GridFunction::from_values(st, kd, controls)?,
    ))
}
