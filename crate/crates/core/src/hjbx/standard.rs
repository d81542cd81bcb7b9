use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::residual::{BOUNDARY_BAND, TIE_TOLERANCE};
use crate::error::{Error, Result};
use crate::grids::{jet_at, Coefficients, GridFunction, Selector, MAX_GRID_DIM};
use crate::model::ProblemSpec;

/// Residual of the classical HJB equation
/// `sup_u {∂_t K + μ·∇K + ½ σσᵀ : ∇²K} = 0`, `K(T, x) = F(T, x, anchor)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardHjbReport {
    /// `sup_u A^u K` at every node; the final time slice holds zeros.
    #[serde(skip)]
    pub residual: Option<GridFunction>,
    /// Largest `|sup_u A^u K|` over all nodes with `t < T`.
    pub max_residual: f64,
    /// Same, excluding the boundary band.
    pub interior_max_residual: f64,
    /// Node attaining `max_residual`.
    pub argmax_t: f64,
    pub argmax_x: Vec<f64>,
    /// `max |K(T, x) − F(T, x, anchor)|`.
    pub terminal_residual: f64,
    pub tolerance: f64,
    /// True when `K` solves the equation to within `tolerance`.
    pub solves: bool,
}

impl StandardHjbReport {
    pub fn residual_at(&self, t: f64, x: &[f64]) -> Result<f64> {
        let r = self
            .residual
            .as_ref()
            .ok_or_else(|| Error::domain("residual table not kept"))?;
        let (k, i) = crate::grids::locate_node(r.grid(), t, x)?;
        Ok(r.at(k, 0, i, 0))
    }
}

/// Evaluates the classical HJB residual of `value` over the sampled `U`.
pub fn standard_hjb_residual(
    value: &GridFunction,
    spec: &ProblemSpec,
    anchor: &[f64],
    tolerance: f64,
) -> Result<StandardHjbReport> {
    let grid = value.grid();
    if grid.y.is_some() || value.arity() != 1 {
        return Err(Error::domain("K must be a scalar function of (t, x)"));
    }
    if grid.dim() != spec.dim_state() || anchor.len() != spec.dim_state() {
        return Err(Error::domain("dimension mismatch"));
    }
    let n = grid.dim();
    let nx = grid.x.size();
    let kt = grid.t.len();
    let samples = spec.controls.samples();
    let sups: Vec<f64> = (0..(kt - 1) * nx)
        .into_par_iter()
        .map(|idx| {
            let (k, i) = (idx / nx, idx % nx);
            let t = grid.t.node(k);
            let mut x = [0.0; MAX_GRID_DIM];
            grid.x.coords(i, &mut x[..n]);
            let jet = jet_at(value, Selector::default(), k, i);
            let mut best = f64::NEG_INFINITY;
            for u in samples {
                let c = Coefficients::eval(&spec.dynamics, t, &x[..n], u)?;
                best = best.max(c.apply(&jet));
            }
            Ok(best)
        })
        .collect::<Result<_>>()?;
    let mut max_residual: f64 = 0.0;
    let mut interior: f64 = 0.0;
    let mut arg = (grid.t.node(0), grid.x.coords_vec(0));
    for (idx, s) in sups.iter().enumerate() {
        let i = idx % nx;
        if s.abs() > max_residual {
            max_residual = s.abs();
            arg = (grid.t.node(idx / nx), grid.x.coords_vec(i));
        }
        if !grid.x.near_boundary(i, BOUNDARY_BAND) {
            interior = interior.max(s.abs());
        }
    }
    let t_end = grid.t.node(kt - 1);
    let mut terminal_residual: f64 = 0.0;
    let mut x = vec![0.0; n];
    for i in 0..nx {
        grid.x.coords(i, &mut x);
        let want = spec.payoffs.terminal(t_end, &x, anchor)?;
        terminal_residual = terminal_residual.max((value.at(kt - 1, 0, i, 0) - want).abs());
    }
    let mut values = sups;
    values.extend(std::iter::repeat_n(0.0, nx));
    let residual = GridFunction::from_values(grid.clone(), 1, values)?;
    let tolerance = tolerance.max(TIE_TOLERANCE);
    Ok(StandardHjbReport {
        residual: Some(residual),
        max_residual,
        interior_max_residual: interior,
        argmax_t: arg.0,
        argmax_x: arg.1,
        terminal_residual,
        tolerance,
        solves: max_residual <= tolerance && terminal_residual <= tolerance,
    })
}
