//! Pointwise operators on tabulated functions: the generator `A^u`, the
//! `H`-operator, the diamond composition and the diagonal restriction.

use super::function::GridFunction;
use super::lattice::{GridSpec, MAX_GRID_DIM};
use super::stencil::{Jet, SliceView};
use crate::error::{Error, Result};
use crate::model::{DynamicsSpec, PayoffSpec};

/// Picks one scalar field out of a grid function: the `y` node (for
/// functions with a `y` lattice) and the component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Selector {
    pub y: usize,
    pub component: usize,
}

impl Selector {
    pub fn component(component: usize) -> Self {
        Selector { y: 0, component }
    }
}

/// Time and flat space index of a lattice point.
pub fn locate_node(grid: &GridSpec, t: f64, x: &[f64]) -> Result<(usize, usize)> {
    if x.len() != grid.dim() {
        return Err(Error::domain("point has the wrong dimension"));
    }
    let k = grid
        .t
        .locate(t)
        .ok_or_else(|| Error::domain(format!("t = {t} is not a time node")))?;
    let node = grid
        .x
        .locate(x)
        .ok_or_else(|| Error::domain(format!("x = {x:?} is not a lattice node")))?;
    Ok((k, node))
}

/// Forward-in-time jet of one scalar field of `h` at `(k, node)`; `k` must
/// not be the final time node.
pub(crate) fn jet_at(h: &GridFunction, sel: Selector, k: usize, node: usize) -> Jet {
    let g = h.grid();
    let dt = g.t.node(k + 1) - g.t.node(k);
    let cur = SliceView::new(h.x_slice(k, sel.y), h.arity(), sel.component);
    let next = SliceView::new(h.x_slice(k + 1, sel.y), h.arity(), sel.component);
    Jet::forward(cur, next, &g.x, node, dt)
}

/// Drift and covariance at one point, in fixed-size buffers.
#[derive(Debug, Clone, Copy, Default)]
pub struct Coefficients {
    pub drift: [f64; MAX_GRID_DIM],
    pub cov: [f64; MAX_GRID_DIM * MAX_GRID_DIM],
    pub dim: usize,
}

impl Coefficients {
    pub fn eval(dynamics: &DynamicsSpec, t: f64, x: &[f64], u: &[f64]) -> Result<Self> {
        let n = dynamics.dim_state();
        if n > MAX_GRID_DIM {
            return Err(Error::Unsupported(format!(
                "lattice operators support n ≤ {MAX_GRID_DIM}"
            )));
        }
        let mut c = Coefficients {
            dim: n,
            ..Default::default()
        };
        let nd = n * dynamics.dim_noise();
        dynamics.drift(t, x, u, &mut c.drift[..n])?;
        if nd <= 16 {
            let mut sigma = [0.0; 16];
            dynamics.covariance(t, x, u, &mut sigma[..nd], &mut c.cov[..n * n])?;
        } else {
            let mut sigma = vec![0.0; nd];
            dynamics.covariance(t, x, u, &mut sigma, &mut c.cov[..n * n])?;
        }
        Ok(c)
    }

    #[inline]
    pub fn apply(&self, jet: &Jet) -> f64 {
        let n = self.dim;
        jet.generator(&self.drift[..n], &self.cov[..n * n])
    }

    /// Spatial part `μ·∇h + ½ σσᵀ : ∇²h` only.
    #[inline]
    pub fn apply_spatial(&self, jet: &Jet) -> f64 {
        let n = self.dim;
        jet.spatial_generator(&self.drift[..n], &self.cov[..n * n])
    }
}

/// `A^u h(t, x) = ∂_t h + μ·∇h + ½ σσᵀ : ∇²h` at a lattice node, with a
/// forward difference in `t` and second-order differences in `x`
/// (one-sided on the truncation boundary).
pub fn apply_generator(
    h: &GridFunction,
    sel: Selector,
    u: &[f64],
    dynamics: &DynamicsSpec,
    t: f64,
    x: &[f64],
) -> Result<f64> {
    let g = h.grid();
    if g.dim() != dynamics.dim_state() {
        return Err(Error::domain(
            "grid dimension differs from the state dimension",
        ));
    }
    if sel.y >= g.ny() || sel.component >= h.arity() {
        return Err(Error::domain("selector out of range"));
    }
    let (k, node) = locate_node(g, t, x)?;
    if k + 1 == g.t.len() {
        return Err(Error::domain("the generator needs a time node after t"));
    }
    let coeff = Coefficients::eval(dynamics, t, x, u)?;
    Ok(coeff.apply(&jet_at(h, sel, k, node)))
}

/// `H_G^u g(t, x) = G_y(t, x, g(t, x)) · A^u g(t, x)`.
pub fn h_operator(
    payoffs: &PayoffSpec,
    g: &GridFunction,
    u: &[f64],
    dynamics: &DynamicsSpec,
    t: f64,
    x: &[f64],
) -> Result<f64> {
    let n = dynamics.dim_state();
    if g.arity() != n || g.grid().y.is_some() {
        return Err(Error::domain("g must be an n-vector function of (t, x)"));
    }
    if !payoffs.aggregator.has_gradient() {
        return Err(Error::Unsupported(
            "aggregator G declares no gradient in y".into(),
        ));
    }
    let (k, node) = locate_node(g.grid(), t, x)?;
    let mut grad = vec![0.0; n];
    payoffs.aggregate_grad(t, x, &g.slice(k)[node * n..(node + 1) * n], &mut grad)?;
    let mut acc = 0.0;
    for (i, gi) in grad.iter().enumerate() {
        if *gi != 0.0 {
            acc += gi * apply_generator(g, Selector::component(i), u, dynamics, t, x)?;
        }
    }
    Ok(acc)
}

/// `(G◇g)(t, x) = G(t, x, g(t, x))`, with `g` interpolated off the lattice.
pub fn diamond(payoffs: &PayoffSpec, g: &GridFunction, t: f64, x: &[f64]) -> Result<f64> {
    if g.arity() != x.len() || g.grid().y.is_some() {
        return Err(Error::domain("g must be an n-vector function of (t, x)"));
    }
    let mut gv = vec![0.0; x.len()];
    g.interpolate(t, x, None, &mut gv)?;
    payoffs.aggregate(t, x, &gv)
}

/// `G◇g` tabulated at every node of `g`'s lattice.
pub fn diamond_grid(payoffs: &PayoffSpec, g: &GridFunction) -> Result<GridFunction> {
    let n = g.grid().dim();
    if g.arity() != n || g.grid().y.is_some() {
        return Err(Error::domain("g must be an n-vector function of (t, x)"));
    }
    let nx = g.grid().x.size();
    let mut k = 0;
    let mut ix = 0;
    GridFunction::from_fn(g.grid().clone(), 1, |t, x, _, out| {
        let gv = &g.slice(k)[ix * n..(ix + 1) * n];
        out[0] = payoffs.aggregate(t, x, gv)?;
        ix += 1;
        if ix == nx {
            ix = 0;
            k += 1;
        }
        Ok(())
    })
}

/// `f(t, x, x)` on the `(t, x)` lattice; the `y` lattice must coincide
/// with the `x` lattice.
pub fn restrict_to_diagonal(f: &GridFunction) -> Result<GridFunction> {
    let grid = f.grid();
    if !grid.has_diagonal_y() {
        return Err(Error::domain(
            "diagonal restriction needs identical x and y lattices",
        ));
    }
    let nx = grid.x.size();
    let a = f.arity();
    let mut values = Vec::with_capacity(grid.t.len() * nx * a);
    for k in 0..grid.t.len() {
        for i in 0..nx {
            let row = f.x_slice(k, i);
            values.extend_from_slice(&row[i * a..(i + 1) * a]);
        }
    }
    Ok(GridFunction::from_values_unchecked(
        grid.space_time(),
        a,
        values,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtins::{ControlSquaredDrift, FnAggregator, Zero};
    use std::sync::Arc;

    const SIGMA: f64 = 0.5;

    fn regulator_dynamics() -> DynamicsSpec {
        DynamicsSpec::new(
            "regulator",
            Arc::new(ControlSquaredDrift { sigma: SIGMA }),
            1.0,
            SIGMA,
            SIGMA * SIGMA,
        )
        .unwrap()
    }

    fn grid() -> GridSpec {
        GridSpec::uniform(1.0, 11, &[(-2.0, 2.0, 21)]).unwrap()
    }

    fn regulator_f() -> GridFunction {
        GridFunction::from_fn(grid(), 1, |t, x, y, o| {
            let y = y.unwrap();
            o[0] = (x[0] - y[0]).powi(2) + SIGMA * SIGMA * (1.0 - t);
            Ok(())
        })
        .unwrap()
    }

    fn payoffs_with(g: FnAggregator) -> PayoffSpec {
        PayoffSpec::new("test", Arc::new(Zero), Arc::new(g), None)
    }

    #[test]
    fn generator_vanishes_on_closed_form_with_zero_control() {
        let f = regulator_f();
        let dyn_ = regulator_dynamics();
        let ylat = f.grid().y.clone().unwrap();
        for iy in [0, 7, 20] {
            for &x in &[-2.0, -0.4, 0.0, 1.2, 2.0] {
                let r = apply_generator(
                    &f,
                    Selector {
                        y: iy,
                        component: 0,
                    },
                    &[0.0],
                    &dyn_,
                    0.3,
                    &[x],
                )
                .unwrap();
                assert!(r.abs() < 1e-10, "y={} x={x} r={r}", ylat.coords_vec(iy)[0]);
            }
        }
    }

    #[test]
    fn generator_term_by_term_at_one_zero() {
        let f = regulator_f();
        let iy = f.grid().y.as_ref().unwrap().locate(&[0.0]).unwrap();
        let r = apply_generator(
            &f,
            Selector {
                y: iy,
                component: 0,
            },
            &[1.0],
            &regulator_dynamics(),
            0.0,
            &[1.0],
        )
        .unwrap();
        // -σ² - u²(2x - 2y) + ½σ²·2
        assert!((r - (-2.0)).abs() < 1e-10);
    }

    #[test]
    fn generator_of_constant_is_zero() {
        let c = GridFunction::from_fn(grid().space_time(), 1, |_, _, _, o| {
            o[0] = 3.7;
            Ok(())
        })
        .unwrap();
        for u in [-1.0, 0.3, 1.0] {
            let r = apply_generator(
                &c,
                Selector::default(),
                &[u],
                &regulator_dynamics(),
                0.5,
                &[-2.0],
            )
            .unwrap();
            assert!(r.abs() < 1e-12);
        }
    }

    #[test]
    fn generator_rejects_off_lattice_and_final_time() {
        let f = regulator_f();
        let d = regulator_dynamics();
        assert!(apply_generator(&f, Selector::default(), &[0.0], &d, 0.05, &[0.0]).is_err());
        assert!(apply_generator(&f, Selector::default(), &[0.0], &d, 0.1, &[0.01]).is_err());
        assert!(apply_generator(&f, Selector::default(), &[0.0], &d, 1.0, &[0.0]).is_err());
    }

    #[test]
    fn h_operator_example() {
        let g = GridFunction::from_fn(grid().space_time(), 1, |_, x, _, o| {
            o[0] = x[0];
            Ok(())
        })
        .unwrap();
        let wide = GridSpec::uniform(1.0, 11, &[(-4.0, 4.0, 41)])
            .unwrap()
            .space_time();
        let g_wide = GridFunction::from_fn(wide, 1, |_, x, _, o| {
            o[0] = x[0];
            Ok(())
        })
        .unwrap();
        let p = payoffs_with(FnAggregator::new(|_, _, y| Ok(y[0] * y[0])).with_gradient(
            |_, _, y, o| {
                o[0] = 2.0 * y[0];
                Ok(())
            },
        ));
        let r = h_operator(&p, &g_wide, &[1.0], &regulator_dynamics(), 0.0, &[3.0]).unwrap();
        assert!((r + 6.0).abs() < 1e-10);
        // A^0 g = 0 for g = x
        let r0 = h_operator(&p, &g, &[0.0], &regulator_dynamics(), 0.2, &[1.0]).unwrap();
        assert!(r0.abs() < 1e-12);
    }

    #[test]
    fn h_operator_needs_gradient() {
        let g = GridFunction::from_fn(grid().space_time(), 1, |_, x, _, o| {
            o[0] = x[0];
            Ok(())
        })
        .unwrap();
        let p = payoffs_with(FnAggregator::new(|_, _, y| Ok(y[0])));
        assert!(matches!(
            h_operator(&p, &g, &[0.0], &regulator_dynamics(), 0.0, &[0.0]),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn diamond_examples() {
        let g2 = GridFunction::from_fn(grid().space_time(), 1, |_, x, _, o| {
            o[0] = 2.0 * x[0];
            Ok(())
        })
        .unwrap();
        let p = payoffs_with(FnAggregator::new(|_, x, y| Ok(x[0] * y[0] * y[0])));
        assert_eq!(diamond(&p, &g2, 0.0, &[1.0]).unwrap(), 4.0);
        let zero = PayoffSpec::new("zero", Arc::new(Zero), Arc::new(Zero), None);
        assert_eq!(diamond(&zero, &g2, 0.3, &[0.7]).unwrap(), 0.0);
        let id = payoffs_with(FnAggregator::new(|_, _, y| Ok(y[0])));
        let g1 = g2.map(|v| v / 2.0).unwrap();
        assert!((diamond(&id, &g1, 0.25, &[0.35]).unwrap() - 0.35).abs() < 1e-15);
    }

    #[test]
    fn diamond_grid_matches_pointwise_composition_at_nodes() {
        let g = GridFunction::from_fn(grid().space_time(), 1, |t, x, _, o| {
            o[0] = x[0].sin() + t;
            Ok(())
        })
        .unwrap();
        let p = payoffs_with(FnAggregator::new(|_, x, y| Ok(x[0] * y[0] * y[0])));
        let dg = diamond_grid(&p, &g).unwrap();
        for k in 0..g.grid().t.len() {
            for ix in 0..g.grid().x.size() {
                let t = g.grid().t.node(k);
                let x = g.grid().x.coords_vec(ix);
                assert_eq!(dg.at(k, 0, ix, 0), diamond(&p, &g, t, &x).unwrap());
            }
        }
    }

    #[test]
    fn diagonal_restriction_examples() {
        let d = restrict_to_diagonal(&regulator_f()).unwrap();
        for k in 0..d.grid().t.len() {
            let t = d.grid().t.node(k);
            for ix in 0..d.grid().x.size() {
                assert!((d.at(k, 0, ix, 0) - SIGMA * SIGMA * (1.0 - t)).abs() < 1e-15);
            }
        }
        let xy = GridFunction::from_fn(grid(), 1, |_, x, y, o| {
            o[0] = x[0] * y.unwrap()[0];
            Ok(())
        })
        .unwrap();
        let d = restrict_to_diagonal(&xy).unwrap();
        let ix = d.grid().x.locate(&[0.4]).unwrap();
        assert!((d.at(0, 0, ix, 0) - 0.16).abs() < 1e-15);
        let yid = GridFunction::from_fn(grid(), 1, |_, _, y, o| {
            o[0] = y.unwrap()[0];
            Ok(())
        })
        .unwrap();
        let d = restrict_to_diagonal(&yid).unwrap();
        assert_eq!(d.x_slice(3, 0), grid().x.axis(0).nodes());
    }

    #[test]
    fn diagonal_restriction_rejects_mismatched_lattices() {
        let g = GridSpec::new(
            crate::grids::Axis::uniform(0.0, 1.0, 3).unwrap(),
            vec![crate::grids::Axis::uniform(-1.0, 1.0, 5).unwrap()],
            Some(vec![crate::grids::Axis::uniform(-1.0, 1.0, 7).unwrap()]),
        )
        .unwrap();
        let f = GridFunction::from_fn(g, 1, |_, _, _, o| {
            o[0] = 0.0;
            Ok(())
        })
        .unwrap();
        assert!(restrict_to_diagonal(&f).is_err());
    }
}
