use std::fmt;
use std::sync::Arc;

use super::function::GridFunction;
use crate::error::{Error, Result};
use crate::model::ControlSet;

type RuleFn = dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync;

/// Closed-form feedback rule; outputs are projected onto `U`.
pub struct RuleControl {
    label: String,
    set: ControlSet,
    rule: Box<RuleFn>,
}

/// Control tabulated on a `(t, x)` lattice, looked up at the nearest `x`
/// node and the last time node at or before `t` (right-continuous in `t`).
#[derive(Debug, Clone, PartialEq)]
pub struct TabulatedControl {
    table: GridFunction,
}

impl TabulatedControl {
    pub fn table(&self) -> &GridFunction {
        &self.table
    }
}

/// Control equal to `dev` on `[start, end) × B[center]` and to `base`
/// elsewhere.
#[derive(Clone)]
pub struct SpikeControl {
    pub base: FeedbackControl,
    pub dev: FeedbackControl,
    pub start: f64,
    pub end: f64,
    pub center: Vec<f64>,
    pub radius: f64,
}

impl SpikeControl {
    /// Set membership of `(t, x)` in the spike window.
    pub fn active(&self, t: f64, x: &[f64]) -> bool {
        let eps = 1e-10 * (1.0 + self.end.abs());
        if t < self.start - eps || t >= self.end - eps {
            return false;
        }
        let d2: f64 = x
            .iter()
            .zip(&self.center)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        d2 <= self.radius * self.radius
    }
}

/// Markovian feedback law `(t, x) ↦ u ∈ U`.
#[derive(Clone)]
pub enum FeedbackControl {
    Constant(Arc<[f64]>),
    Rule(Arc<RuleControl>),
    Tabulated(Arc<TabulatedControl>),
    Spike(Arc<SpikeControl>),
}

impl FeedbackControl {
    pub fn constant(u: &[f64], set: &ControlSet) -> Result<Self> {
        if !set.contains(u) {
            return Err(Error::domain(format!(
                "constant control {u:?} lies outside U"
            )));
        }
        Ok(FeedbackControl::Constant(u.into()))
    }

    pub fn rule<F>(label: impl Into<String>, set: &ControlSet, rule: F) -> Self
    where
        F: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        FeedbackControl::Rule(Arc::new(RuleControl {
            label: label.into(),
            set: set.clone(),
            rule: Box::new(rule),
        }))
    }

    /// Wraps a `(t, x)` table of control values, each of which must lie in `U`.
    pub fn tabulated(table: GridFunction, set: &ControlSet) -> Result<Self> {
        if table.grid().y.is_some() {
            return Err(Error::domain("control tables live on (t, x) lattices"));
        }
        if table.arity() != set.dim() {
            return Err(Error::domain("control table arity differs from dim U"));
        }
        if let Some(bad) = table.values().chunks(set.dim()).find(|u| !set.contains(u)) {
            return Err(Error::domain(format!(
                "tabulated control value {bad:?} lies outside U"
            )));
        }
        Ok(FeedbackControl::Tabulated(Arc::new(TabulatedControl {
            table,
        })))
    }

    pub fn dim(&self) -> usize {
        match self {
            FeedbackControl::Constant(u) => u.len(),
            FeedbackControl::Rule(r) => r.set.dim(),
            FeedbackControl::Tabulated(t) => t.table.arity(),
            FeedbackControl::Spike(s) => s.base.dim(),
        }
    }

    /// Writes `u(t, x)` into `out`.
    pub fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match self {
            FeedbackControl::Constant(u) => out.copy_from_slice(u),
            FeedbackControl::Rule(r) => {
                let mut raw = [0.0; 8];
                let k = out.len();
                if k <= raw.len() {
                    (r.rule)(t, x, &mut raw[..k]);
                    r.set.project(&raw[..k], out);
                } else {
                    let mut raw = vec![0.0; k];
                    (r.rule)(t, x, &mut raw);
                    r.set.project(&raw, out);
                }
            }
            FeedbackControl::Tabulated(tab) => {
                let g = tab.table.grid();
                let k = g.t.floor_index(t);
                let ix = g.x.nearest(x);
                out.copy_from_slice(&tab.table.x_slice(k, 0)[ix * out.len()..(ix + 1) * out.len()]);
            }
            FeedbackControl::Spike(s) => {
                if s.active(t, x) {
                    s.dev.eval(t, x, out)
                } else {
                    s.base.eval(t, x, out)
                }
            }
        }
    }

    pub fn eval_vec(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval(t, x, &mut out);
        out
    }

    /// Constant value when the law is a constant.
    pub fn as_constant(&self) -> Option<&[f64]> {
        match self {
            FeedbackControl::Constant(u) => Some(u),
            _ => None,
        }
    }

    pub fn describe(&self) -> String {
        match self {
            FeedbackControl::Constant(u) => format!("constant {u:?}"),
            FeedbackControl::Rule(r) => format!("rule '{}'", r.label),
            FeedbackControl::Tabulated(t) => {
                format!(
                    "table on {} x {} nodes",
                    t.table.grid().t.len(),
                    t.table.grid().x.size()
                )
            }
            FeedbackControl::Spike(s) => format!(
                "{} spiked with {} on [{}, {}) x B({:?}, {})",
                s.base.describe(),
                s.dev.describe(),
                s.start,
                s.end,
                s.center,
                s.radius
            ),
        }
    }
}

impl fmt::Debug for FeedbackControl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.describe())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grids::GridSpec;

    fn u_set() -> ControlSet {
        ControlSet::interval(&[(-1.0, 1.0)], 5).unwrap()
    }

    #[test]
    fn constant_outside_u_is_rejected() {
        assert!(FeedbackControl::constant(&[2.0], &u_set()).is_err());
        assert!(FeedbackControl::constant(&[0.5], &u_set()).is_ok());
    }

    #[test]
    fn rule_is_projected_into_u() {
        let c = FeedbackControl::rule("linear", &u_set(), |_, x, o| o[0] = 3.0 * x[0]);
        assert_eq!(c.eval_vec(0.0, &[1.0]), vec![1.0]);
        assert_eq!(c.eval_vec(0.0, &[-0.1]), vec![-0.30000000000000004]);
    }

    #[test]
    fn tabulated_is_right_continuous_and_nearest_in_x() {
        let g = GridSpec::uniform(1.0, 3, &[(-1.0, 1.0, 3)])
            .unwrap()
            .space_time();
        // value = time index - 1 at every x, except the right node which carries 0.5
        let table = GridFunction::from_fn(g, 1, |t, x, _, o| {
            o[0] = if x[0] > 0.5 { 0.5 } else { 2.0 * t - 1.0 };
            Ok(())
        })
        .unwrap();
        let c = FeedbackControl::tabulated(table, &u_set()).unwrap();
        assert_eq!(c.eval_vec(0.0, &[0.0]), vec![-1.0]);
        assert_eq!(c.eval_vec(0.49, &[0.0]), vec![-1.0]);
        assert_eq!(c.eval_vec(0.5, &[0.0]), vec![0.0]);
        assert_eq!(c.eval_vec(1.0, &[0.0]), vec![1.0]);
        assert_eq!(c.eval_vec(0.2, &[0.9]), vec![0.5]);
        assert_eq!(c.eval_vec(0.2, &[7.0]), vec![0.5]);
    }

    #[test]
    fn tabulated_values_must_lie_in_u() {
        let g = GridSpec::uniform(1.0, 3, &[(-1.0, 1.0, 3)])
            .unwrap()
            .space_time();
        let table = GridFunction::from_fn(g, 1, |_, _, _, o| {
            o[0] = 1.5;
            Ok(())
        })
        .unwrap();
        assert!(FeedbackControl::tabulated(table, &u_set()).is_err());
    }
}
