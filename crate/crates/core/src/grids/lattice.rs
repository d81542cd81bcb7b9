use serde::Serialize;

use crate::error::{Error, Result};

/// Largest state dimension supported on lattices.
pub const MAX_GRID_DIM: usize = 2;

const NODE_TOL: f64 = 1e-9;

/// Uniformly spaced, strictly increasing axis with at least three nodes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Axis {
    nodes: Vec<f64>,
    #[serde(skip)]
    step: f64,
}

impl Axis {
    pub fn uniform(lo: f64, hi: f64, count: usize) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::domain(format!(
                "axis bounds [{lo}, {hi}] are not increasing"
            )));
        }
        if count < 3 {
            return Err(Error::domain(format!(
                "axis needs at least 3 nodes, got {count}"
            )));
        }
        let m = (count - 1) as f64;
        let nodes = (0..count)
            .map(|i| (lo * (m - i as f64) + hi * i as f64) / m)
            .collect();
        Ok(Axis {
            nodes,
            step: (hi - lo) / m,
        })
    }

    /// Builds an axis from explicit nodes, enforcing uniform spacing.
    pub fn from_nodes(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 3 {
            return Err(Error::domain(format!(
                "axis needs at least 3 nodes, got {}",
                nodes.len()
            )));
        }
        if nodes.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("axis nodes must be finite"));
        }
        let step = (nodes[nodes.len() - 1] - nodes[0]) / (nodes.len() - 1) as f64;
        if step <= 0.0 {
            return Err(Error::domain("axis nodes must be strictly increasing"));
        }
        for w in nodes.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::domain("axis nodes must be strictly increasing"));
            }
            if ((w[1] - w[0]) - step).abs() > 1e-7 * step {
                return Err(Error::domain("axis nodes must be uniformly spaced"));
            }
        }
        Ok(Axis { nodes, step })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> f64 {
        self.nodes[i]
    }

    pub fn min(&self) -> f64 {
        self.nodes[0]
    }

    pub fn max(&self) -> f64 {
        self.nodes[self.nodes.len() - 1]
    }

    /// Index of the node equal to `v` (within a small fraction of the step).
    pub fn locate(&self, v: f64) -> Option<usize> {
        let i = self.nearest(v);
        ((self.nodes[i] - v).abs() <= NODE_TOL * self.step.max(1.0)).then_some(i)
    }

    /// Nearest node, clamped to the axis.
    pub fn nearest(&self, v: f64) -> usize {
        let r = ((v - self.min()) / self.step).round();
        if r <= 0.0 || r.is_nan() {
            0
        } else {
            (r as usize).min(self.len() - 1)
        }
    }

    /// Largest `k` with `node(k) ≤ v` (tolerant of rounding), clamped.
    pub fn floor_index(&self, v: f64) -> usize {
        let r = (v - self.min()) / self.step;
        let k = (r + NODE_TOL).floor();
        if k <= 0.0 || k.is_nan() {
            0
        } else {
            (k as usize).min(self.len() - 1)
        }
    }

    /// Lower bracketing index and the linear weight of the upper node,
    /// clamping outside the axis. Points on a node get weights exactly 0/1.
    pub fn bracket(&self, v: f64) -> (usize, f64) {
        if let Some(i) = self.locate(v) {
            return if i + 1 < self.len() {
                (i, 0.0)
            } else {
                (i - 1, 1.0)
            };
        }
        if v <= self.min() {
            return (0, 0.0);
        }
        if v >= self.max() {
            return (self.len() - 2, 1.0);
        }
        let r = (v - self.min()) / self.step;
        let i = (r.floor() as usize).min(self.len() - 2);
        let w = (v - self.nodes[i]) / self.step;
        (i, w.clamp(0.0, 1.0))
    }

    pub fn same_nodes(&self, other: &Axis) -> bool {
        self.len() == other.len()
            && self
                .nodes
                .iter()
                .zip(&other.nodes)
                .all(|(a, b)| (a - b).abs() <= NODE_TOL * self.step.max(1.0))
    }
}

/// Tensor product of uniform axes, flattened with the last axis fastest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Lattice {
    axes: Vec<Axis>,
    #[serde(skip)]
    strides: Vec<usize>,
    #[serde(skip)]
    size: usize,
}

impl Lattice {
    pub fn new(axes: Vec<Axis>) -> Result<Self> {
        if axes.is_empty() || axes.len() > MAX_GRID_DIM {
            return Err(Error::domain(format!(
                "lattices support 1..={MAX_GRID_DIM} dimensions, got {}",
                axes.len()
            )));
        }
        let mut strides = vec![1; axes.len()];
        for i in (0..axes.len() - 1).rev() {
            strides[i] = strides[i + 1] * axes[i + 1].len();
        }
        let size = axes.iter().map(Axis::len).product();
        Ok(Lattice {
            axes,
            strides,
            size,
        })
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn axis(&self, i: usize) -> &Axis {
        &self.axes[i]
    }

    pub fn stride(&self, i: usize) -> usize {
        self.strides[i]
    }

    /// Position of node `flat` along axis `i`.
    pub fn index_along(&self, flat: usize, i: usize) -> usize {
        (flat / self.strides[i]) % self.axes[i].len()
    }

    pub fn flat(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    pub fn coords(&self, flat: usize, out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate().take(self.dim()) {
            *o = self.axes[i].node(self.index_along(flat, i));
        }
    }

    pub fn coords_vec(&self, flat: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.dim()];
        self.coords(flat, &mut v);
        v
    }

    /// Flat index of the lattice node at `x`, if `x` is a node.
    pub fn locate(&self, x: &[f64]) -> Option<usize> {
        if x.len() != self.dim() {
            return None;
        }
        let mut flat = 0;
        for (i, v) in x.iter().enumerate() {
            flat += self.axes[i].locate(*v)? * self.strides[i];
        }
        Some(flat)
    }

    /// Flat index of the nearest node (clamped to the box).
    pub fn nearest(&self, x: &[f64]) -> usize {
        x.iter()
            .enumerate()
            .map(|(i, v)| self.axes[i].nearest(*v) * self.strides[i])
            .sum()
    }

    /// True when the node lies within `band` nodes of the box boundary.
    pub fn near_boundary(&self, flat: usize, band: usize) -> bool {
        (0..self.dim()).any(|i| {
            let p = self.index_along(flat, i);
            p < band || p + band >= self.axes[i].len()
        })
    }

    pub fn min_step(&self) -> f64 {
        self.axes
            .iter()
            .map(Axis::step)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn same_nodes(&self, other: &Lattice) -> bool {
        self.dim() == other.dim()
            && self
                .axes
                .iter()
                .zip(&other.axes)
                .all(|(a, b)| a.same_nodes(b))
    }

    pub fn cell_volume(&self) -> f64 {
        self.axes.iter().map(Axis::step).product()
    }
}

/// Space–time lattice: time axis, state lattice and an optional lattice for
/// the third argument `y` of `f(t, x, y)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridSpec {
    pub t: Axis,
    pub x: Lattice,
    pub y: Option<Lattice>,
}

impl GridSpec {
    pub fn new(t: Axis, x: Vec<Axis>, y: Option<Vec<Axis>>) -> Result<Self> {
        if t.min() < 0.0 {
            return Err(Error::domain("time axis must start at or after 0"));
        }
        let x = Lattice::new(x)?;
        let y = match y {
            Some(axes) => {
                let y = Lattice::new(axes)?;
                if y.dim() != x.dim() {
                    return Err(Error::domain("y lattice dimension differs from x lattice"));
                }
                Some(y)
            }
            None => None,
        };
        Ok(GridSpec { t, x, y })
    }

    /// `[0, T]` × box, with `y` sharing the `x` lattice.
    pub fn uniform(horizon: f64, nt: usize, x_bounds: &[(f64, f64, usize)]) -> Result<Self> {
        let t = Axis::uniform(0.0, horizon, nt)?;
        let x: Vec<Axis> = x_bounds
            .iter()
            .map(|&(lo, hi, n)| Axis::uniform(lo, hi, n))
            .collect::<Result<_>>()?;
        GridSpec::new(t, x.clone(), Some(x))
    }

    /// Same lattice without the `y` axis.
    pub fn space_time(&self) -> GridSpec {
        GridSpec {
            t: self.t.clone(),
            x: self.x.clone(),
            y: None,
        }
    }

    /// Same lattice with `y` set to the `x` lattice.
    pub fn with_diagonal_y(&self) -> GridSpec {
        GridSpec {
            t: self.t.clone(),
            x: self.x.clone(),
            y: Some(self.x.clone()),
        }
    }

    pub fn dim(&self) -> usize {
        self.x.dim()
    }

    pub fn ny(&self) -> usize {
        self.y.as_ref().map_or(1, Lattice::size)
    }

    pub fn nodes_per_slice(&self) -> usize {
        self.ny() * self.x.size()
    }

    pub fn has_diagonal_y(&self) -> bool {
        self.y.as_ref().is_some_and(|y| y.same_nodes(&self.x))
    }

    /// Checks the time axis spans exactly `[0, T]`.
    pub fn check_horizon(&self, horizon: f64) -> Result<()> {
        if self.t.min().abs() > 1e-12 || (self.t.max() - horizon).abs() > 1e-9 * horizon.max(1.0) {
            return Err(Error::domain(format!(
                "time axis [{}, {}] does not span [0, {horizon}]",
                self.t.min(),
                self.t.max()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_axis_endpoints_are_exact() {
        let a = Axis::uniform(-2.0, 2.0, 201).unwrap();
        assert_eq!(a.min(), -2.0);
        assert_eq!(a.max(), 2.0);
        assert_eq!(a.node(100), 0.0);
        assert_eq!(a.locate(-1.0), Some(50));
        assert_eq!(a.locate(-1.003), None);
    }

    #[test]
    fn axis_rejects_bad_nodes() {
        assert!(Axis::from_nodes(vec![0.0, 1.0]).is_err());
        assert!(Axis::from_nodes(vec![0.0, 1.0, 3.0]).is_err());
        assert!(Axis::from_nodes(vec![0.0, 0.0, 0.0]).is_err());
        assert!(Axis::from_nodes(vec![0.0, 0.5, 1.0]).is_ok());
    }

    #[test]
    fn floor_and_bracket() {
        let a = Axis::uniform(0.0, 1.0, 11).unwrap();
        assert_eq!(a.floor_index(0.3), 3);
        assert_eq!(a.floor_index(0.35), 3);
        assert_eq!(a.floor_index(1.0), 10);
        assert_eq!(a.floor_index(-1.0), 0);
        let (i, w) = a.bracket(0.35);
        assert_eq!(i, 3);
        assert!((w - 0.5).abs() < 1e-12);
        assert_eq!(a.bracket(2.0), (9, 1.0));
    }

    #[test]
    fn lattice_flattening_round_trips() {
        let l = Lattice::new(vec![
            Axis::uniform(0.0, 1.0, 3).unwrap(),
            Axis::uniform(0.0, 2.0, 5).unwrap(),
        ])
        .unwrap();
        assert_eq!(l.size(), 15);
        let f = l.flat(&[2, 3]);
        assert_eq!(l.index_along(f, 0), 2);
        assert_eq!(l.index_along(f, 1), 3);
        assert_eq!(l.coords_vec(f), vec![1.0, 1.5]);
        assert_eq!(l.locate(&[1.0, 1.5]), Some(f));
        assert!(l.near_boundary(f, 1));
        assert!(!l.near_boundary(l.flat(&[1, 2]), 1));
    }

    #[test]
    fn three_dimensional_lattices_are_refused() {
        let a = Axis::uniform(0.0, 1.0, 3).unwrap();
        assert!(Lattice::new(vec![a.clone(), a.clone(), a]).is_err());
    }
}
