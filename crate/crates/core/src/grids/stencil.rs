//! Second-order finite differences on uniform lattices.
//!
//! Central differences in the interior and second-order one-sided stencils
//! on the truncation boundary. Every stencil here is exact on quadratics.

use super::lattice::{Lattice, MAX_GRID_DIM};

/// Strided read-only view of one component of a slice.
#[derive(Clone, Copy)]
pub struct SliceView<'a> {
    data: &'a [f64],
    arity: usize,
    comp: usize,
}

impl<'a> SliceView<'a> {
    pub fn new(data: &'a [f64], arity: usize, comp: usize) -> Self {
        SliceView { data, arity, comp }
    }

    pub fn scalar(data: &'a [f64]) -> Self {
        SliceView {
            data,
            arity: 1,
            comp: 0,
        }
    }

    #[inline]
    pub fn get(&self, node: usize) -> f64 {
        self.data[node * self.arity + self.comp]
    }
}

#[derive(Clone, Copy)]
struct Weights {
    taps: [(isize, f64); 4],
    len: usize,
}

impl Weights {
    fn iter(&self) -> impl Iterator<Item = &(isize, f64)> {
        self.taps[..self.len].iter()
    }
}

fn first_weights(pos: usize, len: usize, h: f64) -> Weights {
    let c = 1.0 / (2.0 * h);
    let taps = if pos == 0 {
        [(0, -3.0 * c), (1, 4.0 * c), (2, -c), (0, 0.0)]
    } else if pos + 1 == len {
        [(0, 3.0 * c), (-1, -4.0 * c), (-2, c), (0, 0.0)]
    } else {
        [(-1, -c), (1, c), (0, 0.0), (0, 0.0)]
    };
    let n = if pos == 0 || pos + 1 == len { 3 } else { 2 };
    Weights { taps, len: n }
}

fn second_weights(pos: usize, len: usize, h: f64) -> Weights {
    let c = 1.0 / (h * h);
    if pos > 0 && pos + 1 < len {
        return Weights {
            taps: [(-1, c), (0, -2.0 * c), (1, c), (0, 0.0)],
            len: 3,
        };
    }
    let dir: isize = if pos == 0 { 1 } else { -1 };
    if len >= 4 {
        Weights {
            taps: [
                (0, 2.0 * c),
                (dir, -5.0 * c),
                (2 * dir, 4.0 * c),
                (3 * dir, -c),
            ],
            len: 4,
        }
    } else {
        Weights {
            taps: [(0, c), (dir, -2.0 * c), (2 * dir, c), (0, 0.0)],
            len: 3,
        }
    }
}

#[inline]
fn shift(node: usize, offset: isize, stride: usize) -> usize {
    (node as isize + offset * stride as isize) as usize
}

/// `∂/∂x_axis` at `node`.
pub fn d1(v: SliceView<'_>, lat: &Lattice, node: usize, axis: usize) -> f64 {
    let a = lat.axis(axis);
    let s = lat.stride(axis);
    first_weights(lat.index_along(node, axis), a.len(), a.step())
        .iter()
        .map(|&(o, w)| w * v.get(shift(node, o, s)))
        .sum()
}

/// `∂²/∂x_axis²` at `node`.
pub fn d2(v: SliceView<'_>, lat: &Lattice, node: usize, axis: usize) -> f64 {
    let a = lat.axis(axis);
    let s = lat.stride(axis);
    second_weights(lat.index_along(node, axis), a.len(), a.step())
        .iter()
        .map(|&(o, w)| w * v.get(shift(node, o, s)))
        .sum()
}

/// `∂²/∂x_i∂x_j` for `i ≠ j`, composed from first-derivative stencils.
pub fn d_mixed(v: SliceView<'_>, lat: &Lattice, node: usize, i: usize, j: usize) -> f64 {
    let a = lat.axis(i);
    let s = lat.stride(i);
    first_weights(lat.index_along(node, i), a.len(), a.step())
        .iter()
        .map(|&(o, w)| w * d1(v, lat, shift(node, o, s), j))
        .sum()
}

/// Local derivative data of a function at one node: time derivative,
/// gradient and Hessian in `x`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Jet {
    pub time: f64,
    pub grad: [f64; MAX_GRID_DIM],
    pub hess: [[f64; MAX_GRID_DIM]; MAX_GRID_DIM],
    pub dim: usize,
}

impl Jet {
    /// Spatial derivatives of `v` at `node`; the time part is zero.
    pub fn spatial(v: SliceView<'_>, lat: &Lattice, node: usize) -> Jet {
        let n = lat.dim();
        let mut jet = Jet {
            dim: n,
            ..Jet::default()
        };
        for i in 0..n {
            jet.grad[i] = d1(v, lat, node, i);
            jet.hess[i][i] = d2(v, lat, node, i);
            for j in 0..i {
                let m = d_mixed(v, lat, node, i, j);
                jet.hess[i][j] = m;
                jet.hess[j][i] = m;
            }
        }
        jet
    }

    /// Forward time difference between the slices `cur` (at `t_k`) and `next`
    /// (at `t_{k+1}`), spatial derivatives on `cur`.
    pub fn forward(
        cur: SliceView<'_>,
        next: SliceView<'_>,
        lat: &Lattice,
        node: usize,
        dt: f64,
    ) -> Jet {
        let mut jet = Jet::spatial(cur, lat, node);
        jet.time = (next.get(node) - cur.get(node)) / dt;
        jet
    }

    /// Spatial part of the generator: `μ·∇h + ½ Σ C_ij ∂_ij h`.
    #[inline]
    pub fn spatial_generator(&self, drift: &[f64], cov: &[f64]) -> f64 {
        let n = self.dim;
        let mut acc = 0.0;
        for i in 0..n {
            acc += drift[i] * self.grad[i];
            for j in 0..n {
                acc += 0.5 * cov[i * n + j] * self.hess[i][j];
            }
        }
        acc
    }

    /// Full generator `∂_t h + μ·∇h + ½ Σ C_ij ∂_ij h`.
    #[inline]
    pub fn generator(&self, drift: &[f64], cov: &[f64]) -> f64 {
        self.time + self.spatial_generator(drift, cov)
    }

    pub fn scaled(mut self, k: f64) -> Jet {
        self.time *= k;
        for i in 0..self.dim {
            self.grad[i] *= k;
            for j in 0..self.dim {
                self.hess[i][j] *= k;
            }
        }
        self
    }

    pub fn plus(mut self, other: &Jet) -> Jet {
        self.time += other.time;
        for i in 0..self.dim {
            self.grad[i] += other.grad[i];
            for j in 0..self.dim {
                self.hess[i][j] += other.hess[i][j];
            }
        }
        self
    }
}
