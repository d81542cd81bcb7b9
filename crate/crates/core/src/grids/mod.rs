//! Space–time lattices, tabulated functions and finite-difference operators.

mod control;
mod function;
mod lattice;
mod ops;
pub mod stencil;

pub use control::{FeedbackControl, RuleControl, SpikeControl, TabulatedControl};
pub use function::GridFunction;
pub use lattice::{Axis, GridSpec, Lattice, MAX_GRID_DIM};
pub(crate) use ops::jet_at;
pub use ops::{
    apply_generator, diamond, diamond_grid, h_operator, locate_node, restrict_to_diagonal,
    Coefficients, Selector,
};
