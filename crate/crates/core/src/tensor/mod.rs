//! Dense arrays, reverse-mode differentiation and the small amount of dense
//! linear algebra the GP needs.

mod array;
mod graph;
pub mod kernels;
mod linalg;

pub use array::Array;
pub use graph::{Graph, NodeId};
pub use linalg::{solve_spd, Cholesky};
