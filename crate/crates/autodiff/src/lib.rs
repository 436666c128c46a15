//! A small dense-array engine with reverse-mode automatic differentiation.
//!
//! Values are row-major `f64` arrays. A [`Graph`] records every operation as
//! it is applied to [`Var`] handles; [`Graph::backward`] then walks the
//! record in reverse and accumulates gradients on every node that requires
//! one. Node ids are assigned in creation order, so the record is already a
//! topological order and the graph cannot contain cycles.
//!
//! ```
//! use mammoclip_autodiff::{Array, Graph};
//!
//! let g = Graph::new();
//! let x = g.param(Array::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
//! let y = x.mul(x).unwrap().sum().unwrap();
//! g.backward(y).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
//! ```
//!
//! Broadcasting is deliberately absent apart from the bias add inside
//! [`Var::dense`] / [`Var::conv2d`] and scaling by a scalar node
//! ([`Var::scale_by`]); everything else requires matching shapes.

mod array;
mod error;
pub mod gradcheck;
mod graph;
mod kernels;
mod ops;

pub use array::Array;
pub use error::AutodiffError;
pub use graph::{Graph, Var};

pub type Result<T> = std::result::Result<T, AutodiffError>;
