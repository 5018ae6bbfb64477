//! Sparse analytical multi-task motion/force control for constrained
//! floating-base mechanical systems.
//!
//! The controller resolves a lexicographic hierarchy of motion and force tasks
//! subject to rigid-contact dynamics without decomposing the full stacked
//! dynamics matrix: the constraint structure is decomposed once per tick into
//! a handful of small orthonormal bases, after which the force hierarchy and
//! the motion hierarchy are solved independently and joint torques are
//! recovered by a projected inverse-dynamics pass (no mass matrix needed).
//!
//! Module map:
//! - [`matdecomp`]: SVD-based rank reveal, bases, pseudoinverses.
//! - [`rbd`]: floating-base rigid-body dynamics (planar and spatial bases).
//! - [`constraints`]: supporting/controlled constraint sets and rank checks.
//! - [`lexls`]: generic lexicographic least squares.
//! - [`sparse_solver`]: the sparse decomposition and per-tick controller.
//! - [`dense_ref`]: stacked-dynamics reference solver and benchmark.
//! - [`tasks`]: trajectories, PD laws and task-level construction.
//! - [`sim`]: penalty-contact simulator and scripted scenarios.
//! - [`instances`]: seeded random problem generator shared by tests and tools.

pub mod constraints;
pub mod dense_ref;
pub mod error;
pub mod instances;
pub mod lexls;
pub mod matdecomp;
pub mod rbd;
pub mod sim;
pub mod sparse_solver;
pub mod tasks;

pub use error::{Error, Result};
