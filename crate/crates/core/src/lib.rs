//! Numerical laboratory for the linearized Monge-Ampere operator.
//!
//! The crate solves `det D2u = f` on convex planar and 3D domains, builds the
//! divergence-form operator from the Hessian cofactor field, computes discrete
//! Green's functions and variational capacities, and ships verification suites
//! for the quantitative bounds and integral identities those objects satisfy.

pub mod capacity;
pub mod error;
pub mod expr;
pub mod fit;
pub mod geom;
pub mod green;
pub mod harness;
pub mod identities;
pub mod io;
pub mod sections;
pub mod solver;
pub mod sparse;

pub use error::{Error, Result};
