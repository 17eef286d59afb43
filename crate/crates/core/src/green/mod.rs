//! Linearized operator assembly, Green's functions, and bound verification.

pub mod operator;
pub mod verify;

pub use operator::*;
pub use verify::*;
