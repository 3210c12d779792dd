//! Differentiable primitives recorded on a [`crate::Tape`].

pub mod conv;
pub mod elementwise;
pub mod norm;
pub mod reduce;
