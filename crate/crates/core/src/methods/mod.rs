//! The thirteen zero-shot methods.

pub mod compat;
pub mod nonlinear;
pub mod attr;
pub mod hybrid;
pub mod generative;
