//! Density-weighted residual alignment for hybrid distillation.

pub mod cache;
pub mod density;
pub mod diagnostics;
pub mod fisher;
pub mod harness;
pub mod losses;
pub mod model;
