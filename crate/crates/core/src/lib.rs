// Validation is written as `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod consistency;
pub mod field;
pub mod geometry;
pub mod imageio;
pub mod losses;
pub mod metrics;
pub mod refine;
pub mod rng;
pub mod scene;
