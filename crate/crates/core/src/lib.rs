//! Sequential recommendation with a Schrödinger-bridge diffusion between
//! the encoded user state and the next-item embedding.
//!
//! The crate is `no_std` and only needs an allocator. File formats, the
//! command line and parallel evaluation live in the `bridgerec` crate.
#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;

pub mod bridge;
pub mod checkpoint;
pub mod checks;
pub mod cluster;
pub mod data;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod trainer;

/// Floating-point type used everywhere.
pub type Scalar = f64;
