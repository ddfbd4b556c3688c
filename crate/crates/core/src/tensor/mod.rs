//! Minimal reverse-mode autodiff over `ndarray` f64 tensors.
//!
//! A [`Tape`] owns a flat arena of nodes; every operation appends a node and
//! returns a [`Var`] handle. `backward` walks the arena in reverse, pushing
//! adjoints to parents. All arithmetic is f64 so finite-difference gradient
//! checks are meaningful at 1e-4 relative tolerance.

mod conv;
mod tape;
mod warp;

pub use tape::{numeric_grad, Grads, Tape, Var};

pub type Arr = ndarray::ArrayD<f64>;
