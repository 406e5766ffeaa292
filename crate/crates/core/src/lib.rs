//! Structured low-rank k-space interpolation as a deep equilibrium model.

// `!(a > b)` deliberately rejects NaN in validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checks;
pub mod conv;
pub mod deq;
pub mod error;
pub mod fft;
pub mod fixed_point;
pub mod grid;
pub mod hankel;
pub mod io;
pub mod mask;
pub mod metrics;
pub mod networks;
pub mod power;
pub mod report;
pub mod rng;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use grid::{Dims, Grid, ImageGrid, KSpaceGrid, RealGrid};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/data.md")]
    struct Data;
    #[doc = include_str!("../../../book/src/hankel.md")]
    struct Hankel;
    #[doc = include_str!("../../../book/src/fixed-point.md")]
    struct FixedPoint;
    #[doc = include_str!("../../../book/src/gradients.md")]
    struct Gradients;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
