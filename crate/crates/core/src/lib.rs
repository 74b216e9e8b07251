//! Deep BSDE solver for coupled forward-backward stochastic differential
//! equations.
//!
//! The crate is generic over the floating-point type through [`Scalar`]; the
//! `*64` aliases below fix it to `f64`, which is what the command-line tool
//! and the benchmark presets use.

pub mod audit;
pub mod autodiff;
pub mod error;
pub mod experiments;
pub mod networks;
pub mod oracle;
pub mod problems;
pub mod scalar;
pub mod scheme;
pub mod tensor;
pub mod trainer;

pub use autodiff::{finite_diff_check, Gradients, Primitive, Tape, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{gaussian_batch, seeded_rng, SimRng, Tensor};

pub type Tensor64 = Tensor<f64>;
pub type Tape64 = Tape<f64>;
