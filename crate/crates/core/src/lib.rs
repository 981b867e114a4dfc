//! Imputation of missing tabular data by growing it with an attention-driven
//! cellular automaton, plus the classical baselines (column mean, k-nearest
//! neighbors, chained-equation ridge) and the benchmark protocol used to
//! compare them.
//!
//! The pipeline: load a CSV ([`data::load_csv`]), derive the observation mask,
//! optionally knock out cells ([`data::ampute_mcar`]), standardize from the
//! observed cells, zero-fill, train the growth model ([`model::train`]) and
//! splice the grown values into the missing positions ([`model::impute`]).
//! [`eval::run_benchmark`] drives the whole grid of datasets × methods ×
//! missing rates × repeats and reports RMSE at the missing positions together
//! with downstream prediction scores.
//!
//! All numeric code is generic over the scalar type through [`Scalar`]; the
//! CLI, file formats and benchmarks are pinned to [`Real`] (`f64`), which is
//! what the gradient checks assume.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

// Training thrashes multi-megabyte attention buffers; the system allocator
// returns them to the OS on every free, and the page faults end up costing
// more than the matmuls. A caching allocator keeps the buffers warm.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

pub mod autodiff;
pub mod baselines;
pub mod data;
pub mod eval;
pub mod math;
pub mod matrix;
pub mod model;
pub mod synth;

/// Floating-point scalar the numeric core is generic over (`f32` or `f64`).
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Send + Sync + 'static
{
}

impl<T> Scalar for T where
    T: Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Send + Sync + 'static
{
}

/// Default precision. Gradient verification at the 1e-4 tolerance is only
/// meaningful in 64-bit, so everything user-facing runs at this type.
pub type Real = f64;

/// Dense matrix at the default precision.
pub type Mat = matrix::Matrix<Real>;

