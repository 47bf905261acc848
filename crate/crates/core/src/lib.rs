//! Neural projection-Wasserstein two-sample testing.
//!
//! The crate learns a discriminative projection `U` on the Stiefel manifold by
//! alternating exact optimal transport with a manifold proximal-gradient step,
//! fits a Lipschitz-controlled ReLU witness on the projected fitting data, and
//! calibrates a max-type statistic over several candidates against the law of
//! the maximum of independent `|N(0, 1)|` variables.
//!
//! Modules map onto the stages of the procedure:
//!
//! | module | contents |
//! |--------|----------|
//! | [`transport`] | exact discrete W₁, 1-D fast path, projected W₁, grid oracle |
//! | [`stiefel`] | projection matrices, proximal-gradient solver, ℓ0 pruning |
//! | [`witness`] | ReLU network, spectral normalization, training |
//! | [`statistic`] | S_n, Σ̂, backward elimination, T_n, quantiles, p-values |
//! | [`pipeline`] | sample splitting, candidate fitting, multi-split aggregation |
//! | [`simbench`] | simulation models, permutation baselines, power studies |

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod normal;
pub mod pipeline;
pub mod seed;
pub mod simbench;
pub mod statistic;
pub mod stiefel;
pub mod transport;
pub mod witness;

pub use error::{Error, Result};
pub use stiefel::ProjectionMatrix;
pub use transport::TransportPlan;

/// Observations are stored row-wise: an `n × d` matrix holds `n` points of `ℝ^d`.
pub type Sample = nalgebra::DMatrix<f64>;
