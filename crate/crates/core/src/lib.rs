//! Mutual-information-augmented Monte-Carlo objectives for latent-variable
//! density models.
//!
//! The crate is organised bottom-up:
//!
//! - [`diffcore`]: a small define-by-run reverse-mode differentiation tape
//!   over dense `f64` tensors.
//! - [`stochastics`]: seeded counter-based random streams, diagonal Gaussian
//!   and categorical latent distributions.
//! - [`models`]: the MLP encoder/decoder pair and its checkpoint format.
//! - [`objectives`]: log-weight batches, the multi-sample estimators
//!   (`Ŝ`, `Ŝ_α`, `Û`), the KL / Rényi / power objectives and the gradient
//!   surrogates (plain reparameterization, STL, DReG, REINFORCE, VIMCO).
//! - [`oracle`]: exact enumeration over tiny discrete models, used as ground
//!   truth by the test suite and the `audit` command.
//! - [`trainer`]: Adam (with `β₁ = 0` by default), the synthetic dataset and
//!   the training loop.
//! - [`cli`]: config files, metrics CSV, sweeps, Pareto frontiers and the
//!   property audit behind the `micmco` binary.

pub mod cli;
pub mod diffcore;
pub mod models;
pub mod objectives;
pub mod oracle;
pub mod stochastics;
pub mod trainer;

mod error;

pub use error::{Error, Result};
