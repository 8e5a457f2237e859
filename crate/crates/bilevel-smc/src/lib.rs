//! Bayesian bi-level variable selection for binary-response regression.
//!
//! Groups of predictors and individual predictors within selected groups are
//! selected jointly: a variable can be active only when its group is. The
//! posterior over the binary indicators is explored by a tempering waste-free
//! sequential Monte Carlo sampler whose intractable marginal likelihood is
//! evaluated either by a Laplace approximation at the MAP (`la`) or by the
//! much cheaper approximate Laplace approximation expanded at zero (`ala`),
//! which after a one-time precompute costs O(1) in the sample size.
//!
//! Start from the runnable examples:
//!
//! ```bash
//! cargo run --release --example run_sampler
//! cargo run --release --example oracle_check
//! cargo run --release --example la_vs_ala
//! cargo run --release --example marginal_likelihood
//! cargo run --release --example simulate_dataset
//! ```
//!
//! or use the `bilevel-smc` binary (`simulate`, `run`, `oracle`, `bench`
//! subcommands) for file-based workflows.

pub mod datagen;
pub mod error;
pub mod link;
pub mod marglik;
pub mod model;
pub mod oracle;
pub mod proposal;
pub mod smc;
#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use link::Link;
pub use marglik::{AlaCache, MarglikEvaluator, MarglikMethod};
pub use model::{CoefVector, Dataset, PriorConfig, Theta};
pub use smc::{SmcConfig, SmcResult};
