//! Anticoncentration of Gaussian order statistics.
//!
//! The crate samples correlated unit-variance Gaussian vectors, computes the
//! k-th largest component (`k_max`) and its randomized top-k relative
//! (`k_tilde_max`), estimates interval-hitting probabilities by Monte Carlo and
//! compares them with the dimension-free bound `2 ε k (1 + E‖X‖∞)`. The
//! [`testing`] module applies the same machinery to a bootstrap step-down
//! procedure controlling the k-familywise error rate.
//!
//! Parallel work is split into fixed-size blocks, each driven by its own
//! deterministically derived ChaCha substream, so results do not depend on
//! the number of worker threads. Disable the default `parallel` feature to
//! build a purely sequential crate.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod anticonc;
pub mod config;
pub mod error;
pub mod exec;
pub mod gauss;
pub mod isotonic;
pub mod normal;
pub mod order_stats;
pub mod report;
pub mod testing;
pub mod verify;

pub use error::{Error, Result};
pub use gauss::{build_covariance, CovarianceModel, Family, GaussianSampler, SampleBatch};
pub use order_stats::{k_max, k_tilde_max, KTildeMaxDraw, TopKSelection};

/// A Monte Carlo estimate together with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

impl Estimate {
    pub fn new(value: f64, se: f64) -> Self {
        Estimate { value, se }
    }

    /// Binomial proportion `hits / n` with SE `sqrt(p(1-p)/n)`.
    pub fn proportion(hits: u64, n: u64) -> Self {
        let p = hits as f64 / n as f64;
        Estimate::new(p, (p * (1.0 - p) / n as f64).sqrt())
    }

    /// `|value - target| <= z * se`
    pub fn within(&self, target: f64, z: f64) -> bool {
        (self.value - target).abs() <= z * self.se
    }
}
