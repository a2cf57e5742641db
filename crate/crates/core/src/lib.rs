//! One-run privacy auditing: game engines, exact efficacy oracles, likelihood-based
//! guessers and a Dirac-canary DP-SGD simulator.
//!
//! Numerical routines are generic over [`Real`] (`f32` or `f64`); the aliases below fix
//! the scalar to `f64`, which the engines and experiments use.

pub mod audit;
pub mod dpsgd;
pub mod efficacy;
pub mod error;
pub mod experiments;
pub mod guessers;
pub mod loss;
pub mod mechanisms;
pub mod num;
pub mod stats;

pub use audit::{AdaptiveGuesser, Bit, GuessVector, Guesser, PairVector, SecretBits};
pub use error::{Error, Result};
pub use mechanisms::{Mechanism, Output};
pub use num::{ExtendedReal, Real};
pub use stats::AuditCounts;

/// Extended real over `f64`.
pub type Ext = ExtendedReal<f64>;
