//! Mean-square analysis of linear stochastic approximation driven by Markov
//! noise, with temporal-difference learning as the main application.
//!
//! The iteration `ξᵏ⁺¹ = (I + αA(zᵏ)) ξᵏ + α b(zᵏ)` is a Markov jump linear
//! system. Its first and second moments follow an exact deterministic LTI
//! recursion, which this crate builds and analyses: steady-state error,
//! convergence rate, small step-size expansions and stability thresholds.
//! A Monte Carlo simulator is included for cross-checking.

pub mod analysis;
pub mod chain;
pub mod error;
pub mod linalg;
pub mod lti;
pub mod mc;
pub mod mjls;
pub mod tdmodel;

pub use chain::MarkovChain;
pub use error::{Error, Result};
pub use mjls::{JumpLinearSystem, MomentState};
