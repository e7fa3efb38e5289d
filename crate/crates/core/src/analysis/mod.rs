//! Steady-state error, convergence bounds, stability and step-size analysis.
//!
//! [`iid`] covers modes drawn independently from a fixed distribution, where
//! the moments reduce to `(μᵏ, ℚᵏ) = (E ξᵏ, E ξᵏξᵏᵀ)`. [`markov`] covers the
//! general chain through the per-mode moments of [`crate::mjls`].
//! [`spectral`] holds the stability verdicts, first-order step-size
//! expansions, critical step size and sweeps.

pub mod iid;
pub mod markov;
pub mod spectral;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::chain;
use crate::error::Result;
use crate::mjls::JumpLinearSystem;

pub use iid::{
    build_iid_model, iid_closed_form, iid_steady_state, iid_trajectory, iid_trajectory_with_limits,
    IidMomentModel, IidRun,
};
pub use markov::{
    build_markov_steady_state, markov_trajectory_with_limits, stationary_start, BoundsReport,
    MarkovRun,
};
pub use spectral::{
    alpha_sweep, critical_alpha, critical_alpha_auto, general_eigen_perturbation, lambda_max_re,
    loglog_slope, perturbation_estimate, stability_report, StabilityReport, SweepRow,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnalysisMode {
    Iid,
    Markov,
}

/// Limits of the moment recursion.
///
/// In the Markov case `q` and `big_q` hold one block per mode. In the IID case
/// they hold the single blocks `μ∞ = 0` and `ℚ∞`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteadyState {
    pub q: Vec<DVector<f64>>,
    pub big_q: Vec<DMatrix<f64>>,
    /// `lim E ξᵏ`.
    pub mean: DVector<f64>,
    /// `lim E ξᵏξᵏᵀ`.
    pub second_moment: DMatrix<f64>,
    /// `lim E‖ξᵏ‖²`.
    pub delta_inf: f64,
    /// Relative residual of the defining fixed-point equation.
    pub residual: f64,
    /// Whether the offsets average to zero, so `delta_inf` is an error around the fixed point.
    pub centered: bool,
}

/// Mode distribution used by the IID analysis: the common row of a rank-one
/// transition matrix, otherwise the stationary distribution.
pub fn iid_distribution(sys: &JumpLinearSystem) -> Result<DVector<f64>> {
    let p = sys.chain().transition();
    let first = p.row(0);
    let rank_one = (1..p.nrows()).all(|i| (p.row(i) - first).amax() <= chain::STOCHASTIC_TOL);
    if rank_one {
        Ok(first.transpose())
    } else {
        Ok(chain::stationary_distribution(sys.chain())?.p_inf)
    }
}

pub(crate) fn offset_scale(sys: &JumpLinearSystem) -> f64 {
    sys.b().iter().map(|b| b.norm()).fold(1.0, f64::max)
}

pub(crate) fn relative_residual(residual: &DVector<f64>, reference: &DVector<f64>) -> f64 {
    residual.norm() / reference.norm().max(f64::MIN_POSITIVE)
}
