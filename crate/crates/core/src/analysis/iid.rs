//! Moments under IID modes.
//!
//! With `zᵏ ~ p` independent of the past and `Σ pᵢ bᵢ = 0`:
//!
//! ```text
//! μᵏ⁺¹      = H11 μᵏ
//! vec ℚᵏ⁺¹  = H21 μᵏ + H22 vec ℚᵏ + α² Σ pᵢ (bᵢ ⊗ bᵢ)
//! H11 = I + αĀ
//! H21 = α² Σ pᵢ (Aᵢ ⊗ bᵢ + bᵢ ⊗ Aᵢ)
//! H22 = I + α (I ⊗ Ā + Ā ⊗ I) + α² Σ pᵢ (Aᵢ ⊗ Aᵢ)
//! ```

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::markov::{fit_bounds, BoundsReport};
use super::{offset_scale, relative_residual, SteadyState};
use crate::error::{Error, Result};
use crate::linalg;
use crate::lti;
use crate::mjls::JumpLinearSystem;
use crate::tdmodel::CENTER_TOL;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IidMomentModel {
    pub h11: DMatrix<f64>,
    pub h21: DMatrix<f64>,
    pub h22: DMatrix<f64>,
    /// `α² Σ pᵢ (bᵢ ⊗ bᵢ)`.
    pub input_q: DVector<f64>,
    pub alpha: f64,
    pub p: DVector<f64>,
}

impl IidMomentModel {
    pub fn dim(&self) -> usize {
        self.h11.nrows()
    }

    pub fn step(&self, mu: &DVector<f64>, q: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let d = self.dim();
        let vq = &self.h21 * mu + &self.h22 * linalg::vec_col(q) + &self.input_q;
        let mut next_q = linalg::unvec(vq.as_slice(), d, d);
        linalg::symmetrize(&mut next_q);
        (&self.h11 * mu, next_q)
    }

    /// `[[H11, 0], [H21, H22]]`.
    pub fn h_full(&self) -> DMatrix<f64> {
        let d = self.dim();
        let dd = d * d;
        let mut h = DMatrix::zeros(d + dd, d + dd);
        h.view_mut((0, 0), (d, d)).copy_from(&self.h11);
        h.view_mut((d, 0), (dd, d)).copy_from(&self.h21);
        h.view_mut((d, d), (dd, dd)).copy_from(&self.h22);
        h
    }
}

/// Builds the IID blocks for mode distribution `p`. The offsets must be
/// centered under `p`; otherwise the mean recursion has an input and the
/// caller should shift coordinates with `center_offsets` first.
pub fn build_iid_model(sys: &JumpLinearSystem, p: &DVector<f64>) -> Result<IidMomentModel> {
    if p.len() != sys.modes() || !linalg::is_probability_vector(p, crate::chain::STOCHASTIC_TOL) {
        return Err(Error::invalid(
            "IID mode distribution must be a probability vector over the modes",
        ));
    }
    let residual = sys.weighted_b(p).norm();
    if residual > CENTER_TOL * offset_scale(sys) {
        return Err(Error::NotCentered { residual });
    }
    Ok(iid_blocks(sys, p))
}

/// Block construction without the centering check.
pub(crate) fn iid_blocks(sys: &JumpLinearSystem, p: &DVector<f64>) -> IidMomentModel {
    let d = sys.dim();
    let alpha = sys.alpha();
    let eye = DMatrix::identity(d, d);
    let abar = sys.weighted_a(p);
    let mut h21 = DMatrix::zeros(d * d, d);
    let mut aa = DMatrix::zeros(d * d, d * d);
    let mut bb = DVector::zeros(d * d);
    for ((a, b), pi) in sys.a().iter().zip(sys.b()).zip(p.iter()) {
        if *pi == 0.0 {
            continue;
        }
        h21 += (linalg::kron_mat_vec(a, b) + linalg::kron_vec_mat(b, a)) * *pi;
        aa += linalg::kron(a, a) * *pi;
        bb += linalg::kron_vec(b, b) * *pi;
    }
    let h22 = DMatrix::identity(d * d, d * d)
        + (linalg::kron(&eye, &abar) + linalg::kron(&abar, &eye)) * alpha
        + aa * (alpha * alpha);
    IidMomentModel {
        h11: &eye + abar * alpha,
        h21: h21 * (alpha * alpha),
        h22,
        input_q: bb * (alpha * alpha),
        alpha,
        p: p.clone(),
    }
}

/// `(μᵗ, ℚᵗ)` for `t = 0..=k` by forward iteration.
pub fn iid_trajectory(
    model: &IidMomentModel,
    mu0: &DVector<f64>,
    q0: &DMatrix<f64>,
    k: usize,
) -> Result<Vec<(DVector<f64>, DMatrix<f64>)>> {
    check_initial(model, mu0, q0)?;
    let mut out = Vec::with_capacity(k + 1);
    out.push((mu0.clone(), q0.clone()));
    for t in 0..k {
        let next = model.step(&out[t].0, &out[t].1);
        out.push(next);
    }
    Ok(out)
}

/// Closed form around the limit:
///
/// ```text
/// μᵏ     = H11ᵏ μ⁰
/// vec ℚᵏ = vec ℚ∞ + H22ᵏ (vec ℚ⁰ − vec ℚ∞) + Σₜ H22ᵏ⁻¹⁻ᵗ H21 H11ᵗ μ⁰
/// ```
pub fn iid_closed_form(
    model: &IidMomentModel,
    mu0: &DVector<f64>,
    q0: &DMatrix<f64>,
    k: usize,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_initial(model, mu0, q0)?;
    let limit = limit_vec(model)?;
    let d = model.dim();
    let mu_k = lti::matrix_power(&model.h11, k) * mu0;
    let mut vq = &limit + lti::matrix_power(&model.h22, k) * (linalg::vec_col(q0) - &limit);
    // Σₜ H22ᵏ⁻¹⁻ᵗ H21 μᵗ, accumulated by Horner's rule.
    let mut acc = DVector::zeros(d * d);
    let mut mu = mu0.clone();
    for _ in 0..k {
        acc = &model.h22 * acc + &model.h21 * &mu;
        mu = &model.h11 * mu;
    }
    vq += acc;
    let mut q = linalg::unvec(vq.as_slice(), d, d);
    linalg::symmetrize(&mut q);
    Ok((mu_k, q))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IidRun {
    pub trajectory: Vec<(DVector<f64>, DMatrix<f64>)>,
    /// `E‖ξᵏ‖² = trace ℚᵏ`.
    pub mse: Vec<f64>,
    pub steady: SteadyState,
    pub bounds: BoundsReport,
}

/// Forward trajectory with its limit and the envelope at rate `σ(H) + ε`.
pub fn iid_trajectory_with_limits(
    model: &IidMomentModel,
    mu0: &DVector<f64>,
    q0: &DMatrix<f64>,
    k: usize,
) -> Result<IidRun> {
    let steady = iid_steady_state(model)?;
    let trajectory = iid_trajectory(model, mu0, q0, k)?;
    let mse: Vec<f64> = trajectory.iter().map(|(_, q)| q.trace()).collect();
    let sigma_h = lti::spectral_radius(&model.h_full())?;
    let bounds = fit_bounds(&mse, steady.delta_inf, sigma_h, 0.0);
    Ok(IidRun {
        trajectory,
        mse,
        steady,
        bounds,
    })
}

/// `μ∞ = 0` and `vec ℚ∞ = (I − H22)⁻¹ α² Σ pᵢ (bᵢ ⊗ bᵢ)`, with `δ∞ = trace ℚ∞`.
pub fn iid_steady_state(model: &IidMomentModel) -> Result<SteadyState> {
    let d = model.dim();
    let limit = limit_vec(model)?;
    let fixed = &model.h22 * &limit + &model.input_q;
    let residual = relative_residual(&(&fixed - &limit), &limit);
    let mut q = linalg::unvec(limit.as_slice(), d, d);
    linalg::symmetrize(&mut q);
    Ok(SteadyState {
        q: vec![DVector::zeros(d)],
        big_q: vec![q.clone()],
        mean: DVector::zeros(d),
        delta_inf: q.trace(),
        second_moment: q,
        residual,
        centered: true,
    })
}

fn limit_vec(model: &IidMomentModel) -> Result<DVector<f64>> {
    let sigma = lti::spectral_radius(&model.h22)?.spectral_radius;
    if !lti::is_schur_stable(sigma) {
        return Err(Error::Unstable {
            what: "H22".into(),
            spectral_radius: sigma,
        });
    }
    let n = model.h22.nrows();
    let lhs = DMatrix::identity(n, n) - &model.h22;
    linalg::solve(&lhs, &model.input_q, "I - H22")
}

fn check_initial(model: &IidMomentModel, mu0: &DVector<f64>, q0: &DMatrix<f64>) -> Result<()> {
    let d = model.dim();
    if mu0.len() != d || q0.shape() != (d, d) {
        return Err(Error::invalid(format!(
            "initial moments must have dimension {d}"
        )));
    }
    Ok(())
}
