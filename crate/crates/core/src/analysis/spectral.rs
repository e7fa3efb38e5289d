//! Stability verdicts, small step-size expansions, critical step size and sweeps.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{iid, iid_distribution, markov, AnalysisMode};
use crate::chain;
use crate::error::{Error, Result};
use crate::linalg::{self, Complex64};
use crate::lti::{self, RateReport};
use crate::mjls::{self, AugmentedLti, JumpLinearSystem};

/// Above this state dimension the spectrum of the full block-triangular
/// matrix is assembled from its diagonal blocks instead of computed directly.
const FULL_SPECTRUM_LIMIT: usize = 600;

/// Eigenvalues closer than this (relative) to the target count toward its
/// multiplicity in [`general_eigen_perturbation`].
const SIMPLE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub mode: AnalysisMode,
    pub sigma_h11: RateReport,
    pub sigma_h22: RateReport,
    pub sigma_h: RateReport,
    /// `σ(H22) < 1`, i.e. mean-square stable.
    pub stable: bool,
    /// `σ(H22)` within tolerance of one.
    pub marginal: bool,
    /// Eigenvalue of `Ā` with the largest real part; absent without a
    /// stationary distribution.
    pub lambda_max_re_abar: Option<Complex64>,
    /// `1 + Re λ · α`.
    pub predicted_sigma_h11: Option<f64>,
    /// `1 + 2 Re λ · α`.
    pub predicted_sigma_h22: Option<f64>,
    /// The dominant eigenvalue of `I⊗Ā + Ā⊗I` is semisimple, as the
    /// first-order expansion assumes.
    pub expansion_hypothesis_holds: bool,
}

/// Spectral radii of the moment blocks and the stability verdict.
pub fn stability_report(sys: &JumpLinearSystem, mode: AnalysisMode) -> Result<StabilityReport> {
    let (sigma_h11, sigma_h22, sigma_h) = match mode {
        AnalysisMode::Markov => {
            let aug = mjls::build_augmented_lti(sys)?;
            (
                lti::spectral_radius(&aug.h11)?,
                lti::spectral_radius(&aug.h22)?,
                full_rate_markov(&aug)?,
            )
        }
        AnalysisMode::Iid => {
            let p = iid_distribution(sys)?;
            let model = iid::iid_blocks(sys, &p);
            (
                lti::spectral_radius(&model.h11)?,
                lti::spectral_radius(&model.h22)?,
                lti::spectral_radius(&model.h_full())?,
            )
        }
    };
    let s22 = sigma_h22.spectral_radius;
    let p_bar = mean_distribution(sys, mode).ok();
    let (lambda, hypothesis) = match &p_bar {
        Some(p) => {
            let abar = sys.weighted_a(p);
            let lambda = lambda_max_re(&abar)?;
            (Some(lambda), sum_operator_semisimple(&abar)?)
        }
        None => (None, false),
    };
    let alpha = sys.alpha();
    Ok(StabilityReport {
        mode,
        sigma_h11,
        sigma_h22,
        sigma_h,
        stable: lti::is_schur_stable(s22),
        marginal: (s22 - 1.0).abs() <= lti::MARGINAL_TOL,
        lambda_max_re_abar: lambda,
        predicted_sigma_h11: lambda.map(|l| 1.0 + l.re * alpha),
        predicted_sigma_h22: lambda.map(|l| 1.0 + 2.0 * l.re * alpha),
        expansion_hypothesis_holds: hypothesis,
    })
}

/// First-order predictions `(1 + Re λ α, 1 + 2 Re λ α)` for `σ(H11)` and
/// `σ(H22)`, where `λ` is the eigenvalue of `Ā = Σ p∞ᵢ Aᵢ` with the largest real part.
pub fn perturbation_estimate(sys: &JumpLinearSystem, mode: AnalysisMode) -> Result<(f64, f64)> {
    let p = mean_distribution(sys, mode)?;
    let lambda = lambda_max_re(&sys.weighted_a(&p))?;
    let alpha = sys.alpha();
    Ok((1.0 + lambda.re * alpha, 1.0 + 2.0 * lambda.re * alpha))
}

fn mean_distribution(sys: &JumpLinearSystem, mode: AnalysisMode) -> Result<DVector<f64>> {
    match mode {
        AnalysisMode::Iid => iid_distribution(sys),
        AnalysisMode::Markov => Ok(chain::stationary_distribution(sys.chain())?.p_inf),
    }
}

/// Eigenvalue with the largest real part; ties go to the larger modulus, then
/// to the nonnegative imaginary part.
pub fn lambda_max_re(m: &DMatrix<f64>) -> Result<Complex64> {
    let eigs = linalg::eigenvalues(m)?;
    let tol = 1e-12 * m.norm().max(1.0);
    eigs.into_iter()
        .reduce(|best, z| {
            if z.re > best.re + tol {
                z
            } else if z.re < best.re - tol {
                best
            } else if z.norm() > best.norm() + tol {
                z
            } else if z.norm() < best.norm() - tol {
                best
            } else if z.im >= 0.0 {
                z
            } else {
                best
            }
        })
        .ok_or_else(|| Error::invalid("empty matrix has no eigenvalues"))
}

fn sum_operator_semisimple(abar: &DMatrix<f64>) -> Result<bool> {
    let d = abar.nrows();
    let eye = DMatrix::identity(d, d);
    let k = linalg::kron(&eye, abar) + linalg::kron(abar, &eye);
    let eigs = linalg::eigenvalues(&k)?;
    let top = lambda_max_re(&k)?;
    // Every eigenvalue on the rightmost vertical line is relevant.
    let tol = 1e-9 * k.norm().max(1.0);
    Ok(eigs
        .iter()
        .filter(|z| (z.re - top.re).abs() <= tol)
        .all(|z| lti::eigenvalue_is_semisimple(&k, &eigs, *z)))
}

/// `σ(H)` for the full block-triangular matrix.
pub(crate) fn full_rate_markov(aug: &AugmentedLti) -> Result<RateReport> {
    if aug.state_dim() <= FULL_SPECTRUM_LIMIT {
        return lti::spectral_radius(&aug.h_full());
    }
    let r11 = lti::spectral_radius(&aug.h11)?;
    let r22 = lti::spectral_radius(&aug.h22)?;
    let (s11, s22) = (r11.spectral_radius, r22.spectral_radius);
    if (s11 - s22).abs() <= 1e-6 * s11.max(s22) {
        // Shared dominant modulus: the coupling block may create a Jordan chain.
        let sigma = s11.max(s22);
        return Ok(RateReport {
            spectral_radius: sigma,
            epsilon: lti::DEFAULT_EPSILON,
            dominant_semisimple: false,
            reported_rate: sigma + lti::DEFAULT_EPSILON,
        });
    }
    Ok(if s11 > s22 { r11 } else { r22 })
}

/// First-order coefficients `c` in `λ(α) = λ + cα + O(α²)` for the eigenvalues of
/// `A ⊗ I_m + α B` near a simple eigenvalue `λ` of `A` with left eigenvector
/// `y` and right eigenvector `x`: the eigenvalues of
/// `(yᵀ ⊗ I_m) B (x ⊗ I_m) / (yᵀx)`.
pub fn general_eigen_perturbation(
    a: &DMatrix<f64>,
    y: &DVector<f64>,
    x: &DVector<f64>,
    b: &DMatrix<f64>,
    m: usize,
) -> Result<Vec<Complex64>> {
    let n = a.nrows();
    if !a.is_square() || y.len() != n || x.len() != n || m == 0 || b.shape() != (n * m, n * m) {
        return Err(Error::invalid(format!(
            "dimension mismatch: A is {}x{}, y and x have length {} and {}, B is {}x{}, block size {m}",
            a.nrows(),
            a.ncols(),
            y.len(),
            x.len(),
            b.nrows(),
            b.ncols()
        )));
    }
    let yx = y.dot(x);
    if yx.abs() <= f64::EPSILON * y.norm() * x.norm() {
        return Err(Error::invalid("left and right eigenvectors are orthogonal"));
    }
    let lambda = y.dot(&(a * x)) / yx;
    let scale = a.norm().max(1.0);
    let right_res = (a * x - x * lambda).norm() / x.norm();
    let left_res = (a.tr_mul(y) - y * lambda).norm() / y.norm();
    if right_res > 1e-8 * scale || left_res > 1e-8 * scale {
        return Err(Error::invalid(format!(
            "x and y are not eigenvectors for a common eigenvalue (residuals {right_res:e}, {left_res:e})"
        )));
    }
    let close = linalg::eigenvalues(a)?
        .iter()
        .filter(|z| (**z - Complex64::new(lambda, 0.0)).norm() <= SIMPLE_TOL * scale)
        .count();
    if close != 1 {
        return Err(Error::NotSimple(format!(
            "eigenvalue {lambda} has algebraic multiplicity {close}"
        )));
    }
    let eye = DMatrix::identity(m, m);
    let left = linalg::kron(&DMatrix::from_row_slice(1, n, y.as_slice()), &eye);
    let right = linalg::kron(&DMatrix::from_column_slice(n, 1, x.as_slice()), &eye);
    let compressed = left * b * right / yx;
    linalg::eigenvalues(&compressed)
}

/// `H22` for the given step size without any centering requirement.
fn h22_at(sys: &JumpLinearSystem, mode: AnalysisMode, alpha: f64) -> Result<DMatrix<f64>> {
    let s = sys.with_alpha(alpha)?;
    Ok(match mode {
        AnalysisMode::Markov => mjls::build_augmented_lti(&s)?.h22,
        AnalysisMode::Iid => iid::iid_blocks(&s, &iid_distribution(&s)?).h22,
    })
}

fn sigma22_minus_one(sys: &JumpLinearSystem, mode: AnalysisMode, alpha: f64) -> Result<f64> {
    Ok(lti::spectral_radius(&h22_at(sys, mode, alpha)?)?.spectral_radius - 1.0)
}

/// Bisection for the step size where `σ(H22)` crosses one, inside `[lo, hi]`
/// with `σ(H22(lo)) < 1 ≤ σ(H22(hi))`.
pub fn critical_alpha(sys: &JumpLinearSystem, mode: AnalysisMode, lo: f64, hi: f64) -> Result<f64> {
    if !(lo.is_finite() && hi.is_finite() && 0.0 < lo && lo < hi) {
        return Err(Error::invalid(format!("bad bracket [{lo}, {hi}]")));
    }
    let (mut a, mut b) = (lo, hi);
    if sigma22_minus_one(sys, mode, a)? >= 0.0 || sigma22_minus_one(sys, mode, b)? < 0.0 {
        return Err(Error::NoBracket { lo, hi });
    }
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if mid <= a || mid >= b {
            break;
        }
        if sigma22_minus_one(sys, mode, mid)? < 0.0 {
            a = mid;
        } else {
            b = mid;
        }
        if b - a <= 4.0 * f64::EPSILON * b {
            break;
        }
    }
    let root = 0.5 * (a + b);
    let gap = sigma22_minus_one(sys, mode, root)?.abs();
    if gap > 1e-8 {
        return Err(Error::Numerical(format!(
            "spectral radius jumps across the threshold near alpha = {root} (|sigma - 1| = {gap:e})"
        )));
    }
    Ok(root)
}

/// [`critical_alpha`] with the bracket found by doubling from `1e-6` up to `1e6`.
pub fn critical_alpha_auto(sys: &JumpLinearSystem, mode: AnalysisMode) -> Result<f64> {
    const LO: f64 = 1e-6;
    const HI: f64 = 1e6;
    if sigma22_minus_one(sys, mode, LO)? >= 0.0 {
        return Err(Error::NoBracket { lo: LO, hi: HI });
    }
    let mut lo = LO;
    let mut hi = 2.0 * LO;
    while hi <= HI {
        if sigma22_minus_one(sys, mode, hi)? >= 0.0 {
            return critical_alpha(sys, mode, lo, hi);
        }
        lo = hi;
        hi *= 2.0;
    }
    Err(Error::NoBracket { lo: LO, hi: HI })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub sigma_h11: f64,
    pub sigma_h22: f64,
    pub predicted_sigma_h22: Option<f64>,
    /// Absent when the row is not mean-square stable.
    pub delta_inf: Option<f64>,
    pub stable: bool,
}

/// One row per step size, in input order. Unstable step sizes are flagged
/// rather than treated as errors.
pub fn alpha_sweep(
    sys: &JumpLinearSystem,
    mode: AnalysisMode,
    alphas: &[f64],
) -> Result<Vec<SweepRow>> {
    let p_bar = mean_distribution(sys, mode).ok();
    let lambda = match &p_bar {
        Some(p) => Some(lambda_max_re(&sys.weighted_a(p))?),
        None => None,
    };
    alphas
        .par_iter()
        .map(|&alpha| sweep_row(sys, mode, alpha, lambda, p_bar.as_ref()))
        .collect()
}

fn sweep_row(
    sys: &JumpLinearSystem,
    mode: AnalysisMode,
    alpha: f64,
    lambda: Option<Complex64>,
    p_bar: Option<&DVector<f64>>,
) -> Result<SweepRow> {
    let s = sys.with_alpha(alpha)?;
    let predicted_sigma_h22 = lambda.map(|l| 1.0 + 2.0 * l.re * alpha);
    let (sigma_h11, sigma_h22, delta_inf) = match mode {
        AnalysisMode::Markov => {
            let aug = mjls::build_augmented_lti(&s)?;
            let s11 = lti::spectral_radius(&aug.h11)?.spectral_radius;
            let s22 = lti::spectral_radius(&aug.h22)?.spectral_radius;
            let delta = match (lti::is_schur_stable(s22), p_bar) {
                (true, Some(p)) => Some(markov::steady_state_of(&s, &aug, p)?.delta_inf),
                _ => None,
            };
            (s11, s22, delta)
        }
        AnalysisMode::Iid => {
            let p = iid_distribution(&s)?;
            let model = iid::build_iid_model(&s, &p)?;
            let s11 = lti::spectral_radius(&model.h11)?.spectral_radius;
            let s22 = lti::spectral_radius(&model.h22)?.spectral_radius;
            let delta = if lti::is_schur_stable(s22) {
                Some(iid::iid_steady_state(&model)?.delta_inf)
            } else {
                None
            };
            (s11, s22, delta)
        }
    };
    Ok(SweepRow {
        alpha,
        sigma_h11,
        sigma_h22,
        predicted_sigma_h22,
        stable: delta_inf.is_some(),
        delta_inf,
    })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::invalid(
            "slope fit needs at least two matched points",
        ));
    }
    if x.iter().chain(y).any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::invalid("log-log fit needs positive finite values"));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("slope fit needs distinct x values"));
    }
    Ok(sxy / sxx)
}
