//! Limits and error envelopes for Markov modes.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{offset_scale, relative_residual, spectral, SteadyState};
use crate::chain;
use crate::error::{Error, Result};
use crate::linalg;
use crate::lti::{self, RateReport};
use crate::mjls::{self, AugmentedLti, JumpLinearSystem, MomentState};
use crate::tdmodel::CENTER_TOL;

/// Differences below this many ulps of the trajectory scale are treated as zero
/// when fitting the envelope constant.
const ENVELOPE_FLOOR_ULPS: f64 = 64.0;

/// `q∞ = (I − H11)⁻¹ u_q(p∞)` and `vec Q∞ = (I − H22)⁻¹ (H21 q∞ + u_Q(p∞))`.
pub fn build_markov_steady_state(sys: &JumpLinearSystem) -> Result<SteadyState> {
    let aug = mjls::build_augmented_lti(sys)?;
    let p_inf = chain::stationary_distribution(sys.chain())?.p_inf;
    steady_state_of(sys, &aug, &p_inf)
}

pub(crate) fn steady_state_of(
    sys: &JumpLinearSystem,
    aug: &AugmentedLti,
    p_inf: &DVector<f64>,
) -> Result<SteadyState> {
    let sigma = lti::spectral_radius(&aug.h22)?.spectral_radius;
    if !lti::is_schur_stable(sigma) {
        return Err(Error::Unstable {
            what: "H22".into(),
            spectral_radius: sigma,
        });
    }
    let (n, d) = (aug.modes(), aug.dim());
    let (uq, uqq) = aug.input(p_inf);
    let nd = n * d;
    let q_inf = linalg::solve(&(DMatrix::identity(nd, nd) - &aug.h11), &uq, "I - H11")?;
    let big = aug.cov_dim();
    let drive = &aug.h21 * &q_inf + &uqq;
    let vq_inf = linalg::solve(&(DMatrix::identity(big, big) - &aug.h22), &drive, "I - H22")?;

    let res_q = relative_residual(&(&aug.h11 * &q_inf + &uq - &q_inf), &q_inf);
    let res_qq = relative_residual(&(&aug.h22 * &vq_inf + &drive - &vq_inf), &vq_inf);

    let mut x = DVector::zeros(aug.state_dim());
    x.rows_mut(0, nd).copy_from(&q_inf);
    x.rows_mut(nd, big).copy_from(&vq_inf);
    let ms = MomentState::from_stacked(&x, n, d, p_inf.clone(), 0);
    let mut big_q = ms.big_q.clone();
    big_q.iter_mut().for_each(|m| {
        linalg::symmetrize(m);
    });
    let centered = sys.weighted_b(p_inf).norm() <= CENTER_TOL * offset_scale(sys);
    if !centered {
        warn!("offsets are not centered; the limit is a second moment, not an error around the fixed point");
    }
    Ok(SteadyState {
        mean: ms.mean(),
        second_moment: ms.second_moment(),
        delta_inf: mjls::mean_square_norm_stacked(&vq_inf, n, d),
        q: ms.q,
        big_q,
        residual: res_q.max(res_qq),
        centered,
    })
}

/// Moment state at the limit with the chain started in `p∞`.
pub fn stationary_start(steady: &SteadyState, p_inf: &DVector<f64>) -> MomentState {
    MomentState {
        q: steady.q.clone(),
        big_q: steady.big_q.clone(),
        p: p_inf.clone(),
        k: 0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub delta_inf: f64,
    /// `max{σ(H) + ε, ρ̃}`.
    pub rate: f64,
    pub sigma_h: RateReport,
    /// Second-largest eigenvalue modulus of the transition matrix.
    pub mixing_rate: f64,
    /// Fitted `sup_k |E‖ξᵏ‖² − δ∞| / rateᵏ`.
    pub c0: f64,
    /// Differences at or below this level were ignored in the fit.
    pub floor: f64,
    /// `(δ∞ − C0·rateᵏ, δ∞ + C0·rateᵏ)` per step.
    pub envelope: Vec<(f64, f64)>,
    /// `σ(H) + ε` and `ρ̃` coincide, where the sharp bound carries an extra factor `k`.
    pub boundary_case: bool,
}

impl BoundsReport {
    /// Whether `mse[k]` lies in the envelope, up to the fit floor.
    pub fn contains(&self, k: usize, mse: f64) -> bool {
        let (lo, hi) = self.envelope[k];
        mse >= lo - self.floor && mse <= hi + self.floor
    }
}

/// Envelope `δ∞ ± C0·rateᵏ` with `rate = max{σ(H) + ε, ρ̃}` and `C0` the
/// smallest constant covering `mse`.
pub(crate) fn fit_bounds(
    mse: &[f64],
    delta_inf: f64,
    sigma_h: RateReport,
    mixing_rate: f64,
) -> BoundsReport {
    let rate = sigma_h.reported_rate.max(mixing_rate);
    let boundary_case = (sigma_h.reported_rate - mixing_rate).abs() <= 1e-9;
    let scale = mse.iter().fold(delta_inf.abs(), |acc, x| acc.max(x.abs()));
    let floor = ENVELOPE_FLOOR_ULPS * f64::EPSILON * scale;
    let errors: Vec<f64> = mse.iter().map(|x| x - delta_inf).collect();
    let c0 = lti::fit_envelope_constant(&errors, rate, floor);
    let envelope = (0..mse.len())
        .map(|t| {
            let w = c0 * rate.powi(t as i32);
            (delta_inf - w, delta_inf + w)
        })
        .collect();
    BoundsReport {
        delta_inf,
        rate,
        sigma_h,
        mixing_rate,
        c0,
        floor,
        envelope,
        boundary_case,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarkovRun {
    pub trajectory: Vec<MomentState>,
    /// `E‖ξᵏ‖²` for `k = 0..=horizon`.
    pub mse: Vec<f64>,
    pub steady: SteadyState,
    pub bounds: BoundsReport,
}

/// Exact moment trajectory from `m0` together with its limit and fitted envelope.
pub fn markov_trajectory_with_limits(
    sys: &JumpLinearSystem,
    m0: &MomentState,
    k: usize,
) -> Result<MarkovRun> {
    let aug = mjls::build_augmented_lti(sys)?;
    let chain_info = chain::stationary_distribution(sys.chain())?;
    let steady = steady_state_of(sys, &aug, &chain_info.p_inf)?;
    let trajectory = mjls::augmented_trajectory(&aug, m0, sys.chain(), k)?;
    let mse: Vec<f64> = trajectory.iter().map(mjls::mean_square_norm).collect();

    let sigma_h = spectral::full_rate_markov(&aug)?;
    let bounds = fit_bounds(&mse, steady.delta_inf, sigma_h, chain_info.mixing_rate);
    Ok(MarkovRun {
        trajectory,
        mse,
        bounds,
        steady,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::iid;
    use crate::chain::MarkovChain;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn running_example(p0: &[f64]) -> JumpLinearSystem {
        let chain =
            MarkovChain::new(DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.1, 0.9]), v(p0)).unwrap();
        JumpLinearSystem::new(
            chain,
            vec![
                DMatrix::from_element(1, 1, -1.0),
                DMatrix::from_element(1, 1, -2.0),
            ],
            vec![v(&[1.0]), v(&[-1.0])],
            0.1,
        )
        .unwrap()
    }

    #[test]
    fn noiseless_limit_is_zero() {
        let chain = MarkovChain::new(
            DMatrix::from_row_slice(2, 2, &[0.6, 0.4, 0.3, 0.7]),
            v(&[1.0, 0.0]),
        )
        .unwrap();
        let sys = JumpLinearSystem::new(
            chain,
            vec![DMatrix::from_row_slice(2, 2, &[-1.0, 0.2, 0.0, -0.7]); 2],
            vec![v(&[0.0, 0.0]); 2],
            0.2,
        )
        .unwrap();
        let ss = build_markov_steady_state(&sys).unwrap();
        assert_eq!(ss.delta_inf, 0.0);
        assert!(ss.q.iter().all(|q| q.amax() == 0.0));
    }

    #[test]
    fn running_example_limit_matches_long_recursion() {
        let sys = running_example(&[1.0, 0.0]);
        let ss = build_markov_steady_state(&sys).unwrap();
        assert!(ss.centered);
        assert!(ss.residual < 1e-10);
        // Per-mode limits are nonzero and only Σ Aᵢ q∞ᵢ vanishes; the mean
        // itself carries an O(α) bias because the modes have different Aᵢ.
        assert!(ss.q[0][0].abs() > 1e-3);
        let weighted: f64 = sys.a().iter().zip(&ss.q).map(|(a, q)| (a * q)[0]).sum();
        assert!(weighted.abs() < 1e-14);
        assert!(ss.mean[0].abs() > 1e-3);
        let m0 = mjls::initial_moments(&sys, &v(&[1.0])).unwrap();
        let traj = mjls::moment_trajectory(&sys, &m0, 2000).unwrap();
        let last = mjls::mean_square_norm(&traj[2000]);
        assert!((last - ss.delta_inf).abs() <= 1e-8 * ss.delta_inf);
        let trace: f64 = ss.big_q.iter().map(|q| q.trace()).sum();
        assert!((trace - ss.delta_inf).abs() < 1e-15);
    }

    #[test]
    fn mean_limit_vanishes_with_step_size() {
        let mut prev = f64::INFINITY;
        for alpha in [1e-1, 1e-2, 1e-3] {
            let sys = running_example(&[1.0, 0.0]).with_alpha(alpha).unwrap();
            let mean = build_markov_steady_state(&sys).unwrap().mean[0].abs();
            assert!(mean < prev / 5.0);
            assert!(mean < 2.0 * alpha);
            prev = mean;
        }
        // Equal mode matrices: the mean limit is exactly zero.
        let chain = MarkovChain::new(
            DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.1, 0.9]),
            v(&[1.0, 0.0]),
        )
        .unwrap();
        let sys = JumpLinearSystem::new(
            chain,
            vec![DMatrix::from_element(1, 1, -1.5); 2],
            vec![v(&[1.0]), v(&[-1.0])],
            0.1,
        )
        .unwrap();
        assert!(build_markov_steady_state(&sys).unwrap().mean[0].abs() < 1e-14);
    }

    #[test]
    fn rank_one_chain_matches_iid_limit() {
        let p = v(&[0.3, 0.7]);
        let chain = MarkovChain::iid(p.clone()).unwrap();
        let sys = JumpLinearSystem::new(
            chain,
            vec![
                DMatrix::from_row_slice(2, 2, &[-1.0, 0.3, 0.1, -0.8]),
                DMatrix::from_row_slice(2, 2, &[-0.5, -0.2, 0.4, -1.5]),
            ],
            vec![v(&[0.7, -0.35]), v(&[-0.3, 0.15])],
            0.15,
        )
        .unwrap();
        let markov = build_markov_steady_state(&sys).unwrap();
        let model = iid::build_iid_model(&sys, &p).unwrap();
        let iid = iid::iid_steady_state(&model).unwrap();
        assert!((markov.delta_inf - iid.delta_inf).abs() <= 1e-10 * iid.delta_inf);
        assert!((markov.second_moment - iid.second_moment).amax() <= 1e-10);
    }

    #[test]
    fn stationary_start_is_constant() {
        let sys = running_example(&[0.5, 0.5]);
        let ss = build_markov_steady_state(&sys).unwrap();
        let m0 = stationary_start(&ss, &v(&[0.5, 0.5]));
        let run = markov_trajectory_with_limits(&sys, &m0, 300).unwrap();
        for x in &run.mse {
            assert!((x - ss.delta_inf).abs() < 1e-13);
        }
        assert!(run.bounds.c0 < 1e-10, "c0 = {}", run.bounds.c0);
    }

    #[test]
    fn envelope_contains_trajectory_and_slope_is_bounded() {
        let sys = running_example(&[1.0, 0.0]);
        let m0 = mjls::initial_moments(&sys, &v(&[0.0])).unwrap();
        let run = markov_trajectory_with_limits(&sys, &m0, 500).unwrap();
        let b = &run.bounds;
        assert!((b.mixing_rate - 0.8).abs() < 1e-12);
        assert!(b.rate >= b.sigma_h.reported_rate && b.rate >= b.mixing_rate);
        for (k, x) in run.mse.iter().enumerate() {
            assert!(b.contains(k, *x), "k = {k}");
        }
        let ks: Vec<f64> = (20..=200).map(|k| k as f64).collect();
        let logs: Vec<f64> = (20..=200)
            .map(|k| (run.mse[k] - b.delta_inf).abs().ln())
            .collect();
        let slope = slope(&ks, &logs);
        assert!(
            slope <= b.rate.ln() + 0.01,
            "slope {slope} vs {}",
            b.rate.ln()
        );
    }

    #[test]
    fn rank_one_chain_rate_is_spectral() {
        let chain = MarkovChain::iid(v(&[0.5, 0.5])).unwrap();
        let sys = JumpLinearSystem::new(
            chain,
            vec![DMatrix::from_element(1, 1, -1.0); 2],
            vec![v(&[1.0]), v(&[-1.0])],
            0.1,
        )
        .unwrap();
        let m0 = mjls::initial_moments(&sys, &v(&[1.0])).unwrap();
        let run = markov_trajectory_with_limits(&sys, &m0, 100).unwrap();
        assert!(run.bounds.mixing_rate < 1e-12);
        assert_eq!(run.bounds.rate, run.bounds.sigma_h.reported_rate);
        assert!((run.bounds.delta_inf - 0.1 / 1.9).abs() < 1e-12);
    }

    #[test]
    fn unstable_system_is_refused() {
        let sys = running_example(&[1.0, 0.0]).with_alpha(1.5).unwrap();
        assert!(matches!(
            build_markov_steady_state(&sys),
            Err(Error::Unstable { .. })
        ));
    }

    fn slope(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
        sxy / sxx
    }
}
