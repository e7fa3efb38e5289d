//! Discrete-time LTI systems `x⁺ = H x + G u`: trajectories, steady states,
//! convergence-rate reporting and Lyapunov certificates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Complex64};

/// Slack added to the spectral radius when a dominant eigenvalue is defective.
pub const DEFAULT_EPSILON: f64 = 1e-6;

/// A spectral radius within this distance of one counts as marginal (not stable).
pub const MARGINAL_TOL: f64 = 1e-10;

/// Relative singular-value threshold of the semisimplicity rank test.
const RANK_TOL: f64 = 1e-8;

/// Eigenvalues closer than this (relative to the spectral radius) are one cluster.
const CLUSTER_TOL: f64 = 1e-6;

pub fn is_schur_stable(spectral_radius: f64) -> bool {
    spectral_radius < 1.0 - MARGINAL_TOL
}

#[derive(Debug, Clone, PartialEq)]
pub struct LtiSystem {
    h: DMatrix<f64>,
    g: DMatrix<f64>,
}

impl LtiSystem {
    pub fn new(h: DMatrix<f64>, g: DMatrix<f64>) -> Result<Self> {
        if !h.is_square() {
            return Err(Error::invalid(format!(
                "state map must be square, got {}x{}",
                h.nrows(),
                h.ncols()
            )));
        }
        if g.nrows() != h.nrows() {
            return Err(Error::invalid(format!(
                "input map has {} rows but the state dimension is {}",
                g.nrows(),
                h.nrows()
            )));
        }
        Ok(Self { h, g })
    }

    /// System without inputs (`p = 0`).
    pub fn autonomous(h: DMatrix<f64>) -> Result<Self> {
        let n = h.nrows();
        Self::new(h, DMatrix::zeros(n, 0))
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn state_dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.g.ncols()
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.h * x + &self.g * u
    }

    fn check_state(&self, x: &DVector<f64>, what: &str) -> Result<()> {
        if x.len() != self.state_dim() {
            return Err(Error::invalid(format!(
                "{what} has length {} but the state dimension is {}",
                x.len(),
                self.state_dim()
            )));
        }
        Ok(())
    }

    fn check_input(&self, u: &DVector<f64>, what: &str) -> Result<()> {
        if u.len() != self.input_dim() {
            return Err(Error::invalid(format!(
                "{what} has length {} but the input dimension is {}",
                u.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn require_stable(&self) -> Result<f64> {
        let sigma = spectral_radius(&self.h)?.spectral_radius;
        if !is_schur_stable(sigma) {
            return Err(Error::Unstable {
                what: "state map H".into(),
                spectral_radius: sigma,
            });
        }
        Ok(sigma)
    }
}

/// Input signal for [`trajectory`].
#[derive(Debug, Clone, Copy)]
pub enum Inputs<'a> {
    Constant(&'a DVector<f64>),
    Sequence(&'a [DVector<f64>]),
}

/// Returns `x⁰ … xᵏ` of the forward recursion.
pub fn trajectory(
    sys: &LtiSystem,
    x0: &DVector<f64>,
    inputs: Inputs<'_>,
    k: usize,
) -> Result<Vec<DVector<f64>>> {
    sys.check_state(x0, "initial state")?;
    match inputs {
        Inputs::Constant(u) => sys.check_input(u, "constant input")?,
        Inputs::Sequence(us) => {
            if us.len() < k {
                return Err(Error::invalid(format!(
                    "{} inputs supplied for {k} steps",
                    us.len()
                )));
            }
            for (t, u) in us.iter().take(k).enumerate() {
                sys.check_input(u, &format!("input {t}"))?;
            }
        }
    }
    let mut out = Vec::with_capacity(k + 1);
    out.push(x0.clone());
    for t in 0..k {
        let u = match inputs {
            Inputs::Constant(u) => u,
            Inputs::Sequence(us) => &us[t],
        };
        let next = sys.step(&out[t], u);
        out.push(next);
    }
    Ok(out)
}

/// `x∞ = (I − H)⁻¹ G u∞`; requires `σ(H) < 1`.
pub fn steady_state(sys: &LtiSystem, u_inf: &DVector<f64>) -> Result<DVector<f64>> {
    sys.check_input(u_inf, "steady-state input")?;
    sys.require_stable()?;
    let n = sys.state_dim();
    let lhs = DMatrix::identity(n, n) - &sys.h;
    linalg::solve(&lhs, &(&sys.g * u_inf), "I - H")
}

/// `xᵏ = x∞ + Hᵏ (x⁰ − x∞)` for a constant input.
pub fn constant_input_closed_form(
    sys: &LtiSystem,
    x0: &DVector<f64>,
    u: &DVector<f64>,
    k: usize,
) -> Result<DVector<f64>> {
    sys.check_state(x0, "initial state")?;
    let x_inf = steady_state(sys, u)?;
    let power = matrix_power(&sys.h, k);
    Ok(&x_inf + power * (x0 - &x_inf))
}

pub fn matrix_power(m: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let mut result = DMatrix::identity(m.nrows(), m.ncols());
    let mut base = m.clone();
    let mut e = k;
    while e > 0 {
        if e & 1 == 1 {
            result = &result * &base;
        }
        e >>= 1;
        if e > 0 {
            base = &base * &base;
        }
    }
    result
}

/// Spectral radius together with the convergence rate it certifies.
///
/// `reported_rate` equals the spectral radius when every dominant eigenvalue is
/// semisimple (bounded powers of `H/σ`), otherwise `σ + epsilon`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub spectral_radius: f64,
    pub epsilon: f64,
    pub dominant_semisimple: bool,
    pub reported_rate: f64,
}

pub fn spectral_radius(m: &DMatrix<f64>) -> Result<RateReport> {
    spectral_radius_with_epsilon(m, DEFAULT_EPSILON)
}

pub fn spectral_radius_with_epsilon(m: &DMatrix<f64>, epsilon: f64) -> Result<RateReport> {
    let eigs = linalg::eigenvalues(m)?;
    let sigma = eigs.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let dominant_semisimple = dominant_semisimple(m, &eigs, sigma);
    let reported_rate = if dominant_semisimple {
        sigma
    } else {
        sigma + epsilon
    };
    Ok(RateReport {
        spectral_radius: sigma,
        epsilon,
        dominant_semisimple,
        reported_rate,
    })
}

fn dominant_semisimple(m: &DMatrix<f64>, eigs: &[Complex64], sigma: f64) -> bool {
    if eigs.is_empty() {
        return true;
    }
    let scale = sigma.max(1e-300);
    let cluster_tol = CLUSTER_TOL * scale;
    let dominant: Vec<Complex64> = eigs
        .iter()
        .copied()
        .filter(|z| z.norm() >= sigma - cluster_tol)
        .collect();

    // Greedy clustering of the dominant eigenvalues.
    let mut clusters: Vec<Vec<Complex64>> = Vec::new();
    for z in dominant {
        match clusters
            .iter_mut()
            .find(|c| (c[0] - z).norm() <= cluster_tol)
        {
            Some(c) => c.push(z),
            None => clusters.push(vec![z]),
        }
    }

    clusters
        .iter()
        .all(|cluster| cluster_semisimple(m, eigs, cluster, cluster_tol))
}

/// Whether the eigenvalue(s) of `m` within `CLUSTER_TOL·max(|λ|, 1)` of
/// `lambda` have equal algebraic and geometric multiplicity.
pub fn eigenvalue_is_semisimple(m: &DMatrix<f64>, eigs: &[Complex64], lambda: Complex64) -> bool {
    let tol = CLUSTER_TOL * lambda.norm().max(1.0);
    let cluster: Vec<Complex64> = eigs
        .iter()
        .copied()
        .filter(|z| (*z - lambda).norm() <= tol)
        .collect();
    cluster.is_empty() || cluster_semisimple(m, eigs, &cluster, tol)
}

fn cluster_semisimple(
    m: &DMatrix<f64>,
    eigs: &[Complex64],
    cluster: &[Complex64],
    cluster_tol: f64,
) -> bool {
    let n = m.nrows();
    let rank_tol = RANK_TOL * m.norm().max(1e-300);
    let algebraic = eigs
        .iter()
        .filter(|z| (**z - cluster[0]).norm() <= cluster_tol)
        .count();
    let center = cluster.iter().sum::<Complex64>() / cluster.len() as f64;
    let shifted = linalg::to_complex(m) - DMatrix::<Complex64>::identity(n, n) * center;
    let geometric = n - linalg::rank_complex(&shifted, rank_tol);
    geometric == algebraic
}

/// Certificate `xᵏ⁺¹ᵀ V xᵏ⁺¹ ≤ ρ² xᵏᵀ V xᵏ + κ ‖uᵏ‖²` for every `(x, u)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovCertificate {
    pub v: DMatrix<f64>,
    pub rho: f64,
    pub kappa: f64,
}

impl LyapunovCertificate {
    /// Slack `ρ² xᵀVx + κ‖u‖² − x⁺ᵀVx⁺` of the one-step inequality (nonnegative when it holds).
    pub fn one_step_slack(&self, sys: &LtiSystem, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let next = sys.step(x, u);
        let lhs = next.dot(&(&self.v * &next));
        let rhs = self.rho * self.rho * x.dot(&(&self.v * x)) + self.kappa * u.norm_squared();
        rhs - lhs
    }
}

/// Builds `V` from `(H/ρ)ᵀ V (H/ρ) − V = −I` and a gain `κ` from the Schur
/// complement condition, for `σ(H) < ρ < 1`.
pub fn lyapunov_certificate(sys: &LtiSystem, rho: f64) -> Result<LyapunovCertificate> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::invalid(format!("rho must lie in (0, 1), got {rho}")));
    }
    let sigma = spectral_radius(sys.h())?.spectral_radius;
    if sigma >= rho {
        return Err(Error::NoCertificate {
            spectral_radius: sigma,
            rho,
        });
    }
    let n = sys.state_dim();
    let scaled = sys.h() / rho;
    let v = solve_discrete_lyapunov(&scaled, &DMatrix::identity(n, n))?;

    // M = ρ²V − HᵀVH ≻ 0, W = GᵀVG, C = GᵀVH.
    let h = sys.h();
    let g = sys.g();
    let mut m = &v * (rho * rho) - h.transpose() * &v * h;
    linalg::symmetrize(&mut m);
    let m_min = min_sym_eigenvalue(&m);
    let v_min = min_sym_eigenvalue(&v);
    if !(v_min > 0.0 && m_min > 0.0) {
        return Err(Error::Numerical(format!(
            "Lyapunov solution failed verification (min eig V = {v_min:e}, min eig of rho^2 V - H'VH = {m_min:e})"
        )));
    }
    let mut w = g.transpose() * &v * g;
    linalg::symmetrize(&mut w);
    let w_max = if w.nrows() == 0 {
        0.0
    } else {
        w.clone().symmetric_eigen().eigenvalues.max()
    };
    let c = g.transpose() * &v * h;
    let c_norm = if c.nrows() == 0 {
        0.0
    } else {
        c.clone().svd(false, false).singular_values.max()
    };
    let kappa = w_max + 2.0 * c_norm * c_norm / m_min + 1e-12 * w_max.max(1.0);
    Ok(LyapunovCertificate { v, rho, kappa })
}

fn min_sym_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    m.clone().symmetric_eigen().eigenvalues.min()
}

/// Solves `Fᵀ V F − V = −Q` for a Schur-stable `F`.
pub fn solve_discrete_lyapunov(f: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = f.nrows();
    if !f.is_square() || q.shape() != (n, n) {
        return Err(Error::invalid("Lyapunov equation dimensions do not match"));
    }
    let mut v = if n <= 24 {
        let ft = f.transpose();
        let lhs = DMatrix::identity(n * n, n * n) - linalg::kron(&ft, &ft);
        let x = linalg::solve(&lhs, &linalg::vec_col(q), "I - F'⊗F'")?;
        linalg::unvec(x.as_slice(), n, n)
    } else {
        smith_doubling(f, q)?
    };
    linalg::symmetrize(&mut v);
    Ok(v)
}

fn smith_doubling(f: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut v = q.clone();
    let mut a = f.clone();
    for _ in 0..80 {
        let incr = a.transpose() * &v * &a;
        let done = incr.norm() <= f64::EPSILON * v.norm();
        v += incr;
        if done {
            let residual = f.transpose() * &v * f - &v + q;
            if residual.norm() <= 1e-8 * v.norm().max(1.0) {
                return Ok(v);
            }
            break;
        }
        a = &a * &a;
        if a.iter().any(|x| !x.is_finite()) {
            break;
        }
    }
    Err(Error::Numerical(
        "Smith iteration for the Lyapunov equation did not converge".into(),
    ))
}

/// Smallest `C₀` with `|eₖ| ≤ C₀ rateᵏ` over the supplied errors, where `errors[k]`
/// is the error at step `k`. Errors at or below `floor` count as zero.
pub fn fit_envelope_constant(errors: &[f64], rate: f64, floor: f64) -> f64 {
    errors
        .iter()
        .enumerate()
        .filter(|(_, e)| e.abs() > floor)
        .map(|(k, e)| {
            let scale = rate.powi(k as i32);
            if scale > 0.0 {
                e.abs() / scale
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar(h: f64, g: f64) -> LtiSystem {
        LtiSystem::new(
            DMatrix::from_element(1, 1, h),
            DMatrix::from_element(1, 1, g),
        )
        .unwrap()
    }

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn zero_state_map_forgets_history() {
        let sys = LtiSystem::new(DMatrix::zeros(2, 2), DMatrix::identity(2, 2)).unwrap();
        let u = v(&[0.3, -1.0]);
        let traj = trajectory(&sys, &v(&[5.0, 7.0]), Inputs::Constant(&u), 4).unwrap();
        assert_eq!(traj.len(), 5);
        assert!(traj[1..].iter().all(|x| *x == u));
    }

    #[test]
    fn identity_map_without_input_is_frozen() {
        let sys = LtiSystem::new(DMatrix::identity(2, 2), DMatrix::zeros(2, 2)).unwrap();
        let x0 = v(&[1.5, -2.0]);
        let traj = trajectory(&sys, &x0, Inputs::Constant(&v(&[4.0, 4.0])), 6).unwrap();
        assert!(traj.iter().all(|x| *x == x0));
    }

    #[test]
    fn scalar_unroll() {
        let sys = scalar(0.5, 1.0);
        let traj = trajectory(&sys, &v(&[0.0]), Inputs::Constant(&v(&[1.0])), 3).unwrap();
        assert_eq!(traj[3][0], 1.75);
        let closed = constant_input_closed_form(&sys, &v(&[0.0]), &v(&[1.0]), 3).unwrap();
        assert_relative_eq!(closed[0], 1.75, max_relative = 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let sys = scalar(0.5, 1.0);
        let err = trajectory(&sys, &v(&[0.0, 1.0]), Inputs::Constant(&v(&[1.0])), 3);
        assert!(matches!(err, Err(Error::InvalidInput(_))));
        let short = [v(&[1.0])];
        let err = trajectory(&sys, &v(&[0.0]), Inputs::Sequence(&short), 3);
        assert!(matches!(err, Err(Error::InvalidInput(_))));
        assert!(LtiSystem::new(DMatrix::zeros(2, 3), DMatrix::zeros(2, 1)).is_err());
        assert!(LtiSystem::new(DMatrix::zeros(2, 2), DMatrix::zeros(3, 1)).is_err());
    }

    #[test]
    fn steady_states() {
        assert_eq!(steady_state(&scalar(0.5, 1.0), &v(&[0.0])).unwrap()[0], 0.0);
        assert_relative_eq!(steady_state(&scalar(0.5, 1.0), &v(&[1.0])).unwrap()[0], 2.0);
        let sys = LtiSystem::new(DMatrix::identity(2, 2) * 0.5, DMatrix::identity(2, 2)).unwrap();
        let x = steady_state(&sys, &v(&[1.0, -1.0])).unwrap();
        assert_relative_eq!(x[0], 2.0);
        assert_relative_eq!(x[1], -2.0);
    }

    #[test]
    fn unstable_steady_state_is_refused() {
        let err = steady_state(&scalar(1.0, 1.0), &v(&[1.0]));
        assert!(matches!(err, Err(Error::Unstable { .. })));
        let err = constant_input_closed_form(&scalar(1.2, 1.0), &v(&[0.0]), &v(&[1.0]), 2);
        assert!(matches!(err, Err(Error::Unstable { .. })));
    }

    #[test]
    fn closed_form_from_fixed_point_and_power() {
        let sys = scalar(0.5, 1.0);
        let x = constant_input_closed_form(&sys, &v(&[2.0]), &v(&[1.0]), 17).unwrap();
        assert_relative_eq!(x[0], 2.0, max_relative = 1e-14);

        let sys = LtiSystem::new(DMatrix::identity(2, 2) * 0.9, DMatrix::zeros(2, 1)).unwrap();
        let x = constant_input_closed_form(&sys, &v(&[1.0, 0.0]), &v(&[0.0]), 10).unwrap();
        assert_relative_eq!(x[0], 0.9f64.powi(10), max_relative = 1e-12);
        assert_eq!(x[1], 0.0);
    }

    #[test]
    fn autonomous_system_has_empty_input() {
        let sys = LtiSystem::autonomous(DMatrix::identity(3, 3) * 0.5).unwrap();
        assert_eq!(sys.input_dim(), 0);
        let traj = trajectory(&sys, &v(&[1.0, 2.0, 4.0]), Inputs::Constant(&v(&[])), 2).unwrap();
        assert_relative_eq!(traj[2][2], 1.0);
    }

    #[test]
    fn spectral_radius_examples() {
        let r = spectral_radius(&DMatrix::identity(3, 3)).unwrap();
        assert_relative_eq!(r.spectral_radius, 1.0, max_relative = 1e-14);
        assert!(r.dominant_semisimple);
        assert_eq!(r.reported_rate, r.spectral_radius);

        let nil = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let r = spectral_radius(&nil).unwrap();
        assert_eq!(r.spectral_radius, 0.0);
        assert!(!r.dominant_semisimple);
        assert_eq!(r.reported_rate, DEFAULT_EPSILON);

        let sym = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.1, 0.9]);
        let r = spectral_radius(&sym).unwrap();
        assert_relative_eq!(r.spectral_radius, 1.0, max_relative = 1e-14);
        assert!(r.dominant_semisimple);
    }

    #[test]
    fn jordan_block_is_not_semisimple() {
        let j = DMatrix::from_row_slice(2, 2, &[0.5, 1.0, 0.0, 0.5]);
        let r = spectral_radius(&j).unwrap();
        assert_relative_eq!(r.spectral_radius, 0.5, max_relative = 1e-12);
        assert!(!r.dominant_semisimple);
        assert_relative_eq!(r.reported_rate, 0.5 + DEFAULT_EPSILON, max_relative = 1e-12);
        assert!(r.reported_rate >= r.spectral_radius);
    }

    #[test]
    fn complex_pair_on_the_circle_is_semisimple() {
        let (c, s) = (0.6f64, 0.8f64);
        let rot = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]) * 0.7;
        let r = spectral_radius(&rot).unwrap();
        assert_relative_eq!(r.spectral_radius, 0.7, max_relative = 1e-12);
        assert!(r.dominant_semisimple);
    }

    #[test]
    fn certificate_for_zero_map() {
        let sys = LtiSystem::new(DMatrix::zeros(2, 2), DMatrix::identity(2, 2)).unwrap();
        let cert = lyapunov_certificate(&sys, 0.5).unwrap();
        assert!((cert.v.clone() - DMatrix::<f64>::identity(2, 2)).norm() < 1e-14);
        assert!(cert.kappa > 1.0);
    }

    #[test]
    fn certificate_for_scalar_map() {
        let cert = lyapunov_certificate(&scalar(0.5, 1.0), 0.9).unwrap();
        let ratio: f64 = 0.5 / 0.9;
        assert_relative_eq!(
            cert.v[(0, 0)],
            1.0 / (1.0 - ratio * ratio),
            max_relative = 1e-12
        );
    }

    #[test]
    fn certificate_refused_when_rho_too_small() {
        let err = lyapunov_certificate(&scalar(0.8, 1.0), 0.5);
        assert!(matches!(err, Err(Error::NoCertificate { .. })));
        assert!(lyapunov_certificate(&scalar(0.1, 1.0), 1.5).is_err());
    }

    #[test]
    fn smith_doubling_agrees_with_kronecker_solve() {
        let f = DMatrix::from_fn(30, 30, |i, j| {
            if i == j {
                0.5
            } else if j == i + 1 {
                0.3
            } else {
                0.001 * ((i * 7 + j * 3) % 5) as f64
            }
        });
        assert!(spectral_radius(&f).unwrap().spectral_radius < 0.95);
        let q = DMatrix::identity(30, 30);
        let v = smith_doubling(&f, &q).unwrap();
        let residual = f.transpose() * &v * &f - &v + &q;
        assert!(residual.norm() < 1e-10 * v.norm());
    }

    #[test]
    fn envelope_constant_is_supremum_ratio() {
        let errors = [1.0, 0.4, 0.3, 0.0];
        let c0 = fit_envelope_constant(&errors, 0.5, 1e-15);
        assert_relative_eq!(c0, 1.2);
        for (k, e) in errors.iter().enumerate() {
            assert!(*e <= c0 * 0.5f64.powi(k as i32) + 1e-15);
        }
    }
}
