//! Markov jump linear system `ξᵏ⁺¹ = (I + αA(zᵏ)) ξᵏ + α b(zᵏ)`.
//!
//! The per-mode indicator moments `q_iᵏ = E[ξᵏ 1{zᵏ=i}]` and
//! `Q_iᵏ = E[ξᵏξᵏᵀ 1{zᵏ=i}]` evolve deterministically. They can be advanced
//! either mode by mode ([`moment_recursion_step`]) or through the stacked
//! block-lower-triangular LTI system ([`AugmentedLti`]).
//!
//! Stacking convention: `q = (q_1; …; q_n)` and `vec(Q) = (vec Q_1; …; vec Q_n)`
//! with column-major `vec`, so the augmented state is `(q; vec(Q))` of length
//! `n·d + n·d²`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::chain::{self, MarkovChain};
use crate::error::{Error, Result};
use crate::linalg;
use crate::lti::{self, Inputs, LtiSystem};

/// Default bound on `n·d²`, the size of the covariance block.
pub const DEFAULT_SIZE_CAP: usize = 4096;

/// Asymmetry tolerated in a `Q_i` before re-symmetrisation.
pub const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpLinearSystem {
    chain: MarkovChain,
    a: Vec<DMatrix<f64>>,
    b: Vec<DVector<f64>>,
    alpha: f64,
}

impl JumpLinearSystem {
    pub fn new(
        chain: MarkovChain,
        a: Vec<DMatrix<f64>>,
        b: Vec<DVector<f64>>,
        alpha: f64,
    ) -> Result<Self> {
        let n = chain.modes();
        if a.len() != n || b.len() != n {
            return Err(Error::invalid(format!(
                "chain has {n} modes but {} A matrices and {} b vectors were given",
                a.len(),
                b.len()
            )));
        }
        let d = a[0].nrows();
        if d == 0 {
            return Err(Error::invalid("state dimension must be positive"));
        }
        for (i, (ai, bi)) in a.iter().zip(&b).enumerate() {
            if ai.shape() != (d, d) {
                return Err(Error::invalid(format!(
                    "A[{i}] is {}x{}, expected {d}x{d}",
                    ai.nrows(),
                    ai.ncols()
                )));
            }
            if bi.len() != d {
                return Err(Error::invalid(format!(
                    "b[{i}] has length {}, expected {d}",
                    bi.len()
                )));
            }
            if ai.iter().chain(bi.iter()).any(|x| !x.is_finite()) {
                return Err(Error::invalid(format!("mode {i} has non-finite entries")));
            }
        }
        check_alpha(alpha)?;
        Ok(Self { chain, a, b, alpha })
    }

    pub fn chain(&self) -> &MarkovChain {
        &self.chain
    }

    pub fn a(&self) -> &[DMatrix<f64>] {
        &self.a
    }

    pub fn b(&self) -> &[DVector<f64>] {
        &self.b
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn modes(&self) -> usize {
        self.a.len()
    }

    pub fn dim(&self) -> usize {
        self.a[0].nrows()
    }

    /// `H_i = I + α A_i`.
    pub fn h(&self, i: usize) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::identity(d, d) + &self.a[i] * self.alpha
    }

    /// `G_i = α b_i`.
    pub fn g(&self, i: usize) -> DVector<f64> {
        &self.b[i] * self.alpha
    }

    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(Self {
            alpha,
            ..self.clone()
        })
    }

    pub fn with_chain(&self, chain: MarkovChain) -> Result<Self> {
        Self::new(chain, self.a.clone(), self.b.clone(), self.alpha)
    }

    /// `Σ pᵢ Aᵢ`.
    pub fn weighted_a(&self, p: &DVector<f64>) -> DMatrix<f64> {
        let d = self.dim();
        self.a
            .iter()
            .zip(p.iter())
            .fold(DMatrix::zeros(d, d), |acc, (ai, pi)| acc + ai * *pi)
    }

    /// `Σ pᵢ bᵢ`.
    pub fn weighted_b(&self, p: &DVector<f64>) -> DVector<f64> {
        let d = self.dim();
        self.b
            .iter()
            .zip(p.iter())
            .fold(DVector::zeros(d), |acc, (bi, pi)| acc + bi * *pi)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::invalid(format!(
            "learning rate must be finite and nonnegative, got {alpha}"
        )));
    }
    Ok(())
}

/// Draws the next mode from row `z` of the transition matrix.
pub fn sample_mode<R: Rng + ?Sized>(transition: &DMatrix<f64>, z: usize, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    sample_categorical(transition.row(z).iter().copied(), u)
}

/// Inverse-CDF draw; `u` is uniform on `[0, 1)`.
pub fn sample_categorical(weights: impl Iterator<Item = f64>, u: f64) -> usize {
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (j, w) in weights.enumerate() {
        if w > 0.0 {
            last_positive = j;
            acc += w;
            if u < acc {
                return j;
            }
        }
    }
    last_positive
}

/// One stochastic step: returns `((I + αA_z) ξ + α b_z, z′)` with `z′ ~ P[z, ·]`.
pub fn sample_step<R: Rng + ?Sized>(
    sys: &JumpLinearSystem,
    xi: &DVector<f64>,
    z: usize,
    rng: &mut R,
) -> Result<(DVector<f64>, usize)> {
    if z >= sys.modes() {
        return Err(Error::invalid(format!(
            "mode index {z} out of range for {} modes",
            sys.modes()
        )));
    }
    if xi.len() != sys.dim() {
        return Err(Error::invalid(format!(
            "state has length {}, expected {}",
            xi.len(),
            sys.dim()
        )));
    }
    let next = xi + (&sys.a[z] * xi + &sys.b[z]) * sys.alpha;
    let z_next = sample_mode(sys.chain.transition(), z, rng);
    Ok((next, z_next))
}

/// Indicator moments at step `k` together with the mode distribution `pᵏ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentState {
    pub q: Vec<DVector<f64>>,
    pub big_q: Vec<DMatrix<f64>>,
    pub p: DVector<f64>,
    pub k: usize,
}

impl MomentState {
    pub fn modes(&self) -> usize {
        self.q.len()
    }

    pub fn dim(&self) -> usize {
        self.q.first().map_or(0, |q| q.len())
    }

    /// `E ξᵏ = Σᵢ q_iᵏ`.
    pub fn mean(&self) -> DVector<f64> {
        let d = self.dim();
        self.q.iter().fold(DVector::zeros(d), |acc, q| acc + q)
    }

    /// `E ξᵏξᵏᵀ = Σᵢ Q_iᵏ`.
    pub fn second_moment(&self) -> DMatrix<f64> {
        let d = self.dim();
        self.big_q
            .iter()
            .fold(DMatrix::zeros(d, d), |acc, q| acc + q)
    }

    /// `(q; vec Q)` in the documented stacking order.
    pub fn stacked(&self) -> DVector<f64> {
        let n = self.modes();
        let d = self.dim();
        let mut out = DVector::zeros(n * d + n * d * d);
        for (i, q) in self.q.iter().enumerate() {
            out.rows_mut(i * d, d).copy_from(q);
        }
        let off = n * d;
        for (i, qm) in self.big_q.iter().enumerate() {
            out.rows_mut(off + i * d * d, d * d)
                .copy_from_slice(qm.as_slice());
        }
        out
    }

    pub fn from_stacked(x: &DVector<f64>, n: usize, d: usize, p: DVector<f64>, k: usize) -> Self {
        let q = (0..n)
            .map(|i| DVector::from_column_slice(&x.as_slice()[i * d..(i + 1) * d]))
            .collect();
        let off = n * d;
        let big_q = (0..n)
            .map(|i| {
                let start = off + i * d * d;
                linalg::unvec(&x.as_slice()[start..start + d * d], d, d)
            })
            .collect();
        Self { q, big_q, p, k }
    }

    /// Stacked `vec(Q)` block only.
    pub fn stacked_cov(&self) -> DVector<f64> {
        let d = self.dim();
        let mut out = DVector::zeros(self.modes() * d * d);
        for (i, qm) in self.big_q.iter().enumerate() {
            out.rows_mut(i * d * d, d * d)
                .copy_from_slice(qm.as_slice());
        }
        out
    }

    fn check_against(&self, sys: &JumpLinearSystem) -> Result<()> {
        let (n, d) = (sys.modes(), sys.dim());
        if self.q.len() != n || self.big_q.len() != n || self.p.len() != n {
            return Err(Error::invalid(format!(
                "moment state has {} modes, system has {n}",
                self.q.len()
            )));
        }
        if self.q.iter().any(|q| q.len() != d) || self.big_q.iter().any(|m| m.shape() != (d, d)) {
            return Err(Error::invalid(format!(
                "moment state blocks do not match state dimension {d}"
            )));
        }
        Ok(())
    }
}

/// Moments of a deterministic `ξ⁰` with `z⁰ ~ p⁰` drawn independently.
pub fn initial_moments(sys: &JumpLinearSystem, xi0: &DVector<f64>) -> Result<MomentState> {
    if xi0.len() != sys.dim() {
        return Err(Error::invalid(format!(
            "initial state has length {}, expected {}",
            xi0.len(),
            sys.dim()
        )));
    }
    let p0 = sys.chain.initial().clone();
    let outer = xi0 * xi0.transpose();
    Ok(MomentState {
        q: p0.iter().map(|pi| xi0 * *pi).collect(),
        big_q: p0.iter().map(|pi| &outer * *pi).collect(),
        p: p0,
        k: 0,
    })
}

/// Mode-by-mode moment update:
///
/// ```text
/// q_j⁺ = Σᵢ p_ij (H_i q_i + α p_i b_i)
/// Q_j⁺ = Σᵢ p_ij (H_i Q_i H_iᵀ + α (H_i q_i b_iᵀ + b_i q_iᵀ H_iᵀ) + α² p_i b_i b_iᵀ)
/// ```
pub fn moment_recursion_step(sys: &JumpLinearSystem, m: &MomentState) -> Result<MomentState> {
    m.check_against(sys)?;
    let (n, d) = (sys.modes(), sys.dim());
    let alpha = sys.alpha;
    let trans = sys.chain.transition();

    // Per-source-mode contributions, then mixed by the transition matrix.
    let mut q_src = Vec::with_capacity(n);
    let mut qq_src = Vec::with_capacity(n);
    for i in 0..n {
        let h = sys.h(i);
        let b = &sys.b[i];
        let pi = m.p[i];
        q_src.push(&h * &m.q[i] + b * (alpha * pi));
        let hq = &h * &m.q[i];
        let cross = &hq * b.transpose();
        let mut qq = &h * &m.big_q[i] * h.transpose()
            + (&cross + cross.transpose()) * alpha
            + b * b.transpose() * (alpha * alpha * pi);
        linalg::symmetrize(&mut qq);
        qq_src.push(qq);
    }

    let mut q = vec![DVector::zeros(d); n];
    let mut big_q = vec![DMatrix::zeros(d, d); n];
    for j in 0..n {
        for i in 0..n {
            let pij = trans[(i, j)];
            if pij != 0.0 {
                q[j] += &q_src[i] * pij;
                big_q[j] += &qq_src[i] * pij;
            }
        }
        linalg::symmetrize(&mut big_q[j]);
    }
    Ok(MomentState {
        q,
        big_q,
        p: sys.chain.advance(&m.p),
        k: m.k + 1,
    })
}

/// `E‖ξᵏ‖² = trace(Σᵢ Q_iᵏ)`.
pub fn mean_square_norm(m: &MomentState) -> f64 {
    m.big_q.iter().map(|q| q.trace()).sum()
}

/// `(1ₙᵀ ⊗ vec(I_d)ᵀ) vec(Q)` evaluated on the stacked covariance block.
pub fn mean_square_norm_stacked(vec_q: &DVector<f64>, n: usize, d: usize) -> f64 {
    let eye = linalg::vec_col(&DMatrix::identity(d, d));
    let mut sum = 0.0;
    for i in 0..n {
        sum += vec_q.rows(i * d * d, d * d).dot(&eye);
    }
    sum
}

/// The deterministic block system driving `(qᵏ, vec(Qᵏ))`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedLti {
    pub h11: DMatrix<f64>,
    pub h21: DMatrix<f64>,
    pub h22: DMatrix<f64>,
    n: usize,
    d: usize,
    alpha: f64,
    transition: DMatrix<f64>,
    b: Vec<DVector<f64>>,
    bb: Vec<DVector<f64>>,
}

impl AugmentedLti {
    pub fn modes(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// `N = n·d²`.
    pub fn cov_dim(&self) -> usize {
        self.n * self.d * self.d
    }

    pub fn state_dim(&self) -> usize {
        self.n * self.d + self.cov_dim()
    }

    /// `[[H11, 0], [H21, H22]]`.
    pub fn h_full(&self) -> DMatrix<f64> {
        let nd = self.n * self.d;
        let big = self.cov_dim();
        let mut h = DMatrix::zeros(nd + big, nd + big);
        h.view_mut((0, 0), (nd, nd)).copy_from(&self.h11);
        h.view_mut((nd, 0), (big, nd)).copy_from(&self.h21);
        h.view_mut((nd, nd), (big, big)).copy_from(&self.h22);
        h
    }

    /// `u_q = α((Pᵀ diag(p)) ⊗ I_d) b` and `u_Q = α²((Pᵀ diag(p)) ⊗ I_{d²}) B̂`.
    pub fn input(&self, p: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let (n, d) = (self.n, self.d);
        let mut uq = DVector::zeros(n * d);
        let mut uqq = DVector::zeros(n * d * d);
        for j in 0..n {
            for i in 0..n {
                let w = self.transition[(i, j)] * p[i];
                if w != 0.0 {
                    let mut blk = uq.rows_mut(j * d, d);
                    blk.axpy(self.alpha * w, &self.b[i], 1.0);
                    let mut blk = uqq.rows_mut(j * d * d, d * d);
                    blk.axpy(self.alpha * self.alpha * w, &self.bb[i], 1.0);
                }
            }
        }
        (uq, uqq)
    }

    pub fn stacked_input(&self, p: &DVector<f64>) -> DVector<f64> {
        let (uq, uqq) = self.input(p);
        let mut out = DVector::zeros(uq.len() + uqq.len());
        out.rows_mut(0, uq.len()).copy_from(&uq);
        out.rows_mut(uq.len(), uqq.len()).copy_from(&uqq);
        out
    }

    /// Full augmented system with identity input map; the input is
    /// [`Self::stacked_input`].
    pub fn as_lti(&self) -> Result<LtiSystem> {
        let dim = self.state_dim();
        LtiSystem::new(self.h_full(), DMatrix::identity(dim, dim))
    }
}

/// Builds the augmented blocks with the default size cap.
pub fn build_augmented_lti(sys: &JumpLinearSystem) -> Result<AugmentedLti> {
    build_augmented_lti_capped(sys, DEFAULT_SIZE_CAP)
}

/// `H11 = (Pᵀ ⊗ I_d) diag(H_i)`, `H22 = (Pᵀ ⊗ I_{d²}) diag(H_i ⊗ H_i)` and
/// `H21` with blocks `α p_ij (b_i ⊗ H_i + H_i ⊗ b_i)`.
pub fn build_augmented_lti_capped(sys: &JumpLinearSystem, cap: usize) -> Result<AugmentedLti> {
    let (n, d) = (sys.modes(), sys.dim());
    let size = n * d * d;
    if size > cap {
        return Err(Error::SizeCap { size, cap });
    }
    let trans = sys.chain.transition();
    let dd = d * d;
    let mut h11 = DMatrix::zeros(n * d, n * d);
    let mut h21 = DMatrix::zeros(n * dd, n * d);
    let mut h22 = DMatrix::zeros(n * dd, n * dd);
    for i in 0..n {
        let h = sys.h(i);
        let hh = linalg::kron(&h, &h);
        let s = linalg::kron_vec_mat(&sys.b[i], &h) + linalg::kron_mat_vec(&h, &sys.b[i]);
        for j in 0..n {
            let pij = trans[(i, j)];
            if pij == 0.0 {
                continue;
            }
            h11.view_mut((j * d, i * d), (d, d)).copy_from(&(&h * pij));
            h21.view_mut((j * dd, i * d), (dd, d))
                .copy_from(&(&s * (sys.alpha * pij)));
            h22.view_mut((j * dd, i * dd), (dd, dd))
                .copy_from(&(&hh * pij));
        }
    }
    Ok(AugmentedLti {
        h11,
        h21,
        h22,
        n,
        d,
        alpha: sys.alpha,
        transition: trans.clone(),
        b: sys.b.clone(),
        bb: sys.b.iter().map(|b| linalg::kron_vec(b, b)).collect(),
    })
}

/// Moment trajectory `m⁰ … mᵏ` from the augmented LTI recursion with input
/// built from `pᵗ = (Pᵀ)ᵗ p⁰`.
pub fn augmented_trajectory(
    aug: &AugmentedLti,
    m0: &MomentState,
    chain: &MarkovChain,
    k: usize,
) -> Result<Vec<MomentState>> {
    let (n, d) = (aug.n, aug.d);
    if m0.modes() != n || m0.dim() != d || chain.modes() != n {
        return Err(Error::invalid(
            "moment state or chain does not match the augmented system",
        ));
    }
    let mut ps = Vec::with_capacity(k + 1);
    ps.push(m0.p.clone());
    for t in 0..k {
        let next = chain.advance(&ps[t]);
        ps.push(next);
    }
    let inputs: Vec<DVector<f64>> = ps[..k].iter().map(|p| aug.stacked_input(p)).collect();
    let sys = aug.as_lti()?;
    let xs = lti::trajectory(&sys, &m0.stacked(), Inputs::Sequence(&inputs), k)?;
    Ok(xs
        .iter()
        .zip(ps)
        .enumerate()
        .map(|(t, (x, p))| MomentState::from_stacked(x, n, d, p, m0.k + t))
        .collect())
}

/// Explicit matrix-power sum for `(qᵏ, vec Qᵏ)`:
///
/// ```text
/// qᵏ     = H11ᵏ q⁰ + Σₜ H11ᵏ⁻¹⁻ᵗ u_qᵗ
/// vec Qᵏ = H22ᵏ vec Q⁰ + Σₜ H22ᵏ⁻¹⁻ᵗ (H21 qᵗ + u_Qᵗ)
/// ```
pub fn closed_form_moments(
    aug: &AugmentedLti,
    m0: &MomentState,
    chain: &MarkovChain,
    k: usize,
) -> Result<MomentState> {
    let (n, d) = (aug.n, aug.d);
    let x0 = m0.stacked();
    let q0 = x0.rows(0, n * d).into_owned();
    let vq0 = x0.rows(n * d, aug.cov_dim()).into_owned();
    let mut ps = vec![m0.p.clone()];
    for t in 0..k {
        let next = chain.advance(&ps[t]);
        ps.push(next);
    }
    let qt_at = |t: usize| -> DVector<f64> {
        let mut acc = lti::matrix_power(&aug.h11, t) * &q0;
        for (s, p) in ps[..t].iter().enumerate() {
            acc += lti::matrix_power(&aug.h11, t - 1 - s) * aug.input(p).0;
        }
        acc
    };
    let qk = qt_at(k);
    let mut vqk = lti::matrix_power(&aug.h22, k) * vq0;
    for (t, p) in ps[..k].iter().enumerate() {
        let drive = &aug.h21 * qt_at(t) + aug.input(p).1;
        vqk += lti::matrix_power(&aug.h22, k - 1 - t) * drive;
    }
    let mut x = DVector::zeros(aug.state_dim());
    x.rows_mut(0, n * d).copy_from(&qk);
    x.rows_mut(n * d, aug.cov_dim()).copy_from(&vqk);
    Ok(MomentState::from_stacked(&x, n, d, ps[k].clone(), m0.k + k))
}

/// Repeated [`moment_recursion_step`] returning `m⁰ … mᵏ`.
pub fn moment_trajectory(
    sys: &JumpLinearSystem,
    m0: &MomentState,
    k: usize,
) -> Result<Vec<MomentState>> {
    let mut out = Vec::with_capacity(k + 1);
    out.push(m0.clone());
    for t in 0..k {
        let next = moment_recursion_step(sys, &out[t])?;
        out.push(next);
    }
    Ok(out)
}

/// Indicator-consistency helper: `pᵏ` from the chain alone.
pub fn mode_distribution(sys: &JumpLinearSystem, k: usize) -> DVector<f64> {
    chain::evolve_distribution(sys.chain(), k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: usize, cols: usize, xs: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, xs)
    }

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn running_example(alpha: f64) -> JumpLinearSystem {
        let chain = MarkovChain::new(m(2, 2, &[0.9, 0.1, 0.1, 0.9]), v(&[1.0, 0.0])).unwrap();
        JumpLinearSystem::new(
            chain,
            vec![m(1, 1, &[-1.0]), m(1, 1, &[-2.0])],
            vec![v(&[1.0]), v(&[-1.0])],
            alpha,
        )
        .unwrap()
    }

    fn two_dim_example() -> JumpLinearSystem {
        let chain = MarkovChain::new(
            m(3, 3, &[0.5, 0.3, 0.2, 0.1, 0.6, 0.3, 0.3, 0.3, 0.4]),
            v(&[0.2, 0.5, 0.3]),
        )
        .unwrap();
        JumpLinearSystem::new(
            chain,
            vec![
                m(2, 2, &[-1.0, 0.3, 0.0, -0.5]),
                m(2, 2, &[-0.4, -0.2, 0.6, -1.2]),
                m(2, 2, &[0.2, 0.1, -0.3, -0.8]),
            ],
            vec![v(&[1.0, -0.5]), v(&[-0.3, 0.7]), v(&[0.2, 0.1])],
            0.2,
        )
        .unwrap()
    }

    #[test]
    fn validation() {
        let chain = MarkovChain::new(m(1, 1, &[1.0]), v(&[1.0])).unwrap();
        assert!(JumpLinearSystem::new(
            chain.clone(),
            vec![m(1, 1, &[1.0])],
            vec![v(&[1.0, 2.0])],
            0.1
        )
        .is_err());
        assert!(JumpLinearSystem::new(
            chain.clone(),
            vec![m(1, 2, &[1.0, 0.0])],
            vec![v(&[1.0])],
            0.1
        )
        .is_err());
        assert!(JumpLinearSystem::new(chain.clone(), vec![], vec![], 0.1).is_err());
        assert!(
            JumpLinearSystem::new(chain, vec![m(1, 1, &[1.0])], vec![v(&[1.0])], -0.1).is_err()
        );
    }

    #[test]
    fn sample_step_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let sys = running_example(0.0);
        let (x, _) = sample_step(&sys, &v(&[3.0]), 1, &mut rng).unwrap();
        assert_eq!(x[0], 3.0);

        let chain = MarkovChain::new(m(1, 1, &[1.0]), v(&[1.0])).unwrap();
        let sys =
            JumpLinearSystem::new(chain.clone(), vec![m(1, 1, &[-1.0])], vec![v(&[0.0])], 0.3)
                .unwrap();
        let (x, z) = sample_step(&sys, &v(&[0.0]), 0, &mut rng).unwrap();
        assert_eq!((x[0], z), (0.0, 0));

        let sys =
            JumpLinearSystem::new(chain, vec![m(1, 1, &[-1.0])], vec![v(&[1.0])], 0.5).unwrap();
        let (x, _) = sample_step(&sys, &v(&[2.0]), 0, &mut rng).unwrap();
        assert_eq!(x[0], 1.5);
        assert!(sample_step(&sys, &v(&[2.0]), 1, &mut rng).is_err());
    }

    #[test]
    fn categorical_sampling_skips_zero_weights() {
        let w = [0.0, 0.5, 0.0, 0.5];
        assert_eq!(sample_categorical(w.iter().copied(), 0.0), 1);
        assert_eq!(sample_categorical(w.iter().copied(), 0.49), 1);
        assert_eq!(sample_categorical(w.iter().copied(), 0.5), 3);
        assert_eq!(sample_categorical(w.iter().copied(), 0.999_999_999), 3);
    }

    #[test]
    fn initial_moment_examples() {
        let sys = running_example(0.1);
        let m0 = initial_moments(&sys, &v(&[0.0])).unwrap();
        assert!(m0.q.iter().all(|q| q[0] == 0.0));
        assert!(m0.big_q.iter().all(|q| q[(0, 0)] == 0.0));

        let m0 = initial_moments(&sys, &v(&[2.0])).unwrap();
        assert_eq!(m0.q[0][0], 2.0);
        assert_eq!(m0.q[1][0], 0.0);

        let uni = sys
            .with_chain(sys.chain().with_initial(v(&[0.5, 0.5])).unwrap())
            .unwrap();
        let m0 = initial_moments(&uni, &v(&[1.0])).unwrap();
        assert_eq!(m0.q[0][0], 0.5);
        assert_eq!(m0.big_q[1][(0, 0)], 0.5);
    }

    #[test]
    fn zero_system_stays_zero() {
        let chain = MarkovChain::new(m(2, 2, &[0.7, 0.3, 0.4, 0.6]), v(&[0.5, 0.5])).unwrap();
        let sys = JumpLinearSystem::new(
            chain,
            vec![
                m(2, 2, &[-1.0, 0.0, 0.5, -1.0]),
                m(2, 2, &[0.3, 0.0, 0.0, 0.2]),
            ],
            vec![v(&[0.0, 0.0]), v(&[0.0, 0.0])],
            0.1,
        )
        .unwrap();
        let mut state = initial_moments(&sys, &v(&[0.0, 0.0])).unwrap();
        for _ in 0..10 {
            state = moment_recursion_step(&sys, &state).unwrap();
        }
        assert_eq!(mean_square_norm(&state), 0.0);
        assert!(state.q.iter().all(|q| q.amax() == 0.0));
    }

    #[test]
    fn single_mode_reduces_to_direct_formula() {
        let chain = MarkovChain::new(m(1, 1, &[1.0]), v(&[1.0])).unwrap();
        let a = m(2, 2, &[-1.0, 0.4, -0.2, -0.6]);
        let b = v(&[0.5, -1.0]);
        let alpha = 0.15;
        let sys = JumpLinearSystem::new(chain, vec![a.clone()], vec![b.clone()], alpha).unwrap();
        let mut state = initial_moments(&sys, &v(&[1.0, 2.0])).unwrap();
        let h = DMatrix::identity(2, 2) + &a * alpha;
        let mut mu = v(&[1.0, 2.0]);
        let mut qq = &mu * mu.transpose();
        for _ in 0..25 {
            state = moment_recursion_step(&sys, &state).unwrap();
            let cross = &h * &mu * b.transpose() * alpha;
            qq = &h * &qq * h.transpose()
                + &cross
                + cross.transpose()
                + &b * b.transpose() * (alpha * alpha);
            mu = &h * &mu + &b * alpha;
        }
        assert!(linalg::rel_diff(state.q[0].as_slice(), mu.as_slice()) < 1e-13);
        assert!(linalg::rel_diff(state.big_q[0].as_slice(), qq.as_slice()) < 1e-13);
    }

    #[test]
    fn augmented_blocks_single_mode() {
        let chain = MarkovChain::new(m(1, 1, &[1.0]), v(&[1.0])).unwrap();
        let a = m(2, 2, &[-1.0, 0.4, -0.2, -0.6]);
        let sys =
            JumpLinearSystem::new(chain, vec![a.clone()], vec![v(&[0.5, -1.0])], 0.1).unwrap();
        let aug = build_augmented_lti(&sys).unwrap();
        let h = DMatrix::identity(2, 2) + a * 0.1;
        assert_eq!(aug.h11, h);
        assert_eq!(aug.h22, linalg::kron(&h, &h));
    }

    #[test]
    fn augmented_blocks_zero_learning_rate() {
        let sys = two_dim_example().with_alpha(0.0).unwrap();
        let aug = build_augmented_lti(&sys).unwrap();
        let pt = sys.chain().transition().transpose();
        assert_eq!(aug.h11, linalg::kron(&pt, &DMatrix::identity(2, 2)));
        assert_eq!(aug.h22, linalg::kron(&pt, &DMatrix::identity(4, 4)));
        assert_eq!(aug.h21.amax(), 0.0);
    }

    #[test]
    fn augmented_blocks_running_example() {
        let aug = build_augmented_lti(&running_example(0.1)).unwrap();
        let expected = m(2, 2, &[0.9 * 0.9, 0.1 * 0.8, 0.1 * 0.9, 0.9 * 0.8]);
        assert!((aug.h11.clone() - expected).amax() < 1e-15);
        let full = aug.h_full();
        assert_eq!(full.view((0, 2), (2, 2)).amax(), 0.0);
    }

    #[test]
    fn size_cap_is_enforced() {
        let sys = two_dim_example();
        assert!(matches!(
            build_augmented_lti_capped(&sys, 11),
            Err(Error::SizeCap { size: 12, cap: 11 })
        ));
        assert!(build_augmented_lti_capped(&sys, 12).is_ok());
    }

    #[test]
    fn one_augmented_step_matches_recursion() {
        let sys = two_dim_example();
        let aug = build_augmented_lti(&sys).unwrap();
        let m0 = initial_moments(&sys, &v(&[1.0, -2.0])).unwrap();
        let m1 = moment_recursion_step(&sys, &m0).unwrap();
        let x1 = aug.h_full() * m0.stacked() + aug.stacked_input(&m0.p);
        assert!(linalg::rel_diff(x1.as_slice(), m1.stacked().as_slice()) < 1e-12);
    }

    #[test]
    fn dual_path_and_closed_form() {
        let sys = two_dim_example();
        let aug = build_augmented_lti(&sys).unwrap();
        let m0 = initial_moments(&sys, &v(&[1.0, -2.0])).unwrap();
        let direct = moment_trajectory(&sys, &m0, 50).unwrap();
        let via_lti = augmented_trajectory(&aug, &m0, sys.chain(), 50).unwrap();
        for (a, b) in direct.iter().zip(&via_lti) {
            assert!(linalg::rel_diff(b.stacked().as_slice(), a.stacked().as_slice()) < 1e-12);
            assert!((&a.p - &b.p).amax() < 1e-15);
        }
        for k in [0, 1, 7, 20] {
            let cf = closed_form_moments(&aug, &m0, sys.chain(), k).unwrap();
            assert!(
                linalg::rel_diff(cf.stacked().as_slice(), direct[k].stacked().as_slice()) < 1e-11
            );
        }
    }

    #[test]
    fn zero_horizon_returns_initial_state() {
        let sys = running_example(0.1);
        let aug = build_augmented_lti(&sys).unwrap();
        let m0 = initial_moments(&sys, &v(&[1.0])).unwrap();
        let traj = augmented_trajectory(&aug, &m0, sys.chain(), 0).unwrap();
        assert_eq!(traj.len(), 1);
        assert_eq!(traj[0], m0);
    }

    #[test]
    fn frozen_iterate_with_zero_learning_rate() {
        let sys = running_example(0.0);
        let aug = build_augmented_lti(&sys).unwrap();
        let m0 = initial_moments(&sys, &v(&[1.5])).unwrap();
        let traj = augmented_trajectory(&aug, &m0, sys.chain(), 30).unwrap();
        for (k, s) in traj.iter().enumerate() {
            assert_relative_eq!(s.mean()[0], 1.5, epsilon = 1e-14);
            let pk = mode_distribution(&sys, k);
            assert!((s.q[0][0] - 1.5 * pk[0]).abs() < 1e-14);
        }
    }

    #[test]
    fn mean_square_norm_forms_agree() {
        let sys = two_dim_example();
        let m0 = initial_moments(&sys, &v(&[1.0, -2.0])).unwrap();
        let traj = moment_trajectory(&sys, &m0, 12).unwrap();
        for s in &traj {
            let a = mean_square_norm(s);
            let b = mean_square_norm_stacked(&s.stacked_cov(), 3, 2);
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
        let state = MomentState {
            q: vec![v(&[0.0]), v(&[0.0])],
            big_q: vec![m(1, 1, &[0.3]), m(1, 1, &[0.2])],
            p: v(&[0.5, 0.5]),
            k: 0,
        };
        assert_relative_eq!(mean_square_norm(&state), 0.5);
    }

    #[test]
    fn symmetry_and_psd_preserved() {
        let sys = two_dim_example();
        let m0 = initial_moments(&sys, &v(&[1.0, -2.0])).unwrap();
        let traj = moment_trajectory(&sys, &m0, 40).unwrap();
        for s in &traj {
            for ((qi, mi), pi) in s.big_q.iter().zip(&s.q).zip(s.p.iter()) {
                assert!((qi - qi.transpose()).amax() < SYMMETRY_TOL);
                let min = qi.clone().symmetric_eigen().eigenvalues.min();
                assert!(min >= -1e-10, "min eigenvalue {min}");
                // [[p_i, q_iᵀ], [q_i, Q_i]] is a second moment, hence PSD.
                if *pi > 1e-12 {
                    let schur = qi - mi * mi.transpose() / *pi;
                    let min = schur.symmetric_eigen().eigenvalues.min();
                    assert!(min >= -1e-9, "conditional covariance eigenvalue {min}");
                }
            }
        }
    }

    #[test]
    fn indicator_consistency() {
        let sys = two_dim_example();
        let m0 = initial_moments(&sys, &v(&[1.0, -2.0])).unwrap();
        let traj = moment_trajectory(&sys, &m0, 25).unwrap();
        for (k, s) in traj.iter().enumerate() {
            let pk = mode_distribution(&sys, k);
            assert!((&s.p - pk).amax() <= 1e-12);
        }
    }
}
