//! Finite Markov chains driving the jump parameter.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Row sums and the initial distribution must equal one to this tolerance.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// Distance from one below which an eigenvalue modulus counts as one.
const UNIT_CIRCLE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovChain {
    transition: DMatrix<f64>,
    initial: DVector<f64>,
}

impl MarkovChain {
    /// `transition[(i, j)] = P(zᵏ⁺¹ = j | zᵏ = i)`.
    pub fn new(transition: DMatrix<f64>, initial: DVector<f64>) -> Result<Self> {
        let n = transition.nrows();
        if n == 0 || !transition.is_square() {
            return Err(Error::invalid(format!(
                "transition matrix must be square and non-empty, got {}x{}",
                transition.nrows(),
                transition.ncols()
            )));
        }
        if initial.len() != n {
            return Err(Error::invalid(format!(
                "initial distribution has length {} but the chain has {n} modes",
                initial.len()
            )));
        }
        for i in 0..n {
            let row = transition.row(i);
            if let Some(j) = row.iter().position(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::invalid(format!(
                    "transition entry ({i}, {j}) = {} is not a probability",
                    row[j]
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::invalid(format!(
                    "row {i} of the transition matrix sums to {sum}"
                )));
            }
        }
        if !linalg::is_probability_vector(&initial, STOCHASTIC_TOL) {
            return Err(Error::invalid(
                "initial distribution must be nonnegative and sum to one",
            ));
        }
        Ok(Self {
            transition,
            initial,
        })
    }

    /// Chain whose rows all equal `p`, i.e. IID sampling from `p` started in `p`.
    pub fn iid(p: DVector<f64>) -> Result<Self> {
        let n = p.len();
        let transition = DMatrix::from_fn(n, n, |_, j| p[j]);
        Self::new(transition, p)
    }

    pub fn modes(&self) -> usize {
        self.transition.nrows()
    }

    pub fn transition(&self) -> &DMatrix<f64> {
        &self.transition
    }

    pub fn initial(&self) -> &DVector<f64> {
        &self.initial
    }

    pub fn with_initial(&self, initial: DVector<f64>) -> Result<Self> {
        Self::new(self.transition.clone(), initial)
    }

    /// One step of `p ↦ Pᵀ p`.
    pub fn advance(&self, p: &DVector<f64>) -> DVector<f64> {
        self.transition.tr_mul(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainAnalysis {
    pub p_inf: DVector<f64>,
    /// Second-largest eigenvalue modulus of `P`.
    pub mixing_rate: f64,
    pub ergodic: bool,
}

/// `pᵏ = (Pᵀ)ᵏ p⁰`.
pub fn evolve_distribution(chain: &MarkovChain, k: usize) -> DVector<f64> {
    evolve_from(chain, chain.initial(), k)
}

pub fn evolve_from(chain: &MarkovChain, p: &DVector<f64>, k: usize) -> DVector<f64> {
    let mut p = p.clone();
    for _ in 0..k {
        p = chain.advance(&p);
    }
    p
}

/// Stationary distribution and mixing rate of an ergodic chain.
///
/// Ergodic here means eigenvalue one is simple and every other eigenvalue lies
/// strictly inside the unit circle (irreducible and aperiodic).
pub fn stationary_distribution(chain: &MarkovChain) -> Result<ChainAnalysis> {
    let n = chain.modes();
    let eigs = linalg::eigenvalues(chain.transition())?;
    let near_one = eigs
        .iter()
        .filter(|z| (**z - linalg::Complex64::new(1.0, 0.0)).norm() < UNIT_CIRCLE_TOL)
        .count();
    if near_one != 1 {
        return Err(Error::NonErgodic(format!(
            "eigenvalue 1 has multiplicity {near_one}"
        )));
    }
    let mut rest: Vec<f64> = eigs.iter().map(|z| z.norm()).collect();
    rest.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mixing_rate = rest.get(1).copied().unwrap_or(0.0);
    if mixing_rate >= 1.0 - UNIT_CIRCLE_TOL {
        return Err(Error::NonErgodic(format!(
            "a second eigenvalue has modulus {mixing_rate}; the chain is periodic"
        )));
    }

    // (Pᵀ − I) p = 0 with the last equation replaced by 1ᵀ p = 1.
    let mut lhs = chain.transition().transpose() - DMatrix::identity(n, n);
    lhs.row_mut(n - 1).fill(1.0);
    let mut rhs = DVector::zeros(n);
    rhs[n - 1] = 1.0;
    let mut p_inf = linalg::solve(&lhs, &rhs, "stationary distribution system")?;
    p_inf.iter_mut().for_each(|x| {
        if *x < 0.0 {
            *x = 0.0;
        }
    });
    let total = p_inf.sum();
    p_inf /= total;
    Ok(ChainAnalysis {
        p_inf,
        mixing_rate,
        ergodic: true,
    })
}
