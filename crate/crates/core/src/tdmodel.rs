//! Builders turning problem descriptions into jump linear systems.
//!
//! TD(0) with linear features over a finite Markov reward process becomes a
//! jump system on the chain of consecutive state pairs `z = (s′, s)`, in error
//! coordinates `ξ = θ − θ*`.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::chain::{self, MarkovChain};
use crate::error::{Error, Result};
use crate::linalg;
use crate::mjls::JumpLinearSystem;

/// Tolerance on `‖Σ p∞ᵢ bᵢ‖` (scaled by the offsets' size) for "centered".
pub const CENTER_TOL: f64 = 1e-10;

/// Singular values of Φ below this fraction of its norm count as zero.
const FEATURE_RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEvalProblem {
    /// Row-stochastic state transition matrix under the evaluated policy.
    pub transitions: DMatrix<f64>,
    pub rewards: DVector<f64>,
    pub gamma: f64,
    /// Feature matrix, one row `φ(s)ᵀ` per state.
    pub features: DMatrix<f64>,
    /// Distribution of the first state. `None` starts from the stationary
    /// distribution.
    pub initial_state: Option<DVector<f64>>,
}

impl PolicyEvalProblem {
    pub fn states(&self) -> usize {
        self.transitions.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let ns = self.states();
        MarkovChain::new(
            self.transitions.clone(),
            DVector::from_element(ns, 1.0 / ns.max(1) as f64),
        )?;
        if self.rewards.len() != ns {
            return Err(Error::invalid(format!(
                "reward vector has length {}, expected {ns}",
                self.rewards.len()
            )));
        }
        if !(self.gamma.is_finite() && (0.0..1.0).contains(&self.gamma)) {
            return Err(Error::invalid(format!(
                "discount must lie in [0, 1), got {}",
                self.gamma
            )));
        }
        if self.features.nrows() != ns || self.features.ncols() == 0 {
            return Err(Error::invalid(format!(
                "feature matrix is {}x{}, expected {ns} rows and at least one column",
                self.features.nrows(),
                self.features.ncols()
            )));
        }
        if self
            .features
            .iter()
            .chain(self.rewards.iter())
            .any(|x| !x.is_finite())
        {
            return Err(Error::invalid("features and rewards must be finite"));
        }
        let d = self.feature_dim();
        if d > ns {
            return Err(Error::invalid(format!(
                "feature matrix has {d} columns but only {ns} rows, so it cannot have full column rank"
            )));
        }
        let sv = self.features.clone().svd(false, false).singular_values;
        let scale = self.features.norm();
        let rank = sv.iter().filter(|s| **s > FEATURE_RANK_TOL * scale).count();
        if rank < d {
            return Err(Error::invalid(format!(
                "feature matrix has rank {rank} < {d} columns"
            )));
        }
        if let Some(s0) = &self.initial_state {
            if s0.len() != ns || !linalg::is_probability_vector(s0, chain::STOCHASTIC_TOL) {
                return Err(Error::invalid(
                    "initial state distribution must be a probability vector over the states",
                ));
            }
        }
        Ok(())
    }
}

/// A state pair `(next, current)` labelling one jump mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatePair {
    pub next: usize,
    pub current: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TdJumpModel {
    pub sys: JumpLinearSystem,
    pub theta_star: DVector<f64>,
    /// `pairs[i]` is the state pair of mode `i`.
    pub pairs: Vec<StatePair>,
    /// Stationary distribution of the state chain.
    pub state_stationary: DVector<f64>,
    /// Stationary distribution of the pair chain, in mode order.
    pub pair_stationary: DVector<f64>,
}

impl TdJumpModel {
    pub fn mode_of(&self, pair: StatePair) -> Option<usize> {
        self.pairs.iter().position(|p| *p == pair)
    }
}

/// TD(0) jump model with unreachable pairs pruned.
pub fn build_td0(problem: &PolicyEvalProblem, alpha: f64) -> Result<TdJumpModel> {
    build_td0_with(problem, alpha, true)
}

/// TD(0) jump model. Modes are ordered by current state, then next state.
/// With `prune`, pairs `(s′, s)` with `P(s → s′) = 0` are dropped; they carry
/// no probability at any step.
pub fn build_td0_with(problem: &PolicyEvalProblem, alpha: f64, prune: bool) -> Result<TdJumpModel> {
    problem.validate()?;
    let ns = problem.states();
    let p = &problem.transitions;
    let phi = &problem.features;
    let gamma = problem.gamma;

    let state_chain = MarkovChain::new(p.clone(), DVector::from_element(ns, 1.0 / ns as f64))?;
    let dist = chain::stationary_distribution(&state_chain)?.p_inf;

    // Projected Bellman equation Φᵀ D (Φ − γ P Φ) θ* = Φᵀ D r.
    let dmat = DMatrix::from_diagonal(&dist);
    let lhs = phi.transpose() * &dmat * (phi - p * phi * gamma);
    let rhs = phi.transpose() * &dmat * &problem.rewards;
    let theta_star = linalg::solve(&lhs, &rhs, "projected Bellman system")?;

    let pairs: Vec<StatePair> = (0..ns)
        .flat_map(|s| {
            (0..ns).map(move |sn| StatePair {
                next: sn,
                current: s,
            })
        })
        .filter(|pr| !prune || p[(pr.current, pr.next)] > 0.0)
        .collect();
    let n = pairs.len();

    // (s′, s) → (s″, s′) with probability P(s′ → s″).
    let mut trans = DMatrix::zeros(n, n);
    for (i, from) in pairs.iter().enumerate() {
        for (j, to) in pairs.iter().enumerate() {
            if to.current == from.next {
                trans[(i, j)] = p[(from.next, to.next)];
            }
        }
    }

    let start = problem
        .initial_state
        .clone()
        .unwrap_or_else(|| dist.clone());
    let pair_weight = |s0: &DVector<f64>, pr: &StatePair| s0[pr.current] * p[(pr.current, pr.next)];
    let p0 = DVector::from_iterator(n, pairs.iter().map(|pr| pair_weight(&start, pr)));
    let p_inf = DVector::from_iterator(n, pairs.iter().map(|pr| pair_weight(&dist, pr)));
    let chain = MarkovChain::new(trans, renormalize(p0))?;

    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for pr in &pairs {
        let f = phi.row(pr.current).transpose();
        let fn_ = phi.row(pr.next).transpose();
        let td_dir = &fn_ * gamma - &f;
        a.push(&f * td_dir.transpose());
        // r(s) + (γφ(s′) − φ(s))ᵀθ* is the TD error at θ*.
        b.push(&f * (problem.rewards[pr.current] + td_dir.dot(&theta_star)));
    }
    let sys = JumpLinearSystem::new(chain, a, b, alpha)?;

    let residual = sys.weighted_b(&p_inf).norm();
    let scale = offset_scale(&sys);
    if residual > CENTER_TOL * scale {
        return Err(Error::Numerical(format!(
            "TD offsets are not centered at the computed fixed point (residual {residual:e})"
        )));
    }
    Ok(TdJumpModel {
        sys,
        theta_star,
        pairs,
        state_stationary: dist,
        pair_stationary: p_inf,
    })
}

fn renormalize(mut p: DVector<f64>) -> DVector<f64> {
    let s = p.sum();
    if s > 0.0 {
        p /= s;
    }
    p
}

fn offset_scale(sys: &JumpLinearSystem) -> f64 {
    sys.b().iter().map(|b| b.norm()).fold(1.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum BuildWarning {
    NotCentered,
    NotHurwitz,
    NonErgodic,
}

/// Wraps user-supplied matrices. Non-centered offsets and a non-Hurwitz mean
/// matrix are reported and logged, not rejected.
pub fn build_generic(
    a: Vec<DMatrix<f64>>,
    b: Vec<DVector<f64>>,
    chain: MarkovChain,
    alpha: f64,
) -> Result<(JumpLinearSystem, Vec<BuildWarning>)> {
    let sys = JumpLinearSystem::new(chain, a, b, alpha)?;
    let warnings = generic_warnings(&sys)?;
    for w in &warnings {
        match w {
            BuildWarning::NotCentered => {
                warn!("offsets are not centered under the stationary distribution")
            }
            BuildWarning::NotHurwitz => {
                warn!("mean matrix is not Hurwitz; the iteration may diverge")
            }
            BuildWarning::NonErgodic => {
                warn!("mode chain is not ergodic; stationary quantities are undefined")
            }
        }
    }
    Ok((sys, warnings))
}

fn generic_warnings(sys: &JumpLinearSystem) -> Result<Vec<BuildWarning>> {
    let Ok(analysis) = chain::stationary_distribution(sys.chain()) else {
        return Ok(vec![BuildWarning::NonErgodic]);
    };
    let mut out = Vec::new();
    if sys.weighted_b(&analysis.p_inf).norm() > CENTER_TOL * offset_scale(sys) {
        out.push(BuildWarning::NotCentered);
    }
    let abar = sys.weighted_a(&analysis.p_inf);
    if linalg::eigenvalues(&abar)?.iter().any(|z| z.re >= 0.0) {
        out.push(BuildWarning::NotHurwitz);
    }
    Ok(out)
}

/// Shifts coordinates by `ξ̃ = −Ā⁻¹ Σ p∞ᵢ bᵢ` so the offsets average to zero.
/// Returns the system with offsets `b̃ᵢ = Aᵢ ξ̃ + bᵢ` and the shift `ξ̃`;
/// original iterates equal centered iterates plus `ξ̃`.
pub fn center_offsets(sys: &JumpLinearSystem) -> Result<(JumpLinearSystem, DVector<f64>)> {
    let p_inf = chain::stationary_distribution(sys.chain())?.p_inf;
    let abar = sys.weighted_a(&p_inf);
    let bbar = sys.weighted_b(&p_inf);
    let d = sys.dim();
    if linalg::inverse_condition(&abar) < 1e-14 {
        return Err(Error::Singular("mean matrix in center_offsets".into()));
    }
    let shift = if bbar.norm() == 0.0 {
        DVector::zeros(d)
    } else {
        -linalg::solve(&abar, &bbar, "mean matrix in center_offsets")?
    };
    let b = sys
        .a()
        .iter()
        .zip(sys.b())
        .map(|(a, b)| a * &shift + b)
        .collect();
    let centered = JumpLinearSystem::new(sys.chain().clone(), sys.a().to_vec(), b, sys.alpha())?;
    Ok((centered, shift))
}
