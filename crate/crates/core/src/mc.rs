//! Monte Carlo simulation of the jump recursion.
//!
//! Trajectory `t` draws from its own ChaCha8 stream `(base_seed, t)`, so each
//! path is fixed by the seed alone. Paths are grouped in fixed-size chunks of
//! consecutive indices; each chunk accumulates in index order and chunk
//! results are merged in chunk order, which makes every estimate independent
//! of the thread count.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mjls::{sample_categorical, JumpLinearSystem};

const CHUNK: usize = 1024;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McConfig {
    pub trajectories: usize,
    pub horizon: usize,
    pub base_seed: u64,
    /// Steps at which statistics are recorded; empty records every step.
    pub record_steps: Vec<usize>,
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trajectories == 0 {
            return Err(Error::invalid("Monte Carlo needs at least one trajectory"));
        }
        if let Some(k) = self.record_steps.iter().find(|k| **k > self.horizon) {
            return Err(Error::invalid(format!(
                "record step {k} exceeds the horizon {}",
                self.horizon
            )));
        }
        Ok(())
    }

    /// Sorted, deduplicated recording steps.
    pub fn steps(&self) -> Vec<usize> {
        if self.record_steps.is_empty() {
            return (0..=self.horizon).collect();
        }
        let mut s = self.record_steps.clone();
        s.sort_unstable();
        s.dedup();
        s
    }
}

/// Moment statistics at one step; used both for estimates and their standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    /// `E[ξ 1{z = i}]` per mode.
    pub q: Vec<DVector<f64>>,
    /// `E[ξξᵀ 1{z = i}]` per mode.
    pub big_q: Vec<DMatrix<f64>>,
    pub mean: DVector<f64>,
    pub second_moment: DMatrix<f64>,
    /// `E‖ξ‖²`.
    pub mse: f64,
    /// `P(z = i)`.
    pub mode_freq: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepEstimate {
    pub k: usize,
    pub value: Moments,
    /// Sample standard deviation over `√T`; absent for a single trajectory.
    pub se: Option<Moments>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub trajectories: usize,
    pub steps: Vec<StepEstimate>,
    /// First step at which some trajectory left the finite range.
    pub overflow_step: Option<usize>,
}

impl McEstimate {
    pub fn at(&self, k: usize) -> Option<&StepEstimate> {
        self.steps.iter().find(|s| s.k == k)
    }
}

/// Flat feature layout: `ξ1{z=i}` (n·d), `vec(ξξᵀ)1{z=i}` (n·d²), `1{z=i}` (n),
/// `ξ` (d), `vec(ξξᵀ)` (d²), `‖ξ‖²` (1).
struct Layout {
    n: usize,
    d: usize,
}

impl Layout {
    fn len(&self) -> usize {
        let (n, d) = (self.n, self.d);
        n * d + n * d * d + n + d + d * d + 1
    }

    fn fill(&self, xi: &[f64], z: usize, out: &mut [f64]) {
        let (n, d) = (self.n, self.d);
        out.iter_mut().for_each(|x| *x = 0.0);
        let q_off = z * d;
        let qq_off = n * d + z * d * d;
        let f_off = n * d + n * d * d;
        let m_off = f_off + n;
        let s_off = m_off + d;
        let mut norm = 0.0;
        for a in 0..d {
            out[q_off + a] = xi[a];
            out[m_off + a] = xi[a];
            norm += xi[a] * xi[a];
            for b in 0..d {
                // Column-major vec(ξξᵀ).
                let v = xi[a] * xi[b];
                out[qq_off + b * d + a] = v;
                out[s_off + b * d + a] = v;
            }
        }
        out[f_off + z] = 1.0;
        out[s_off + d * d] = norm;
    }

    fn unpack(&self, x: &[f64]) -> Moments {
        let (n, d) = (self.n, self.d);
        let dd = d * d;
        let q = (0..n)
            .map(|i| DVector::from_column_slice(&x[i * d..(i + 1) * d]))
            .collect();
        let qq_off = n * d;
        let big_q = (0..n)
            .map(|i| DMatrix::from_column_slice(d, d, &x[qq_off + i * dd..qq_off + (i + 1) * dd]))
            .collect();
        let f_off = n * d + n * dd;
        let m_off = f_off + n;
        let s_off = m_off + d;
        Moments {
            q,
            big_q,
            mode_freq: DVector::from_column_slice(&x[f_off..f_off + n]),
            mean: DVector::from_column_slice(&x[m_off..m_off + d]),
            second_moment: DMatrix::from_column_slice(d, d, &x[s_off..s_off + dd]),
            mse: x[s_off + dd],
        }
    }
}

/// Running mean and sum of squared deviations per feature.
#[derive(Clone)]
struct Welford {
    count: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(len: usize) -> Self {
        Self {
            count: 0.0,
            mean: vec![0.0; len],
            m2: vec![0.0; len],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.count += 1.0;
        for ((m, s), v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let delta = v - *m;
            *m += delta / self.count;
            *s += delta * (v - *m);
        }
    }

    fn merge(&mut self, other: &Welford) {
        if other.count == 0.0 {
            return;
        }
        if self.count == 0.0 {
            *self = other.clone();
            return;
        }
        let n = self.count + other.count;
        let w = self.count * other.count / n;
        for i in 0..self.mean.len() {
            let delta = other.mean[i] - self.mean[i];
            self.mean[i] += delta * other.count / n;
            self.m2[i] += other.m2[i] + delta * delta * w;
        }
        self.count = n;
    }

    fn standard_errors(&self) -> Option<Vec<f64>> {
        if self.count < 2.0 {
            return None;
        }
        Some(
            self.m2
                .iter()
                .map(|s| (s / (self.count - 1.0) / self.count).max(0.0).sqrt())
                .collect(),
        )
    }
}

/// Precomputed per-mode maps for the inner loop.
struct Kernel {
    d: usize,
    /// Column-major `H_i = I + αA_i`.
    h: Vec<Vec<f64>>,
    /// `α b_i`.
    g: Vec<Vec<f64>>,
    /// Row-major transition matrix.
    rows: Vec<Vec<f64>>,
    initial: Vec<f64>,
}

impl Kernel {
    fn new(sys: &JumpLinearSystem) -> Self {
        let n = sys.modes();
        Self {
            d: sys.dim(),
            h: (0..n).map(|i| sys.h(i).as_slice().to_vec()).collect(),
            g: (0..n).map(|i| sys.g(i).as_slice().to_vec()).collect(),
            rows: (0..n)
                .map(|i| sys.chain().transition().row(i).iter().copied().collect())
                .collect(),
            initial: sys.chain().initial().iter().copied().collect(),
        }
    }

    fn start<R: Rng>(&self, rng: &mut R) -> usize {
        sample_categorical(self.initial.iter().copied(), rng.random())
    }

    /// `xi ← H_z xi + g_z` and returns the next mode.
    fn step<R: Rng>(&self, xi: &mut [f64], scratch: &mut [f64], z: usize, rng: &mut R) -> usize {
        let d = self.d;
        let h = &self.h[z];
        scratch.copy_from_slice(&self.g[z]);
        for (c, &xc) in xi.iter().enumerate() {
            let col = &h[c * d..(c + 1) * d];
            for r in 0..d {
                scratch[r] += col[r] * xc;
            }
        }
        xi.copy_from_slice(scratch);
        sample_categorical(self.rows[z].iter().copied(), rng.random())
    }
}

fn stream(base_seed: u64, t: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(t as u64);
    rng
}

/// One sample path `(ξᵏ, zᵏ)` for `k = 0..=horizon`, using the same random
/// stream as trajectory `t` in [`simulate_moments`].
pub fn sample_path(
    sys: &JumpLinearSystem,
    xi0: &DVector<f64>,
    base_seed: u64,
    t: usize,
    horizon: usize,
) -> Result<Vec<(DVector<f64>, usize)>> {
    check_xi0(sys, xi0)?;
    let kernel = Kernel::new(sys);
    let mut rng = stream(base_seed, t);
    let mut xi = xi0.as_slice().to_vec();
    let mut scratch = vec![0.0; xi.len()];
    let mut z = kernel.start(&mut rng);
    let mut out = Vec::with_capacity(horizon + 1);
    out.push((xi0.clone(), z));
    for _ in 0..horizon {
        z = kernel.step(&mut xi, &mut scratch, z, &mut rng);
        out.push((DVector::from_column_slice(&xi), z));
    }
    Ok(out)
}

fn check_xi0(sys: &JumpLinearSystem, xi0: &DVector<f64>) -> Result<()> {
    if xi0.len() != sys.dim() || xi0.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid(format!(
            "initial state must be a finite vector of length {}",
            sys.dim()
        )));
    }
    Ok(())
}

struct ChunkResult {
    stats: Vec<Welford>,
    overflow_step: Option<usize>,
}

fn simulate_chunk(
    kernel: &Kernel,
    layout: &Layout,
    xi0: &[f64],
    cfg: &McConfig,
    steps: &[usize],
    range: std::ops::Range<usize>,
) -> ChunkResult {
    let mut stats = vec![Welford::new(layout.len()); steps.len()];
    let mut features = vec![0.0; layout.len()];
    let mut xi = vec![0.0; xi0.len()];
    let mut scratch = vec![0.0; xi0.len()];
    let mut overflow_step: Option<usize> = None;
    for t in range {
        let mut rng = stream(cfg.base_seed, t);
        xi.copy_from_slice(xi0);
        let mut z = kernel.start(&mut rng);
        let mut next_record = 0;
        let mut finite = true;
        for k in 0..=cfg.horizon {
            if k > 0 {
                z = kernel.step(&mut xi, &mut scratch, z, &mut rng);
                if finite && xi.iter().any(|x| !x.is_finite()) {
                    finite = false;
                    overflow_step = Some(overflow_step.map_or(k, |s| s.min(k)));
                }
            }
            if next_record < steps.len() && steps[next_record] == k {
                layout.fill(&xi, z, &mut features);
                stats[next_record].push(&features);
                next_record += 1;
                if next_record == steps.len() {
                    break;
                }
            }
        }
    }
    ChunkResult {
        stats,
        overflow_step,
    }
}

/// Empirical moments at the configured steps with `ξ⁰` fixed and `z⁰ ~ p⁰`.
pub fn simulate_moments(
    sys: &JumpLinearSystem,
    xi0: &DVector<f64>,
    cfg: &McConfig,
) -> Result<McEstimate> {
    cfg.validate()?;
    check_xi0(sys, xi0)?;
    let kernel = Kernel::new(sys);
    let layout = Layout {
        n: sys.modes(),
        d: sys.dim(),
    };
    let steps = cfg.steps();
    let chunks = cfg.trajectories.div_ceil(CHUNK);
    let results: Vec<ChunkResult> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let range = c * CHUNK..((c + 1) * CHUNK).min(cfg.trajectories);
            simulate_chunk(&kernel, &layout, xi0.as_slice(), cfg, &steps, range)
        })
        .collect();

    let mut total = vec![Welford::new(layout.len()); steps.len()];
    let mut overflow_step: Option<usize> = None;
    for r in &results {
        for (acc, s) in total.iter_mut().zip(&r.stats) {
            acc.merge(s);
        }
        if let Some(k) = r.overflow_step {
            overflow_step = Some(overflow_step.map_or(k, |s| s.min(k)));
        }
    }
    let steps = steps
        .iter()
        .zip(&total)
        .map(|(&k, acc)| StepEstimate {
            k,
            value: layout.unpack(&acc.mean),
            se: acc.standard_errors().map(|se| layout.unpack(&se)),
        })
        .collect();
    Ok(McEstimate {
        trajectories: cfg.trajectories,
        steps,
        overflow_step,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Growth {
    Growing,
    Settling,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceVerdict {
    pub verdict: Growth,
    /// Fitted slope of `ln E‖ξᵏ‖²` per step over the tail.
    pub slope: Option<f64>,
    pub slope_se: Option<f64>,
    pub overflow_step: Option<usize>,
}

/// Slope per step that separates growth from settling.
pub const GROWTH_TOL: f64 = 1e-3;

/// Fits `ln E‖ξᵏ‖²` against `k` over the recorded steps in the second half
/// of the horizon. Growing when the slope exceeds [`GROWTH_TOL`] by two
/// standard errors, settling when it is below by two, inconclusive otherwise.
pub fn divergence_probe(
    sys: &JumpLinearSystem,
    xi0: &DVector<f64>,
    cfg: &McConfig,
) -> Result<DivergenceVerdict> {
    let est = simulate_moments(sys, xi0, cfg)?;
    if let Some(k) = est.overflow_step {
        return Ok(DivergenceVerdict {
            verdict: Growth::Growing,
            slope: None,
            slope_se: None,
            overflow_step: Some(k),
        });
    }
    let half = cfg.horizon / 2;
    let tail: Vec<(f64, f64)> = est
        .steps
        .iter()
        .filter(|s| s.k >= half)
        .map(|s| (s.k as f64, s.value.mse))
        .collect();
    if tail.iter().all(|(_, m)| *m == 0.0) && !tail.is_empty() {
        return Ok(DivergenceVerdict {
            verdict: Growth::Settling,
            slope: None,
            slope_se: None,
            overflow_step: None,
        });
    }
    let points: Vec<(f64, f64)> = tail
        .iter()
        .filter(|(_, m)| *m > 0.0 && m.is_finite())
        .map(|(k, m)| (*k, m.ln()))
        .collect();
    if points.len() < 3 {
        return Ok(DivergenceVerdict {
            verdict: Growth::Inconclusive,
            slope: None,
            slope_se: None,
            overflow_step: None,
        });
    }
    let (slope, se) = regression(&points);
    let verdict = if slope - 2.0 * se > GROWTH_TOL {
        Growth::Growing
    } else if slope + 2.0 * se < GROWTH_TOL {
        Growth::Settling
    } else {
        Growth::Inconclusive
    };
    Ok(DivergenceVerdict {
        verdict,
        slope: Some(slope),
        slope_se: Some(se),
        overflow_step: None,
    })
}

/// Least-squares slope and its standard error.
fn regression(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let rss: f64 = points
        .iter()
        .map(|p| (p.1 - my - slope * (p.0 - mx)).powi(2))
        .sum();
    let se = (rss / (n - 2.0) / sxx).sqrt();
    (slope, se)
}
