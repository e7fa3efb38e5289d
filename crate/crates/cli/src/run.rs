//! Subcommand dispatch and report assembly.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::Serialize;
use tdmjls::analysis::{self, AnalysisMode, BoundsReport, StabilityReport, SteadyState, SweepRow};
use tdmjls::chain::MarkovChain;
use tdmjls::lti::RateReport;
use tdmjls::mc::{self, McConfig};
use tdmjls::mjls;
use tdmjls::tdmodel::{self, BuildWarning};
use tdmjls::JumpLinearSystem;

use crate::config::{ConfigError, ConfigFile, McSection, Problem, ProblemConfig, StepSizes};
use crate::output;

pub const DEFAULT_OUT_DIR: &str = "out";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Analyze,
    Simulate,
    Sweep,
    CriticalAlpha,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Analyze => "analyze",
            Command::Simulate => "simulate",
            Command::Sweep => "sweep",
            Command::CriticalAlpha => "critical-alpha",
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub horizon: Option<usize>,
    pub alpha: Option<Vec<f64>>,
    pub mc_trajectories: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, f: &mut ConfigFile) {
        if let Some(h) = self.horizon {
            f.horizon = Some(h);
        }
        if let Some(a) = &self.alpha {
            f.alpha = Some(match a.as_slice() {
                [single] => StepSizes::Single(*single),
                _ => StepSizes::List(a.clone()),
            });
        }
        if self.seed.is_some() || self.mc_trajectories.is_some() {
            let mc = f.mc.get_or_insert_with(McSection::default);
            if let Some(s) = self.seed {
                mc.seed = Some(s);
            }
            if let Some(t) = self.mc_trajectories {
                mc.trajectories = Some(t);
            }
        }
        if let Some(out) = &self.out {
            f.output = Some(out.display().to_string());
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Analysis(#[from] tdmjls::Error),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    /// 1 for bad input, 2 for analysis refusals, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io(_) | CliError::Usage(_) => 1,
            CliError::Analysis(tdmjls::Error::InvalidInput(_)) => 1,
            CliError::Analysis(tdmjls::Error::Numerical(_)) => 3,
            CliError::Analysis(_) => 2,
        }
    }
}

pub(crate) fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// A config turned into a jump system at one step size.
struct Instance {
    sys: JumpLinearSystem,
    xi0: DVector<f64>,
    theta_star: Option<DVector<f64>>,
    warnings: Vec<String>,
}

fn build_instance(cfg: &ProblemConfig, alpha: f64) -> Result<Instance, CliError> {
    match &cfg.problem {
        Problem::Raw(raw) => {
            let chain = MarkovChain::new(raw.transition.clone(), raw.p0.clone())?;
            let (sys, warnings) =
                tdmodel::build_generic(raw.a.clone(), raw.b.clone(), chain, alpha)?;
            Ok(Instance {
                sys,
                xi0: raw.xi0.clone(),
                theta_star: None,
                warnings: warnings.iter().map(describe_warning).collect(),
            })
        }
        Problem::Mdp(mdp) => {
            let model = tdmodel::build_td0_with(&mdp.problem, alpha, !mdp.keep_unreachable_pairs)?;
            Ok(Instance {
                xi0: &mdp.theta0 - &model.theta_star,
                sys: model.sys,
                theta_star: Some(model.theta_star),
                warnings: Vec::new(),
            })
        }
    }
}

fn describe_warning(w: &BuildWarning) -> String {
    match w {
        BuildWarning::NotCentered => {
            "offsets are not centered under the stationary distribution".into()
        }
        BuildWarning::NotHurwitz => "mean matrix is not Hurwitz".into(),
        BuildWarning::NonErgodic => "mode chain is not ergodic".into(),
    }
}

fn single_alpha(cfg: &ProblemConfig, cmd: Command) -> Result<f64, CliError> {
    match cfg.alphas().as_slice() {
        [a] => Ok(*a),
        many => Err(CliError::Usage(format!(
            "{} needs a single alpha, got {} values; use sweep for lists",
            cmd.name(),
            many.len()
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryRow {
    pub k: usize,
    pub mse_exact: f64,
    pub mse_lower: f64,
    pub mse_upper: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse_mc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse_mc_se: Option<f64>,
}

/// Envelope parameters without the per-step table, which lives in the trajectory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundsSummary {
    pub delta_inf: f64,
    pub rate: f64,
    pub sigma_h: RateReport,
    pub mixing_rate: f64,
    pub c0: f64,
    pub floor: f64,
    pub boundary_case: bool,
}

impl From<&BoundsReport> for BoundsSummary {
    fn from(b: &BoundsReport) -> Self {
        BoundsSummary {
            delta_inf: b.delta_inf,
            rate: b.rate,
            sigma_h: b.sigma_h,
            mixing_rate: b.mixing_rate,
            c0: b.c0,
            floor: b.floor,
            boundary_case: b.boundary_case,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McSummary {
    pub trajectories: usize,
    pub seed: u64,
    /// Share of recorded steps whose exact MSE lies within three standard errors.
    pub within_3se: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub command: String,
    pub mode: AnalysisMode,
    pub alpha: f64,
    pub horizon: usize,
    pub stability: StabilityReport,
    pub steady_state: SteadyState,
    pub bounds: BoundsSummary,
    pub trajectory: Vec<TrajectoryRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mc: Option<McSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta_star: Option<DVector<f64>>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub command: String,
    pub mode: AnalysisMode,
    pub rows: Vec<SweepRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriticalAlphaReport {
    pub command: String,
    pub mode: AnalysisMode,
    pub critical_alpha: f64,
}

/// Output of a completed run: the files written and a summary for stdout.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub summary: String,
}

pub fn out_dir(cfg: &ProblemConfig) -> PathBuf {
    cfg.output
        .clone()
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

pub fn run(cmd: Command, cfg: &ProblemConfig) -> Result<Outcome, CliError> {
    let dir = out_dir(cfg);
    std::fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
    match cmd {
        Command::Analyze | Command::Simulate => {
            let report = analyze(cmd, cfg)?;
            let csv = dir.join("trajectory.csv");
            output::write_file(
                &csv,
                &output::trajectory_csv(&report.trajectory, cmd == Command::Simulate),
            )?;
            let json = dir.join("report.json");
            output::write_json(&json, &report)?;
            Ok(Outcome {
                summary: summarize_run(&report),
                files: vec![csv, json],
            })
        }
        Command::Sweep => {
            let report = sweep(cfg)?;
            let csv = dir.join("sweep.csv");
            output::write_file(&csv, &output::sweep_csv(&report.rows))?;
            let json = dir.join("report.json");
            output::write_json(&json, &report)?;
            Ok(Outcome {
                summary: summarize_sweep(&report),
                files: vec![csv, json],
            })
        }
        Command::CriticalAlpha => {
            let report = critical(cfg)?;
            let json = dir.join("report.json");
            output::write_json(&json, &report)?;
            let summary = format!(
                "mode: {}\ncritical alpha = {:.16e}\n",
                mode_name(report.mode),
                report.critical_alpha
            );
            Ok(Outcome {
                files: vec![json],
                summary,
            })
        }
    }
}

fn mode_name(mode: AnalysisMode) -> &'static str {
    match mode {
        AnalysisMode::Iid => "iid",
        AnalysisMode::Markov => "markov",
    }
}

/// Stability, steady state, exact trajectory and envelope; with `simulate`,
/// also the Monte Carlo estimate of the MSE.
pub fn analyze(cmd: Command, cfg: &ProblemConfig) -> Result<RunReport, CliError> {
    let alpha = single_alpha(cfg, cmd)?;
    let inst = build_instance(cfg, alpha)?;
    let mode = cfg.mode;
    let stability = analysis::stability_report(&inst.sys, mode)?;
    if !stability.stable {
        return Err(tdmjls::Error::Unstable {
            what: "H22 (second-moment dynamics)".into(),
            spectral_radius: stability.sigma_h22.spectral_radius,
        }
        .into());
    }

    // In IID mode every mode, including z⁰, is drawn from the same distribution.
    let (sim_sys, steady, bounds, mse) = match mode {
        AnalysisMode::Markov => {
            let m0 = mjls::initial_moments(&inst.sys, &inst.xi0)?;
            let run = analysis::markov_trajectory_with_limits(&inst.sys, &m0, cfg.horizon)?;
            (inst.sys.clone(), run.steady, run.bounds, run.mse)
        }
        AnalysisMode::Iid => {
            let p = analysis::iid_distribution(&inst.sys)?;
            let model = analysis::build_iid_model(&inst.sys, &p)?;
            let q0 = &inst.xi0 * inst.xi0.transpose();
            let run = analysis::iid_trajectory_with_limits(&model, &inst.xi0, &q0, cfg.horizon)?;
            let sys = inst.sys.with_chain(MarkovChain::iid(p)?)?;
            (sys, run.steady, run.bounds, run.mse)
        }
    };

    let mut trajectory: Vec<TrajectoryRow> = mse
        .iter()
        .enumerate()
        .map(|(k, &m)| TrajectoryRow {
            k,
            mse_exact: m,
            mse_lower: bounds.envelope[k].0,
            mse_upper: bounds.envelope[k].1,
            mse_mc: None,
            mse_mc_se: None,
        })
        .collect();

    let mc_summary = if cmd == Command::Simulate {
        let settings = cfg.mc_settings();
        let mc_cfg = McConfig {
            trajectories: settings.trajectories,
            horizon: cfg.horizon,
            base_seed: settings.seed,
            record_steps: settings.record_steps.clone(),
        };
        let est = mc::simulate_moments(&sim_sys, &inst.xi0, &mc_cfg)?;
        if let Some(k) = est.overflow_step {
            return Err(tdmjls::Error::Numerical(format!(
                "Monte Carlo iterate overflowed at step {k} although the moments are stable"
            ))
            .into());
        }
        let mut hits = 0usize;
        let mut checked = 0usize;
        for s in &est.steps {
            let row = &mut trajectory[s.k];
            row.mse_mc = Some(s.value.mse);
            row.mse_mc_se = s.se.as_ref().map(|se| se.mse);
            if let Some(se) = row.mse_mc_se {
                checked += 1;
                if (row.mse_exact - s.value.mse).abs() <= 3.0 * se + 1e-12 * row.mse_exact.abs() {
                    hits += 1;
                }
            }
        }
        Some(McSummary {
            trajectories: settings.trajectories,
            seed: settings.seed,
            within_3se: (checked > 0).then(|| hits as f64 / checked as f64),
        })
    } else {
        None
    };

    Ok(RunReport {
        command: cmd.name().into(),
        mode,
        alpha,
        horizon: cfg.horizon,
        stability,
        bounds: BoundsSummary::from(&bounds),
        steady_state: steady,
        trajectory,
        mc: mc_summary,
        theta_star: inst.theta_star,
        warnings: inst.warnings,
    })
}

pub fn sweep(cfg: &ProblemConfig) -> Result<SweepReport, CliError> {
    let alphas = cfg.alphas();
    let inst = build_instance(cfg, alphas[0])?;
    let rows = analysis::alpha_sweep(&inst.sys, cfg.mode, &alphas)?;
    Ok(SweepReport {
        command: Command::Sweep.name().into(),
        mode: cfg.mode,
        rows,
    })
}

pub fn critical(cfg: &ProblemConfig) -> Result<CriticalAlphaReport, CliError> {
    // The system is rebuilt at each trial step size; the configured alpha only seeds it.
    let inst = build_instance(cfg, cfg.alphas()[0])?;
    let critical_alpha = analysis::critical_alpha_auto(&inst.sys, cfg.mode)?;
    Ok(CriticalAlphaReport {
        command: Command::CriticalAlpha.name().into(),
        mode: cfg.mode,
        critical_alpha,
    })
}

fn summarize_run(r: &RunReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "mode: {}, alpha = {}", mode_name(r.mode), r.alpha);
    let _ = writeln!(
        s,
        "sigma(H11) = {:.10}, sigma(H22) = {:.10}, sigma(H) = {:.10}",
        r.stability.sigma_h11.spectral_radius,
        r.stability.sigma_h22.spectral_radius,
        r.stability.sigma_h.spectral_radius
    );
    if let Some(p) = r.stability.predicted_sigma_h22 {
        let _ = writeln!(s, "first-order sigma(H22) = {p:.10}");
    }
    let _ = writeln!(s, "mean-square stable: yes");
    let _ = writeln!(s, "delta_inf = {:.10e}", r.steady_state.delta_inf);
    let _ = writeln!(s, "rate = {:.10}, C0 = {:.6e}", r.bounds.rate, r.bounds.c0);
    if let Some(last) = r.trajectory.last() {
        let _ = writeln!(s, "E|xi|^2 at k = {}: {:.10e}", last.k, last.mse_exact);
    }
    if let Some(mc) = &r.mc {
        let _ = write!(
            s,
            "monte carlo: {} trajectories, seed {}",
            mc.trajectories, mc.seed
        );
        match mc.within_3se {
            Some(f) => {
                let _ = writeln!(s, ", {:.1}% of steps within 3 SE", 100.0 * f);
            }
            None => s.push('\n'),
        }
    }
    for w in &r.warnings {
        let _ = writeln!(s, "warning: {w}");
    }
    s
}

fn summarize_sweep(r: &SweepReport) -> String {
    let mut s = format!("mode: {}\n", mode_name(r.mode));
    for row in &r.rows {
        let _ = match row.delta_inf {
            Some(d) => writeln!(
                s,
                "alpha = {:<12} sigma(H22) = {:.10}  delta_inf = {d:.10e}",
                row.alpha, row.sigma_h22
            ),
            None => writeln!(
                s,
                "alpha = {:<12} sigma(H22) = {:.10}  unstable",
                row.alpha, row.sigma_h22
            ),
        };
    }
    s
}
