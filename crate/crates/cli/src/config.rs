//! Problem configuration files.
//!
//! A config is a JSON object whose `kind` is either `"raw"` (matrices given
//! directly) or `"mdp"` (TD(0) on a finite Markov reward process). Matrices
//! are row-major nested arrays.

use std::fmt;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use tdmjls::analysis::AnalysisMode;
use tdmjls::chain::STOCHASTIC_TOL;
use tdmjls::tdmodel::PolicyEvalProblem;

pub const DEFAULT_HORIZON: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepSizes {
    Single(f64),
    List(Vec<f64>),
}

impl StepSizes {
    pub fn values(&self) -> Vec<f64> {
        match self {
            StepSizes::Single(a) => vec![*a],
            StepSizes::List(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectories: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_steps: Option<Vec<usize>>,
}

/// On-disk layout. Every field is optional here so that validation can
/// report all problems at once.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    #[serde(rename = "A", default, skip_serializing_if = "Option::is_none")]
    pub a: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<Vec<f64>>>,
    #[serde(rename = "P", default, skip_serializing_if = "Option::is_none")]
    pub p: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xi0: Option<Vec<f64>>,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_s: Option<usize>,
    #[serde(rename = "P_s", default, skip_serializing_if = "Option::is_none")]
    pub p_s: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(rename = "Phi", default, skip_serializing_if = "Option::is_none")]
    pub phi: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_state: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keep_unreachable_pairs: Option<bool>,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<StepSizes>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<AnalysisMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc: Option<McSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
}

const RAW_FIELDS: &[&str] = &["n", "d", "A", "b", "P", "p0", "xi0"];
const MDP_FIELDS: &[&str] = &[
    "n_s",
    "P_s",
    "r",
    "gamma",
    "Phi",
    "initial_state",
    "theta0",
    "keep_unreachable_pairs",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RawProblem {
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DVector<f64>>,
    pub transition: DMatrix<f64>,
    pub p0: DVector<f64>,
    pub xi0: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MdpProblem {
    pub problem: PolicyEvalProblem,
    pub theta0: DVector<f64>,
    pub keep_unreachable_pairs: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Problem {
    Raw(RawProblem),
    Mdp(MdpProblem),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct McSettings {
    pub trajectories: usize,
    pub seed: u64,
    pub record_steps: Vec<usize>,
}

pub const DEFAULT_MC_TRAJECTORIES: usize = 10_000;

/// A validated configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemConfig {
    pub problem: Problem,
    pub alpha: StepSizes,
    pub mode: AnalysisMode,
    pub horizon: usize,
    pub mc: Option<McSettings>,
    pub output: Option<PathBuf>,
}

impl ProblemConfig {
    pub fn alphas(&self) -> Vec<f64> {
        self.alpha.values()
    }

    pub fn mc_settings(&self) -> McSettings {
        self.mc.clone().unwrap_or(McSettings {
            trajectories: DEFAULT_MC_TRAJECTORIES,
            seed: 0,
            record_steps: Vec::new(),
        })
    }

    /// Normalized on-disk form with every default filled in.
    pub fn to_file(&self) -> ConfigFile {
        let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..m.nrows())
                .map(|i| m.row(i).iter().copied().collect())
                .collect()
        };
        let vec = |v: &DVector<f64>| v.iter().copied().collect::<Vec<f64>>();
        let mut f = ConfigFile {
            alpha: Some(self.alpha.clone()),
            mode: Some(self.mode),
            horizon: Some(self.horizon),
            mc: self.mc.as_ref().map(|m| McSection {
                trajectories: Some(m.trajectories),
                seed: Some(m.seed),
                record_steps: Some(m.record_steps.clone()),
            }),
            output: self.output.as_ref().map(|p| p.display().to_string()),
            ..ConfigFile::default()
        };
        match &self.problem {
            Problem::Raw(r) => {
                f.kind = Some("raw".into());
                f.n = Some(r.a.len());
                f.d = Some(r.xi0.len());
                f.a = Some(r.a.iter().map(rows).collect());
                f.b = Some(r.b.iter().map(vec).collect());
                f.p = Some(rows(&r.transition));
                f.p0 = Some(vec(&r.p0));
                f.xi0 = Some(vec(&r.xi0));
            }
            Problem::Mdp(m) => {
                let p = &m.problem;
                f.kind = Some("mdp".into());
                f.n_s = Some(p.states());
                f.p_s = Some(rows(&p.transitions));
                f.r = Some(vec(&p.rewards));
                f.gamma = Some(p.gamma);
                f.phi = Some(rows(&p.features));
                f.initial_state = p.initial_state.as_ref().map(vec);
                f.theta0 = Some(vec(&m.theta0));
                f.keep_unreachable_pairs = Some(m.keep_unreachable_pairs);
            }
        }
        f
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("config serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    Io(String),
    Parse(String),
    Invalid(Vec<String>),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io(m) => write!(f, "cannot read config: {m}"),
            ConfigError::Parse(m) => write!(f, "config parse error: {m}"),
            ConfigError::Invalid(errs) => {
                writeln!(
                    f,
                    "invalid config ({} problem{}):",
                    errs.len(),
                    if errs.len() == 1 { "" } else { "s" }
                )?;
                for e in errs {
                    writeln!(f, "  - {e}")?;
                }
                Ok(())
            }
        }
    }
}

impl std::error::Error for ConfigError {}

pub fn parse_file(path: &Path) -> Result<ConfigFile, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
    parse_str(&text)
}

pub fn parse_str(text: &str) -> Result<ConfigFile, ConfigError> {
    serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
}

pub fn load_config(path: &Path) -> Result<ProblemConfig, ConfigError> {
    validate(parse_file(path)?)
}

/// Collects every problem with the config rather than stopping at the first.
pub fn validate(f: ConfigFile) -> Result<ProblemConfig, ConfigError> {
    let mut errs = Vec::new();
    let problem = match f.kind.as_deref() {
        Some("raw") => {
            reject_fields(&f, MDP_FIELDS, "raw", &mut errs);
            validate_raw(&f, &mut errs)
        }
        Some("mdp") => {
            reject_fields(&f, RAW_FIELDS, "mdp", &mut errs);
            validate_mdp(&f, &mut errs)
        }
        Some(other) => {
            errs.push(format!(
                "kind: expected \"raw\" or \"mdp\", got \"{other}\""
            ));
            None
        }
        None => {
            errs.push("kind: missing (\"raw\" or \"mdp\")".into());
            None
        }
    };

    let alpha = match &f.alpha {
        None => {
            errs.push("alpha: missing".into());
            None
        }
        Some(steps) => {
            let values = steps.values();
            if values.is_empty() {
                errs.push("alpha: list is empty".into());
            }
            for (i, a) in values.iter().enumerate() {
                if !(a.is_finite() && *a >= 0.0) {
                    errs.push(format!(
                        "alpha[{i}]: must be finite and nonnegative, got {a}"
                    ));
                }
            }
            Some(steps.clone())
        }
    };

    let horizon = f.horizon.unwrap_or(DEFAULT_HORIZON);
    let mc = f.mc.as_ref().map(|m| {
        let trajectories = m.trajectories.unwrap_or(DEFAULT_MC_TRAJECTORIES);
        if trajectories == 0 {
            errs.push("mc.trajectories: must be at least 1".into());
        }
        let record_steps = m.record_steps.clone().unwrap_or_default();
        for (i, k) in record_steps.iter().enumerate() {
            if *k > horizon {
                errs.push(format!(
                    "mc.record_steps[{i}]: step {k} exceeds horizon {horizon}"
                ));
            }
        }
        McSettings {
            trajectories,
            seed: m.seed.unwrap_or(0),
            record_steps,
        }
    });

    match (problem, alpha) {
        (Some(problem), Some(alpha)) if errs.is_empty() => Ok(ProblemConfig {
            problem,
            alpha,
            mode: f.mode.unwrap_or(AnalysisMode::Markov),
            horizon,
            mc,
            output: f.output.map(PathBuf::from),
        }),
        _ => Err(ConfigError::Invalid(errs)),
    }
}

fn reject_fields(f: &ConfigFile, fields: &[&str], kind: &str, errs: &mut Vec<String>) {
    let present = |name: &str| -> bool {
        match name {
            "n" => f.n.is_some(),
            "d" => f.d.is_some(),
            "A" => f.a.is_some(),
            "b" => f.b.is_some(),
            "P" => f.p.is_some(),
            "p0" => f.p0.is_some(),
            "xi0" => f.xi0.is_some(),
            "n_s" => f.n_s.is_some(),
            "P_s" => f.p_s.is_some(),
            "r" => f.r.is_some(),
            "gamma" => f.gamma.is_some(),
            "Phi" => f.phi.is_some(),
            "initial_state" => f.initial_state.is_some(),
            "theta0" => f.theta0.is_some(),
            "keep_unreachable_pairs" => f.keep_unreachable_pairs.is_some(),
            _ => false,
        }
    };
    for name in fields {
        if present(name) {
            errs.push(format!("{name}: not allowed for kind \"{kind}\""));
        }
    }
}

fn require<'a, T>(v: &'a Option<T>, name: &str, errs: &mut Vec<String>) -> Option<&'a T> {
    if v.is_none() {
        errs.push(format!("{name}: missing"));
    }
    v.as_ref()
}

fn matrix(
    rows: &[Vec<f64>],
    r: usize,
    c: usize,
    name: &str,
    errs: &mut Vec<String>,
) -> Option<DMatrix<f64>> {
    let mut ok = true;
    if rows.len() != r {
        errs.push(format!("{name}: expected {r} rows, got {}", rows.len()));
        ok = false;
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != c {
            errs.push(format!(
                "{name}: row {i} has {} entries, expected {c}",
                row.len()
            ));
            ok = false;
        }
    }
    ok.then(|| DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn vector(v: &[f64], len: usize, name: &str, errs: &mut Vec<String>) -> Option<DVector<f64>> {
    if v.len() != len {
        errs.push(format!("{name}: expected length {len}, got {}", v.len()));
        return None;
    }
    Some(DVector::from_column_slice(v))
}

fn check_stochastic(m: &DMatrix<f64>, name: &str, errs: &mut Vec<String>) {
    for i in 0..m.nrows() {
        let row = m.row(i);
        if let Some(j) = row.iter().position(|p| !(0.0..=1.0).contains(p)) {
            errs.push(format!(
                "{name}: entry ({i}, {j}) = {} is not a probability",
                row[j]
            ));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > STOCHASTIC_TOL {
            errs.push(format!("{name}: row {i} sums to {sum}, expected 1"));
        }
    }
}

fn check_distribution(p: &DVector<f64>, name: &str, errs: &mut Vec<String>) {
    if let Some(i) = p.iter().position(|x| *x < 0.0) {
        errs.push(format!("{name}: entry {i} is negative"));
    }
    let sum = p.sum();
    if (sum - 1.0).abs() > STOCHASTIC_TOL {
        errs.push(format!("{name}: sums to {sum}, expected 1"));
    }
}

fn positive(v: Option<&usize>, name: &str, errs: &mut Vec<String>) -> Option<usize> {
    match v {
        Some(0) => {
            errs.push(format!("{name}: must be at least 1"));
            None
        }
        other => other.copied(),
    }
}

fn validate_raw(f: &ConfigFile, errs: &mut Vec<String>) -> Option<Problem> {
    let n = positive(require(&f.n, "n", errs), "n", errs);
    let d = positive(require(&f.d, "d", errs), "d", errs);
    let a = require(&f.a, "A", errs);
    let b = require(&f.b, "b", errs);
    let p = require(&f.p, "P", errs);
    let p0 = require(&f.p0, "p0", errs);
    let (n, d) = (n?, d?);

    let a = a.and_then(|a| {
        if a.len() != n {
            errs.push(format!("A: expected {n} matrices, got {}", a.len()));
            return None;
        }
        let ms: Vec<_> = a
            .iter()
            .enumerate()
            .map(|(i, m)| matrix(m, d, d, &format!("A[{i}]"), errs))
            .collect();
        ms.into_iter().collect::<Option<Vec<_>>>()
    });
    let b = b.and_then(|b| {
        if b.len() != n {
            errs.push(format!("b: expected {n} vectors, got {}", b.len()));
            return None;
        }
        let vs: Vec<_> = b
            .iter()
            .enumerate()
            .map(|(i, v)| vector(v, d, &format!("b[{i}]"), errs))
            .collect();
        vs.into_iter().collect::<Option<Vec<_>>>()
    });
    let p = p.and_then(|p| matrix(p, n, n, "P", errs));
    if let Some(p) = &p {
        check_stochastic(p, "P", errs);
    }
    let p0 = p0.and_then(|p0| vector(p0, n, "p0", errs));
    if let Some(p0) = &p0 {
        check_distribution(p0, "p0", errs);
    }
    let xi0 = match &f.xi0 {
        Some(x) => vector(x, d, "xi0", errs),
        None => Some(DVector::zeros(d)),
    };
    Some(Problem::Raw(RawProblem {
        a: a?,
        b: b?,
        transition: p?,
        p0: p0?,
        xi0: xi0?,
    }))
}

fn validate_mdp(f: &ConfigFile, errs: &mut Vec<String>) -> Option<Problem> {
    let ns = positive(require(&f.n_s, "n_s", errs), "n_s", errs);
    let p_s = require(&f.p_s, "P_s", errs);
    let r = require(&f.r, "r", errs);
    let gamma = require(&f.gamma, "gamma", errs).copied();
    let phi = require(&f.phi, "Phi", errs);
    let ns = ns?;

    let transitions = p_s.and_then(|p| matrix(p, ns, ns, "P_s", errs));
    if let Some(p) = &transitions {
        check_stochastic(p, "P_s", errs);
    }
    let rewards = r.and_then(|r| vector(r, ns, "r", errs));
    if let Some(g) = gamma {
        if !(0.0..1.0).contains(&g) {
            errs.push(format!("gamma: must lie in [0, 1), got {g}"));
        }
    }
    let d = phi.and_then(|rows| rows.first().map(|r| r.len()));
    if d == Some(0) {
        errs.push("Phi: rows must have at least one feature".into());
    }
    let features = match (phi, d) {
        (Some(rows), Some(d)) if d > 0 => matrix(rows, ns, d, "Phi", errs),
        (Some(_), None) => {
            errs.push(format!("Phi: expected {ns} rows, got 0"));
            None
        }
        _ => None,
    };
    let initial_state = match &f.initial_state {
        Some(s) => {
            let v = vector(s, ns, "initial_state", errs);
            if let Some(v) = &v {
                check_distribution(v, "initial_state", errs);
            }
            Some(v)
        }
        None => None,
    };
    let theta0 = match (&f.theta0, d) {
        (Some(t), Some(d)) => vector(t, d, "theta0", errs),
        (None, Some(d)) => Some(DVector::zeros(d)),
        _ => None,
    };
    let problem = PolicyEvalProblem {
        transitions: transitions?,
        rewards: rewards?,
        gamma: gamma?,
        features: features?,
        initial_state: match initial_state {
            Some(v) => Some(v?),
            None => None,
        },
    };
    if errs.is_empty() {
        if let Err(e) = problem.validate() {
            errs.push(format!("problem: {e}"));
        }
    }
    Some(Problem::Mdp(MdpProblem {
        problem,
        theta0: theta0?,
        keep_unreachable_pairs: f.keep_unreachable_pairs.unwrap_or(false),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_raw() -> &'static str {
        r#"{"kind": "raw", "n": 1, "d": 1, "A": [[[-1]]], "b": [[0]], "P": [[1]], "p0": [1], "alpha": 0.1}"#
    }

    #[test]
    fn minimal_raw_loads() {
        let cfg = validate(parse_str(minimal_raw()).unwrap()).unwrap();
        assert_eq!(cfg.horizon, DEFAULT_HORIZON);
        assert_eq!(cfg.mode, AnalysisMode::Markov);
        assert_eq!(cfg.alphas(), vec![0.1]);
    }

    #[test]
    fn bad_row_is_named() {
        let text = r#"{"kind": "raw", "n": 2, "d": 1, "A": [[[-1]], [[-1]]], "b": [[1], [-1]],
            "P": [[0.5, 0.5], [0.6, 0.3]], "p0": [1, 0], "alpha": 0.1}"#;
        let err = validate(parse_str(text).unwrap()).unwrap_err();
        let ConfigError::Invalid(errs) = err else {
            panic!()
        };
        assert!(
            errs.iter().any(|e| e.contains("P: row 1 sums to")),
            "{errs:?}"
        );
    }

    #[test]
    fn all_errors_are_reported() {
        let text = r#"{"kind": "raw", "n": 2, "d": 2, "A": [[[-1, 0], [0, -1, 3]]], "b": [[1], [-1, 0]],
            "P": [[0.5, 0.6], [0.5, 0.5]], "p0": [0.5, 0.4], "alpha": -1, "gamma": 0.5}"#;
        let ConfigError::Invalid(errs) = validate(parse_str(text).unwrap()).unwrap_err() else {
            panic!()
        };
        for needle in [
            "A: expected 2 matrices",
            "b[0]: expected length 2",
            "P: row 0",
            "p0: sums",
            "alpha[0]",
            "gamma: not allowed",
        ] {
            assert!(
                errs.iter().any(|e| e.contains(needle)),
                "missing {needle}: {errs:?}"
            );
        }
    }

    #[test]
    fn parse_errors_carry_location() {
        let err = parse_str("{\n  \"kind\": \"raw\",\n  \"n\": ,\n}").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        let err = parse_str(r#"{"kind": "raw", "bogus": 1}"#).unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn mdp_loads_and_round_trips() {
        let text = r#"{"kind": "mdp", "n_s": 1, "P_s": [[1]], "r": [1], "gamma": 0.5, "Phi": [[1]],
            "alpha": [0.1, 0.01], "mode": "iid", "horizon": 50, "mc": {"trajectories": 10, "seed": 3}}"#;
        let cfg = validate(parse_str(text).unwrap()).unwrap();
        let again = validate(parse_str(&cfg.to_json()).unwrap()).unwrap();
        assert_eq!(cfg, again);
        let raw = validate(parse_str(minimal_raw()).unwrap()).unwrap();
        assert_eq!(raw, validate(parse_str(&raw.to_json()).unwrap()).unwrap());
    }

    #[test]
    fn mdp_rank_deficiency_is_reported() {
        let text = r#"{"kind": "mdp", "n_s": 2, "P_s": [[0.5, 0.5], [0.5, 0.5]], "r": [1, 0], "gamma": 0.5,
            "Phi": [[1, 2], [2, 4]], "alpha": 0.1}"#;
        let ConfigError::Invalid(errs) = validate(parse_str(text).unwrap()).unwrap_err() else {
            panic!()
        };
        assert!(errs.iter().any(|e| e.contains("rank")), "{errs:?}");
    }
}
