//! CSV and JSON writers.
//!
//! Floats are written with 17 significant digits so values survive a round trip.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use tdmjls::analysis::SweepRow;

use crate::run::{io_error, CliError, TrajectoryRow};

pub const TRAJECTORY_COLUMNS: &[&str] = &["k", "mse_exact", "mse_lower", "mse_upper"];
pub const MC_COLUMNS: &[&str] = &["mse_mc", "mse_mc_se"];
pub const SWEEP_COLUMNS: &[&str] = &[
    "alpha",
    "sigma_H11",
    "sigma_H22",
    "sigma_pred_H22",
    "delta_inf",
];

/// Marker written in the `delta_inf` column of a sweep row that is not mean-square stable.
pub const UNSTABLE: &str = "unstable";

pub fn float(x: f64) -> String {
    format!("{x:.16e}")
}

fn opt(x: Option<f64>) -> String {
    x.map(float).unwrap_or_default()
}

pub fn trajectory_csv(rows: &[TrajectoryRow], with_mc: bool) -> String {
    let mut header: Vec<&str> = TRAJECTORY_COLUMNS.to_vec();
    if with_mc {
        header.extend_from_slice(MC_COLUMNS);
    }
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        let _ = write!(
            out,
            "{},{},{},{}",
            r.k,
            float(r.mse_exact),
            float(r.mse_lower),
            float(r.mse_upper)
        );
        if with_mc {
            let _ = write!(out, ",{},{}", opt(r.mse_mc), opt(r.mse_mc_se));
        }
        out.push('\n');
    }
    out
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = SWEEP_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        let delta = match r.delta_inf {
            Some(d) if r.stable => float(d),
            _ => UNSTABLE.to_string(),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            float(r.alpha),
            float(r.sigma_h11),
            float(r.sigma_h22),
            opt(r.predicted_sigma_h22),
            delta
        );
    }
    out
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| io_error(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    text.push('\n');
    write_file(path, &text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_carry_seventeen_digits() {
        let s = float(0.1);
        assert_eq!(s, "1.0000000000000001e-1");
        assert_eq!(s.parse::<f64>().unwrap(), 0.1);
        let x = 2.0 / 3.0;
        assert_eq!(float(x).parse::<f64>().unwrap(), x);
    }

    #[test]
    fn unstable_rows_are_marked() {
        let rows = vec![SweepRow {
            alpha: 2.5,
            sigma_h11: 1.5,
            sigma_h22: 2.25,
            predicted_sigma_h22: None,
            delta_inf: None,
            stable: false,
        }];
        let csv = sweep_csv(&rows);
        let line = csv.lines().nth(1).unwrap();
        assert!(line.ends_with(",,unstable"), "{line}");
    }
}
