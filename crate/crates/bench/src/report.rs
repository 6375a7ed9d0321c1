//! Machine-readable run reports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Quartiles {
    /// Linear-interpolation quantiles of a nonempty sample.
    pub fn of(values: &[f64]) -> Self {
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        let q = |p: f64| {
            if s.is_empty() {
                return f64::NAN;
            }
            let pos = p * (s.len() - 1) as f64;
            let (i, frac) = (pos.floor() as usize, pos.fract());
            if i + 1 < s.len() {
                s[i] + frac * (s[i + 1] - s[i])
            } else {
                s[i]
            }
        };
        Self {
            min: q(0.0),
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            max: q(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub algorithm: String,
    pub episode_id: String,
    pub utility: f64,
    pub remaining_budget_frac: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmSummary {
    pub name: String,
    /// Mean over episodes of utility per step.
    pub mean_utility: f64,
    /// Distribution of per-step utility across episodes.
    pub quartiles: Quartiles,
    pub remaining_budget_frac: f64,
    pub violations: usize,
    pub wall_ms: f64,
}

impl AlgorithmSummary {
    pub fn from_rows(name: &str, horizon: usize, rows: &[EpisodeRow], wall_ms: f64) -> Self {
        let per_step: Vec<f64> = rows.iter().map(|r| r.utility / horizon as f64).collect();
        let n = rows.len().max(1) as f64;
        Self {
            name: name.to_string(),
            mean_utility: per_step.iter().sum::<f64>() / n,
            quartiles: Quartiles::of(&per_step),
            remaining_budget_frac: rows.iter().map(|r| r.remaining_budget_frac).sum::<f64>() / n,
            violations: rows.iter().filter(|r| !r.feasible).count(),
            wall_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub schema_version: u32,
    pub version: String,
    pub horizon: usize,
    pub test_episodes: usize,
    pub seeds: serde_json::Value,
    pub config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub meta: ReportMeta,
    pub algorithms: Vec<AlgorithmSummary>,
    #[serde(skip)]
    pub episodes: Vec<EpisodeRow>,
}

impl RunReport {
    pub fn algorithm(&self, name: &str) -> Option<&AlgorithmSummary> {
        self.algorithms.iter().find(|a| a.name == name)
    }

    pub fn total_violations(&self) -> usize {
        self.algorithms.iter().map(|a| a.violations).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// The JSON with wall-time fields zeroed, for determinism comparisons.
    pub fn to_json_without_timing(&self) -> String {
        let mut copy = self.clone();
        copy.algorithms.iter_mut().for_each(|a| a.wall_ms = 0.0);
        copy.to_json()
    }

    pub fn episodes_csv(&self) -> String {
        let mut out = String::from("algorithm,episode_id,utility,remaining_budget_frac,feasible\n");
        for r in &self.episodes {
            let _ = writeln!(
                out,
                "{},{},{:?},{:?},{}",
                r.algorithm, r.episode_id, r.utility, r.remaining_budget_frac, r.feasible
            );
        }
        out
    }

    /// Writes `<stem>.json` and `<stem>_episodes.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| BenchError::io(dir, e))?;
        let json = dir.join(format!("{stem}.json"));
        fs::write(&json, self.to_json()).map_err(|e| BenchError::io(&json, e))?;
        let csv = dir.join(format!("{stem}_episodes.csv"));
        fs::write(&csv, self.episodes_csv()).map_err(|e| BenchError::io(&csv, e))
    }
}

pub fn version_string() -> String {
    format!("laau-bench {}", env!("CARGO_PKG_VERSION"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quartiles_interpolate() {
        let q = Quartiles::of(&[4.0, 1.0, 3.0, 2.0, 5.0]);
        assert_eq!((q.min, q.q1, q.median, q.q3, q.max), (1.0, 2.0, 3.0, 4.0, 5.0));
        let q = Quartiles::of(&[0.0, 1.0]);
        assert_eq!(q.median, 0.5);
    }
}
