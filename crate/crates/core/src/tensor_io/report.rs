//! Run reports as JSON lines: one `{"type":"iter",…}` object per recorded
//! iteration followed by one `{"type":"summary",…}` object.
//!
//! Optional fields are written as `null` when a method does not produce
//! them (for example `rho` for the alternating baselines).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    /// Layer objective at the current feasible pair.
    pub objective: f64,
    /// Method-specific surrogate (diag- or H′-weighted) when it differs.
    pub surrogate: Option<f64>,
    /// `‖S − D‖_F`.
    pub primal_residual: Option<f64>,
    pub rho: Option<f64>,
    /// Support positions of `D` that changed since the last ρ update.
    pub support_change: Option<usize>,
    pub delta_s: Option<f64>,
    pub delta_l: Option<f64>,
    /// `‖(S+L)ᵗ⁺¹ − (S+L)ᵗ‖_F`.
    pub delta_sum: Option<f64>,
    pub wall_ms: Option<f64>,
}

impl IterRecord {
    pub fn objective_only(iter: usize, objective: f64) -> Self {
        Self {
            iter,
            objective,
            surrogate: None,
            primal_residual: None,
            rho: None,
            support_change: None,
            delta_s: None,
            delta_l: None,
            delta_sum: None,
            wall_ms: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub objective: f64,
    pub surrogate_objective: Option<f64>,
    /// Numerical rank of the returned low-rank part.
    pub rank: usize,
    /// Fraction of nonzero entries in the returned sparse part.
    pub density: f64,
    pub pattern: String,
    pub pattern_valid: bool,
    pub iterations: usize,
    pub converged: bool,
    pub workers: Option<usize>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub records: Vec<IterRecord>,
    pub summary: RunSummary,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Line {
    Iter(IterRecord),
    Summary(RunSummary),
}

impl RunReport {
    pub fn objective_trace(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.objective).collect()
    }

    pub fn rho_trace(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.rho).collect()
    }

    /// Drops wall-clock timings so reports of identical runs compare equal.
    pub fn strip_timing(&mut self) {
        for r in &mut self.records {
            r.wall_ms = None;
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(&Line::Iter(r.clone())).expect("serializable"));
            out.push('\n');
        }
        out.push_str(
            &serde_json::to_string(&Line::Summary(self.summary.clone())).expect("serializable"),
        );
        out.push('\n');
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        let mut summary = None;
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: idx + 1,
                message: e.to_string(),
            })?;
            match parsed {
                Line::Iter(r) => records.push(r),
                Line::Summary(s) => summary = Some(s),
            }
        }
        let summary = summary.ok_or(Error::Parse {
            line: text.lines().count(),
            message: "missing summary line".into(),
        })?;
        Ok(Self { records, summary })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text)
    }
}
