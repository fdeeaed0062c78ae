//! Training logs, serialised as one JSON record per line.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    /// Loss term values keyed by term name.
    pub terms: BTreeMap<String, f64>,
    pub total: f64,
    /// Candidate-list length of every query in the batch.
    pub list_sizes: Vec<usize>,
    /// Distillation-prefix length of every query in the batch.
    pub distill_sizes: Vec<usize>,
    pub duplicates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    pub step: usize,
    pub epoch: usize,
    pub mrr: f64,
    pub recall: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Line {
    Step(StepRecord),
    Eval(EvalSnapshot),
    Summary { wall_clock_secs: f64 },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalSnapshot>,
    pub wall_clock_secs: f64,
}

impl TrainLog {
    /// True when both logs agree on everything except wall-clock time.
    pub fn same_trace(&self, other: &TrainLog) -> bool {
        self.steps == other.steps && self.evals == other.evals
    }

    /// Values of one loss term across steps (missing steps give `None`).
    pub fn term_trace(&self, name: &str) -> Vec<Option<f64>> {
        self.steps
            .iter()
            .map(|s| s.terms.get(name).copied())
            .collect()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        let enc = |l: &Line| serde_json::to_string(l).map_err(|e| Error::Format(e.to_string()));
        for s in &self.steps {
            out.push_str(&enc(&Line::Step(s.clone()))?);
            out.push('\n');
        }
        for e in &self.evals {
            out.push_str(&enc(&Line::Eval(e.clone()))?);
            out.push('\n');
        }
        out.push_str(&enc(&Line::Summary {
            wall_clock_secs: self.wall_clock_secs,
        })?);
        out.push('\n');
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut log = TrainLog::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line = serde_json::from_str(line)
                .map_err(|e| Error::Format(format!("train log line {}: {e}", i + 1)))?;
            match parsed {
                Line::Step(s) => log.steps.push(s),
                Line::Eval(e) => log.evals.push(e),
                Line::Summary { wall_clock_secs } => log.wall_clock_secs = wall_clock_secs,
            }
        }
        Ok(log)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_jsonl(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}
