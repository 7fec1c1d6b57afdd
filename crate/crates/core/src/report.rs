//! Metric tables and prediction dumps on disk.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{EvalVideo, MetricReport, Task};

pub const PREDICTIONS_VERSION: u32 = 1;

/// Model outputs together with ground truth, enough to evaluate without a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionDump {
    pub format_version: u32,
    pub task: Task,
    pub num_predicates: usize,
    #[serde(default)]
    pub predicate_groups: Vec<usize>,
    pub videos: Vec<EvalVideo>,
}

impl PredictionDump {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = serde_json::to_vec(self).map_err(|e| Error::contract(e.to_string()))?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut de = serde_json::Deserializer::from_slice(&bytes);
        let dump: Self = serde_path_to_error::deserialize(&mut de).map_err(|e| Error::Parse {
            offset: 0,
            field: e.path().to_string(),
            message: e.into_inner().to_string(),
        })?;
        if dump.format_version != PREDICTIONS_VERSION {
            return Err(Error::Version {
                found: dump.format_version,
                expected: PREDICTIONS_VERSION,
            });
        }
        Ok(dump)
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `task,mode,k,recall,mean_recall` rows.
pub fn metrics_csv(report: &MetricReport) -> String {
    let mut s = String::from("task,mode,k,recall,mean_recall\n");
    for e in &report.entries {
        let _ = writeln!(s, "{},{},{},{},{}", report.task, e.mode, e.k, cell(e.recall), cell(e.mean_recall));
    }
    s
}

/// `mode,k,predicate,ground_truth,hits,recall` rows.
pub fn per_class_csv(report: &MetricReport) -> String {
    let mut s = String::from("mode,k,predicate,ground_truth,hits,recall\n");
    for e in &report.entries {
        for c in &e.per_class {
            let _ = writeln!(s, "{},{},{},{},{},{}", e.mode, e.k, c.predicate, c.ground_truth, c.hits, cell(c.recall));
        }
    }
    s
}

/// Writes `metrics.json`, `metrics.csv`, and `per_class.csv` into `dir`.
pub fn write_report(dir: impl AsRef<Path>, report: &MetricReport) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::contract(e.to_string()))?;
    for (name, body) in [
        ("metrics.json", json),
        ("metrics.csv", metrics_csv(report)),
        ("per_class.csv", per_class_csv(report)),
    ] {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

/// Fixed-width summary for terminals.
pub fn summary_table(report: &MetricReport) -> String {
    let mut s = format!("{:<8} {:<6} {:>5} {:>9} {:>9}\n", "task", "mode", "K", "R@K", "mR@K");
    for e in &report.entries {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into());
        let _ = writeln!(s, "{:<8} {:<6} {:>5} {:>9} {:>9}", report.task, e.mode, e.k, f(e.recall), f(e.mean_recall));
    }
    if let Some(acc) = report.object_accuracy {
        let _ = writeln!(s, "object accuracy: {acc:.2}");
    }
    s
}
