//! Variant sweeps over the module switches, Top-K, and the loss family.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::MetricReport;
use crate::loss::{LossConfig, LossKind};
use crate::synthdata::Dataset;
use crate::train::run_training;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationAxis {
    Module,
    TopK,
    Loss,
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "module" => Ok(Self::Module),
            "topk" => Ok(Self::TopK),
            "loss" => Ok(Self::Loss),
            other => Err(Error::contract(format!("unknown ablation axis `{other}` (expected module, topk or loss)"))),
        }
    }
}

pub const TOPK_SWEEP: [usize; 5] = [2, 4, 6, 8, 10];

/// Named configurations to compare; all share the base seed.
pub fn variants(base: &RunConfig, axis: AblationAxis) -> Vec<(String, RunConfig)> {
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    let loss = |kind: LossKind, balance: bool| LossConfig {
        kind,
        use_class_balance: balance,
        ..base.loss.clone()
    };
    match axis {
        AblationAxis::Module => [(false, false), (true, false), (false, true), (true, true)]
            .into_iter()
            .map(|(dtrans, ar)| {
                let name = match (dtrans, ar) {
                    (false, false) => "baseline",
                    (true, false) => "dtrans",
                    (false, true) => "ar",
                    (true, true) => "dtrans+ar",
                };
                let cfg = with(&|c| {
                    c.model.use_dtrans = dtrans;
                    c.loss = if ar { loss(LossKind::Ar, true) } else { loss(LossKind::Bce, false) };
                });
                (name.to_string(), cfg)
            })
            .collect(),
        AblationAxis::TopK => TOPK_SWEEP
            .iter()
            .map(|&k| {
                let cfg = with(&|c| {
                    c.model.use_dtrans = true;
                    c.model.dtrans.top_k = k;
                });
                (format!("k={k}"), cfg)
            })
            .collect(),
        AblationAxis::Loss => [
            ("bce", LossKind::Bce, false),
            ("focal", LossKind::Focal, false),
            ("mlm", LossKind::Mlm, false),
            ("ar_unweighted", LossKind::Ar, false),
            ("ar", LossKind::Ar, true),
        ]
        .into_iter()
        .map(|(name, kind, balance)| (name.to_string(), with(&|c| c.loss = loss(kind, balance))))
        .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub final_loss: f64,
    pub report: MetricReport,
    /// Wall-clock training time; kept out of the comparison table.
    #[serde(skip)]
    pub seconds: f64,
}

/// Trains and evaluates every variant of `axis` on the same data and seed.
pub fn run_ablation(base: &RunConfig, axis: AblationAxis, train: &Dataset, test: &Dataset) -> Result<Vec<AblationRow>> {
    variants(base, axis)
        .into_iter()
        .map(|(name, cfg)| {
            let start = Instant::now();
            let out = run_training::<f64>(&cfg, train, Some(test), None, None)?;
            let report = out
                .report
                .ok_or_else(|| Error::contract(format!("variant {name} produced no evaluation")))?;
            Ok(AblationRow {
                variant: name,
                final_loss: out.epochs.last().map(|e| e.mean_loss).unwrap_or(f64::NAN),
                report,
                seconds: start.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

/// One row per variant, one `R@K`/`mR@K` column pair per (mode, K).
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,final_loss");
    if let Some(first) = rows.first() {
        for e in &first.report.entries {
            let _ = write!(s, ",R@{k}_{m},mR@{k}_{m}", k = e.k, m = e.mode);
        }
        if first.report.object_accuracy.is_some() {
            s.push_str(",object_accuracy");
        }
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{},{}", r.variant, r.final_loss);
        for e in &r.report.entries {
            let _ = write!(s, ",{},{}", e.recall.unwrap_or(0.0), e.mean_recall.unwrap_or(0.0));
        }
        if let Some(acc) = r.report.object_accuracy {
            let _ = write!(s, ",{acc}");
        }
        s.push('\n');
    }
    s
}
