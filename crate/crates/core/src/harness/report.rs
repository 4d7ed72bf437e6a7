use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

use super::config::{Objective, RunConfig};
use super::data::Dataset;
use super::evaluate::{evaluate, EvalReport, ProbeRow};
use super::train::{train, TrainLog};

fn fmt_pct(v: f64) -> String {
    format!("{v:.2}")
}

/// Aligned plain-text table: one row per (OOD set, function) and the macro
/// averages.
pub fn report_table(r: &EvalReport) -> String {
    let mut rows = vec![[
        "ood_set".to_string(),
        "function".into(),
        "AUROC".into(),
        "FAR@95".into(),
        "AUPR".into(),
    ]];
    for c in &r.cells {
        rows.push([
            c.ood_set.clone(),
            c.function.to_string(),
            fmt_pct(c.metrics.auroc),
            fmt_pct(c.metrics.far95),
            fmt_pct(c.metrics.aupr),
        ]);
    }
    for a in &r.averages {
        rows.push([
            "average".into(),
            a.function.to_string(),
            fmt_pct(a.metrics.auroc),
            fmt_pct(a.metrics.far95),
            fmt_pct(a.metrics.aupr),
        ]);
    }
    let mut out = format!(
        "objective {}  seed {}  ID accuracy {}%\n",
        r.objective,
        r.seed,
        fmt_pct(r.id_accuracy)
    );
    out.push_str(&align(&rows));
    if let Some(w) = &r.combination_weights {
        let ws: Vec<String> = w.iter().map(|v| format!("{v:.4}")).collect();
        let _ = writeln!(out, "combination weights: {}", ws.join(" "));
    }
    out
}

fn align<const N: usize>(rows: &[[String; N]]) -> String {
    let widths: Vec<usize> = (0..N)
        .map(|j| rows.iter().map(|r| r[j].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in rows {
        let line: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(j, cell)| {
                if j < 2 {
                    format!("{cell:<w$}", w = widths[j])
                } else {
                    format!("{cell:>w$}", w = widths[j])
                }
            })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Writes `report.json` and `report.txt` under `dir`.
pub fn write_report(dir: &Path, r: &EvalReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(r)?)?;
    std::fs::write(dir.join("report.txt"), report_table(r))?;
    Ok(())
}

pub fn combination_csv(rows: &[(usize, f64)]) -> String {
    let mut out = String::from("layer,weight\n");
    for (l, w) in rows {
        let _ = writeln!(out, "{l},{w}");
    }
    out
}

pub fn probe_table(rows: &[ProbeRow]) -> String {
    let mut table = vec![["layer".to_string(), "function".into(), "avg AUROC".into()]];
    for r in rows {
        for a in &r.averages {
            table.push([r.layer.to_string(), a.function.to_string(), fmt_pct(a.metrics.auroc)]);
        }
    }
    align(&table)
}

pub fn write_training_log(path: &Path, log: &TrainLog) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(log)?)?;
    Ok(())
}

/// Both objectives trained and evaluated from the same seed and data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub joint: EvalReport,
    pub discriminative: EvalReport,
    pub joint_log: TrainLog,
    pub discriminative_log: TrainLog,
}

impl Comparison {
    /// True when both runs saw the same vocabulary and batch order.
    pub fn inputs_match(&self) -> bool {
        self.joint_log.vocab_hash == self.discriminative_log.vocab_hash
            && self.joint_log.epochs.iter().map(|e| &e.batch_order).eq(self
                .discriminative_log
                .epochs
                .iter()
                .map(|e| &e.batch_order))
    }

    /// Side-by-side ID accuracy and averaged OOD metrics.
    pub fn table(&self) -> String {
        let mut rows = vec![[
            "objective".to_string(),
            "function".into(),
            "ID acc".into(),
            "AUROC".into(),
            "FAR@95".into(),
            "AUPR".into(),
        ]];
        for r in [&self.discriminative, &self.joint] {
            for a in &r.averages {
                rows.push([
                    r.objective.to_string(),
                    a.function.to_string(),
                    fmt_pct(r.id_accuracy),
                    fmt_pct(a.metrics.auroc),
                    fmt_pct(a.metrics.far95),
                    fmt_pct(a.metrics.aupr),
                ]);
            }
        }
        align(&rows)
    }
}

pub fn compare_objectives(cfg: &RunConfig, data: &Dataset) -> Result<Comparison> {
    let run = |objective| -> Result<(EvalReport, TrainLog)> {
        let c = RunConfig {
            objective,
            ..cfg.clone()
        };
        let (ckpt, log) = train(&c, data)?;
        Ok((evaluate(&ckpt, data)?, log))
    };
    let (joint, joint_log) = run(Objective::Joint)?;
    let (discriminative, discriminative_log) = run(Objective::Discriminative)?;
    Ok(Comparison {
        joint,
        discriminative,
        joint_log,
        discriminative_log,
    })
}
