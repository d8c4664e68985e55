//! Report files.
//!
//! CSV schema, one row per pipeline plus a final `theoretical-bound` row:
//!
//! ```text
//! pipeline,accuracy,adv_rob_<metric>_d<shift>...,consistency_<metric>_d<shift>...
//! ```
//!
//! Column groups run over metrics in config order, then shifts in config
//! order. `<metric>` is `nn1`, `class` (K = 1) or `class<K>`. Rates have six
//! decimals; an empty field means "not measured".

use std::fmt::Write as _;

use anyhow::Result;
use rics::evaluation::{MetricKind, RobustnessReport};
use rics::image::Mode;
use rics::theory::{adv_robustness_bound, consistency_bound, BoundParams};
use serde::Serialize;

use crate::config::ExperimentConfig;

pub const BOUND_ROW: &str = "theoretical-bound";

pub fn metric_slug(m: &MetricKind) -> String {
    match m {
        MetricKind::Nn1 => "nn1".into(),
        MetricKind::Class { k: 1 } => "class".into(),
        MetricKind::Class { k } => format!("class{k}"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundCell {
    pub shift: usize,
    pub adv_robustness: f64,
    pub consistency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub pipelines: Vec<RobustnessReport>,
    pub theoretical_bound: Vec<BoundCell>,
}

/// Closed-form rates for a `view`-pixel view and `k`-pixel crop; 1 for every
/// shift in cyclic mode.
pub fn bound_row(view: usize, k: usize, shifts: &[usize], mode: Mode) -> Result<Vec<BoundCell>> {
    shifts
        .iter()
        .map(|&shift| {
            Ok(match mode {
                Mode::Cyclic => BoundCell {
                    shift,
                    adv_robustness: 1.0,
                    consistency: 1.0,
                },
                Mode::Realistic => {
                    let p = BoundParams::new(view as u64, k as u64, shift as u64)?;
                    BoundCell {
                        shift,
                        adv_robustness: adv_robustness_bound(&p),
                        consistency: consistency_bound(&p),
                    }
                }
            })
        })
        .collect()
}

fn rate(x: f64) -> String {
    format!("{x:.6}")
}

pub fn csv_header(metrics: &[MetricKind], shifts: &[usize]) -> String {
    let mut cols = vec!["pipeline".to_string(), "accuracy".to_string()];
    for prefix in ["adv_rob", "consistency"] {
        for m in metrics {
            for d in shifts {
                cols.push(format!("{prefix}_{}_d{d}", metric_slug(m)));
            }
        }
    }
    cols.join(",")
}

pub fn to_csv(report: &ExperimentReport) -> String {
    let metrics = &report.config.metrics;
    let shifts = &report.config.shifts;
    let mut out = csv_header(metrics, shifts);
    out.push('\n');
    for p in &report.pipelines {
        let mut row = vec![p.pipeline.clone(), p.accuracy.map(rate).unwrap_or_default()];
        for adversarial in [true, false] {
            for m in metrics {
                for &d in shifts {
                    row.push(
                        p.cell(d, *m)
                            .map(|c| rate(if adversarial { c.adversarial } else { c.consistency }))
                            .unwrap_or_default(),
                    );
                }
            }
        }
        let _ = writeln!(out, "{}", row.join(","));
    }
    let mut row = vec![BOUND_ROW.to_string(), String::new()];
    for adversarial in [true, false] {
        for _ in metrics {
            for b in &report.theoretical_bound {
                row.push(rate(if adversarial { b.adv_robustness } else { b.consistency }));
            }
        }
    }
    let _ = writeln!(out, "{}", row.join(","));
    out
}

pub fn to_json(report: &ExperimentReport) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}
