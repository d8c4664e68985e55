use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rics::embedding::EmbedderSpec;
use rics::evaluation::{build_gallery_with, evaluate_with_audit, Item, Pipeline};
use rics::selection::AuditRecord;
use rics::theory::{argmax_uniformity, bound_curve_csv, simulate_crop_agreement, adv_robustness_bound, AgreementScorer, BoundParams, UniformityScorer};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::report::{bound_row, to_csv, to_json, ExperimentReport};
use crate::synthetic::{generate, load_manifest, write_corpus, SyntheticSpec};

pub fn cmd_gen_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<PathBuf> {
    write_corpus(spec, out_dir)
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Vec<Item>> {
    if let Some(spec) = cfg.synthetic_spec() {
        return Ok(generate(&spec)?.into_iter().map(|(item, _)| item).collect());
    }
    let path = cfg.manifest.as_ref().context("config has no dataset")?;
    let items = load_manifest(path)?;
    for it in &items {
        if it.image.height() != cfg.source_size || it.image.width() != cfg.source_size {
            bail!(
                "image `{}`: {}x{} does not match source size {}",
                it.id,
                it.image.height(),
                it.image.width(),
                cfg.source_size
            );
        }
    }
    Ok(items)
}

/// Every configured pipeline: one RICS pipeline per score function, then
/// the baseline.
pub fn pipelines(cfg: &ExperimentConfig) -> Result<Vec<Pipeline>> {
    let embedder = cfg.embedder.build(cfg.workers)?;
    let mut out = Vec::new();
    for s in &cfg.scores {
        out.push(Pipeline::rics(cfg.rics_config(s), embedder.clone(), cfg.view_size)?);
    }
    if cfg.baseline {
        out.push(Pipeline::center_crop(cfg.crop_size, cfg.mode, embedder, cfg.view_size)?);
    }
    Ok(out)
}

/// Runs the experiment in memory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(ExperimentReport, Vec<AuditRecord>)> {
    cfg.validate()?;
    let items = load_dataset(cfg)?;
    let plan = cfg.plan();
    let mut reports = Vec::new();
    let mut audit = Vec::new();
    for p in pipelines(cfg)? {
        let gallery = build_gallery_with(&items, &p, cfg.distance, cfg.workers).with_context(|| format!("pipeline {}", p.name()))?;
        let (report, records) = evaluate_with_audit(&items, &p, &gallery, &plan).with_context(|| format!("pipeline {}", p.name()))?;
        reports.push(report);
        audit.extend(records);
    }
    let report = ExperimentReport {
        pipelines: reports,
        theoretical_bound: bound_row(cfg.view_size, cfg.crop_size, &cfg.shifts, cfg.mode)?,
        config: cfg.clone(),
    };
    Ok((report, audit))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

/// Runs the experiment and writes every configured output; returns the CSV.
pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<String> {
    let (report, audit) = run_experiment(cfg)?;
    let csv = to_csv(&report);
    if let Some(p) = &cfg.report_csv {
        write(p, &csv)?;
    }
    if let Some(p) = &cfg.report_json {
        write(p, &to_json(&report)?)?;
    }
    if let Some(p) = &cfg.audit_jsonl {
        let lines: String = audit.iter().map(|r| r.to_json_line() + "\n").collect();
        write(p, &lines)?;
    }
    Ok(csv)
}

/// Parses `a..=b` (or `a..b`, `a:b`, `a:b:step`) or a comma list.
pub fn parse_range(text: &str) -> Result<Vec<u64>> {
    let t = text.trim();
    let bad = || format!("bad range `{text}`");
    if let Some((a, b)) = t.split_once("..") {
        let (b, inclusive) = match b.strip_prefix('=') {
            Some(b) => (b, true),
            None => (b, false),
        };
        let a: u64 = a.trim().parse().with_context(bad)?;
        let b: u64 = b.trim().parse().with_context(bad)?;
        let end = if inclusive { b } else { b.checked_sub(1).with_context(bad)? };
        if a > end {
            bail!(bad());
        }
        return Ok((a..=end).collect());
    }
    if t.contains(':') {
        let parts: Vec<u64> = t.split(':').map(|s| s.trim().parse::<u64>()).collect::<std::result::Result<_, _>>().with_context(bad)?;
        let (a, b, step) = match parts[..] {
            [a, b] => (a, b, 1),
            [a, b, s] if s > 0 => (a, b, s),
            _ => bail!(bad()),
        };
        if a > b {
            bail!(bad());
        }
        return Ok((a..=b).step_by(step as usize).collect());
    }
    t.split(',').map(|s| s.trim().parse::<u64>().with_context(bad)).collect()
}

pub fn cmd_bounds(n: u64, ks: &[u64], deltas: &[u64]) -> Result<String> {
    Ok(bound_curve_csv(n, ks.iter().copied(), deltas)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgreementSummary {
    pub n: u64,
    pub k: u64,
    pub delta: u64,
    pub scorer: AgreementScorer,
    pub trials: u64,
    pub successes: u64,
    pub rate: f64,
    pub expected: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UniformitySummary {
    pub n: usize,
    pub k: usize,
    pub trials: u64,
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    pub alpha: f64,
    /// "not-rejected" or "rejected".
    pub verdict: String,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonteCarloSummary {
    pub seed: u64,
    pub uniformity: UniformitySummary,
    pub agreement: AgreementSummary,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloParams {
    pub n: u64,
    pub k: u64,
    pub delta: u64,
    pub trials: u64,
    pub rand_hash: bool,
    pub tolerance: f64,
    pub uniformity_n: usize,
    pub uniformity_k: usize,
    pub uniformity_trials: u64,
    pub alpha: f64,
    pub seed: u64,
    pub workers: usize,
}

impl Default for MonteCarloParams {
    fn default() -> Self {
        MonteCarloParams {
            n: 224,
            k: 140,
            delta: 1,
            trials: 100_000,
            rand_hash: false,
            tolerance: 0.005,
            uniformity_n: 40,
            uniformity_k: 20,
            uniformity_trials: 100_000,
            alpha: 0.001,
            seed: 0,
            workers: 1,
        }
    }
}

pub fn cmd_montecarlo(p: &MonteCarloParams) -> Result<MonteCarloSummary> {
    if p.trials == 0 || p.uniformity_trials == 0 {
        bail!("trials must be at least 1");
    }
    let bp = BoundParams::new(p.n, p.k, p.delta)?;
    let scorer = if p.rand_hash {
        AgreementScorer::RandHash { seed: p.seed }
    } else {
        AgreementScorer::IdealUniform
    };
    let est = simulate_crop_agreement(&bp, p.trials, scorer, p.seed, p.workers)?;
    let expected = adv_robustness_bound(&bp);
    let agreement = AgreementSummary {
        n: p.n,
        k: p.k,
        delta: p.delta,
        scorer,
        trials: est.trials,
        successes: est.successes,
        rate: est.rate,
        expected,
        tolerance: p.tolerance,
        pass: (est.rate - expected).abs() <= p.tolerance,
    };
    let chi = argmax_uniformity(p.uniformity_n, p.uniformity_k, p.uniformity_trials, p.seed, UniformityScorer::RandHash { seed: p.seed }, p.workers)?;
    let not_rejected = chi.p_value > p.alpha;
    let uniformity = UniformitySummary {
        n: p.uniformity_n,
        k: p.uniformity_k,
        trials: chi.trials,
        statistic: chi.statistic,
        dof: chi.dof,
        p_value: chi.p_value,
        alpha: p.alpha,
        verdict: if not_rejected { "not-rejected" } else { "rejected" }.into(),
        pass: not_rejected,
    };
    Ok(MonteCarloSummary {
        seed: p.seed,
        pass: uniformity.pass && agreement.pass,
        uniformity,
        agreement,
    })
}

/// Parses an embedder given on the command line as inline JSON.
pub fn parse_embedder(text: &str) -> Result<EmbedderSpec> {
    serde_json::from_str(text).with_context(|| format!("bad embedder spec `{text}`"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges() {
        assert_eq!(parse_range("3..=5").unwrap(), vec![3, 4, 5]);
        assert_eq!(parse_range("3..5").unwrap(), vec![3, 4]);
        assert_eq!(parse_range("0:10:5").unwrap(), vec![0, 5, 10]);
        assert_eq!(parse_range("1,3, 9").unwrap(), vec![1, 3, 9]);
        assert!(parse_range("5..=3").is_err());
        assert!(parse_range("x").is_err());
        assert!(parse_range("1:4:0").is_err());
    }

    #[test]
    fn montecarlo_rejects_zero_trials() {
        let p = MonteCarloParams {
            trials: 0,
            ..Default::default()
        };
        assert!(cmd_montecarlo(&p).is_err());
    }
}
