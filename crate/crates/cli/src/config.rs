//! Experiment configuration: one flat JSON document.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rics::embedding::EmbedderSpec;
use rics::evaluation::{Distance, EvalPlan, MetricKind, ShiftGeometry};
use rics::image::Mode;
use rics::scoring::{Engine, ScoreFnSpec};
use rics::selection::{RicsConfig, DEFAULT_CROP_SIZE};
use serde::{Deserialize, Serialize};

use crate::synthetic::{Family, SyntheticSpec};

/// Environment variable that overrides the configured worker count.
pub const WORKERS_ENV: &str = "RICS_WORKERS";

/// Synthetic dataset as embedded in an experiment config; image and view
/// sizes come from the experiment itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDataset {
    pub classes: usize,
    pub per_class: usize,
    pub family: Family,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// JSON-lines manifest; exclusive with `synthetic`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticDataset>,
    #[serde(default = "default_source")]
    pub source_size: usize,
    #[serde(default = "default_view")]
    pub view_size: usize,
    #[serde(default = "default_crop")]
    pub crop_size: usize,
    #[serde(default)]
    pub mode: Mode,
    /// One RICS pipeline per entry.
    #[serde(default = "default_scores")]
    pub scores: Vec<ScoreFnSpec>,
    #[serde(default)]
    pub engine: Engine,
    /// Also evaluate the center-crop pipeline.
    #[serde(default = "yes")]
    pub baseline: bool,
    pub embedder: EmbedderSpec,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<MetricKind>,
    #[serde(default)]
    pub distance: Distance,
    #[serde(default = "default_shifts")]
    pub shifts: Vec<usize>,
    #[serde(default)]
    pub adversarial_geometry: ShiftGeometry,
    #[serde(default = "shell")]
    pub consistency_geometry: ShiftGeometry,
    #[serde(default = "default_samples")]
    pub samples_per_image: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "yes")]
    pub exclude_self: bool,
    #[serde(default = "default_accuracy_k")]
    pub accuracy_k: Option<usize>,
    #[serde(default = "one")]
    pub workers: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report_json: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report_csv: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audit_jsonl: Option<PathBuf>,
}

fn default_source() -> usize {
    256
}

fn default_view() -> usize {
    224
}

fn default_crop() -> usize {
    DEFAULT_CROP_SIZE
}

fn default_scores() -> Vec<ScoreFnSpec> {
    vec![ScoreFnSpec::rand_hash(0), ScoreFnSpec::mexican_hat()]
}

fn default_metrics() -> Vec<MetricKind> {
    vec![MetricKind::Nn1, MetricKind::Class { k: 1 }]
}

fn default_shifts() -> Vec<usize> {
    vec![1, 3, 5, 9]
}

fn default_samples() -> usize {
    8
}

fn default_accuracy_k() -> Option<usize> {
    Some(1)
}

fn shell() -> ShiftGeometry {
    ShiftGeometry::Shell
}

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

impl ExperimentConfig {
    /// A config with every default and the given dataset and embedder.
    pub fn new(embedder: EmbedderSpec) -> Self {
        serde_json::from_value(serde_json::json!({ "embedder": embedder })).expect("defaults deserialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).context("invalid experiment config")?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg = Self::from_json(&text).with_context(|| path.display().to_string())?;
        // Relative paths in a config file are relative to that file.
        if let Some(dir) = path.parent() {
            for p in [&mut cfg.manifest, &mut cfg.report_json, &mut cfg.report_csv, &mut cfg.audit_jsonl].into_iter().flatten() {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn max_shift(&self) -> usize {
        self.shifts.iter().copied().max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.manifest, &self.synthetic) {
            (Some(_), Some(_)) => bail!("config sets both `manifest` and `synthetic`"),
            (None, None) => bail!("config needs a dataset: `manifest` or `synthetic`"),
            _ => {}
        }
        let (n, m, k) = (self.source_size, self.view_size, self.crop_size);
        if !(k <= m && m <= n) {
            bail!("sizes must satisfy crop <= view <= source, got {k} / {m} / {n}");
        }
        if self.shifts.is_empty() || self.shifts.contains(&0) {
            bail!("shift sizes must be a non-empty list of positive integers");
        }
        match self.mode {
            Mode::Realistic if n - m < 2 * self.max_shift() => {
                bail!("source {n} minus view {m} must be at least twice the largest shift {}", self.max_shift())
            }
            Mode::Cyclic if m != n => bail!("cyclic mode needs view size == source size, got {m} and {n}"),
            _ => {}
        }
        if self.scores.is_empty() && !self.baseline {
            bail!("nothing to evaluate: no score functions and no baseline");
        }
        for s in &self.scores {
            s.validate()?;
            self.rics_config(s).validate(m, m)?;
        }
        self.embedder.validate()?;
        self.plan().validate()?;
        if self.samples_per_image == 0 {
            bail!("samples_per_image must be at least 1");
        }
        Ok(())
    }

    pub fn rics_config(&self, score: &ScoreFnSpec) -> RicsConfig {
        RicsConfig::new(self.crop_size, score.clone(), self.mode).with_engine(self.engine)
    }

    pub fn synthetic_spec(&self) -> Option<SyntheticSpec> {
        self.synthetic.as_ref().map(|s| SyntheticSpec {
            classes: s.classes,
            per_class: s.per_class,
            family: s.family,
            seed: s.seed,
            size: self.source_size,
            view: self.view_size,
            max_shift: match self.mode {
                Mode::Realistic => self.max_shift(),
                Mode::Cyclic => 0,
            },
        })
    }

    pub fn plan(&self) -> EvalPlan {
        EvalPlan {
            shifts: self.shifts.clone(),
            metrics: self.metrics.clone(),
            adversarial_geometry: self.adversarial_geometry,
            consistency_geometry: self.consistency_geometry,
            samples_per_image: self.samples_per_image,
            seed: self.seed,
            exclude_self: self.exclude_self,
            accuracy_k: self.accuracy_k,
            workers: self.workers,
        }
    }

    /// Applies the worker-count environment override.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(WORKERS_ENV) {
            self.workers = v.trim().parse().with_context(|| format!("{WORKERS_ENV}={v:?} is not a worker count"))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> &'static str {
        r#"{"synthetic": {"classes": 2, "per_class": 3, "family": "blobs"},
            "embedder": {"type": "patch_hash", "dim": 8, "seed": 1}}"#
    }

    #[test]
    fn defaults() {
        let cfg = ExperimentConfig::from_json(minimal()).unwrap();
        assert_eq!((cfg.source_size, cfg.view_size, cfg.crop_size), (256, 224, 140));
        assert_eq!(cfg.shifts, vec![1, 3, 5, 9]);
        assert_eq!(cfg.mode, Mode::Realistic);
        assert!(cfg.baseline);
        assert_eq!(cfg.scores.len(), 2);
        cfg.validate().unwrap();
        let spec = cfg.synthetic_spec().unwrap();
        assert_eq!((spec.size, spec.view, spec.max_shift), (256, 224, 9));
    }

    #[test]
    fn round_trip() {
        let cfg = ExperimentConfig::from_json(minimal()).unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_geometry() {
        let mut cfg = ExperimentConfig::from_json(minimal()).unwrap();
        cfg.shifts = vec![1, 20];
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::from_json(minimal()).unwrap();
        cfg.crop_size = 230;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::from_json(minimal()).unwrap();
        cfg.mode = Mode::Cyclic;
        assert!(cfg.validate().is_err());
        cfg.view_size = 256;
        cfg.validate().unwrap();
        let mut cfg = ExperimentConfig::from_json(minimal()).unwrap();
        cfg.shifts = vec![];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn dataset_is_required_and_exclusive() {
        let mut cfg = ExperimentConfig::from_json(minimal()).unwrap();
        cfg.manifest = Some("m.jsonl".into());
        assert!(cfg.validate().is_err());
        cfg.synthetic = None;
        cfg.manifest = None;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_keys_are_errors() {
        let text = minimal().replacen('{', r#"{"shfits": [1],"#, 1);
        assert!(ExperimentConfig::from_json(&text).is_err());
    }
}
