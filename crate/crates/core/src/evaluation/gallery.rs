use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::embedding::{Embedding, OutputRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    #[default]
    Cosine,
    Euclidean,
}

/// How two outputs are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MetricKind {
    /// Same top-1 retrieved gallery id.
    Nn1,
    /// Same K-nearest-neighbor majority label.
    Class {
        #[serde(default = "one")]
        k: usize,
    },
}

fn one() -> usize {
    1
}

impl MetricKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            MetricKind::Class { k } if k == 0 || k % 2 == 0 => Err(Error::InvalidConfig(format!("K-NN needs an odd K, got {k}"))),
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            MetricKind::Nn1 => "1-NN".into(),
            MetricKind::Class { k: 1 } => "Class".into(),
            MetricKind::Class { k } => format!("Class@{k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GalleryEntry {
    pub id: String,
    pub label: String,
    pub embedding: Embedding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub id: String,
    pub label: String,
    pub distance: f64,
}

/// Exact nearest-neighbor index over labeled embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct GalleryIndex {
    entries: Vec<GalleryEntry>,
    norms: Vec<f64>,
    metric: Distance,
    dim: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl GalleryIndex {
    pub fn new(entries: Vec<GalleryEntry>, metric: Distance) -> Result<Self> {
        let first = entries.first().ok_or(Error::Empty("gallery"))?;
        let dim = first.embedding.dim();
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::DuplicateId(e.id.clone()));
            }
            if e.embedding.dim() != dim {
                return Err(Error::at_image(
                    &e.id,
                    "gallery",
                    Error::DimensionMismatch {
                        expected: dim,
                        got: e.embedding.dim(),
                    },
                ));
            }
        }
        let norms = entries.iter().map(|e| dot(e.embedding.values(), e.embedding.values()).sqrt()).collect();
        Ok(GalleryIndex {
            entries,
            norms,
            metric,
            dim,
        })
    }

    pub fn entries(&self) -> &[GalleryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn metric(&self) -> Distance {
        self.metric
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.label.as_str())
    }

    fn distance(&self, q: &[f64], q_norm: f64, i: usize) -> f64 {
        let v = self.entries[i].embedding.values();
        match self.metric {
            Distance::Cosine => {
                let denom = q_norm * self.norms[i];
                if denom == 0.0 {
                    1.0
                } else {
                    1.0 - dot(q, v) / denom
                }
            }
            Distance::Euclidean => q.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(),
        }
    }

    /// The `k` nearest entries, nearest first, ties by smaller id. The entry
    /// named `exclude` is skipped.
    pub fn nn_lookup(&self, q: &Embedding, k: usize, exclude: Option<&str>) -> Result<Vec<Neighbor>> {
        if q.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: q.dim(),
            });
        }
        let available = self.entries.len() - exclude.map_or(0, |x| self.entries.iter().filter(|e| e.id == x).count());
        if k == 0 || k > available {
            return Err(Error::InvalidConfig(format!("cannot retrieve {k} neighbors from {available} entries")));
        }
        let qv = q.values();
        let q_norm = dot(qv, qv).sqrt();
        let mut scored: Vec<(f64, usize)> = (0..self.entries.len())
            .filter(|&i| Some(self.entries[i].id.as_str()) != exclude)
            .map(|i| (self.distance(qv, q_norm, i), i))
            .collect();
        let order = |a: &(f64, usize), b: &(f64, usize)| -> Ordering {
            a.0.total_cmp(&b.0).then_with(|| self.entries[a.1].id.cmp(&self.entries[b.1].id))
        };
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_by(order);
        Ok(scored
            .into_iter()
            .map(|(distance, i)| Neighbor {
                id: self.entries[i].id.clone(),
                label: self.entries[i].label.clone(),
                distance,
            })
            .collect())
    }

    /// K-NN majority label. Ties go to the label met first in the ordered
    /// neighbor list, then to the smaller label.
    pub fn predict_label(&self, q: &Embedding, k: usize, exclude: Option<&str>) -> Result<String> {
        Ok(majority(&self.nn_lookup(q, k, exclude)?))
    }

    /// What `metric` reports for query `q`.
    pub fn decide(&self, q: &Embedding, metric: MetricKind, exclude: Option<&str>) -> Result<String> {
        metric.validate()?;
        match metric {
            MetricKind::Nn1 => Ok(self.nn_lookup(q, 1, exclude)?.swap_remove(0).id),
            MetricKind::Class { k } => self.predict_label(q, k, exclude),
        }
    }
}

pub(crate) fn majority(neighbors: &[Neighbor]) -> String {
    // label -> (count, first rank)
    let mut tally: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (rank, n) in neighbors.iter().enumerate() {
        tally.entry(&n.label).or_insert((0, rank)).0 += 1;
    }
    tally
        .into_iter()
        .min_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.cmp(&b.1 .1)).then(a.0.cmp(b.0)))
        .map(|(label, _)| label.to_owned())
        .expect("at least one neighbor")
}

/// Whether two outputs agree under `metric`. `exclude` removes the query's
/// own gallery entry from retrieval.
pub fn outputs_equal(a: &OutputRecord, b: &OutputRecord, metric: MetricKind, gallery: &GalleryIndex, exclude: Option<&str>) -> Result<bool> {
    if a.embedding == b.embedding {
        return Ok(true);
    }
    Ok(gallery.decide(&a.embedding, metric, exclude)? == gallery.decide(&b.embedding, metric, exclude)?)
}
