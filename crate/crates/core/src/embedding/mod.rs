//! Embedders: the function applied to the selected crop.
//!
//! Three built-ins cover the robustness spectrum: `Constant` never changes,
//! `BlockMean` degrades gracefully under shifts, and `PatchHash` changes on
//! any byte. `External` runs a child process over a binary protocol.

mod external;
pub mod protocol;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use xxhash_rust::xxh3::Xxh3;

use crate::error::{Error, Result};
use crate::image::ImageBuf;
use crate::selection::SelectionResult;

pub use external::ExternalEmbedder;

/// Default per-request timeout for external embedders, in seconds.
pub const DEFAULT_TIMEOUT_SECS: f64 = 30.0;

/// Embedding vector: at least one value, all finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Embedding {
    values: Vec<f64>,
}

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidEmbedding("dimension 0".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidEmbedding(format!("value {i} is {}", values[i])));
        }
        Ok(Embedding { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

impl TryFrom<Vec<f64>> for Embedding {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Embedding::new(values)
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Self {
        e.values
    }
}

/// Result of one inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub embedding: Embedding,
    /// Absent for pipelines that do not select (the center-crop baseline).
    pub selection: Option<SelectionResult>,
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EmbedderSpec {
    Constant {
        dim: usize,
    },
    BlockMean {
        grid: usize,
    },
    PatchHash {
        dim: usize,
        seed: u64,
    },
    External {
        command: Vec<String>,
        #[serde(default = "default_timeout")]
        timeout_secs: f64,
    },
}

fn default_timeout() -> f64 {
    DEFAULT_TIMEOUT_SECS
}

impl EmbedderSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        match self {
            EmbedderSpec::Constant { dim: 0 } | EmbedderSpec::PatchHash { dim: 0, .. } => bad("embedding dimension must be at least 1"),
            EmbedderSpec::BlockMean { grid: 0 } => bad("block grid must be at least 1"),
            EmbedderSpec::External { command, .. } if command.is_empty() || command[0].is_empty() => bad("external command is empty"),
            EmbedderSpec::External { timeout_secs, .. } if !(timeout_secs.is_finite() && *timeout_secs > 0.0) => {
                bad("external timeout must be positive")
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EmbedderSpec::Constant { .. } => "constant",
            EmbedderSpec::BlockMean { .. } => "blockmean",
            EmbedderSpec::PatchHash { .. } => "patchhash",
            EmbedderSpec::External { .. } => "external",
        }
    }

    /// Instantiates the embedder. `pool_size` bounds the number of child
    /// processes an external embedder may run; built-ins ignore it.
    pub fn build(&self, pool_size: usize) -> Result<Arc<dyn Embedder>> {
        self.validate()?;
        Ok(match self {
            EmbedderSpec::Constant { dim } => Arc::new(Constant { dim: *dim }),
            EmbedderSpec::BlockMean { grid } => Arc::new(BlockMean { grid: *grid }),
            EmbedderSpec::PatchHash { dim, seed } => Arc::new(PatchHash { dim: *dim, seed: *seed }),
            EmbedderSpec::External { command, timeout_secs } => {
                Arc::new(ExternalEmbedder::spawn(command.clone(), *timeout_secs, pool_size.max(1))?)
            }
        })
    }
}

/// A deterministic map from crops to embeddings. Implementations must be
/// safe to call from several threads at once.
pub trait Embedder: Send + Sync {
    fn embed(&self, crop: &ImageBuf) -> Result<Embedding>;
}

/// One-shot embedding of a single crop.
pub fn embed(crop: &ImageBuf, spec: &EmbedderSpec) -> Result<Embedding> {
    spec.build(1)?.embed(crop)
}

#[derive(Debug, Clone, Copy)]
pub struct Constant {
    pub dim: usize,
}

impl Embedder for Constant {
    fn embed(&self, _crop: &ImageBuf) -> Result<Embedding> {
        Embedding::new(vec![1.0; self.dim])
    }
}

/// Per-channel means over a `grid x grid` partition, channel-major.
#[derive(Debug, Clone, Copy)]
pub struct BlockMean {
    pub grid: usize,
}

/// Block `b` of `g` over `n` samples spans `[ceil(b n / g), ceil((b + 1) n / g))`.
pub fn block_bounds(n: usize, g: usize) -> Vec<usize> {
    (0..=g).map(|b| (b * n).div_ceil(g)).collect()
}

impl Embedder for BlockMean {
    fn embed(&self, crop: &ImageBuf) -> Result<Embedding> {
        let g = self.grid;
        let (h, w, ch) = (crop.height(), crop.width(), crop.channels());
        if g > h || g > w {
            return Err(Error::SizeMismatch {
                expected: format!("crop of at least {g}x{g}"),
                got: format!("{h}x{w}"),
            });
        }
        let rows = block_bounds(h, g);
        let cols = block_bounds(w, g);
        let px = crop.pixels();
        let mut out = Vec::with_capacity(ch * g * g);
        for c in 0..ch {
            for by in 0..g {
                for bx in 0..g {
                    let mut sum = 0u64;
                    for r in rows[by]..rows[by + 1] {
                        for x in cols[bx]..cols[bx + 1] {
                            sum += px[(r * w + x) * ch + c] as u64;
                        }
                    }
                    let count = (rows[by + 1] - rows[by]) * (cols[bx + 1] - cols[bx]);
                    out.push(sum as f64 / count as f64);
                }
            }
        }
        Embedding::new(out)
    }
}

/// Hash of the exact crop bytes expanded to `dim` values in `[0, 1)`.
#[derive(Debug, Clone, Copy)]
pub struct PatchHash {
    pub dim: usize,
    pub seed: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Embedder for PatchHash {
    fn embed(&self, crop: &ImageBuf) -> Result<Embedding> {
        let mut h = Xxh3::new();
        h.update(&self.seed.to_le_bytes());
        for d in [crop.width(), crop.height(), crop.channels()] {
            h.update(&(d as u32).to_le_bytes());
        }
        h.update(crop.pixels());
        let digest = h.digest();
        let values = (0..self.dim as u64)
            .map(|i| (splitmix64(digest ^ splitmix64(i)) >> 11) as f64 / (1u64 << 53) as f64)
            .collect();
        Embedding::new(values)
    }
}
