//! Synthetic labeled corpora.
//!
//! Every image is `size x size` RGB with a class-specific object placed
//! inside the region that all views shifted by up to `max_shift` share.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;
use rics::evaluation::{derive_seed, Item};
use rics::image::{load_image, save_pnm, ImageBuf};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// Flat colored tiles.
    Blocks,
    /// Smooth sum of Gaussian blobs.
    Blobs,
    /// Uniform IID noise.
    NoisePlusObject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub family: Family,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_size")]
    pub size: usize,
    #[serde(default = "default_view")]
    pub view: usize,
    #[serde(default = "default_max_shift")]
    pub max_shift: usize,
}

fn default_size() -> usize {
    256
}

fn default_view() -> usize {
    224
}

fn default_max_shift() -> usize {
    9
}

/// Axis-aligned box `[top, top + h) x [left, left + w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.per_class == 0 {
            bail!("class count and images per class must be at least 1");
        }
        if self.view > self.size {
            bail!("view {} exceeds image size {}", self.view, self.size);
        }
        if self.size - self.view < 2 * self.max_shift {
            bail!("size {} cannot hold a {} view shifted by {}", self.size, self.view, self.max_shift);
        }
        if self.safe_side() < 8 {
            bail!("no room for an object: view {} with max shift {}", self.view, self.max_shift);
        }
        Ok(())
    }

    /// Side of the region shared by every shifted view.
    fn safe_side(&self) -> usize {
        self.view.saturating_sub(2 * self.max_shift)
    }

    /// Top-left corner of the shared region in image coordinates.
    fn safe_origin(&self) -> usize {
        (self.size - self.view) / 2 + self.max_shift
    }

    pub fn count(&self) -> usize {
        self.classes * self.per_class
    }
}

fn class_color(class: usize) -> [u8; 3] {
    // Spread hues around the color wheel.
    let h = (class as f64 * 0.618_033_988_75).fract() * 6.0;
    let x = (1.0 - (h % 2.0 - 1.0).abs()) * 255.0;
    let (r, g, b) = match h as usize {
        0 => (255.0, x, 0.0),
        1 => (x, 255.0, 0.0),
        2 => (0.0, 255.0, x),
        3 => (0.0, x, 255.0),
        4 => (x, 0.0, 255.0),
        _ => (255.0, 0.0, x),
    };
    [r as u8, g as u8, b as u8]
}

fn background(spec: &SyntheticSpec, rng: &mut Pcg64) -> Vec<u8> {
    let n = spec.size;
    let mut px = vec![0u8; n * n * 3];
    match spec.family {
        Family::NoisePlusObject => rng.fill(&mut px[..]),
        Family::Blocks => {
            let tile = (n / 16).max(2);
            let tiles = n.div_ceil(tile);
            let colors: Vec<[u8; 3]> = (0..tiles * tiles).map(|_| rng.gen()).collect();
            for r in 0..n {
                for c in 0..n {
                    let col = colors[(r / tile) * tiles + c / tile];
                    px[(r * n + c) * 3..(r * n + c) * 3 + 3].copy_from_slice(&col);
                }
            }
        }
        Family::Blobs => {
            let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..12)
                .map(|_| {
                    let s = rng.gen_range(n as f64 / 16.0..n as f64 / 5.0);
                    (rng.gen_range(0.0..n as f64), rng.gen_range(0.0..n as f64), s, [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
                })
                .collect();
            for r in 0..n {
                for c in 0..n {
                    let mut acc = [128.0f64; 3];
                    for &(by, bx, s, amp) in &blobs {
                        let w = (-((r as f64 - by).powi(2) + (c as f64 - bx).powi(2)) / (2.0 * s * s)).exp();
                        for ch in 0..3 {
                            acc[ch] += 110.0 * amp[ch] * w;
                        }
                    }
                    for ch in 0..3 {
                        px[(r * n + c) * 3 + ch] = acc[ch].round().clamp(0.0, 255.0) as u8;
                    }
                }
            }
        }
    }
    px
}

/// Draws one image of `class` and returns it with its object's bounding box.
pub fn generate_image(spec: &SyntheticSpec, class: usize, rng: &mut Pcg64) -> (ImageBuf, BoundingBox) {
    let n = spec.size;
    let mut px = background(spec, rng);
    let safe = spec.safe_side();
    let side = (safe / 4).clamp(4, 48).min(safe);
    let origin = spec.safe_origin();
    let top = origin + rng.gen_range(0..=safe - side);
    let left = origin + rng.gen_range(0..=safe - side);
    let color = class_color(class);
    let period = 2 + class % 5;
    for r in 0..side {
        for c in 0..side {
            let on = ((r / period) + (c / period)).is_multiple_of(2);
            let at = ((top + r) * n + left + c) * 3;
            let value = if on { color } else { [color[0] / 3, color[1] / 3, color[2] / 3] };
            px[at..at + 3].copy_from_slice(&value);
        }
    }
    let img = ImageBuf::new(n, n, 3, px).expect("generated sizes are consistent");
    (
        img,
        BoundingBox {
            top,
            left,
            height: side,
            width: side,
        },
    )
}

/// The corpus in memory, ordered by class then index.
pub fn generate(spec: &SyntheticSpec) -> Result<Vec<(Item, BoundingBox)>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.count());
    for class in 0..spec.classes {
        for i in 0..spec.per_class {
            let index = (class * spec.per_class + i) as u64;
            let mut rng = Pcg64::seed_from_u64(derive_seed(spec.seed, index));
            let (image, bbox) = generate_image(spec, class, &mut rng);
            out.push((
                Item {
                    id: format!("c{class:03}_{i:05}"),
                    label: format!("class{class:03}"),
                    image,
                },
                bbox,
            ));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestLine {
    pub id: String,
    pub label: String,
    pub path: String,
}

/// Writes the corpus as PPM files plus `manifest.jsonl`; returns the
/// manifest path.
pub fn write_corpus(spec: &SyntheticSpec, out_dir: &Path) -> Result<PathBuf> {
    let items = generate(spec)?;
    fs::create_dir_all(out_dir).with_context(|| format!("cannot create {}", out_dir.display()))?;
    let manifest_path = out_dir.join("manifest.jsonl");
    let mut manifest = Vec::new();
    for (item, _) in &items {
        let name = format!("{}.ppm", item.id);
        save_pnm(&item.image, out_dir.join(&name))?;
        let line = ManifestLine {
            id: item.id.clone(),
            label: item.label.clone(),
            path: name,
        };
        serde_json::to_writer(&mut manifest, &line)?;
        manifest.write_all(b"\n")?;
    }
    fs::write(&manifest_path, manifest).with_context(|| format!("cannot write {}", manifest_path.display()))?;
    Ok(manifest_path)
}

/// Loads a JSON-lines manifest; relative paths resolve against its directory.
pub fn load_manifest(path: &Path) -> Result<Vec<Item>> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read manifest {}", path.display()))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut items = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let entry: ManifestLine = serde_json::from_str(line).with_context(|| format!("{}:{}: bad manifest line", path.display(), n + 1))?;
        let image = load_image(dir.join(&entry.path)).with_context(|| format!("image `{}`", entry.id))?;
        items.push(Item {
            id: entry.id,
            label: entry.label,
            image,
        });
    }
    if items.is_empty() {
        bail!("manifest {} lists no images", path.display());
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rics::image::view_origin;

    fn spec(family: Family) -> SyntheticSpec {
        SyntheticSpec {
            classes: 2,
            per_class: 10,
            family,
            seed: 3,
            size: 64,
            view: 48,
            max_shift: 5,
        }
    }

    #[test]
    fn objects_stay_inside_every_shifted_view() {
        for family in [Family::Blocks, Family::Blobs, Family::NoisePlusObject] {
            let s = SyntheticSpec {
                max_shift: 9,
                size: 256,
                view: 224,
                per_class: 5,
                ..spec(family)
            };
            for (item, b) in generate(&s).unwrap() {
                for dy in -9..=9i64 {
                    for dx in -9..=9i64 {
                        let (oy, ox) = view_origin(item.image.height(), item.image.width(), 224, dy, dx).unwrap();
                        assert!(b.top >= oy && b.left >= ox && b.top + b.height <= oy + 224 && b.left + b.width <= ox + 224);
                    }
                }
            }
        }
    }

    #[test]
    fn corpus_is_seeded() {
        let a = generate(&spec(Family::Blobs)).unwrap();
        let b = generate(&spec(Family::Blobs)).unwrap();
        assert_eq!(a, b);
        let c = generate(&SyntheticSpec { seed: 4, ..spec(Family::Blobs) }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_specs() {
        assert!(generate(&SyntheticSpec { classes: 0, ..spec(Family::Blocks) }).is_err());
        assert!(generate(&SyntheticSpec { max_shift: 9, ..spec(Family::Blocks) }).is_err());
    }
}
