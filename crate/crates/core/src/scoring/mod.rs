//! Crop score functions and full score-map computation.
//!
//! Two score families are provided. `RandHash` takes the exact integer dot
//! product of the crop with a fixed random filter and reduces it modulo a
//! prime, which behaves like a hash of the crop. `MexicanHat` correlates the
//! crop with a zero-sum Ricker kernel, evaluated over a coarse-to-fine cascade
//! of scales.
//!
//! Score maps can be computed by several engines. `Naive` evaluates each crop
//! directly and is the reference. `Ntt` computes RandHash maps exactly through
//! a prime-field transform and is bit-identical to `Naive`. `Separable` and
//! `Fft` compute Mexican-Hat maps in floating point and agree with `Naive` to
//! within rounding.

mod fft;
pub mod mexican_hat;
mod ntt;
pub mod randhash;

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::sync::{Arc, Mutex};

use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{CropWindow, LumaPlane, Mode};

pub use mexican_hat::{make_mexican_hat_kernel, score_mexican_hat, RealFilter, DEFAULT_SIGMAS};
pub use randhash::{make_randhash_filter, score_randhash, IntFilter, DEFAULT_MODULUS};

/// Relative error allowance used to certify selections made on maps from
/// floating-point fast engines, scaled by the largest possible score.
pub const FAST_ENGINE_CERT_REL: f64 = 1e-9;

/// Full score configuration, possibly spanning several scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ScoreFnSpec {
    RandHash {
        seed: u64,
        #[serde(default = "default_modulus")]
        modulus: u64,
    },
    MexicanHat {
        #[serde(default = "default_sigmas")]
        sigmas: Vec<f64>,
    },
}

fn default_modulus() -> u64 {
    DEFAULT_MODULUS
}

fn default_sigmas() -> Vec<f64> {
    DEFAULT_SIGMAS.to_vec()
}

impl ScoreFnSpec {
    pub fn rand_hash(seed: u64) -> Self {
        ScoreFnSpec::RandHash {
            seed,
            modulus: DEFAULT_MODULUS,
        }
    }

    pub fn mexican_hat() -> Self {
        ScoreFnSpec::MexicanHat {
            sigmas: default_sigmas(),
        }
    }

    pub fn variant_name(&self) -> &'static str {
        match self {
            ScoreFnSpec::RandHash { .. } => "rand-hash",
            ScoreFnSpec::MexicanHat { .. } => "mexican-hat",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ScoreFnSpec::RandHash { modulus, .. } => randhash::check_modulus(*modulus),
            ScoreFnSpec::MexicanHat { sigmas } => {
                if sigmas.is_empty() {
                    return Err(Error::InvalidConfig("at least one sigma is required".into()));
                }
                if sigmas.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                    return Err(Error::InvalidConfig(format!("sigmas must be positive: {sigmas:?}")));
                }
                if sigmas.windows(2).any(|w| w[1] >= w[0]) {
                    return Err(Error::InvalidConfig(format!(
                        "sigmas must be strictly decreasing: {sigmas:?}"
                    )));
                }
                Ok(())
            }
        }
    }

    /// The single-scale score functions, in cascade order.
    pub fn scales(&self) -> Vec<ScoreFn> {
        match self {
            ScoreFnSpec::RandHash { seed, modulus } => vec![ScoreFn::RandHash {
                seed: *seed,
                modulus: *modulus,
            }],
            ScoreFnSpec::MexicanHat { sigmas } => sigmas
                .iter()
                .map(|&sigma| ScoreFn::MexicanHat { sigma })
                .collect(),
        }
    }
}

/// One scale of a [`ScoreFnSpec`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScoreFn {
    RandHash { seed: u64, modulus: u64 },
    MexicanHat { sigma: f64 },
}

impl ScoreFn {
    fn name(&self) -> &'static str {
        match self {
            ScoreFn::RandHash { .. } => "rand-hash",
            ScoreFn::MexicanHat { .. } => "mexican-hat",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    /// Ntt for RandHash, Separable for Mexican-Hat.
    #[default]
    Auto,
    Naive,
    Ntt,
    Separable,
    Fft,
}

impl Engine {
    pub fn name(&self) -> &'static str {
        match self {
            Engine::Auto => "auto",
            Engine::Naive => "naive",
            Engine::Ntt => "ntt",
            Engine::Separable => "separable",
            Engine::Fft => "fft",
        }
    }

    /// Engines whose maps equal the reference bit for bit.
    pub fn is_exact(&self) -> bool {
        matches!(self, Engine::Naive | Engine::Ntt)
    }
}

impl fmt::Display for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Scores of every crop position of one image at one scale.
///
/// Realistic maps are `(H - k + 1) x (W - k + 1)`; cyclic maps are `H x W`.
/// RandHash scores are integers below 2^53 and are stored exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    rows: usize,
    cols: usize,
    mode: Mode,
    scale_index: Option<usize>,
    scores: Vec<f64>,
}

impl ScoreMap {
    pub fn new(rows: usize, cols: usize, mode: Mode, scores: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || scores.len() != rows * cols {
            return Err(Error::SizeMismatch {
                expected: format!("{rows}x{cols} scores"),
                got: format!("{} scores", scores.len()),
            });
        }
        Ok(ScoreMap {
            rows,
            cols,
            mode,
            scale_index: None,
            scores,
        })
    }

    pub fn with_scale(mut self, scale_index: usize) -> Self {
        self.scale_index = Some(scale_index);
        self
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn scale_index(&self) -> Option<usize> {
        self.scale_index
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.scores[row * self.cols + col]
    }

    pub fn max_abs(&self) -> f64 {
        self.scores.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest `|a - b|` over all entries, relative to `self.max_abs()`.
    pub fn relative_difference(&self, other: &ScoreMap) -> Result<f64> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::SizeMismatch {
                expected: format!("{}x{}", self.rows, self.cols),
                got: format!("{}x{}", other.rows, other.cols),
            });
        }
        let diff = self
            .scores
            .iter()
            .zip(&other.scores)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let scale = self.max_abs();
        Ok(if scale == 0.0 { diff } else { diff / scale })
    }

    /// Plain-text dump:
    ///
    /// ```text
    /// SCOREMAP
    /// <cols> <rows>
    /// mode=<realistic|cyclic> scale=<index|->
    /// <one line per row, space-separated, shortest round-trip decimals>
    /// ```
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let scale = self.scale_index.map_or("-".to_string(), |s| s.to_string());
        let _ = writeln!(out, "SCOREMAP\n{} {}\nmode={} scale={}", self.cols, self.rows, self.mode, scale);
        for row in self.scores.chunks(self.cols) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    /// CSV with header `row,col,score`, one line per entry in row-major order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,col,score\n");
        for (idx, v) in self.scores.iter().enumerate() {
            let _ = writeln!(out, "{},{},{v:?}", idx / self.cols, idx % self.cols);
        }
        out
    }
}

/// Filter spectra keyed by padded `(rows, cols)`.
type SpectrumCache<T> = Mutex<HashMap<(usize, usize), Arc<Vec<T>>>>;

/// A score function bound to a crop size, with its filter prepared.
#[derive(Debug)]
pub struct Scorer {
    func: ScoreFn,
    kernel: Kernel,
    ntt_cache: SpectrumCache<u64>,
    fft_cache: SpectrumCache<Complex<f64>>,
}

#[derive(Debug)]
enum Kernel {
    Int { filter: IntFilter, modulus: u64 },
    Real(RealFilter),
}

impl Scorer {
    pub fn new(func: ScoreFn, k: usize) -> Result<Self> {
        let kernel = match func {
            ScoreFn::RandHash { seed, modulus } => {
                randhash::check_modulus(modulus)?;
                Kernel::Int {
                    filter: make_randhash_filter(seed, k)?,
                    modulus,
                }
            }
            ScoreFn::MexicanHat { sigma } => Kernel::Real(make_mexican_hat_kernel(sigma, k)?),
        };
        Ok(Scorer {
            func,
            kernel,
            ntt_cache: Mutex::default(),
            fft_cache: Mutex::default(),
        })
    }

    pub fn func(&self) -> ScoreFn {
        self.func
    }

    pub fn crop_size(&self) -> usize {
        match &self.kernel {
            Kernel::Int { filter, .. } => filter.size(),
            Kernel::Real(f) => f.size(),
        }
    }

    /// Maps `Auto` to a concrete engine and rejects unsupported pairings.
    pub fn resolve(&self, engine: Engine) -> Result<Engine> {
        let unsupported = || Error::EngineUnsupported {
            engine: engine.name(),
            score: self.func.name(),
        };
        match (&self.kernel, engine) {
            (Kernel::Int { .. }, Engine::Auto) => Ok(Engine::Ntt),
            (Kernel::Int { .. }, Engine::Naive | Engine::Ntt) => Ok(engine),
            (Kernel::Int { .. }, _) => Err(unsupported()),
            (Kernel::Real(_), Engine::Auto) => Ok(Engine::Separable),
            (Kernel::Real(_), Engine::Ntt) => Err(unsupported()),
            (Kernel::Real(_), _) => Ok(engine),
        }
    }

    /// Absolute error allowance for maps from `engine`; zero for exact engines.
    pub fn error_allowance(&self, engine: Engine) -> Result<f64> {
        let engine = self.resolve(engine)?;
        Ok(match (&self.kernel, engine.is_exact()) {
            (Kernel::Real(f), false) => FAST_ENGINE_CERT_REL * 255.0 * f.l1_norm(),
            _ => 0.0,
        })
    }

    /// Reference score of the crop at `window`.
    pub fn score_window(&self, luma: &LumaPlane, window: &CropWindow) -> Result<f64> {
        let k = self.crop_size();
        if window.size != k {
            return Err(Error::SizeMismatch {
                expected: format!("{k}x{k} window"),
                got: format!("{s}x{s}", s = window.size),
            });
        }
        let crop = luma.crop(window)?;
        self.score_crop(&crop)
    }

    pub fn score_crop(&self, crop: &LumaPlane) -> Result<f64> {
        match &self.kernel {
            Kernel::Int { filter, modulus } => Ok(score_randhash(crop, filter, *modulus)? as f64),
            Kernel::Real(f) => score_mexican_hat(crop, f),
        }
    }

    pub fn score_map(&self, luma: &LumaPlane, mode: Mode, engine: Engine) -> Result<ScoreMap> {
        let k = self.crop_size();
        let (h, w) = (luma.height(), luma.width());
        if k > h || k > w {
            return Err(Error::Geometry(format!("crop size {k} exceeds the {h}x{w} image")));
        }
        let engine = self.resolve(engine)?;
        let extended;
        let (ext, rows, cols) = match mode {
            Mode::Realistic => (luma, h - k + 1, w - k + 1),
            Mode::Cyclic => {
                extended = luma.wrap_extended(k - 1);
                (&extended, h, w)
            }
        };
        let scores = match (&self.kernel, engine) {
            (Kernel::Int { filter, modulus }, Engine::Naive) => {
                randhash::naive_map(ext, rows, cols, filter, *modulus)
            }
            (Kernel::Int { filter, modulus }, Engine::Ntt) => {
                if 255 * filter.l1_norm() as u128 >= ntt::SIGNED_LIMIT {
                    randhash::naive_map(ext, rows, cols, filter, *modulus)
                } else {
                    self.ntt_map(ext, rows, cols, filter, *modulus)
                }
            }
            (Kernel::Real(f), Engine::Naive) => mexican_hat::naive_map(ext, rows, cols, f),
            (Kernel::Real(f), Engine::Separable) => mexican_hat::separable_map(ext, rows, cols, f),
            (Kernel::Real(f), Engine::Fft) => self.fft_map(ext, rows, cols, f),
            _ => unreachable!("resolve() rejected this pairing"),
        };
        Ok(ScoreMap {
            rows,
            cols,
            mode,
            scale_index: None,
            scores,
        })
    }

    fn ntt_map(&self, ext: &LumaPlane, rows: usize, cols: usize, filter: &IntFilter, modulus: u64) -> Vec<f64> {
        let k = filter.size();
        let (eh, ew) = (ext.height(), ext.width());
        let (p, q) = (eh.next_power_of_two(), ew.next_power_of_two());
        let transform = ntt::Transform2d::new(p, q);
        let spectrum = {
            let mut cache = self.ntt_cache.lock().unwrap();
            cache
                .entry((p, q))
                .or_insert_with(|| {
                    // Flipped filter, so the convolution peak lands at (i + k - 1, j + k - 1).
                    let mut buf = vec![0u64; p * q];
                    for (idx, &w) in filter.raw().iter().enumerate() {
                        let (r, c) = (idx / k, idx % k);
                        buf[(k - 1 - r) * q + (k - 1 - c)] = ntt::from_i64(w as i64);
                    }
                    transform.forward(&mut buf);
                    Arc::new(buf)
                })
                .clone()
        };
        let mut buf = vec![0u64; p * q];
        for (r, row) in ext.values().chunks_exact(ew).enumerate() {
            for (c, &v) in row.iter().enumerate() {
                buf[r * q + c] = v as u64;
            }
        }
        transform.forward(&mut buf);
        ntt::pointwise_mul(&mut buf, &spectrum);
        transform.inverse(&mut buf);
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                let dot = ntt::to_i64(buf[(i + k - 1) * q + j + k - 1]);
                out.push(randhash::reduce(dot, modulus) as f64);
            }
        }
        out
    }

    fn fft_map(&self, ext: &LumaPlane, rows: usize, cols: usize, f: &RealFilter) -> Vec<f64> {
        let (eh, ew) = (ext.height(), ext.width());
        let spectrum = {
            let mut cache = self.fft_cache.lock().unwrap();
            cache
                .entry((eh, ew))
                .or_insert_with(|| Arc::new(fft::kernel_spectrum(f.weights(), f.size(), eh, ew)))
                .clone()
        };
        fft::correlate(&mexican_hat::as_f64(ext), eh, ew, &spectrum, rows, cols)
    }
}

/// Score map of `luma` for one score function and crop size.
pub fn compute_score_map(luma: &LumaPlane, func: ScoreFn, k: usize, mode: Mode, engine: Engine) -> Result<ScoreMap> {
    Scorer::new(func, k)?.score_map(luma, mode, engine)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_pcg::Pcg64;

    fn noise(h: usize, w: usize, seed: u64) -> LumaPlane {
        let mut rng = Pcg64::seed_from_u64(seed);
        LumaPlane::from_fn(w, h, |_, _| rng.gen()).unwrap()
    }

    const RAND: ScoreFn = ScoreFn::RandHash {
        seed: 7,
        modulus: DEFAULT_MODULUS,
    };

    #[test]
    fn spec_validation() {
        assert!(ScoreFnSpec::mexican_hat().validate().is_ok());
        assert!(ScoreFnSpec::rand_hash(1).validate().is_ok());
        let bad = [
            ScoreFnSpec::MexicanHat { sigmas: vec![] },
            ScoreFnSpec::MexicanHat { sigmas: vec![9.0, 20.0] },
            ScoreFnSpec::MexicanHat { sigmas: vec![20.0, 20.0] },
            ScoreFnSpec::MexicanHat { sigmas: vec![-1.0] },
            ScoreFnSpec::RandHash { seed: 0, modulus: 1 },
        ];
        for spec in bad {
            assert!(spec.validate().is_err(), "{spec:?}");
        }
    }

    #[test]
    fn spec_json_defaults() {
        let s: ScoreFnSpec = serde_json::from_str(r#"{"type":"mexican_hat"}"#).unwrap();
        assert_eq!(s, ScoreFnSpec::mexican_hat());
        let s: ScoreFnSpec = serde_json::from_str(r#"{"type":"rand_hash","seed":3}"#).unwrap();
        assert_eq!(s, ScoreFnSpec::rand_hash(3));
    }

    #[test]
    fn constant_image_gives_flat_zero_map() {
        let luma = LumaPlane::new(4, 4, vec![93; 16]).unwrap();
        let map = compute_score_map(&luma, ScoreFn::MexicanHat { sigma: 2.0 }, 3, Mode::Realistic, Engine::Naive).unwrap();
        assert_eq!((map.rows(), map.cols()), (2, 2));
        let first = map.get(0, 0);
        assert!(map.scores().iter().all(|&v| v == first));
        assert!(first.abs() < 1e-9, "{first}");
    }

    #[test]
    fn ntt_matches_naive_bit_for_bit() {
        for (seed, (h, w), k) in [(1, (8, 8), 4), (2, (13, 9), 5), (3, (17, 17), 1), (4, (6, 11), 6)] {
            let luma = noise(h, w, seed);
            let scorer = Scorer::new(RAND, k).unwrap();
            for mode in [Mode::Realistic, Mode::Cyclic] {
                let a = scorer.score_map(&luma, mode, Engine::Naive).unwrap();
                let b = scorer.score_map(&luma, mode, Engine::Ntt).unwrap();
                assert_eq!(a, b, "seed {seed} mode {mode}");
            }
        }
        let map = Scorer::new(RAND, 4).unwrap().score_map(&noise(8, 8, 9), Mode::Realistic, Engine::Ntt).unwrap();
        assert_eq!((map.rows(), map.cols()), (5, 5));
    }

    #[test]
    fn fast_mexican_hat_engines_match_naive() {
        let luma = noise(32, 32, 5);
        for sigma in [50.0, 9.0, 2.0] {
            let scorer = Scorer::new(ScoreFn::MexicanHat { sigma }, 16).unwrap();
            for mode in [Mode::Cyclic, Mode::Realistic] {
                let naive = scorer.score_map(&luma, mode, Engine::Naive).unwrap();
                for engine in [Engine::Fft, Engine::Separable] {
                    let fast = scorer.score_map(&luma, mode, engine).unwrap();
                    let rel = naive.relative_difference(&fast).unwrap();
                    assert!(rel <= 1e-6, "sigma {sigma} {mode} {engine}: {rel}");
                }
            }
        }
    }

    #[test]
    fn unsupported_engine_pairings() {
        let luma = noise(8, 8, 1);
        let rand = Scorer::new(RAND, 3).unwrap();
        assert!(matches!(
            rand.score_map(&luma, Mode::Realistic, Engine::Fft),
            Err(Error::EngineUnsupported { .. })
        ));
        assert!(rand.score_map(&luma, Mode::Realistic, Engine::Separable).is_err());
        let mh = Scorer::new(ScoreFn::MexicanHat { sigma: 3.0 }, 3).unwrap();
        assert!(mh.score_map(&luma, Mode::Realistic, Engine::Ntt).is_err());
        assert!(rand.score_map(&noise(2, 8, 1), Mode::Cyclic, Engine::Naive).is_err());
    }

    #[test]
    fn cyclic_maps_are_shift_equivariant() {
        let luma = noise(12, 12, 3);
        let rand = Scorer::new(RAND, 5).unwrap();
        let mh = Scorer::new(ScoreFn::MexicanHat { sigma: 2.0 }, 5).unwrap();
        let base_r = rand.score_map(&luma, Mode::Cyclic, Engine::Naive).unwrap();
        let base_m = mh.score_map(&luma, Mode::Cyclic, Engine::Naive).unwrap();
        for dy in 0..12i64 {
            for dx in 0..12i64 {
                let shifted = luma.cyclic_shift(dy, dx);
                let r = rand.score_map(&shifted, Mode::Cyclic, Engine::Ntt).unwrap();
                let m = mh.score_map(&shifted, Mode::Cyclic, Engine::Naive).unwrap();
                for i in 0..12 {
                    for j in 0..12 {
                        let (si, sj) = ((i + dy as usize) % 12, (j + dx as usize) % 12);
                        assert_eq!(r.get(i, j), base_r.get(si, sj));
                        let (a, b) = (m.get(i, j), base_m.get(si, sj));
                        assert!((a - b).abs() <= 1e-9 * base_m.max_abs());
                    }
                }
            }
        }
    }

    #[test]
    fn realistic_view_map_is_source_subwindow() {
        let src = noise(20, 20, 4);
        let scorer = Scorer::new(RAND, 6).unwrap();
        let full = scorer.score_map(&src, Mode::Realistic, Engine::Ntt).unwrap();
        for (oy, ox) in [(0, 0), (2, 3), (4, 4)] {
            let view = src.crop(&CropWindow::new(oy, ox, 16, Mode::Realistic)).unwrap();
            let map = scorer.score_map(&view, Mode::Realistic, Engine::Naive).unwrap();
            for i in 0..map.rows() {
                for j in 0..map.cols() {
                    assert_eq!(map.get(i, j), full.get(oy + i, ox + j));
                }
            }
        }
    }

    #[test]
    fn crop_score_ignores_outside_pixels() {
        let mut rng = Pcg64::seed_from_u64(8);
        let luma = noise(10, 10, 6);
        let window = CropWindow::new(3, 2, 4, Mode::Realistic);
        for func in [RAND, ScoreFn::MexicanHat { sigma: 1.5 }] {
            let scorer = Scorer::new(func, 4).unwrap();
            let before = scorer.score_map(&luma, Mode::Realistic, Engine::Naive).unwrap().get(3, 2);
            let mut values = luma.values().to_vec();
            for r in 0..10 {
                for c in 0..10 {
                    let inside = (3..7).contains(&r) && (2..6).contains(&c);
                    if !inside {
                        values[r * 10 + c] = rng.gen();
                    }
                }
            }
            let mutated = LumaPlane::new(10, 10, values).unwrap();
            let after = scorer.score_map(&mutated, Mode::Realistic, Engine::Naive).unwrap().get(3, 2);
            assert_eq!(before, after);
            assert_eq!(scorer.score_window(&mutated, &window).unwrap(), before);
        }
    }

    #[test]
    fn export_formats() {
        let map = ScoreMap::new(2, 2, Mode::Cyclic, vec![1.0, 2.5, -3.0, 0.0]).unwrap().with_scale(1);
        assert_eq!(map.to_text(), "SCOREMAP\n2 2\nmode=cyclic scale=1\n1.0 2.5\n-3.0 0.0\n");
        assert_eq!(map.to_csv(), "row,col,score\n0,0,1.0\n0,1,2.5\n1,0,-3.0\n1,1,0.0\n");
    }
}
