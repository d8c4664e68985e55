//! Crop selection: non-maximum suppression over a score map, then the
//! highest-scoring surviving crop.
//!
//! Selection works on a *source* map and a *view geometry*. For a plain call
//! the source is the view itself. The evaluation harness instead scores an
//! oversized source once and selects for many translated views. That is
//! valid because a view's map is a sub-window (realistic) or a circular shift
//! (cyclic) of the source map, and each crop's score depends only on its own
//! pixels.
//!
//! Maps from floating-point fast engines are only trusted when every decision
//! clears the engine's error allowance. Otherwise that scale is recomputed with
//! the reference engine, so the selection always matches the reference.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::embedding::{Embedder, OutputRecord};
use crate::error::{Error, Result};
use crate::image::{to_luminance, CropWindow, ImageBuf, LumaPlane, Mode};
use crate::scoring::{Engine, ScoreFnSpec, ScoreMap, Scorer};

pub const DEFAULT_CROP_SIZE: usize = 140;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RicsConfig {
    #[serde(default = "default_crop")]
    pub crop_size: usize,
    pub score: ScoreFnSpec,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub engine: Engine,
}

fn default_crop() -> usize {
    DEFAULT_CROP_SIZE
}

impl RicsConfig {
    pub fn new(crop_size: usize, score: ScoreFnSpec, mode: Mode) -> Self {
        RicsConfig {
            crop_size,
            score,
            mode,
            engine: Engine::Auto,
        }
    }

    pub fn with_engine(mut self, engine: Engine) -> Self {
        self.engine = engine;
        self
    }

    /// Checks the configuration against a `height x width` view.
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        self.score.validate()?;
        let k = self.crop_size;
        if k < 3 {
            return Err(Error::InvalidConfig(format!("crop size {k} below 3")));
        }
        if k > height || k > width {
            return Err(Error::InvalidConfig(format!(
                "crop size {k} exceeds the {height}x{width} view"
            )));
        }
        if self.mode == Mode::Realistic && (height - k + 1 < 3 || width - k + 1 < 3) {
            return Err(Error::MapTooSmall {
                rows: height - k + 1,
                cols: width - k + 1,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Chosen window, in view coordinates.
    pub window: CropWindow,
    /// Reference-engine score of the chosen crop (at scale 0 after a fallback).
    pub score: f64,
    pub scale_index: Option<usize>,
    pub used_fallback: bool,
}

/// One line of the per-inference audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub image_id: String,
    pub mode: Mode,
    pub k: usize,
    pub score_variant: String,
    pub window: AuditWindow,
    pub scale_index: Option<usize>,
    pub used_fallback: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditWindow {
    pub top: usize,
    pub left: usize,
}

impl AuditRecord {
    pub fn new(image_id: &str, cfg: &RicsConfig, sel: &SelectionResult) -> Self {
        AuditRecord {
            image_id: image_id.to_owned(),
            mode: cfg.mode,
            k: cfg.crop_size,
            score_variant: cfg.score.variant_name().to_owned(),
            window: AuditWindow {
                top: sel.window.top,
                left: sel.window.left,
            },
            scale_index: sel.scale_index,
            used_fallback: sel.used_fallback,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("audit records always serialize")
    }
}

/// Positions that beat all eight neighbors strictly.
///
/// Realistic maps skip the one-cell border. Cyclic maps wrap around, so every
/// cell is interior.
pub fn nms_candidates(map: &ScoreMap) -> Result<Vec<(usize, usize)>> {
    if map.mode() == Mode::Realistic && (map.rows() < 3 || map.cols() < 3) {
        return Err(Error::MapTooSmall {
            rows: map.rows(),
            cols: map.cols(),
        });
    }
    let mut out: Vec<(usize, usize)> = classify(map, 0.0)
        .into_iter()
        .map(|p| (p.row, p.col))
        .collect();
    out.sort_unstable();
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
struct Peak {
    row: usize,
    col: usize,
    score: f64,
    /// False when the error allowance cannot settle local-maximum status.
    certain: bool,
}

/// Local-maximum classification with an absolute error allowance `eps`.
/// Cells that are certainly dominated by a neighbor are dropped.
fn classify(map: &ScoreMap, eps: f64) -> Vec<Peak> {
    let (rows, cols) = (map.rows(), map.cols());
    let (r_range, c_range) = match map.mode() {
        Mode::Realistic if rows >= 3 && cols >= 3 => (1..rows - 1, 1..cols - 1),
        Mode::Realistic => (0..0, 0..0),
        Mode::Cyclic => (0..rows, 0..cols),
    };
    let margin = 2.0 * eps;
    let mut peaks = Vec::new();
    for r in r_range {
        for c in c_range.clone() {
            let v = map.get(r, c);
            let mut certain = true;
            let mut dominated = false;
            for (dr, dc) in NEIGHBORS {
                let nr = (r as isize + dr).rem_euclid(rows as isize) as usize;
                let nc = (c as isize + dc).rem_euclid(cols as isize) as usize;
                let d = v - map.get(nr, nc);
                if -d >= margin {
                    dominated = true;
                    break;
                }
                if d <= margin {
                    certain = false;
                }
            }
            if !dominated {
                peaks.push(Peak {
                    row: r,
                    col: c,
                    score: v,
                    certain,
                });
            }
        }
    }
    peaks
}

const NEIGHBORS: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

fn by_score_then_position(a: &Peak, b: &Peak) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.row.cmp(&b.row))
        .then(a.col.cmp(&b.col))
}

/// Where a view's score map sits inside the source map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewGeom {
    /// View map cell `(i, j)` is source cell `(top + i, left + j)`.
    Realistic {
        top: usize,
        left: usize,
        rows: usize,
        cols: usize,
    },
    /// View map cell `(i, j)` is source cell `((i + dy) mod H, (j + dx) mod W)`.
    Cyclic { dy: usize, dx: usize },
}

impl ViewGeom {
    pub fn identity(map: &ScoreMap) -> Self {
        match map.mode() {
            Mode::Realistic => ViewGeom::Realistic {
                top: 0,
                left: 0,
                rows: map.rows(),
                cols: map.cols(),
            },
            Mode::Cyclic => ViewGeom::Cyclic { dy: 0, dx: 0 },
        }
    }

    fn interior_contains(&self, row: usize, col: usize) -> bool {
        match *self {
            ViewGeom::Realistic { top, left, rows, cols } => {
                row > top && row + 2 < top + rows + 1 && col > left && col + 2 < left + cols + 1
            }
            ViewGeom::Cyclic { .. } => true,
        }
    }

    /// Source cell to view coordinates.
    fn to_view(self, row: usize, col: usize, src_rows: usize, src_cols: usize) -> (usize, usize) {
        match self {
            ViewGeom::Realistic { top, left, .. } => (row - top, col - left),
            ViewGeom::Cyclic { dy, dx } => ((row + src_rows - dy) % src_rows, (col + src_cols - dx) % src_cols),
        }
    }
}

enum Pick {
    Selected { row: usize, col: usize },
    Empty,
    Ambiguous,
}

/// A score map with its local maxima ranked for repeated selection.
struct PreparedMap {
    map: ScoreMap,
    eps: f64,
    peaks: Vec<Peak>,
}

impl PreparedMap {
    fn new(map: ScoreMap, eps: f64) -> Self {
        let mut peaks = classify(&map, eps);
        peaks.sort_by(by_score_then_position);
        PreparedMap { map, eps, peaks }
    }

    fn exact(&self) -> bool {
        self.eps == 0.0
    }

    fn pick(&self, geom: &ViewGeom, content: &dyn Fn((usize, usize), (usize, usize)) -> Ordering) -> Pick {
        let margin = 2.0 * self.eps;
        let Some(first) = self.peaks.iter().position(|p| geom.interior_contains(p.row, p.col)) else {
            return Pick::Empty;
        };
        let best = self.peaks[first];
        if !self.exact() {
            if !best.certain {
                return Pick::Ambiguous;
            }
            let rival = self.peaks[first + 1..]
                .iter()
                .take_while(|q| q.score >= best.score - margin)
                .any(|q| geom.interior_contains(q.row, q.col));
            if rival {
                return Pick::Ambiguous;
            }
            return Pick::Selected {
                row: best.row,
                col: best.col,
            };
        }
        match geom {
            // Peaks are ordered by (score desc, row, col), and the view offset
            // preserves position order.
            ViewGeom::Realistic { .. } => Pick::Selected {
                row: best.row,
                col: best.col,
            },
            ViewGeom::Cyclic { .. } => {
                let tied = self.peaks.iter().take_while(|q| q.score == best.score).map(|q| (q.row, q.col));
                let (row, col) = self.break_tie(tied, geom, content);
                Pick::Selected { row, col }
            }
        }
    }

    /// Global maximum over every cell; the cyclic fallback.
    fn pick_global(&self, geom: &ViewGeom, content: &dyn Fn((usize, usize), (usize, usize)) -> Ordering) -> Pick {
        let map = &self.map;
        let best = map.scores().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let floor = best - 2.0 * self.eps;
        let cells = (0..map.rows()).flat_map(|r| (0..map.cols()).map(move |c| (r, c)));
        if !self.exact() {
            let mut near = cells.filter(|&(r, c)| map.get(r, c) >= floor);
            let first = near.next().expect("maps are non-empty");
            return if near.next().is_some() {
                Pick::Ambiguous
            } else {
                Pick::Selected {
                    row: first.0,
                    col: first.1,
                }
            };
        }
        let tied = cells.filter(|&(r, c)| map.get(r, c) == best);
        let (row, col) = self.break_tie(tied, geom, content);
        Pick::Selected { row, col }
    }

    /// Among equal scores: smallest crop content, then smallest view position.
    fn break_tie(
        &self,
        tied: impl Iterator<Item = (usize, usize)>,
        geom: &ViewGeom,
        content: &dyn Fn((usize, usize), (usize, usize)) -> Ordering,
    ) -> (usize, usize) {
        let (rows, cols) = (self.map.rows(), self.map.cols());
        tied.min_by(|&a, &b| {
            content(a, b).then_with(|| geom.to_view(a.0, a.1, rows, cols).cmp(&geom.to_view(b.0, b.1, rows, cols)))
        })
        .expect("tie groups are non-empty")
    }
}

/// A [`RicsConfig`] with its score filters built, reusable across images.
#[derive(Debug)]
pub struct RicsSelector {
    cfg: RicsConfig,
    scorers: Vec<Scorer>,
}

impl RicsSelector {
    pub fn new(cfg: RicsConfig) -> Result<Self> {
        cfg.score.validate()?;
        let scorers = cfg
            .score
            .scales()
            .into_iter()
            .map(|f| Scorer::new(f, cfg.crop_size))
            .collect::<Result<Vec<_>>>()?;
        // Surface engine/score mismatches at construction time.
        scorers[0].resolve(cfg.engine)?;
        Ok(RicsSelector { cfg, scorers })
    }

    pub fn config(&self) -> &RicsConfig {
        &self.cfg
    }

    /// Selects a crop of `luma`. `content`, when given, must be the color
    /// image `luma` was derived from; it settles exact score ties in cyclic
    /// mode.
    pub fn select(&self, luma: &LumaPlane, content: Option<&ImageBuf>) -> Result<SelectionResult> {
        self.cfg.validate(luma.height(), luma.width())?;
        let mut source = SourceMaps::new(self, luma, content);
        let geom = match self.cfg.mode {
            Mode::Realistic => ViewGeom::Realistic {
                top: 0,
                left: 0,
                rows: luma.height() - self.cfg.crop_size + 1,
                cols: luma.width() - self.cfg.crop_size + 1,
            },
            Mode::Cyclic => ViewGeom::Cyclic { dy: 0, dx: 0 },
        };
        let pick = source.select(&geom)?;
        Ok(pick.result)
    }

    /// Binds this selector to one source image so that many views of it can
    /// be served from shared score maps.
    pub fn source<'a>(&'a self, luma: &'a LumaPlane, content: Option<&'a ImageBuf>) -> SourceMaps<'a> {
        SourceMaps::new(self, luma, content)
    }
}

/// Result of selecting for one view of a [`SourceMaps`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourcePick {
    /// Selection in view coordinates.
    pub result: SelectionResult,
    /// The same crop in source coordinates.
    pub source_window: CropWindow,
}

/// Lazily computed per-scale score maps of one source image.
pub struct SourceMaps<'a> {
    selector: &'a RicsSelector,
    luma: &'a LumaPlane,
    content: Option<&'a ImageBuf>,
    fast: Vec<Option<PreparedMap>>,
    exact: Vec<Option<PreparedMap>>,
}

impl<'a> SourceMaps<'a> {
    fn new(selector: &'a RicsSelector, luma: &'a LumaPlane, content: Option<&'a ImageBuf>) -> Self {
        let n = selector.scorers.len();
        SourceMaps {
            selector,
            luma,
            content,
            fast: (0..n).map(|_| None).collect(),
            exact: (0..n).map(|_| None).collect(),
        }
    }

    fn prepared(&mut self, scale: usize, exact: bool) -> Result<&PreparedMap> {
        let scorer = &self.selector.scorers[scale];
        let engine = self.selector.cfg.engine;
        let exact = exact || scorer.resolve(engine)?.is_exact();
        let slot = if exact { &mut self.exact[scale] } else { &mut self.fast[scale] };
        if slot.is_none() {
            let (engine, eps) = if exact {
                let e = if scorer.resolve(engine)?.is_exact() { engine } else { Engine::Naive };
                (e, 0.0)
            } else {
                (engine, scorer.error_allowance(engine)?)
            };
            let map = scorer.score_map(self.luma, self.selector.cfg.mode, engine)?.with_scale(scale);
            *slot = Some(PreparedMap::new(map, eps));
        }
        Ok(slot.as_ref().unwrap())
    }

    fn window_at(&self, row: usize, col: usize) -> CropWindow {
        CropWindow::new(row, col, self.selector.cfg.crop_size, self.selector.cfg.mode)
    }

    /// Selects the crop for the view described by `geom`.
    pub fn select(&mut self, geom: &ViewGeom) -> Result<SourcePick> {
        let mode = self.selector.cfg.mode;
        let k = self.selector.cfg.crop_size;
        let luma = self.luma;
        let content = self.content;
        let compare = move |a: (usize, usize), b: (usize, usize)| -> Ordering {
            let wa = CropWindow::new(a.0, a.1, k, mode);
            let wb = CropWindow::new(b.0, b.1, k, mode);
            match content {
                Some(img) => img.crop(&wa).ok().map(ImageBuf::into_pixels).cmp(&img.crop(&wb).ok().map(ImageBuf::into_pixels)),
                None => luma.crop(&wa).ok().map(|p| p.values().to_vec()).cmp(&luma.crop(&wb).ok().map(|p| p.values().to_vec())),
            }
        };

        for scale in 0..self.selector.scorers.len() {
            let mut exact = false;
            loop {
                let prepared = self.prepared(scale, exact)?;
                match prepared.pick(geom, &compare) {
                    Pick::Selected { row, col } => {
                        let score = if prepared.exact() {
                            prepared.map.get(row, col)
                        } else {
                            self.selector.scorers[scale].score_window(luma, &self.window_at(row, col))?
                        };
                        return Ok(self.finish(geom, row, col, score, Some(scale), false));
                    }
                    Pick::Empty => break,
                    Pick::Ambiguous => exact = true,
                }
            }
        }

        // Every scale came back empty.
        let (row, col) = match (mode, geom) {
            (Mode::Realistic, ViewGeom::Realistic { top, left, rows, cols }) => {
                let view_h = rows + k - 1;
                let view_w = cols + k - 1;
                (top + (view_h - k) / 2, left + (view_w - k) / 2)
            }
            (Mode::Cyclic, ViewGeom::Cyclic { .. }) => {
                let mut exact = false;
                loop {
                    match self.prepared(0, exact)?.pick_global(geom, &compare) {
                        Pick::Selected { row, col } => break (row, col),
                        _ => exact = true,
                    }
                }
            }
            _ => return Err(Error::Geometry("view geometry does not match the selection mode".into())),
        };
        let score = self.selector.scorers[0].score_window(luma, &self.window_at(row, col))?;
        Ok(self.finish(geom, row, col, score, None, true))
    }

    fn finish(&self, geom: &ViewGeom, row: usize, col: usize, score: f64, scale_index: Option<usize>, used_fallback: bool) -> SourcePick {
        let (src_rows, src_cols) = match self.selector.cfg.mode {
            Mode::Realistic => (0, 0),
            Mode::Cyclic => (self.luma.height(), self.luma.width()),
        };
        let (vr, vc) = geom.to_view(row, col, src_rows, src_cols);
        SourcePick {
            result: SelectionResult {
                window: self.window_at(vr, vc),
                score,
                scale_index,
                used_fallback,
            },
            source_window: self.window_at(row, col),
        }
    }
}

/// Selects a crop of `luma` under `cfg`.
pub fn select_crop(luma: &LumaPlane, cfg: &RicsConfig) -> Result<SelectionResult> {
    RicsSelector::new(cfg.clone())?.select(luma, None)
}

/// Full inference: select on luminance, embed the same window of the color view.
pub fn rics_infer(view: &ImageBuf, cfg: &RicsConfig, embedder: &dyn Embedder) -> Result<OutputRecord> {
    infer_with(&RicsSelector::new(cfg.clone())?, view, embedder)
}

/// [`rics_infer`] with a prepared selector.
pub fn infer_with(selector: &RicsSelector, view: &ImageBuf, embedder: &dyn Embedder) -> Result<OutputRecord> {
    let luma = to_luminance(view);
    let selection = selector.select(&luma, Some(view))?;
    let crop = view.crop(&selection.window)?;
    let embedding = embedder.embed(&crop).map_err(|e| Error::Embed {
        window: selection.window,
        source: Box::new(e),
    })?;
    Ok(OutputRecord {
        embedding,
        selection: Some(selection),
        label: None,
    })
}
