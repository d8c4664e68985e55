//! Robustness measurement: gallery retrieval, consistency and adversarial
//! robustness over translated views.
//!
//! Each image is handled by a probe that scores its source once and serves
//! every translated view from that map. Embeddings and retrieval decisions
//! are cached per selected window, so a view that lands on an already seen
//! crop costs only the selection.

mod gallery;

use std::borrow::Cow;
use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{Embedder, Embedding, OutputRecord};
use crate::error::{Error, Result};
use crate::image::{to_luminance, translate_view, view_origin, CropWindow, ImageBuf, Mode, Translation};
use crate::selection::{AuditRecord, RicsConfig, RicsSelector, SelectionResult, SourceMaps, ViewGeom};

pub use gallery::{outputs_equal, Distance, GalleryEntry, GalleryIndex, MetricKind, Neighbor};

/// One labeled source image.
#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub id: String,
    pub label: String,
    pub image: ImageBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftGeometry {
    /// Every shift with `max(|dx|, |dy|) <= radius`, except `(0, 0)`.
    #[default]
    Ball,
    /// Every shift with `max(|dx|, |dy|) == radius`.
    Shell,
    /// The four diagonal shifts `(+-radius, +-radius)`.
    Corners,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ShiftSet {
    pub radius: usize,
    pub geometry: ShiftGeometry,
    pub mode: Mode,
}

impl ShiftSet {
    pub fn new(radius: usize, geometry: ShiftGeometry, mode: Mode) -> Result<Self> {
        if radius == 0 {
            return Err(Error::InvalidConfig("shift radius must be at least 1".into()));
        }
        Ok(ShiftSet { radius, geometry, mode })
    }

    /// All `(dx, dy)` offsets, row-major by `dy` then `dx`.
    pub fn offsets(&self) -> Vec<(i64, i64)> {
        let r = self.radius as i64;
        match self.geometry {
            ShiftGeometry::Corners => vec![(-r, -r), (r, -r), (-r, r), (r, r)],
            g => {
                let mut out = Vec::new();
                for dy in -r..=r {
                    for dx in -r..=r {
                        let cheb = dx.abs().max(dy.abs());
                        let keep = match g {
                            ShiftGeometry::Ball => cheb > 0,
                            _ => cheb == r,
                        };
                        if keep {
                            out.push((dx, dy));
                        }
                    }
                }
                out
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PipelineKind {
    Rics(RicsConfig),
    /// The fixed center `crop_size` window of the view.
    CenterCrop { crop_size: usize, mode: Mode },
}

/// A view-to-output function: crop choice plus embedder.
pub struct Pipeline {
    kind: PipelineKind,
    selector: Option<RicsSelector>,
    embedder: Arc<dyn Embedder>,
    view_size: usize,
}

impl Pipeline {
    pub fn new(kind: PipelineKind, embedder: Arc<dyn Embedder>, view_size: usize) -> Result<Self> {
        let selector = match &kind {
            PipelineKind::Rics(cfg) => {
                cfg.validate(view_size, view_size)?;
                Some(RicsSelector::new(cfg.clone())?)
            }
            PipelineKind::CenterCrop { crop_size, .. } => {
                if *crop_size == 0 || *crop_size > view_size {
                    return Err(Error::InvalidConfig(format!("crop size {crop_size} does not fit a {view_size} view")));
                }
                None
            }
        };
        Ok(Pipeline {
            kind,
            selector,
            embedder,
            view_size,
        })
    }

    pub fn rics(cfg: RicsConfig, embedder: Arc<dyn Embedder>, view_size: usize) -> Result<Self> {
        Pipeline::new(PipelineKind::Rics(cfg), embedder, view_size)
    }

    pub fn center_crop(crop_size: usize, mode: Mode, embedder: Arc<dyn Embedder>, view_size: usize) -> Result<Self> {
        Pipeline::new(PipelineKind::CenterCrop { crop_size, mode }, embedder, view_size)
    }

    pub fn kind(&self) -> &PipelineKind {
        &self.kind
    }

    pub fn view_size(&self) -> usize {
        self.view_size
    }

    pub fn mode(&self) -> Mode {
        match &self.kind {
            PipelineKind::Rics(cfg) => cfg.mode,
            PipelineKind::CenterCrop { mode, .. } => *mode,
        }
    }

    pub fn crop_size(&self) -> usize {
        match &self.kind {
            PipelineKind::Rics(cfg) => cfg.crop_size,
            PipelineKind::CenterCrop { crop_size, .. } => *crop_size,
        }
    }

    /// Short name: `rics-rand`, `rics-mh` or `center-crop`.
    pub fn name(&self) -> &'static str {
        match &self.kind {
            PipelineKind::Rics(cfg) => match cfg.score.variant_name() {
                "rand-hash" => "rics-rand",
                _ => "rics-mh",
            },
            PipelineKind::CenterCrop { .. } => "center-crop",
        }
    }

    /// Applies the pipeline to one view.
    pub fn infer(&self, view: &ImageBuf) -> Result<OutputRecord> {
        match &self.selector {
            Some(sel) => crate::selection::infer_with(sel, view, self.embedder.as_ref()),
            None => {
                let w = CropWindow::centered(view.height(), view.width(), self.crop_size(), self.mode());
                let embedding = self.embedder.embed(&view.crop(&w)?).map_err(|e| Error::Embed {
                    window: w,
                    source: Box::new(e),
                })?;
                Ok(OutputRecord {
                    embedding,
                    selection: None,
                    label: None,
                })
            }
        }
    }

    /// The image that views are taken from: the source itself for realistic
    /// shifts, the centered view for cyclic ones.
    fn base<'a>(&self, source: &'a ImageBuf) -> Result<Cow<'a, ImageBuf>> {
        match self.mode() {
            Mode::Realistic => {
                view_origin(source.height(), source.width(), self.view_size, 0, 0)?;
                Ok(Cow::Borrowed(source))
            }
            Mode::Cyclic => Ok(Cow::Owned(translate_view(source, self.view_size, Translation::identity(Mode::Realistic))?)),
        }
    }

    /// The view `T(I, (dx, dy))` of a source image.
    pub fn view(&self, source: &ImageBuf, dx: i64, dy: i64) -> Result<ImageBuf> {
        let base = self.base(source)?;
        translate_view(&base, self.view_size, Translation::new(dx, dy, self.mode()))
    }

    /// Runs `f` with a probe bound to `source`.
    pub fn with_probe<R>(&self, source: &ImageBuf, f: impl FnOnce(&mut ImageProbe<'_>) -> Result<R>) -> Result<R> {
        let base = self.base(source)?;
        let luma = self.selector.as_ref().map(|_| to_luminance(&base));
        let mut probe = ImageProbe {
            pipeline: self,
            base: &base,
            maps: match (&self.selector, &luma) {
                (Some(sel), Some(l)) => Some(sel.source(l, Some(&base))),
                _ => None,
            },
            embeddings: HashMap::new(),
        };
        f(&mut probe)
    }
}

/// Window key in base-image coordinates.
type WindowKey = (usize, usize);

/// Per-image cache serving any translated view of one source.
pub struct ImageProbe<'a> {
    pipeline: &'a Pipeline,
    base: &'a ImageBuf,
    maps: Option<SourceMaps<'a>>,
    embeddings: HashMap<WindowKey, Embedding>,
}

impl ImageProbe<'_> {
    /// Crop chosen for the view shifted by `(dx, dy)`: the window in base
    /// coordinates, and the selection in view coordinates when there is one.
    pub fn select(&mut self, dx: i64, dy: i64) -> Result<(CropWindow, Option<SelectionResult>)> {
        let p = self.pipeline;
        let (m, k, mode) = (p.view_size, p.crop_size(), p.mode());
        let (h, w) = (self.base.height(), self.base.width());
        match mode {
            Mode::Realistic => {
                let (oy, ox) = view_origin(h, w, m, dy, dx)?;
                match &mut self.maps {
                    Some(maps) => {
                        let pick = maps.select(&ViewGeom::Realistic {
                            top: oy,
                            left: ox,
                            rows: m - k + 1,
                            cols: m - k + 1,
                        })?;
                        Ok((pick.source_window, Some(pick.result)))
                    }
                    None => {
                        let c = (m - k) / 2;
                        Ok((CropWindow::new(oy + c, ox + c, k, mode), None))
                    }
                }
            }
            Mode::Cyclic => {
                let (sy, sx) = (dy.rem_euclid(h as i64) as usize, dx.rem_euclid(w as i64) as usize);
                match &mut self.maps {
                    Some(maps) => {
                        let pick = maps.select(&ViewGeom::Cyclic { dy: sy, dx: sx })?;
                        Ok((pick.source_window, Some(pick.result)))
                    }
                    None => {
                        let c = (m - k) / 2;
                        Ok((CropWindow::new((c + sy) % h, (c + sx) % w, k, mode), None))
                    }
                }
            }
        }
    }

    /// Embedding of a base-image window, computed once.
    pub fn embedding(&mut self, window: &CropWindow) -> Result<&Embedding> {
        let key = (window.top, window.left);
        if !self.embeddings.contains_key(&key) {
            let crop = self.base.crop(window)?;
            let e = self.pipeline.embedder.embed(&crop).map_err(|e| Error::Embed {
                window: *window,
                source: Box::new(e),
            })?;
            self.embeddings.insert(key, e);
        }
        Ok(&self.embeddings[&key])
    }

    /// Same result as `pipeline.infer(pipeline.view(source, dx, dy))`.
    pub fn record(&mut self, dx: i64, dy: i64) -> Result<OutputRecord> {
        let (window, selection) = self.select(dx, dy)?;
        Ok(OutputRecord {
            embedding: self.embedding(&window)?.clone(),
            selection,
            label: None,
        })
    }
}

/// Embeds every item's unshifted view.
pub fn build_gallery(items: &[Item], pipeline: &Pipeline, metric: Distance) -> Result<GalleryIndex> {
    build_gallery_with(items, pipeline, metric, 1)
}

/// [`build_gallery`] on `workers` threads; entries keep dataset order.
pub fn build_gallery_with(items: &[Item], pipeline: &Pipeline, metric: Distance, workers: usize) -> Result<GalleryIndex> {
    let entries = run_pool(workers, items.len(), |i| {
        let it = &items[i];
        let rec = pipeline.with_probe(&it.image, |p| p.record(0, 0)).map_err(|e| Error::at_image(&it.id, "gallery", e))?;
        Ok(GalleryEntry {
            id: it.id.clone(),
            label: it.label.clone(),
            embedding: rec.embedding,
        })
    })?;
    GalleryIndex::new(entries, metric)
}

/// What to measure in [`evaluate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPlan {
    pub shifts: Vec<usize>,
    pub metrics: Vec<MetricKind>,
    #[serde(default)]
    pub adversarial_geometry: ShiftGeometry,
    #[serde(default = "shell")]
    pub consistency_geometry: ShiftGeometry,
    pub samples_per_image: usize,
    pub seed: u64,
    /// Leave the query's own entry out of retrieval.
    #[serde(default = "yes")]
    pub exclude_self: bool,
    /// K for the accuracy column; `None` skips it.
    #[serde(default)]
    pub accuracy_k: Option<usize>,
    #[serde(default = "one_worker")]
    pub workers: usize,
}

fn shell() -> ShiftGeometry {
    ShiftGeometry::Shell
}

fn yes() -> bool {
    true
}

fn one_worker() -> usize {
    1
}

impl EvalPlan {
    pub fn validate(&self) -> Result<()> {
        if self.shifts.is_empty() || self.shifts.contains(&0) {
            return Err(Error::InvalidConfig("shift sizes must be a non-empty list of positive integers".into()));
        }
        if self.metrics.is_empty() {
            return Err(Error::InvalidConfig("no metrics requested".into()));
        }
        for m in &self.metrics {
            m.validate()?;
        }
        if let Some(k) = self.accuracy_k {
            MetricKind::Class { k }.validate()?;
        }
        if self.workers == 0 {
            return Err(Error::InvalidConfig("worker count must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub shift: usize,
    pub metric: MetricKind,
    pub consistency: f64,
    pub adversarial: f64,
    pub consistency_pairs: usize,
    pub consistent_pairs: usize,
    pub robust_images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub pipeline: String,
    pub images: usize,
    pub accuracy: Option<f64>,
    pub cells: Vec<ReportCell>,
    /// Per shift size: fraction of images whose every adversarial view
    /// selects the same physical crop.
    pub crop_agreement: Vec<(usize, f64)>,
}

impl RobustnessReport {
    pub fn cell(&self, shift: usize, metric: MetricKind) -> Option<&ReportCell> {
        self.cells.iter().find(|c| c.shift == shift && c.metric == metric)
    }
}

/// Per-image tallies; summed in image order.
#[derive(Debug, Clone, Default)]
struct ImageTally {
    correct: bool,
    /// [shift][metric] -> (pairs, equal pairs, robust)
    cells: Vec<Vec<(usize, usize, bool)>>,
    crop_agree: Vec<bool>,
    audit: Option<AuditRecord>,
}

/// Stateless seed derivation for image `index`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn check_geometry(items: &[Item], pipeline: &Pipeline, max_shift: usize) -> Result<()> {
    if items.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    for it in items {
        let (h, w) = (it.image.height(), it.image.width());
        let m = pipeline.view_size();
        let fits = match pipeline.mode() {
            Mode::Realistic => h >= m + 2 * max_shift && w >= m + 2 * max_shift,
            Mode::Cyclic => h >= m && w >= m,
        };
        if !fits {
            return Err(Error::at_image(
                &it.id,
                "geometry",
                Error::Geometry(format!("{h}x{w} source cannot hold a {m} view shifted by {max_shift}")),
            ));
        }
    }
    Ok(())
}

pub(crate) fn run_pool<T: Send>(workers: usize, n: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<T>> = pool.install(|| (0..n).into_par_iter().map(f).collect());
    results.into_iter().collect()
}

/// Full measurement of one pipeline: accuracy, then consistency and
/// adversarial robustness for every (shift size, metric) pair.
///
/// Decisions are retrieval results against `gallery`, normally the dataset
/// embedded by the same pipeline.
pub fn evaluate(items: &[Item], pipeline: &Pipeline, gallery: &GalleryIndex, plan: &EvalPlan) -> Result<RobustnessReport> {
    evaluate_with_audit(items, pipeline, gallery, plan).map(|(r, _)| r)
}

/// [`evaluate`] plus one audit record per image for RICS pipelines.
pub fn evaluate_with_audit(items: &[Item], pipeline: &Pipeline, gallery: &GalleryIndex, plan: &EvalPlan) -> Result<(RobustnessReport, Vec<AuditRecord>)> {
    plan.validate()?;
    check_geometry(items, pipeline, *plan.shifts.iter().max().unwrap())?;
    let tallies = run_pool(plan.workers, items.len(), |i| {
        let it = &items[i];
        tally_image(it, i, pipeline, gallery, plan).map_err(|e| match e {
            Error::AtImage { .. } => e,
            e => Error::at_image(&it.id, "evaluation", e),
        })
    })?;

    let n = items.len();
    let mut cells = Vec::new();
    for (si, &shift) in plan.shifts.iter().enumerate() {
        for (mi, &metric) in plan.metrics.iter().enumerate() {
            let (mut pairs, mut equal, mut robust) = (0, 0, 0);
            for t in &tallies {
                let (p, e, r) = t.cells[si][mi];
                pairs += p;
                equal += e;
                robust += r as usize;
            }
            cells.push(ReportCell {
                shift,
                metric,
                consistency: if pairs == 0 { 1.0 } else { equal as f64 / pairs as f64 },
                adversarial: robust as f64 / n as f64,
                consistency_pairs: pairs,
                consistent_pairs: equal,
                robust_images: robust,
            });
        }
    }
    let crop_agreement = plan
        .shifts
        .iter()
        .enumerate()
        .map(|(si, &s)| (s, tallies.iter().filter(|t| t.crop_agree[si]).count() as f64 / n as f64))
        .collect();
    let accuracy = plan
        .accuracy_k
        .map(|_| tallies.iter().filter(|t| t.correct).count() as f64 / n as f64);
    let audit = tallies.iter().filter_map(|t| t.audit.clone()).collect();
    Ok((
        RobustnessReport {
            pipeline: pipeline.name().to_owned(),
            images: n,
            accuracy,
            cells,
            crop_agreement,
        },
        audit,
    ))
}

fn tally_image(it: &Item, index: usize, pipeline: &Pipeline, gallery: &GalleryIndex, plan: &EvalPlan) -> Result<ImageTally> {
    let exclude = plan.exclude_self.then_some(it.id.as_str());
    let mut rng = Pcg64::seed_from_u64(derive_seed(plan.seed, index as u64));
    pipeline.with_probe(&it.image, |probe| {
        let mut decisions: HashMap<WindowKey, Vec<String>> = HashMap::new();
        let mut decide = |probe: &mut ImageProbe<'_>, w: &CropWindow| -> Result<Vec<String>> {
            let key = (w.top, w.left);
            if let Some(d) = decisions.get(&key) {
                return Ok(d.clone());
            }
            let e = probe.embedding(w)?;
            let d = plan.metrics.iter().map(|&m| gallery.decide(e, m, exclude)).collect::<Result<Vec<_>>>()?;
            decisions.insert(key, d.clone());
            Ok(d)
        };

        let (w0, sel0) = probe.select(0, 0)?;
        let d0 = decide(probe, &w0)?;
        let mut tally = ImageTally::default();
        if let Some(k) = plan.accuracy_k {
            let e = probe.embedding(&w0)?;
            let predicted = gallery.predict_label(e, k, exclude)?;
            if !gallery.labels().any(|l| l == it.label) {
                return Err(Error::UnknownLabel(it.label.clone()));
            }
            tally.correct = predicted == it.label;
        }
        if let (PipelineKind::Rics(cfg), Some(sel)) = (pipeline.kind(), sel0) {
            tally.audit = Some(AuditRecord::new(&it.id, cfg, &sel));
        }

        for &radius in &plan.shifts {
            let mut row = vec![(0usize, 0usize, true); plan.metrics.len()];
            let adversary = ShiftSet::new(radius, plan.adversarial_geometry, pipeline.mode())?;
            let mut same_crop = true;
            for (dx, dy) in adversary.offsets() {
                let (w, _) = probe.select(dx, dy)?;
                same_crop &= (w.top, w.left) == (w0.top, w0.left);
                let d = decide(probe, &w)?;
                for (mi, cell) in row.iter_mut().enumerate() {
                    cell.2 &= d[mi] == d0[mi];
                }
            }
            tally.crop_agree.push(same_crop);

            let sampler = ShiftSet::new(radius, plan.consistency_geometry, pipeline.mode())?.offsets();
            for _ in 0..plan.samples_per_image {
                let (dx, dy) = sampler[rng.gen_range(0..sampler.len())];
                let (w, _) = probe.select(dx, dy)?;
                let d = decide(probe, &w)?;
                for (mi, cell) in row.iter_mut().enumerate() {
                    cell.0 += 1;
                    cell.1 += (d[mi] == d0[mi]) as usize;
                }
            }
            tally.cells.push(row);
        }
        Ok(tally)
    })
}

fn single_metric_plan(shift: &ShiftSet, metric: MetricKind, samples: usize, seed: u64, consistency: bool) -> EvalPlan {
    EvalPlan {
        shifts: vec![shift.radius],
        metrics: vec![metric],
        adversarial_geometry: shift.geometry,
        consistency_geometry: shift.geometry,
        samples_per_image: if consistency { samples } else { 0 },
        seed,
        exclude_self: true,
        accuracy_k: None,
        workers: 1,
    }
}

fn check_mode(pipeline: &Pipeline, shift: &ShiftSet) -> Result<()> {
    if pipeline.mode() != shift.mode {
        return Err(Error::InvalidConfig(format!("{} shifts with a {} pipeline", shift.mode, pipeline.mode())));
    }
    Ok(())
}

/// Fraction of sampled (image, shift) pairs whose output matches the
/// unshifted output. Shifts are drawn uniformly from `shift`.
pub fn consistency(items: &[Item], pipeline: &Pipeline, shift: &ShiftSet, metric: MetricKind, gallery: &GalleryIndex, samples_per_image: usize, seed: u64) -> Result<f64> {
    check_mode(pipeline, shift)?;
    if samples_per_image == 0 {
        return Err(Error::InvalidConfig("samples per image must be at least 1".into()));
    }
    let r = evaluate(items, pipeline, gallery, &single_metric_plan(shift, metric, samples_per_image, seed, true))?;
    Ok(r.cells[0].consistency)
}

/// Fraction of images whose output survives every shift in `shift`.
pub fn adversarial_robustness(items: &[Item], pipeline: &Pipeline, shift: &ShiftSet, metric: MetricKind, gallery: &GalleryIndex) -> Result<f64> {
    check_mode(pipeline, shift)?;
    let r = evaluate(items, pipeline, gallery, &single_metric_plan(shift, metric, 0, 0, false))?;
    Ok(r.cells[0].adversarial)
}

/// K-NN accuracy of the unshifted views.
pub fn accuracy(items: &[Item], pipeline: &Pipeline, gallery: &GalleryIndex, k: usize, exclude_self: bool) -> Result<f64> {
    MetricKind::Class { k }.validate()?;
    let mut correct = 0;
    for it in items {
        if !gallery.labels().any(|l| l == it.label) {
            return Err(Error::UnknownLabel(it.label.clone()));
        }
        let rec = pipeline.with_probe(&it.image, |p| p.record(0, 0)).map_err(|e| Error::at_image(&it.id, "accuracy", e))?;
        let exclude = exclude_self.then_some(it.id.as_str());
        correct += (gallery.predict_label(&rec.embedding, k, exclude)? == it.label) as usize;
    }
    Ok(correct as f64 / items.len().max(1) as f64)
}
