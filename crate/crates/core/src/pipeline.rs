//! End-to-end orchestration of the two detection phases.
//!
//! Phase 1 segments the first image into superpixels, copies the pattern to
//! the second, reshapes each segment of both into aligned fixed-size
//! vectors, and clusters the elementwise difference vectors into three
//! levels. Superpixels whose vectors vote confidently changed or unchanged
//! label the map directly and train a classifier; ambiguous superpixels are
//! classified by it. Phase 2 zeroes everything phase 1 called unchanged,
//! re-segments at a finer scale, moves to the log domain, splits the paired
//! patch matrix into low-rank and sparse parts, and repeats the
//! cluster-vote-classify cycle on the restored vectors, so that isolated
//! speckle outliers, which land in the sparse part, lose their claim to
//! change. The final map keeps exactly the pixels that both phases call
//! changed.

use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::Deserialize;

use crate::clustering::{self, DiffVector, FcmParams, Level, VoteThresholds};
use crate::error::{Error, Result};
use crate::imaging::{self, LabelMap, SarImage};
use crate::lrsd::{self, LrsdParams, SparseNorm};
use crate::num::Real;
use crate::pcanet::{self, BlockGeometry, PcaNetModel, PcaNetParams, TrainPatch};
use crate::rng;
use crate::superpixel::{self, PatchVector, SlicParams, SuperpixelMap};
use crate::svm::SvmParams;

/// Reference pixels-per-superpixel densities: 3200 superpixels of 7x7
/// patches and 17800 of 3x3 on a 400x400 scene. Other sizes scale by area.
const PHASE1_DENSITY: f64 = 3200.0 * 49.0 / 160000.0;
const PHASE2_DENSITY: f64 = 17800.0 * 9.0 / 160000.0;

// ---------------------------------------------------------------- config

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub seed: Option<u64>,
    #[serde(default)]
    pub superpixel: SuperpixelSection,
    #[serde(default)]
    pub fcm: FcmSection,
    #[serde(default)]
    pub voting: VotingSection,
    #[serde(default)]
    pub pcanet1: PcanetSection,
    #[serde(default)]
    pub pcanet2: PcanetSection,
    #[serde(default)]
    pub lrsd: LrsdSection,
    #[serde(default)]
    pub svm: SvmSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuperpixelSection {
    pub sp1: Option<usize>,
    pub k1: Option<usize>,
    pub sp2: Option<usize>,
    pub k2: Option<usize>,
    pub compactness: Option<f64>,
    pub iterations: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FcmSection {
    pub fuzzifier: Option<f64>,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VotingSection {
    pub changed: Option<f64>,
    pub intermediate: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PcanetSection {
    pub filter_side: Option<usize>,
    pub stage1_filters: Option<usize>,
    pub stage2_filters: Option<usize>,
    pub block_height: Option<usize>,
    pub block_width: Option<usize>,
    pub block_overlap: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrsdSection {
    /// "entry_l1" or "column_l21".
    pub sparse_norm: Option<String>,
    pub lambda: Option<f64>,
    pub eps: Option<f64>,
    pub mu0: Option<f64>,
    pub rho: Option<f64>,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SvmSection {
    pub cost: Option<f64>,
    pub tol: Option<f64>,
    pub max_epochs: Option<usize>,
}

impl ConfigFile {
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::format(origin, e.to_string()))
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        ConfigFile::from_toml_str(&text, &path.display().to_string())
    }
}

/// Everything the run needs, fully resolved against the input dimensions.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub sp1: usize,
    pub k1: usize,
    pub sp2: usize,
    pub k2: usize,
    pub compactness: f64,
    pub slic_iterations: usize,
    pub fuzzifier: f64,
    pub fcm_tol: f64,
    pub fcm_max_iter: usize,
    pub voting: VoteThresholds,
    pub pcanet1: PcaNetParams,
    pub pcanet2: PcaNetParams,
    pub lrsd: LrsdParams,
    pub svm: SvmParams,
    pub seed: u64,
}

/// What `resolve` filled in or objected to, for the run report.
#[derive(Debug, Default)]
pub struct ResolveLog {
    /// One line per key that fell back to its default.
    pub defaults: Vec<String>,
    pub warnings: Vec<String>,
}

fn pick<T: Copy + Display>(
    value: Option<T>,
    default: T,
    key: &str,
    log: &mut ResolveLog,
) -> T {
    match value {
        Some(v) => v,
        None => {
            log.defaults.push(format!("{key} = {default}"));
            default
        }
    }
}

fn scaled_count(pixels: usize, k: usize, density: f64) -> usize {
    let raw = (pixels as f64 / (k * k) as f64 * density).round() as usize;
    raw.clamp(1, pixels)
}

impl PipelineConfig {
    /// Fills every missing key with its default, recording each fallback,
    /// and validates the combination against the scene dimensions.
    pub fn resolve(file: &ConfigFile, width: usize, height: usize) -> Result<(Self, ResolveLog)> {
        let mut log = ResolveLog::default();
        let pixels = width * height;
        if pixels == 0 {
            return Err(Error::invalid("dimensions", "empty scene"));
        }

        let s = &file.superpixel;
        let k1 = pick(s.k1, 7, "superpixel.k1", &mut log);
        let k2 = pick(s.k2, 3, "superpixel.k2", &mut log);
        if k1 == 0 || k2 == 0 {
            return Err(Error::invalid("superpixel", "patch sides must be positive"));
        }
        if k2 > k1 {
            return Err(Error::invalid(
                "superpixel.k2",
                format!("phase-2 patches must not be larger than phase-1 ({k2} > {k1})"),
            ));
        }
        let mut sp1 = pick(s.sp1, scaled_count(pixels, k1, PHASE1_DENSITY), "superpixel.sp1", &mut log);
        let mut sp2 = pick(s.sp2, scaled_count(pixels, k2, PHASE2_DENSITY), "superpixel.sp2", &mut log);
        for (sp, name) in [(&mut sp1, "sp1"), (&mut sp2, "sp2")] {
            if *sp == 0 {
                return Err(Error::invalid("superpixel", "superpixel counts must be positive"));
            }
            if *sp > pixels {
                log.warnings.push(format!(
                    "superpixel.{name} = {sp} exceeds the pixel count; clamped to {pixels}"
                ));
                *sp = pixels;
            }
        }
        if sp2 < sp1 {
            return Err(Error::invalid(
                "superpixel.sp2",
                format!("phase 2 must use at least as many superpixels as phase 1 ({sp2} < {sp1})"),
            ));
        }
        // Superpixels and patches are meant to hold about the same number
        // of pixels; a large mismatch degrades the reshaping.
        for (sp, k, name) in [(sp1, k1, "sp1"), (sp2, k2, "sp2")] {
            let ideal = pixels as f64 / (k * k) as f64;
            let ratio = sp as f64 / ideal;
            if !(0.75..=1.35).contains(&ratio) {
                log.warnings.push(format!(
                    "superpixel.{name} = {sp} is far from pixels/k^2 = {ideal:.0}; \
                     superpixels and patches should hold similar pixel counts"
                ));
            }
        }
        let compactness = pick(s.compactness, 10.0, "superpixel.compactness", &mut log);
        let slic_iterations = pick(s.iterations, 10, "superpixel.iterations", &mut log);

        let fuzzifier = pick(file.fcm.fuzzifier, 2.0, "fcm.fuzzifier", &mut log);
        let fcm_tol = pick(file.fcm.tol, 1e-6, "fcm.tol", &mut log);
        let fcm_max_iter = pick(file.fcm.max_iter, 300, "fcm.max_iter", &mut log);

        let voting = VoteThresholds {
            changed: pick(file.voting.changed, 0.8, "voting.changed", &mut log),
            intermediate: pick(file.voting.intermediate, 0.5, "voting.intermediate", &mut log),
        };
        voting.validate()?;

        let resolve_pcanet = |sec: &PcanetSection,
                              k: usize,
                              default_side: usize,
                              name: &str,
                              log: &mut ResolveLog|
         -> Result<PcaNetParams> {
            let side = pick(sec.filter_side, default_side.min(k), &format!("{name}.filter_side"), log);
            let cap = (side * side).min(16);
            let mut p = PcaNetParams::new(k, side);
            p.stage1_filters =
                pick(sec.stage1_filters, 8.min(side * side), &format!("{name}.stage1_filters"), log);
            p.stage2_filters =
                pick(sec.stage2_filters, 8.min(cap), &format!("{name}.stage2_filters"), log);
            p.block = BlockGeometry {
                height: pick(sec.block_height, k, &format!("{name}.block_height"), log),
                width: pick(sec.block_width, k, &format!("{name}.block_width"), log),
                overlap: pick(sec.block_overlap, 0, &format!("{name}.block_overlap"), log),
            };
            p.validate()?;
            Ok(p)
        };
        let pcanet1 = resolve_pcanet(&file.pcanet1, k1, 5, "pcanet1", &mut log)?;
        let pcanet2 = resolve_pcanet(&file.pcanet2, k2, 3, "pcanet2", &mut log)?;

        let l = &file.lrsd;
        let sparse_norm = match l.sparse_norm.as_deref() {
            None => {
                log.defaults.push("lrsd.sparse_norm = entry_l1".to_string());
                SparseNorm::EntryL1
            }
            Some("entry_l1") => SparseNorm::EntryL1,
            Some("column_l21") => SparseNorm::ColumnL21,
            Some(other) => {
                return Err(Error::invalid(
                    "lrsd.sparse_norm",
                    format!("unknown norm {other:?}; use \"entry_l1\" or \"column_l21\""),
                ))
            }
        };
        // At lambda near one the entry penalty sits at the usual robust-PCA
        // scale of 1/sqrt(larger side); lower values make the sparse part so
        // cheap that it can swallow the whole matrix, leaving nothing to
        // restore from.
        let lrsd = LrsdParams {
            sparse_norm,
            lambda: pick(l.lambda, 0.99, "lrsd.lambda", &mut log),
            eps: l.eps,
            mu0: l.mu0,
            rho: pick(l.rho, 1.1, "lrsd.rho", &mut log),
            tol: pick(l.tol, 1e-7, "lrsd.tol", &mut log),
            max_iter: pick(l.max_iter, 500, "lrsd.max_iter", &mut log),
        };
        if l.eps.is_none() {
            log.defaults.push("lrsd.eps = auto (1/sqrt of the larger matrix side)".to_string());
        }
        if l.mu0.is_none() {
            log.defaults.push("lrsd.mu0 = auto (1.25 over the spectral norm)".to_string());
        }
        lrsd.validate()?;

        let svm = SvmParams {
            cost: pick(file.svm.cost, 1.0, "svm.cost", &mut log),
            tol: pick(file.svm.tol, 1e-4, "svm.tol", &mut log),
            max_epochs: pick(file.svm.max_epochs, 1000, "svm.max_epochs", &mut log),
            seed: 0,
        };
        if !(svm.cost > 0.0) || !(svm.tol > 0.0) || svm.max_epochs == 0 {
            return Err(Error::invalid("svm", "cost and tol must be positive, max_epochs nonzero"));
        }

        let seed = pick(file.seed, 0, "seed", &mut log);

        Ok((
            PipelineConfig {
                sp1,
                k1,
                sp2,
                k2,
                compactness,
                slic_iterations,
                fuzzifier,
                fcm_tol,
                fcm_max_iter,
                voting,
                pcanet1,
                pcanet2,
                lrsd,
                svm,
                seed,
            },
            log,
        ))
    }

    pub fn defaults(width: usize, height: usize) -> Result<Self> {
        Ok(PipelineConfig::resolve(&ConfigFile::default(), width, height)?.0)
    }

    fn slic(&self, target_count: usize) -> SlicParams {
        SlicParams {
            target_count,
            compactness: self.compactness,
            iterations: self.slic_iterations,
        }
    }

    fn fcm(&self, tag: &str) -> FcmParams {
        FcmParams {
            clusters: 3,
            fuzzifier: self.fuzzifier,
            tol: self.fcm_tol,
            max_iter: self.fcm_max_iter,
            seed: rng::derive_seed(self.seed, tag, 0),
        }
    }

    fn svm(&self, tag: &str) -> SvmParams {
        SvmParams { seed: rng::derive_seed(self.seed, tag, 0), ..self.svm.clone() }
    }
}

// ------------------------------------------------------------- reporting

/// Ordered key = value sections rendered as the run report.
#[derive(Debug, Clone, Default)]
pub struct RunReport {
    sections: Vec<(String, Vec<(String, String)>)>,
}

impl RunReport {
    pub fn put(&mut self, section: &str, key: &str, value: impl Display) {
        let entries = match self.sections.iter_mut().find(|(name, _)| name == section) {
            Some((_, entries)) => entries,
            None => {
                self.sections.push((section.to_string(), Vec::new()));
                &mut self.sections.last_mut().unwrap().1
            }
        };
        entries.push((key.to_string(), value.to_string()));
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (name, entries) in &self.sections {
            out.push_str(&format!("[{name}]\n"));
            for (k, v) in entries {
                out.push_str(&format!("{k} = {v}\n"));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Default)]
pub struct RunLog {
    pub report: RunReport,
    pub warnings: Vec<String>,
}

impl RunLog {
    pub fn warn(&mut self, msg: impl Into<String>) {
        self.warnings.push(msg.into());
    }
}

// ------------------------------------------------------------ phase core

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentClass {
    Changed,
    Unchanged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecisionSource {
    /// The superpixel's own vote was confident.
    Vote,
    /// Ambiguous vote, resolved by the trained classifier.
    Classifier,
    /// No usable evidence; phase-specific fallback applied.
    Fallback,
}

#[derive(Debug, Clone)]
pub struct LrsdStats {
    pub rows: usize,
    pub cols: usize,
    pub iterations: usize,
    pub converged: bool,
    pub primal_residual: f64,
}

/// Product of one phase. `map` marks changed pixels; for phase 2 it is
/// already restricted to the phase-1 changed set.
#[derive(Debug)]
pub struct PhaseOutput<T: Real> {
    pub superpixels: SuperpixelMap,
    pub votes: Vec<Level>,
    pub classes: Vec<SegmentClass>,
    pub decided_by: Vec<DecisionSource>,
    pub model: Option<PcaNetModel<T>>,
    pub map: LabelMap,
    /// The level clustering could not form three classes.
    pub degenerate: bool,
    pub lrsd: Option<LrsdStats>,
}

/// What to do when one confident class is empty but intermediates exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EmptyClassPolicy {
    /// Refuse: the phase cannot work without both training classes.
    Abort,
    /// Label intermediates with the class nobody voted for confidently;
    /// with both classes empty, keep them changed (remove only on
    /// evidence).
    InheritOpposite,
}

struct PhaseKnobs<'a> {
    section: &'static str,
    fcm: FcmParams,
    voting: VoteThresholds,
    pcanet: &'a PcaNetParams,
    svm: SvmParams,
    balance_seed: u64,
    empty_confident: EmptyClassPolicy,
}

struct SegmentVerdict<T: Real> {
    votes: Vec<Level>,
    classes: Vec<SegmentClass>,
    decided_by: Vec<DecisionSource>,
    model: Option<PcaNetModel<T>>,
    degenerate: bool,
}

/// Clusters the difference vectors, votes per superpixel, trains the
/// classifier on the confident vote winners, and resolves the rest.
fn classify_segments<T: Real>(
    sp: &SuperpixelMap,
    patches1: &[PatchVector<T>],
    patches2: &[PatchVector<T>],
    diffs: &[DiffVector<T>],
    knobs: &PhaseKnobs<'_>,
    log: &mut RunLog,
) -> Result<SegmentVerdict<T>> {
    let n_seg = sp.segments.len();
    let x = clustering::diff_matrix(diffs);
    let fcm = clustering::fcm(x.view(), &knobs.fcm)?;
    log.report.put(knobs.section, "fcm_iterations", fcm.iterations);

    if fcm.degenerate {
        if knobs.empty_confident == EmptyClassPolicy::Abort {
            log.warn(format!(
                "{}: difference vectors have no spread; treating the whole scene as unchanged",
                knobs.section
            ));
            return Ok(SegmentVerdict {
                votes: vec![Level::Mid; n_seg],
                classes: vec![SegmentClass::Unchanged; n_seg],
                decided_by: vec![DecisionSource::Fallback; n_seg],
                model: None,
                degenerate: true,
            });
        }
        return Err(Error::DegenerateClustering(format!(
            "{}: restored difference vectors are indistinguishable; cannot separate \
             real from false changes",
            knobs.section
        )));
    }
    let levels = fcm.hard_levels();

    // Diff vectors arrive ordered by segment; collect each segment's span.
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_seg];
    for (i, d) in diffs.iter().enumerate() {
        members[d.segment_id as usize].push(i);
    }
    let mut votes = Vec::with_capacity(n_seg);
    for m in &members {
        if m.is_empty() {
            // Out of scope for this phase; stays unchanged below.
            votes.push(Level::Low);
            continue;
        }
        let seg_levels: Vec<Level> = m.iter().map(|&i| levels[i]).collect();
        votes.push(clustering::vote(&seg_levels, &knobs.voting)?);
    }

    let mut classes = vec![SegmentClass::Unchanged; n_seg];
    let mut decided_by = vec![DecisionSource::Vote; n_seg];
    let mut changed_train: Vec<usize> = Vec::new();
    let mut unchanged_train: Vec<usize> = Vec::new();
    let mut mids: Vec<usize> = Vec::new();
    for (seg, &v) in votes.iter().enumerate() {
        match v {
            Level::High => {
                classes[seg] = SegmentClass::Changed;
                changed_train.extend(&members[seg]);
            }
            Level::Low => {
                if members[seg].is_empty() {
                    decided_by[seg] = DecisionSource::Fallback;
                } else {
                    unchanged_train.extend(&members[seg]);
                }
            }
            Level::Mid => mids.push(seg),
        }
    }
    log.report.put(knobs.section, "segments_changed_by_vote", n_seg - mids.len() - votes.iter().filter(|&&v| v == Level::Low).count());
    log.report.put(knobs.section, "segments_unchanged_by_vote", votes.iter().filter(|&&v| v == Level::Low).count());
    log.report.put(knobs.section, "segments_intermediate", mids.len());

    if mids.is_empty() {
        return Ok(SegmentVerdict { votes, classes, decided_by, model: None, degenerate: false });
    }

    if changed_train.is_empty() || unchanged_train.is_empty() {
        match knobs.empty_confident {
            EmptyClassPolicy::Abort => {
                let which = if changed_train.is_empty() { "changed" } else { "unchanged" };
                return Err(Error::DegenerateClustering(format!(
                    "{}: no superpixel voted confidently {which}; cannot train the \
                     intermediate-class classifier",
                    knobs.section
                )));
            }
            EmptyClassPolicy::InheritOpposite => {
                let class = if changed_train.is_empty() && unchanged_train.is_empty() {
                    log.warn(format!(
                        "{}: no confident vote at all; keeping ambiguous superpixels changed",
                        knobs.section
                    ));
                    SegmentClass::Changed
                } else if changed_train.is_empty() {
                    log.warn(format!(
                        "{}: nothing voted confidently changed; ambiguous superpixels \
                         follow the unchanged majority",
                        knobs.section
                    ));
                    SegmentClass::Unchanged
                } else {
                    log.warn(format!(
                        "{}: nothing voted confidently unchanged; ambiguous superpixels \
                         follow the changed majority",
                        knobs.section
                    ));
                    SegmentClass::Changed
                };
                for &seg in &mids {
                    classes[seg] = class;
                    decided_by[seg] = DecisionSource::Fallback;
                }
                return Ok(SegmentVerdict { votes, classes, decided_by, model: None, degenerate: false });
            }
        }
    }

    // Cap the class imbalance at 20:1 by downsampling the majority.
    let (mut pos, mut neg) = (changed_train, unchanged_train);
    let cap = pos.len().min(neg.len()) * 20;
    for list in [&mut pos, &mut neg] {
        if list.len() > cap {
            let mut r = rng::stream(knobs.balance_seed, "balance-sample", 0);
            let keep = rand::seq::index::sample(&mut r, list.len(), cap);
            let mut kept: Vec<usize> = keep.iter().map(|i| list[i]).collect();
            kept.sort_unstable();
            log.report.put(knobs.section, "train_downsampled_from", list.len());
            *list = kept;
        }
    }
    log.report.put(knobs.section, "train_changed_patches", pos.len());
    log.report.put(knobs.section, "train_unchanged_patches", neg.len());

    let k = knobs.pcanet.patch_side;
    let mut train = Vec::with_capacity(pos.len() + neg.len());
    let mut labels = Vec::with_capacity(pos.len() + neg.len());
    for (label, list) in [(true, &pos), (false, &neg)] {
        for &i in list {
            train.push(TrainPatch::from_pair(&patches1[i], &patches2[i], k)?);
            labels.push(label);
        }
    }
    let model = pcanet::train_model(&train, &labels, knobs.pcanet, &knobs.svm)?;

    // Classify every sub-vector of the ambiguous superpixels, then let each
    // superpixel take the majority, ties toward changed.
    let mid_indices: Vec<usize> = mids.iter().flat_map(|&seg| members[seg].iter().copied()).collect();
    let verdicts: Vec<bool> = mid_indices
        .par_iter()
        .map(|&i| -> Result<bool> {
            let patch = TrainPatch::from_pair(&patches1[i], &patches2[i], k)?;
            Ok(model.classify(&patch))
        })
        .collect::<Result<_>>()?;
    let mut cursor = 0;
    for &seg in &mids {
        let count = members[seg].len();
        let changed_votes = verdicts[cursor..cursor + count].iter().filter(|&&v| v).count();
        cursor += count;
        classes[seg] = if 2 * changed_votes >= count {
            SegmentClass::Changed
        } else {
            SegmentClass::Unchanged
        };
        decided_by[seg] = DecisionSource::Classifier;
    }

    Ok(SegmentVerdict { votes, classes, decided_by, model: Some(model), degenerate: false })
}

fn pixel_map(sp: &SuperpixelMap, classes: &[SegmentClass]) -> LabelMap {
    let mut map = LabelMap::zeros(sp.labels.width(), sp.labels.height());
    for seg in &sp.segments {
        if classes[seg.id as usize] == SegmentClass::Changed {
            for &(r, c) in &seg.pixels {
                map.set(r as usize, c as usize, 1);
            }
        }
    }
    map
}

fn count_class(classes: &[SegmentClass], want: SegmentClass) -> usize {
    classes.iter().filter(|&&c| c == want).count()
}

// ----------------------------------------------------------------- runs

/// Phase 1: coarse change/no-change labeling of every pixel.
pub fn run_phase1<T: Real>(
    i1: &SarImage<T>,
    i2: &SarImage<T>,
    cfg: &PipelineConfig,
    log: &mut RunLog,
) -> Result<PhaseOutput<T>> {
    i1.expect_same_shape(i2)?;
    let started = Instant::now();
    let sp = superpixel::segment(i1, &cfg.slic(cfg.sp1))?;
    let sp_on_second = superpixel::copy_pattern(&sp, i2)?;
    let patches1 = superpixel::reshape_image(i1, &sp, cfg.k1, cfg.seed, "phase1-pad")?;
    let patches2 = superpixel::reshape_image(i2, &sp_on_second, cfg.k1, cfg.seed, "phase1-pad")?;
    let diffs = clustering::build_spdi(&patches1, &patches2)?;
    log.report.put("phase1", "superpixels", sp.segments.len());
    log.report.put("phase1", "patch_vectors", patches1.len());

    let knobs = PhaseKnobs {
        section: "phase1",
        fcm: cfg.fcm("phase1-fcm"),
        voting: cfg.voting.clone(),
        pcanet: &cfg.pcanet1,
        svm: cfg.svm("phase1-svm"),
        balance_seed: rng::derive_seed(cfg.seed, "phase1-balance", 0),
        empty_confident: EmptyClassPolicy::Abort,
    };
    let verdict = classify_segments(&sp, &patches1, &patches2, &diffs, &knobs, log)?;
    let map = pixel_map(&sp, &verdict.classes);
    log.report.put("phase1", "segments_changed", count_class(&verdict.classes, SegmentClass::Changed));
    log.report.put("phase1", "pixels_changed", map.count_of(1));
    log.report.put("phase1", "seconds", format!("{:.2}", started.elapsed().as_secs_f64()));

    Ok(PhaseOutput {
        superpixels: sp,
        votes: verdict.votes,
        classes: verdict.classes,
        decided_by: verdict.decided_by,
        model: verdict.model,
        map,
        degenerate: verdict.degenerate,
        lrsd: None,
    })
}

/// Phase 2: split the phase-1 changed set into real changes and speckle
/// artifacts. Returns None when phase 1 found nothing to refine, in which
/// case the final map is all unchanged.
pub fn run_phase2<T: Real>(
    i1: &SarImage<T>,
    i2: &SarImage<T>,
    phase1: &PhaseOutput<T>,
    cfg: &PipelineConfig,
    log: &mut RunLog,
) -> Result<Option<PhaseOutput<T>>> {
    let cc_pixels = phase1.map.count_of(1);
    if cc_pixels == 0 {
        log.warn("phase 1 flagged no pixel as changed; skipping phase 2");
        return Ok(None);
    }
    let started = Instant::now();
    let masked1 = imaging::mask_unchanged(i1, &phase1.map)?;
    let masked2 = imaging::mask_unchanged(i2, &phase1.map)?;
    let sp = superpixel::segment(&masked1, &cfg.slic(cfg.sp2))?;
    let sp_on_second = superpixel::copy_pattern(&sp, &masked2)?;
    let log1 = imaging::log_transform(&masked1, T::one())?;
    let log2 = imaging::log_transform(&masked2, T::one())?;
    let mut patches1 = superpixel::reshape_image(&log1, &sp, cfg.k2, cfg.seed, "phase2-pad")?;
    let mut patches2 = superpixel::reshape_image(&log2, &sp_on_second, cfg.k2, cfg.seed, "phase2-pad")?;
    // Segments entirely inside the phase-1 unchanged region are zeroed out
    // and stay unchanged without a vote. Feeding their empty columns to the
    // low-rank split would only deflate the size-derived sparse penalty
    // until the sparse part swallows the whole matrix.
    let included: Vec<bool> = sp
        .segments
        .iter()
        .map(|seg| {
            seg.pixels.iter().any(|&(r, c)| phase1.map.get(r as usize, c as usize) == 1)
        })
        .collect();
    patches1.retain(|p| included[p.segment_id as usize]);
    patches2.retain(|p| included[p.segment_id as usize]);
    log.report.put("phase2", "superpixels", sp.segments.len());
    log.report.put("phase2", "segments_in_scope", included.iter().filter(|&&i| i).count());
    log.report.put("phase2", "patch_vectors", patches1.len());

    let paired = lrsd::assemble_phi(&patches1, &patches2)?;
    let solution = lrsd::solve(&paired.data, &cfg.lrsd)?;
    let stats = LrsdStats {
        rows: paired.data.nrows(),
        cols: paired.data.ncols(),
        iterations: solution.iterations,
        converged: solution.converged,
        primal_residual: solution.primal_residual,
    };
    log.report.put("phase2", "lrsd_matrix", format!("{}x{}", stats.rows, stats.cols));
    log.report.put("phase2", "lrsd_iterations", stats.iterations);
    log.report.put("phase2", "lrsd_residual", format!("{:.3e}", stats.primal_residual));
    if !solution.converged {
        log.warn(format!(
            "low-rank split stopped at {} iterations with residual {:.2e}",
            stats.iterations, stats.primal_residual
        ));
    }
    // Levels come from the denoised gaps, but the classifier trains on the
    // patches as observed: restoration flattens each patch toward its
    // column mean, which is good for separating gap sizes and terrible as
    // classifier input (near-constant patches hash alike).
    let (restored1, restored2) = paired.restore(&solution.low_rank)?;
    let diffs = clustering::build_spdi(&restored1, &restored2)?;

    let knobs = PhaseKnobs {
        section: "phase2",
        fcm: cfg.fcm("phase2-fcm"),
        voting: cfg.voting.clone(),
        pcanet: &cfg.pcanet2,
        svm: cfg.svm("phase2-svm"),
        balance_seed: rng::derive_seed(cfg.seed, "phase2-balance", 0),
        empty_confident: EmptyClassPolicy::InheritOpposite,
    };
    let verdict = classify_segments(&sp, &patches1, &patches2, &diffs, &knobs, log)?;

    // Keep a pixel only when this phase calls its superpixel changed AND
    // phase 1 already did: refinement never adds changed pixels.
    let mut map = LabelMap::zeros(phase1.map.width(), phase1.map.height());
    for seg in &sp.segments {
        if verdict.classes[seg.id as usize] == SegmentClass::Changed {
            for &(r, c) in &seg.pixels {
                if phase1.map.get(r as usize, c as usize) == 1 {
                    map.set(r as usize, c as usize, 1);
                }
            }
        }
    }
    log.report.put("phase2", "segments_changed", count_class(&verdict.classes, SegmentClass::Changed));
    log.report.put("phase2", "pixels_changed", map.count_of(1));
    log.report.put("phase2", "seconds", format!("{:.2}", started.elapsed().as_secs_f64()));

    Ok(Some(PhaseOutput {
        superpixels: sp,
        votes: verdict.votes,
        classes: verdict.classes,
        decided_by: verdict.decided_by,
        model: verdict.model,
        map,
        degenerate: verdict.degenerate,
        lrsd: Some(stats),
    }))
}

#[derive(Debug)]
pub struct RunOutput<T: Real> {
    pub phase1: PhaseOutput<T>,
    pub phase2: Option<PhaseOutput<T>>,
    pub final_map: LabelMap,
    pub log: RunLog,
}

/// Both phases end to end.
pub fn run_full<T: Real>(
    i1: &SarImage<T>,
    i2: &SarImage<T>,
    cfg: &PipelineConfig,
) -> Result<RunOutput<T>> {
    let mut log = RunLog::default();
    report_parameters(cfg, &mut log.report);
    let started = Instant::now();

    let phase1 = run_phase1(i1, i2, cfg, &mut log)?;
    let phase2 = run_phase2(i1, i2, &phase1, cfg, &mut log)?;
    let final_map = match &phase2 {
        Some(p) => {
            let mut m = LabelMap::zeros(p.map.width(), p.map.height());
            for r in 0..m.height() {
                for c in 0..m.width() {
                    m.set(r, c, p.map.get(r, c));
                }
            }
            m
        }
        None => LabelMap::zeros(i1.width(), i1.height()),
    };
    if cfg!(debug_assertions) {
        for r in 0..final_map.height() {
            for c in 0..final_map.width() {
                debug_assert!(
                    final_map.get(r, c) == 0 || phase1.map.get(r, c) == 1,
                    "refinement added a changed pixel at ({r},{c})"
                );
            }
        }
    }

    log.report.put("result", "pixels_changed", final_map.count_of(1));
    log.report.put(
        "result",
        "pixels_unchanged",
        final_map.width() * final_map.height() - final_map.count_of(1),
    );
    log.report.put("result", "seconds_total", format!("{:.2}", started.elapsed().as_secs_f64()));
    for (i, w) in log.warnings.clone().into_iter().enumerate() {
        log.report.put("warnings", &format!("warning_{i}"), w);
    }
    Ok(RunOutput { phase1, phase2, final_map, log })
}

/// Writes the full resolved parameter set into a `[parameters]` section, so
/// reports and manifests record what actually ran.
pub fn report_parameters(cfg: &PipelineConfig, report: &mut RunReport) {
    let s = "parameters";
    report.put(s, "seed", cfg.seed);
    report.put(s, "sp1", cfg.sp1);
    report.put(s, "k1", cfg.k1);
    report.put(s, "sp2", cfg.sp2);
    report.put(s, "k2", cfg.k2);
    report.put(s, "compactness", cfg.compactness);
    report.put(s, "slic_iterations", cfg.slic_iterations);
    report.put(s, "fuzzifier", cfg.fuzzifier);
    report.put(s, "fcm_tol", cfg.fcm_tol);
    report.put(s, "fcm_max_iter", cfg.fcm_max_iter);
    report.put(s, "vote_changed", cfg.voting.changed);
    report.put(s, "vote_intermediate", cfg.voting.intermediate);
    for (name, p) in [("pcanet1", &cfg.pcanet1), ("pcanet2", &cfg.pcanet2)] {
        report.put(s, &format!("{name}_filter_side"), p.filter_side);
        report.put(s, &format!("{name}_filters"), format!("{}+{}", p.stage1_filters, p.stage2_filters));
        report.put(
            s,
            &format!("{name}_block"),
            format!("{}x{} overlap {}", p.block.height, p.block.width, p.block.overlap),
        );
    }
    report.put(
        s,
        "lrsd_sparse_norm",
        match cfg.lrsd.sparse_norm {
            SparseNorm::EntryL1 => "entry_l1",
            SparseNorm::ColumnL21 => "column_l21",
        },
    );
    report.put(s, "lrsd_lambda", cfg.lrsd.lambda);
    report.put(s, "lrsd_eps", cfg.lrsd.eps.map_or("auto".to_string(), |v| v.to_string()));
    report.put(s, "lrsd_mu0", cfg.lrsd.mu0.map_or("auto".to_string(), |v| v.to_string()));
    report.put(s, "lrsd_rho", cfg.lrsd.rho);
    report.put(s, "lrsd_tol", cfg.lrsd.tol);
    report.put(s, "lrsd_max_iter", cfg.lrsd.max_iter);
    report.put(s, "svm_cost", cfg.svm.cost);
    report.put(s, "svm_tol", cfg.svm.tol);
    report.put(s, "svm_max_epochs", cfg.svm.max_epochs);
}

/// Runs a closure under a rayon pool capped at `threads` workers; None
/// keeps the global pool.
pub fn with_thread_cap<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    match threads {
        None => Ok(f()),
        Some(0) => Err(Error::invalid("threads", "must be positive")),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::invalid("threads", e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

/// Writes every intermediate raster of a finished run into `dir`.
pub fn export_debug<T: Real>(
    out: &RunOutput<T>,
    i1: &SarImage<T>,
    i2: &SarImage<T>,
    dir: impl AsRef<Path>,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    imaging::save_png(i1, dir.join("input1.png"))?;
    imaging::save_png(i2, dir.join("input2.png"))?;
    imaging::save_labels_png(&out.phase1.superpixels.labels, dir.join("phase1_superpixels.png"))?;
    imaging::save_binary_png(&out.phase1.map, dir.join("phase1_changed.png"))?;
    save_decisions(&out.phase1, dir.join("phase1_decisions.png"))?;
    if let Some(p2) = &out.phase2 {
        let masked1 = imaging::mask_unchanged(i1, &out.phase1.map)?;
        let masked2 = imaging::mask_unchanged(i2, &out.phase1.map)?;
        imaging::save_png(&masked1, dir.join("phase2_masked1.png"))?;
        imaging::save_png(&masked2, dir.join("phase2_masked2.png"))?;
        imaging::save_labels_png(&p2.superpixels.labels, dir.join("phase2_superpixels.png"))?;
        save_decisions(p2, dir.join("phase2_decisions.png"))?;
    }
    imaging::save_binary_png(&out.final_map, dir.join("final_changed.png"))?;
    Ok(())
}

/// Gray-codes each pixel by how its superpixel was decided: dark for
/// unchanged, bright for changed; vote < classifier < fallback brightness
/// within each class.
fn save_decisions<T: Real>(phase: &PhaseOutput<T>, path: impl AsRef<Path>) -> Result<()> {
    let sp = &phase.superpixels;
    let img = SarImage::<T>::from_fn(sp.labels.width(), sp.labels.height(), |r, c| {
        let seg = sp.labels.get(r, c) as usize;
        let base = match phase.classes[seg] {
            SegmentClass::Unchanged => 0.0,
            SegmentClass::Changed => 3.0,
        };
        let offset = match phase.decided_by[seg] {
            DecisionSource::Vote => 0.0,
            DecisionSource::Classifier => 1.0,
            DecisionSource::Fallback => 2.0,
        };
        T::of(base + offset)
    })?;
    imaging::save_png(&img, path)
}
