//! Cascaded PCA filter banks with binary hashing, block histograms, and a
//! linear SVM on top.
//!
//! A training patch is the two aligned k*k vectors of a pair stacked into a
//! 2k x k matrix. Stage-1 filters are the leading eigenvectors of the
//! covariance of all mean-removed filter-side blocks of those patches;
//! stage-2 filters repeat the construction on the stage-1 responses. Each
//! stage-2 response stack collapses into one integer map via a Heaviside
//! binary code (zero maps to 0), and per-block histograms of those codes,
//! concatenated, form the feature vector.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::num::Real;
use crate::superpixel::PatchVector;
use crate::svm::{self, LinearSvm, SvmParams};

/// Patches per work unit when accumulating covariance or features in
/// parallel. Fixed so results do not depend on the thread count.
const CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockGeometry {
    pub height: usize,
    pub width: usize,
    /// Pixels shared between neighboring blocks along each axis.
    pub overlap: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PcaNetParams {
    /// Side length k of each vector in a pair; patches are 2k x k.
    pub patch_side: usize,
    pub filter_side: usize,
    pub stage1_filters: usize,
    pub stage2_filters: usize,
    pub block: BlockGeometry,
}

impl PcaNetParams {
    /// Defaults: eight filters per stage and non-overlapping k x k
    /// histogram blocks, which tile a 2k x k patch exactly twice.
    pub fn new(patch_side: usize, filter_side: usize) -> Self {
        PcaNetParams {
            patch_side,
            filter_side,
            stage1_filters: 8,
            stage2_filters: 8,
            block: BlockGeometry { height: patch_side, width: patch_side, overlap: 0 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.patch_side;
        let f = self.filter_side;
        if k == 0 {
            return Err(Error::invalid("patch_side", "must be positive"));
        }
        if f == 0 || f > k {
            return Err(Error::invalid(
                "filter_side",
                format!("must be in 1..={k} for patch side {k}"),
            ));
        }
        let f2 = f * f;
        if self.stage1_filters == 0 || self.stage1_filters > f2 {
            return Err(Error::invalid("stage1_filters", format!("must be in 1..={f2}")));
        }
        if self.stage2_filters == 0 || self.stage2_filters > f2 || self.stage2_filters > 16 {
            return Err(Error::invalid(
                "stage2_filters",
                format!("must be in 1..={} and at most 16", f2),
            ));
        }
        let b = &self.block;
        if b.height == 0 || b.width == 0 || b.height > 2 * k || b.width > k {
            return Err(Error::invalid("block", "block must fit inside the 2k x k patch"));
        }
        if b.overlap >= b.height.min(b.width) {
            return Err(Error::invalid("block", "overlap must be smaller than the block"));
        }
        Ok(())
    }

    pub fn feature_len(&self) -> usize {
        self.stage1_filters * self.block_count() * (1usize << self.stage2_filters)
    }

    fn block_count(&self) -> usize {
        let (h, w) = (2 * self.patch_side, self.patch_side);
        let sh = self.block.height - self.block.overlap;
        let sw = self.block.width - self.block.overlap;
        ((h - self.block.height) / sh + 1) * ((w - self.block.width) / sw + 1)
    }
}

/// One training or classification patch: the pair's two k*k vectors
/// reshaped row-major and stacked, first image on top.
#[derive(Debug, Clone)]
pub struct TrainPatch<T> {
    pub data: Array2<T>,
}

impl<T: Real> TrainPatch<T> {
    pub fn from_vectors(a: ArrayView1<'_, T>, b: ArrayView1<'_, T>, k: usize) -> Result<Self> {
        if a.len() != k * k || b.len() != k * k {
            return Err(Error::invalid(
                "patch",
                format!("vectors of length {} do not reshape to {k}x{k}", a.len()),
            ));
        }
        let mut data = Array2::zeros((2 * k, k));
        for i in 0..k * k {
            data[[i / k, i % k]] = a[i];
            data[[k + i / k, i % k]] = b[i];
        }
        Ok(TrainPatch { data })
    }

    pub fn from_pair(a: &PatchVector<T>, b: &PatchVector<T>, k: usize) -> Result<Self> {
        TrainPatch::from_vectors(a.values.view(), b.values.view(), k)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank<T> {
    pub side: usize,
    pub filters: Vec<Array2<T>>,
    /// Set when the covariance rank was below the requested filter count
    /// and the bank fell back to the available rank.
    pub truncated: bool,
}

/// Adds y y^T over all mean-removed side x side blocks of `map` (stride 1).
fn accumulate_gram<T: Real>(g: &mut Array2<T>, map: &Array2<T>, side: usize) {
    let (h, w) = map.dim();
    let d = side * side;
    let mut y = vec![T::zero(); d];
    for r0 in 0..=(h - side) {
        for c0 in 0..=(w - side) {
            let mut mean = T::zero();
            for r in 0..side {
                for c in 0..side {
                    let v = map[[r0 + r, c0 + c]];
                    y[r * side + c] = v;
                    mean += v;
                }
            }
            mean /= T::of(d as f64);
            for v in y.iter_mut() {
                *v -= mean;
            }
            for i in 0..d {
                for j in 0..d {
                    g[[i, j]] += y[i] * y[j];
                }
            }
        }
    }
}

fn filters_from_gram<T: Real>(g: &Array2<T>, side: usize, requested: usize) -> Result<FilterBank<T>> {
    let (vals, vecs) = crate::linalg::eigh(g);
    let cutoff = vals[0].max(T::zero()) * T::of(1e-12);
    let available = vals.iter().filter(|&&l| l > cutoff).count();
    if available == 0 {
        return Err(Error::invalid("filters", "training maps carry no variance"));
    }
    let take = requested.min(available);
    let filters = (0..take)
        .map(|j| {
            let mut f = Array2::zeros((side, side));
            for i in 0..side * side {
                f[[i / side, i % side]] = vecs[[i, j]];
            }
            f
        })
        .collect();
    Ok(FilterBank { side, filters, truncated: take < requested })
}

/// Learns the stage-1 bank from the raw patches.
pub fn learn_stage1<T: Real>(patches: &[TrainPatch<T>], p: &PcaNetParams) -> Result<FilterBank<T>> {
    p.validate()?;
    if patches.is_empty() {
        return Err(Error::invalid("patches", "no training patches"));
    }
    let side = p.filter_side;
    let d = side * side;
    let partials: Vec<Array2<T>> = patches
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = Array2::zeros((d, d));
            for patch in chunk {
                accumulate_gram(&mut g, &patch.data, side);
            }
            g
        })
        .collect();
    let mut g = Array2::zeros((d, d));
    for part in partials {
        g += &part;
    }
    filters_from_gram(&g, side, p.stage1_filters)
}

/// Learns the stage-2 bank from the stage-1 responses of the patches.
pub fn learn_stage2<T: Real>(
    patches: &[TrainPatch<T>],
    w1: &FilterBank<T>,
    p: &PcaNetParams,
) -> Result<FilterBank<T>> {
    p.validate()?;
    if patches.is_empty() {
        return Err(Error::invalid("patches", "no training patches"));
    }
    let side = p.filter_side;
    let d = side * side;
    let partials: Vec<Array2<T>> = patches
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = Array2::zeros((d, d));
            for patch in chunk {
                for f in &w1.filters {
                    let resp = convolve_same(&patch.data, f);
                    accumulate_gram(&mut g, &resp, side);
                }
            }
            g
        })
        .collect();
    let mut g = Array2::zeros((d, d));
    for part in partials {
        g += &part;
    }
    filters_from_gram(&g, side, p.stage2_filters)
}

/// Zero-padded same-size correlation of `map` with `filter`. The anchor is
/// the filter center, floor(side/2) for even sides.
pub fn convolve_same<T: Real>(map: &Array2<T>, filter: &Array2<T>) -> Array2<T> {
    let (h, w) = map.dim();
    let side = filter.nrows();
    let off = side / 2;
    let mut out = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = T::zero();
            for u in 0..side {
                let rr = r + u;
                if rr < off || rr - off >= h {
                    continue;
                }
                for v in 0..side {
                    let cc = c + v;
                    if cc < off || cc - off >= w {
                        continue;
                    }
                    acc += map[[rr - off, cc - off]] * filter[[u, v]];
                }
            }
            out[[r, c]] = acc;
        }
    }
    out
}

/// Binary-hash code map for one stage-1 response: bit j is set where the
/// j-th stage-2 response is strictly positive (Heaviside with H(0) = 0).
fn hash_map<T: Real>(stage1_resp: &Array2<T>, w2: &FilterBank<T>) -> Array2<u32> {
    let (h, w) = stage1_resp.dim();
    let mut t = Array2::<u32>::zeros((h, w));
    for (j, f) in w2.filters.iter().enumerate() {
        let resp = convolve_same(stage1_resp, f);
        for r in 0..h {
            for c in 0..w {
                if resp[[r, c]] > T::zero() {
                    t[[r, c]] |= 1 << j;
                }
            }
        }
    }
    t
}

/// Histogram of code values over one rectangular block grid. Blocks step by
/// size minus overlap; trailing pixels that do not fill a block are dropped.
fn block_histograms(t: &Array2<u32>, block: &BlockGeometry, bins: usize) -> Vec<usize> {
    let (h, w) = t.dim();
    let sh = block.height - block.overlap;
    let sw = block.width - block.overlap;
    let mut out = Vec::new();
    let mut r0 = 0;
    while r0 + block.height <= h {
        let mut c0 = 0;
        while c0 + block.width <= w {
            let mut hist = vec![0usize; bins];
            for r in 0..block.height {
                for c in 0..block.width {
                    hist[t[[r0 + r, c0 + c]] as usize] += 1;
                }
            }
            out.extend(hist);
            c0 += sw;
        }
        r0 += sh;
    }
    out
}

/// Feature vector of one patch under the two banks: concatenated per-block
/// code histograms of every stage-1 channel.
pub fn extract_features<T: Real>(
    patch: &TrainPatch<T>,
    w1: &FilterBank<T>,
    w2: &FilterBank<T>,
    p: &PcaNetParams,
) -> Array1<T> {
    let bins = 1usize << p.stage2_filters;
    let mut feat = Vec::new();
    for f1 in &w1.filters {
        let resp = convolve_same(&patch.data, f1);
        let t = hash_map(&resp, w2);
        let hists = block_histograms(&t, &p.block, bins);
        feat.extend(hists.into_iter().map(|c| T::of(c as f64)));
    }
    Array1::from_vec(feat)
}

#[derive(Debug, Clone)]
pub struct PcaNetModel<T> {
    pub params: PcaNetParams,
    pub w1: FilterBank<T>,
    pub w2: FilterBank<T>,
    pub svm: LinearSvm<T>,
}

/// Learns both banks on all patches and fits the SVM on their features.
pub fn train_model<T: Real>(
    patches: &[TrainPatch<T>],
    labels: &[bool],
    p: &PcaNetParams,
    svm_params: &SvmParams,
) -> Result<PcaNetModel<T>> {
    if patches.len() != labels.len() {
        return Err(Error::invalid(
            "labels",
            format!("{} patches but {} labels", patches.len(), labels.len()),
        ));
    }
    let w1 = learn_stage1(patches, p)?;
    let w2 = learn_stage2(patches, &w1, p)?;
    let rows: Vec<Array1<T>> = patches
        .par_iter()
        .map(|patch| extract_features(patch, &w1, &w2, p))
        .collect();
    let dim = rows.first().map(|r| r.len()).unwrap_or(0);
    let mut x = Array2::zeros((rows.len(), dim));
    for (i, row) in rows.iter().enumerate() {
        x.row_mut(i).assign(row);
    }
    let svm = svm::train(x.view(), labels, svm_params)?;
    Ok(PcaNetModel { params: p.clone(), w1, w2, svm })
}

impl<T: Real> PcaNetModel<T> {
    pub fn decision(&self, patch: &TrainPatch<T>) -> T {
        let feat = extract_features(patch, &self.w1, &self.w2, &self.params);
        self.svm.decision(feat.view())
    }

    /// True means changed; a decision of exactly zero counts as changed.
    pub fn classify(&self, patch: &TrainPatch<T>) -> bool {
        self.decision(patch) >= T::zero()
    }
}

const MODEL_MAGIC: &[u8; 8] = b"SARCDPCN";
const MODEL_VERSION: u32 = 1;

impl<T: Real> PcaNetModel<T> {
    /// Serializes as a small versioned binary: a dimension header followed
    /// by little-endian f64 payloads (filters, SVM weights, bias).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        let p = &self.params;
        let flags = (self.w1.truncated as u32) | ((self.w2.truncated as u32) << 1);
        for v in [
            MODEL_VERSION,
            p.patch_side as u32,
            p.filter_side as u32,
            self.w1.filters.len() as u32,
            self.w2.filters.len() as u32,
            p.stage1_filters as u32,
            p.stage2_filters as u32,
            p.block.height as u32,
            p.block.width as u32,
            p.block.overlap as u32,
            self.svm.weights.len() as u32,
            flags,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let mut push_f64 = |v: f64| out.extend_from_slice(&v.to_le_bytes());
        for bank in [&self.w1, &self.w2] {
            for f in &bank.filters {
                for &v in f.iter() {
                    push_f64(v.as_f64());
                }
            }
        }
        for &v in self.svm.weights.iter() {
            push_f64(v.as_f64());
        }
        push_f64(self.svm.bias.as_f64());
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        let ctx = || path.display().to_string();
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            let s = bytes
                .get(*pos..*pos + n)
                .ok_or_else(|| Error::format(ctx(), "truncated model file"))?;
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 8)? != MODEL_MAGIC {
            return Err(Error::format(ctx(), "not a model file (bad magic)"));
        }
        let read_u32 = |pos: &mut usize| -> Result<u32> {
            Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
        };
        let version = read_u32(&mut pos)?;
        if version != MODEL_VERSION {
            return Err(Error::format(ctx(), format!("unsupported model version {version}")));
        }
        let patch_side = read_u32(&mut pos)? as usize;
        let filter_side = read_u32(&mut pos)? as usize;
        let n1 = read_u32(&mut pos)? as usize;
        let n2 = read_u32(&mut pos)? as usize;
        let stage1_filters = read_u32(&mut pos)? as usize;
        let stage2_filters = read_u32(&mut pos)? as usize;
        let bh = read_u32(&mut pos)? as usize;
        let bw = read_u32(&mut pos)? as usize;
        let overlap = read_u32(&mut pos)? as usize;
        let dim = read_u32(&mut pos)? as usize;
        let flags = read_u32(&mut pos)?;
        let params = PcaNetParams {
            patch_side,
            filter_side,
            stage1_filters,
            stage2_filters,
            block: BlockGeometry { height: bh, width: bw, overlap },
        };
        params.validate().map_err(|e| Error::format(ctx(), e.to_string()))?;

        let read_f64 = |pos: &mut usize| -> Result<f64> {
            Ok(f64::from_le_bytes(take(pos, 8)?.try_into().unwrap()))
        };
        let side = filter_side;
        let mut banks = Vec::new();
        for (count, truncated_bit) in [(n1, 0u32), (n2, 1u32)] {
            let mut filters = Vec::with_capacity(count);
            for _ in 0..count {
                let mut f = Array2::zeros((side, side));
                for i in 0..side * side {
                    f[[i / side, i % side]] = T::of(read_f64(&mut pos)?);
                }
                filters.push(f);
            }
            banks.push(FilterBank { side, filters, truncated: flags & (1 << truncated_bit) != 0 });
        }
        let w2 = banks.pop().unwrap();
        let w1 = banks.pop().unwrap();
        let mut weights = Array1::zeros(dim);
        for i in 0..dim {
            weights[i] = T::of(read_f64(&mut pos)?);
        }
        let bias = T::of(read_f64(&mut pos)?);
        if pos != bytes.len() {
            return Err(Error::format(ctx(), "trailing bytes after model payload"));
        }
        Ok(PcaNetModel { params, w1, w2, svm: LinearSvm { weights, bias } })
    }
}
