//! Intensity-and-distance superpixels plus reshaping of each segment into
//! fixed-size vectors.
//!
//! Segmentation follows the local k-means scheme: seeds start on a regular
//! grid with step Omega = sqrt(M*N/target), are nudged to the lowest-gradient
//! spot in their 3x3 neighborhood, and then alternate between windowed
//! assignment and centroid updates. A pixel competes only for seeds within
//! Omega of it along both axes (the 2*Omega x 2*Omega window around the
//! seed); distance ties go to the lower seed id, so results do not depend on
//! scan order.

use ndarray::Array1;
use rand::Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::imaging::{LabelMap, SarImage};
use crate::num::Real;
use crate::rng::{derive_seed, Prng};

#[derive(Debug, Clone)]
pub struct SlicParams {
    /// Requested segment count (nu). The realized count can be lower.
    pub target_count: usize,
    /// Divisor applied to the intensity distance before it is combined with
    /// the Omega-normalized spatial distance.
    pub compactness: f64,
    pub iterations: usize,
}

impl Default for SlicParams {
    fn default() -> Self {
        SlicParams { target_count: 1000, compactness: 10.0, iterations: 10 }
    }
}

/// One segment: its dense id and member pixels as (row, col), row-major.
#[derive(Debug, Clone)]
pub struct Segment {
    pub id: u32,
    pub pixels: Vec<(u32, u32)>,
}

/// Full segmentation: per-pixel labels and per-segment pixel lists.
/// Labels are dense in [0, segments.len()) and `segments[i].id == i`.
#[derive(Debug, Clone)]
pub struct SuperpixelMap {
    pub labels: LabelMap,
    pub segments: Vec<Segment>,
}

impl SuperpixelMap {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

struct Seed<T> {
    row: T,
    col: T,
    feat: T,
}

/// Segments an image into at most `params.target_count` superpixels.
pub fn segment<T: Real>(img: &SarImage<T>, params: &SlicParams) -> Result<SuperpixelMap> {
    let (m, n) = (img.height(), img.width());
    if params.target_count == 0 {
        return Err(Error::invalid("target_count", "must be positive"));
    }
    if params.iterations == 0 {
        return Err(Error::invalid("iterations", "must be positive"));
    }
    if !(params.compactness > 0.0) {
        return Err(Error::invalid("compactness", "must be positive"));
    }
    let nu = params.target_count.min(m * n);
    let omega = ((m * n) as f64 / nu as f64).sqrt();

    let mut seeds = init_seeds(img, nu, omega);
    let omega_t = T::of(omega);
    let compact = T::of(params.compactness);

    let unassigned = u32::MAX;
    let mut labels = vec![unassigned; m * n];

    for _ in 0..params.iterations {
        assign(img, &seeds, omega, omega_t, compact, &mut labels);
        update_seeds(img, &labels, &mut seeds);
    }
    assign(img, &seeds, omega, omega_t, compact, &mut labels);
    assign_orphans(&seeds, &mut labels, m, n);

    compact_labels(labels, m, n)
}

fn init_seeds<T: Real>(img: &SarImage<T>, nu: usize, omega: f64) -> Vec<Seed<T>> {
    let (m, n) = (img.height(), img.width());
    let mut n_rows = ((m as f64 / omega).round() as usize).clamp(1, m);
    let mut n_cols = ((n as f64 / omega).round() as usize).clamp(1, n);
    if n_rows * n_cols > nu {
        n_cols = (nu / n_rows).max(1);
    }
    if n_rows * n_cols > nu {
        n_rows = (nu / n_cols).max(1).min(m);
    }

    let mut seeds = Vec::with_capacity(n_rows * n_cols);
    for i in 0..n_rows {
        for j in 0..n_cols {
            let r = (((i as f64 + 0.5) * m as f64 / n_rows as f64).floor() as usize).min(m - 1);
            let c = (((j as f64 + 0.5) * n as f64 / n_cols as f64).floor() as usize).min(n - 1);
            let (r, c) = lowest_gradient_3x3(img, r, c);
            seeds.push(Seed {
                row: T::of(r as f64),
                col: T::of(c as f64),
                feat: img.pixel(r, c),
            });
        }
    }
    seeds
}

/// Squared finite-difference gradient with clamped borders.
fn gradient_at<T: Real>(img: &SarImage<T>, r: usize, c: usize) -> T {
    let (m, n) = (img.height(), img.width());
    let up = img.pixel(r.saturating_sub(1), c);
    let down = img.pixel((r + 1).min(m - 1), c);
    let left = img.pixel(r, c.saturating_sub(1));
    let right = img.pixel(r, (c + 1).min(n - 1));
    let dv = down - up;
    let dh = right - left;
    dv * dv + dh * dh
}

fn lowest_gradient_3x3<T: Real>(img: &SarImage<T>, r: usize, c: usize) -> (usize, usize) {
    let (m, n) = (img.height(), img.width());
    let mut best = (r, c);
    let mut best_g = T::infinity();
    for rr in r.saturating_sub(1)..=(r + 1).min(m - 1) {
        for cc in c.saturating_sub(1)..=(c + 1).min(n - 1) {
            let g = gradient_at(img, rr, cc);
            if g < best_g {
                best_g = g;
                best = (rr, cc);
            }
        }
    }
    best
}

fn assign<T: Real>(
    img: &SarImage<T>,
    seeds: &[Seed<T>],
    omega: f64,
    omega_t: T,
    compact: T,
    labels: &mut [u32],
) {
    let (m, n) = (img.height(), img.width());
    let mut dist = vec![T::infinity(); m * n];
    labels.fill(u32::MAX);
    for (id, s) in seeds.iter().enumerate() {
        let sr = s.row.as_f64();
        let sc = s.col.as_f64();
        let r0 = (sr - omega).ceil().max(0.0) as usize;
        let r1 = (sr + omega).floor().min((m - 1) as f64) as usize;
        let c0 = (sc - omega).ceil().max(0.0) as usize;
        let c1 = (sc + omega).floor().min((n - 1) as f64) as usize;
        for r in r0..=r1 {
            let dr = T::of(r as f64) - s.row;
            for c in c0..=c1 {
                let dc = T::of(c as f64) - s.col;
                let df = (img.pixel(r, c) - s.feat) / compact;
                let ds2 = dr * dr + dc * dc;
                let d = df * df + ds2 / (omega_t * omega_t);
                let idx = r * n + c;
                // Strict improvement only: iteration is in seed id order, so
                // ties keep the lower id.
                if d < dist[idx] {
                    dist[idx] = d;
                    labels[idx] = id as u32;
                }
            }
        }
    }
}

fn update_seeds<T: Real>(img: &SarImage<T>, labels: &[u32], seeds: &mut [Seed<T>]) {
    let n = img.width();
    let mut count = vec![0usize; seeds.len()];
    let mut sum_r = vec![T::zero(); seeds.len()];
    let mut sum_c = vec![T::zero(); seeds.len()];
    let mut sum_f = vec![T::zero(); seeds.len()];
    for (idx, &l) in labels.iter().enumerate() {
        if l == u32::MAX {
            continue;
        }
        let l = l as usize;
        count[l] += 1;
        sum_r[l] += T::of((idx / n) as f64);
        sum_c[l] += T::of((idx % n) as f64);
        sum_f[l] += img.pixel(idx / n, idx % n);
    }
    for (l, s) in seeds.iter_mut().enumerate() {
        if count[l] == 0 {
            continue;
        }
        let k = T::of(count[l] as f64);
        s.row = sum_r[l] / k;
        s.col = sum_c[l] / k;
        s.feat = sum_f[l] / k;
    }
}

/// Pixels outside every seed window take the spatially nearest seed,
/// ties to the lower id.
fn assign_orphans<T: Real>(seeds: &[Seed<T>], labels: &mut [u32], m: usize, n: usize) {
    for idx in 0..m * n {
        if labels[idx] != u32::MAX {
            continue;
        }
        let (r, c) = ((idx / n) as f64, (idx % n) as f64);
        let mut best = 0u32;
        let mut best_d = f64::INFINITY;
        for (id, s) in seeds.iter().enumerate() {
            let dr = r - s.row.as_f64();
            let dc = c - s.col.as_f64();
            let d = dr * dr + dc * dc;
            if d < best_d {
                best_d = d;
                best = id as u32;
            }
        }
        labels[idx] = best;
    }
    debug_assert!(labels.iter().all(|&l| l != u32::MAX));
}

/// Renumbers surviving seeds densely (in seed id order) and builds the
/// per-segment pixel lists.
fn compact_labels(labels: Vec<u32>, m: usize, n: usize) -> Result<SuperpixelMap> {
    let max_label = *labels.iter().max().expect("non-empty image") as usize;
    let mut remap = vec![u32::MAX; max_label + 1];
    let mut counts = vec![0usize; max_label + 1];
    for &l in &labels {
        counts[l as usize] += 1;
    }
    let mut next = 0u32;
    for (old, &cnt) in counts.iter().enumerate() {
        if cnt > 0 {
            remap[old] = next;
            next += 1;
        }
    }
    let mut segments: Vec<Segment> = (0..next).map(|id| Segment { id, pixels: Vec::new() }).collect();
    let mut data = Vec::with_capacity(labels.len());
    for (idx, &l) in labels.iter().enumerate() {
        let new = remap[l as usize];
        data.push(new);
        segments[new as usize].pixels.push(((idx / n) as u32, (idx % n) as u32));
    }
    Ok(SuperpixelMap { labels: LabelMap::from_raw(n, m, data)?, segments })
}

/// Reuses a segmentation on the co-registered partner image. The pattern is
/// computed once on the first image and copied verbatim; only the dimensions
/// are checked here.
pub fn copy_pattern<T: Real>(map: &SuperpixelMap, target: &SarImage<T>) -> Result<SuperpixelMap> {
    if map.labels.width() != target.width() || map.labels.height() != target.height() {
        return Err(Error::DimensionMismatch {
            expected_width: map.labels.width(),
            expected_height: map.labels.height(),
            actual_width: target.width(),
            actual_height: target.height(),
        });
    }
    Ok(map.clone())
}

/// One fixed-size vector cut from a segment. `coords[i]` is the source pixel
/// of `values[i]`; padded entries repeat coordinates that are already
/// present.
#[derive(Debug, Clone)]
pub struct PatchVector<T> {
    pub segment_id: u32,
    pub sub_index: u32,
    pub values: Array1<T>,
    pub coords: Vec<(u32, u32)>,
}

/// Cuts a segment with p pixels into vectors of length k*k.
///
/// p <= k*k gives one vector: the segment's pixels in row-major order
/// followed by k*k - p pixels drawn uniformly (seeded) from the segment.
/// Otherwise floor(p/k^2) full vectors of consecutive pixels are emitted,
/// plus, when a remainder exists, one final vector of the leftover pixels
/// padded by the same random rule.
///
/// The draw sequence depends only on the segment's pixel coordinates, k and
/// the seed, so calling this for both images of a pair with equal seeds
/// yields aligned vectors with identical coordinates.
pub fn reshape_segment<T: Real>(
    img: &SarImage<T>,
    seg: &Segment,
    k: usize,
    seed: u64,
) -> Result<Vec<PatchVector<T>>> {
    if k == 0 {
        return Err(Error::invalid("k", "vector side must be positive"));
    }
    let p = seg.pixels.len();
    if p == 0 {
        return Err(Error::invalid("segment", "segment has no pixels"));
    }
    let k2 = k * k;
    let mut rng = Prng::seed_from_u64(seed);
    let mut out = Vec::new();

    let mut push = |coords: Vec<(u32, u32)>, sub_index: u32| {
        let values = Array1::from_iter(
            coords.iter().map(|&(r, c)| img.pixel(r as usize, c as usize)),
        );
        out.push(PatchVector { segment_id: seg.id, sub_index, values, coords });
    };

    if p <= k2 {
        let mut coords = seg.pixels.clone();
        for _ in p..k2 {
            coords.push(seg.pixels[rng.random_range(0..p)]);
        }
        push(coords, 0);
    } else {
        let q = p / k2;
        for h in 0..q {
            push(seg.pixels[h * k2..(h + 1) * k2].to_vec(), h as u32);
        }
        let rem = p - q * k2;
        if rem > 0 {
            let mut coords = seg.pixels[q * k2..].to_vec();
            for _ in rem..k2 {
                coords.push(seg.pixels[rng.random_range(0..p)]);
            }
            push(coords, q as u32);
        }
    }
    Ok(out)
}

/// Reshapes every segment of a map, deriving one padding seed per segment
/// from the root seed and a stream tag. Output is ordered by
/// (segment_id, sub_index).
pub fn reshape_image<T: Real>(
    img: &SarImage<T>,
    map: &SuperpixelMap,
    k: usize,
    root_seed: u64,
    tag: &str,
) -> Result<Vec<PatchVector<T>>> {
    let mut out = Vec::new();
    for seg in &map.segments {
        let seed = derive_seed(root_seed, tag, seg.id as u64);
        out.extend(reshape_segment(img, seg, k, seed)?);
    }
    Ok(out)
}
