//! Difference vectors, fuzzy c-means, and superpixel-level voting.
//!
//! Each aligned vector pair collapses to an elementwise absolute difference.
//! Fuzzy c-means splits the difference vectors into three classes that are
//! then named by ascending center mean: low (unchanged-like), mid
//! (ambiguous), high (changed-like). A weighted vote lifts the per-vector
//! labels back to whole superpixels.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::num::Real;
use crate::rng::Prng;
use crate::superpixel::PatchVector;

/// Elementwise |a - b| of one aligned vector pair.
#[derive(Debug, Clone)]
pub struct DiffVector<T> {
    pub segment_id: u32,
    pub sub_index: u32,
    pub values: Array1<T>,
}

/// Builds the superpixel difference image: one difference vector per aligned
/// pair. Inputs must run in the same (segment_id, sub_index) order.
pub fn build_spdi<T: Real>(
    a: &[PatchVector<T>],
    b: &[PatchVector<T>],
) -> Result<Vec<DiffVector<T>>> {
    if a.len() != b.len() {
        return Err(Error::invalid(
            "spdi",
            format!("vector counts differ: {} vs {}", a.len(), b.len()),
        ));
    }
    let mut out = Vec::with_capacity(a.len());
    for (x, y) in a.iter().zip(b) {
        if x.segment_id != y.segment_id || x.sub_index != y.sub_index {
            return Err(Error::invalid(
                "spdi",
                format!(
                    "pair mismatch: ({}, {}) vs ({}, {})",
                    x.segment_id, x.sub_index, y.segment_id, y.sub_index
                ),
            ));
        }
        if x.values.len() != y.values.len() {
            return Err(Error::invalid("spdi", "vector lengths differ within a pair"));
        }
        let values = Array1::from_iter(
            x.values.iter().zip(y.values.iter()).map(|(&p, &q)| (p - q).abs()),
        );
        out.push(DiffVector { segment_id: x.segment_id, sub_index: x.sub_index, values });
    }
    Ok(out)
}

/// Stacks difference vectors into an (n, d) matrix, preserving order.
pub fn diff_matrix<T: Real>(diffs: &[DiffVector<T>]) -> Array2<T> {
    let n = diffs.len();
    let d = if n == 0 { 0 } else { diffs[0].values.len() };
    let mut x = Array2::zeros((n, d));
    for (i, dv) in diffs.iter().enumerate() {
        x.row_mut(i).assign(&dv.values);
    }
    x
}

/// Class of a difference vector or a whole superpixel, ordered by how
/// changed it looks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Level {
    Low,
    Mid,
    High,
}

#[derive(Debug, Clone)]
pub struct FcmParams {
    pub clusters: usize,
    pub fuzzifier: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for FcmParams {
    fn default() -> Self {
        FcmParams { clusters: 3, fuzzifier: 2.0, tol: 1e-6, max_iter: 300, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct FcmResult<T> {
    /// Cluster centers sorted by ascending mean. Length equals the requested
    /// cluster count, or 1 for a degenerate input.
    pub centers: Vec<Array1<T>>,
    /// Row-stochastic membership matrix, columns aligned with `centers`.
    pub memberships: Array2<T>,
    /// Per-row index of the strongest membership (ties to the lower index,
    /// i.e. the lower-mean center).
    pub hard: Vec<usize>,
    /// Objective value per iteration; non-increasing.
    pub objective: Vec<T>,
    pub iterations: usize,
    /// Set when the input had fewer distinct rows than clusters; the result
    /// then carries a single center and all rows are labeled mid.
    pub degenerate: bool,
}

impl<T: Real> FcmResult<T> {
    /// Hard labels as levels. Degenerate results map everything to mid;
    /// otherwise requires exactly three clusters.
    pub fn hard_levels(&self) -> Vec<Level> {
        if self.degenerate {
            return vec![Level::Mid; self.hard.len()];
        }
        assert_eq!(self.centers.len(), 3, "level naming needs three clusters");
        self.hard
            .iter()
            .map(|&h| match h {
                0 => Level::Low,
                1 => Level::Mid,
                _ => Level::High,
            })
            .collect()
    }
}

/// Fuzzy c-means over the rows of `x`.
///
/// Centers initialize from distinct rows chosen by the seeded RNG. A row at
/// zero distance from one or more centers gets its membership split evenly
/// over exactly those centers. Inputs with fewer distinct rows than clusters
/// produce a degenerate single-center result with the warning flag set.
pub fn fcm<T: Real>(x: ArrayView2<'_, T>, params: &FcmParams) -> Result<FcmResult<T>> {
    let (n, d) = x.dim();
    let c = params.clusters;
    if c < 2 {
        return Err(Error::invalid("clusters", "need at least 2 clusters"));
    }
    if n < c {
        return Err(Error::invalid(
            "vectors",
            format!("{n} vectors cannot form {c} clusters"),
        ));
    }
    if !(params.fuzzifier > 1.0) {
        return Err(Error::invalid("fuzzifier", "must be greater than 1"));
    }

    let pool = distinct_rows(&x);
    if pool.len() < c {
        let mut center = Array1::<T>::zeros(d);
        for i in 0..n {
            center = center + x.row(i);
        }
        center = center / T::of(n as f64);
        let mut objective = T::zero();
        for i in 0..n {
            objective += sq_dist(x.row(i), center.view());
        }
        return Ok(FcmResult {
            centers: vec![center],
            memberships: Array2::ones((n, 1)),
            hard: vec![0; n],
            objective: vec![objective],
            iterations: 0,
            degenerate: true,
        });
    }

    let mut rng = Prng::seed_from_u64(params.seed);
    let picks = rand::seq::index::sample(&mut rng, pool.len(), c);
    let mut centers: Vec<Array1<T>> =
        picks.iter().map(|p| x.row(pool[p]).to_owned()).collect();

    let m = params.fuzzifier;
    let tol = T::of(params.tol);
    let expo = 1.0 / (m - 1.0);
    let plain = (m - 2.0).abs() < 1e-12;

    let mut objective = Vec::new();
    let mut iterations = 0;
    let mut u = Array2::<T>::zeros((n, c));
    let mut d2 = Array2::<T>::zeros((n, c));

    for _ in 0..params.max_iter {
        memberships(&x, &centers, expo, plain, &mut u, &mut d2);

        let mut j_val = T::zero();
        for i in 0..n {
            for j in 0..c {
                j_val += upow(u[[i, j]], m, plain) * d2[[i, j]];
            }
        }
        objective.push(j_val);
        iterations += 1;

        let mut shift = T::zero();
        for j in 0..c {
            let mut num = Array1::<T>::zeros(d);
            let mut den = T::zero();
            for i in 0..n {
                let w = upow(u[[i, j]], m, plain);
                num.scaled_add(w, &x.row(i));
                den += w;
            }
            if den > T::zero() {
                let fresh = num / den;
                let delta = sq_dist(fresh.view(), centers[j].view()).sqrt();
                shift = shift.max(delta);
                centers[j] = fresh;
            }
        }
        if shift < tol {
            break;
        }
    }

    memberships(&x, &centers, expo, plain, &mut u, &mut d2);

    // Name clusters by ascending center mean; stable under ties.
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| {
        let ma = centers[a].sum() / T::of(d.max(1) as f64);
        let mb = centers[b].sum() / T::of(d.max(1) as f64);
        ma.partial_cmp(&mb).expect("finite center means")
    });
    let centers_sorted: Vec<Array1<T>> = order.iter().map(|&j| centers[j].clone()).collect();
    let mut u_sorted = Array2::<T>::zeros((n, c));
    for (new_j, &old_j) in order.iter().enumerate() {
        for i in 0..n {
            u_sorted[[i, new_j]] = u[[i, old_j]];
        }
    }
    let hard = (0..n)
        .map(|i| {
            let mut best = 0;
            for j in 1..c {
                if u_sorted[[i, j]] > u_sorted[[i, best]] {
                    best = j;
                }
            }
            best
        })
        .collect();

    Ok(FcmResult {
        centers: centers_sorted,
        memberships: u_sorted,
        hard,
        objective,
        iterations,
        degenerate: false,
    })
}

/// Indices of the first occurrence of each distinct row, found by sorting.
fn distinct_rows<T: Real>(x: &ArrayView2<'_, T>) -> Vec<usize> {
    let n = x.nrows();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| {
        for (p, q) in x.row(a).iter().zip(x.row(b).iter()) {
            match p.partial_cmp(q).expect("finite values") {
                std::cmp::Ordering::Equal => continue,
                other => return other,
            }
        }
        a.cmp(&b)
    });
    let mut pool = Vec::new();
    let mut prev: Option<usize> = None;
    for &i in &idx {
        let fresh = match prev {
            None => true,
            Some(p) => x.row(p) != x.row(i),
        };
        if fresh {
            pool.push(i);
            prev = Some(i);
        }
    }
    pool.sort_unstable();
    pool
}

fn sq_dist<T: Real>(a: ArrayView1<'_, T>, b: ArrayView1<'_, T>) -> T {
    let mut acc = T::zero();
    for (&p, &q) in a.iter().zip(b.iter()) {
        let d = p - q;
        acc += d * d;
    }
    acc
}

fn upow<T: Real>(u: T, m: f64, plain: bool) -> T {
    if plain {
        u * u
    } else {
        u.powf(T::of(m))
    }
}

fn memberships<T: Real>(
    x: &ArrayView2<'_, T>,
    centers: &[Array1<T>],
    expo: f64,
    plain: bool,
    u: &mut Array2<T>,
    d2: &mut Array2<T>,
) {
    let (n, c) = (x.nrows(), centers.len());
    for i in 0..n {
        let mut zero_hits = 0usize;
        for j in 0..c {
            let dd = sq_dist(x.row(i), centers[j].view());
            d2[[i, j]] = dd;
            if dd == T::zero() {
                zero_hits += 1;
            }
        }
        if zero_hits > 0 {
            // Coincident with one or more centers: crisp membership split
            // evenly over the zero-distance set.
            let w = T::one() / T::of(zero_hits as f64);
            for j in 0..c {
                u[[i, j]] = if d2[[i, j]] == T::zero() { w } else { T::zero() };
            }
            continue;
        }
        for j in 0..c {
            let mut denom = T::zero();
            for l in 0..c {
                let ratio = d2[[i, j]] / d2[[i, l]];
                denom += if plain { ratio } else { ratio.powf(T::of(expo)) };
            }
            u[[i, j]] = T::one() / denom;
        }
    }
}

/// Vote weights and thresholds: changed counts 1, mid 0.5, low 0. The share
/// of the maximum attainable weight decides the superpixel class.
#[derive(Debug, Clone)]
pub struct VoteThresholds {
    /// Share at or above which the superpixel is changed.
    pub changed: f64,
    /// Share at or above which (but below `changed`) it stays ambiguous.
    pub intermediate: f64,
}

impl Default for VoteThresholds {
    fn default() -> Self {
        VoteThresholds { changed: 0.8, intermediate: 0.5 }
    }
}

impl VoteThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.intermediate && self.intermediate <= self.changed && self.changed <= 1.0) {
            return Err(Error::invalid(
                "vote thresholds",
                "need 0 < intermediate <= changed <= 1",
            ));
        }
        Ok(())
    }
}

/// Combines the levels of one superpixel's vectors into a superpixel level.
///
/// Weights are summed in doubled integer form (high 2, mid 1, low 0), so the
/// boundary shares compare exactly: 0.8 is changed, 0.5 is mid, anything
/// below is unchanged.
pub fn vote(levels: &[Level], th: &VoteThresholds) -> Result<Level> {
    th.validate()?;
    if levels.is_empty() {
        return Err(Error::invalid("vote", "no vectors to vote on"));
    }
    let doubled: u64 = levels
        .iter()
        .map(|l| match l {
            Level::High => 2u64,
            Level::Mid => 1,
            Level::Low => 0,
        })
        .sum();
    let share = doubled as f64 / (2 * levels.len()) as f64;
    Ok(if share >= th.changed {
        Level::High
    } else if share >= th.intermediate {
        Level::Mid
    } else {
        Level::Low
    })
}
