//! Low-rank plus sparse decomposition of the paired patch matrix.
//!
//! Phi stacks the reshaped patch vectors of both acquisitions as columns,
//! the two vectors of each pair adjacent. The solver splits Phi into a
//! low-rank part U, which absorbs the per-column speckle and calibration
//! scale, and a sparse part E carrying isolated outliers. It minimizes
//!
//!   |U|_* + eps * (lambda * |E|_x + (1 - lambda) * |J|_2,1),  U = J,
//!   Phi = U + E
//!
//! by inexact augmented Lagrangian alternation, where |.|_x is the sparse
//! norm choice for E and the auxiliary J carries a column-energy penalty
//! tied back to U. With the column norm on E, any matrix whose columns all
//! have energy above the threshold is cheaper to explain entirely through
//! E than through U, so U collapses to zero on realistic speckle inputs;
//! entrywise L1 is the default that makes the split act as intended.

use ndarray::{Array1, Array2};

use crate::clustering::DiffVector;
use crate::error::{Error, Result};
use crate::linalg;
use crate::num::Real;
use crate::superpixel::PatchVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SparseNorm {
    /// Entrywise L1: isolated outlier pixels land in E.
    EntryL1,
    /// Column L21: whole pair columns land in E. Collapses U to zero when
    /// every column carries broadband energy, which speckle guarantees.
    ColumnL21,
}

#[derive(Debug, Clone)]
pub struct LrsdParams {
    pub sparse_norm: SparseNorm,
    /// Weight between the sparse term (lambda) and the column-energy term
    /// on the low-rank side (1 - lambda), inside the eps envelope.
    pub lambda: f64,
    /// Penalty envelope; defaults to 1/sqrt(max(rows, cols)).
    pub eps: Option<f64>,
    /// Initial step weight; defaults to 1.25 over the spectral norm of Phi.
    pub mu0: Option<f64>,
    pub rho: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for LrsdParams {
    fn default() -> Self {
        LrsdParams {
            sparse_norm: SparseNorm::EntryL1,
            lambda: 0.5,
            eps: None,
            mu0: None,
            rho: 1.1,
            tol: 1e-7,
            max_iter: 500,
        }
    }
}

impl LrsdParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid("lambda", "must lie in [0, 1]"));
        }
        if let Some(e) = self.eps {
            if !(e > 0.0) {
                return Err(Error::invalid("eps", "must be positive"));
            }
        }
        if let Some(m) = self.mu0 {
            if !(m > 0.0) {
                return Err(Error::invalid("mu0", "must be positive"));
            }
        }
        if !(self.rho > 1.0) {
            return Err(Error::invalid("rho", "must exceed 1"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid("tol", "must be positive"));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageSlot {
    First,
    Second,
}

/// Identifies one column of the paired matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ColumnKey {
    pub segment_id: u32,
    pub sub_index: u32,
    pub slot: ImageSlot,
}

#[derive(Debug, Clone)]
pub struct PairedMatrix<T> {
    /// p x 2n, pair columns adjacent: first image, then second.
    pub data: Array2<T>,
    pub keys: Vec<ColumnKey>,
    /// Pixel pattern of each pair (both columns of a pair share it).
    pub coords: Vec<Vec<(u32, u32)>>,
}

/// Interleaves the aligned patch vectors of both images into one matrix.
/// Inputs must run in the same (segment_id, sub_index) order and share the
/// pixel pattern the reshaping copied across the pair.
pub fn assemble_phi<T: Real>(
    first: &[PatchVector<T>],
    second: &[PatchVector<T>],
) -> Result<PairedMatrix<T>> {
    if first.len() != second.len() {
        return Err(Error::invalid(
            "patches",
            format!("{} patch vectors vs {}", first.len(), second.len()),
        ));
    }
    if first.is_empty() {
        return Err(Error::invalid("patches", "no patch vectors"));
    }
    let p = first[0].values.len();
    for (a, b) in first.iter().zip(second) {
        if a.segment_id != b.segment_id || a.sub_index != b.sub_index {
            return Err(Error::invalid(
                "patches",
                format!(
                    "pair order diverges at segment {} part {} vs segment {} part {}",
                    a.segment_id, a.sub_index, b.segment_id, b.sub_index
                ),
            ));
        }
        if a.values.len() != p || b.values.len() != p {
            return Err(Error::invalid("patches", "patch vectors differ in length"));
        }
        if a.coords != b.coords {
            return Err(Error::invalid(
                "patches",
                format!("segment {} part {} was reshaped with different pixel patterns", a.segment_id, a.sub_index),
            ));
        }
    }
    let mut data = Array2::zeros((p, 2 * first.len()));
    let mut keys = Vec::with_capacity(2 * first.len());
    let mut coords = Vec::with_capacity(first.len());
    for (j, (a, b)) in first.iter().zip(second).enumerate() {
        data.column_mut(2 * j).assign(&a.values);
        data.column_mut(2 * j + 1).assign(&b.values);
        keys.push(ColumnKey { segment_id: a.segment_id, sub_index: a.sub_index, slot: ImageSlot::First });
        keys.push(ColumnKey { segment_id: b.segment_id, sub_index: b.sub_index, slot: ImageSlot::Second });
        coords.push(a.coords.clone());
    }
    Ok(PairedMatrix { data, keys, coords })
}

impl<T: Real> PairedMatrix<T> {
    /// Maps the columns of a solved low-rank part back to tagged patch
    /// vectors, one list per image, in the assembly order.
    pub fn restore(&self, low_rank: &Array2<T>) -> Result<(Vec<PatchVector<T>>, Vec<PatchVector<T>>)> {
        if low_rank.dim() != self.data.dim() {
            return Err(Error::invalid(
                "low_rank",
                format!("{:?} does not match the assembled {:?}", low_rank.dim(), self.data.dim()),
            ));
        }
        let n = self.keys.len() / 2;
        let mut first = Vec::with_capacity(n);
        let mut second = Vec::with_capacity(n);
        for j in 0..n {
            let key = self.keys[2 * j];
            for (slot, out) in [(0usize, &mut first), (1usize, &mut second)] {
                out.push(PatchVector {
                    segment_id: key.segment_id,
                    sub_index: key.sub_index,
                    values: low_rank.column(2 * j + slot).to_owned(),
                    coords: self.coords[j].clone(),
                });
            }
        }
        Ok((first, second))
    }
}

/// Singular value thresholding: shrinks every singular value by tau,
/// dropping those at or below it. Computed through the Gram matrix of the
/// short side, so the cost is cubic only in min(rows, cols).
pub fn svt<T: Real>(x: &Array2<T>, tau: T) -> Array2<T> {
    let (m, n) = x.dim();
    if m > n {
        let r = svt(&x.t().to_owned(), tau);
        return r.t().to_owned();
    }
    let g = x.dot(&x.t());
    let (vals, vecs) = linalg::eigh(&g);
    // B = Q^T X holds sigma_i v_i^T in its rows; rescaling row i by
    // f_i = max(sigma_i - tau, 0) / sigma_i shrinks the spectrum.
    let mut b = vecs.t().dot(x);
    for i in 0..m {
        let sigma = vals[i].max(T::zero()).sqrt();
        let f = if sigma > tau { (sigma - tau) / sigma } else { T::zero() };
        for v in b.row_mut(i) {
            *v *= f;
        }
    }
    vecs.dot(&b)
}

/// Columnwise shrinkage: scales each column toward zero by tau in L2,
/// zeroing columns whose norm does not exceed it.
pub fn col_shrink<T: Real>(x: &Array2<T>, tau: T) -> Array2<T> {
    let mut out = x.clone();
    for mut col in out.columns_mut() {
        let norm = col.iter().map(|&v| v * v).sum::<T>().sqrt();
        let f = if norm > tau { (norm - tau) / norm } else { T::zero() };
        for v in col.iter_mut() {
            *v *= f;
        }
    }
    out
}

/// Entrywise soft threshold.
pub fn entry_shrink<T: Real>(x: &Array2<T>, tau: T) -> Array2<T> {
    x.mapv(|v| {
        let s = v.abs() - tau;
        if s > T::zero() {
            s * v.signum()
        } else {
            T::zero()
        }
    })
}

fn fro<T: Real>(x: &Array2<T>) -> T {
    x.iter().map(|&v| v * v).sum::<T>().sqrt()
}

fn col21<T: Real>(x: &Array2<T>) -> T {
    x.columns()
        .into_iter()
        .map(|c| c.iter().map(|&v| v * v).sum::<T>().sqrt())
        .sum()
}

fn entry_l1<T: Real>(x: &Array2<T>) -> T {
    x.iter().map(|&v| v.abs()).sum()
}

/// Penalized objective at a feasible-ish point, for diagnostics.
pub fn objective<T: Real>(u: &Array2<T>, e: &Array2<T>, eps: T, lambda: T, norm: SparseNorm) -> T {
    let nuclear = linalg::singular_values(u).sum();
    let sparse = match norm {
        SparseNorm::EntryL1 => entry_l1(e),
        SparseNorm::ColumnL21 => col21(e),
    };
    nuclear + eps * (lambda * sparse + (T::one() - lambda) * col21(u))
}

#[derive(Debug, Clone)]
pub struct LrsdResult<T> {
    pub low_rank: Array2<T>,
    pub sparse: Array2<T>,
    pub iterations: usize,
    pub converged: bool,
    /// |Phi - U - E|_F over max(|Phi|_F, 1) at the last iterate.
    pub primal_residual: f64,
    /// |U - J|_F over the same denominator.
    pub split_residual: f64,
}

pub fn solve<T: Real>(phi: &Array2<T>, params: &LrsdParams) -> Result<LrsdResult<T>> {
    params.validate()?;
    let (m, n) = phi.dim();
    if m == 0 || n == 0 {
        return Err(Error::invalid("phi", "empty matrix"));
    }
    let sigma1 = linalg::spectral_norm(phi);
    if sigma1 == T::zero() {
        return Ok(LrsdResult {
            low_rank: Array2::zeros((m, n)),
            sparse: Array2::zeros((m, n)),
            iterations: 0,
            converged: true,
            primal_residual: 0.0,
            split_residual: 0.0,
        });
    }
    let eps = T::of(params.eps.unwrap_or(1.0 / (m.max(n) as f64).sqrt()));
    let lambda = T::of(params.lambda);
    let mut mu = match params.mu0 {
        Some(v) => T::of(v),
        None => T::of(1.25) / sigma1,
    };
    let rho = T::of(params.rho);
    let den = fro(phi).max(T::one());

    let mut u = Array2::<T>::zeros((m, n));
    let mut e = Array2::<T>::zeros((m, n));
    let mut x1 = Array2::<T>::zeros((m, n));
    let mut x2 = Array2::<T>::zeros((m, n));

    let mut iterations = 0;
    let mut converged = false;
    let (mut r1, mut r2) = (T::zero(), T::zero());
    while iterations < params.max_iter {
        iterations += 1;
        let ge = phi - &u + &x1 / mu;
        e = match params.sparse_norm {
            SparseNorm::EntryL1 => entry_shrink(&ge, eps * lambda / mu),
            SparseNorm::ColumnL21 => col_shrink(&ge, eps * lambda / mu),
        };
        let gj = &u + &x2 / mu;
        let j = col_shrink(&gj, eps * (T::one() - lambda) / mu);
        let gu = (phi - &e + &x1 / mu + &j - &x2 / mu) / T::of(2.0);
        u = svt(&gu, T::one() / (mu * T::of(2.0)));

        let res1 = phi - &u - &e;
        let res2 = &u - &j;
        x1 += &(&res1 * mu);
        x2 += &(&res2 * mu);
        r1 = fro(&res1) / den;
        r2 = fro(&res2) / den;
        if r1.max(r2) < T::of(params.tol) {
            converged = true;
            break;
        }
        mu *= rho;
    }
    Ok(LrsdResult {
        low_rank: u,
        sparse: e,
        iterations,
        converged,
        primal_residual: r1.as_f64(),
        split_residual: r2.as_f64(),
    })
}

/// Elementwise difference magnitudes of each restored pair, keyed like the
/// clustering input. Column 2j minus column 2j+1 of the low-rank part.
pub fn pair_differences<T: Real>(
    low_rank: &Array2<T>,
    keys: &[ColumnKey],
) -> Result<Vec<DiffVector<T>>> {
    if keys.len() != low_rank.ncols() || keys.len() % 2 != 0 {
        return Err(Error::invalid(
            "keys",
            format!("{} keys for {} columns", keys.len(), low_rank.ncols()),
        ));
    }
    let mut out = Vec::with_capacity(keys.len() / 2);
    for j in 0..keys.len() / 2 {
        let (a, b) = (keys[2 * j], keys[2 * j + 1]);
        if a.slot != ImageSlot::First
            || b.slot != ImageSlot::Second
            || a.segment_id != b.segment_id
            || a.sub_index != b.sub_index
        {
            return Err(Error::invalid("keys", format!("columns {} and {} are not a pair", 2 * j, 2 * j + 1)));
        }
        let values = Array1::from_iter(
            low_rank
                .column(2 * j)
                .iter()
                .zip(low_rank.column(2 * j + 1).iter())
                .map(|(&x, &y)| (x - y).abs()),
        );
        out.push(DiffVector { segment_id: a.segment_id, sub_index: a.sub_index, values });
    }
    Ok(out)
}
