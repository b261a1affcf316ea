//! Dense symmetric eigensolver and singular-value helpers.
//!
//! Every matrix decomposed here is small (patch covariances and Gram
//! matrices, a few dozen rows at most), so a cyclic Jacobi iteration is
//! accurate and fast enough, and keeps the crate free of external LAPACK
//! bindings. Results are deterministic: sweep order is fixed, ties in the
//! eigenvalue sort keep the original order, and eigenvector signs are
//! normalized.

use ndarray::{Array1, Array2};

use crate::num::Real;

const MAX_SWEEPS: usize = 64;

/// Eigendecomposition of a symmetric matrix.
///
/// Returns eigenvalues in descending order and the matching eigenvectors as
/// columns. Each eigenvector is scaled so its entry of largest magnitude
/// (first such entry on ties) is non-negative.
pub fn eigh<T: Real>(a: &Array2<T>) -> (Array1<T>, Array2<T>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "eigh expects a square matrix");
    let mut m = a.clone();
    let mut v = Array2::<T>::eye(n);

    let norm = frobenius(&m);
    let stop = norm * T::epsilon() * T::of(n as f64);

    for _ in 0..MAX_SWEEPS {
        if off_diagonal_norm(&m) <= stop {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq == T::zero() {
                    continue;
                }
                // Rotation angle per Golub & Van Loan, sec. 8.5.
                let theta = (m[[q, q]] - m[[p, p]]) / (T::of(2.0) * apq);
                let t = {
                    let denom = theta.abs() + (theta * theta + T::one()).sqrt();
                    if theta >= T::zero() {
                        T::one() / denom
                    } else {
                        -T::one() / denom
                    }
                };
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                rotate(&mut m, p, q, c, s);
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        m[[j, j]]
            .partial_cmp(&m[[i, i]])
            .expect("finite eigenvalues")
    });

    let mut values = Array1::<T>::zeros(n);
    let mut vectors = Array2::<T>::zeros((n, n));
    for (out, &src) in order.iter().enumerate() {
        values[out] = m[[src, src]];
        let mut col: Vec<T> = (0..n).map(|k| v[[k, src]]).collect();
        normalize_sign(&mut col);
        for k in 0..n {
            vectors[[k, out]] = col[k];
        }
    }
    (values, vectors)
}

/// Applies the Jacobi rotation J(p,q,c,s) as m <- J^T m J, preserving
/// symmetry explicitly.
fn rotate<T: Real>(m: &mut Array2<T>, p: usize, q: usize, c: T, s: T) {
    let n = m.nrows();
    let app = m[[p, p]];
    let aqq = m[[q, q]];
    let apq = m[[p, q]];
    for k in 0..n {
        if k == p || k == q {
            continue;
        }
        let akp = m[[k, p]];
        let akq = m[[k, q]];
        m[[k, p]] = c * akp - s * akq;
        m[[p, k]] = m[[k, p]];
        m[[k, q]] = s * akp + c * akq;
        m[[q, k]] = m[[k, q]];
    }
    let two = T::of(2.0);
    m[[p, p]] = c * c * app - two * c * s * apq + s * s * aqq;
    m[[q, q]] = s * s * app + two * c * s * apq + c * c * aqq;
    m[[p, q]] = T::zero();
    m[[q, p]] = T::zero();
}

fn normalize_sign<T: Real>(col: &mut [T]) {
    let mut best = 0usize;
    for (i, v) in col.iter().enumerate() {
        if v.abs() > col[best].abs() {
            best = i;
        }
    }
    if col[best] < T::zero() {
        for v in col.iter_mut() {
            *v = -*v;
        }
    }
}

fn frobenius<T: Real>(m: &Array2<T>) -> T {
    m.iter().map(|&x| x * x).sum::<T>().sqrt()
}

fn off_diagonal_norm<T: Real>(m: &Array2<T>) -> T {
    let n = m.nrows();
    let mut acc = T::zero();
    for p in 0..n {
        for q in 0..n {
            if p != q {
                acc += m[[p, q]] * m[[p, q]];
            }
        }
    }
    acc.sqrt()
}

/// Singular values of an arbitrary matrix, descending. Computed from the
/// eigenvalues of the smaller Gram matrix.
pub fn singular_values<T: Real>(a: &Array2<T>) -> Array1<T> {
    let gram = small_gram(a);
    let (vals, _) = eigh(&gram);
    vals.mapv(|l| l.max(T::zero()).sqrt())
}

/// Largest singular value.
pub fn spectral_norm<T: Real>(a: &Array2<T>) -> T {
    let sv = singular_values(a);
    if sv.is_empty() {
        T::zero()
    } else {
        sv[0]
    }
}

/// A A^T or A^T A, whichever is smaller.
pub fn small_gram<T: Real>(a: &Array2<T>) -> Array2<T> {
    if a.nrows() <= a.ncols() {
        a.dot(&a.t())
    } else {
        a.t().dot(a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn eigh_diagonal() {
        let a = array![[3.0_f64, 0.0], [0.0, -1.0]];
        let (vals, vecs) = eigh(&a);
        assert_abs_diff_eq!(vals[0], 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(vals[1], -1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(vecs[[0, 0]].abs(), 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(vecs[[1, 1]].abs(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn eigh_known_2x2() {
        // [[2,1],[1,2]] has eigenvalues 3 and 1 with vectors (1,1) and (1,-1).
        let a = array![[2.0, 1.0], [1.0, 2.0]];
        let (vals, vecs) = eigh(&a);
        assert_abs_diff_eq!(vals[0], 3.0, epsilon = 1e-13);
        assert_abs_diff_eq!(vals[1], 1.0, epsilon = 1e-13);
        let s = 1.0 / 2.0_f64.sqrt();
        assert_abs_diff_eq!(vecs[[0, 0]], s, epsilon = 1e-13);
        assert_abs_diff_eq!(vecs[[1, 0]], s, epsilon = 1e-13);
        assert_abs_diff_eq!(vecs[[0, 1]].abs(), s, epsilon = 1e-13);
    }

    #[test]
    fn eigh_reconstructs_matrix() {
        let mut rng = crate::rng::stream(11, "linalg-test", 0);
        use rand::Rng;
        let n = 12;
        let mut a = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            for j in 0..=i {
                let v: f64 = rng.random_range(-1.0..1.0);
                a[[i, j]] = v;
                a[[j, i]] = v;
            }
        }
        let (vals, vecs) = eigh(&a);
        let lam = Array2::from_diag(&vals);
        let back = vecs.dot(&lam).dot(&vecs.t());
        for i in 0..n {
            for j in 0..n {
                assert_abs_diff_eq!(back[[i, j]], a[[i, j]], epsilon = 1e-10);
            }
        }
        // Orthonormal columns.
        let gram = vecs.t().dot(&vecs);
        for i in 0..n {
            for j in 0..n {
                let want = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(gram[[i, j]], want, epsilon = 1e-12);
            }
        }
        // Descending order.
        for i in 1..n {
            assert!(vals[i - 1] >= vals[i]);
        }
    }

    #[test]
    fn eigh_f32_runs() {
        let a = array![[2.0_f32, 1.0], [1.0, 2.0]];
        let (vals, _) = eigh(&a);
        assert!((vals[0] - 3.0).abs() < 1e-5);
    }

    #[test]
    fn singular_values_of_known_matrix() {
        // diag(3, 2) embedded in a 2x3 matrix.
        let a = array![[3.0, 0.0, 0.0], [0.0, 2.0, 0.0]];
        let sv = singular_values(&a);
        assert_abs_diff_eq!(sv[0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sv[1], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(spectral_norm(&a), 3.0, epsilon = 1e-12);
    }

    #[test]
    fn eigh_matches_nalgebra_on_random_symmetric() {
        use rand::Rng;
        for seed in [1u64, 2, 3] {
            let mut rng = crate::rng::stream(seed, "linalg-oracle", 0);
            let n = 16;
            let mut a = Array2::<f64>::zeros((n, n));
            for i in 0..n {
                for j in 0..=i {
                    let v: f64 = rng.random_range(-2.0..2.0);
                    a[[i, j]] = v;
                    a[[j, i]] = v;
                }
            }
            let (vals, vecs) = eigh(&a);

            let na = nalgebra::DMatrix::from_fn(n, n, |i, j| a[[i, j]]);
            let se = na.symmetric_eigen();
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&i, &j| se.eigenvalues[j].partial_cmp(&se.eigenvalues[i]).unwrap());
            for (out, &src) in idx.iter().enumerate() {
                assert_abs_diff_eq!(vals[out], se.eigenvalues[src], epsilon = 1e-10);
                // Compare up to sign.
                let mut dot = 0.0;
                for k in 0..n {
                    dot += vecs[[k, out]] * se.eigenvectors[(k, src)];
                }
                assert_abs_diff_eq!(dot.abs(), 1.0, epsilon = 1e-9);
            }
        }
    }
}
