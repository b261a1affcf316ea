//! Two-class linear SVM trained by dual coordinate descent.
//!
//! L1-loss dual coordinate descent after Hsieh et al.: one pass updates each
//! dual variable in a seeded random order while maintaining the primal
//! weight vector. The bias is learned by augmenting every sample with a
//! constant 1 feature, so the dual stays a pure box-constrained problem.

use ndarray::{Array1, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::num::Real;
use crate::rng::Prng;

#[derive(Debug, Clone)]
pub struct SvmParams {
    /// Box constraint C on the dual variables.
    pub cost: f64,
    /// Epoch ends the training once the largest projected gradient
    /// magnitude falls below this.
    pub tol: f64,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for SvmParams {
    fn default() -> Self {
        SvmParams { cost: 1.0, tol: 1e-4, max_epochs: 1000, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSvm<T> {
    pub weights: Array1<T>,
    pub bias: T,
}

impl<T: Real> LinearSvm<T> {
    pub fn decision(&self, x: ArrayView1<'_, T>) -> T {
        self.weights.dot(&x) + self.bias
    }

    /// True means changed. A decision value of exactly zero counts as
    /// changed.
    pub fn predict(&self, x: ArrayView1<'_, T>) -> bool {
        self.decision(x) >= T::zero()
    }
}

/// Trains on rows of `x` with labels `y` (true = changed = +1).
pub fn train<T: Real>(x: ArrayView2<'_, T>, y: &[bool], params: &SvmParams) -> Result<LinearSvm<T>> {
    let (n, d) = x.dim();
    if n == 0 || d == 0 {
        return Err(Error::invalid("svm", "empty training set"));
    }
    if y.len() != n {
        return Err(Error::invalid("svm", format!("{n} samples but {} labels", y.len())));
    }
    if y.iter().all(|&l| l) || y.iter().all(|&l| !l) {
        return Err(Error::invalid("svm", "need at least one sample of each class"));
    }
    if !(params.cost > 0.0) {
        return Err(Error::invalid("cost", "must be positive"));
    }

    let c = T::of(params.cost);
    let tol = T::of(params.tol);
    let sign = |i: usize| if y[i] { T::one() } else { -T::one() };

    // Squared norms of the augmented samples; the +1 is the bias feature.
    let qdiag: Vec<T> = (0..n)
        .map(|i| x.row(i).iter().map(|&v| v * v).sum::<T>() + T::one())
        .collect();

    let mut alpha = vec![T::zero(); n];
    let mut w = Array1::<T>::zeros(d);
    let mut b = T::zero();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = Prng::seed_from_u64(params.seed);

    for _ in 0..params.max_epochs {
        order.shuffle(&mut rng);
        let mut worst = T::zero();
        for &i in &order {
            let yi = sign(i);
            let g = yi * (w.dot(&x.row(i)) + b) - T::one();
            let pg = if alpha[i] == T::zero() {
                g.min(T::zero())
            } else if alpha[i] == c {
                g.max(T::zero())
            } else {
                g
            };
            worst = worst.max(pg.abs());
            if pg.abs() > T::of(1e-12) {
                let next = (alpha[i] - g / qdiag[i]).max(T::zero()).min(c);
                let delta = next - alpha[i];
                if delta != T::zero() {
                    w.scaled_add(delta * yi, &x.row(i));
                    b += delta * yi;
                    alpha[i] = next;
                }
            }
        }
        if worst < tol {
            break;
        }
    }

    Ok(LinearSvm { weights: w, bias: b })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::Rng;

    fn blobs(n_per: usize, seed: u64) -> (Array2<f64>, Vec<bool>) {
        let mut rng = crate::rng::stream(seed, "svm-blobs", 0);
        let mut x = Array2::zeros((2 * n_per, 2));
        let mut y = Vec::new();
        for i in 0..2 * n_per {
            let changed = i >= n_per;
            let cx = if changed { 10.0 } else { 0.0 };
            x[[i, 0]] = cx + rng.random_range(-1.0..1.0);
            x[[i, 1]] = cx + rng.random_range(-1.0..1.0);
            y.push(changed);
        }
        (x, y)
    }

    #[test]
    fn separates_disjoint_blobs() {
        let (x, y) = blobs(50, 1);
        let m = train(x.view(), &y, &SvmParams::default()).unwrap();
        for i in 0..x.nrows() {
            assert_eq!(m.predict(x.row(i)), y[i], "sample {i}");
        }
    }

    #[test]
    fn label_flip_negates_the_model() {
        let (x, y) = blobs(30, 2);
        let flipped: Vec<bool> = y.iter().map(|&v| !v).collect();
        let p = SvmParams::default();
        let a = train(x.view(), &y, &p).unwrap();
        let b = train(x.view(), &flipped, &p).unwrap();
        for (wa, wb) in a.weights.iter().zip(b.weights.iter()) {
            assert!((wa + wb).abs() < 1e-9);
        }
        assert!((a.bias + b.bias).abs() < 1e-9);
    }

    #[test]
    fn duplicated_dataset_at_half_cost_keeps_the_boundary() {
        // Doubling every point doubles the loss term, so halving the cost
        // reproduces the original primal objective, whose minimizer is
        // unique. Tight tolerance pins both runs to that optimum.
        let (x, y) = blobs(40, 3);
        let mut x2 = Array2::zeros((2 * x.nrows(), 2));
        let mut y2 = Vec::new();
        for i in 0..x.nrows() {
            x2.row_mut(2 * i).assign(&x.row(i));
            x2.row_mut(2 * i + 1).assign(&x.row(i));
            y2.push(y[i]);
            y2.push(y[i]);
        }
        let p = SvmParams { tol: 1e-10, max_epochs: 50_000, ..SvmParams::default() };
        let half = SvmParams { cost: 0.5, ..p.clone() };
        let a = train(x.view(), &y, &p).unwrap();
        let b = train(x2.view(), &y2, &half).unwrap();
        for (wa, wb) in a.weights.iter().zip(b.weights.iter()) {
            assert!((wa - wb).abs() < 1e-4, "{wa} vs {wb}");
        }
        assert!((a.bias - b.bias).abs() < 1e-4);
    }

    #[test]
    fn zero_model_calls_zero_vector_changed() {
        let m = LinearSvm::<f64> { weights: Array1::zeros(4), bias: 0.0 };
        assert!(m.predict(Array1::zeros(4).view()));
    }

    #[test]
    fn agrees_with_nearest_centroid_on_gaussianish_blobs() {
        let mut rng = crate::rng::stream(9, "svm-nc", 0);
        let n = 200;
        let mut x = Array2::zeros((n, 3));
        let mut y = Vec::new();
        for i in 0..n {
            let changed = i % 2 == 0;
            let c = if changed { 4.0 } else { 0.0 };
            for j in 0..3 {
                x[[i, j]] = c + rng.random_range(-2.0..2.0);
            }
            y.push(changed);
        }
        let m = train(x.view(), &y, &SvmParams::default()).unwrap();

        let mut centroids = [[0.0; 3]; 2];
        let mut counts = [0usize; 2];
        for i in 0..n {
            let k = y[i] as usize;
            counts[k] += 1;
            for j in 0..3 {
                centroids[k][j] += x[[i, j]];
            }
        }
        for k in 0..2 {
            for j in 0..3 {
                centroids[k][j] /= counts[k] as f64;
            }
        }
        let mut agree = 0;
        for i in 0..n {
            let d = |k: usize| -> f64 {
                (0..3).map(|j| (x[[i, j]] - centroids[k][j]).powi(2)).sum()
            };
            let nc = d(1) < d(0);
            if m.predict(x.row(i)) == nc {
                agree += 1;
            }
        }
        assert!(agree as f64 >= 0.95 * n as f64, "agreement {agree}/{n}");
    }

    #[test]
    fn training_is_deterministic() {
        let (x, y) = blobs(25, 4);
        let p = SvmParams::default();
        let a = train(x.view(), &y, &p).unwrap();
        let b = train(x.view(), &y, &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_single_class_and_bad_shapes() {
        let x = Array2::<f64>::zeros((3, 2));
        assert!(train(x.view(), &[true, true, true], &SvmParams::default()).is_err());
        assert!(train(x.view(), &[true, false], &SvmParams::default()).is_err());
    }
}
