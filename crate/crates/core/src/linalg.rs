//! Small dense helpers: Cholesky solves and power iteration.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::Scalar;

/// Cholesky factor `L` (lower) of a symmetric positive definite matrix.
///
/// Returns `None` when a pivot falls below `n * eps * max_diag`, which is how
/// singular or numerically rank-deficient Gram matrices are reported.
pub fn cholesky<T: Scalar>(a: ArrayView2<T>) -> Option<Array2<T>> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let max_diag = (0..n).map(|i| a[[i, i]].abs()).fold(T::zero(), T::max);
    let floor = T::from_usize(n.max(1)).unwrap() * T::epsilon() * max_diag.max(T::min_positive_value());
    let mut l = Array2::<T>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d = d - l[[j, k]] * l[[j, k]];
        }
        if !(d > floor) {
            return None;
        }
        let djj = d.sqrt();
        l[[j, j]] = djj;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s = s - l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / djj;
        }
    }
    Some(l)
}

/// Solves `L Lᵀ x = b` given the lower Cholesky factor.
pub fn cholesky_solve<T: Scalar>(l: ArrayView2<T>, b: ArrayView1<T>) -> Array1<T> {
    let n = l.nrows();
    let mut y = Array1::<T>::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s = s - l[[i, k]] * y[k];
        }
        y[i] = s / l[[i, i]];
    }
    let mut x = Array1::<T>::zeros(n);
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s = s - l[[k, i]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Solves a symmetric positive definite system, `None` if singular.
pub fn solve_spd<T: Scalar>(a: ArrayView2<T>, b: ArrayView1<T>) -> Option<Array1<T>> {
    let l = cholesky(a)?;
    Some(cholesky_solve(l.view(), b))
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration from the
/// all-ones vector.
pub fn power_max_eigenvalue<T: Scalar>(a: ArrayView2<T>, iters: usize) -> T {
    let n = a.nrows();
    if n == 0 {
        return T::zero();
    }
    let mut v = Array1::<T>::from_elem(n, T::one() / T::from_usize(n).unwrap().sqrt());
    let mut estimate = T::zero();
    for _ in 0..iters {
        let w = a.dot(&v);
        let norm = w.dot(&w).sqrt();
        if !(norm > T::zero()) {
            // All-ones direction lies in the null space; fall back to the diagonal bound.
            return (0..n).map(|i| a[[i, i]]).fold(T::zero(), T::max);
        }
        estimate = v.dot(&w);
        v = w / norm;
    }
    estimate
}
