//! Ridge-penalized multinomial logistic regression by gradient ascent.
//!
//! Class 0 is the reference: its scores are fixed at zero, so the free
//! parameters are the `d × (q−1)` weights and `q−1` intercepts.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::linalg::power_max_eigenvalue;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogitOptions<T> {
    /// Coefficient of `½‖W‖²` subtracted from the mean log-likelihood.
    pub ridge: T,
    pub max_iters: usize,
    /// Stop once the gradient 2-norm falls to this value.
    pub tol: T,
}

impl<T: Scalar> Default for LogitOptions<T> {
    fn default() -> Self {
        Self {
            ridge: T::lit(1e-3),
            max_iters: 10_000,
            tol: T::lit(1e-6),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogitFit<T> {
    /// `d × q`; column 0 is identically zero.
    pub weights: Array2<T>,
    /// Length `q`; entry 0 is zero.
    pub intercepts: Array1<T>,
    pub iterations: usize,
    pub grad_norm: T,
}

/// Softmax of `b + Wᵀx`.
pub fn class_probabilities<T: Scalar>(
    x: ArrayView1<'_, T>,
    weights: ArrayView2<'_, T>,
    intercepts: ArrayView1<'_, T>,
) -> Vec<T> {
    let mut scores: Vec<T> = (0..intercepts.len())
        .map(|c| intercepts[c] + weights.column(c).dot(&x))
        .collect();
    softmax(&mut scores);
    scores
}

fn softmax<T: Scalar>(v: &mut [T]) {
    let m = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        total = total + *x;
    }
    for x in v.iter_mut() {
        *x = *x / total;
    }
}

struct Evaluation<T> {
    objective: T,
    grad: Array2<T>,
}

/// Parameters are stored as a `(d+1) × q` matrix whose first row holds the
/// intercepts and whose column 0 stays zero.
fn evaluate<T: Scalar>(
    xt: &Array2<T>,
    labels: &[usize],
    params: &Array2<T>,
    ridge: T,
) -> Evaluation<T> {
    let n = T::from_usize(xt.nrows()).unwrap();
    let mut scores = xt.dot(params);
    let mut loglik = T::zero();
    for (mut row, &t) in scores.rows_mut().into_iter().zip(labels) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + row.iter().map(|s| (*s - m).exp()).sum::<T>().ln();
        loglik = loglik + row[t] - lse;
        row.mapv_inplace(|s| (s - lse).exp());
    }
    // scores now hold probabilities; residual = onehot − prob
    for (mut row, &t) in scores.rows_mut().into_iter().zip(labels) {
        row.mapv_inplace(|v| -v);
        row[t] = row[t] + T::one();
    }
    let mut grad = xt.t().dot(&scores) / n;
    let weights = params.slice(s![1.., ..]);
    let mut penalty = T::zero();
    for ((i, j), w) in weights.indexed_iter() {
        penalty = penalty + *w * *w;
        grad[[i + 1, j]] = grad[[i + 1, j]] - ridge * *w;
    }
    grad.column_mut(0).fill(T::zero());
    Evaluation {
        objective: loglik / n - T::lit(0.5) * ridge * penalty,
        grad,
    }
}

fn frob<T: Scalar>(a: &Array2<T>) -> T {
    a.iter().map(|v| *v * *v).sum::<T>().sqrt()
}

/// Maximizes the ridge-penalized mean log-likelihood.
pub fn fit_multinomial<T: Scalar>(
    x: ArrayView2<'_, T>,
    labels: &[usize],
    q: usize,
    opts: &LogitOptions<T>,
) -> Result<LogitFit<T>> {
    let (n, d) = x.dim();
    if labels.len() != n || n == 0 {
        return Err(Error::dims("one label per row required"));
    }
    if q < 2 || labels.iter().any(|t| *t >= q) {
        return Err(Error::invalid("labels must lie in 0..q with q ≥ 2"));
    }
    if !(opts.ridge >= T::zero()) {
        return Err(Error::invalid("ridge must be nonnegative"));
    }
    let mut xt = Array2::<T>::ones((n, d + 1));
    xt.slice_mut(s![.., 1..]).assign(&x);

    // Softmax Hessian is bounded by ½ I, so ½ λ_max(X̃ᵀX̃/n) + ridge bounds curvature.
    let gram = xt.t().dot(&xt) / T::from_usize(n).unwrap();
    let lipschitz = T::lit(0.5) * power_max_eigenvalue(gram.view(), 50) * T::lit(1.1) + opts.ridge;
    let mut step = T::one() / lipschitz.max(T::lit(1e-12));

    let mut params = Array2::<T>::zeros((d + 1, q));
    let mut eval = evaluate(&xt, labels, &params, opts.ridge);
    let mut grad_norm = frob(&eval.grad);
    let mut iterations = 0;
    while iterations < opts.max_iters {
        if grad_norm <= opts.tol {
            break;
        }
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!("logistic gradient at iteration {iterations}")));
        }
        iterations += 1;
        // Armijo backtracking from a step that is allowed to grow.
        step = step * T::lit(2.0);
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &params + &(&eval.grad * step);
            let next = evaluate(&xt, labels, &cand, opts.ridge);
            if next.objective >= eval.objective + T::lit(0.5) * step * grad_norm * grad_norm {
                params = cand;
                eval = next;
                accepted = true;
                break;
            }
            step = step * T::lit(0.5);
        }
        grad_norm = frob(&eval.grad);
        if !accepted {
            break;
        }
    }
    if !(grad_norm <= opts.tol) {
        return Err(Error::no_convergence(format!(
            "multinomial logistic fit stopped after {iterations} iterations with gradient norm {grad_norm}"
        )));
    }
    Ok(LogitFit {
        intercepts: params.row(0).to_owned(),
        weights: params.slice(s![1.., ..]).to_owned(),
        iterations,
        grad_norm,
    })
}

/// Column means and standard deviations (zero deviation mapped to 1).
pub(crate) fn column_scaling<T: Scalar>(x: ArrayView2<'_, T>) -> (Array1<T>, Array1<T>) {
    let n = T::from_usize(x.nrows().max(1)).unwrap();
    let mean = x.sum_axis(Axis(0)) / n;
    let mut sd = Array1::<T>::zeros(x.ncols());
    for (j, col) in x.columns().into_iter().enumerate() {
        let v = col.iter().map(|a| (*a - mean[j]) * (*a - mean[j])).sum::<T>() / n;
        sd[j] = if v > T::zero() { v.sqrt() } else { T::one() };
    }
    (mean, sd)
}

/// Fits on standardized columns and maps the coefficients back to raw scale.
pub fn fit_multinomial_scaled<T: Scalar>(
    x: ArrayView2<'_, T>,
    labels: &[usize],
    q: usize,
    opts: &LogitOptions<T>,
) -> Result<LogitFit<T>> {
    let (mean, sd) = column_scaling(x);
    let z = (&x - &mean) / &sd;
    let mut fit = fit_multinomial(z.view(), labels, q, opts)?;
    for c in 0..q {
        let mut shift = T::zero();
        for i in 0..x.ncols() {
            fit.weights[[i, c]] = fit.weights[[i, c]] / sd[i];
            shift = shift + fit.weights[[i, c]] * mean[i];
        }
        fit.intercepts[c] = fit.intercepts[c] - shift;
    }
    Ok(fit)
}
