//! Cohort-partitioned data, the joint least-squares loss and its gradients.
//!
//! Every loss evaluation goes through [`MomentCache`]: the per-cohort second
//! moments `Γ⁽ʲ⁾ = XⱼᵀXⱼ / nⱼ` and `γ⁽ʲ⁾ = Xⱼᵀyⱼ / nⱼ`. Each cohort is
//! normalized by its own sample count, so unbalanced cohorts need no special
//! handling.

use std::fmt;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regularizers::Penalty;
use crate::Scalar;

fn ensure_finite<'a, T: Scalar>(
    values: impl IntoIterator<Item = &'a T>,
    what: &str,
) -> Result<()> {
    if values.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} contains NaN or infinite entries")))
    }
}

/// Sorted set of selected covariate indices within `0..p`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SupportSet {
    indices: Vec<usize>,
    p: usize,
}

impl SupportSet {
    pub fn new(indices: impl IntoIterator<Item = usize>, p: usize) -> Result<Self> {
        let mut indices: Vec<usize> = indices.into_iter().collect();
        indices.sort_unstable();
        indices.dedup();
        if let Some(&last) = indices.last() {
            if last >= p {
                return Err(Error::invalid(format!(
                    "support index {last} out of range for p = {p}"
                )));
            }
        }
        Ok(Self { indices, p })
    }

    pub fn empty(p: usize) -> Self {
        Self { indices: Vec::new(), p }
    }

    pub fn full(p: usize) -> Self {
        Self {
            indices: (0..p).collect(),
            p,
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn ambient_dim(&self) -> usize {
        self.p
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }

    pub fn union(&self, other: &SupportSet) -> SupportSet {
        let p = self.p.max(other.p);
        let mut indices = self.indices.clone();
        indices.extend_from_slice(&other.indices);
        indices.sort_unstable();
        indices.dedup();
        SupportSet { indices, p }
    }

    pub fn intersection_len(&self, other: &SupportSet) -> usize {
        self.indices.iter().filter(|i| other.contains(**i)).count()
    }

    /// Jaccard similarity; two empty sets count as identical.
    pub fn jaccard(&self, other: &SupportSet) -> f64 {
        let inter = self.intersection_len(other);
        let union = self.len() + other.len() - inter;
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

impl fmt::Display for SupportSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.indices.iter().map(|i| i.to_string()).collect();
        write!(f, "{{{}}}", parts.join(","))
    }
}

/// The `p × q` coefficient matrix: row `i` holds covariate `i` across the `q`
/// treatments.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientMatrix<T> {
    values: Array2<T>,
}

impl<T: Scalar> CoefficientMatrix<T> {
    pub fn zeros(p: usize, q: usize) -> Self {
        Self {
            values: Array2::zeros((p, q)),
        }
    }

    pub fn from_array(values: Array2<T>) -> Result<Self> {
        ensure_finite(values.iter(), "coefficient matrix")?;
        Ok(Self { values })
    }

    /// Wraps without the finiteness check; used on solver outputs that are
    /// checked separately.
    pub(crate) fn from_array_unchecked(values: Array2<T>) -> Self {
        Self { values }
    }

    pub fn p(&self) -> usize {
        self.values.nrows()
    }

    pub fn q(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> ArrayView2<'_, T> {
        self.values.view()
    }

    pub fn into_inner(self) -> Array2<T> {
        self.values
    }

    pub fn column(&self, j: usize) -> ArrayView1<'_, T> {
        self.values.column(j)
    }

    pub fn row_norm(&self, i: usize) -> T {
        l2(self.values.row(i))
    }

    pub fn row_norms(&self) -> Array1<T> {
        self.values.rows().into_iter().map(l2).collect()
    }

    /// `‖θ‖_{1,2}`: sum of row 2-norms.
    pub fn norm_12(&self) -> T {
        self.values.rows().into_iter().map(l2).sum()
    }

    /// `‖θ‖_{∞,2}`: largest row 2-norm.
    pub fn norm_inf2(&self) -> T {
        self.values
            .rows()
            .into_iter()
            .map(l2)
            .fold(T::zero(), T::max)
    }

    /// Largest absolute entry.
    pub fn norm_inf_inf(&self) -> T {
        self.values.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn frobenius(&self) -> T {
        self.values.iter().map(|v| *v * *v).sum::<T>().sqrt()
    }

    /// Rows with nonzero 2-norm. Zero means exactly zero.
    pub fn support(&self) -> SupportSet {
        let idx = self
            .values
            .rows()
            .into_iter()
            .enumerate()
            .filter(|(_, r)| r.iter().any(|v| *v != T::zero()))
            .map(|(i, _)| i);
        SupportSet::new(idx, self.p()).expect("indices within range")
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.values.dim() != other.values.dim() {
            return Err(Error::dims("coefficient matrices differ in shape"));
        }
        Ok(Self {
            values: &self.values - &other.values,
        })
    }
}

pub(crate) fn l2<T: Scalar>(v: ArrayView1<'_, T>) -> T {
    v.iter().map(|x| *x * *x).sum::<T>().sqrt()
}

/// Design matrix and outcome vector for one treatment level.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort<T> {
    pub design: Array2<T>,
    pub outcome: Array1<T>,
}

/// Observational data split into `q ≥ 2` treatment cohorts sharing `p` covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortDataset<T> {
    cohorts: Vec<Cohort<T>>,
    p: usize,
}

impl<T: Scalar> CohortDataset<T> {
    pub fn new(cohorts: Vec<Cohort<T>>) -> Result<Self> {
        if cohorts.len() < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 treatment cohorts, got {}",
                cohorts.len()
            )));
        }
        let p = cohorts[0].design.ncols();
        if p == 0 {
            return Err(Error::invalid("covariate dimension must be at least 1"));
        }
        for (j, c) in cohorts.iter().enumerate() {
            if c.design.ncols() != p {
                return Err(Error::dims(format!(
                    "cohort {j} has {} covariates, expected {p}",
                    c.design.ncols()
                )));
            }
            if c.design.nrows() == 0 {
                return Err(Error::invalid(format!("cohort {j} is empty")));
            }
            if c.design.nrows() != c.outcome.len() {
                return Err(Error::dims(format!(
                    "cohort {j}: {} design rows but {} outcomes",
                    c.design.nrows(),
                    c.outcome.len()
                )));
            }
            ensure_finite(c.design.iter(), &format!("cohort {j} design"))?;
            ensure_finite(c.outcome.iter(), &format!("cohort {j} outcome"))?;
        }
        Ok(Self { cohorts, p })
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.cohorts.len()
    }

    pub fn cohort(&self, j: usize) -> &Cohort<T> {
        &self.cohorts[j]
    }

    pub fn cohorts(&self) -> &[Cohort<T>] {
        &self.cohorts
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.cohorts.iter().map(|c| c.outcome.len()).collect()
    }

    pub fn min_cohort_size(&self) -> usize {
        self.sizes().into_iter().min().unwrap_or(0)
    }
}

/// Pooled observational sample before the split by treatment.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledDataset<T> {
    covariates: Array2<T>,
    treatment: Vec<usize>,
    outcome: Array1<T>,
    q: usize,
    covariate_names: Vec<String>,
    treatment_labels: Vec<String>,
}

impl<T: Scalar> PooledDataset<T> {
    /// Builds a pooled dataset with `q` declared treatment levels.
    ///
    /// Labels must lie in `0..q`; whether every level is present is checked
    /// when the data is partitioned.
    pub fn new(
        covariates: Array2<T>,
        treatment: Vec<usize>,
        outcome: Array1<T>,
        q: usize,
    ) -> Result<Self> {
        let n = covariates.nrows();
        if treatment.len() != n || outcome.len() != n {
            return Err(Error::dims(format!(
                "{n} covariate rows, {} treatments, {} outcomes",
                treatment.len(),
                outcome.len()
            )));
        }
        if q < 2 {
            return Err(Error::invalid("need at least 2 treatment levels"));
        }
        if covariates.ncols() == 0 {
            return Err(Error::invalid("covariate dimension must be at least 1"));
        }
        if let Some(bad) = treatment.iter().find(|t| **t >= q) {
            return Err(Error::invalid(format!(
                "treatment label {bad} outside 0..{q}"
            )));
        }
        ensure_finite(covariates.iter(), "covariates")?;
        ensure_finite(outcome.iter(), "outcome")?;
        let covariate_names = (0..covariates.ncols()).map(|i| format!("x{i}")).collect();
        let treatment_labels = (0..q).map(|t| t.to_string()).collect();
        Ok(Self {
            covariates,
            treatment,
            outcome,
            q,
            covariate_names,
            treatment_labels,
        })
    }

    pub fn with_names(mut self, covariate_names: Vec<String>) -> Result<Self> {
        if covariate_names.len() != self.p() {
            return Err(Error::dims("one name per covariate column required"));
        }
        self.covariate_names = covariate_names;
        Ok(self)
    }

    pub fn with_treatment_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.q {
            return Err(Error::dims("one label per treatment level required"));
        }
        self.treatment_labels = labels;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.covariates.nrows()
    }

    pub fn p(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn covariates(&self) -> ArrayView2<'_, T> {
        self.covariates.view()
    }

    pub fn treatment(&self) -> &[usize] {
        &self.treatment
    }

    pub fn outcome(&self) -> ArrayView1<'_, T> {
        self.outcome.view()
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn treatment_labels(&self) -> &[String] {
        &self.treatment_labels
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.q];
        for &t in &self.treatment {
            counts[t] += 1;
        }
        counts
    }

    /// Column means of the covariates.
    pub fn covariate_means(&self) -> Array1<T> {
        self.covariates
            .mean_axis(Axis(0))
            .unwrap_or_else(|| Array1::zeros(self.p()))
    }

    /// Row subset in the given order; metadata is carried over.
    pub fn subset_rows(&self, rows: &[usize]) -> Self {
        Self {
            covariates: self.covariates.select(Axis(0), rows),
            treatment: rows.iter().map(|&r| self.treatment[r]).collect(),
            outcome: self.outcome.select(Axis(0), rows),
            q: self.q,
            covariate_names: self.covariate_names.clone(),
            treatment_labels: self.treatment_labels.clone(),
        }
    }

    /// Appends a constant column named `(intercept)`.
    pub fn with_intercept_column(&self) -> Self {
        let n = self.n();
        let p = self.p();
        let mut cov = Array2::<T>::ones((n, p + 1));
        cov.slice_mut(s![.., ..p]).assign(&self.covariates);
        let mut names = self.covariate_names.clone();
        names.push("(intercept)".to_string());
        Self {
            covariates: cov,
            treatment: self.treatment.clone(),
            outcome: self.outcome.clone(),
            q: self.q,
            covariate_names: names,
            treatment_labels: self.treatment_labels.clone(),
        }
    }

    /// Splits rows by treatment label, preserving row order within each cohort.
    pub fn partition_by_treatment(&self) -> Result<CohortDataset<T>> {
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); self.q];
        for (i, &t) in self.treatment.iter().enumerate() {
            rows[t].push(i);
        }
        if let Some(absent) = rows.iter().position(|r| r.is_empty()) {
            return Err(Error::MissingLabel(absent));
        }
        let cohorts = rows
            .iter()
            .map(|r| Cohort {
                design: self.covariates.select(Axis(0), r),
                outcome: self.outcome.select(Axis(0), r),
            })
            .collect();
        CohortDataset::new(cohorts)
    }
}

/// Free-function form of [`PooledDataset::partition_by_treatment`].
pub fn partition_by_treatment<T: Scalar>(data: &PooledDataset<T>) -> Result<CohortDataset<T>> {
    data.partition_by_treatment()
}

/// Per-cohort second moments `Γ⁽ʲ⁾` and `γ⁽ʲ⁾`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentCache<T> {
    gram: Vec<Array2<T>>,
    cross: Vec<Array1<T>>,
    p: usize,
}

impl<T: Scalar> MomentCache<T> {
    /// Builds a cache from precomputed moments. Any `q ≥ 1` is accepted so that
    /// single-column problems can reuse the solver.
    pub fn from_parts(gram: Vec<Array2<T>>, cross: Vec<Array1<T>>) -> Result<Self> {
        if gram.is_empty() || gram.len() != cross.len() {
            return Err(Error::dims("gram and cross moment lists must be nonempty and equal length"));
        }
        let p = cross[0].len();
        for (g, c) in gram.iter().zip(&cross) {
            if g.dim() != (p, p) || c.len() != p {
                return Err(Error::dims("moment shapes disagree"));
            }
            ensure_finite(g.iter(), "gram moment")?;
            ensure_finite(c.iter(), "cross moment")?;
        }
        Ok(Self { gram, cross, p })
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.gram.len()
    }

    pub fn gram(&self, j: usize) -> ArrayView2<'_, T> {
        self.gram[j].view()
    }

    pub fn cross(&self, j: usize) -> ArrayView1<'_, T> {
        self.cross[j].view()
    }

    /// The cross moments as a `p × q` matrix.
    pub fn cross_matrix(&self) -> Array2<T> {
        let mut m = Array2::zeros((self.p, self.q()));
        for (j, c) in self.cross.iter().enumerate() {
            m.column_mut(j).assign(c);
        }
        m
    }

    /// Single-cohort cache for column `j`.
    pub fn column(&self, j: usize) -> MomentCache<T> {
        MomentCache {
            gram: vec![self.gram[j].clone()],
            cross: vec![self.cross[j].clone()],
            p: self.p,
        }
    }

    /// Columns `Γ⁽ʲ⁾ θ:ⱼ` stacked into a `p × q` matrix.
    pub(crate) fn gram_product(&self, theta: ArrayView2<'_, T>) -> Array2<T> {
        let mut out = Array2::zeros((self.p, self.q()));
        for (j, g) in self.gram.iter().enumerate() {
            out.column_mut(j).assign(&g.dot(&theta.column(j)));
        }
        out
    }

    pub(crate) fn check_theta(&self, theta: &CoefficientMatrix<T>) -> Result<()> {
        if theta.p() != self.p || theta.q() != self.q() {
            return Err(Error::dims(format!(
                "θ is {}×{}, moments are for p = {}, q = {}",
                theta.p(),
                theta.q(),
                self.p,
                self.q()
            )));
        }
        Ok(())
    }

    /// Loss from a precomputed `Γθ` product.
    pub(crate) fn loss_with_product(&self, theta: ArrayView2<'_, T>, gtheta: ArrayView2<'_, T>) -> T {
        let half = T::lit(0.5);
        let mut total = T::zero();
        for j in 0..self.q() {
            let col = theta.column(j);
            total = total + half * col.dot(&gtheta.column(j)) - self.cross[j].dot(&col);
        }
        total
    }

    /// Gradient from a precomputed `Γθ` product.
    pub(crate) fn grad_with_product(&self, gtheta: &Array2<T>) -> Array2<T> {
        let mut g = gtheta.clone();
        for (j, c) in self.cross.iter().enumerate() {
            Zip::from(g.column_mut(j)).and(c).for_each(|a, &b| *a = *a - b);
        }
        g
    }
}

/// Computes `Γ⁽ʲ⁾ = XⱼᵀXⱼ/nⱼ` (exactly symmetric) and `γ⁽ʲ⁾ = Xⱼᵀyⱼ/nⱼ`.
pub fn compute_moments<T: Scalar>(data: &CohortDataset<T>) -> MomentCache<T> {
    let mut gram = Vec::with_capacity(data.q());
    let mut cross = Vec::with_capacity(data.q());
    for c in data.cohorts() {
        let n = T::from_usize(c.outcome.len()).unwrap();
        let mut g = c.design.t().dot(&c.design) / n;
        symmetrize(&mut g);
        gram.push(g);
        cross.push(c.design.t().dot(&c.outcome) / n);
    }
    MomentCache {
        gram,
        cross,
        p: data.p(),
    }
}

/// Copies the upper triangle onto the lower one.
fn symmetrize<T: Scalar>(g: &mut Array2<T>) {
    let p = g.nrows();
    for i in 0..p {
        for j in (i + 1)..p {
            g[[j, i]] = g[[i, j]];
        }
    }
}

/// `Σⱼ [½ θ:ⱼᵀ Γ⁽ʲ⁾ θ:ⱼ − γ⁽ʲ⁾ᵀ θ:ⱼ]`.
pub fn loss<T: Scalar>(theta: &CoefficientMatrix<T>, cache: &MomentCache<T>) -> Result<T> {
    cache.check_theta(theta)?;
    let gt = cache.gram_product(theta.values());
    Ok(cache.loss_with_product(theta.values(), gt.view()))
}

/// Column `j` is `Γ⁽ʲ⁾ θ:ⱼ − γ⁽ʲ⁾`.
pub fn grad_loss<T: Scalar>(
    theta: &CoefficientMatrix<T>,
    cache: &MomentCache<T>,
) -> Result<CoefficientMatrix<T>> {
    cache.check_theta(theta)?;
    let gt = cache.gram_product(theta.values());
    Ok(CoefficientMatrix::from_array_unchecked(cache.grad_with_product(&gt)))
}

/// Row `i` of the correction subtracted from the loss gradient in the shifted
/// objective: `θᵢ: · q′(‖θᵢ:‖)/‖θᵢ:‖`, zero for zero rows.
pub(crate) fn shift_correction<T: Scalar, P: Penalty<T> + ?Sized>(
    theta: ArrayView2<'_, T>,
    reg: &P,
) -> Result<Array2<T>> {
    let mut v = Array2::zeros(theta.raw_dim());
    for (i, row) in theta.rows().into_iter().enumerate() {
        let norm = l2(row);
        if norm > T::zero() {
            let scale = reg.q_prime(norm)? / norm;
            Zip::from(v.row_mut(i)).and(row).for_each(|o, &x| *o = x * scale);
        }
    }
    Ok(v)
}

/// Gradient of `ℒₙ(θ) − Σᵢ q_λ(‖θᵢ:‖₂)`; errors for penalties without a
/// shifted component (L1).
pub fn grad_shifted_loss<T: Scalar, P: Penalty<T> + ?Sized>(
    theta: &CoefficientMatrix<T>,
    cache: &MomentCache<T>,
    reg: &P,
) -> Result<CoefficientMatrix<T>> {
    if !reg.has_shift() {
        return Err(Error::NoShiftedForm);
    }
    let g = grad_loss(theta, cache)?;
    let v = shift_correction(theta.values(), reg)?;
    Ok(CoefficientMatrix::from_array_unchecked(g.into_inner() - v))
}
