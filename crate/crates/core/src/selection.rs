//! Support selection: regularization paths, cross-validation and baselines.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logistic::{column_scaling, fit_multinomial, LogitOptions};
use crate::model::{compute_moments, Cohort, CoefficientMatrix, CohortDataset, MomentCache, PooledDataset};
use crate::prox::{fit_moments, InitialIterate, SolverConfig};
use crate::regularizers::{PenaltyKind, RegularizerSpec};
use crate::rng::stream;
use crate::{Scalar, SupportSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum SelectionMode {
    /// Row-norm penalty shared across cohorts.
    Joint,
    /// Scalar penalty per cohort; the support is the union over cohorts.
    Independent,
    /// Top covariates by multinomial treatment-model coefficient magnitude.
    TreatmentRegression { top_m: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum LambdaGrid<T> {
    /// Strictly decreasing positive values.
    Explicit(Vec<T>),
    /// `count` log-spaced values from the smallest λ giving an empty fit down
    /// to `min_ratio` times that.
    Auto { count: usize, min_ratio: T },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CvPolicy {
    /// K-fold cross-validation, stratified by cohort.
    Folds(usize),
    /// Use the first grid value.
    FirstValue,
}

/// How the cross-validated λ is read off the score curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CvRule {
    /// Largest λ whose score is within one fold standard error of the minimum.
    #[default]
    OneStandardError,
    /// The minimizing λ.
    Minimum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionConfig<T> {
    pub mode: SelectionMode,
    pub lambda_grid: LambdaGrid<T>,
    pub cv: CvPolicy,
    pub cv_rule: CvRule,
    pub penalty: PenaltyKind,
    /// Concavity parameter; `None` uses the penalty's conventional default.
    pub gamma: Option<T>,
    pub solver: SolverConfig<T>,
    pub seed: u64,
    /// Center each cohort and scale covariates to unit pooled variance before fitting.
    pub standardize: bool,
    /// Ridge weight for the treatment-regression baseline.
    pub treatment_ridge: T,
}

impl<T: Scalar> Default for SelectionConfig<T> {
    fn default() -> Self {
        Self {
            mode: SelectionMode::Joint,
            lambda_grid: LambdaGrid::Auto {
                count: 30,
                min_ratio: T::lit(0.01),
            },
            cv: CvPolicy::Folds(5),
            cv_rule: CvRule::OneStandardError,
            penalty: PenaltyKind::Mcp,
            gamma: None,
            solver: SolverConfig::default(),
            seed: 0,
            standardize: true,
            treatment_ridge: T::lit(1e-3),
        }
    }
}

impl<T: Scalar> SelectionConfig<T> {
    /// A single fixed λ, no cross-validation.
    pub fn fixed(mode: SelectionMode, lambda: T) -> Self {
        Self {
            mode,
            lambda_grid: LambdaGrid::Explicit(vec![lambda]),
            cv: CvPolicy::FirstValue,
            ..Self::default()
        }
    }

    pub fn regularizer(&self, lambda: T) -> Result<RegularizerSpec<T>> {
        let gamma = self.gamma.unwrap_or_else(|| T::lit(self.penalty.default_gamma()));
        RegularizerSpec::new(self.penalty, lambda, gamma)
    }

    fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        self.regularizer(T::one())?;
        if let CvPolicy::Folds(k) = self.cv {
            if k < 2 {
                return Err(Error::invalid("cross-validation needs at least 2 folds"));
            }
        }
        match &self.lambda_grid {
            LambdaGrid::Explicit(v) => {
                if v.is_empty() {
                    return Err(Error::invalid("lambda grid is empty"));
                }
                if v.iter().any(|l| !(*l > T::zero()) || !l.is_finite()) {
                    return Err(Error::invalid("lambda grid values must be finite and positive"));
                }
                if v.windows(2).any(|w| !(w[1] < w[0])) {
                    return Err(Error::invalid("lambda grid must be strictly decreasing"));
                }
            }
            LambdaGrid::Auto { count, min_ratio } => {
                if *count == 0 {
                    return Err(Error::invalid("lambda grid is empty"));
                }
                if !(*min_ratio > T::zero() && *min_ratio < T::one()) {
                    return Err(Error::invalid("grid ratio must lie in (0, 1)"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult<T> {
    pub support: SupportSet,
    /// `None` for the treatment-regression baseline.
    pub chosen_lambda: Option<T>,
    /// `(λ, mean held-out squared error)` for each grid value.
    pub cv_table: Vec<(T, T)>,
    /// Independent mode only.
    pub per_cohort_supports: Option<Vec<SupportSet>>,
    /// Fitted coefficients on the original covariate scale.
    pub theta: CoefficientMatrix<T>,
    pub lambda_grid: Vec<T>,
    pub converged: bool,
}

/// Per-cohort centering and pooled scaling of the covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardization<T> {
    pub scales: Array1<T>,
}

impl<T: Scalar> Standardization<T> {
    /// Centers each cohort's covariates and outcome, then divides covariates by
    /// their pooled within-cohort standard deviation (1 for constant columns).
    pub fn apply(data: &CohortDataset<T>) -> (CohortDataset<T>, Self) {
        let p = data.p();
        let mut centered: Vec<Cohort<T>> = data
            .cohorts()
            .iter()
            .map(|c| {
                let n = T::from_usize(c.design.nrows()).unwrap();
                let mean = c.design.sum_axis(Axis(0)) / n;
                let ymean = c.outcome.sum() / n;
                Cohort {
                    design: &c.design - &mean,
                    outcome: c.outcome.mapv(|y| y - ymean),
                }
            })
            .collect();
        let total = T::from_usize(data.sizes().iter().sum()).unwrap();
        let mut scales = Array1::<T>::zeros(p);
        for c in &centered {
            for row in c.design.rows() {
                for i in 0..p {
                    scales[i] = scales[i] + row[i] * row[i];
                }
            }
        }
        scales.mapv_inplace(|v| {
            let sd = (v / total).sqrt();
            if sd > T::zero() {
                sd
            } else {
                T::one()
            }
        });
        for c in &mut centered {
            c.design = &c.design / &scales;
        }
        let out = CohortDataset::new(centered).expect("standardization preserves validity");
        (out, Self { scales })
    }

    pub fn identity(p: usize) -> Self {
        Self {
            scales: Array1::ones(p),
        }
    }

    /// Maps coefficients fitted on standardized covariates back to raw scale.
    pub fn unscale(&self, theta: &Array2<T>) -> Array2<T> {
        let mut out = theta.clone();
        for (mut row, s) in out.rows_mut().into_iter().zip(self.scales.iter()) {
            row.mapv_inplace(|v| v / *s);
        }
        out
    }
}

/// Smallest λ for which zero is a fixed point of the solver, padded by a few
/// ulps' worth so that rounding in the threshold cannot leave a row alive.
pub fn lambda_max<T: Scalar>(cache: &MomentCache<T>, mode: SelectionMode) -> T {
    let cross = cache.cross_matrix();
    let pad = T::one() + T::epsilon() * T::lit(64.0);
    pad * match mode {
        SelectionMode::Independent => cross.iter().fold(T::zero(), |m, v| m.max(v.abs())),
        _ => cross
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt())
            .fold(T::zero(), T::max),
    }
}

fn resolve_grid<T: Scalar>(cfg: &SelectionConfig<T>, cache: &MomentCache<T>) -> Result<Vec<T>> {
    match &cfg.lambda_grid {
        LambdaGrid::Explicit(v) => Ok(v.clone()),
        LambdaGrid::Auto { count, min_ratio } => {
            let top = lambda_max(cache, cfg.mode);
            if !(top > T::zero()) {
                return Err(Error::Data(
                    "outcome is uncorrelated with every covariate; supply an explicit lambda grid".into(),
                ));
            }
            if *count == 1 {
                return Ok(vec![top]);
            }
            let last = T::from_usize(count - 1).unwrap();
            Ok((0..*count)
                .map(|i| top * min_ratio.powf(T::from_usize(i).unwrap() / last))
                .collect())
        }
    }
}

struct PathPoint<T> {
    theta: Array2<T>,
    converged: bool,
    trace: Vec<f64>,
    per_cohort: Option<Vec<SupportSet>>,
}

/// Warm-started fits down `grid`.
fn solve_path<T: Scalar>(
    cache: &MomentCache<T>,
    cfg: &SelectionConfig<T>,
    grid: &[T],
) -> Result<Vec<PathPoint<T>>> {
    let (p, q) = (cache.p(), cache.q());
    match cfg.mode {
        SelectionMode::Joint => {
            let mut solver = cfg.solver.resolved(cache)?;
            let mut out = Vec::with_capacity(grid.len());
            for &lambda in grid {
                let fit = fit_moments(cache, &cfg.regularizer(lambda)?, &solver)?;
                solver.init = InitialIterate::Given(fit.theta_hat.clone());
                out.push(PathPoint {
                    theta: fit.theta_hat.into_inner(),
                    converged: fit.converged,
                    trace: fit.objective_trace.iter().map(|v| v.as_f64()).collect(),
                    per_cohort: None,
                });
            }
            Ok(out)
        }
        SelectionMode::Independent => {
            let mut out: Vec<PathPoint<T>> = grid
                .iter()
                .map(|_| PathPoint {
                    theta: Array2::zeros((p, q)),
                    converged: true,
                    trace: Vec::new(),
                    per_cohort: Some(Vec::with_capacity(q)),
                })
                .collect();
            for j in 0..q {
                let col = cache.column(j);
                let mut solver = cfg.solver.resolved(&col)?;
                for (k, &lambda) in grid.iter().enumerate() {
                    let fit = fit_moments(&col, &cfg.regularizer(lambda)?, &solver)?;
                    let point = &mut out[k];
                    point.theta.column_mut(j).assign(&fit.theta_hat.column(0));
                    point.converged &= fit.converged;
                    point.trace.extend(fit.objective_trace.iter().map(|v| v.as_f64()));
                    point.per_cohort.as_mut().unwrap().push(fit.support.clone());
                    solver.init = InitialIterate::Given(fit.theta_hat);
                }
            }
            Ok(out)
        }
        SelectionMode::TreatmentRegression { .. } => Err(Error::invalid(
            "treatment-regression selection needs pooled data; use select_pooled",
        )),
    }
}

/// Cohort-stratified fold assignment: a seeded shuffle per cohort, then
/// position modulo `k`.
pub fn fold_assignment(sizes: &[usize], k: usize, seed: u64) -> Vec<Vec<usize>> {
    sizes
        .iter()
        .enumerate()
        .map(|(j, &n)| {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut stream(seed, j as u64));
            let mut folds = vec![0; n];
            for (pos, &row) in order.iter().enumerate() {
                folds[row] = pos % k;
            }
            folds
        })
        .collect()
}

fn split_cohort<T: Scalar>(c: &Cohort<T>, folds: &[usize], f: usize) -> (Cohort<T>, Cohort<T>) {
    let train: Vec<usize> = (0..folds.len()).filter(|i| folds[*i] != f).collect();
    let test: Vec<usize> = (0..folds.len()).filter(|i| folds[*i] == f).collect();
    let take = |rows: &[usize]| Cohort {
        design: c.design.select(Axis(0), rows),
        outcome: c.outcome.select(Axis(0), rows),
    };
    (take(&train), take(&test))
}

/// Mean over folds of the summed per-cohort held-out mean squared error, and
/// the standard error of that mean.
fn cv_scores<T: Scalar>(
    data: &CohortDataset<T>,
    cfg: &SelectionConfig<T>,
    grid: &[T],
    k: usize,
) -> Result<(Vec<T>, Vec<T>)> {
    if k > data.min_cohort_size() {
        return Err(Error::invalid(format!(
            "{k} folds requested but the smallest cohort has {} rows",
            data.min_cohort_size()
        )));
    }
    let folds = fold_assignment(&data.sizes(), k, cfg.seed);
    let mut per_fold = Array2::<T>::zeros((k, grid.len()));
    for f in 0..k {
        let (train, test): (Vec<_>, Vec<_>) = data
            .cohorts()
            .iter()
            .zip(&folds)
            .map(|(c, fl)| split_cohort(c, fl, f))
            .unzip();
        let train = CohortDataset::new(train)?;
        let path = solve_path(&compute_moments(&train), cfg, grid)?;
        for (g, point) in path.iter().enumerate() {
            let mut err = T::zero();
            for (j, c) in test.iter().enumerate() {
                let resid = &c.outcome - &c.design.dot(&point.theta.column(j));
                err = err + resid.dot(&resid) / T::from_usize(c.outcome.len()).unwrap();
            }
            per_fold[[f, g]] = err;
        }
    }
    let kk = T::from_usize(k).unwrap();
    let mean = per_fold.mean_axis(Axis(0)).expect("k ≥ 2");
    let se = per_fold
        .axis_iter(Axis(1))
        .zip(mean.iter())
        .map(|(col, m)| {
            let ss = col.iter().fold(T::zero(), |acc, v| acc + (*v - *m) * (*v - *m));
            (ss / (kk - T::one()) / kk).sqrt()
        })
        .collect();
    Ok((mean.to_vec(), se))
}

/// Index of the smallest score; ties go to the earlier (larger) λ.
fn argmin<T: Scalar>(scores: &[T]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s < scores[best] || (scores[best].is_nan() && !s.is_nan()) {
            best = i;
        }
    }
    best
}

fn choose<T: Scalar>(rule: CvRule, scores: &[T], se: &[T]) -> usize {
    let best = argmin(scores);
    match rule {
        CvRule::Minimum => best,
        CvRule::OneStandardError => {
            let cutoff = scores[best] + se[best];
            scores.iter().position(|s| *s <= cutoff).unwrap_or(best)
        }
    }
}

/// Cross-validated λ and the score table, without the final refit.
pub fn cross_validate<T: Scalar>(
    data: &CohortDataset<T>,
    cfg: &SelectionConfig<T>,
    folds: usize,
) -> Result<(T, Vec<(T, T)>)> {
    cfg.validate()?;
    let (std_data, _) = prepare(data, cfg);
    let grid = resolve_grid(cfg, &compute_moments(&std_data))?;
    let (scores, se) = cv_scores(&std_data, cfg, &grid, folds)?;
    let best = choose(cfg.cv_rule, &scores, &se);
    Ok((grid[best], grid.into_iter().zip(scores).collect()))
}

fn prepare<T: Scalar>(data: &CohortDataset<T>, cfg: &SelectionConfig<T>) -> (CohortDataset<T>, Standardization<T>) {
    if cfg.standardize {
        Standardization::apply(data)
    } else {
        (data.clone(), Standardization::identity(data.p()))
    }
}

/// Selects a support from per-cohort data with the joint or independent estimator.
pub fn select<T: Scalar>(data: &CohortDataset<T>, cfg: &SelectionConfig<T>) -> Result<SelectionResult<T>> {
    cfg.validate()?;
    let (std_data, scaling) = prepare(data, cfg);
    let cache = compute_moments(&std_data);
    let grid = resolve_grid(cfg, &cache)?;
    let (chosen, cv_table) = match cfg.cv {
        CvPolicy::Folds(k) => {
            let (scores, se) = cv_scores(&std_data, cfg, &grid, k)?;
            (choose(cfg.cv_rule, &scores, &se), grid.iter().copied().zip(scores).collect())
        }
        CvPolicy::FirstValue => (0, Vec::new()),
    };
    let path = solve_path(&cache, cfg, &grid[..=chosen])?;
    if path.iter().all(|pt| !pt.converged) {
        return Err(Error::NonConvergence {
            message: format!("solver failed to converge at all {} lambda values", path.len()),
            traces: path.into_iter().map(|pt| pt.trace).collect(),
        });
    }
    let point = path.into_iter().last().expect("nonempty path");
    let theta = CoefficientMatrix::from_array(scaling.unscale(&point.theta))?;
    Ok(SelectionResult {
        support: theta.support(),
        chosen_lambda: Some(grid[chosen]),
        cv_table,
        per_cohort_supports: point.per_cohort,
        theta,
        lambda_grid: grid,
        converged: point.converged,
    })
}

/// Ranks covariates by their largest absolute coefficient in a ridge
/// multinomial model of treatment on standardized covariates, keeping `top_m`.
pub fn select_by_treatment_regression<T: Scalar>(
    data: &PooledDataset<T>,
    top_m: usize,
    ridge: T,
) -> Result<SupportSet> {
    let p = data.p();
    if top_m > p {
        return Err(Error::invalid(format!("top_m = {top_m} exceeds p = {p}")));
    }
    let x = data.covariates();
    let (mean, sd) = column_scaling(x);
    let z = (&x - &mean) / &sd;
    let opts = LogitOptions {
        ridge,
        ..LogitOptions::default()
    };
    let fit = fit_multinomial(z.view(), data.treatment(), data.q(), &opts)?;
    let score: Vec<T> = fit
        .weights
        .rows()
        .into_iter()
        .map(|r| r.iter().fold(T::zero(), |m, v| m.max(v.abs())))
        .collect();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|a, b| score[*b].partial_cmp(&score[*a]).unwrap_or(std::cmp::Ordering::Equal));
    SupportSet::new(order.into_iter().take(top_m), p)
}

/// Selection from pooled data; dispatches every mode.
pub fn select_pooled<T: Scalar>(data: &PooledDataset<T>, cfg: &SelectionConfig<T>) -> Result<SelectionResult<T>> {
    match cfg.mode {
        SelectionMode::TreatmentRegression { top_m } => {
            let support = select_by_treatment_regression(data, top_m, cfg.treatment_ridge)?;
            Ok(SelectionResult {
                support,
                chosen_lambda: None,
                cv_table: Vec::new(),
                per_cohort_supports: None,
                theta: CoefficientMatrix::zeros(data.p(), data.q()),
                lambda_grid: Vec::new(),
                converged: true,
            })
        }
        _ => select(&data.partition_by_treatment()?, cfg),
    }
}
