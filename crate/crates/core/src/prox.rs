//! Proximal gradient descent on the row-norm penalized least-squares objective.
//!
//! The nonconvex part of the penalty, `−Σᵢ q_λ(‖θᵢ:‖)`, is moved into the smooth
//! gradient so that each step is an L-1,2 soft-threshold. Iterates are kept
//! strictly inside the ball `‖θ‖_{1,2} < R` by backtracking.

use ndarray::{Array2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{power_max_eigenvalue, solve_spd};
use crate::model::{compute_moments, l2, shift_correction, CoefficientMatrix, CohortDataset, MomentCache};
use crate::regularizers::Penalty;
use crate::{Scalar, SupportSet};

/// Halvings tried by the line search before it gives up.
pub const MAX_BACKTRACKS: usize = 60;

/// How the soft-threshold level relates to the step size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxScaling {
    /// Threshold `ζ·λ`; fixed points are stationary points of the objective.
    #[default]
    StepScaled,
    /// Threshold `λ` regardless of the step size.
    PaperLiteral,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub enum InitialIterate<T> {
    #[default]
    Zero,
    Given(CoefficientMatrix<T>),
}

/// Solver settings. `None` for radius or initial step means "derive from the data".
#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig<T> {
    pub radius: Option<T>,
    pub step_init: Option<T>,
    pub backtrack: T,
    pub max_iters: usize,
    pub tol: T,
    pub init: InitialIterate<T>,
    pub prox_scaling: ProxScaling,
    /// Reject steps that increase the objective.
    pub monotone_guard: bool,
}

impl<T: Scalar> Default for SolverConfig<T> {
    fn default() -> Self {
        Self {
            radius: None,
            step_init: None,
            backtrack: T::lit(0.5),
            max_iters: 5000,
            tol: T::lit(1e-7),
            init: InitialIterate::Zero,
            prox_scaling: ProxScaling::StepScaled,
            monotone_guard: true,
        }
    }
}

impl<T: Scalar> SolverConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.backtrack > T::zero() && self.backtrack < T::one()) {
            return Err(Error::invalid("backtracking constant must lie in (0, 1)"));
        }
        if let Some(r) = self.radius {
            if !(r > T::zero()) || !r.is_finite() {
                return Err(Error::invalid("radius must be finite and positive"));
            }
        }
        if let Some(z) = self.step_init {
            if !(z > T::zero()) || !z.is_finite() {
                return Err(Error::invalid("initial step must be finite and positive"));
            }
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be positive"));
        }
        if !(self.tol > T::zero()) {
            return Err(Error::invalid("tolerance must be positive"));
        }
        Ok(())
    }

    /// Copy with radius and initial step filled in from `cache`.
    pub fn resolved(&self, cache: &MomentCache<T>) -> Result<Self> {
        let mut out = self.clone();
        if out.radius.is_none() {
            out.radius = Some(default_radius(cache));
        }
        if out.step_init.is_none() {
            out.step_init = Some(default_step(cache));
        }
        Ok(out)
    }
}

/// Solver output.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult<T> {
    pub theta_hat: CoefficientMatrix<T>,
    pub support: SupportSet,
    pub iterations: usize,
    pub final_objective: T,
    pub converged: bool,
    pub objective_trace: Vec<T>,
    /// Step size of the last accepted iteration.
    pub last_step: T,
    pub radius: T,
    pub step_init: T,
    pub diagnostic: Option<String>,
}

/// Row-wise soft threshold: row `i` becomes `θᵢ: · max(0, 1 − τ/‖θᵢ:‖)`.
pub fn prox_l12<T: Scalar>(theta: &CoefficientMatrix<T>, threshold: T) -> CoefficientMatrix<T> {
    let mut out = theta.values().to_owned();
    prox_in_place(&mut out, threshold);
    CoefficientMatrix::from_array_unchecked(out)
}

fn prox_in_place<T: Scalar>(values: &mut Array2<T>, threshold: T) {
    if threshold == T::zero() {
        return;
    }
    for mut row in values.axis_iter_mut(Axis(0)) {
        let norm = l2(row.view());
        if norm <= threshold {
            row.fill(T::zero());
        } else {
            let shrunk = norm - threshold;
            row.mapv_inplace(|x| x * shrunk / norm);
        }
    }
}

fn penalty_sum<T: Scalar, P: Penalty<T> + ?Sized>(theta: &Array2<T>, reg: &P) -> T {
    theta.rows().into_iter().map(|r| reg.rho(l2(r))).sum()
}

/// `ℒₙ(θ) + Σᵢ ρ_λ(‖θᵢ:‖₂)`.
pub fn objective<T: Scalar, P: Penalty<T> + ?Sized>(
    theta: &CoefficientMatrix<T>,
    cache: &MomentCache<T>,
    reg: &P,
) -> Result<T> {
    Ok(crate::model::loss(theta, cache)? + penalty_sum(&theta.values().to_owned(), reg))
}

/// `1 / maxⱼ λ_max(Γ⁽ʲ⁾)`, eigenvalues from 20 power iterations.
pub fn default_step<T: Scalar>(cache: &MomentCache<T>) -> T {
    let lmax = (0..cache.q())
        .map(|j| power_max_eigenvalue(cache.gram(j), 20))
        .fold(T::zero(), T::max);
    if lmax > T::zero() {
        T::one() / lmax
    } else {
        T::one()
    }
}

/// Twice the `‖·‖_{1,2}` norm of a small-ridge pilot fit, floored at 1.
pub fn default_radius<T: Scalar>(cache: &MomentCache<T>) -> T {
    let p = cache.p();
    let mut pilot = Array2::<T>::zeros((p, cache.q()));
    for j in 0..cache.q() {
        let g = cache.gram(j);
        let trace: T = (0..p).map(|i| g[[i, i]]).sum();
        let mut ridge = T::lit(1e-3) * trace / T::from_usize(p).unwrap();
        if !(ridge > T::zero()) {
            ridge = T::lit(1e-3);
        }
        let mut a = g.to_owned();
        for i in 0..p {
            a[[i, i]] = a[[i, i]] + ridge;
        }
        if let Some(x) = solve_spd(a.view(), cache.cross(j)) {
            pilot.column_mut(j).assign(&x);
        }
    }
    let r = T::lit(2.0) * CoefficientMatrix::from_array_unchecked(pilot).norm_12();
    if r.is_finite() {
        r.max(T::one())
    } else {
        T::one()
    }
}

struct Iterate<T> {
    theta: Array2<T>,
    gtheta: Array2<T>,
    objective: T,
}

impl<T: Scalar> Iterate<T> {
    fn new<P: Penalty<T> + ?Sized>(theta: Array2<T>, cache: &MomentCache<T>, reg: &P) -> Self {
        let gtheta = cache.gram_product(theta.view());
        let objective = cache.loss_with_product(theta.view(), gtheta.view()) + penalty_sum(&theta, reg);
        Self {
            theta,
            gtheta,
            objective,
        }
    }
}

/// Fits from raw cohort data.
pub fn fit<T: Scalar, P: Penalty<T> + ?Sized>(
    data: &CohortDataset<T>,
    reg: &P,
    config: &SolverConfig<T>,
) -> Result<FitResult<T>> {
    fit_moments(&compute_moments(data), reg, config)
}

/// Proximal gradient descent from cached moments.
pub fn fit_moments<T: Scalar, P: Penalty<T> + ?Sized>(
    cache: &MomentCache<T>,
    reg: &P,
    config: &SolverConfig<T>,
) -> Result<FitResult<T>> {
    config.validate()?;
    let config = config.resolved(cache)?;
    let radius = config.radius.expect("resolved");
    let step_init = config.step_init.expect("resolved");
    let lambda = reg.lambda();

    let theta0 = match &config.init {
        InitialIterate::Zero => Array2::zeros((cache.p(), cache.q())),
        InitialIterate::Given(t) => {
            cache.check_theta(t)?;
            t.values().to_owned()
        }
    };
    let init_norm = CoefficientMatrix::from_array_unchecked(theta0.clone()).norm_12();
    if !(init_norm < radius) {
        return Err(Error::invalid(format!(
            "initial iterate has ‖θ₀‖₁,₂ = {init_norm}, not inside radius {radius}"
        )));
    }

    let slack = T::lit(1e-13);
    let mut current = Iterate::new(theta0, cache, reg);
    let mut trace = vec![current.objective];
    let mut converged = false;
    let mut diagnostic = None;
    let mut last_step = step_init;
    let mut iterations = 0;

    while iterations < config.max_iters {
        let mut grad = cache.grad_with_product(&current.gtheta);
        if reg.has_shift() {
            grad = grad - shift_correction(current.theta.view(), reg)?;
        }
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient at iteration {iterations}")));
        }

        let mut step = step_init;
        let mut accepted = None;
        for _ in 0..=MAX_BACKTRACKS {
            let mut cand = current.theta.clone();
            Zip::from(&mut cand).and(&grad).for_each(|c, &g| *c = *c - step * g);
            let threshold = match config.prox_scaling {
                ProxScaling::StepScaled => step * lambda,
                ProxScaling::PaperLiteral => lambda,
            };
            prox_in_place(&mut cand, threshold);
            if cand.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("iterate at iteration {iterations}")));
            }
            let norm = cand.rows().into_iter().map(l2).sum::<T>();
            if norm < radius {
                let next = Iterate::new(cand, cache, reg);
                let bound = current.objective + slack * current.objective.abs().max(T::one());
                if !config.monotone_guard || next.objective <= bound {
                    accepted = Some(next);
                    break;
                }
            }
            step = step * config.backtrack;
        }

        let Some(next) = accepted else {
            diagnostic = Some(format!(
                "line search exhausted {MAX_BACKTRACKS} backtracking steps at iteration {iterations}"
            ));
            break;
        };

        iterations += 1;
        last_step = step;
        let mut delta = T::zero();
        let mut old_sq = T::zero();
        Zip::from(&next.theta).and(&current.theta).for_each(|a, b| {
            delta = delta + (*a - *b) * (*a - *b);
            old_sq = old_sq + *b * *b;
        });
        let delta = delta.sqrt();
        let old_norm = old_sq.sqrt();
        current = next;
        trace.push(current.objective);
        if delta <= config.tol * old_norm.max(T::one()) {
            converged = true;
            break;
        }
    }
    if !converged && diagnostic.is_none() {
        diagnostic = Some(format!("reached max_iters = {}", config.max_iters));
    }

    let theta_hat = CoefficientMatrix::from_array_unchecked(current.theta);
    Ok(FitResult {
        support: theta_hat.support(),
        theta_hat,
        iterations,
        final_objective: current.objective,
        converged,
        objective_trace: trace,
        last_step,
        radius,
        step_init,
        diagnostic,
    })
}

/// `‖θ − prox_{ζλ}(θ − ζ∇ℒ̄ₙ(θ))‖_F`: zero exactly at stationary points.
pub fn stationarity_gap<T: Scalar, P: Penalty<T> + ?Sized>(
    theta: &CoefficientMatrix<T>,
    cache: &MomentCache<T>,
    reg: &P,
    step: T,
) -> Result<T> {
    let mut grad = crate::model::grad_loss(theta, cache)?.into_inner();
    if reg.has_shift() {
        grad = grad - shift_correction(theta.values(), reg)?;
    }
    let moved = CoefficientMatrix::from_array_unchecked(&theta.values() - &(grad * step));
    let proxed = prox_l12(&moved, step * reg.lambda());
    Ok(proxed.sub(theta)?.frobenius())
}

/// Per-cohort least squares on the covariates in `support`; other rows are zero.
pub fn fit_restricted<T: Scalar>(
    data: &CohortDataset<T>,
    support: &SupportSet,
) -> Result<CoefficientMatrix<T>> {
    fit_restricted_moments(&compute_moments(data), support)
}

/// Solves `Γ_SS⁽ʲ⁾ θ_S = γ_S⁽ʲ⁾` for each cohort.
pub fn fit_restricted_moments<T: Scalar>(
    cache: &MomentCache<T>,
    support: &SupportSet,
) -> Result<CoefficientMatrix<T>> {
    if support.ambient_dim() != cache.p() {
        return Err(Error::dims(format!(
            "support is over p = {}, moments over p = {}",
            support.ambient_dim(),
            cache.p()
        )));
    }
    let idx = support.indices();
    let mut theta = Array2::<T>::zeros((cache.p(), cache.q()));
    if idx.is_empty() {
        return Ok(CoefficientMatrix::from_array_unchecked(theta));
    }
    for j in 0..cache.q() {
        let g = cache.gram(j).select(Axis(0), idx).select(Axis(1), idx);
        let c = cache.cross(j).select(Axis(0), idx);
        let x = solve_spd(g.view(), c.view()).ok_or(Error::SingularGram { cohort: j })?;
        for (k, &i) in idx.iter().enumerate() {
            theta[[i, j]] = x[k];
        }
    }
    Ok(CoefficientMatrix::from_array_unchecked(theta))
}
