//! Treatment-effect estimates: plug-in contrasts of fitted coefficients and
//! augmented inverse-propensity weighting on a selected covariate set.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logistic::{class_probabilities, fit_multinomial_scaled, LogitOptions};
use crate::model::{CoefficientMatrix, PooledDataset};
use crate::prox::fit_restricted;
use crate::rng::stream;
use crate::selection::{select_pooled, SelectionConfig};
use crate::{Scalar, SupportSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectMethod {
    #[default]
    Plugin,
    DoublyRobust,
}

impl std::str::FromStr for EffectMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "plugin" | "plug-in" => Ok(Self::Plugin),
            "dr" | "doubly_robust" | "doubly-robust" => Ok(Self::DoublyRobust),
            other => Err(Error::invalid(format!("unknown effect method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EffectEstimate<T> {
    pub method: EffectMethod,
    /// Estimated mean potential outcome per treatment.
    pub tau: Array1<T>,
    /// `pairwise[[t, t']] = tau[t] − tau[t']` (averaged over splits when repeated).
    pub pairwise: Array2<T>,
    /// Standard deviation of `pairwise` across repeated splits.
    pub std_dev: Option<Array2<T>>,
    pub splits: usize,
    pub support_sizes: Vec<usize>,
    pub warnings: Vec<String>,
}

impl<T: Scalar> EffectEstimate<T> {
    pub fn from_tau(method: EffectMethod, tau: Array1<T>) -> Self {
        let pairwise = pairwise_from(&tau);
        Self {
            method,
            tau,
            pairwise,
            std_dev: None,
            splits: 1,
            support_sizes: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn contrast(&self, t: usize, t_prime: usize) -> Result<T> {
        check_labels(self.tau.len(), t, t_prime)?;
        Ok(self.pairwise[[t, t_prime]])
    }
}

fn pairwise_from<T: Scalar>(tau: &Array1<T>) -> Array2<T> {
    let q = tau.len();
    Array2::from_shape_fn((q, q), |(a, b)| tau[a] - tau[b])
}

fn check_labels(q: usize, t: usize, t_prime: usize) -> Result<()> {
    if t >= q || t_prime >= q {
        return Err(Error::invalid(format!(
            "treatment pair ({t}, {t_prime}) out of range for q = {q}"
        )));
    }
    Ok(())
}

/// `(θ:t − θ:t')ᵀ s` for a full-length covariate vector `s`.
pub fn plugin_ite<T: Scalar>(theta: &CoefficientMatrix<T>, s: ArrayView1<'_, T>, t: usize, t_prime: usize) -> Result<T> {
    check_labels(theta.q(), t, t_prime)?;
    if s.len() != theta.p() {
        return Err(Error::dims(format!("covariate vector has length {}, expected {}", s.len(), theta.p())));
    }
    if t == t_prime {
        return Ok(T::zero());
    }
    Ok(theta.column(t).dot(&s) - theta.column(t_prime).dot(&s))
}

/// `(θ:t − θ:t')ᵀ μ`.
pub fn plugin_ate<T: Scalar>(theta: &CoefficientMatrix<T>, mu: ArrayView1<'_, T>, t: usize, t_prime: usize) -> Result<T> {
    plugin_ite(theta, mu, t, t_prime)
}

/// Plug-in potential-outcome means `θᵀμ` for every treatment.
pub fn plugin_effects<T: Scalar>(theta: &CoefficientMatrix<T>, mu: ArrayView1<'_, T>) -> Result<EffectEstimate<T>> {
    if mu.len() != theta.p() {
        return Err(Error::dims("mean vector length differs from p"));
    }
    let tau = theta.values().t().dot(&mu);
    Ok(EffectEstimate::from_tau(EffectMethod::Plugin, tau))
}

/// Multinomial logistic treatment model on the covariates in `support`.
#[derive(Debug, Clone, PartialEq)]
pub struct PropensityModel<T> {
    pub support: SupportSet,
    /// `|S| × q`.
    pub coefficients: Array2<T>,
    pub intercepts: Array1<T>,
    pub clip: (T, T),
}

impl<T: Scalar> PropensityModel<T> {
    pub fn new(support: SupportSet, coefficients: Array2<T>, intercepts: Array1<T>, clip: (T, T)) -> Result<Self> {
        if coefficients.nrows() != support.len() || coefficients.ncols() != intercepts.len() {
            return Err(Error::dims("propensity coefficients do not match support and classes"));
        }
        if intercepts.len() < 2 {
            return Err(Error::invalid("propensity model needs at least two classes"));
        }
        if !(T::zero() < clip.0 && clip.0 < clip.1 && clip.1 < T::one()) {
            return Err(Error::invalid("clip bounds must satisfy 0 < low < high < 1"));
        }
        Ok(Self {
            support,
            coefficients,
            intercepts,
            clip,
        })
    }

    /// Every class equally likely, regardless of covariates.
    pub fn uniform(p: usize, q: usize) -> Result<Self> {
        Self::new(SupportSet::empty(p), Array2::zeros((0, q)), Array1::zeros(q), default_clip())
    }

    pub fn q(&self) -> usize {
        self.intercepts.len()
    }

    /// Class probabilities for one full-length covariate row, before clipping.
    pub fn probabilities(&self, x: ArrayView1<'_, T>) -> Vec<T> {
        let xs = x.select(Axis(0), self.support.indices());
        class_probabilities(xs.view(), self.coefficients.view(), self.intercepts.view())
    }

    /// Clipped probabilities and whether any class hit a bound.
    pub fn clipped(&self, x: ArrayView1<'_, T>) -> (Vec<T>, bool) {
        let mut hit = false;
        let probs = self
            .probabilities(x)
            .into_iter()
            .map(|v| {
                if v < self.clip.0 || v > self.clip.1 {
                    hit = true;
                }
                v.max(self.clip.0).min(self.clip.1)
            })
            .collect();
        (probs, hit)
    }
}

pub fn default_clip<T: Scalar>() -> (T, T) {
    (T::lit(0.01), T::lit(0.99))
}

/// Ridge multinomial logistic fit of treatment on the covariates in `support`.
pub fn fit_propensity<T: Scalar>(data: &PooledDataset<T>, support: &SupportSet, ridge: T) -> Result<PropensityModel<T>> {
    if support.ambient_dim() != data.p() {
        return Err(Error::dims("support dimension differs from covariate count"));
    }
    if let Some(t) = data.label_counts().iter().position(|c| *c == 0) {
        return Err(Error::MissingLabel(t));
    }
    let xs = data.covariates().select(Axis(1), support.indices());
    let opts = LogitOptions {
        ridge,
        ..LogitOptions::default()
    };
    let fit = fit_multinomial_scaled(xs.view(), data.treatment(), data.q(), &opts)?;
    PropensityModel::new(support.clone(), fit.weights, fit.intercepts, default_clip())
}

/// Augmented inverse-propensity potential-outcome means.
#[derive(Debug, Clone, PartialEq)]
pub struct DrOutcome<T> {
    pub tau: Array1<T>,
    /// Fraction of samples with at least one clipped propensity.
    pub clipped_fraction: f64,
    pub warning: Option<String>,
}

impl<T: Scalar> DrOutcome<T> {
    pub fn contrast(&self, t: usize, t_prime: usize) -> Result<T> {
        check_labels(self.tau.len(), t, t_prime)?;
        if t == t_prime {
            return Ok(T::zero());
        }
        Ok(self.tau[t] - self.tau[t_prime])
    }
}

/// Clipped mass above which a warning is attached.
pub const CLIP_WARNING_FRACTION: f64 = 0.2;

/// AIPW means with an externally supplied outcome model `θ` (full-length rows).
pub fn dr_effects_with_outcome<T: Scalar>(
    data: &PooledDataset<T>,
    outcome_theta: &CoefficientMatrix<T>,
    prop: &PropensityModel<T>,
) -> Result<DrOutcome<T>> {
    let q = data.q();
    if outcome_theta.p() != data.p() || outcome_theta.q() != q || prop.q() != q {
        return Err(Error::dims("outcome or propensity model shape differs from the data"));
    }
    if prop.support.ambient_dim() != data.p() {
        return Err(Error::dims("propensity support dimension differs from covariate count"));
    }
    let x = data.covariates();
    let fitted = x.dot(&outcome_theta.values());
    let mut sums = Array1::<T>::zeros(q);
    let mut clipped = 0usize;
    for (i, &ti) in data.treatment().iter().enumerate() {
        let (e, hit) = prop.clipped(x.row(i));
        clipped += hit as usize;
        for t in 0..q {
            let mut v = fitted[[i, t]];
            if ti == t {
                v = v + (data.outcome()[i] - fitted[[i, t]]) / e[t];
            }
            sums[t] = sums[t] + v;
        }
    }
    let tau = sums / T::from_usize(data.n()).unwrap();
    if tau.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("doubly robust estimate".into()));
    }
    let clipped_fraction = clipped as f64 / data.n() as f64;
    let warning = (clipped_fraction > CLIP_WARNING_FRACTION).then(|| {
        format!(
            "{:.1}% of samples have clipped propensities",
            100.0 * clipped_fraction
        )
    });
    Ok(DrOutcome {
        tau,
        clipped_fraction,
        warning,
    })
}

/// AIPW means with the outcome model refit by least squares on `support`.
pub fn dr_effects<T: Scalar>(data: &PooledDataset<T>, support: &SupportSet, prop: &PropensityModel<T>) -> Result<DrOutcome<T>> {
    if support.is_empty() {
        return Err(Error::invalid("doubly robust estimation needs a nonempty support"));
    }
    let theta = fit_restricted(&data.partition_by_treatment()?, support)?;
    dr_effects_with_outcome(data, &theta, prop)
}

/// AIPW contrast between treatments `t` and `t_prime`.
pub fn dr_effect<T: Scalar>(
    data: &PooledDataset<T>,
    support: &SupportSet,
    t: usize,
    t_prime: usize,
    prop: &PropensityModel<T>,
) -> Result<T> {
    check_labels(data.q(), t, t_prime)?;
    dr_effects(data, support, prop)?.contrast(t, t_prime)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropensityCovariates {
    /// Treatment model on the selected set.
    #[default]
    Selected,
    /// Treatment model on every covariate.
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig<T> {
    pub selection_fraction: f64,
    pub n_splits: usize,
    pub selection: SelectionConfig<T>,
    pub method: EffectMethod,
    pub seed: u64,
    /// Add a constant column to the outcome model at estimation time.
    pub intercept: bool,
    pub propensity_ridge: T,
    pub propensity_covariates: PropensityCovariates,
    pub max_redraws: usize,
}

impl<T: Scalar> Default for PipelineConfig<T> {
    fn default() -> Self {
        Self {
            selection_fraction: 0.2,
            n_splits: 20,
            selection: SelectionConfig::default(),
            method: EffectMethod::Plugin,
            seed: 0,
            intercept: true,
            propensity_ridge: T::lit(1e-3),
            propensity_covariates: PropensityCovariates::Selected,
            max_redraws: 100,
        }
    }
}

/// Row indices of a random split; both halves contain every treatment.
pub fn draw_split<T: Scalar>(
    data: &PooledDataset<T>,
    fraction: f64,
    seed: u64,
    split: u64,
    max_redraws: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = data.n();
    let n_sel = ((fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let mut rng = stream(seed, split);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..max_redraws.max(1) {
        order.shuffle(&mut rng);
        let (sel, est) = order.split_at(n_sel);
        let covers = |rows: &[usize]| {
            let mut seen = vec![false; data.q()];
            for &r in rows {
                seen[data.treatment()[r]] = true;
            }
            seen.into_iter().all(|s| s)
        };
        if covers(sel) && covers(est) {
            let (mut sel, mut est) = (sel.to_vec(), est.to_vec());
            sel.sort_unstable();
            est.sort_unstable();
            return Ok((sel, est));
        }
    }
    Err(Error::Data(format!(
        "no split with every treatment on both sides after {max_redraws} draws"
    )))
}

/// One split's result: support size and potential-outcome means.
fn run_split<T: Scalar>(data: &PooledDataset<T>, cfg: &PipelineConfig<T>, split: usize) -> Result<(usize, Array1<T>, Option<String>)> {
    let (sel_rows, est_rows) = draw_split(data, cfg.selection_fraction, cfg.seed, split as u64, cfg.max_redraws)?;
    let sel = data.subset_rows(&sel_rows);
    let mut selection = cfg.selection.clone();
    selection.seed = crate::rng::stream_seed(cfg.seed, split as u64);
    let support = select_pooled(&sel, &selection)?.support;

    let est = data.subset_rows(&est_rows);
    let (est, outcome_support) = if cfg.intercept {
        let wide = est.with_intercept_column();
        let idx = support.indices().iter().copied().chain([data.p()]);
        let s = SupportSet::new(idx, data.p() + 1)?;
        (wide, s)
    } else {
        (est, support.clone())
    };
    match cfg.method {
        EffectMethod::Plugin => {
            let theta = fit_restricted(&est.partition_by_treatment()?, &outcome_support)?;
            let mu = est.covariate_means();
            Ok((support.len(), theta.values().t().dot(&mu), None))
        }
        EffectMethod::DoublyRobust => {
            let prop_support = match cfg.propensity_covariates {
                PropensityCovariates::Selected => SupportSet::new(support.indices().iter().copied(), est.p())?,
                PropensityCovariates::All => SupportSet::new(0..data.p(), est.p())?,
            };
            let prop = fit_propensity(&est, &prop_support, cfg.propensity_ridge)?;
            let out = dr_effects(&est, &outcome_support, &prop)?;
            Ok((support.len(), out.tau, out.warning))
        }
    }
}

/// Repeated select-then-estimate on random splits; reports the mean and
/// standard deviation of the pairwise contrasts over splits.
pub fn two_stage_pipeline<T: Scalar>(data: &PooledDataset<T>, cfg: &PipelineConfig<T>) -> Result<EffectEstimate<T>> {
    if !(cfg.selection_fraction > 0.0 && cfg.selection_fraction < 1.0) {
        return Err(Error::invalid("selection fraction must lie in (0, 1)"));
    }
    if cfg.n_splits == 0 {
        return Err(Error::invalid("at least one split is required"));
    }
    let runs: Vec<_> = (0..cfg.n_splits)
        .map(|s| run_split(data, cfg, s))
        .collect::<Result<_>>()?;
    Ok(aggregate(cfg.method, runs))
}

fn aggregate<T: Scalar>(method: EffectMethod, runs: Vec<(usize, Array1<T>, Option<String>)>) -> EffectEstimate<T> {
    let m = runs.len();
    let q = runs[0].1.len();
    let mf = T::from_usize(m).unwrap();
    let mut tau = Array1::<T>::zeros(q);
    let mut pair_sum = Array2::<T>::zeros((q, q));
    let pairs: Vec<Array2<T>> = runs.iter().map(|r| pairwise_from(&r.1)).collect();
    for (r, pw) in runs.iter().zip(&pairs) {
        tau = tau + &r.1;
        pair_sum = pair_sum + pw;
    }
    tau = tau / mf;
    let mean_pair = pair_sum / mf;
    let std_dev = (m > 1).then(|| {
        let mut ss = Array2::<T>::zeros((q, q));
        for pw in &pairs {
            let d = pw - &mean_pair;
            ss = ss + &(&d * &d);
        }
        (ss / T::from_usize(m - 1).unwrap()).mapv(|v| v.sqrt())
    });
    let mut warnings: Vec<String> = Vec::new();
    for (s, r) in runs.iter().enumerate() {
        if let Some(w) = &r.2 {
            warnings.push(format!("split {s}: {w}"));
        }
    }
    EffectEstimate {
        method,
        tau,
        pairwise: mean_pair,
        std_dev,
        splits: m,
        support_sizes: runs.iter().map(|r| r.0).collect(),
        warnings,
    }
}
