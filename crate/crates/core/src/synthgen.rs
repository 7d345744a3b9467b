//! Seeded synthetic cohorts with known support and effects.
//!
//! `X ~ N(0, I_p)`, `T | x ~ Categorical(softmax(Φᵀx))`, and
//! `Y = θ*:ₜᵀ x_S + ε` with a uniformly drawn support `S` of size `k`.

use ndarray::{Array1, Array2};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, StreamRng};
use crate::{CoefficientMatrix, PooledDataset, SupportSet};

const MAX_THETA_REDRAWS: usize = 10_000;

fn default_one() -> f64 {
    1.0
}

/// Parameters of one synthetic draw. `n` is the pooled sample size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub p: usize,
    pub q: usize,
    pub k: usize,
    pub n: usize,
    pub seed: u64,
    #[serde(default = "default_one")]
    pub noise_sigma: f64,
    #[serde(default = "default_one")]
    pub coef_scale: f64,
    /// Standard deviation of the entries of Φ; `None` means `1/√p`, which keeps
    /// the treatment logits at unit scale.
    #[serde(default)]
    pub phi_scale: Option<f64>,
    /// Rows of Φ allowed to be nonzero; `None` means all.
    #[serde(default)]
    pub phi_support: Option<Vec<usize>>,
    /// Redraw θ* until every support row has 2-norm at least this value.
    #[serde(default)]
    pub beta_min: f64,
}

impl SynthSpec {
    pub fn new(p: usize, q: usize, k: usize, n: usize, seed: u64) -> Self {
        Self {
            p,
            q,
            k,
            n,
            seed,
            noise_sigma: 1.0,
            coef_scale: 1.0,
            phi_scale: None,
            phi_support: None,
            beta_min: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.n == 0 {
            return Err(Error::invalid("p and n must be positive"));
        }
        if self.q < 2 {
            return Err(Error::invalid("q must be at least 2"));
        }
        if self.k > self.p {
            return Err(Error::invalid(format!("k = {} exceeds p = {}", self.k, self.p)));
        }
        if !(self.noise_sigma >= 0.0) || !(self.coef_scale > 0.0) || !(self.beta_min >= 0.0) {
            return Err(Error::invalid("noise_sigma ≥ 0, coef_scale > 0, beta_min ≥ 0 required"));
        }
        if let Some(s) = self.phi_scale {
            if !(s >= 0.0) || !s.is_finite() {
                return Err(Error::invalid("phi_scale must be finite and nonnegative"));
            }
        }
        if let Some(rows) = &self.phi_support {
            if rows.iter().any(|r| *r >= self.p) {
                return Err(Error::invalid("phi_support index out of range"));
            }
        }
        Ok(())
    }

    pub fn resolved_phi_scale(&self) -> f64 {
        self.phi_scale.unwrap_or(1.0 / (self.p as f64).sqrt())
    }
}

/// A generated dataset with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDraw {
    pub data: PooledDataset<f64>,
    pub true_support: SupportSet,
    pub true_theta: CoefficientMatrix<f64>,
    /// Treatment-assignment weights; absent for semisynthetic draws.
    pub true_phi: Option<Array2<f64>>,
    /// `(θ*:ₜ − θ*:ₜ′)ᵀ E[X]` at entry `(t, t′)`.
    pub population_ate: Array2<f64>,
    /// `(θ*:ₜ − θ*:ₜ′)ᵀ mean(X)` over the drawn sample.
    pub sample_ate: Array2<f64>,
}

impl SynthDraw {
    /// `θ*:ₜᵀ x` for one covariate row.
    pub fn true_mean(&self, x: ndarray::ArrayView1<'_, f64>, t: usize) -> f64 {
        self.true_theta.column(t).dot(&x)
    }
}

fn contrast_matrix(theta: &CoefficientMatrix<f64>, mean: &Array1<f64>) -> Array2<f64> {
    let tau: Vec<f64> = (0..theta.q()).map(|t| theta.column(t).dot(mean)).collect();
    Array2::from_shape_fn((theta.q(), theta.q()), |(a, b)| tau[a] - tau[b])
}

fn draw_theta(
    rng: &mut StreamRng,
    p: usize,
    q: usize,
    support: &SupportSet,
    coef_scale: f64,
    beta_min: f64,
) -> Result<CoefficientMatrix<f64>> {
    let normal = Normal::new(0.0, coef_scale).map_err(|e| Error::invalid(e.to_string()))?;
    for _ in 0..MAX_THETA_REDRAWS {
        let mut theta = Array2::<f64>::zeros((p, q));
        for &i in support.indices() {
            for j in 0..q {
                theta[[i, j]] = normal.sample(rng);
            }
        }
        let theta = CoefficientMatrix::from_array(theta)?;
        if support.indices().iter().all(|&i| theta.row_norm(i) >= beta_min) {
            return Ok(theta);
        }
    }
    Err(Error::invalid(format!(
        "could not draw θ* with minimum row norm {beta_min} in {MAX_THETA_REDRAWS} attempts"
    )))
}

fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}

/// Softmax class probabilities `softmax(Φᵀx)` for one covariate row.
pub fn treatment_probabilities(phi: &Array2<f64>, x: ndarray::ArrayView1<'_, f64>) -> Vec<f64> {
    let mut logits: Vec<f64> = phi.columns().into_iter().map(|c| c.dot(&x)).collect();
    softmax_in_place(&mut logits);
    logits
}

fn sample_categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn outcomes(
    rng: &mut StreamRng,
    x: &Array2<f64>,
    treatment: &[usize],
    theta: &CoefficientMatrix<f64>,
    support: &SupportSet,
    noise_sigma: f64,
) -> Array1<f64> {
    let idx = support.indices();
    Array1::from_iter(x.rows().into_iter().zip(treatment).map(|(row, &t)| {
        let mean: f64 = idx.iter().map(|&i| theta.values()[[i, t]] * row[i]).sum();
        let eps: f64 = rng.sample(StandardNormal);
        mean + noise_sigma * eps
    }))
}

/// Draws one synthetic dataset; fully determined by `spec` (including its seed).
pub fn generate(spec: &SynthSpec) -> Result<SynthDraw> {
    spec.validate()?;
    let (p, q, n) = (spec.p, spec.q, spec.n);
    let mut rng = rng_from_seed(spec.seed);

    let phi_scale = spec.resolved_phi_scale();
    let mut phi = Array2::<f64>::zeros((p, q));
    let phi_rows: Vec<usize> = spec.phi_support.clone().unwrap_or_else(|| (0..p).collect());
    for &i in &phi_rows {
        for j in 0..q {
            let z: f64 = rng.sample(StandardNormal);
            phi[[i, j]] = phi_scale * z;
        }
    }

    let support = SupportSet::new(sample(&mut rng, p, spec.k), p)?;
    let theta = draw_theta(&mut rng, p, q, &support, spec.coef_scale, spec.beta_min)?;

    let x = Array2::from_shape_simple_fn((n, p), || rng.sample::<f64, _>(StandardNormal));
    let treatment: Vec<usize> = x
        .rows()
        .into_iter()
        .map(|row| {
            let probs = treatment_probabilities(&phi, row);
            sample_categorical(&probs, rng.random::<f64>())
        })
        .collect();
    let y = outcomes(&mut rng, &x, &treatment, &theta, &support, spec.noise_sigma);

    let data = PooledDataset::new(x, treatment, y, q)?;
    let sample_ate = contrast_matrix(&theta, &data.covariate_means());
    Ok(SynthDraw {
        data,
        true_support: support,
        true_theta: theta,
        true_phi: Some(phi),
        population_ate: Array2::zeros((q, q)),
        sample_ate,
    })
}

/// Sparse-response settings for [`generate_semisynthetic`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemiSynthSpec {
    pub k: usize,
    pub seed: u64,
    #[serde(default = "default_one")]
    pub noise_sigma: f64,
    #[serde(default = "default_one")]
    pub coef_scale: f64,
    #[serde(default)]
    pub beta_min: f64,
}

/// Keeps the supplied covariates and treatments, draws a sparse linear
/// response, and reports effects against the empirical covariate mean.
pub fn generate_semisynthetic(
    covariates: Array2<f64>,
    treatment: Vec<usize>,
    spec: &SemiSynthSpec,
) -> Result<SynthDraw> {
    let p = covariates.ncols();
    if spec.k > p {
        return Err(Error::invalid(format!("k = {} exceeds p = {p}", spec.k)));
    }
    if !(spec.noise_sigma >= 0.0) || !(spec.coef_scale > 0.0) {
        return Err(Error::invalid("noise_sigma ≥ 0 and coef_scale > 0 required"));
    }
    let q = treatment.iter().copied().max().map_or(0, |m| m + 1);
    let distinct = {
        let mut t = treatment.clone();
        t.sort_unstable();
        t.dedup();
        t.len()
    };
    if distinct < 2 {
        return Err(Error::invalid("treatment is constant; at least two levels are needed"));
    }
    let mut rng = rng_from_seed(spec.seed);
    let support = SupportSet::new(sample(&mut rng, p, spec.k), p)?;
    let theta = draw_theta(&mut rng, p, q, &support, spec.coef_scale, spec.beta_min)?;
    let y = outcomes(&mut rng, &covariates, &treatment, &theta, &support, spec.noise_sigma);
    let data = PooledDataset::new(covariates, treatment, y, q)?;
    let ate = contrast_matrix(&theta, &data.covariate_means());
    Ok(SynthDraw {
        data,
        true_support: support,
        true_theta: theta,
        true_phi: None,
        population_ate: ate.clone(),
        sample_ate: ate,
    })
}

/// Covariates and a biased binary treatment shaped like the IHDP benchmark:
/// 6 continuous and 19 binary covariates, treatment depending on a handful of
/// them. Stands in for the real file when it is not available.
pub fn ihdp_like_standin(n: usize, seed: u64) -> (Array2<f64>, Vec<usize>) {
    const CONTINUOUS: usize = 6;
    const P: usize = 25;
    let mut rng = rng_from_seed(seed);
    let means: Vec<f64> = (0..P).map(|i| 0.5 + 0.25 * (i % 5) as f64).collect();
    let rates: Vec<f64> = (0..P).map(|i| 0.2 + 0.6 * ((i * 7) % 11) as f64 / 10.0).collect();
    let x = Array2::from_shape_fn((n, P), |(_, j)| {
        if j < CONTINUOUS {
            means[j] + rng.sample::<f64, _>(StandardNormal)
        } else if rng.random::<f64>() < rates[j] {
            1.0
        } else {
            0.0
        }
    });
    let treatment = x
        .rows()
        .into_iter()
        .map(|row| {
            let score = -0.4 + 0.6 * (row[0] - means[0]) - 0.5 * (row[1] - means[1]) + 0.8 * row[7]
                - 0.6 * row[12];
            let prob = 1.0 / (1.0 + (-score).exp());
            usize::from(rng.random::<f64>() < prob)
        })
        .collect();
    (x, treatment)
}
