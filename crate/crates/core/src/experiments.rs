//! Seeded Monte-Carlo experiments: recovery phase diagrams, error-rate sweeps
//! and repeated support trials, with metadata that replays them exactly.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::effects::plugin_effects;
use crate::error::{Error, Result};
use crate::model::CoefficientMatrix;
use crate::prox::fit_restricted;
use crate::regularizers::PenaltyKind;
use crate::rng::{combine, stream_seed};
use crate::selection::{select, CvPolicy, LambdaGrid, SelectionConfig, SelectionMode};
use crate::synthgen::{generate, SynthDraw, SynthSpec};
use crate::SupportSet;

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Marks calibration streams so they never coincide with trial streams.
const CALIBRATION_TAG: u64 = 0xCA11_B8A7_E000_0001;

/// Constant used by the theory policy when no calibration is requested.
pub const DEFAULT_THEORY_C: f64 = 1.5;

pub fn default_calibration_grid() -> Vec<f64> {
    vec![0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0, 2.5, 3.0]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecoveryMode {
    #[default]
    Joint,
    Independent,
}

impl RecoveryMode {
    pub fn selection_mode(self) -> SelectionMode {
        match self {
            Self::Joint => SelectionMode::Joint,
            Self::Independent => SelectionMode::Independent,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Joint => "joint",
            Self::Independent => "independent",
        }
    }

    /// Number of cohorts sharing each penalized row.
    fn group_size(self, q: usize) -> usize {
        match self {
            Self::Joint => q,
            Self::Independent => 1,
        }
    }
}

impl std::str::FromStr for RecoveryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Self::Joint),
            "independent" => Ok(Self::Independent),
            other => Err(Error::invalid(format!("unknown mode '{other}'"))),
        }
    }
}

/// How λ is set inside a trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy")]
pub enum LambdaPolicy {
    /// `λ = c·√(g·ln p / n_min)` with `g` the group size and `n_min` the
    /// smallest cohort. `c = None` calibrates `c` at the smallest grid cell.
    Theory {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        c: Option<f64>,
    },
    Cv { folds: usize },
    Fixed { lambda: f64 },
}

impl Default for LambdaPolicy {
    fn default() -> Self {
        Self::Theory { c: None }
    }
}

pub fn theory_lambda(c: f64, group_size: usize, p: usize, n_min: usize) -> f64 {
    c * (group_size as f64 * (p as f64).ln().max(1.0) / n_min.max(1) as f64).sqrt()
}

/// Data-generation knobs shared by all experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawSettings {
    #[serde(default = "one")]
    pub noise_sigma: f64,
    #[serde(default = "one")]
    pub coef_scale: f64,
    #[serde(default)]
    pub beta_min: f64,
    #[serde(default)]
    pub penalty: PenaltyKind,
}

fn one() -> f64 {
    1.0
}

impl Default for DrawSettings {
    fn default() -> Self {
        Self {
            noise_sigma: 1.0,
            coef_scale: 1.0,
            beta_min: 0.0,
            penalty: PenaltyKind::Mcp,
        }
    }
}

impl DrawSettings {
    fn synth(&self, p: usize, q: usize, k: usize, n: usize, seed: u64) -> SynthSpec {
        SynthSpec {
            noise_sigma: self.noise_sigma,
            coef_scale: self.coef_scale,
            beta_min: self.beta_min,
            ..SynthSpec::new(p, q, k, n, seed)
        }
    }
}

/// Seed of trial `trial` at grid point `(n, p)`.
pub fn trial_seed(base: u64, n: usize, p: usize, trial: usize) -> u64 {
    stream_seed(base, combine(&[n as u64, p as u64, trial as u64]))
}

fn calibration_seed(base: u64, n: usize, p: usize, trial: usize) -> u64 {
    stream_seed(base, combine(&[CALIBRATION_TAG, n as u64, p as u64, trial as u64]))
}

/// Selection settings used for one trial.
fn trial_selection(policy: &LambdaPolicy, c: f64, mode: RecoveryMode, draw: &SynthDraw, penalty: PenaltyKind, seed: u64) -> SelectionConfig<f64> {
    let n_min = draw.data.label_counts().into_iter().min().unwrap_or(0);
    let mut cfg = match policy {
        LambdaPolicy::Theory { .. } => SelectionConfig::fixed(
            mode.selection_mode(),
            theory_lambda(c, mode.group_size(draw.data.q()), draw.data.p(), n_min),
        ),
        LambdaPolicy::Fixed { lambda } => SelectionConfig::fixed(mode.selection_mode(), *lambda),
        LambdaPolicy::Cv { folds } => SelectionConfig {
            mode: mode.selection_mode(),
            cv: CvPolicy::Folds(*folds),
            lambda_grid: LambdaGrid::Auto {
                count: 30,
                min_ratio: 0.01,
            },
            ..SelectionConfig::default()
        },
    };
    cfg.penalty = penalty;
    cfg.seed = seed;
    cfg
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub seed: u64,
    pub true_support: SupportSet,
    /// `None` when generation or selection failed.
    pub selected: Option<SupportSet>,
    pub converged: bool,
}

impl TrialOutcome {
    pub fn recovered(&self) -> bool {
        self.selected.as_ref() == Some(&self.true_support)
    }

    pub fn jaccard(&self) -> f64 {
        self.selected.as_ref().map_or(0.0, |s| s.jaccard(&self.true_support))
    }
}

/// Generates one draw and selects a support on it. Failures are recorded,
/// never propagated.
pub fn run_trial(
    p: usize,
    q: usize,
    k: usize,
    n: usize,
    seed: u64,
    settings: &DrawSettings,
    mode: RecoveryMode,
    policy: &LambdaPolicy,
    c: f64,
) -> TrialOutcome {
    let spec = settings.synth(p, q, k, n, seed);
    let draw = match generate(&spec) {
        Ok(d) => d,
        Err(_) => {
            return TrialOutcome {
                seed,
                true_support: SupportSet::empty(p),
                selected: None,
                converged: false,
            }
        }
    };
    let result = draw
        .data
        .partition_by_treatment()
        .and_then(|cohorts| select(&cohorts, &trial_selection(policy, c, mode, &draw, settings.penalty, seed)));
    match result {
        Ok(r) => TrialOutcome {
            seed,
            true_support: draw.true_support,
            selected: Some(r.support),
            converged: r.converged,
        },
        Err(_) => TrialOutcome {
            seed,
            true_support: draw.true_support,
            selected: None,
            converged: false,
        },
    }
}

/// Picks the theory constant at one cell: the largest grid value whose mean
/// support Jaccard is within one standard error of the best mean.
pub fn calibrate_theory_constant(
    p: usize,
    q: usize,
    k: usize,
    n: usize,
    trials: usize,
    base_seed: u64,
    settings: &DrawSettings,
    mode: RecoveryMode,
    grid: &[f64],
) -> f64 {
    let policy = LambdaPolicy::Theory { c: None };
    let stats: Vec<(f64, f64)> = grid
        .iter()
        .map(|&c| {
            let scores: Vec<f64> = (0..trials)
                .into_par_iter()
                .map(|t| run_trial(p, q, k, n, calibration_seed(base_seed, n, p, t), settings, mode, &policy, c).jaccard())
                .collect();
            mean_and_se(&scores)
        })
        .collect();
    let mut best = 0;
    for (i, s) in stats.iter().enumerate() {
        if s.0 >= stats[best].0 {
            best = i;
        }
    }
    let floor = stats[best].0 - stats[best].1;
    let mut chosen = best;
    for (i, s) in stats.iter().enumerate() {
        if s.0 >= floor && grid[i] > grid[chosen] {
            chosen = i;
        }
    }
    grid[chosen]
}

/// Sample mean and its standard error.
pub fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let m = v.len() as f64;
    let mean = v.iter().sum::<f64>() / m.max(1.0);
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (m - 1.0);
    (mean, (var / m).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseDiagramSpec {
    pub n_grid: Vec<usize>,
    pub p_grid: Vec<usize>,
    pub q: usize,
    pub k: usize,
    pub trials: usize,
    #[serde(default)]
    pub mode: RecoveryMode,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub lambda_policy: LambdaPolicy,
    #[serde(default)]
    pub draw: DrawSettings,
    #[serde(default = "default_calibration_grid")]
    pub calibration_grid: Vec<f64>,
}

impl PhaseDiagramSpec {
    pub fn validate(&self) -> Result<()> {
        let ascending = |v: &[usize]| !v.is_empty() && v.windows(2).all(|w| w[0] < w[1]) && v[0] > 0;
        if !ascending(&self.n_grid) || !ascending(&self.p_grid) {
            return Err(Error::invalid("n and p grids must be nonempty, positive and strictly ascending"));
        }
        if self.k > self.p_grid[0] {
            return Err(Error::invalid("k exceeds the smallest p"));
        }
        if self.q < 2 || self.trials == 0 {
            return Err(Error::invalid("q ≥ 2 and trials ≥ 1 required"));
        }
        match &self.lambda_policy {
            LambdaPolicy::Theory { c: Some(c) } if !(*c > 0.0) => Err(Error::invalid("theory constant must be positive")),
            LambdaPolicy::Theory { c: None } if self.calibration_grid.is_empty() => {
                Err(Error::invalid("calibration grid is empty"))
            }
            LambdaPolicy::Fixed { lambda } if !(*lambda > 0.0) => Err(Error::invalid("lambda must be positive")),
            LambdaPolicy::Cv { folds } if *folds < 2 => Err(Error::invalid("cv needs at least 2 folds")),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseCell {
    pub n: usize,
    pub p: usize,
    pub trials: usize,
    pub recovered: usize,
    pub failures: usize,
    pub recovery_probability: f64,
    pub mean_support_jaccard: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseDiagramResult {
    pub spec: PhaseDiagramSpec,
    /// Theory constant actually used, when the policy is `theory`.
    pub theory_c: Option<f64>,
    pub cells: Vec<PhaseCell>,
}

impl PhaseDiagramResult {
    pub fn cell(&self, n: usize, p: usize) -> Option<&PhaseCell> {
        self.cells.iter().find(|c| c.n == n && c.p == p)
    }

    /// Smallest grid `n` whose recovery probability reaches `level` at `p`.
    pub fn threshold_n(&self, p: usize, level: f64) -> Option<usize> {
        self.cells
            .iter()
            .filter(|c| c.p == p && c.recovery_probability >= level)
            .map(|c| c.n)
            .min()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["n", "p", "q", "k", "mode", "trials", "recovery_probability", "mean_support_jaccard"])
            .map_err(csv_err)?;
        for c in &self.cells {
            w.write_record([
                c.n.to_string(),
                c.p.to_string(),
                self.spec.q.to_string(),
                self.spec.k.to_string(),
                self.spec.mode.as_str().to_string(),
                c.trials.to_string(),
                c.recovery_probability.to_string(),
                c.mean_support_jaccard.to_string(),
            ])
            .map_err(csv_err)?;
        }
        finish(w)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(e.to_string())
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
}

/// Recovery probability over a grid of `(n, p)`; trials run in parallel on
/// independent seeded streams.
pub fn run_phase_diagram(spec: &PhaseDiagramSpec) -> Result<PhaseDiagramResult> {
    spec.validate()?;
    let theory_c = match &spec.lambda_policy {
        LambdaPolicy::Theory { c: Some(c) } => Some(*c),
        LambdaPolicy::Theory { c: None } => Some(calibrate_theory_constant(
            spec.p_grid[0],
            spec.q,
            spec.k,
            spec.n_grid[0],
            spec.trials,
            spec.base_seed,
            &spec.draw,
            spec.mode,
            &spec.calibration_grid,
        )),
        _ => None,
    };
    let c = theory_c.unwrap_or(DEFAULT_THEORY_C);
    let mut jobs = Vec::new();
    for &p in &spec.p_grid {
        for &n in &spec.n_grid {
            for t in 0..spec.trials {
                jobs.push((n, p, t));
            }
        }
    }
    let outcomes: Vec<TrialOutcome> = jobs
        .par_iter()
        .map(|&(n, p, t)| {
            run_trial(p, spec.q, spec.k, n, trial_seed(spec.base_seed, n, p, t), &spec.draw, spec.mode, &spec.lambda_policy, c)
        })
        .collect();
    let cells = outcomes
        .chunks(spec.trials)
        .zip(jobs.chunks(spec.trials))
        .map(|(outs, js)| {
            let recovered = outs.iter().filter(|o| o.recovered()).count();
            let failures = outs.iter().filter(|o| o.selected.is_none()).count();
            let jac: f64 = outs.iter().map(TrialOutcome::jaccard).sum();
            PhaseCell {
                n: js[0].0,
                p: js[0].1,
                trials: spec.trials,
                recovered,
                failures,
                recovery_probability: recovered as f64 / spec.trials as f64,
                mean_support_jaccard: jac / spec.trials as f64,
            }
        })
        .collect();
    Ok(PhaseDiagramResult {
        spec: spec.clone(),
        theory_c,
        cells,
    })
}

/// Repeated selection at a single `(n, p)` with every trial's supports kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportTrialsSpec {
    pub p: usize,
    pub q: usize,
    pub k: usize,
    pub n: usize,
    pub trials: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub mode: RecoveryMode,
    #[serde(default)]
    pub lambda_policy: LambdaPolicy,
    #[serde(default)]
    pub draw: DrawSettings,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupportTrialsResult {
    pub spec: SupportTrialsSpec,
    pub theory_c: Option<f64>,
    pub outcomes: Vec<TrialOutcome>,
}

fn indices_str(s: &SupportSet) -> String {
    s.indices().iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ")
}

impl SupportTrialsResult {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["trial", "seed", "true_support", "selected_support", "recovered", "converged"])
            .map_err(csv_err)?;
        for (t, o) in self.outcomes.iter().enumerate() {
            w.write_record([
                t.to_string(),
                o.seed.to_string(),
                indices_str(&o.true_support),
                o.selected.as_ref().map_or_else(|| "failed".to_string(), indices_str),
                o.recovered().to_string(),
                o.converged.to_string(),
            ])
            .map_err(csv_err)?;
        }
        finish(w)
    }
}

pub fn run_support_trials(spec: &SupportTrialsSpec) -> Result<SupportTrialsResult> {
    if spec.trials == 0 || spec.k > spec.p || spec.q < 2 {
        return Err(Error::invalid("trials ≥ 1, k ≤ p and q ≥ 2 required"));
    }
    let theory_c = match &spec.lambda_policy {
        LambdaPolicy::Theory { c } => Some(c.unwrap_or(DEFAULT_THEORY_C)),
        _ => None,
    };
    let c = theory_c.unwrap_or(DEFAULT_THEORY_C);
    let outcomes = (0..spec.trials)
        .into_par_iter()
        .map(|t| {
            run_trial(
                spec.p,
                spec.q,
                spec.k,
                spec.n,
                trial_seed(spec.base_seed, spec.n, spec.p, t),
                &spec.draw,
                spec.mode,
                &spec.lambda_policy,
                c,
            )
        })
        .collect();
    Ok(SupportTrialsResult {
        spec: spec.clone(),
        theory_c,
        outcomes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingEstimator {
    /// Joint nonconvex fit at the theory λ.
    #[default]
    Joint,
    /// Least squares on the true support.
    OracleRefit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingSpec {
    pub p: usize,
    pub k: usize,
    pub q: usize,
    pub n_list: Vec<usize>,
    pub trials: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub draw: DrawSettings,
    #[serde(default = "default_c")]
    pub c: f64,
    #[serde(default)]
    pub estimator: ScalingEstimator,
}

fn default_c() -> f64 {
    DEFAULT_THEORY_C
}

impl ScalingSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_list.is_empty() || self.n_list.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("n_list must be nonempty and strictly ascending"));
        }
        if self.n_list[0] < 4 * self.k {
            return Err(Error::invalid("every n must be at least 4k"));
        }
        if self.trials == 0 || self.k > self.p || self.q < 2 || !(self.c > 0.0) {
            return Err(Error::invalid("trials ≥ 1, k ≤ p, q ≥ 2 and c > 0 required"));
        }
        Ok(())
    }
}

/// One draw of a scaling sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingDraw {
    pub n: usize,
    pub trial: usize,
    pub seed: u64,
    /// `‖θ̂ − θ*‖_{∞,∞}`; NaN when the fit failed.
    pub err_inf_inf: f64,
    /// Largest pairwise `|ÂTE − ATE|` with the sample covariate mean.
    pub ate_error: f64,
    /// `‖μ‖₁ · Σₜ ‖θ̂:ₜ − θ*:ₜ‖_∞` with `μ` restricted to the estimated and true supports.
    pub ate_bound: f64,
    /// `‖μ_S‖₁` over the true support.
    pub mu_true_l1: f64,
}

impl ScalingDraw {
    pub fn bound_holds(&self) -> bool {
        self.ate_error <= self.ate_bound * (1.0 + 1e-12) + 1e-15
    }

    /// ATE error relative to the size of the covariate mean on the true support.
    pub fn normalized_ate_error(&self) -> f64 {
        if self.mu_true_l1 > 0.0 {
            self.ate_error / self.mu_true_l1
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingRow {
    pub n: usize,
    pub trials: usize,
    pub failures: usize,
    pub mean_err_inf_inf: f64,
    pub mean_normalized_ate_error: f64,
    pub bound_violations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingResult {
    pub spec: ScalingSpec,
    pub draws: Vec<ScalingDraw>,
    pub rows: Vec<ScalingRow>,
    /// Log-log slope of mean error against n; absent for a single n.
    pub slope: Option<f64>,
    pub ate_slope: Option<f64>,
}

/// Ordinary least-squares slope of `ln y` on `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() < 2 || x.len() != y.len() || y.iter().any(|v| !(*v > 0.0)) {
        return None;
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let m = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / m, ly.iter().sum::<f64>() / m);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

fn scaling_draw(spec: &ScalingSpec, n: usize, trial: usize) -> ScalingDraw {
    let seed = trial_seed(spec.base_seed, n, spec.p, trial);
    let failed = ScalingDraw {
        n,
        trial,
        seed,
        err_inf_inf: f64::NAN,
        ate_error: f64::NAN,
        ate_bound: f64::NAN,
        mu_true_l1: f64::NAN,
    };
    let Ok(draw) = generate(&spec.draw.synth(spec.p, spec.q, spec.k, n, seed)) else {
        return failed;
    };
    let Ok(cohorts) = draw.data.partition_by_treatment() else {
        return failed;
    };
    let theta = match spec.estimator {
        ScalingEstimator::OracleRefit => fit_restricted(&cohorts, &draw.true_support),
        ScalingEstimator::Joint => {
            let n_min = cohorts.min_cohort_size();
            let mut cfg = SelectionConfig::fixed(SelectionMode::Joint, theory_lambda(spec.c, spec.q, spec.p, n_min));
            cfg.standardize = false;
            cfg.penalty = spec.draw.penalty;
            select(&cohorts, &cfg).map(|r| r.theta)
        }
    };
    let Ok(theta) = theta else {
        return failed;
    };
    let diff = theta.sub(&draw.true_theta).expect("same shape");
    let mu = draw.data.covariate_means();
    let union = theta.support().union(&draw.true_support);
    let mu_l1 = |s: &SupportSet| s.indices().iter().map(|&i| mu[i].abs()).sum::<f64>();
    let col_inf: f64 = (0..spec.q)
        .map(|t| diff.column(t).iter().fold(0.0f64, |m, v| m.max(v.abs())))
        .sum();
    let est = plugin_effects(&theta, mu.view()).expect("shapes match");
    let mut ate_error = 0.0f64;
    for a in 0..spec.q {
        for b in 0..spec.q {
            ate_error = ate_error.max((est.pairwise[[a, b]] - draw.sample_ate[[a, b]]).abs());
        }
    }
    ScalingDraw {
        n,
        trial,
        seed,
        err_inf_inf: diff.norm_inf_inf(),
        ate_error,
        ate_bound: mu_l1(&union) * col_inf,
        mu_true_l1: mu_l1(&draw.true_support),
    }
}

/// Estimation error against `n` at fixed `(p, k, q)`.
pub fn run_scaling_sweep(spec: &ScalingSpec) -> Result<ScalingResult> {
    spec.validate()?;
    let jobs: Vec<(usize, usize)> = spec
        .n_list
        .iter()
        .flat_map(|&n| (0..spec.trials).map(move |t| (n, t)))
        .collect();
    let draws: Vec<ScalingDraw> = jobs.par_iter().map(|&(n, t)| scaling_draw(spec, n, t)).collect();
    let rows: Vec<ScalingRow> = draws
        .chunks(spec.trials)
        .map(|ds| {
            let ok: Vec<&ScalingDraw> = ds.iter().filter(|d| d.err_inf_inf.is_finite()).collect();
            let m = ok.len().max(1) as f64;
            ScalingRow {
                n: ds[0].n,
                trials: ds.len(),
                failures: ds.len() - ok.len(),
                mean_err_inf_inf: ok.iter().map(|d| d.err_inf_inf).sum::<f64>() / m,
                mean_normalized_ate_error: ok.iter().map(|d| d.normalized_ate_error()).sum::<f64>() / m,
                bound_violations: ok.iter().filter(|d| !d.bound_holds()).count(),
            }
        })
        .collect();
    let ns: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let slope = log_log_slope(&ns, &rows.iter().map(|r| r.mean_err_inf_inf).collect::<Vec<_>>());
    let ate_slope = log_log_slope(&ns, &rows.iter().map(|r| r.mean_normalized_ate_error).collect::<Vec<_>>());
    Ok(ScalingResult {
        spec: spec.clone(),
        draws,
        rows,
        slope,
        ate_slope,
    })
}

impl ScalingResult {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["n", "trials", "failures", "mean_err_inf_inf", "mean_normalized_ate_error", "bound_violations"])
            .map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.n.to_string(),
                r.trials.to_string(),
                r.failures.to_string(),
                r.mean_err_inf_inf.to_string(),
                r.mean_normalized_ate_error.to_string(),
                r.bound_violations.to_string(),
            ])
            .map_err(csv_err)?;
        }
        finish(w)
    }

    pub fn draws_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["n", "trial", "seed", "err_inf_inf", "ate_error", "ate_bound", "mu_true_l1"])
            .map_err(csv_err)?;
        for d in &self.draws {
            w.write_record([
                d.n.to_string(),
                d.trial.to_string(),
                d.seed.to_string(),
                d.err_inf_inf.to_string(),
                d.ate_error.to_string(),
                d.ate_bound.to_string(),
                d.mu_true_l1.to_string(),
            ])
            .map_err(csv_err)?;
        }
        finish(w)
    }

    pub fn summary_toml(&self) -> String {
        let mut s = String::new();
        match self.slope {
            Some(v) => s.push_str(&format!("slope = {v:?}\n")),
            None => s.push_str("# slope undefined for a single n\n"),
        }
        if let Some(v) = self.ate_slope {
            s.push_str(&format!("normalized_ate_slope = {v:?}\n"));
        }
        let violations: usize = self.rows.iter().map(|r| r.bound_violations).sum();
        s.push_str(&format!("bound_violations = {violations}\n"));
        s
    }
}

/// Any replayable experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ExperimentSpec {
    PhaseDiagram(PhaseDiagramSpec),
    Scaling(ScalingSpec),
    SupportTrials(SupportTrialsSpec),
}

impl ExperimentSpec {
    pub fn base_seed(&self) -> u64 {
        match self {
            Self::PhaseDiagram(s) => s.base_seed,
            Self::Scaling(s) => s.base_seed,
            Self::SupportTrials(s) => s.base_seed,
        }
    }
}

/// Sidecar written next to every result file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub command: String,
    pub code_version: String,
    pub base_seed: u64,
    /// Values derived during the run, e.g. a calibrated theory constant.
    #[serde(default)]
    pub resolved: std::collections::BTreeMap<String, String>,
    pub experiment: ExperimentSpec,
}

impl RunMetadata {
    pub fn new(command: &str, experiment: ExperimentSpec) -> Self {
        Self {
            command: command.to_string(),
            code_version: CODE_VERSION.to_string(),
            base_seed: experiment.base_seed(),
            resolved: Default::default(),
            experiment,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Data(format!("metadata serialization: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Data(format!("metadata parse: {e}")))
    }
}

/// Result files of one run, keyed by the suffix appended to the output stem
/// (empty for the main file).
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub files: Vec<(String, String)>,
    pub metadata: RunMetadata,
}

impl ExperimentOutput {
    pub fn main(&self) -> &str {
        &self.files[0].1
    }
}

/// Runs an experiment and renders its result files.
pub fn execute(command: &str, experiment: &ExperimentSpec) -> Result<ExperimentOutput> {
    let mut meta = RunMetadata::new(command, experiment.clone());
    let files = match experiment {
        ExperimentSpec::PhaseDiagram(spec) => {
            let res = run_phase_diagram(spec)?;
            if let Some(c) = res.theory_c {
                meta.resolved.insert("theory_c".into(), format!("{c:?}"));
                meta.resolved.insert(
                    "lambda_rule".into(),
                    "c * sqrt(group_size * ln p / smallest cohort size); calibrated stand-in".into(),
                );
            }
            vec![(String::new(), res.to_csv()?)]
        }
        ExperimentSpec::Scaling(spec) => {
            let res = run_scaling_sweep(spec)?;
            vec![
                (String::new(), res.to_csv()?),
                ("draws.csv".into(), res.draws_csv()?),
                ("summary.toml".into(), res.summary_toml()),
            ]
        }
        ExperimentSpec::SupportTrials(spec) => {
            let res = run_support_trials(spec)?;
            if let Some(c) = res.theory_c {
                meta.resolved.insert("theory_c".into(), format!("{c:?}"));
            }
            vec![(String::new(), res.to_csv()?)]
        }
    };
    Ok(ExperimentOutput { files, metadata: meta })
}

/// Replays a run from its metadata sidecar.
pub fn rerun_from_metadata(meta: &RunMetadata) -> Result<ExperimentOutput> {
    execute(&meta.command, &meta.experiment)
}

/// Estimation error of an oracle least-squares refit; exposed for checks of
/// the noiseless floor.
pub fn oracle_refit_error(draw: &SynthDraw) -> Result<f64> {
    let theta: CoefficientMatrix<f64> = fit_restricted(&draw.data.partition_by_treatment()?, &draw.true_support)?;
    Ok(theta.sub(&draw.true_theta)?.norm_inf_inf())
}
