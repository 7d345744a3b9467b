use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use jointsparse::effects::{two_stage_pipeline, EffectMethod, PipelineConfig, PropensityCovariates};
use jointsparse::experiments::{
    default_calibration_grid, execute, DrawSettings, ExperimentOutput, ExperimentSpec, LambdaPolicy,
    PhaseDiagramSpec, RecoveryMode, RunMetadata, ScalingEstimator, ScalingSpec, SupportTrialsSpec,
};
use jointsparse::io::{export_csv, ingest_csv, truth_toml, write_support};
use jointsparse::selection::{select_pooled, CvPolicy, CvRule, LambdaGrid, SelectionConfig, SelectionMode};
use jointsparse::synthgen::{generate, generate_semisynthetic, ihdp_like_standin, SemiSynthSpec, SynthSpec};
use jointsparse::{Error, PenaltyKind, SolverConfig};

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

#[derive(Parser)]
#[command(name = "jointsparse", version, about = "Joint-sparsity covariate selection and treatment-effect estimation")]
#[command(args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Select a covariate set from a CSV file.
    Select(SelectCmd),
    /// Estimate treatment effects with repeated select/estimate splits.
    Estimate(EstimateCmd),
    /// Exact-recovery probability over an (n, p) grid of synthetic draws.
    PhaseDiagram(PhaseCmd),
    /// Estimation error against n at fixed (p, k, q).
    Scaling(ScalingCmd),
    /// Repeated selection at one (n, p), keeping every trial's support.
    SupportTrials(SupportTrialsCmd),
    /// Write a synthetic dataset and its ground truth.
    Generate(GenerateCmd),
    /// Replay an experiment from its metadata sidecar.
    Rerun(RerunCmd),
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    /// TOML file whose keys are flag names; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    treatment: String,
    #[arg(long)]
    outcome: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Joint,
    Independent,
    TreatmentRegression,
}

#[derive(Clone, Copy, ValueEnum)]
enum PenaltyArg {
    Mcp,
    Scad,
    L1,
}

impl From<PenaltyArg> for PenaltyKind {
    fn from(p: PenaltyArg) -> Self {
        match p {
            PenaltyArg::Mcp => PenaltyKind::Mcp,
            PenaltyArg::Scad => PenaltyKind::Scad,
            PenaltyArg::L1 => PenaltyKind::L1,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CvRuleArg {
    OneSe,
    Min,
}

#[derive(Args, Clone)]
struct SelectionArgs {
    #[arg(long, value_enum, default_value = "joint")]
    mode: ModeArg,
    /// Covariates kept by the treatment-regression baseline.
    #[arg(long)]
    top_m: Option<usize>,
    /// Cross-validation folds (default 5 unless --lambda is given).
    #[arg(long, conflicts_with = "lambda")]
    cv: Option<usize>,
    /// Pick the largest λ within one standard error of the best score, or the best score itself.
    #[arg(long, value_enum, default_value = "one-se")]
    cv_rule: CvRuleArg,
    /// Fixed regularization level.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, default_value_t = 30)]
    lambda_count: usize,
    #[arg(long, default_value_t = 0.01)]
    lambda_ratio: f64,
    #[arg(long, value_enum, default_value = "mcp")]
    penalty: PenaltyArg,
    #[arg(long)]
    gamma: Option<f64>,
    /// Fit on raw covariates instead of centered, unit-variance ones.
    #[arg(long)]
    no_standardize: bool,
    #[arg(long, default_value_t = 5000)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-7)]
    tol: f64,
}

impl SelectionArgs {
    fn config(&self, seed: u64) -> Result<SelectionConfig<f64>, Error> {
        let mode = match self.mode {
            ModeArg::Joint => SelectionMode::Joint,
            ModeArg::Independent => SelectionMode::Independent,
            ModeArg::TreatmentRegression => SelectionMode::TreatmentRegression {
                top_m: self
                    .top_m
                    .ok_or_else(|| Error::InvalidInput("--top-m is required for treatment-regression".into()))?,
            },
        };
        let (grid, cv) = match self.lambda {
            Some(l) => (LambdaGrid::Explicit(vec![l]), CvPolicy::FirstValue),
            None => (
                LambdaGrid::Auto {
                    count: self.lambda_count,
                    min_ratio: self.lambda_ratio,
                },
                CvPolicy::Folds(self.cv.unwrap_or(5)),
            ),
        };
        Ok(SelectionConfig {
            mode,
            lambda_grid: grid,
            cv,
            cv_rule: match self.cv_rule {
                CvRuleArg::OneSe => CvRule::OneStandardError,
                CvRuleArg::Min => CvRule::Minimum,
            },
            penalty: self.penalty.into(),
            gamma: self.gamma,
            solver: SolverConfig {
                max_iters: self.max_iters,
                tol: self.tol,
                ..SolverConfig::default()
            },
            seed,
            standardize: !self.no_standardize,
            ..SelectionConfig::default()
        })
    }
}

#[derive(Args)]
struct SelectCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    selection: SelectionArgs,
    /// Support file, one selected column name per line.
    #[arg(long, default_value = "support.txt")]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Plugin,
    Dr,
}

#[derive(Args)]
struct EstimateCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    selection: SelectionArgs,
    #[arg(long, value_enum, default_value = "plugin")]
    method: MethodArg,
    #[arg(long, default_value_t = 0.2)]
    select_frac: f64,
    #[arg(long, default_value_t = 20)]
    splits: usize,
    /// Fit the propensity model on every covariate instead of the selected set.
    #[arg(long)]
    propensity_all: bool,
    #[arg(long, default_value_t = 1e-3)]
    propensity_ridge: f64,
    /// Leave the constant column out of the outcome model.
    #[arg(long)]
    no_intercept: bool,
    #[arg(long, default_value = "effects.csv")]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Theory,
    Cv,
    Fixed,
}

#[derive(Clone, Copy, ValueEnum)]
enum RecoveryArg {
    Joint,
    Independent,
}

impl From<RecoveryArg> for RecoveryMode {
    fn from(m: RecoveryArg) -> Self {
        match m {
            RecoveryArg::Joint => RecoveryMode::Joint,
            RecoveryArg::Independent => RecoveryMode::Independent,
        }
    }
}

#[derive(Args, Clone)]
struct DrawArgs {
    #[arg(long, default_value_t = 1.0)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 1.0)]
    coef_scale: f64,
    /// Minimum row norm of the true coefficients.
    #[arg(long, default_value_t = 0.0)]
    beta_min: f64,
    #[arg(long, value_enum, default_value = "mcp")]
    penalty: PenaltyArg,
}

impl DrawArgs {
    fn settings(&self) -> DrawSettings {
        DrawSettings {
            noise_sigma: self.noise_sigma,
            coef_scale: self.coef_scale,
            beta_min: self.beta_min,
            penalty: self.penalty.into(),
        }
    }
}

#[derive(Args, Clone)]
struct PolicyArgs {
    #[arg(long, value_enum, default_value = "theory")]
    lambda_policy: PolicyArg,
    /// Theory constant; calibrated when omitted.
    #[arg(long)]
    c: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, default_value_t = 5)]
    folds: usize,
}

impl PolicyArgs {
    fn policy(&self) -> Result<LambdaPolicy, Error> {
        Ok(match self.lambda_policy {
            PolicyArg::Theory => LambdaPolicy::Theory { c: self.c },
            PolicyArg::Cv => LambdaPolicy::Cv { folds: self.folds },
            PolicyArg::Fixed => LambdaPolicy::Fixed {
                lambda: self
                    .lambda
                    .ok_or_else(|| Error::InvalidInput("--lambda is required for the fixed policy".into()))?,
            },
        })
    }
}

#[derive(Args)]
struct PhaseCmd {
    /// Covariate dimensions, e.g. 32,128,512.
    #[arg(long = "p", required = true)]
    p_grid: String,
    /// Sample sizes; `a,b,...,z` continues the ratio b/a up to z.
    #[arg(long = "n", required = true)]
    n_grid: String,
    #[arg(long)]
    q: usize,
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 25)]
    trials: usize,
    #[arg(long, value_enum, default_value = "joint")]
    mode: RecoveryArg,
    #[command(flatten)]
    policy: PolicyArgs,
    #[command(flatten)]
    draw: DrawArgs,
    #[arg(long, default_value = "phase_diagram.csv")]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimatorArg {
    Joint,
    OracleRefit,
}

#[derive(Args)]
struct ScalingCmd {
    #[arg(long)]
    p: usize,
    #[arg(long)]
    k: usize,
    #[arg(long)]
    q: usize,
    /// Sample sizes; `a,b,...,z` continues the ratio b/a up to z.
    #[arg(long, required = true)]
    n_list: String,
    #[arg(long, default_value_t = 30)]
    trials: usize,
    #[arg(long, default_value_t = jointsparse::experiments::DEFAULT_THEORY_C)]
    c: f64,
    #[arg(long, value_enum, default_value = "joint")]
    estimator: EstimatorArg,
    #[command(flatten)]
    draw: DrawArgs,
    #[arg(long, default_value = "scaling.csv")]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SupportTrialsCmd {
    #[arg(long)]
    p: usize,
    #[arg(long)]
    q: usize,
    #[arg(long)]
    k: usize,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, value_enum, default_value = "joint")]
    mode: RecoveryArg,
    #[command(flatten)]
    policy: PolicyArgs,
    #[command(flatten)]
    draw: DrawArgs,
    #[arg(long, default_value = "support_trials.csv")]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct GenerateCmd {
    #[arg(long, default_value_t = 64)]
    p: usize,
    #[arg(long, default_value_t = 2)]
    q: usize,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 1.0)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 1.0)]
    coef_scale: f64,
    #[arg(long)]
    phi_scale: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    beta_min: f64,
    /// Use IHDP-shaped stand-in covariates (p = 25, binary treatment) with a
    /// sparse linear response.
    #[arg(long)]
    ihdp_standin: bool,
    #[arg(long, default_value = "synthetic.csv")]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct RerunCmd {
    #[arg(long)]
    metadata: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

/// Expands `a,b,...,z` geometrically; plain lists pass through.
fn parse_grid(text: &str) -> Result<Vec<usize>, Error> {
    let parts: Vec<&str> = text.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::InvalidInput(format!("'{s}' is not a positive integer")))
    };
    if let Some(dots) = parts.iter().position(|s| *s == "...") {
        if dots != 2 || parts.len() != 4 {
            return Err(Error::InvalidInput("expected a,b,...,z".into()));
        }
        let (a, b, z) = (num(parts[0])?, num(parts[1])?, num(parts[3])?);
        if a == 0 || b <= a || b % a != 0 {
            return Err(Error::InvalidInput("a,b,...,z needs b a positive multiple of a".into()));
        }
        let ratio = b / a;
        let mut out = vec![a];
        while *out.last().unwrap() < z {
            out.push(out.last().unwrap() * ratio);
        }
        if *out.last().unwrap() != z {
            return Err(Error::InvalidInput(format!("{z} is not reached from {a} by factors of {ratio}")));
        }
        return Ok(out);
    }
    parts.into_iter().map(num).collect()
}

/// Sibling path with a replaced extension, e.g. `pd.csv` → `pd.meta.toml`.
fn sibling(out: &Path, ext: &str) -> PathBuf {
    out.with_extension(ext)
}

/// Every resolved argument of the subcommand, for the metadata sidecar.
fn resolved_args(matches: &ArgMatches) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for id in matches.ids() {
        let key = id.as_str();
        // Group ids are the flattened struct names.
        if matches!(key, "config" | "threads") || key.starts_with(char::is_uppercase) {
            continue;
        }
        if let Ok(Some(vals)) = matches.try_get_raw(key) {
            let v: Vec<String> = vals.map(|s| s.to_string_lossy().into_owned()).collect();
            out.insert(key.to_string(), v.join(","));
        }
    }
    out
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(Error::from)
}

fn write_experiment(out: &Path, output: &ExperimentOutput) -> Result<(), Error> {
    for (suffix, text) in &output.files {
        let path = if suffix.is_empty() { out.to_path_buf() } else { sibling(out, suffix) };
        write(&path, text)?;
    }
    write(&sibling(out, "meta.toml"), &output.metadata.to_toml()?)
}

fn label_map(labels: &[String]) -> String {
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{l}={i}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn data_metadata(command: &str, seed: u64, args: BTreeMap<String, String>, extra: BTreeMap<String, String>) -> Result<String, Error> {
    let mut table = toml::Table::new();
    table.insert("command".into(), command.into());
    table.insert("code_version".into(), jointsparse::experiments::CODE_VERSION.into());
    table.insert("base_seed".into(), toml::Value::Integer(seed as i64));
    let to_table = |m: BTreeMap<String, String>| m.into_iter().map(|(k, v)| (k, toml::Value::String(v))).collect::<toml::Table>();
    table.insert("args".into(), toml::Value::Table(to_table(args)));
    table.insert("resolved".into(), toml::Value::Table(to_table(extra)));
    toml::to_string(&table).map_err(|e| Error::Data(e.to_string()))
}

fn run_select(cmd: &SelectCmd, matches: &ArgMatches) -> Result<(), Error> {
    let data = ingest_csv(&cmd.data.data, &cmd.data.treatment, &cmd.data.outcome)?;
    let cfg = cmd.selection.config(cmd.common.seed)?;
    let res = select_pooled(&data, &cfg)?;
    match res.chosen_lambda {
        Some(l) => println!("chosen lambda: {l}"),
        None => println!("chosen lambda: none (treatment-regression ranking)"),
    }
    println!("selected {} of {} covariates", res.support.len(), data.p());
    for &i in res.support.indices() {
        println!("  {}", data.covariate_names()[i]);
    }
    if !res.converged {
        eprintln!("warning: solver did not converge at the chosen lambda");
    }
    write_support(&cmd.out, &res.support, data.covariate_names())?;
    let mut extra = BTreeMap::new();
    extra.insert("treatment_labels".into(), label_map(data.treatment_labels()));
    extra.insert("standardized".into(), cfg.standardize.to_string());
    if let Some(l) = res.chosen_lambda {
        extra.insert("chosen_lambda".into(), format!("{l:?}"));
    }
    write(&sibling(&cmd.out, "meta.toml"), &data_metadata("select", cmd.common.seed, resolved_args(matches), extra)?)
}

fn run_estimate(cmd: &EstimateCmd, matches: &ArgMatches) -> Result<(), Error> {
    let data = ingest_csv(&cmd.data.data, &cmd.data.treatment, &cmd.data.outcome)?;
    let cfg = PipelineConfig {
        selection_fraction: cmd.select_frac,
        n_splits: cmd.splits,
        selection: cmd.selection.config(cmd.common.seed)?,
        method: match cmd.method {
            MethodArg::Plugin => EffectMethod::Plugin,
            MethodArg::Dr => EffectMethod::DoublyRobust,
        },
        seed: cmd.common.seed,
        intercept: !cmd.no_intercept,
        propensity_ridge: cmd.propensity_ridge,
        propensity_covariates: if cmd.propensity_all {
            PropensityCovariates::All
        } else {
            PropensityCovariates::Selected
        },
        ..PipelineConfig::default()
    };
    let est = two_stage_pipeline(&data, &cfg)?;
    let labels = data.treatment_labels();
    let mut w = String::from("t,t_prime,estimate,std_dev\n");
    println!("{:>12} {:>12} {:>14} {:>12}", "t", "t'", "estimate", "std dev");
    for a in 0..data.q() {
        for b in 0..data.q() {
            if a == b {
                continue;
            }
            let sd = est.std_dev.as_ref().map_or(f64::NAN, |s| s[[a, b]]);
            w.push_str(&format!("{},{},{},{}\n", labels[a], labels[b], est.pairwise[[a, b]], sd));
            if a > b {
                println!("{:>12} {:>12} {:>14.4} {:>12.4}", labels[a], labels[b], est.pairwise[[a, b]], sd);
            }
        }
    }
    let mean_size = est.support_sizes.iter().sum::<usize>() as f64 / est.support_sizes.len() as f64;
    println!("mean selected set size over {} splits: {mean_size:.2}", est.splits);
    for warning in &est.warnings {
        eprintln!("warning: {warning}");
    }
    write(&cmd.out, &w)?;
    let mut extra = BTreeMap::new();
    extra.insert("treatment_labels".into(), label_map(labels));
    extra.insert("mean_support_size".into(), format!("{mean_size:?}"));
    write(&sibling(&cmd.out, "meta.toml"), &data_metadata("estimate", cmd.common.seed, resolved_args(matches), extra)?)
}

fn run_phase(cmd: &PhaseCmd) -> Result<(), Error> {
    let spec = PhaseDiagramSpec {
        n_grid: parse_grid(&cmd.n_grid)?,
        p_grid: parse_grid(&cmd.p_grid)?,
        q: cmd.q,
        k: cmd.k,
        trials: cmd.trials,
        mode: cmd.mode.into(),
        base_seed: cmd.common.seed,
        lambda_policy: cmd.policy.policy()?,
        draw: cmd.draw.settings(),
        calibration_grid: default_calibration_grid(),
    };
    let output = execute("phase-diagram", &ExperimentSpec::PhaseDiagram(spec))?;
    print!("{}", output.main());
    if let Some(c) = output.metadata.resolved.get("theory_c") {
        println!("theory constant: {c}");
    }
    write_experiment(&cmd.out, &output)
}

fn run_scaling(cmd: &ScalingCmd) -> Result<(), Error> {
    let spec = ScalingSpec {
        p: cmd.p,
        k: cmd.k,
        q: cmd.q,
        n_list: parse_grid(&cmd.n_list)?,
        trials: cmd.trials,
        base_seed: cmd.common.seed,
        draw: cmd.draw.settings(),
        c: cmd.c,
        estimator: match cmd.estimator {
            EstimatorArg::Joint => ScalingEstimator::Joint,
            EstimatorArg::OracleRefit => ScalingEstimator::OracleRefit,
        },
    };
    let output = execute("scaling", &ExperimentSpec::Scaling(spec))?;
    print!("{}", output.main());
    for (suffix, text) in &output.files {
        if suffix == "summary.toml" {
            print!("{text}");
        }
    }
    write_experiment(&cmd.out, &output)
}

fn run_support_trials(cmd: &SupportTrialsCmd) -> Result<(), Error> {
    let spec = SupportTrialsSpec {
        p: cmd.p,
        q: cmd.q,
        k: cmd.k,
        n: cmd.n,
        trials: cmd.trials,
        base_seed: cmd.common.seed,
        mode: cmd.mode.into(),
        lambda_policy: cmd.policy.policy()?,
        draw: cmd.draw.settings(),
    };
    let output = execute("support-trials", &ExperimentSpec::SupportTrials(spec))?;
    let recovered = output.main().lines().skip(1).filter(|l| l.contains(",true,")).count();
    println!("recovered the true support in {recovered} of {} trials", cmd.trials);
    write_experiment(&cmd.out, &output)
}

fn run_generate(cmd: &GenerateCmd) -> Result<(), Error> {
    let draw = if cmd.ihdp_standin {
        let (x, t) = ihdp_like_standin(cmd.n, cmd.common.seed);
        let spec = SemiSynthSpec {
            k: cmd.k,
            seed: cmd.common.seed,
            noise_sigma: cmd.noise_sigma,
            coef_scale: cmd.coef_scale,
            beta_min: cmd.beta_min,
        };
        generate_semisynthetic(x, t, &spec)?
    } else {
        let spec = SynthSpec {
            noise_sigma: cmd.noise_sigma,
            coef_scale: cmd.coef_scale,
            phi_scale: cmd.phi_scale,
            beta_min: cmd.beta_min,
            ..SynthSpec::new(cmd.p, cmd.q, cmd.k, cmd.n, cmd.common.seed)
        };
        generate(&spec)?
    };
    export_csv(&draw.data, &cmd.out, "t", "y")?;
    write(&sibling(&cmd.out, "truth.toml"), &truth_toml(&draw)?)?;
    println!(
        "wrote {} rows, p = {}, q = {}, true support {}",
        draw.data.n(),
        draw.data.p(),
        draw.data.q(),
        draw.true_support
    );
    Ok(())
}

fn run_rerun(cmd: &RerunCmd) -> Result<(), Error> {
    let text = fs::read_to_string(&cmd.metadata)?;
    let meta = RunMetadata::from_toml(&text)?;
    let output = jointsparse::experiments::rerun_from_metadata(&meta)?;
    write_experiment(&cmd.out, &output)?;
    println!("replayed '{}' into {}", meta.command, cmd.out.display());
    Ok(())
}

/// Inserts the flags from `--config <file>` right after the subcommand name,
/// so that explicit flags (which come later) override them.
fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let mut path = None;
    for (i, a) in args.iter().enumerate() {
        let s = a.to_string_lossy();
        if s == "--config" {
            path = args.get(i + 1).cloned();
        } else if let Some(p) = s.strip_prefix("--config=") {
            path = Some(OsString::from(p));
        }
    }
    let Some(path) = path else {
        return Ok(args);
    };
    let text = fs::read_to_string(&path).map_err(|e| format!("cannot read config {}: {e}", path.to_string_lossy()))?;
    let table: toml::Table = text.parse().map_err(|e| format!("invalid config: {e}"))?;
    let mut extra = Vec::new();
    for (key, value) in table {
        let flag = format!("--{}", key.replace('_', "-"));
        let rendered = match value {
            toml::Value::Boolean(true) => {
                extra.push(OsString::from(flag));
                continue;
            }
            toml::Value::Boolean(false) => continue,
            toml::Value::String(s) => s,
            toml::Value::Integer(i) => i.to_string(),
            toml::Value::Float(f) => f.to_string(),
            toml::Value::Array(items) => items
                .iter()
                .map(|v| match v {
                    toml::Value::String(s) => s.clone(),
                    other => other.to_string(),
                })
                .collect::<Vec<_>>()
                .join(","),
            other => return Err(format!("config key '{key}' has unsupported value {other}")),
        };
        extra.push(OsString::from(format!("{flag}={rendered}")));
    }
    let mut out = args;
    let at = 2.min(out.len());
    out.splice(at..at, extra);
    Ok(out)
}

fn exit_code(err: &Error) -> u8 {
    if err.is_numerical() {
        EXIT_NUMERICAL
    } else if matches!(err, Error::InvalidInput(_)) {
        EXIT_USAGE
    } else {
        EXIT_DATA
    }
}

fn main() -> ExitCode {
    let args = match expand_config(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let matches = Cli::command().get_matches_from(args);
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let sub = matches.subcommand().map(|(_, m)| m.clone()).expect("subcommand required");
    let common = match &cli.command {
        Command::Select(c) => &c.common,
        Command::Estimate(c) => &c.common,
        Command::PhaseDiagram(c) => &c.common,
        Command::Scaling(c) => &c.common,
        Command::SupportTrials(c) => &c.common,
        Command::Generate(c) => &c.common,
        Command::Rerun(c) => &c.common,
    };
    if let Some(t) = common.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: cannot configure {t} threads: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    let result = match &cli.command {
        Command::Select(c) => run_select(c, &sub),
        Command::Estimate(c) => run_estimate(c, &sub),
        Command::PhaseDiagram(c) => run_phase(c),
        Command::Scaling(c) => run_scaling(c),
        Command::SupportTrials(c) => run_support_trials(c),
        Command::Generate(c) => run_generate(c),
        Command::Rerun(c) => run_rerun(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
