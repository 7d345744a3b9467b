//! Acceptance run: one PASS/FAIL line per criterion, then a nonzero exit if
//! any criterion failed. Tolerances are fixed here, next to each check.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use jointsparse::effects::{
    dr_effects, fit_propensity, plugin_ate, plugin_effects, plugin_ite, two_stage_pipeline, EffectMethod,
    PipelineConfig, PropensityModel,
};
use jointsparse::experiments::{
    execute, mean_and_se, rerun_from_metadata, run_phase_diagram, run_scaling_sweep, trial_seed, DrawSettings,
    ExperimentOutput, ExperimentSpec, LambdaPolicy, PhaseDiagramSpec, RecoveryMode, RunMetadata, ScalingEstimator,
    ScalingSpec, SupportTrialsSpec,
};
use jointsparse::io::{ingest_csv, read_csv};
use jointsparse::prox::objective;
use jointsparse::synthgen::{generate, generate_semisynthetic, ihdp_like_standin, SemiSynthSpec, SynthSpec};
use jointsparse::{
    amenability_report, compute_moments, fit, fit_restricted, grad_loss, grad_shifted_loss, loss, prox_l12,
    select_pooled, Cohort, CoefficientMatrix, CohortDataset, MomentCache, Penalty, PooledDataset, RegularizerSpec,
    SelectionConfig, SelectionMode, SolverConfig, SupportSet,
};
use ndarray::{array, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Verdict {
    pass: bool,
    detail: String,
}

fn report(id: usize, title: &str, limit: Option<Duration>, run: impl FnOnce() -> Verdict) -> bool {
    let start = Instant::now();
    let v = run();
    let elapsed = start.elapsed();
    let in_time = limit.is_none_or(|l| elapsed <= l);
    let pass = v.pass && in_time;
    let budget = limit.map_or(String::new(), |l| format!(" / limit {:.0} s", l.as_secs_f64()));
    println!(
        "{} criterion {id:>2}: {title}: {} [{:.2} s{budget}]",
        if pass { "PASS" } else { "FAIL" },
        v.detail,
        elapsed.as_secs_f64()
    );
    pass
}

/// Closed-form comparison allowing only a few units of rounding.
fn near(a: f64, b: f64) -> bool {
    (a - b).abs() <= 8.0 * f64::EPSILON * b.abs().max(1.0)
}

#[derive(Default)]
struct Checklist {
    total: usize,
    failed: Vec<&'static str>,
}

impl Checklist {
    fn check(&mut self, name: &'static str, ok: bool) {
        self.total += 1;
        if !ok {
            self.failed.push(name);
        }
    }

    fn verdict(self) -> Verdict {
        Verdict {
            pass: self.failed.is_empty(),
            detail: if self.failed.is_empty() {
                format!("{}/{} examples", self.total, self.total)
            } else {
                format!("{} of {} failed: {}", self.failed.len(), self.total, self.failed.join(", "))
            },
        }
    }
}

fn single(g: f64, c: f64) -> MomentCache<f64> {
    MomentCache::from_parts(vec![array![[g]]], vec![array![c]]).unwrap()
}

fn closed_form_suite() -> Verdict {
    let mut s = Checklist::default();

    let pooled = PooledDataset::new(array![[1.0], [2.0], [3.0], [4.0]], vec![0, 1, 0, 1], array![1.0, 2.0, 3.0, 4.0], 2).unwrap();
    let cohorts = pooled.partition_by_treatment().unwrap();
    s.check(
        "partition keeps order",
        cohorts.sizes() == vec![2, 2] && cohorts.cohort(0).outcome == array![1.0, 3.0] && cohorts.cohort(1).outcome == array![2.0, 4.0],
    );
    let one_label = PooledDataset::new(array![[1.0], [2.0]], vec![0, 0], array![1.0, 2.0], 2).unwrap();
    s.check(
        "absent label is named",
        one_label.partition_by_treatment().is_err_and(|e| e.to_string().contains("label 1 absent")),
    );

    let ones = Cohort {
        design: array![[1.0], [1.0]],
        outcome: array![1.0, 1.0],
    };
    let m = compute_moments(&CohortDataset::new(vec![ones.clone(), ones]).unwrap());
    s.check("unit moments", m.gram(0) == array![[1.0]] && m.cross(0) == array![1.0]);
    let zeros = Cohort {
        design: Array2::zeros((3, 2)),
        outcome: array![1.0, -2.0, 0.5],
    };
    let m = compute_moments(&CohortDataset::new(vec![zeros.clone(), zeros]).unwrap());
    s.check("zero design moments", m.gram(1).iter().all(|v| *v == 0.0) && m.cross(1).iter().all(|v| *v == 0.0));

    let unit = single(1.0, 1.0);
    let zero1 = CoefficientMatrix::zeros(1, 1);
    let one1 = CoefficientMatrix::from_array(array![[1.0]]).unwrap();
    s.check("loss at zero", loss(&zero1, &unit).unwrap() == 0.0);
    s.check("loss at one", loss(&one1, &unit).unwrap() == -0.5);
    let cache = MomentCache::from_parts(
        vec![array![[2.0, 0.5], [0.5, 1.0]], array![[1.0, 0.0], [0.0, 3.0]]],
        vec![array![0.3, -0.7], array![1.1, 0.2]],
    )
    .unwrap();
    let zero2 = CoefficientMatrix::zeros(2, 2);
    let g0 = grad_loss(&zero2, &cache).unwrap();
    s.check("gradient at zero", g0.into_inner() == -cache.cross_matrix());
    s.check("gradient at stationary point", grad_loss(&one1, &unit).unwrap().into_inner() == array![[0.0]]);
    let mcp = RegularizerSpec::mcp(1.0, 3.0).unwrap();
    s.check(
        "shifted gradient at zero",
        grad_shifted_loss(&zero2, &cache, &mcp).unwrap() == grad_loss(&zero2, &cache).unwrap(),
    );
    let far = CoefficientMatrix::from_array(array![[3.0, 4.0], [0.0, 0.0]]).unwrap();
    let correction = grad_loss(&far, &cache).unwrap().into_inner() - grad_shifted_loss(&far, &cache, &mcp).unwrap().into_inner();
    s.check(
        "shifted gradient flat region",
        near(correction[[0, 0]], 3.0 / 5.0) && near(correction[[0, 1]], 4.0 / 5.0) && correction[[1, 0]] == 0.0,
    );

    let scad = RegularizerSpec::scad(1.0, 3.7).unwrap();
    s.check("mcp rho(0)", mcp.rho(0.0) == 0.0);
    s.check("mcp rho(1)", near(mcp.rho(1.0), 5.0 / 6.0));
    s.check("mcp rho(5)", near(mcp.rho(5.0), 1.5));
    s.check("scad rho(10)", near(scad.rho(10.0), 2.35));
    s.check("mcp rho'(1e-4)", near(mcp.rho_prime(1e-4).unwrap(), 1.0 - 1e-4 / 3.0));
    s.check("mcp rho'(4)", mcp.rho_prime(4.0).unwrap() == 0.0);
    s.check("scad rho'(2)", near(scad.rho_prime(2.0).unwrap(), 1.7 / 2.7));
    s.check("mcp q at origin", mcp.q_value(0.0).unwrap() == 0.0 && mcp.q_prime(0.0).unwrap() == 0.0);
    s.check("mcp q(3)", near(mcp.q_value(3.0).unwrap(), 1.5) && near(mcp.q_prime(3.0).unwrap(), 1.0));
    s.check("amenable at 1/3", amenability_report(&mcp, 1.0 / 3.0).all_passed());
    let weak = amenability_report(&mcp, 0.1);
    s.check("not amenable at 0.1", !weak.check("weak_convexity").unwrap().passed);

    let row = CoefficientMatrix::from_array(array![[3.0, 4.0]]).unwrap();
    let shrunk = prox_l12(&row, 1.0);
    s.check("prox shrinks", near(shrunk.values()[[0, 0]], 2.4) && near(shrunk.values()[[0, 1]], 3.2));
    let small = CoefficientMatrix::from_array(array![[0.6, 0.8]]).unwrap();
    s.check("prox zeroes", prox_l12(&small, 2.0).values().iter().all(|v| *v == 0.0));
    s.check("prox identity", prox_l12(&far, 0.0) == far);

    s.check("objective at zero", objective(&zero2, &cache, &mcp).unwrap() == 0.0);
    let flat = MomentCache::from_parts(vec![Array2::zeros((2, 2)); 2], vec![Array1::zeros(2); 2]).unwrap();
    let unit_row = CoefficientMatrix::from_array(array![[0.6, 0.8], [0.0, 0.0]]).unwrap();
    let big = RegularizerSpec::mcp(10.0, 3.0).unwrap();
    s.check("objective penalty", near(objective(&unit_row, &flat, &big).unwrap(), 10.0 - 1.0 / 6.0));

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data = random_cohorts(&mut rng, 5, 2, 40);
    let m = compute_moments(&data);
    let step = SolverConfig::default().resolved(&m).unwrap().step_init.unwrap();
    let max_cross = m.cross_matrix().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let huge = RegularizerSpec::mcp(2.0 * max_cross / step.min(1.0), 3.0).unwrap();
    let res = fit(&data, &huge, &SolverConfig::default()).unwrap();
    s.check("dominant lambda empties", res.support.is_empty() && res.theta_hat.norm_12() == 0.0);
    let full = fit_restricted(&data, &SupportSet::full(5)).unwrap();
    let ols_ok = (0..2).all(|j| {
        let c = data.cohort(j);
        let r = c.design.t().dot(&c.design).dot(&full.column(j)) - c.design.t().dot(&c.outcome);
        r.iter().all(|v| v.abs() < 1e-10)
    });
    s.check("full restricted fit is OLS", ols_ok);
    s.check(
        "empty restricted fit",
        fit_restricted(&data, &SupportSet::empty(5)).unwrap().values().iter().all(|v| *v == 0.0),
    );

    let d = generate(&SynthSpec::new(8, 2, 2, 120, 3)).unwrap();
    let cv = SelectionConfig {
        seed: 4,
        ..SelectionConfig::default()
    };
    s.check("selection deterministic", select_pooled(&d.data, &cv).unwrap() == select_pooled(&d.data, &cv).unwrap());
    let one_lambda = SelectionConfig {
        lambda_grid: jointsparse::LambdaGrid::Explicit(vec![0.3]),
        ..cv.clone()
    };
    let r = select_pooled(&d.data, &one_lambda).unwrap();
    s.check("single lambda grid", r.chosen_lambda == Some(0.3) && r.cv_table.len() == 1);
    let all = SelectionConfig::fixed(SelectionMode::TreatmentRegression { top_m: 8 }, 1.0);
    s.check("top_m = p", select_pooled(&d.data, &all).unwrap().support == SupportSet::full(8));

    let same = CoefficientMatrix::from_array(array![[1.5, 1.5], [-2.0, -2.0]]).unwrap();
    s.check("identical columns", plugin_ite(&same, array![0.3, 9.0].view(), 1, 0).unwrap() == 0.0);
    let th = CoefficientMatrix::from_array(array![[1.0, 2.0], [0.0, 0.0]]).unwrap();
    s.check("plugin ite arithmetic", plugin_ite(&th, array![1.0, 1.0].view(), 1, 0).unwrap() == 1.0);
    s.check("plugin self contrast", plugin_ite(&th, array![4.0, -1.0].view(), 1, 1).unwrap() == 0.0);
    s.check("plugin ate at zero mean", plugin_ate(&th, array![0.0, 0.0].view(), 1, 0).unwrap() == 0.0);
    s.check("plugin ate arithmetic", plugin_ate(&th, array![1.0, 1.0].view(), 1, 0).unwrap() == 1.0);

    let n = 100;
    let t: Vec<usize> = (0..n).map(|i| if i < 50 { 0 } else if i < 70 { 1 } else { 2 }).collect();
    let flat_x = PooledDataset::<f64>::new(Array2::zeros((n, 2)), t, Array1::zeros(n), 3).unwrap();
    let prop = fit_propensity(&flat_x, &SupportSet::full(2), 0.0).unwrap();
    let probs = prop.probabilities(array![0.0, 0.0].view());
    s.check(
        "intercept-only propensity",
        probs.iter().zip([0.5, 0.2, 0.3]).all(|(a, b)| (a - b).abs() < 1e-6),
    );
    let xs: Vec<f64> = (-5..5).map(|v| v as f64 + 0.5).collect();
    let sep = PooledDataset::new(
        Array2::from_shape_vec((10, 1), xs.clone()).unwrap(),
        xs.iter().map(|v| (*v > 0.0) as usize).collect(),
        Array1::zeros(10),
        2,
    )
    .unwrap();
    let sep_prop = fit_propensity(&sep, &SupportSet::full(1), 1.0).unwrap();
    let treated: Vec<f64> = xs.iter().map(|v| sep_prop.probabilities(array![*v].view())[1]).collect();
    s.check(
        "ridge separable propensity",
        sep_prop.coefficients.iter().all(|c| c.is_finite()) && treated.windows(2).all(|w| w[1] > w[0]),
    );
    let dr = dr_effects(&d.data, &d.true_support, &PropensityModel::uniform(8, 2).unwrap()).unwrap();
    s.check("dr self contrast", dr.contrast(1, 1).unwrap() == 0.0);
    s.check("dr antisymmetric", dr.contrast(1, 0).unwrap() == -dr.contrast(0, 1).unwrap());
    let plug = plugin_effects(&th, array![0.4, 2.0].view()).unwrap();
    s.check("plugin antisymmetric", plug.contrast(1, 0).unwrap() == -plug.contrast(0, 1).unwrap());
    let tiny = generate(&SynthSpec::new(4, 2, 1, 30, 5)).unwrap();
    let degenerate = PipelineConfig {
        selection_fraction: 0.999,
        n_splits: 2,
        selection: SelectionConfig::fixed(SelectionMode::Joint, 0.1),
        ..PipelineConfig::default()
    };
    s.check("degenerate split", two_stage_pipeline(&tiny.data, &degenerate).is_err());

    let n = 4000;
    let uni = generate(&SynthSpec {
        phi_scale: Some(0.0),
        ..SynthSpec::new(5, 4, 2, n, 6)
    })
    .unwrap();
    let band = 3.0 * (0.25f64 * 0.75 / n as f64).sqrt();
    s.check(
        "uniform treatment",
        uni.data.label_counts().iter().all(|c| (*c as f64 / n as f64 - 0.25).abs() <= band),
    );
    let quiet = generate(&SynthSpec {
        noise_sigma: 0.0,
        ..SynthSpec::new(6, 2, 3, 50, 7)
    })
    .unwrap();
    let exact = quiet.data.treatment().iter().enumerate().all(|(i, &t)| {
        quiet.data.outcome()[i] == quiet.true_support.indices().iter().map(|&j| quiet.true_theta.values()[[j, t]] * quiet.data.covariates()[[i, j]]).sum::<f64>()
    });
    s.check("noiseless outcomes", exact);
    let spec = SynthSpec::new(6, 3, 2, 40, 8);
    s.check("same seed same draw", generate(&spec).unwrap() == generate(&spec).unwrap());
    let (x, _) = ihdp_like_standin(50, 9);
    let semi = SemiSynthSpec {
        k: 2,
        seed: 1,
        noise_sigma: 1.0,
        coef_scale: 1.0,
        beta_min: 0.0,
    };
    s.check("constant treatment rejected", generate_semisynthetic(x, vec![0; 50], &semi).is_err());

    let small_phase = PhaseDiagramSpec {
        n_grid: vec![60],
        p_grid: vec![8],
        q: 2,
        k: 2,
        trials: 1,
        mode: RecoveryMode::Joint,
        base_seed: 11,
        lambda_policy: LambdaPolicy::Theory { c: Some(1.5) },
        draw: DrawSettings::default(),
        calibration_grid: vec![],
    };
    s.check("phase deterministic", run_phase_diagram(&small_phase).unwrap() == run_phase_diagram(&small_phase).unwrap());
    let floor = ScalingSpec {
        p: 10,
        k: 2,
        q: 2,
        n_list: vec![40, 80],
        trials: 2,
        base_seed: 3,
        draw: DrawSettings {
            noise_sigma: 0.0,
            ..DrawSettings::default()
        },
        c: 1.5,
        estimator: ScalingEstimator::OracleRefit,
    };
    s.check(
        "noiseless oracle floor",
        run_scaling_sweep(&floor).unwrap().rows.iter().all(|r| r.mean_err_inf_inf < 1e-8),
    );
    let one_n = run_scaling_sweep(&ScalingSpec {
        n_list: vec![40],
        ..floor
    })
    .unwrap();
    s.check("single n has no slope", one_n.slope.is_none() && one_n.rows.len() == 1);

    let minimal = read_csv("t,y,x1,x2\n0,1.0,2,3\n1,0.5,4,5\n0,2.5,6,7\n".as_bytes(), "t", "y").unwrap();
    s.check("minimal file", minimal.p() == 2 && minimal.q() == 2 && minimal.treatment() == [0, 1, 0]);
    s.check(
        "NaN cell located",
        read_csv("t,y,x1\n0,1,2\n1,NaN,3\n".as_bytes(), "t", "y").is_err_and(|e| e.to_string().contains("row 2, column 'y'")),
    );

    s.verdict()
}

fn random_cohorts(rng: &mut ChaCha8Rng, p: usize, q: usize, n: usize) -> CohortDataset<f64> {
    CohortDataset::new(
        (0..q)
            .map(|_| Cohort {
                design: Array2::from_shape_fn((n, p), |_| rng.sample::<f64, _>(StandardNormal)),
                outcome: Array1::from_shape_fn(n, |_| rng.sample::<f64, _>(StandardNormal)),
            })
            .collect(),
    )
    .unwrap()
}

fn gradient_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for i in 0..50 {
        let (p, q) = (rng.random_range(1..=20), rng.random_range(2..=5));
        let n = rng.random_range(10..60);
        let cache = compute_moments(&random_cohorts(&mut rng, p, q, n));
        let at = Array2::from_shape_fn((p, q), |_| rng.sample::<f64, _>(StandardNormal));
        let theta = CoefficientMatrix::from_array(at.clone()).unwrap();
        let reg = if i % 2 == 0 {
            RegularizerSpec::mcp(0.5, 3.0).unwrap()
        } else {
            RegularizerSpec::scad(0.5, 3.7).unwrap()
        };
        let plain = |t: &Array2<f64>| loss(&CoefficientMatrix::from_array(t.clone()).unwrap(), &cache).unwrap();
        let shifted = |t: &Array2<f64>| {
            let c = CoefficientMatrix::from_array(t.clone()).unwrap();
            loss(&c, &cache).unwrap() - c.row_norms().iter().map(|r| reg.q_value(*r).unwrap()).sum::<f64>()
        };
        for (analytic, f) in [
            (grad_loss(&theta, &cache).unwrap().into_inner(), &plain as &dyn Fn(&Array2<f64>) -> f64),
            (grad_shifted_loss(&theta, &cache, &reg).unwrap().into_inner(), &shifted),
        ] {
            let h = 1e-6;
            let mut fd = Array2::zeros((p, q));
            for idx in ndarray::indices((p, q)) {
                let (mut up, mut down) = (at.clone(), at.clone());
                up[idx] += h;
                down[idx] -= h;
                fd[idx] = (f(&up) - f(&down)) / (2.0 * h);
            }
            let num = (&analytic - &fd).mapv(|v| v * v).sum().sqrt();
            let den = fd.mapv(|v| v * v).sum().sqrt().max(1.0);
            worst = worst.max(num / den);
        }
    }
    Verdict {
        pass: worst < 1e-6,
        detail: format!("worst relative error {worst:.2e} over 50 points (tolerance 1e-6)"),
    }
}

fn restricted_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let p = rng.random_range(2..=15);
        let q = rng.random_range(2..=4);
        let data = random_cohorts(&mut rng, p, q, 60);
        let support = SupportSet::new((0..p).filter(|_| rng.random::<f64>() < 0.6), p).unwrap();
        let theta = fit_restricted(&data, &support).unwrap();
        let m = compute_moments(&data);
        for j in 0..q {
            let r = m.gram(j).dot(&theta.column(j)) - m.cross(j);
            for &i in support.indices() {
                worst = worst.max(r[i].abs());
            }
        }
    }
    Verdict {
        pass: worst < 1e-10,
        detail: format!("worst normal-equation residual {worst:.2e} over 50 instances (tolerance 1e-10)"),
    }
}

/// Outputs of criteria 4 to 7 replayed by criterion 11.
#[derive(Default)]
struct Emitted {
    runs: Vec<(String, ExperimentOutput)>,
}

impl Emitted {
    fn run(&mut self, label: &str, command: &str, spec: ExperimentSpec) -> ExperimentOutput {
        let out = execute(command, &spec).expect("experiment runs");
        self.runs.push((label.to_string(), out.clone()));
        out
    }
}

fn csv_rows(text: &str) -> Vec<BTreeMap<String, String>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers().unwrap().iter().map(str::to_string).collect();
    r.records()
        .map(|rec| header.iter().cloned().zip(rec.unwrap().iter().map(str::to_string)).collect())
        .collect()
}

fn field<T: std::str::FromStr>(row: &BTreeMap<String, String>, key: &str) -> T
where
    T::Err: std::fmt::Debug,
{
    row[key].parse().unwrap()
}

fn parse_support(s: &str, p: usize) -> Option<SupportSet> {
    if s == "failed" {
        return None;
    }
    SupportSet::new(s.split_whitespace().map(|v| v.parse().unwrap()), p).ok()
}

/// Two covariates minimizing the summed per-cohort mean squared residual.
fn best_pair(data: &PooledDataset<f64>) -> SupportSet {
    let cohorts = data.partition_by_treatment().unwrap();
    let p = data.p();
    let mut best = (f64::INFINITY, SupportSet::empty(p));
    for a in 0..p {
        for b in a + 1..p {
            let s = SupportSet::new([a, b], p).unwrap();
            let theta = fit_restricted(&cohorts, &s).unwrap();
            let rss: f64 = cohorts
                .cohorts()
                .iter()
                .enumerate()
                .map(|(j, c)| {
                    let r = &c.outcome - &c.design.dot(&theta.column(j));
                    r.dot(&r) / r.len() as f64
                })
                .sum();
            if rss < best.0 {
                best = (rss, s);
            }
        }
    }
    best.1
}

fn brute_force_oracle(emitted: &mut Emitted) -> Verdict {
    let draw = DrawSettings {
        noise_sigma: 0.5,
        coef_scale: 2.0,
        ..DrawSettings::default()
    };
    let spec = SupportTrialsSpec {
        p: 6,
        q: 2,
        k: 2,
        n: 2000,
        trials: 100,
        base_seed: 4,
        mode: RecoveryMode::Joint,
        lambda_policy: LambdaPolicy::Theory { c: None },
        draw: draw.clone(),
    };
    let out = emitted.run("support trials", "support-trials", ExperimentSpec::SupportTrials(spec.clone()));
    let mut agree = 0;
    for (t, row) in csv_rows(out.main()).iter().enumerate() {
        let seed: u64 = field(row, "seed");
        assert_eq!(seed, trial_seed(spec.base_seed, spec.n, spec.p, t));
        let regenerated = generate(&SynthSpec {
            noise_sigma: draw.noise_sigma,
            coef_scale: draw.coef_scale,
            beta_min: draw.beta_min,
            ..SynthSpec::new(spec.p, spec.q, spec.k, spec.n, seed)
        })
        .unwrap();
        if parse_support(&row["selected_support"], spec.p) == Some(best_pair(&regenerated.data)) {
            agree += 1;
        }
    }
    Verdict {
        pass: agree >= 95,
        detail: format!("joint support equals best 2-subset in {agree}/100 trials (need 95)"),
    }
}

fn phase_cells(out: &ExperimentOutput) -> Vec<(usize, usize, f64)> {
    csv_rows(out.main())
        .iter()
        .map(|r| (field(r, "n"), field(r, "p"), field(r, "recovery_probability")))
        .collect()
}

fn log_p_scaling(emitted: &mut Emitted) -> Verdict {
    let spec = PhaseDiagramSpec {
        n_grid: vec![200, 400, 800, 1600, 3200, 6400, 12800],
        p_grid: vec![32, 512],
        q: 2,
        k: 10,
        trials: 25,
        mode: RecoveryMode::Joint,
        base_seed: 5,
        lambda_policy: LambdaPolicy::Theory { c: None },
        draw: DrawSettings::default(),
        calibration_grid: jointsparse::experiments::default_calibration_grid(),
    };
    let out = emitted.run("phase diagram p in {32, 512}", "phase-diagram", ExperimentSpec::PhaseDiagram(spec));
    let cells = phase_cells(&out);
    let threshold = |p: usize| cells.iter().filter(|c| c.1 == p && c.2 >= 0.9).map(|c| c.0).min();
    let c = out.metadata.resolved.get("theory_c").cloned().unwrap_or_default();
    let curve = |p: usize| {
        cells
            .iter()
            .filter(|cell| cell.1 == p)
            .map(|cell| format!("{:.2}", cell.2))
            .collect::<Vec<_>>()
            .join(" ")
    };
    match (threshold(32), threshold(512)) {
        (Some(a), Some(b)) => {
            let ratio = b as f64 / a as f64;
            Verdict {
                pass: ratio <= 3.0,
                detail: format!(
                    "n*(32) = {a}, n*(512) = {b}, ratio {ratio:.2} (need ≤ 3; log ratio 1.8), calibrated c = {c}; recovery by n: p=32 [{}], p=512 [{}]",
                    curve(32),
                    curve(512)
                ),
            }
        }
        (a, b) => Verdict {
            pass: false,
            detail: format!("recovery 0.9 not reached on the grid: n*(32) = {a:?}, n*(512) = {b:?}, c = {c}"),
        },
    }
}

fn joint_vs_independent(emitted: &mut Emitted) -> Verdict {
    let base = PhaseDiagramSpec {
        n_grid: vec![200, 250, 300, 350, 400, 500, 600, 800],
        p_grid: vec![128],
        q: 10,
        k: 10,
        trials: 50,
        mode: RecoveryMode::Joint,
        base_seed: 6,
        lambda_policy: LambdaPolicy::Theory { c: None },
        draw: DrawSettings::default(),
        calibration_grid: jointsparse::experiments::default_calibration_grid(),
    };
    let joint = emitted.run("joint phase diagram q = 10", "phase-diagram", ExperimentSpec::PhaseDiagram(base.clone()));
    let cells = phase_cells(&joint);
    let Some(&(n, _, joint_rec)) = cells.iter().find(|c| (0.6..=0.95).contains(&c.2)) else {
        return Verdict {
            pass: false,
            detail: format!("no grid n with joint recovery in [0.6, 0.95]: {cells:?}"),
        };
    };
    let indep = |policy: LambdaPolicy| PhaseDiagramSpec {
        n_grid: vec![n],
        mode: RecoveryMode::Independent,
        lambda_policy: policy,
        ..base.clone()
    };
    let calibrated = emitted.run(
        "independent, calibrated",
        "phase-diagram",
        ExperimentSpec::PhaseDiagram(indep(LambdaPolicy::Theory { c: None })),
    );
    let calibrated_rec = phase_cells(&calibrated)[0].2;
    let per_c: Vec<(f64, f64)> = jointsparse::experiments::default_calibration_grid()
        .into_iter()
        .map(|c| {
            let out = emitted.run(
                &format!("independent, c = {c}"),
                "phase-diagram",
                ExperimentSpec::PhaseDiagram(indep(LambdaPolicy::Theory { c: Some(c) })),
            );
            (c, phase_cells(&out)[0].2)
        })
        .collect();
    let best = per_c.iter().fold(0.0f64, |m, r| m.max(r.1));
    let strongest = best.max(calibrated_rec);
    Verdict {
        pass: joint_rec - strongest >= 0.2,
        detail: format!(
            "n = {n}: joint {joint_rec:.2} (c = {}), independent calibrated {calibrated_rec:.2} (c = {}), independent by c [{}]; gap to the best {:.2} (need ≥ 0.2)",
            joint.metadata.resolved.get("theory_c").map_or("?", |s| s.as_str()),
            calibrated.metadata.resolved.get("theory_c").map_or("?", |s| s.as_str()),
            per_c.iter().map(|(c, r)| format!("{c}:{r:.2}")).collect::<Vec<_>>().join(" "),
            joint_rec - strongest
        ),
    }
}

fn scaling_spec(beta_min: f64) -> ScalingSpec {
    ScalingSpec {
        p: 128,
        k: 10,
        q: 2,
        n_list: vec![1000, 2000, 4000, 8000, 16000],
        trials: 30,
        base_seed: 7,
        draw: DrawSettings {
            noise_sigma: 1.0,
            beta_min,
            ..DrawSettings::default()
        },
        c: 1.5,
        estimator: ScalingEstimator::Joint,
    }
}

fn error_exponent(emitted: &mut Emitted) -> (Verdict, ExperimentOutput) {
    let out = emitted.run("scaling sweep", "scaling", ExperimentSpec::Scaling(scaling_spec(0.5)));
    let summary: toml::Table = out.files.iter().find(|f| f.0 == "summary.toml").unwrap().1.parse().unwrap();
    let slope = summary.get("slope").and_then(|v| v.as_float());
    let rows: Vec<String> = csv_rows(out.main())
        .iter()
        .map(|r| format!("{}:{:.4}", r["n"], field::<f64>(r, "mean_err_inf_inf")))
        .collect();
    // Same sweep without the minimum-signal condition, reported for reference.
    let reference = run_scaling_sweep(&scaling_spec(0.0)).unwrap().slope;
    let verdict = match slope {
        Some(s) => Verdict {
            pass: (-0.65..=-0.35).contains(&s),
            detail: format!(
                "slope {s:.3} (need [-0.65, -0.35]); mean errors {}; without minimum signal the slope is {}",
                rows.join(" "),
                reference.map_or("undefined".into(), |v| format!("{v:.3}"))
            ),
        },
        None => Verdict {
            pass: false,
            detail: "slope undefined".into(),
        },
    };
    (verdict, out)
}

fn effect_bound(scaling: &ExperimentOutput) -> Verdict {
    let draws = csv_rows(&scaling.files.iter().find(|f| f.0 == "draws.csv").unwrap().1);
    let mut checked = 0;
    let mut violations = 0;
    let mut failed_fits = 0;
    let mut worst_ratio = 0.0f64;
    for d in &draws {
        let err: f64 = field(d, "ate_error");
        let bound: f64 = field(d, "ate_bound");
        if !err.is_finite() {
            failed_fits += 1;
            continue;
        }
        checked += 1;
        if err > bound * (1.0 + 1e-12) + 1e-15 {
            violations += 1;
        }
        if bound > 0.0 {
            worst_ratio = worst_ratio.max(err / bound);
        }
    }
    Verdict {
        pass: violations == 0 && failed_fits == 0 && checked == draws.len(),
        detail: format!(
            "{violations} violations over {checked} draws ({failed_fits} failed fits); largest error/bound {worst_ratio:.3}"
        ),
    }
}

fn dr_randomized() -> Verdict {
    let mut errs = Vec::new();
    let q = 3;
    for trial in 0..50u64 {
        let (x, _) = ihdp_like_standin(1500, 9000 + trial);
        let mut rng = ChaCha8Rng::seed_from_u64(9100 + trial);
        let t: Vec<usize> = (0..x.nrows()).map(|_| rng.random_range(0..q)).collect();
        let d = generate_semisynthetic(
            x,
            t,
            &SemiSynthSpec {
                k: 6,
                seed: 9200 + trial,
                noise_sigma: 1.0,
                coef_scale: 1.0,
                beta_min: 0.0,
            },
        )
        .unwrap();
        let prop = PropensityModel::uniform(d.data.p(), q).unwrap();
        let out = dr_effects(&d.data, &d.true_support, &prop).unwrap();
        errs.push(out.contrast(1, 0).unwrap() - d.sample_ate[[1, 0]]);
    }
    let (mean, se) = mean_and_se(&errs);
    Verdict {
        pass: mean.abs() <= 3.0 * se,
        detail: format!("mean DR error {mean:.4}, Monte-Carlo SE {se:.4} over 50 trials (need |mean| ≤ 3 SE)"),
    }
}

fn semisynthetic_ate() -> Verdict {
    // The first draw whose effect is clearly nonzero; relative error is
    // meaningless near zero.
    let (x, t) = ihdp_like_standin(747, 10);
    let (seed, d) = (0u64..)
        .map(|s| {
            let d = generate_semisynthetic(
                x.clone(),
                t.clone(),
                &SemiSynthSpec {
                    k: 6,
                    seed: 1000 + s,
                    noise_sigma: 1.0,
                    coef_scale: 1.0,
                    beta_min: 0.0,
                },
            )
            .unwrap();
            (1000 + s, d)
        })
        .find(|(_, d)| d.sample_ate[[1, 0]].abs() >= 1.0)
        .unwrap();
    let cfg = PipelineConfig {
        n_splits: 20,
        selection_fraction: 0.2,
        method: EffectMethod::DoublyRobust,
        seed: 11,
        ..PipelineConfig::default()
    };
    let est = two_stage_pipeline(&d.data, &cfg).unwrap();
    let truth = d.sample_ate[[1, 0]];
    let got = est.contrast(1, 0).unwrap();
    let rel = (got - truth).abs() / truth.abs();
    let mean_size = est.support_sizes.iter().sum::<usize>() as f64 / est.support_sizes.len() as f64;
    let mut detail = format!(
        "draw seed {seed}: true ATE {truth:.3}, DR estimate {got:.3} ± {:.3} over 20 splits, relative error {:.1}% (need ≤ 10%), mean |S| {mean_size:.1}",
        est.std_dev.as_ref().unwrap()[[1, 0]],
        100.0 * rel
    );
    if let Some(path) = std::env::var_os("JOINTSPARSE_IHDP_CSV") {
        match ingest_csv(&path, "treatment", "y_factual").and_then(|data| two_stage_pipeline(&data, &cfg)) {
            Ok(e) => detail.push_str(&format!("; supplied IHDP file: ATE {:.3}", e.contrast(1, 0).unwrap())),
            Err(e) => detail.push_str(&format!("; supplied IHDP file failed: {e}")),
        }
    }
    Verdict {
        pass: rel <= 0.10,
        detail,
    }
}

fn determinism(emitted: &Emitted) -> Verdict {
    let mut mismatched = Vec::new();
    let mut files = 0;
    for (label, out) in &emitted.runs {
        let meta = RunMetadata::from_toml(&out.metadata.to_toml().unwrap()).unwrap();
        let again = rerun_from_metadata(&meta).unwrap();
        files += out.files.len();
        if again.files != out.files || again.metadata != out.metadata {
            mismatched.push(label.clone());
        }
    }
    Verdict {
        pass: mismatched.is_empty(),
        detail: if mismatched.is_empty() {
            format!("{files} result files from {} runs reproduced bitwise", emitted.runs.len())
        } else {
            format!("differences in: {}", mismatched.join(", "))
        },
    }
}

/// Optional external-data check; runs only when the file is supplied.
fn cattaneo_interval() {
    let Some(path) = std::env::var_os("JOINTSPARSE_CATTANEO_CSV") else {
        println!("SKIP external: birth-weight smoking interval (set JOINTSPARSE_CATTANEO_CSV to run)");
        return;
    };
    let result = ingest_csv(&path, "mbsmoke", "bweight").and_then(|data| {
        let cfg = PipelineConfig {
            method: EffectMethod::DoublyRobust,
            ..PipelineConfig::default()
        };
        two_stage_pipeline(&data, &cfg)
    });
    match result {
        Ok(e) => {
            let effect = e.contrast(1, 0).unwrap();
            let inside = (-250.0..=-200.0).contains(&effect);
            println!(
                "{} external: birth-weight smoking effect {effect:.1} g (reference interval [-250, -200])",
                if inside { "PASS" } else { "FAIL" }
            );
        }
        Err(e) => println!("FAIL external: birth-weight file could not be processed: {e}"),
    }
}

fn main() {
    let minutes = |m: u64| Some(Duration::from_secs(60 * m));
    let mut emitted = Emitted::default();
    let mut results = Vec::new();
    results.push(report(1, "closed-form examples", Some(Duration::from_secs(1)), closed_form_suite));
    results.push(report(2, "gradient finite differences", Some(Duration::from_secs(5)), gradient_oracle));
    results.push(report(3, "restricted least squares", Some(Duration::from_secs(5)), restricted_oracle));
    results.push(report(4, "brute-force support oracle", minutes(2), || brute_force_oracle(&mut emitted)));
    results.push(report(5, "sample complexity grows with log p", minutes(20), || log_p_scaling(&mut emitted)));
    results.push(report(6, "joint beats independent selection", minutes(20), || joint_vs_independent(&mut emitted)));
    let mut scaling = None;
    results.push(report(7, "error-rate exponent", minutes(15), || {
        let (v, out) = error_exponent(&mut emitted);
        scaling = Some(out);
        v
    }));
    results.push(report(8, "oracle effect-error bound", None, || effect_bound(scaling.as_ref().unwrap())));
    results.push(report(9, "doubly robust under randomization", minutes(5), dr_randomized));
    results.push(report(10, "semisynthetic effect recovery", None, semisynthetic_ate));
    results.push(report(11, "replay from metadata", None, || determinism(&emitted)));
    cattaneo_interval();
    let failed = results.iter().filter(|r| !**r).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
