use jointsparse::experiments::{
    execute, oracle_refit_error, rerun_from_metadata, run_phase_diagram, run_scaling_sweep, DrawSettings, ExperimentSpec,
    LambdaPolicy, PhaseDiagramSpec, RecoveryMode, RunMetadata, ScalingEstimator, ScalingSpec,
};
use jointsparse::io::{read_csv, write_csv};
use jointsparse::synthgen::{generate, SynthSpec};
use jointsparse::PooledDataset;
use ndarray::{Array1, Array2};
use proptest::prelude::*;

fn phase_spec(n_grid: Vec<usize>, p: usize, trials: usize, c: f64) -> PhaseDiagramSpec {
    PhaseDiagramSpec {
        n_grid,
        p_grid: vec![p],
        q: 2,
        k: 10,
        trials,
        mode: RecoveryMode::Joint,
        base_seed: 31,
        lambda_policy: LambdaPolicy::Theory { c: Some(c) },
        draw: DrawSettings::default(),
        calibration_grid: vec![],
    }
}

// Gaussian coefficients occasionally give a support row far below any usable
// λ, so saturation is checked under a minimum row norm.
#[test]
fn recovery_saturates_with_ample_samples() {
    for p in [32usize, 128] {
        let n = (200.0 * 10.0 * (p as f64).ln()).ceil() as usize;
        let spec = PhaseDiagramSpec {
            draw: DrawSettings {
                beta_min: 0.5,
                ..DrawSettings::default()
            },
            ..phase_spec(vec![n], p, 25, 1.5)
        };
        let res = run_phase_diagram(&spec).unwrap();
        let cell = res.cell(n, p).unwrap();
        assert!(cell.recovery_probability >= 0.95, "p = {p}, n = {n}: {}", cell.recovery_probability);
    }
}

#[test]
fn recovery_fails_when_undersampled() {
    let res = run_phase_diagram(&phase_spec(vec![10], 64, 25, 1.5)).unwrap();
    assert!(res.cells[0].recovery_probability <= 0.1);
}

#[test]
fn phase_table_is_reproducible() {
    let spec = ExperimentSpec::PhaseDiagram(PhaseDiagramSpec {
        lambda_policy: LambdaPolicy::Theory { c: None },
        calibration_grid: vec![1.0, 2.0],
        ..phase_spec(vec![100, 300], 16, 1, 1.5)
    });
    let a = execute("phase-diagram", &spec).unwrap();
    let b = execute("phase-diagram", &spec).unwrap();
    assert_eq!(a, b);
    let header = a.main().lines().next().unwrap();
    assert_eq!(header, "n,p,q,k,mode,trials,recovery_probability,mean_support_jaccard");
    assert_eq!(a.main().lines().count(), 3);
    assert!(a.metadata.resolved.contains_key("theory_c"));

    let meta = RunMetadata::from_toml(&a.metadata.to_toml().unwrap()).unwrap();
    assert_eq!(rerun_from_metadata(&meta).unwrap().files, a.files);
}

#[test]
fn noiseless_oracle_refit_is_exact() {
    for n in [100, 400, 1600] {
        let d = generate(&SynthSpec {
            noise_sigma: 0.0,
            ..SynthSpec::new(64, 2, 10, n, 77)
        })
        .unwrap();
        assert!(oracle_refit_error(&d).unwrap() < 1e-8);
    }
    let spec = ScalingSpec {
        p: 32,
        k: 5,
        q: 2,
        n_list: vec![200, 400],
        trials: 3,
        base_seed: 1,
        draw: DrawSettings {
            noise_sigma: 0.0,
            ..DrawSettings::default()
        },
        c: 1.5,
        estimator: ScalingEstimator::OracleRefit,
    };
    let res = run_scaling_sweep(&spec).unwrap();
    assert!(res.rows.iter().all(|r| r.mean_err_inf_inf < 1e-8));
}

#[test]
fn single_sample_size_has_no_slope() {
    let spec = ScalingSpec {
        p: 32,
        k: 5,
        q: 2,
        n_list: vec![400],
        trials: 2,
        base_seed: 2,
        draw: DrawSettings::default(),
        c: 1.5,
        estimator: ScalingEstimator::Joint,
    };
    let res = run_scaling_sweep(&spec).unwrap();
    assert!(res.slope.is_none());
    assert_eq!(res.rows.len(), 1);
    assert_eq!(res.to_csv().unwrap().lines().count(), 2);
    assert!(!res.summary_toml().contains("slope ="));
}

#[test]
fn cattaneo_shaped_file_is_ingested() {
    let sizes = [3778usize, 200, 337, 327];
    let mut text = String::from("mbsmoke_level,bweight");
    for j in 0..20 {
        text.push_str(&format!(",c{j}"));
    }
    text.push('\n');
    let mut row = 0usize;
    for (level, &count) in sizes.iter().enumerate() {
        for _ in 0..count {
            text.push_str(&format!("{level},{}", 3000 + row % 700));
            for j in 0..20 {
                text.push_str(&format!(",{}", (row * (j + 3)) % 17));
            }
            text.push('\n');
            row += 1;
        }
    }
    let d = read_csv(text.as_bytes(), "mbsmoke_level", "bweight").unwrap();
    assert_eq!((d.n(), d.p(), d.q()), (4642, 20, 4));
    assert_eq!(d.label_counts(), sizes.to_vec());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn csv_round_trip_is_identity(
        values in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::ZERO, 30),
        labels in prop::collection::vec(0usize..3, 10),
    ) {
        let mut t = labels;
        t[0] = 0;
        t[1] = 1;
        t[2] = 2;
        let x = Array2::from_shape_vec((10, 2), values[..20].to_vec()).unwrap();
        let y = Array1::from(values[20..].to_vec());
        let d = PooledDataset::new(x, t, y, 3).unwrap();
        let mut buf = Vec::new();
        write_csv(&d, &mut buf, "t", "y").unwrap();
        let back = read_csv(buf.as_slice(), "t", "y").unwrap();
        prop_assert_eq!(back, d);
    }
}
