use std::f64::consts::PI;

use coopfuse::experiment::{
    compare_methods, run_sweep, simulate_trial, write_csv, ExperimentError, ExperimentRecord, Method, NoiseCell,
    SweepConfig, CSV_HEADER,
};
use coopfuse::scenario::SensorSpec;

fn config(methods: &[Method], sigma_p: &[f64], sigma_phi_deg: &[f64], trials: usize) -> SweepConfig {
    SweepConfig {
        sigma_p_grid: sigma_p.to_vec(),
        sigma_phi_grid_deg: sigma_phi_deg.to_vec(),
        trials_per_cell: trials,
        methods: methods.to_vec(),
        seed: 17,
        ..SweepConfig::default()
    }
}

fn ap_of(records: &[ExperimentRecord], method: Method, cell: NoiseCell) -> f64 {
    records
        .iter()
        .find(|r| r.method == method && r.cell() == cell)
        .unwrap()
        .ap
}

#[test]
fn noiseless_corrected_trial_recovers_the_transform() {
    let cfg = SweepConfig {
        sensor: SensorSpec::ideal(50.0, 2.0 * PI),
        ..config(&[Method::Corrected], &[0.0], &[0.0], 1)
    };
    let records = run_sweep(&cfg).unwrap();
    assert_eq!(records.len(), 1);
    let r = &records[0];
    assert!((0.0..=1.0).contains(&r.ap));
    assert!(r.mean_rre < 1e-6 && r.mean_rte < 1e-6, "{r:?}");
}

#[test]
fn sweeps_are_reproducible_across_worker_counts() {
    let cfg = config(&Method::ALL, &[0.0, 1.0], &[2.5], 6);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_sweep(&cfg).unwrap())
    };
    let single = run(1);
    assert_eq!(run(4), single);
    assert_eq!(run(1), single);
}

#[test]
fn no_fusion_ap_is_identical_across_cells() {
    let cfg = config(&[Method::NoFusion], &[0.0, 0.2, 0.6, 1.0], &[0.5, 2.5], 10);
    let records = run_sweep(&cfg).unwrap();
    assert_eq!(records.len(), 6);
    assert!(records.iter().all(|r| r.ap.to_bits() == records[0].ap.to_bits()));
}

#[test]
fn correction_beats_pose_transform_at_one_meter() {
    let cfg = config(&[Method::Uncorrected, Method::Corrected], &[1.0], &[0.0], 40);
    let cell = NoiseCell::new(1.0, 0.0);
    let (mut corrected, mut uncorrected, mut within_one_degree) = (0.0, 0.0, 0);
    for trial in 0..cfg.trials_per_cell {
        let outcome = simulate_trial(&cfg, cell, trial).unwrap();
        let c = outcome.method(Method::Corrected).unwrap().transform_error.unwrap();
        let u = outcome.method(Method::Uncorrected).unwrap().transform_error.unwrap();
        corrected += c.rte;
        uncorrected += u.rte;
        if c.rre_deg() <= 1.0 {
            within_one_degree += 1;
        }
    }
    let n = cfg.trials_per_cell as f64;
    assert!(
        corrected / n < uncorrected / n,
        "corrected {} vs uncorrected {}",
        corrected / n,
        uncorrected / n
    );
    assert!(within_one_degree as f64 >= 0.95 * n, "{within_one_degree} of {n}");
}

#[test]
fn corrected_ap_never_beats_the_noiseless_cell() {
    let cfg = config(&[Method::Corrected], &[0.0, 0.5, 1.0], &[0.0], 30);
    let records = run_sweep(&cfg).unwrap();
    let clean = ap_of(&records, Method::Corrected, NoiseCell::new(0.0, 0.0));
    for sigma in [0.5, 1.0] {
        assert!(ap_of(&records, Method::Corrected, NoiseCell::new(sigma, 0.0)) <= clean);
    }
}

#[test]
fn records_are_finite_fractions() {
    let records = run_sweep(&config(&Method::ALL, &[0.0, 0.6], &[1.5], 4)).unwrap();
    assert_eq!(records.len(), 9);
    for r in &records {
        assert!((0.0..=1.0).contains(&r.ap));
        assert!(r.mean_rre.is_finite() && r.mean_rte.is_finite() && r.mean_inlier_ratio.is_finite());
        assert_eq!(r.trials, 4);
    }
}

#[test]
fn comparison_table_pivots_records() {
    let records = run_sweep(&config(&Method::ALL, &[0.0, 1.0], &[0.0], 5)).unwrap();
    let table = compare_methods(&records).unwrap();
    assert_eq!(table.cells.len(), 2);
    assert_eq!(table.rows.len(), 3);
    for row in &table.rows {
        let (a0, a1) = (row.ap[0], row.ap[1]);
        assert_eq!(row.degradation[0], Some(0.0));
        assert_eq!(row.degradation[1], Some((a0 - a1) / a0));
    }

    let single = compare_methods(&records[..1]).unwrap();
    assert_eq!((single.cells.len(), single.rows.len()), (1, 1));

    let mismatched: Vec<ExperimentRecord> = records
        .iter()
        .filter(|r| r.method != Method::Corrected || r.sigma_p == 0.0)
        .cloned()
        .collect();
    assert!(matches!(
        compare_methods(&mismatched),
        Err(ExperimentError::GridMismatch(_))
    ));
}

#[test]
fn placement_failure_names_the_cell() {
    let cfg = SweepConfig {
        n_objects: 2_000,
        ..config(&[Method::NoFusion], &[0.4], &[0.0], 1)
    };
    let err = run_sweep(&cfg).unwrap_err();
    assert!(matches!(err, ExperimentError::Scene { .. }), "{err}");
    assert!(err.to_string().contains("0.4"), "{err}");
}

#[test]
fn csv_has_exact_header_and_one_row_per_record() {
    let records = run_sweep(&config(&[Method::NoFusion, Method::Corrected], &[0.0, 1.0], &[0.0], 2)).unwrap();
    let mut out = Vec::new();
    write_csv(&records, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], CSV_HEADER.join(","));
    assert_eq!(
        lines[0],
        "method,sigma_p_m,sigma_phi_deg,ap,mean_rre_deg,mean_rte_m,mean_inlier_ratio,trials"
    );
    assert_eq!(lines.len(), 1 + records.len());
    assert!(lines[1].starts_with("no-fusion,"));
}
