use std::io::Write;

use langevin_lab::blr::{
    accuracy, blr_potential, default_eta, gen_synthetic, load_wdbc, map_estimate, run_experiment, split,
    split_standardize, Dataset, ExperimentConfig, PredictionRule, SyntheticConfig,
};
use langevin_lab::dynamics::Variant;
use langevin_lab::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn synth(n: usize, d: usize, seed: u64) -> (Dataset, Vec<f64>) {
    gen_synthetic(&SyntheticConfig { n, d, seed, ..Default::default() }).unwrap()
}

/// Writes a WDBC-shaped file with `rows` random rows.
fn wdbc_file(rows: usize, seed: u64) -> tempfile::NamedTempFile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = tempfile::NamedTempFile::new().unwrap();
    for i in 0..rows {
        let diag = if rng.random_bool(0.37) { "M" } else { "B" };
        let vals: Vec<String> = (0..30).map(|_| format!("{:.4}", rng.random_range(0.0..100.0))).collect();
        writeln!(f, "{},{diag},{}", 840_000 + i, vals.join(",")).unwrap();
    }
    f.flush().unwrap();
    f
}

const ALL: [Variant; 6] =
    [Variant::Overdamped, Variant::Underdamped, Variant::Nonreversible, Variant::Hfhr, Variant::Highorder, Variant::Mirror];

#[test]
fn synthetic_is_deterministic() {
    assert_eq!(synth(300, 4, 9), synth(300, 4, 9));
    assert_ne!(synth(300, 4, 9).0, synth(300, 4, 10).0);
    let (d, w) = gen_synthetic(&SyntheticConfig::default()).unwrap();
    assert_eq!((d.n, d.d), (5000, 31));
    assert_eq!(w.len(), 31);
    assert_eq!(w[30], 0.0);
}

#[test]
fn synthetic_labels_are_balanced() {
    for seed in 0..5 {
        let (d, _) = synth(10_000, 5, seed);
        let m = d.label_mean();
        assert!(m > 0.2 && m < 0.8, "seed {seed}: {m}");
    }
}

#[test]
fn wdbc_canonical_shape() {
    let f = wdbc_file(569, 1);
    let d = load_wdbc(f.path()).unwrap();
    assert_eq!((d.n, d.d), (569, 31));
    assert!(d.intercept_appended);
    assert!(d.row(0)[30] == 1.0);
}

#[test]
fn wdbc_errors() {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    let good: Vec<String> = (0..30).map(|i| format!("{}.5", i)).collect();
    writeln!(f, "1,M,{}", good.join(",")).unwrap();
    let mut bad = good.clone();
    bad[4] = "abc".into();
    writeln!(f, "2,B,{}", bad.join(",")).unwrap();
    f.flush().unwrap();
    match load_wdbc(f.path()) {
        Err(e @ Error::Ingestion { line: 2, .. }) => assert_eq!(e.exit_code(), 4),
        other => panic!("unexpected {other:?}"),
    }

    let mut f = tempfile::NamedTempFile::new().unwrap();
    writeln!(f, "1,M,1.0,2.0").unwrap();
    f.flush().unwrap();
    assert!(matches!(load_wdbc(f.path()), Err(Error::Format(_))));

    let mut f = tempfile::NamedTempFile::new().unwrap();
    let names: Vec<String> = (0..30).map(|i| format!("f{i}")).collect();
    writeln!(f, "id,diagnosis,{}", names.join(",")).unwrap();
    f.flush().unwrap();
    assert!(matches!(load_wdbc(f.path()), Err(Error::EmptyDataset)));

    let e = load_wdbc(std::path::Path::new("/nonexistent/wdbc.data")).unwrap_err();
    assert_eq!(e.exit_code(), 4);
}

#[test]
fn split_sizes_and_standardization() {
    let f = wdbc_file(569, 2);
    let d = load_wdbc(f.path()).unwrap();
    let (tr, te) = split(&d, 0.8, 0).unwrap();
    assert_eq!((tr.n, te.n), (455, 114));
    assert!(split(&d, 1.0, 0).is_err());

    let (mut tr, _, rec) = split_standardize(&d, 0.8, 0).unwrap();
    assert!(tr.standardized);
    for j in 0..30 {
        let col: Vec<f64> = tr.features.iter().skip(j).step_by(31).copied().collect();
        let m = col.iter().sum::<f64>() / col.len() as f64;
        let s = (col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
        assert!(m.abs() < 1e-10 && (s - 1.0).abs() < 1e-10);
    }
    assert!(!rec.scaled[30]);
    assert!(tr.features.iter().skip(30).step_by(31).all(|x| *x == 1.0));
    let before = tr.clone();
    rec.apply(&mut tr).unwrap();
    assert_eq!(before, tr);
}

#[test]
fn accuracy_examples() {
    let (d, w) = synth(2000, 6, 3);
    assert_eq!(accuracy(&vec![0.0; d.d], &d).unwrap(), d.label_mean());

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let v: Vec<f64> = (0..d.d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let neg: Vec<f64> = v.iter().map(|x| -x).collect();
    let a = accuracy(&v, &d).unwrap();
    assert!((accuracy(&neg, &d).unwrap() - (1.0 - a)).abs() < 1e-12);

    let idx: Vec<usize> = (0..d.n)
        .filter(|&i| d.row(i).iter().zip(&w).map(|(x, y)| x * y).sum::<f64>().abs() > 3.0)
        .collect();
    assert!(idx.len() > 100);
    let sub = d.subset(&idx).unwrap();
    assert!(accuracy(&w, &sub).unwrap() >= 0.95);
    assert!(accuracy(&w[..3], &d).is_err());
}

#[test]
fn map_is_stationary_point() {
    let (d, _) = synth(500, 4, 5);
    let (tr, _, _) = split_standardize(&d, 0.8, 0).unwrap();
    let pot = blr_potential(&tr, 10.0).unwrap();
    let x = map_estimate(&pot).unwrap();
    let g: f64 = pot.gradient(&x).iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(g < 1e-8, "{g}");
}

#[test]
fn protocol_defaults() {
    assert_eq!(default_eta(Variant::Overdamped), 0.0003);
    assert_eq!(default_eta(Variant::Underdamped), 0.003);
    let h = ExperimentConfig::for_variant(Variant::Hfhr).hyperparams;
    assert_eq!((h["beta"], h["alpha"]), (1.0, 30.0));
}

#[test]
fn schedule_and_validation() {
    let (d, _) = synth(300, 3, 6);
    let exp = ExperimentConfig { n_steps: 500, eval_every: 500, eta: 0.01, ..ExperimentConfig::for_variant(Variant::Overdamped) };
    let t = run_experiment(&exp, &d).unwrap();
    assert_eq!(t.rows.len(), 1);
    assert_eq!(t.rows[0].step, 500);

    for bad in [
        ExperimentConfig { eta: 0.0, ..exp.clone() },
        ExperimentConfig { eval_every: 600, ..exp.clone() },
        ExperimentConfig { variant: Variant::Custom, ..exp.clone() },
    ] {
        assert_eq!(run_experiment(&bad, &d).unwrap_err().exit_code(), 2);
    }
}

#[test]
fn divergence_leaves_marker_row() {
    let (d, _) = synth(300, 3, 7);
    let exp = ExperimentConfig { n_steps: 2000, eval_every: 100, eta: 50.0, ..ExperimentConfig::for_variant(Variant::Overdamped) };
    let t = run_experiment(&exp, &d).unwrap();
    assert!(t.diverged_at.is_some());
    assert!(t.rows.last().unwrap().accuracy.is_nan());
    assert!(t.to_csv().lines().last().unwrap().contains("NaN"));
}

#[test]
fn experiments_are_deterministic() {
    let (d, _) = synth(400, 4, 8);
    for v in ALL {
        let exp = ExperimentConfig { n_steps: 1000, eval_every: 250, record_wall_time: false, ..ExperimentConfig::for_variant(v) };
        let a = run_experiment(&exp, &d).unwrap();
        let b = run_experiment(&exp, &d).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.final_weights, b.final_weights);
    }
}

#[test]
fn every_variant_beats_chance() {
    let (d, _) = synth(1000, 10, 11);
    for v in ALL {
        let exp = ExperimentConfig { n_steps: 5000, eval_every: 5000, ..ExperimentConfig::for_variant(v) };
        let acc = run_experiment(&exp, &d).unwrap().final_accuracy().unwrap();
        assert!(acc >= 0.7, "{v:?}: {acc}");
    }
}

#[test]
fn running_mean_no_worse_on_average() {
    let (d, _) = synth(600, 5, 12);
    let mean_acc = |rule: PredictionRule| -> f64 {
        (0..10u64)
            .map(|s| {
                let exp = ExperimentConfig {
                    n_steps: 4000,
                    eval_every: 4000,
                    prediction_rule: rule,
                    seed: s,
                    ..ExperimentConfig::for_variant(Variant::Overdamped)
                };
                run_experiment(&exp, &d).unwrap().final_accuracy().unwrap()
            })
            .sum::<f64>()
            / 10.0
    };
    let rm = mean_acc(PredictionRule::RunningMean);
    let ci = mean_acc(PredictionRule::CurrentIterate);
    assert!(rm >= ci - 0.01, "running mean {rm}, current iterate {ci}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn dataset_json_round_trip(seed in 0u64..1000, n in 1usize..40, d in 1usize..6) {
        let (data, _) = synth(n, d, seed);
        let back = Dataset::from_json(&data.to_json().unwrap()).unwrap();
        prop_assert_eq!(back, data);
    }
}
