use std::sync::Arc;

use approx::assert_abs_diff_eq;
use langevin_lab::dynamics::{
    build_variant_spec, curl_condition_residual, drift, friction_dropped, gamma_correction, gamma_correction_fd,
    stationarity_residual, AntisymmetricMatrixSeed, AugLayout, DynamicsSpec, MatrixField, Variant, VariantParams,
};
use langevin_lab::potentials::{make_quartic_mirror, PotentialModel};
use langevin_lab::Error;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn params(gamma: Option<f64>, alpha: Option<f64>, beta: Option<f64>) -> VariantParams {
    VariantParams { gamma, alpha, beta, j: None }
}

fn spec_for(v: Variant, pot: PotentialModel, seed: u64) -> DynamicsSpec {
    let d = pot.dim();
    match v {
        Variant::Overdamped => build_variant_spec(v, pot, &VariantParams::default(), None),
        Variant::Underdamped => build_variant_spec(v, pot, &params(Some(4.0), None, None), None),
        Variant::Highorder => build_variant_spec(v, pot, &params(Some(20.0), Some(15.0), None), None),
        Variant::Hfhr => build_variant_spec(v, pot, &params(None, Some(30.0), Some(1.0)), None),
        Variant::Nonreversible => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let j = AntisymmetricMatrixSeed::random(d, &mut rng).derived;
            build_variant_spec(v, pot, &VariantParams { j: Some(j), ..Default::default() }, None)
        }
        Variant::Mirror => build_variant_spec(v, pot, &VariantParams::default(), Some(make_quartic_mirror(d, 0.1).unwrap())),
        Variant::Custom => unreachable!(),
    }
    .unwrap()
}

/// Drifts written out from each variant's SDE, independent of the `(D, Q)`
/// assembly.
fn explicit_drift(spec: &DynamicsSpec, z: &[f64]) -> Vec<f64> {
    let d = spec.layout().d;
    let u = spec.potential();
    let th = &z[..d];
    let gu = u.gradient(th);
    match spec.variant() {
        Variant::Overdamped => gu.iter().map(|g| -g).collect(),
        Variant::Nonreversible => {
            let j = spec.j_matrix().unwrap();
            (0..d).map(|i| -gu[i] - (0..d).map(|k| j[(i, k)] * gu[k]).sum::<f64>()).collect()
        }
        Variant::Underdamped => {
            let g = spec.gamma_param();
            let r = &z[d..];
            r.iter().cloned().chain((0..d).map(|i| -g * r[i] - gu[i])).collect()
        }
        Variant::Hfhr => {
            let (a, b) = (spec.alpha_param(), spec.beta_param());
            let r = &z[d..];
            (0..d).map(|i| r[i] - b * gu[i]).chain((0..d).map(|i| -a * r[i] - gu[i])).collect()
        }
        Variant::Highorder => {
            let (g, a) = (spec.gamma_param(), spec.alpha_param());
            let p = &z[d..2 * d];
            let r = &z[2 * d..];
            p.iter()
                .cloned()
                .chain((0..d).map(|i| -gu[i] + g * r[i]))
                .chain((0..d).map(|i| -g * p[i] - a * r[i]))
                .collect()
        }
        Variant::Mirror => {
            let m = spec.mirror().unwrap();
            let eps = m.regularization_eps();
            (0..d)
                .map(|i| {
                    let h = 3.0 * th[i] * th[i] + eps;
                    -6.0 * th[i] / (h * h) - gu[i] / h
                })
                .collect()
        }
        Variant::Custom => unreachable!(),
    }
}

#[test]
fn reference_drifts() {
    let s = spec_for(Variant::Overdamped, PotentialModel::gaussian(2), 0);
    assert_eq!(drift(&s, &[1.0, 0.0]).unwrap(), vec![-1.0, 0.0]);

    let s = spec_for(Variant::Underdamped, PotentialModel::gaussian(1), 0);
    let f = drift(&s, &[1.0, 2.0]).unwrap();
    assert_abs_diff_eq!(f[0], 2.0, epsilon = 1e-15);
    assert_abs_diff_eq!(f[1], -9.0, epsilon = 1e-15);

    let s = spec_for(Variant::Highorder, PotentialModel::gaussian(1), 0);
    let f = drift(&s, &[1.0, 1.0, 1.0]).unwrap();
    assert_eq!(f, vec![1.0, 19.0, -35.0]);

    let s = spec_for(Variant::Hfhr, PotentialModel::gaussian(1), 0);
    let f = drift(&s, &[2.0, 0.5]).unwrap();
    assert_abs_diff_eq!(f[0], 0.5 - 2.0, epsilon = 1e-15);
    assert_abs_diff_eq!(f[1], -15.0 - 2.0, epsilon = 1e-15);

    let m = make_quartic_mirror(1, 0.0).unwrap();
    let s = build_variant_spec(Variant::Mirror, PotentialModel::gaussian(1), &VariantParams::default(), Some(m)).unwrap();
    assert_abs_diff_eq!(drift(&s, &[1.0]).unwrap()[0], -1.0, epsilon = 1e-14);
}

#[test]
fn explicit_and_assembled_drifts_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for pot in [PotentialModel::gaussian(2), PotentialModel::double_well(2)] {
        for v in Variant::BUILTIN {
            let s = spec_for(v, pot.clone(), 5);
            for _ in 0..1000 {
                let z: Vec<f64> = (0..s.n()).map(|_| rng.random_range(-2.0..2.0)).collect();
                if v == Variant::Mirror && z.iter().any(|x| x.abs() < 0.05) {
                    continue;
                }
                let a = drift(&s, &z).unwrap();
                let b = explicit_drift(&s, &z);
                for i in 0..z.len() {
                    assert!((a[i] - b[i]).abs() <= 1e-10 * b[i].abs().max(1.0), "{v} {z:?}");
                }
                // The generic path goes through D, Q and Γ.
                if v != Variant::Mirror || pot.value(&z) < 3.0 {
                    let g = s.generic_drift(&z, 1e-4).unwrap();
                    for i in 0..z.len() {
                        assert!((g[i] - b[i]).abs() <= 1e-5 * b[i].abs().max(1.0), "{v} generic {z:?}");
                    }
                }
            }
        }
    }
}

#[test]
fn missing_parameters_are_usage_errors() {
    let pot = PotentialModel::gaussian(1);
    for v in [Variant::Underdamped, Variant::Highorder, Variant::Hfhr, Variant::Nonreversible, Variant::Mirror] {
        let e = build_variant_spec(v, pot.clone(), &VariantParams::default(), None).unwrap_err();
        assert!(matches!(e, Error::Usage(_)), "{v}: {e}");
    }
    let wrong = VariantParams { j: Some(DMatrix::zeros(3, 3)), ..Default::default() };
    assert!(matches!(build_variant_spec(Variant::Nonreversible, pot.clone(), &wrong, None), Err(Error::Usage(_))));
    let sym = VariantParams { j: Some(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])), ..Default::default() };
    assert!(build_variant_spec(Variant::Nonreversible, PotentialModel::gaussian(2), &sym, None).is_err());
}

#[test]
fn gamma_correction_values() {
    for v in [Variant::Overdamped, Variant::Underdamped, Variant::Highorder, Variant::Hfhr, Variant::Nonreversible] {
        let s = spec_for(v, PotentialModel::gaussian(2), 1);
        let z = vec![0.4; s.n()];
        assert!(gamma_correction(&s, &z, 1e-3).unwrap().iter().all(|g| *g == 0.0));
    }
    let m = make_quartic_mirror(2, 0.0).unwrap();
    let s = build_variant_spec(Variant::Mirror, PotentialModel::gaussian(2), &VariantParams::default(), Some(m)).unwrap();
    let dpart = s.diffusion_field().analytic_divergence(&[1.0, 1.0]).unwrap().unwrap();
    assert_abs_diff_eq!(dpart[0], -2.0 / 3.0, epsilon = 1e-12);
    assert_abs_diff_eq!(dpart[1], -2.0 / 3.0, epsilon = 1e-12);
    // The curl rows (±e^U off the diagonal) add e^U ∂_1U and −e^U ∂_0U.
    let g = gamma_correction(&s, &[1.0, 1.0], 1e-3).unwrap();
    let e = 1f64.exp();
    assert_abs_diff_eq!(g[0], -2.0 / 3.0 + e, epsilon = 1e-12);
    assert_abs_diff_eq!(g[1], -2.0 / 3.0 - e, epsilon = 1e-12);

    let m1 = make_quartic_mirror(1, 0.0).unwrap();
    let s1 = build_variant_spec(Variant::Mirror, PotentialModel::gaussian(1), &VariantParams::default(), Some(m1)).unwrap();
    assert_abs_diff_eq!(gamma_correction(&s1, &[1.0], 1e-3).unwrap()[0], -2.0 / 3.0, epsilon = 1e-12);
}

#[test]
fn mirror_gamma_fd_matches_analytic() {
    let s = spec_for(Variant::Mirror, PotentialModel::gaussian(2), 0);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let z: Vec<f64> = (0..2).map(|_| rng.random_range(-1.5..1.5)).collect();
        let a = gamma_correction(&s, &z, 1e-3).unwrap();
        let b = gamma_correction_fd(&s, &z, 1e-4).unwrap();
        for i in 0..2 {
            assert!((a[i] - b[i]).abs() <= 1e-4 * a[i].abs().max(1.0), "{z:?}: {a:?} vs {b:?}");
        }
    }
}

fn max_residual(s: &DynamicsSpec, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..50)
        .map(|_| {
            let z: Vec<f64> = (0..s.n()).map(|_| rng.random_range(-3.0..3.0)).collect();
            stationarity_residual(s, &z, 1e-3).unwrap().abs()
        })
        .fold(0.0, f64::max)
}

#[test]
fn stationarity_of_builtins() {
    for d in [1, 2] {
        for v in Variant::BUILTIN {
            let s = spec_for(v, PotentialModel::gaussian(d), 3);
            let r = max_residual(&s, 21);
            assert!(r <= 1e-4, "{v} d={d}: {r}");
        }
    }
}

#[test]
fn negative_controls_break_stationarity() {
    let s = spec_for(Variant::Underdamped, PotentialModel::gaussian(1), 0);
    let clean = max_residual(&s, 22);
    let bad = max_residual(&friction_dropped(&s).unwrap(), 22);
    assert!(bad > 1e-1);
    assert!(bad > 1e3 * clean.max(1e-12));
    assert!(friction_dropped(&spec_for(Variant::Hfhr, PotentialModel::gaussian(1), 0)).is_err());

    // Dropping the −∇U term of the overdamped drift.
    let o = spec_for(Variant::Overdamped, PotentialModel::gaussian(1), 0).with_drift_override(Arc::new(|_z: &[f64]| vec![0.0]));
    assert!(max_residual(&o, 23) > 1e-1);
}

#[test]
fn curl_condition() {
    let q = DMatrix::from_row_slice(2, 2, &[0.0, 1.3, -1.3, 0.0]);
    let s = DynamicsSpec::custom(
        AugLayout::theta_only(2),
        PotentialModel::double_well(2),
        MatrixField::Constant(DMatrix::identity(2, 2)),
        MatrixField::Constant(q),
    )
    .unwrap();
    for z in [[0.3, -0.2], [1.0, 1.5], [-2.0, 0.7]] {
        assert!(curl_condition_residual(&s, &z, 1e-3).unwrap().abs() <= 1e-6);
    }

    let m = spec_for(Variant::Mirror, PotentialModel::gaussian(2), 0);
    for z in [[0.3, -0.2], [0.8, 0.5], [-1.0, 0.4]] {
        assert!(curl_condition_residual(&m, &z, 1e-3).unwrap().abs() <= 1e-4);
    }

    let bad = MatrixField::Custom { eval: Arc::new(|z: &[f64]| DMatrix::from_fn(2, 2, |i, _| z[i])), divergence: None };
    let e = DynamicsSpec::custom(
        AugLayout::theta_only(2),
        PotentialModel::gaussian(2),
        MatrixField::Constant(DMatrix::identity(2, 2)),
        bad,
    )
    .unwrap_err();
    assert!(matches!(e, Error::Usage(_)));
}

#[test]
fn antisymmetric_seed() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = AntisymmetricMatrixSeed::random(4, &mut rng);
    assert_eq!(s.derived, &s.base - s.base.transpose());
    assert_eq!((&s.derived + s.derived.transpose()).amax(), 0.0);
    assert!(AntisymmetricMatrixSeed::from_base(DMatrix::zeros(2, 3)).is_err());
}

#[test]
fn variant_names_round_trip() {
    for v in Variant::BUILTIN {
        assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
    }
    assert!("langevin".parse::<Variant>().is_err());
}

proptest! {
    #[test]
    fn invariants_hold_at_random_points(seed in 0u64..1000, x in -3.0f64..3.0, y in -3.0f64..3.0) {
        for v in Variant::BUILTIN {
            let s = spec_for(v, PotentialModel::gaussian(1), seed);
            let z: Vec<f64> = [x, y, x - y][..s.n()].to_vec();
            if v == Variant::Mirror && x.abs() < 1e-3 {
                continue;
            }
            prop_assert!(s.check_invariants(&z).is_ok());
            let q = s.curl(&z).unwrap();
            prop_assert!((&q + q.transpose()).amax() <= 1e-12);
            let dm = s.diffusion(&z).unwrap();
            let eig = dm.clone().symmetric_eigen().eigenvalues;
            prop_assert!(eig.iter().all(|e| *e >= -1e-12));
        }
    }

    #[test]
    fn hamiltonian_gradient_fd(x in -3.0f64..3.0, y in -3.0f64..3.0, w in -3.0f64..3.0) {
        let s = spec_for(Variant::Highorder, PotentialModel::double_well(1), 0);
        let z = [x, y, w];
        let g = s.hamiltonian_grad(&z);
        for i in 0..3 {
            let h = 1e-5;
            let mut a = z;
            let mut b = z;
            a[i] += h;
            b[i] -= h;
            let fd = (s.hamiltonian(&a) - s.hamiltonian(&b)) / (2.0 * h);
            prop_assert!((fd - g[i]).abs() <= 1e-5 * g[i].abs().max(1.0));
        }
    }
}
