use langevin_lab::dynamics::{build_variant_spec, DynamicsSpec, Variant, VariantParams};
use langevin_lab::lyapunov::{
    build_lyapunov, neg_generator_ratio, neg_generator_ratio_fd, verify_quadratic_bound, BoundConstants, LyapunovKind,
    LyapunovParams, LyapunovSpec,
};
use langevin_lab::potentials::PotentialModel;
use langevin_lab::ratelab::GridDomain;
use langevin_lab::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn overdamped(d: usize) -> DynamicsSpec {
    build_variant_spec(Variant::Overdamped, PotentialModel::gaussian(d), &VariantParams::default(), None).unwrap()
}

fn gibbs(eta: f64, pot: PotentialModel) -> LyapunovSpec {
    build_lyapunov(LyapunovKind::GibbsPower, pot, &LyapunovParams { eta, ..Default::default() }).unwrap()
}

fn hfhr_setup() -> (DynamicsSpec, LyapunovSpec) {
    let vp = VariantParams { alpha: Some(1.0), beta: Some(1.0), ..Default::default() };
    let spec = build_variant_spec(Variant::Hfhr, PotentialModel::gaussian(1), &vp, None).unwrap();
    let lyap = build_lyapunov(LyapunovKind::Hfhr, PotentialModel::gaussian(1), &LyapunovParams::default()).unwrap();
    (spec, lyap)
}

fn highorder_setup(a: f64, enforce: bool) -> langevin_lab::Result<(DynamicsSpec, LyapunovSpec, GridDomain)> {
    let vp = VariantParams { alpha: Some(1.0), gamma: Some(1.0), ..Default::default() };
    let spec = build_variant_spec(Variant::Highorder, PotentialModel::gaussian(1), &vp, None)?;
    let grid = GridDomain::cube(3, -5.0, 5.0, 41)?;
    let params = LyapunovParams { a, h: 0.25, enforce_recipe: enforce, shift_domain: Some(grid.clone()), ..Default::default() };
    let lyap = build_lyapunov(LyapunovKind::Highorder, PotentialModel::gaussian(1), &params)?;
    Ok((spec, lyap, grid))
}

#[test]
fn gibbs_power_reference_values() {
    let spec = overdamped(2);
    let lyap = gibbs(0.5, PotentialModel::gaussian(2));
    assert!(neg_generator_ratio(&spec, &lyap, &[2.0, 0.0]).unwrap().abs() <= 1e-12);
    assert!((neg_generator_ratio(&spec, &lyap, &[4.0, 0.0]).unwrap() - 3.0).abs() <= 1e-12);
    assert!((lyap.phi(&[1.0, 3.0]) - 0.25 * 10.0).abs() <= 1e-15);
}

#[test]
fn gibbs_power_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for pot in [PotentialModel::gaussian(2), PotentialModel::double_well(2)] {
        let spec = build_variant_spec(Variant::Overdamped, pot.clone(), &VariantParams::default(), None).unwrap();
        for eta in [0.1, 0.5, 0.9] {
            let lyap = gibbs(eta, pot.clone());
            for _ in 0..50 {
                let th: Vec<f64> = (0..2).map(|_| rng.random_range(-4.0..4.0)).collect();
                let g = pot.gradient(&th);
                let g2: f64 = g.iter().map(|x| x * x).sum();
                let closed = eta * ((1.0 - eta) * g2 - pot.laplacian(&th).unwrap());
                let got = neg_generator_ratio(&spec, &lyap, &th).unwrap();
                assert!((got - closed).abs() <= 1e-6 * closed.abs().max(1.0), "{got} vs {closed}");
            }
        }
    }
}

#[test]
fn fd_path_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (hs, hl) = hfhr_setup();
    let (os, ol, _) = highorder_setup(0.005, true).unwrap();
    let dl_params = LyapunovParams {
        a: 0.005,
        h: 0.25,
        delta: 0.8,
        shift_domain: Some(GridDomain::cube(3, -5.0, 5.0, 21).unwrap()),
        ..Default::default()
    };
    let odl = build_lyapunov(LyapunovKind::Highorder, PotentialModel::gaussian(1), &dl_params).unwrap();
    let gs = overdamped(2);
    let gl = gibbs(0.5, PotentialModel::gaussian(2));
    let cases: [(&DynamicsSpec, &LyapunovSpec); 4] = [(&hs, &hl), (&os, &ol), (&os, &odl), (&gs, &gl)];
    for (spec, lyap) in cases {
        for _ in 0..40 {
            let z: Vec<f64> = (0..spec.n()).map(|_| rng.random_range(-3.0..3.0)).collect();
            let a = neg_generator_ratio(spec, lyap, &z).unwrap();
            let b = neg_generator_ratio_fd(spec, lyap, &z, 1e-3).unwrap();
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0), "{:?}: {a} vs {b} at {z:?}", lyap.kind());
        }
    }
}

#[test]
fn hfhr_bound_is_feasible() {
    let (spec, lyap) = hfhr_setup();
    let b = lyap.cross_weight().unwrap();
    assert!(b > 0.0 && b < 0.5);
    let grid = GridDomain::cube(2, -5.0, 5.0, 101).unwrap();
    let rep = verify_quadratic_bound(&spec, &lyap, &grid, None, None).unwrap();
    assert!(rep.pass, "{rep:?}");
    assert!(rep.constants.a >= 0.01 && rep.constants.b.unwrap() >= 0.01, "{:?}", rep.constants);
    assert!(rep.constants.dc <= 4.0 * lyap.nominal_offset() + 1e-12);
    assert!(rep.min_residual >= 0.0);
}

#[test]
fn hfhr_recipe_constraints_are_checked() {
    let bad_b = LyapunovParams { b: Some(0.6), ..Default::default() };
    let e = build_lyapunov(LyapunovKind::Hfhr, PotentialModel::gaussian(1), &bad_b).unwrap_err();
    assert!(matches!(e, Error::Usage(ref m) if m.contains("c1/(2 alpha)")), "{e}");
    let bad_a = LyapunovParams { a: 1.2, ..Default::default() };
    assert!(build_lyapunov(LyapunovKind::Hfhr, PotentialModel::gaussian(1), &bad_a).is_err());
    assert!(matches!(highorder_setup(0.5, true), Err(Error::Usage(ref m)) if m.contains("constraint")));
    let bad_delta = LyapunovParams { delta: 0.0, ..Default::default() };
    assert!(build_lyapunov(LyapunovKind::Highorder, PotentialModel::gaussian(1), &bad_delta).is_err());
}

#[test]
fn highorder_feasible_and_negative_control() {
    let (spec, lyap, grid) = highorder_setup(0.005, true).unwrap();
    assert!(lyap.phi(&[0.0, 0.0, 0.0]) >= 1.0 - 1e-12);
    let ok = verify_quadratic_bound(&spec, &lyap, &grid, None, None).unwrap();
    assert!(ok.pass, "{ok:?}");

    let (spec, lyap, grid) = highorder_setup(0.5, false).unwrap();
    let bad = verify_quadratic_bound(&spec, &lyap, &grid, None, None).unwrap();
    assert!(!bad.pass, "{bad:?}");
}

#[test]
fn vacuous_bound_and_dc_monotonicity() {
    let (spec, lyap) = hfhr_setup();
    let grid = GridDomain::cube(2, -5.0, 5.0, 41).unwrap();
    let zero = BoundConstants { a: 0.0, b: Some(0.0), c: None, dc: 1e6 };
    assert!(verify_quadratic_bound(&spec, &lyap, &grid, Some(&zero), None).unwrap().pass);

    let found = verify_quadratic_bound(&spec, &lyap, &grid, None, None).unwrap();
    assert!(found.pass);
    for extra in [0.0, 0.1, 1.0, 10.0] {
        let k = BoundConstants { dc: found.constants.dc + extra, ..found.constants.clone() };
        assert!(verify_quadratic_bound(&spec, &lyap, &grid, Some(&k), None).unwrap().pass);
    }
    let big = BoundConstants { a: 5.0, b: Some(5.0), c: None, dc: 0.0 };
    assert!(!verify_quadratic_bound(&spec, &lyap, &grid, Some(&big), None).unwrap().pass);

    let wrong = BoundConstants { a: 1.0, b: None, c: None, dc: 0.0 };
    assert!(verify_quadratic_bound(&spec, &lyap, &grid, Some(&wrong), None).is_err());
    let neg = BoundConstants { a: -1.0, b: Some(0.0), c: None, dc: 0.0 };
    assert!(verify_quadratic_bound(&spec, &lyap, &grid, Some(&neg), None).is_err());
}

#[test]
fn cutoff_is_linear_past_two() {
    let (_, lyap, _) = highorder_setup(0.005, true).unwrap();
    let c = lyap.cutoff().unwrap();
    assert_eq!(c.value(&[0.5]), vec![0.0]);
    for s in [2.0, 3.0, 7.5, -4.0] {
        assert!((c.value(&[s])[0] - c.kappa * s).abs() <= 1e-12);
    }
    let mid = c.value(&[1.5])[0];
    assert!(mid > 0.0 && mid < c.kappa * 1.5);
}

#[test]
fn layout_mismatch_is_rejected() {
    let (spec, _) = hfhr_setup();
    let lyap = gibbs(0.5, PotentialModel::gaussian(2));
    assert!(neg_generator_ratio(&spec, &lyap, &[0.0, 0.0]).is_err());
}

#[test]
fn report_serializes_constants() {
    let (spec, lyap) = hfhr_setup();
    let grid = GridDomain::cube(2, -5.0, 5.0, 21).unwrap();
    let rep = verify_quadratic_bound(&spec, &lyap, &grid, None, None).unwrap();
    let v = serde_json::to_value(&rep).unwrap();
    assert_eq!(v["kind"], "hfhr");
    assert!(v["constants"]["A"].is_number() && v["constants"]["Dc"].is_number());
    assert!(v["note"].as_str().unwrap().contains("bounded box"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gibbs_ratio_grows_along_rays(angle in 0.0f64..std::f64::consts::TAU, eta in 0.1f64..0.9) {
        for pot in [PotentialModel::gaussian(2), PotentialModel::double_well(2)] {
            let spec = build_variant_spec(Variant::Overdamped, pot.clone(), &VariantParams::default(), None).unwrap();
            let lyap = gibbs(eta, pot);
            let vals: Vec<f64> = [5.0, 10.0, 20.0]
                .iter()
                .map(|r| neg_generator_ratio(&spec, &lyap, &[r * angle.cos(), r * angle.sin()]).unwrap())
                .collect();
            prop_assert!(vals[0] < vals[1] && vals[1] < vals[2], "{:?}", vals);
        }
    }

    #[test]
    fn gibbs_lyapunov_at_least_one(x in -10.0f64..10.0, y in -10.0f64..10.0) {
        let lyap = gibbs(0.5, PotentialModel::gaussian(2));
        prop_assert!(lyap.w(&[x, y]) >= 1.0);
    }
}
