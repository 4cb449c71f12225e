use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::config::Config;
use super::manifest::OutputSet;
use crate::blr::{self, Dataset, ExperimentConfig, PredictionRule, SplitConfig, SyntheticConfig};
use crate::dynamics::{self, AntisymmetricMatrixSeed, DynamicsSpec, Variant, VariantParams};
use crate::error::{Error, Result};
use crate::lyapunov::{self, BoundConstants, LyapunovKind, LyapunovParams};
use crate::potentials::{make_arctan_mirror, make_quartic_mirror, PotentialModel};
use crate::ratelab::{self, GridDomain, PerturbationSpec, SolverOptions};
use crate::samplers::{self, EnsembleSummary, HistogramSpec, IntegratorConfig};

/// Everything a command needs besides its config.
pub struct Context {
    pub seed: u64,
    pub reproducible: bool,
    pub config_dir: PathBuf,
}

/// Result of a command: exit code and manifest deviations. Files are
/// recorded in the [`OutputSet`].
pub struct Outcome {
    pub exit_code: i32,
    pub deviations: Vec<String>,
}

impl Outcome {
    fn ok(deviations: Vec<String>) -> Self {
        Self { exit_code: 0, deviations }
    }
}

const J_STREAM: u64 = 0x4a5f_5345_4544;

pub fn potential_from(cfg: &Config, section: &str) -> Result<PotentialModel> {
    let name_field = format!("{section}.potential");
    let dim_field = format!("{section}.dim");
    let dim = cfg.u64_or(&dim_field, 1)? as usize;
    if dim == 0 || dim > 3 {
        return Err(Error::config(dim_field, "must lie in 1..=3"));
    }
    match cfg.str_or(&name_field, "gaussian")? {
        "gaussian" => Ok(PotentialModel::gaussian(dim)),
        "double-well" => Ok(PotentialModel::double_well(dim)),
        other => Err(Error::config(name_field, format!("unknown potential `{other}`"))),
    }
}

/// Default parameters used when a config leaves them out.
pub fn default_params(variant: Variant) -> (Option<f64>, Option<f64>, Option<f64>) {
    match variant {
        Variant::Underdamped => (Some(4.0), None, None),
        Variant::Highorder => (Some(20.0), Some(15.0), None),
        Variant::Hfhr => (None, Some(30.0), Some(1.0)),
        _ => (None, None, None),
    }
}

/// Builds a spec from `[section]`: `variant`, `potential`, `dim`, `gamma`,
/// `alpha`, `beta`, `j` (matrix) or a seed-derived random `J`,
/// `mirror_profile` (`quartic`|`arctan`), `mirror_eps`, `mirror_c`.
pub fn dynamics_from(cfg: &Config, section: &str, variant: Option<Variant>, seed: u64) -> Result<DynamicsSpec> {
    let vfield = format!("{section}.variant");
    let variant = match variant {
        Some(v) => v,
        None => cfg
            .str(&vfield)?
            .parse::<Variant>()
            .map_err(|e| Error::config(&vfield, e.to_string()))?,
    };
    if variant == Variant::Custom {
        return Err(Error::config(vfield, "custom dynamics cannot be built from a config file"));
    }
    let potential = potential_from(cfg, section)?;
    let d = potential.dim();
    let (g0, a0, b0) = default_params(variant);
    let f = |name: &str| format!("{section}.{name}");
    let mut params = VariantParams {
        gamma: cfg.opt_f64(&f("gamma"))?.or(g0),
        alpha: cfg.opt_f64(&f("alpha"))?.or(a0),
        beta: cfg.opt_f64(&f("beta"))?.or(b0),
        j: None,
    };
    let mut mirror = None;
    match variant {
        Variant::Nonreversible => {
            params.j = Some(match cfg.opt_matrix(&f("j"))? {
                Some(rows) => {
                    let n = rows.len();
                    if rows.iter().any(|r| r.len() != n) {
                        return Err(Error::config(f("j"), "must be a square matrix"));
                    }
                    DMatrix::from_fn(n, n, |i, j| rows[i][j])
                }
                None => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(J_STREAM);
                    AntisymmetricMatrixSeed::random(d, &mut rng).derived
                }
            });
        }
        Variant::Mirror => {
            mirror = Some(match cfg.str_or(&f("mirror_profile"), "quartic")? {
                "quartic" => make_quartic_mirror(d, cfg.f64_or(&f("mirror_eps"), 1e-3)?)?,
                "arctan" => make_arctan_mirror(d, cfg.f64_or(&f("mirror_c"), 1.0)?)?,
                other => return Err(Error::config(f("mirror_profile"), format!("unknown profile `{other}`"))),
            });
        }
        _ => {}
    }
    dynamics::build_variant_spec(variant, potential, &params, mirror).map_err(|e| match e {
        Error::Usage(m) => Error::config(section, m),
        other => other,
    })
}

#[derive(Serialize)]
struct SampleSummary<'a> {
    variant: Variant,
    potential: &'a str,
    state_dim: usize,
    integrator: &'a IntegratorConfig,
    n_chains: usize,
    failed_chains: Vec<usize>,
    theta_mean: Vec<f64>,
    theta_covariance: Vec<Vec<f64>>,
    summary: Option<samplers::SummaryReport>,
}

pub fn cmd_sample(cfg: &Config, ctx: &Context, out: &mut OutputSet) -> Result<Outcome> {
    let spec = dynamics_from(cfg, "dynamics", None, ctx.seed)?;
    let icfg = IntegratorConfig {
        eta: cfg.f64("integrator.eta")?,
        n_steps: cfg.u64("integrator.n_steps")?,
        burn_in: cfg.u64_or("integrator.burn_in", 0)?,
        thinning: cfg.u64_or("integrator.thinning", 1)?,
        n_chains: cfg.u64_or("integrator.n_chains", 1)? as usize,
        seed: ctx.seed,
    };
    icfg.validate().map_err(|e| match e {
        Error::Config { field, message } => Error::Config { field: format!("integrator.{field}"), message },
        other => other,
    })?;
    let init = match cfg.opt_f64_vec("integrator.init")? {
        Some(v) if v.len() != spec.n() => {
            return Err(Error::config("integrator.init", format!("needs {} entries, got {}", spec.n(), v.len())))
        }
        Some(v) => v,
        None => vec![0.0; spec.n()],
    };
    let hist = HistogramSpec {
        lo: cfg.f64_or("output.hist_lo", -8.0)?,
        hi: cfg.f64_or("output.hist_hi", 8.0)?,
        bins: cfg.u64_or("output.hist_bins", 400)? as usize,
    };
    if !(hist.hi > hist.lo) || hist.bins == 0 {
        return Err(Error::config("output.hist_bins", "histogram needs hi > lo and at least one bin"));
    }
    let spill = cfg.bool_or("output.trajectories", false)?;
    std::fs::create_dir_all(&out.dir).map_err(|e| Error::io(&out.dir, e))?;
    let results: Vec<Result<EnsembleSummary>> = (0..icfg.n_chains as u64)
        .into_par_iter()
        .map(|c| {
            let name = format!("chain_{c}.csv");
            let partial = out.dir.join(format!(".{name}.partial"));
            let r = samplers::run_chain_with(&spec, &icfg, &init, c, hist, spill.then_some(partial.as_path()));
            if spill {
                match &r {
                    Ok(_) => std::fs::rename(&partial, out.dir.join(&name)).map_err(|e| Error::io(&partial, e))?,
                    Err(_) => {
                        let _ = std::fs::remove_file(&partial);
                    }
                }
            }
            r.map(|(_, s)| s)
        })
        .collect();
    let mut deviations = Vec::new();
    let mut failed = Vec::new();
    let mut first_err = None;
    let mut good = Vec::new();
    for (c, r) in results.into_iter().enumerate() {
        match r {
            Ok(s) => {
                if spill {
                    out.register(&format!("chain_{c}.csv"));
                }
                good.push(s)
            }
            Err(e) => {
                deviations.push(format!("chain {c} failed: {e}"));
                failed.push(c);
                first_err.get_or_insert(e);
            }
        }
    }
    let merged = samplers::merge_all(&good);
    let d = spec.layout().d;
    let (theta_mean, theta_cov) = match &merged {
        Some(m) => {
            let c = m.theta_covariance();
            (m.theta_mean(), (0..d).map(|i| (0..d).map(|j| c[(i, j)]).collect()).collect())
        }
        None => (Vec::new(), Vec::new()),
    };
    let summary = SampleSummary {
        variant: spec.variant(),
        potential: spec.potential().name(),
        state_dim: spec.n(),
        integrator: &icfg,
        n_chains: icfg.n_chains,
        failed_chains: failed.clone(),
        theta_mean,
        theta_covariance: theta_cov,
        summary: merged.map(|m| m.report()),
    };
    out.write_json("summary.json", &summary)?;
    let code = match first_err {
        Some(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
        None => 0,
    };
    Ok(Outcome { exit_code: code, deviations })
}

fn grid_from(cfg: &Config, dims: usize, lo: f64, hi: f64, points: u64) -> Result<GridDomain> {
    let bounds = match cfg.opt_matrix("grid.bounds")? {
        Some(rows) => rows
            .iter()
            .enumerate()
            .map(|(i, r)| match r.as_slice() {
                [a, b] => Ok((*a, *b)),
                _ => Err(Error::config(format!("grid.bounds[{i}]"), "expected [lo, hi]")),
            })
            .collect::<Result<Vec<_>>>()?,
        None => vec![(cfg.f64_or("grid.lo", lo)?, cfg.f64_or("grid.hi", hi)?); dims],
    };
    let points = match cfg.get("grid.points") {
        Some(toml::Value::Array(_)) => cfg
            .opt_f64_vec("grid.points")?
            .unwrap_or_default()
            .into_iter()
            .map(|x| x as usize)
            .collect(),
        _ => vec![cfg.u64_or("grid.points", points)? as usize; dims],
    };
    if bounds.len() != dims || points.len() != dims {
        return Err(Error::config("grid", format!("needs {dims} axes to match the state dimension")));
    }
    GridDomain::new(bounds, points).map_err(|e| Error::config("grid", e.to_string()))
}

pub fn cmd_rates(cfg: &Config, ctx: &Context, out: &mut OutputSet) -> Result<Outcome> {
    let spec = dynamics_from(cfg, "dynamics", None, ctx.seed)?;
    let n = spec.n();
    let domain = grid_from(cfg, n, -6.0, 6.0, if n == 1 { 801 } else if n == 2 { 121 } else { 49 })?;
    let count = cfg.u64_or("family.count", 20)? as usize;
    let amplitude = cfg.f64_or("family.amplitude", 0.5)?;
    let fseed = cfg.u64_or("family.seed", ctx.seed)?;
    let family: Vec<PerturbationSpec> = match cfg.str_or("family.kind", "smooth")? {
        "smooth" => ratelab::random_smooth_family(n, count, amplitude, fseed),
        "ph" => {
            let r = spec
                .layout()
                .r()
                .ok_or_else(|| Error::config("family.kind", "the `ph` family needs a state with an r block"))?;
            ratelab::random_ph_family(n, r.start, count, amplitude, fseed)?
        }
        "zero" => vec![PerturbationSpec::zero(n).with_label("zero")],
        other => return Err(Error::config("family.kind", format!("unknown family `{other}`"))),
    };
    let defaults = SolverOptions::default();
    let opts = SolverOptions {
        dense_max: cfg.u64_or("solver.dense_max", defaults.dense_max as u64)? as usize,
        cg_tol: cfg.f64_or("solver.cg_tol", defaults.cg_tol)?,
        cg_max_iter: cfg.u64_or("solver.cg_max_iter", defaults.cg_max_iter as u64)? as usize,
        compat_tol: cfg.f64_or("solver.compat_tol", defaults.compat_tol)?,
    };
    let report = ratelab::compare_rates(&spec, &domain, &family, &opts)?;
    out.write_json("comparison.json", &report)?;
    out.write("comparison.csv", report.to_csv()?.as_bytes())?;
    let mut deviations = vec!["rates are evaluated on a truncated box with a face-based quadrature".to_string()];
    if !report.hypothesis_met {
        deviations.push(format!("hypothesis not met: {}", report.hypothesis));
    }
    Ok(Outcome::ok(deviations))
}

#[derive(Serialize)]
struct VariantResult {
    eta: f64,
    hyperparams: BTreeMap<String, f64>,
    final_accuracy: Option<f64>,
    diverged_at: Option<u64>,
    csv: String,
}

#[derive(Serialize)]
struct BlrMetadata {
    config: serde_json::Value,
    seed: u64,
    library_version: &'static str,
    data_source: String,
    n_rows: usize,
    n_features: usize,
    n_train: usize,
    n_test: usize,
    standardized: bool,
    map_test_accuracy: f64,
    prediction_rule: PredictionRule,
    variants: BTreeMap<String, VariantResult>,
    deviations: Vec<String>,
}

pub fn cmd_blr(cfg: &Config, ctx: &Context, out: &mut OutputSet) -> Result<Outcome> {
    let mut deviations = Vec::new();
    let source = cfg.str_or("data.source", "synthetic")?.to_string();
    let data: Dataset = match source.as_str() {
        "synthetic" => {
            let d = SyntheticConfig::default();
            let sc = SyntheticConfig {
                n: cfg.u64_or("data.n", d.n as u64)? as usize,
                d: cfg.u64_or("data.d", d.d as u64)? as usize,
                feature_scale: cfg.f64_or("data.feature_scale", d.feature_scale)?,
                prior_scale: cfg.f64_or("data.prior_scale", d.prior_scale)?,
                seed: cfg.u64_or("data.seed", ctx.seed)?,
                intercept: cfg.bool_or("data.intercept", true)?,
            };
            blr::gen_synthetic(&sc).map_err(|e| Error::config("data", e.to_string()))?.0
        }
        "wdbc" => {
            let raw = Path::new(cfg.str("data.path")?);
            let path = if raw.is_absolute() { raw.to_path_buf() } else { ctx.config_dir.join(raw) };
            let data = blr::load_wdbc(&path)?;
            if data.n != blr::WDBC_ROWS {
                deviations.push(format!("WDBC file has {} rows, the canonical file has {}", data.n, blr::WDBC_ROWS));
            }
            deviations.push("the 31 features are 30 measurements plus an intercept column".into());
            data
        }
        other => return Err(Error::config("data.source", format!("unknown source `{other}`"))),
    };
    let variants: Vec<Variant> = match (cfg.opt_str_vec("experiment.variants")?, cfg.opt_str("experiment.variant")?) {
        (Some(list), _) => list
            .iter()
            .map(|s| s.parse().map_err(|e: Error| Error::config("experiment.variants", e.to_string())))
            .collect::<Result<_>>()?,
        (None, Some(v)) => vec![v.parse().map_err(|e: Error| Error::config("experiment.variant", e.to_string()))?],
        (None, None) => Variant::BUILTIN.to_vec(),
    };
    let n_steps = cfg.u64("experiment.n_steps")?;
    let eval_every = cfg.u64_or("experiment.eval_every", n_steps)?;
    let rule: PredictionRule = cfg
        .str_or("experiment.prediction_rule", "current-iterate")?
        .parse()
        .map_err(|e: Error| Error::config("experiment.prediction_rule", e.to_string()))?;
    let split = SplitConfig {
        train_fraction: cfg.f64_or("experiment.train_fraction", 0.8)?,
        seed: cfg.u64_or("experiment.split_seed", ctx.seed)?,
    };
    let standardize = cfg.bool_or("experiment.standardize", true)?;
    let (train, test, record) = if standardize {
        let (a, b, r) = blr::split_standardize(&data, split.train_fraction, split.seed)
            .map_err(|e| Error::config("experiment.train_fraction", e.to_string()))?;
        deviations.push("features standardized with z-scores fit on the training rows".into());
        deviations.extend(r.warnings.iter().cloned());
        (a, b, Some(r))
    } else {
        let (a, b) = blr::split(&data, split.train_fraction, split.seed)
            .map_err(|e| Error::config("experiment.train_fraction", e.to_string()))?;
        (a, b, None)
    };
    let lambda = cfg.f64_or("experiment.lambda", 10.0)?;
    let map = blr::map_estimate(&blr::blr_potential(&train, lambda)?)?;
    let map_acc = blr::accuracy(&map, &test)?;
    let mut exps = Vec::new();
    for v in &variants {
        let mut e = ExperimentConfig::for_variant(*v);
        e.hyperparams.insert("lambda".into(), lambda);
        let section = format!("hyperparams.{}", v.as_str());
        if let Some(toml::Value::Table(t)) = cfg.get(&section) {
            for key in t.keys() {
                e.hyperparams.insert(key.clone(), cfg.f64(&format!("{section}.{key}"))?);
            }
        }
        e.eta = cfg.f64_or(&format!("eta.{}", v.as_str()), cfg.f64_or("experiment.eta", e.eta)?)?;
        e.n_steps = n_steps;
        e.eval_every = eval_every;
        e.prediction_rule = rule;
        e.split = split.clone();
        e.seed = ctx.seed;
        e.record_wall_time = !ctx.reproducible;
        e.validate().map_err(|err| match err {
            Error::Config { field, message } => Error::Config { field: format!("experiment.{field}"), message },
            other => other,
        })?;
        exps.push(e);
    }
    let runs: Vec<Result<blr::AccuracyTrajectory>> = exps.par_iter().map(|e| blr::run_on_split(e, &train, &test)).collect();
    let mut results = BTreeMap::new();
    let mut diverged = false;
    for (e, r) in exps.iter().zip(runs) {
        let traj = r?;
        let name = format!("accuracy_{}.csv", e.variant.as_str());
        out.write(&name, traj.to_csv().as_bytes())?;
        if let Some(s) = traj.diverged_at {
            diverged = true;
            deviations.push(format!("{} diverged at step {s}", e.variant));
        }
        results.insert(
            e.variant.as_str().to_string(),
            VariantResult {
                eta: e.eta,
                hyperparams: e.hyperparams.clone(),
                final_accuracy: traj.final_accuracy(),
                diverged_at: traj.diverged_at,
                csv: name,
            },
        );
    }
    let meta = BlrMetadata {
        config: cfg.to_json(),
        seed: ctx.seed,
        library_version: env!("CARGO_PKG_VERSION"),
        data_source: source,
        n_rows: data.n,
        n_features: data.d,
        n_train: train.n,
        n_test: test.n,
        standardized: record.is_some(),
        map_test_accuracy: map_acc,
        prediction_rule: rule,
        variants: results,
        deviations: deviations.clone(),
    };
    out.write_json("blr_metadata.json", &meta)?;
    Ok(Outcome { exit_code: if diverged { 3 } else { 0 }, deviations })
}

pub fn cmd_lyapunov(cfg: &Config, _ctx: &Context, out: &mut OutputSet) -> Result<Outcome> {
    let kind: LyapunovKind = cfg
        .str("kind")?
        .parse()
        .map_err(|e: Error| Error::config("kind", e.to_string()))?;
    let potential = potential_from(cfg, "potential")?;
    let d0 = LyapunovParams::default();
    let p = |name: &str, dflt: f64| cfg.f64_or(&format!("params.{name}"), dflt);
    let params = LyapunovParams {
        eta: p("eta", d0.eta)?,
        a: p("a", d0.a)?,
        b: cfg.opt_f64("params.b")?,
        h: p("h", d0.h)?,
        delta: p("delta", d0.delta)?,
        k: p("k", d0.k)?,
        alpha: p("alpha", d0.alpha)?,
        beta: p("beta", d0.beta)?,
        gamma: p("gamma", d0.gamma)?,
        c1: p("c1", d0.c1)?,
        big_c1: p("big_c1", d0.big_c1)?,
        m_u: p("m_u", d0.m_u)?,
        big_m_u: p("big_m_u", d0.big_m_u)?,
        enforce_recipe: cfg.bool_or("params.enforce_recipe", true)?,
        shift_domain: None,
    };
    let vp = VariantParams { gamma: Some(params.gamma), alpha: Some(params.alpha), beta: Some(params.beta), j: None };
    let spec = match kind {
        LyapunovKind::Hfhr => dynamics::build_variant_spec(Variant::Hfhr, potential.clone(), &vp, None)?,
        LyapunovKind::Highorder => dynamics::build_variant_spec(Variant::Highorder, potential.clone(), &vp, None)?,
        LyapunovKind::GibbsPower => {
            let v: Variant = cfg
                .str_or("dynamics.variant", "overdamped")?
                .parse()
                .map_err(|e: Error| Error::config("dynamics.variant", e.to_string()))?;
            dynamics_from(cfg, "potential", Some(v), _ctx.seed)?
        }
    };
    let n = spec.n();
    let grid = grid_from(cfg, n, -5.0, 5.0, if n == 3 { 61 } else { 101 })?;
    let params = LyapunovParams { shift_domain: Some(grid.clone()), ..params };
    let lyap = lyapunov::build_lyapunov(kind, potential, &params).map_err(|e| match e {
        Error::Usage(m) => Error::config("params", m),
        other => other,
    })?;
    let constants = if cfg.has("constants") {
        Some(BoundConstants {
            a: cfg.f64("constants.A")?,
            b: cfg.opt_f64("constants.B")?,
            c: cfg.opt_f64("constants.C")?,
            dc: cfg.f64("constants.Dc")?,
        })
    } else {
        None
    };
    let report = lyapunov::verify_quadratic_bound(&spec, &lyap, &grid, constants.as_ref(), cfg.opt_f64("offset_cap")?)
        .map_err(|e| match e {
            Error::Usage(m) => Error::config("constants", m),
            other => other,
        })?;
    out.write_json("bound_report.json", &report)?;
    Ok(Outcome::ok(vec!["the bound is checked on a bounded grid only".into()]))
}

#[derive(Serialize)]
struct StationarityEntry {
    variant: Variant,
    max_residual: f64,
    argmax: Vec<f64>,
    pass: bool,
}

#[derive(Serialize)]
struct NegativeControl {
    description: &'static str,
    max_residual: f64,
    detected: bool,
}

#[derive(Serialize)]
struct StationarityReport {
    fd_step: f64,
    tol: f64,
    n_points: usize,
    box_half_width: f64,
    variants: Vec<StationarityEntry>,
    negative_control: Option<NegativeControl>,
    all_pass: bool,
}

/// Quartic-mirror regularization for the stationarity check. The metric
/// varies on the scale `sqrt(eps / 3)`, which must stay well above the
/// finite-difference step.
pub const STATIONARITY_MIRROR_EPS: f64 = 0.1;

/// Largest `|residual|` over `n_points` seeded uniform points in the box.
pub fn max_stationarity_residual(
    spec: &DynamicsSpec,
    n_points: usize,
    half_width: f64,
    fd_step: f64,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<Vec<f64>> = (0..n_points)
        .map(|_| (0..spec.n()).map(|_| rng.random_range(-half_width..=half_width)).collect())
        .collect();
    let vals = pts
        .par_iter()
        .map(|z| dynamics::stationarity_residual(spec, z, fd_step).map(f64::abs))
        .collect::<Result<Vec<_>>>()?;
    let (i, m) = vals
        .iter()
        .enumerate()
        .fold((0, 0.0_f64), |acc, (i, v)| if *v > acc.1 { (i, *v) } else { acc });
    Ok((m, pts.get(i).cloned().unwrap_or_default()))
}

pub fn cmd_check_stationarity(cfg: &Config, ctx: &Context, out: &mut OutputSet) -> Result<Outcome> {
    let variants: Vec<Variant> = match cfg.opt_str_vec("variants")? {
        Some(list) => list
            .iter()
            .map(|s| s.parse().map_err(|e: Error| Error::config("variants", e.to_string())))
            .collect::<Result<_>>()?,
        None => Variant::BUILTIN.to_vec(),
    };
    let n_points = cfg.u64_or("n_points", 50)? as usize;
    let half = cfg.f64_or("box", 3.0)?;
    let fd_step = cfg.f64_or("fd_step", 1e-3)?;
    let tol = cfg.f64_or("tol", 1e-4)?;
    let mut entries = Vec::new();
    for v in variants {
        let section = format!("params.{}", v.as_str());
        let mut merged = merge_section(cfg, &section)?;
        if v == Variant::Mirror && !merged.has("dynamics.mirror_eps") {
            merged = merge_section_with(cfg, &section, &[("mirror_eps", STATIONARITY_MIRROR_EPS)])?;
        }
        let spec = dynamics_from(&merged, "dynamics", Some(v), ctx.seed)?;
        let (m, arg) = max_stationarity_residual(&spec, n_points, half, fd_step, ctx.seed)?;
        entries.push(StationarityEntry { variant: v, max_residual: m, argmax: arg, pass: m <= tol });
    }
    let negative_control = if cfg.bool_or("negative_control", true)? {
        let base = dynamics_from(&merge_section(cfg, "params.underdamped")?, "dynamics", Some(Variant::Underdamped), ctx.seed)?;
        let bad = dynamics::friction_dropped(&base)?;
        let (m, _) = max_stationarity_residual(&bad, n_points, half, fd_step, ctx.seed)?;
        Some(NegativeControl {
            description: "underdamped drift with the friction term removed",
            max_residual: m,
            detected: m > 1e-1,
        })
    } else {
        None
    };
    let all_pass = entries.iter().all(|e| e.pass) && negative_control.as_ref().is_none_or(|n| n.detected);
    let report = StationarityReport {
        fd_step,
        tol,
        n_points,
        box_half_width: half,
        variants: entries,
        negative_control,
        all_pass,
    };
    out.write_json("stationarity.json", &report)?;
    Ok(Outcome::ok(Vec::new()))
}

/// A config whose `[dynamics]` table is the top-level `potential`/`dim`
/// keys overlaid with `[section]`.
fn merge_section(cfg: &Config, section: &str) -> Result<Config> {
    merge_section_with(cfg, section, &[])
}

fn merge_section_with(cfg: &Config, section: &str, defaults: &[(&str, f64)]) -> Result<Config> {
    let mut table = toml::Table::new();
    for (k, v) in defaults {
        table.insert((*k).into(), toml::Value::Float(*v));
    }
    for key in ["potential", "dim"] {
        if let Some(v) = cfg.get(key) {
            table.insert(key.into(), v.clone());
        }
    }
    if let Some(toml::Value::Table(t)) = cfg.get(section) {
        for (k, v) in t {
            table.insert(k.clone(), v.clone());
        }
    }
    let mut root = toml::Table::new();
    root.insert("dynamics".into(), toml::Value::Table(table));
    Config::parse(&toml::to_string(&root).map_err(|e| Error::Format(e.to_string()))?)
}
