//! Grid evaluation of empirical-measure rate functions.
//!
//! A perturbed measure `dν = e^v dμ` is tabulated on a box. The symmetric
//! part of a variant's rate is `¼ ∫ ∇v·D∇v dν`; the anti-symmetric part is
//! `¼ ∫ ∇ψ·D∇ψ dν` where `ψ` solves the weighted Poisson problem
//! `−(1/ν)∇·(ν D ∇ψ) = L_A v` and `L_A = b_A·∇` is the anti-symmetric
//! part of the generator.

mod grid;
mod operator;

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Serialize, Serializer};

pub use grid::{GridDomain, GridField, DEFAULT_NODE_CAP};
pub use operator::{SolverOptions, WeightedOperator};

use crate::dynamics::{DynamicsSpec, Variant};
use crate::error::{check_dim, Error, Result};
use crate::potentials::{ScalarFn, VectorFn};

/// Shell mass above which the box is declared too small.
pub const SHELL_MASS_TOL: f64 = 1e-6;
/// Slack allowed on comparison margins.
pub const EPS_SOLVER: f64 = 1e-4;

/// A perturbation `v` of the reference measure.
#[derive(Clone)]
pub struct PerturbationSpec {
    dim: usize,
    v: ScalarFn,
    grad: Option<VectorFn>,
    mask: Option<Vec<bool>>,
    label: String,
}

impl std::fmt::Debug for PerturbationSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PerturbationSpec")
            .field("dim", &self.dim)
            .field("label", &self.label)
            .field("mask", &self.mask)
            .finish()
    }
}

impl PerturbationSpec {
    pub fn new(dim: usize, v: ScalarFn) -> Self {
        Self { dim, v, grad: None, mask: None, label: "v".into() }
    }

    pub fn from_fn<F>(dim: usize, v: F) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        Self::new(dim, Arc::new(v))
    }

    /// The zero perturbation, `ν = μ`.
    pub fn zero(dim: usize) -> Self {
        Self::from_fn(dim, |_| 0.0).with_gradient(Arc::new(move |z: &[f64]| vec![0.0; z.len()]))
    }

    pub fn with_gradient(mut self, grad: VectorFn) -> Self {
        self.grad = Some(grad);
        self
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    /// Declares that `v` depends only on the coordinates flagged in `mask`.
    /// The claim is spot-checked by moving the other coordinates at a few
    /// seeded probe points.
    pub fn depends_only_on(mut self, mask: Vec<bool>) -> Result<Self> {
        check_dim(self.dim, mask.len())?;
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        for _ in 0..8 {
            let z: Vec<f64> = (0..self.dim).map(|_| rng.random_range(-3.0..3.0)).collect();
            let base = (self.v)(&z);
            let mut y = z.clone();
            for (i, m) in mask.iter().enumerate() {
                if !m {
                    y[i] = rng.random_range(-3.0..3.0);
                }
            }
            let moved = (self.v)(&y);
            if (moved - base).abs() > 1e-10 * (1.0 + base.abs()) {
                return Err(Error::usage(format!(
                    "perturbation `{}` varies along coordinates outside its mask",
                    self.label
                )));
            }
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    pub fn value(&self, z: &[f64]) -> f64 {
        (self.v)(z)
    }

    /// Closed-form gradient if supplied, fourth-order differences otherwise.
    pub fn gradient(&self, z: &[f64]) -> Vec<f64> {
        match &self.grad {
            Some(g) => g(z),
            None => {
                let f = |x: &[f64]| (self.v)(x);
                (0..z.len())
                    .map(|i| crate::fd::d1(&f, z, i, crate::fd::scaled_step(1e-3, z[i])))
                    .collect()
            }
        }
    }

    /// Tabulates `v` on a grid.
    pub fn on_grid(&self, domain: &GridDomain) -> Result<GridField> {
        check_dim(self.dim, domain.dims())?;
        GridField::from_fn(domain, |z| (self.v)(z))
    }
}

/// Normalized `μ ∝ e^{−H}` and `ν ∝ e^{−H+v}` on the grid.
pub fn measure_from_perturbation<H>(
    domain: &GridDomain,
    h: H,
    v: &PerturbationSpec,
) -> Result<(GridField, GridField)>
where
    H: Fn(&[f64]) -> f64,
{
    check_dim(v.dim(), domain.dims())?;
    let n = domain.len();
    let mut log_mu = Vec::with_capacity(n);
    let mut log_nu = Vec::with_capacity(n);
    for i in 0..n {
        let z = domain.point(i);
        let hz = h(&z);
        let lm = -hz;
        let ln = -hz + v.value(&z);
        if !lm.is_finite() || !ln.is_finite() {
            return Err(Error::NonFinite { context: "log density".into(), coord: i });
        }
        log_mu.push(lm);
        log_nu.push(ln);
    }
    let mu = normalized_density(domain, &log_mu)?;
    let nu = normalized_density(domain, &log_nu)?;
    for field in [&mu, &nu] {
        let mass = shell_mass(field);
        if mass > SHELL_MASS_TOL {
            return Err(Error::DomainTooSmall { mass, suggested: domain.suggested_enlargement() });
        }
    }
    Ok((mu, nu))
}

fn normalized_density(domain: &GridDomain, log_density: &[f64]) -> Result<GridField> {
    let top = log_density.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let values: Vec<f64> = log_density.iter().map(|l| (l - top).exp()).collect();
    let mut field = GridField::new(domain.clone(), values)?;
    let z = field.integral();
    field.values.iter_mut().for_each(|v| *v /= z);
    Ok(field)
}

/// Trapezoid mass of the outer boundary shell.
pub fn shell_mass(density: &GridField) -> f64 {
    let w = density.domain.trapezoid_weights();
    density
        .domain
        .shell_mask()
        .iter()
        .zip(w.iter().zip(&density.values))
        .filter(|(s, _)| **s)
        .map(|(_, (w, v))| w * v)
        .sum()
}

fn diffusion_closure(spec: &DynamicsSpec) -> impl Fn(&[f64]) -> Result<DMatrix<f64>> + '_ {
    move |z: &[f64]| spec.diffusion(z)
}

fn identity_closure(n: usize) -> impl Fn(&[f64]) -> Result<DMatrix<f64>> {
    move |_: &[f64]| Ok(DMatrix::identity(n, n))
}

/// `¼ ∫ ∇v·D∇v dν` for a tabulated `v`.
pub fn symmetric_rate<F>(nu: &GridField, v: &GridField, diffusion: F) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<DMatrix<f64>>,
{
    if nu.domain != v.domain {
        return Err(Error::usage("ν and v live on different grids"));
    }
    let op = WeightedOperator::new(nu, diffusion)?;
    Ok(0.25 * op.energy(&v.values))
}

/// `¼ ∫ |∇v|² dν`: the overdamped rate, and also the expanded overdamped
/// rates when `ν` lives on an augmented grid.
pub fn expanded_overdamped_rate(nu: &GridField, v: &GridField) -> Result<f64> {
    symmetric_rate(nu, v, identity_closure(nu.domain.dims()))
}

/// `L_A v` at every node by central differences of the tabulated `v`
/// (second-order one-sided at the box faces). Fails with a compatibility
/// error when `|∫ L_A v dν|` exceeds `tol`.
pub fn antisymmetric_rhs(spec: &DynamicsSpec, nu: &GridField, v: &GridField, tol: f64) -> Result<GridField> {
    let dom = &v.domain;
    check_dim(spec.n(), dom.dims())?;
    let mut out = vec![0.0; dom.len()];
    let mut b = vec![0.0; spec.n()];
    for (idx, o) in out.iter_mut().enumerate() {
        let z = dom.point(idx);
        spec.antisymmetric_drift_into(&z, &mut b)?;
        if b.iter().all(|x| *x == 0.0) {
            continue;
        }
        let mi = dom.multi_index(idx);
        let mut acc = 0.0;
        for k in 0..dom.dims() {
            if b[k] == 0.0 {
                continue;
            }
            acc += b[k] * grid_partial(v, idx, &mi, k);
        }
        *o = acc;
    }
    let rhs = GridField::new(dom.clone(), out)?;
    let integral: f64 = integrate_against(nu, &rhs.values);
    if integral.abs() > tol {
        return Err(Error::Compatibility { integral, tol });
    }
    Ok(rhs)
}

fn grid_partial(v: &GridField, idx: usize, mi: &[usize], k: usize) -> f64 {
    let dom = &v.domain;
    let s = dom.stride(k);
    let h = dom.spacing(k);
    let m = dom.points[k];
    let u = &v.values;
    if mi[k] == 0 {
        (-3.0 * u[idx] + 4.0 * u[idx + s] - u[idx + 2 * s]) / (2.0 * h)
    } else if mi[k] == m - 1 {
        (3.0 * u[idx] - 4.0 * u[idx - s] + u[idx - 2 * s]) / (2.0 * h)
    } else {
        (u[idx + s] - u[idx - s]) / (2.0 * h)
    }
}

fn integrate_against(nu: &GridField, values: &[f64]) -> f64 {
    nu.domain
        .trapezoid_weights()
        .iter()
        .zip(&nu.values)
        .zip(values)
        .map(|((w, n), x)| w * n * x)
        .sum()
}

/// `L_A v = b_A·∇v` at every node using the gradient of the perturbation
/// itself rather than grid differences.
pub fn antisymmetric_rhs_exact(spec: &DynamicsSpec, domain: &GridDomain, v: &PerturbationSpec) -> Result<GridField> {
    check_dim(spec.n(), domain.dims())?;
    check_dim(v.dim(), domain.dims())?;
    let mut b = vec![0.0; spec.n()];
    let mut out = vec![0.0; domain.len()];
    for (idx, o) in out.iter_mut().enumerate() {
        let z = domain.point(idx);
        spec.antisymmetric_drift_into(&z, &mut b)?;
        if b.iter().any(|x| *x != 0.0) {
            let g = v.gradient(&z);
            *o = b.iter().zip(&g).map(|(a, c)| a * c).sum();
        }
    }
    GridField::new(domain.clone(), out)
}

/// `ψ` with `−(1/ν)∇·(ν D ∇ψ) = rhs` and `∫ψ dν = 0`.
pub fn solve_poisson<F>(nu: &GridField, diffusion: F, rhs: &GridField, opts: &SolverOptions) -> Result<GridField>
where
    F: Fn(&[f64]) -> Result<DMatrix<f64>>,
{
    if nu.domain != rhs.domain {
        return Err(Error::usage("ν and the right-hand side live on different grids"));
    }
    WeightedOperator::new(nu, diffusion)?.solve(rhs, opts)
}

fn ser_rate<S: Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if x.is_infinite() && *x > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*x)
    }
}

/// Rate split into its symmetric and anti-symmetric parts.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateReport {
    pub variant: Variant,
    pub symmetric: f64,
    /// `+∞` when `L_A v` is not solvable along the fibers of a degenerate `D`.
    #[serde(serialize_with = "ser_rate")]
    pub antisymmetric: f64,
    #[serde(serialize_with = "ser_rate")]
    pub total: f64,
    pub antisymmetric_infinite: bool,
    /// Largest per-fiber `ν`-average of `L_A v`.
    pub compatibility_defect: f64,
}

/// Solver output used by the comparisons: the report plus the fields.
struct RateParts {
    report: RateReport,
    nu: GridField,
    v: GridField,
    op: WeightedOperator,
}

fn rate_parts(spec: &DynamicsSpec, domain: &GridDomain, v: &PerturbationSpec, opts: &SolverOptions) -> Result<RateParts> {
    check_dim(spec.n(), domain.dims())?;
    let (_, nu) = measure_from_perturbation(domain, |z| spec.hamiltonian(z), v)?;
    let vf = v.on_grid(domain)?;
    let op = WeightedOperator::new(&nu, diffusion_closure(spec))?;
    let symmetric = 0.25 * op.energy(&vf.values);
    let (antisymmetric, defect, infinite) = if matches!(spec.variant(), Variant::Mirror | Variant::Overdamped) {
        (0.0, 0.0, false)
    } else {
        let rhs = antisymmetric_rhs_exact(spec, domain, v)?;
        let defect = op.compatibility_defect(&rhs.values);
        match op.solve(&rhs, opts) {
            Ok(psi) => (0.25 * op.energy(&psi.values), defect, false),
            Err(Error::Compatibility { .. }) if op.fibers().1 > 1 => (f64::INFINITY, defect, true),
            Err(e) => return Err(e),
        }
    };
    let report = RateReport {
        variant: spec.variant(),
        symmetric,
        antisymmetric,
        total: symmetric + antisymmetric,
        antisymmetric_infinite: infinite,
        compatibility_defect: defect,
    };
    Ok(RateParts { report, nu, v: vf, op })
}

/// The variant's rate at `dν ∝ e^{v−H}` on the given grid. The grid axes are
/// the state coordinates of `spec`.
pub fn total_rate(spec: &DynamicsSpec, domain: &GridDomain, v: &PerturbationSpec, opts: &SolverOptions) -> Result<RateReport> {
    Ok(rate_parts(spec, domain, v, opts)?.report)
}

/// θ-marginal of a density on an augmented grid, as a 1 to 3 axis field
/// over the θ axes (the first `d` axes).
pub fn theta_marginal(nu: &GridField, d: usize) -> Result<GridField> {
    let dom = &nu.domain;
    if d == 0 || d > dom.dims() {
        return Err(Error::usage(format!("θ dimension {d} does not fit a {}-axis grid", dom.dims())));
    }
    let mdom = GridDomain::with_cap(dom.bounds[..d].to_vec(), dom.points[..d].to_vec(), usize::MAX)?;
    let mut values = vec![0.0; mdom.len()];
    let inner: usize = dom.points[d..].iter().product();
    for (idx, &x) in nu.values.iter().enumerate() {
        let mi = dom.multi_index(idx);
        let w: f64 = (d..dom.dims()).map(|k| dom.axis_weight(k, mi[k])).product();
        values[idx / inner] += w * x;
    }
    GridField::new(mdom, values)
}

/// `I_o` of the θ-marginal `ν_θ`, with `v_θ = log(ν_θ / μ_θ)`.
pub fn marginal_overdamped_rate(nu: &GridField, mu: &GridField, d: usize) -> Result<f64> {
    let nt = theta_marginal(nu, d)?;
    let mt = theta_marginal(mu, d)?;
    let mut vals = Vec::with_capacity(nt.values.len());
    for (i, (a, b)) in nt.values.iter().zip(&mt.values).enumerate() {
        if !(*a > 0.0 && *b > 0.0) {
            return Err(Error::NonFinite { context: "log marginal density ratio".into(), coord: i });
        }
        vals.push(a.ln() - b.ln());
    }
    let vt = GridField::new(nt.domain.clone(), vals)?;
    expanded_overdamped_rate(&nt, &vt)
}

/// `Σ_{k≤3} a_k sin(ω_k·z + φ_k)` with `a_k ~ U(−A, A)`, `ω_k ~ U(−1.5, 1.5)ⁿ`.
pub fn random_smooth_family(dim: usize, count: usize, amplitude: f64, seed: u64) -> Vec<PerturbationSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|k| {
            let terms: Vec<(f64, Vec<f64>, f64)> = (0..3)
                .map(|_| {
                    let a = rng.random_range(-amplitude..amplitude);
                    let w: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect();
                    let ph = rng.random_range(0.0..std::f64::consts::TAU);
                    (a, w, ph)
                })
                .collect();
            let terms = Arc::new(terms);
            let t2 = terms.clone();
            PerturbationSpec::from_fn(dim, move |z| {
                terms
                    .iter()
                    .map(|(a, w, ph)| a * (crate::potentials::dot(w, z) + ph).sin())
                    .sum()
            })
            .with_gradient(Arc::new(move |z: &[f64]| {
                let mut g = vec![0.0; z.len()];
                for (a, w, ph) in t2.iter() {
                    let c = a * (crate::potentials::dot(w, z) + ph).cos();
                    for (gi, wi) in g.iter_mut().zip(w) {
                        *gi += c * wi;
                    }
                }
                g
            }))
            .with_label(format!("smooth-{k}"))
        })
        .collect()
}

/// Perturbations `v(r) = Σ_{k≤3} a_k cos(ω_k r)` of the last block only. Even
/// in `r`, so the ν-mean of `r` vanishes and the fiberwise Poisson problems
/// are solvable.
pub fn random_ph_family(dim: usize, r_axis: usize, count: usize, amplitude: f64, seed: u64) -> Result<Vec<PerturbationSpec>> {
    if r_axis >= dim {
        return Err(Error::usage(format!("r axis {r_axis} outside a {dim}-dimensional state")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|k| {
            let terms: Vec<(f64, f64)> = (0..3)
                .map(|_| (rng.random_range(-amplitude..amplitude), rng.random_range(0.2..1.5)))
                .collect();
            let terms = Arc::new(terms);
            let t2 = terms.clone();
            let mut mask = vec![false; dim];
            mask[r_axis] = true;
            PerturbationSpec::from_fn(dim, move |z| terms.iter().map(|(a, w)| a * (w * z[r_axis]).cos()).sum())
                .with_gradient(Arc::new(move |z: &[f64]| {
                    let mut g = vec![0.0; z.len()];
                    g[r_axis] = t2.iter().map(|(a, w)| -a * w * (w * z[r_axis]).sin()).sum();
                    g
                }))
                .with_label(format!("ph-{k}"))
                .depends_only_on(mask)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ComparisonStatus {
    Pass,
    Fail,
    HypothesisNotMet,
}

impl ComparisonStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            ComparisonStatus::Pass => "pass",
            ComparisonStatus::Fail => "fail",
            ComparisonStatus::HypothesisNotMet => "hypothesis not met",
        }
    }
}

impl Serialize for ComparisonStatus {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    /// `I_o`, the overdamped rate.
    Io,
    /// `I_e2o`, overdamped lifted by one Ornstein–Uhlenbeck block.
    Ie2o,
    /// `I_e3o`, overdamped lifted by two blocks.
    Ie3o,
}

impl Baseline {
    pub fn for_spec(spec: &DynamicsSpec) -> Self {
        match spec.layout().blocks() {
            1 => Baseline::Io,
            2 => Baseline::Ie2o,
            _ => Baseline::Ie3o,
        }
    }
}

/// One row of a comparison.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonEntry {
    pub label: String,
    #[serde(serialize_with = "ser_rate")]
    pub rate_variant: f64,
    pub rate_baseline: f64,
    pub symmetric: f64,
    #[serde(serialize_with = "ser_rate")]
    pub antisymmetric: f64,
    #[serde(serialize_with = "ser_rate")]
    pub margin: f64,
    /// Smallest margin the hypothesis guarantees.
    pub required_margin: f64,
    /// HFHR only: `I_R − I_o(ν_θ)`.
    pub marginal_margin: Option<f64>,
    /// `None` when the hypothesis is not met.
    pub pass: Option<bool>,
    pub status: ComparisonStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub variant: Variant,
    pub baseline: Baseline,
    pub hypothesis: String,
    pub hypothesis_met: bool,
    pub eps_solver: f64,
    pub status: ComparisonStatus,
    pub entries: Vec<ComparisonEntry>,
}

impl ComparisonReport {
    pub fn all_pass(&self) -> bool {
        self.status == ComparisonStatus::Pass
    }

    /// One CSV row per perturbation.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Format(e.to_string());
        w.write_record([
            "label",
            "rate_variant",
            "rate_baseline",
            "symmetric",
            "antisymmetric",
            "margin",
            "required_margin",
            "marginal_margin",
            "pass",
            "status",
        ])
        .map_err(io)?;
        for e in &self.entries {
            w.write_record([
                e.label.clone(),
                fmt_num(e.rate_variant),
                fmt_num(e.rate_baseline),
                fmt_num(e.symmetric),
                fmt_num(e.antisymmetric),
                fmt_num(e.margin),
                fmt_num(e.required_margin),
                e.marginal_margin.map(fmt_num).unwrap_or_default(),
                e.pass.map(|p| p.to_string()).unwrap_or_default(),
                e.status.as_str().to_string(),
            ])
            .map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }
}

fn fmt_num(x: f64) -> String {
    if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x:e}")
    }
}

fn hypothesis(spec: &DynamicsSpec, domain: &GridDomain, family: &[PerturbationSpec]) -> Result<(String, bool)> {
    let layout = spec.layout();
    let r_only = |p: &PerturbationSpec| {
        let r = layout.r();
        match (p.mask(), r) {
            (Some(m), Some(r)) => m.iter().enumerate().all(|(i, &on)| !on || r.contains(&i)),
            _ => false,
        }
    };
    Ok(match spec.variant() {
        Variant::Overdamped | Variant::Nonreversible | Variant::Custom => ("none".into(), true),
        Variant::Hfhr => {
            let (a, b) = (spec.alpha_param(), spec.beta_param());
            ("min(alpha, beta) >= 1".into(), a.min(b) >= 1.0)
        }
        Variant::Underdamped => (
            "gamma >= 1 and v depends on r only".into(),
            spec.gamma_param() >= 1.0 && family.iter().all(r_only),
        ),
        Variant::Highorder => (
            "alpha >= 1 and v depends on r only".into(),
            spec.alpha_param() >= 1.0 && family.iter().all(r_only),
        ),
        Variant::Mirror => {
            let mut ok = true;
            for idx in 0..domain.len() {
                let dm = spec.diffusion(&domain.point(idx))?;
                let min_eig = dm.symmetric_eigenvalues().min();
                if min_eig < 1.0 - 1e-12 {
                    ok = false;
                    break;
                }
            }
            ("metric dominates the identity on the grid".into(), ok)
        }
    })
}

/// Evaluates the variant rate and its overdamped baseline for every member
/// of `family` and checks the comparison inequality.
pub fn compare_rates(
    spec: &DynamicsSpec,
    domain: &GridDomain,
    family: &[PerturbationSpec],
    opts: &SolverOptions,
) -> Result<ComparisonReport> {
    let (hyp, met) = hypothesis(spec, domain, family)?;
    let baseline = Baseline::for_spec(spec);
    let layout = spec.layout();
    let entries: Vec<ComparisonEntry> = family
        .par_iter()
        .map(|v| -> Result<ComparisonEntry> {
            let parts = rate_parts(spec, domain, v, opts)?;
            let base = expanded_overdamped_rate(&parts.nu, &parts.v)?;
            let rv = parts.report.total;
            let margin = rv - base;
            let required = match (spec.variant(), layout.r()) {
                (Variant::Underdamped, Some(r)) => {
                    let er: f64 = r.map(|k| parts.op.axis_energy(&parts.v.values, k)).sum();
                    // Energies along r carry the factor γ from D.
                    (spec.gamma_param() - 1.0) / 4.0 * er / spec.gamma_param() - EPS_SOLVER
                }
                _ => -EPS_SOLVER,
            };
            let marginal_margin = if spec.variant() == Variant::Hfhr {
                let (mu, _) = measure_from_perturbation(domain, |z| spec.hamiltonian(z), &PerturbationSpec::zero(v.dim()))?;
                Some(rv - marginal_overdamped_rate(&parts.nu, &mu, layout.d)?)
            } else {
                None
            };
            let ok = margin >= required && marginal_margin.is_none_or(|m| m >= -EPS_SOLVER);
            let (pass, status) = if !met {
                (None, ComparisonStatus::HypothesisNotMet)
            } else if ok {
                (Some(true), ComparisonStatus::Pass)
            } else {
                (Some(false), ComparisonStatus::Fail)
            };
            Ok(ComparisonEntry {
                label: v.label().to_string(),
                rate_variant: rv,
                rate_baseline: base,
                symmetric: parts.report.symmetric,
                antisymmetric: parts.report.antisymmetric,
                margin,
                required_margin: required,
                marginal_margin,
                pass,
                status,
            })
        })
        .collect::<Result<_>>()?;
    let status = if !met {
        ComparisonStatus::HypothesisNotMet
    } else if entries.iter().all(|e| e.pass == Some(true)) {
        ComparisonStatus::Pass
    } else {
        ComparisonStatus::Fail
    };
    Ok(ComparisonReport {
        variant: spec.variant(),
        baseline,
        hypothesis: hyp,
        hypothesis_met: met,
        eps_solver: EPS_SOLVER,
        status,
        entries,
    })
}
