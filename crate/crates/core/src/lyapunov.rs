//! Lyapunov functions `W = exp(φ^δ)` for the built-in dynamics and grid
//! checks of the drift bound `−LW/W ≥ A|θ|^q + B|p|² + C|r|² − Dc`.
//!
//! The ratio is evaluated through `L e^g = e^g (f·∇g + D:∇²g + ∇g·D∇g)` with
//! `g = φ^δ`, either from closed-form derivatives of `φ` or from finite
//! differences of `g` itself.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{AugLayout, DynamicsSpec};
use crate::error::{check_dim, Error, Result};
use crate::fd;
use crate::potentials::PotentialModel;
use crate::ratelab::GridDomain;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LyapunovKind {
    Hfhr,
    Highorder,
    GibbsPower,
}

impl std::str::FromStr for LyapunovKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hfhr" => Ok(Self::Hfhr),
            "highorder" => Ok(Self::Highorder),
            "gibbs-power" => Ok(Self::GibbsPower),
            other => Err(Error::usage(format!("unknown Lyapunov kind `{other}`"))),
        }
    }
}

/// Construction parameters. Fields not used by a kind are ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct LyapunovParams {
    /// Gibbs-power exponent, `φ = ηU`.
    pub eta: f64,
    pub a: f64,
    /// HFHR cross weight; chosen by the recipe when `None`.
    pub b: Option<f64>,
    pub h: f64,
    pub delta: f64,
    /// Growth order of `U` for the high-order construction, in `(1, 2]`.
    pub k: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// `θ·∇U ≥ c1|θ|² − big_c1`.
    pub c1: f64,
    pub big_c1: f64,
    /// Curvature bound of `U` (`ΔU ≤ m_u d`, `∇U·θ ≥ m_u|θ|^k` far out).
    pub m_u: f64,
    /// Growth bound `|∇U| ≤ big_m_u |θ|^{k−1}`.
    pub big_m_u: f64,
    /// When false the high-order smallness constraints are not enforced,
    /// which allows building negative controls.
    pub enforce_recipe: bool,
    /// Grid on which `inf φ₀` is taken for the high-order shift.
    pub shift_domain: Option<GridDomain>,
}

impl Default for LyapunovParams {
    fn default() -> Self {
        Self {
            eta: 0.5,
            a: 0.25,
            b: None,
            h: 0.25,
            delta: 1.0,
            k: 2.0,
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            c1: 1.0,
            big_c1: 0.0,
            m_u: 1.0,
            big_m_u: 1.0,
            enforce_recipe: true,
            shift_domain: None,
        }
    }
}

/// Quintic smoothstep cutoff in `s = |θ|`: 0 below 1, 1 above 2.
fn chi(s: f64) -> (f64, f64, f64) {
    if s <= 1.0 {
        (0.0, 0.0, 0.0)
    } else if s >= 2.0 {
        (1.0, 0.0, 0.0)
    } else {
        let t = s - 1.0;
        let t2 = t * t;
        (
            t2 * t * (10.0 - 15.0 * t + 6.0 * t2),
            30.0 * t2 * (1.0 - t) * (1.0 - t),
            60.0 * t * (1.0 - t) * (1.0 - 2.0 * t),
        )
    }
}

/// `L(θ) = κ θ g(|θ|)` with `g(s) = s^{β−1} χ(s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CutoffField {
    pub kappa: f64,
    pub beta: f64,
    pub c_j: f64,
}

impl CutoffField {
    /// `κ = γ / (2 C_J)` with `C_J` the largest Jacobian norm of
    /// `θ g(|θ|)`, sampled on `s ∈ [0, 3]` (constant beyond 2).
    pub fn new(beta: f64, gamma: f64) -> Self {
        let mut c_j: f64 = 0.0;
        for i in 0..=30_000 {
            let s = 3.0 * i as f64 / 30_000.0;
            let (g, g1, _) = Self::profile(beta, s);
            c_j = c_j.max(g.abs()).max((g + s * g1).abs());
        }
        Self { kappa: gamma / (2.0 * c_j), beta, c_j }
    }

    fn profile(beta: f64, s: f64) -> (f64, f64, f64) {
        let (c, c1, c2) = chi(s);
        if c == 0.0 && c1 == 0.0 {
            return (0.0, 0.0, 0.0);
        }
        let b = beta;
        let p0 = s.powf(b - 1.0);
        let p1 = (b - 1.0) * s.powf(b - 2.0);
        let p2 = (b - 1.0) * (b - 2.0) * s.powf(b - 3.0);
        (p0 * c, p1 * c + p0 * c1, p2 * c + 2.0 * p1 * c1 + p0 * c2)
    }

    pub fn value(&self, theta: &[f64]) -> Vec<f64> {
        let s = theta.iter().map(|x| x * x).sum::<f64>().sqrt();
        let (g, _, _) = Self::profile(self.beta, s);
        theta.iter().map(|x| self.kappa * x * g).collect()
    }

    /// `∂L_i/∂θ_j`.
    pub fn jacobian(&self, theta: &[f64]) -> DMatrix<f64> {
        let d = theta.len();
        let s = theta.iter().map(|x| x * x).sum::<f64>().sqrt();
        let (g, g1, _) = Self::profile(self.beta, s);
        if g == 0.0 && g1 == 0.0 {
            return DMatrix::zeros(d, d);
        }
        DMatrix::from_fn(d, d, |i, j| {
            let diag = if i == j { g } else { 0.0 };
            self.kappa * (diag + g1 * theta[i] * theta[j] / s)
        })
    }

    /// `∂²L_i/∂θ_j∂θ_k`, flattened as `[i][j][k]`.
    pub fn second(&self, theta: &[f64]) -> Vec<f64> {
        let d = theta.len();
        let s = theta.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut t = vec![0.0; d * d * d];
        let (_, g1, g2) = Self::profile(self.beta, s);
        if g1 == 0.0 && g2 == 0.0 {
            return t;
        }
        let a = g1 / s;
        let c = g2 / (s * s) - g1 / (s * s * s);
        let delta = |x: usize, y: usize| if x == y { 1.0 } else { 0.0 };
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    t[(i * d + j) * d + k] = self.kappa
                        * (a * (delta(i, j) * theta[k] + delta(i, k) * theta[j] + delta(j, k) * theta[i])
                            + c * theta[i] * theta[j] * theta[k]);
                }
            }
        }
        t
    }
}

#[derive(Clone, Debug)]
enum Phi {
    GibbsPower { eta: f64 },
    Hfhr { a: f64, b: f64 },
    Highorder { h: f64, a: f64, cutoff: CutoffField },
}

/// `W = exp(φ^δ)` together with everything needed to differentiate it.
#[derive(Clone, Debug)]
pub struct LyapunovSpec {
    kind: LyapunovKind,
    layout: AugLayout,
    potential: PotentialModel,
    phi: Phi,
    delta: f64,
    shift: f64,
    theta_exponent: f64,
    nominal_offset: f64,
}

/// Positive root of `βb² + (1 + K)b − αa(1 − a) = 0` halved and capped, the
/// cross weight used by the HFHR construction.
pub fn hfhr_recipe_b(p: &LyapunovParams) -> f64 {
    let k = (1.0 - 2.0 * p.a).powi(2) * (p.alpha + p.big_m_u * p.beta).powi(2) / (2.0 * p.c1);
    let q = p.alpha * p.a * (1.0 - p.a);
    let b_star = (-(1.0 + k) + ((1.0 + k).powi(2) + 4.0 * p.beta * q).sqrt()) / (2.0 * p.beta);
    0.5 * b_star.min(p.c1 / (2.0 * p.alpha))
}

/// Nominal `(A, B, C)` of the HFHR bound: `A|θ|² + B|r|² − C`.
pub fn hfhr_nominal_constants(p: &LyapunovParams, b: f64, d: usize) -> (f64, f64, f64) {
    let k = (1.0 - 2.0 * p.a).powi(2) * (p.alpha + p.big_m_u * p.beta).powi(2) / (2.0 * p.c1);
    let d = d as f64;
    (
        b * (p.c1 / 2.0 - p.alpha * b),
        p.alpha * p.a * (1.0 - p.a) - b * (1.0 + b * p.beta + k),
        p.a * p.beta * p.m_u * d + p.a * p.alpha * d + b * p.big_c1,
    )
}

fn positive(name: &str, x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::usage(format!("Lyapunov parameter `{name}` must be positive, got {x}")))
    }
}

fn constraint(ok: bool, text: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::usage(format!("Lyapunov recipe constraint violated: {text}")))
    }
}

/// Checks the smallness constraints of the high-order construction.
pub fn check_highorder_recipe(p: &LyapunovParams, cutoff: &CutoffField) -> Result<()> {
    let (a, h, k, dl) = (p.a, p.h, p.k, p.delta);
    let (al, ga, kap) = (p.alpha, p.gamma, cutoff.kappa);
    let sa = a.sqrt();
    let p1 = k / (k - 1.0);
    constraint(a * kap / p1 < p.m_u * h, "a·kappa/p1 < m_U·h")?;
    constraint(a * kap / k + a / 2.0 < h / 2.0, "a·kappa/k + a/2 < h/2")?;
    constraint(-al * h + 2.0 * dl * al * h * h < 0.0, "−alpha·h + 2·delta·alpha·h² < 0")?;
    constraint(
        -ga / 2.0 + 2.0 * dl * al * a + al * sa / 2.0 < 0.0,
        "−gamma/2 + 2·delta·alpha·a + alpha·sqrt(a)/2 < 0",
    )?;
    constraint(
        -kap * p.m_u + (ga * kap + p.big_m_u) * sa / 2.0 < 0.0,
        "−kappa·m_U + (gamma·kappa + M_U)·sqrt(a)/2 < 0",
    )?;
    constraint(
        -al * h + 2.0 * dl * al * h * h + (ga * kap + p.big_m_u + al) * sa / 2.0 + ga * a < 0.0,
        "−alpha·h + 2·delta·alpha·h² + (gamma·kappa + M_U + alpha)·sqrt(a)/2 + gamma·a < 0",
    )
}

/// Builds `W` for the given construction.
pub fn build_lyapunov(kind: LyapunovKind, potential: PotentialModel, params: &LyapunovParams) -> Result<LyapunovSpec> {
    let d = potential.dim();
    match kind {
        LyapunovKind::GibbsPower => {
            positive("eta", params.eta)?;
            Ok(LyapunovSpec {
                kind,
                layout: AugLayout::theta_only(d),
                potential,
                phi: Phi::GibbsPower { eta: params.eta },
                delta: 1.0,
                shift: 0.0,
                theta_exponent: 2.0,
                nominal_offset: params.eta * params.m_u * d as f64,
            })
        }
        LyapunovKind::Hfhr => {
            positive("alpha", params.alpha)?;
            positive("beta", params.beta)?;
            positive("c1", params.c1)?;
            if !(params.a > 0.0 && params.a < 1.0) {
                return Err(Error::usage(format!("Lyapunov recipe constraint violated: 0 < a < 1, got a = {}", params.a)));
            }
            let cap = params.c1 / (2.0 * params.alpha);
            let b = match params.b {
                Some(b) => {
                    if !(b > 0.0 && b < cap) {
                        return Err(Error::usage(format!(
                            "Lyapunov recipe constraint violated: 0 < b < c1/(2 alpha) = {cap}, got b = {b}"
                        )));
                    }
                    b
                }
                None => hfhr_recipe_b(params),
            };
            let (_, _, offset) = hfhr_nominal_constants(params, b, d);
            Ok(LyapunovSpec {
                kind,
                layout: AugLayout { d, has_p: false, has_r: true },
                potential,
                phi: Phi::Hfhr { a: params.a, b },
                delta: 1.0,
                shift: 0.0,
                theta_exponent: 2.0,
                nominal_offset: offset,
            })
        }
        LyapunovKind::Highorder => {
            positive("a", params.a)?;
            positive("h", params.h)?;
            positive("alpha", params.alpha)?;
            positive("gamma", params.gamma)?;
            let k = params.k;
            if !(k > 1.0 && k <= 2.0) {
                return Err(Error::usage(format!("Lyapunov recipe constraint violated: k in (1, 2], got {k}")));
            }
            let lo = (2.0 - k) / k;
            if !(params.delta > lo && params.delta <= 1.0) {
                return Err(Error::usage(format!(
                    "Lyapunov recipe constraint violated: delta in ({lo}, 1], got {}",
                    params.delta
                )));
            }
            let cutoff = CutoffField::new(k - 1.0, params.gamma);
            if params.enforce_recipe {
                check_highorder_recipe(params, &cutoff)?;
            }
            let layout = AugLayout { d, has_p: true, has_r: true };
            let mut spec = LyapunovSpec {
                kind,
                layout,
                potential,
                phi: Phi::Highorder { h: params.h, a: params.a, cutoff },
                delta: params.delta,
                shift: 0.0,
                theta_exponent: 2.0 * (k - 1.0),
                nominal_offset: params.alpha * params.h * d as f64,
            };
            let grid = match &params.shift_domain {
                Some(g) => g.clone(),
                None => GridDomain::cube(layout.n(), -5.0, 5.0, 61)?,
            };
            check_dim(layout.n(), grid.dims())?;
            let min = (0..grid.len())
                .into_par_iter()
                .map(|i| spec.phi0(&grid.point(i)))
                .reduce(|| f64::INFINITY, f64::min);
            spec.shift = 1.0 - min;
            Ok(spec)
        }
    }
}

impl LyapunovSpec {
    pub fn kind(&self) -> LyapunovKind {
        self.kind
    }

    pub fn layout(&self) -> AugLayout {
        self.layout
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Constant added to `φ₀` (zero except for the high-order kind).
    pub fn shift(&self) -> f64 {
        self.shift
    }

    /// Exponent `q` of the `|θ|^q` term in the drift bound.
    pub fn theta_exponent(&self) -> f64 {
        self.theta_exponent
    }

    /// Offset suggested by the construction; caps the searched `Dc`.
    pub fn nominal_offset(&self) -> f64 {
        self.nominal_offset
    }

    /// HFHR cross weight, when applicable.
    pub fn cross_weight(&self) -> Option<f64> {
        match self.phi {
            Phi::Hfhr { b, .. } => Some(b),
            _ => None,
        }
    }

    pub fn cutoff(&self) -> Option<&CutoffField> {
        match &self.phi {
            Phi::Highorder { cutoff, .. } => Some(cutoff),
            _ => None,
        }
    }

    fn phi0(&self, z: &[f64]) -> f64 {
        let d = self.layout.d;
        let u = &self.potential;
        match &self.phi {
            Phi::GibbsPower { eta } => eta * u.value(z),
            Phi::Hfhr { a, b } => {
                let (th, r) = z.split_at(d);
                a * (u.value(th) + 0.5 * sq(r)) + b * dotp(th, r)
            }
            Phi::Highorder { h, a, cutoff } => {
                let th = &z[..d];
                let p = &z[d..2 * d];
                let r = &z[2 * d..];
                h * (u.value(th) + 0.5 * sq(p) + 0.5 * sq(r)) + a * dotp(&cutoff.value(th), p) + a * dotp(p, r)
            }
        }
    }

    pub fn phi(&self, z: &[f64]) -> f64 {
        self.phi0(z) + self.shift
    }

    pub fn phi_gradient(&self, z: &[f64]) -> Vec<f64> {
        let d = self.layout.d;
        let u = &self.potential;
        match &self.phi {
            Phi::GibbsPower { eta } => u.gradient(z).iter().map(|g| eta * g).collect(),
            Phi::Hfhr { a, b } => {
                let (th, r) = z.split_at(d);
                let gu = u.gradient(th);
                let mut out = vec![0.0; 2 * d];
                for i in 0..d {
                    out[i] = a * gu[i] + b * r[i];
                    out[d + i] = a * r[i] + b * th[i];
                }
                out
            }
            Phi::Highorder { h, a, cutoff } => {
                let th = &z[..d];
                let p = &z[d..2 * d];
                let r = &z[2 * d..];
                let gu = u.gradient(th);
                let jl = cutoff.jacobian(th);
                let l = cutoff.value(th);
                let mut out = vec![0.0; 3 * d];
                for i in 0..d {
                    let jtp: f64 = (0..d).map(|m| jl[(m, i)] * p[m]).sum();
                    out[i] = h * gu[i] + a * jtp;
                    out[d + i] = h * p[i] + a * l[i] + a * r[i];
                    out[2 * d + i] = h * r[i] + a * p[i];
                }
                out
            }
        }
    }

    fn u_hessian(&self, th: &[f64]) -> DMatrix<f64> {
        match self.potential.hessian(th) {
            Some(h) => h,
            None => {
                let rows = fd::jacobian(|x| self.potential.gradient(x), th, 1e-5);
                let d = th.len();
                let m = DMatrix::from_fn(d, d, |i, j| rows[i][j]);
                (&m + m.transpose()) * 0.5
            }
        }
    }

    pub fn phi_hessian(&self, z: &[f64]) -> DMatrix<f64> {
        let d = self.layout.d;
        match &self.phi {
            Phi::GibbsPower { eta } => self.u_hessian(z) * *eta,
            Phi::Hfhr { a, b } => {
                let hu = self.u_hessian(&z[..d]);
                DMatrix::from_fn(2 * d, 2 * d, |i, j| match (i < d, j < d) {
                    (true, true) => a * hu[(i, j)],
                    (false, false) => if i == j { *a } else { 0.0 },
                    _ => if i % d == j % d { *b } else { 0.0 },
                })
            }
            Phi::Highorder { h, a, cutoff } => {
                let th = &z[..d];
                let p = &z[d..2 * d];
                let hu = self.u_hessian(th);
                let jl = cutoff.jacobian(th);
                let t = cutoff.second(th);
                let mut m = DMatrix::zeros(3 * d, 3 * d);
                for i in 0..d {
                    for j in 0..d {
                        let tp: f64 = (0..d).map(|q| t[(q * d + i) * d + j] * p[q]).sum();
                        m[(i, j)] = h * hu[(i, j)] + a * tp;
                        // ∂²φ/∂θ_j∂p_i = a ∂L_i/∂θ_j
                        m[(d + i, j)] = a * jl[(i, j)];
                        m[(j, d + i)] = a * jl[(i, j)];
                    }
                    m[(d + i, d + i)] = *h;
                    m[(2 * d + i, 2 * d + i)] = *h;
                    m[(d + i, 2 * d + i)] = *a;
                    m[(2 * d + i, d + i)] = *a;
                }
                m
            }
        }
    }

    /// `g = φ^δ`.
    pub fn g(&self, z: &[f64]) -> f64 {
        let f = self.phi(z);
        if self.delta == 1.0 {
            f
        } else {
            f.powf(self.delta)
        }
    }

    pub fn w(&self, z: &[f64]) -> f64 {
        self.g(z).exp()
    }
}

fn sq(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn dotp(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_layout(spec: &DynamicsSpec, lyap: &LyapunovSpec) -> Result<()> {
    if spec.layout() != lyap.layout {
        return Err(Error::usage(format!(
            "Lyapunov function built for a {}-coordinate state, dynamics has {}",
            lyap.layout.n(),
            spec.n()
        )));
    }
    Ok(())
}

fn ratio_from(f: &[f64], dm: &DMatrix<f64>, grad: &DVector<f64>, hess: &DMatrix<f64>) -> f64 {
    let fg: f64 = f.iter().zip(grad.iter()).map(|(a, b)| a * b).sum();
    let trace = dm.component_mul(hess).sum();
    let quad = grad.dot(&(dm * grad));
    -(fg + trace + quad)
}

/// `−(LW)/W` at `z` from closed-form derivatives of `φ`.
pub fn neg_generator_ratio(spec: &DynamicsSpec, lyap: &LyapunovSpec, z: &[f64]) -> Result<f64> {
    check_layout(spec, lyap)?;
    check_dim(spec.n(), z.len())?;
    let f = crate::dynamics::drift(spec, z)?;
    let dm = spec.diffusion(z)?;
    let phi = lyap.phi(z);
    let gphi = DVector::from_vec(lyap.phi_gradient(z));
    let hphi = lyap.phi_hessian(z);
    let dl = lyap.delta;
    let (grad, hess) = if dl == 1.0 {
        (gphi, hphi)
    } else {
        if !(phi > 0.0) {
            return Err(Error::NonFinite { context: "φ^δ with non-positive φ".into(), coord: 0 });
        }
        let c1 = dl * phi.powf(dl - 1.0);
        let c2 = dl * (dl - 1.0) * phi.powf(dl - 2.0);
        (&gphi * c1, hphi * c1 + (&gphi * gphi.transpose()) * c2)
    };
    let out = ratio_from(&f, &dm, &grad, &hess);
    if !out.is_finite() {
        return Err(Error::NonFinite { context: "generator ratio".into(), coord: 0 });
    }
    Ok(out)
}

/// Same ratio with `∇g` and `∇²g` from fourth-order differences of
/// `g = φ^δ` with step `step (1 + |z_i|)`.
pub fn neg_generator_ratio_fd(spec: &DynamicsSpec, lyap: &LyapunovSpec, z: &[f64], step: f64) -> Result<f64> {
    check_layout(spec, lyap)?;
    check_dim(spec.n(), z.len())?;
    let n = z.len();
    let f = crate::dynamics::drift(spec, z)?;
    let dm = spec.diffusion(z)?;
    let g = |x: &[f64]| lyap.g(x);
    let hs: Vec<f64> = z.iter().map(|x| fd::scaled_step(step, *x)).collect();
    let grad = DVector::from_iterator(n, (0..n).map(|i| fd::d1(&g, z, i, hs[i])));
    let mut hess = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            if dm[(i, j)] == 0.0 && dm[(j, i)] == 0.0 {
                continue;
            }
            let v = fd::d2(&g, z, i, j, hs[i], hs[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    let out = ratio_from(&f, &dm, &grad, &hess);
    if !out.is_finite() {
        return Err(Error::NonFinite { context: "generator ratio (finite differences)".into(), coord: 0 });
    }
    Ok(out)
}

/// Coefficients of `A|θ|^q + B|p|² + C|r|² − Dc`. For two-block states `B`
/// multiplies the second block and `C` is absent; for θ-only states only
/// `A` is used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "B")]
    pub b: Option<f64>,
    #[serde(rename = "C")]
    pub c: Option<f64>,
    #[serde(rename = "Dc")]
    pub dc: f64,
}

impl BoundConstants {
    fn coefficients(&self) -> Vec<f64> {
        let mut out = vec![self.a];
        out.extend(self.b);
        out.extend(self.c);
        out
    }

    fn from_coefficients(c: &[f64], dc: f64) -> Self {
        Self { a: c[0], b: c.get(1).copied(), c: c.get(2).copied(), dc }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridMeta {
    pub bounds: Vec<(f64, f64)>,
    pub points: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundReport {
    pub kind: LyapunovKind,
    pub constants: BoundConstants,
    pub min_residual: f64,
    pub argmin: Vec<f64>,
    pub pass: bool,
    /// True when the constants were searched rather than supplied.
    pub searched: bool,
    /// Largest common coefficient before the coordinate search; `≤ 0` means
    /// no bound with positive coefficients exists under the offset cap.
    pub max_uniform_coefficient: Option<f64>,
    pub grid_meta: GridMeta,
    pub note: String,
}

const NOTE: &str = "sufficient-condition check on a bounded box, not a proof on the whole space";

/// Per-node basis values `(|θ|^q, |block 2|², |block 3|²)`.
fn basis(lyap: &LyapunovSpec, z: &[f64]) -> Vec<f64> {
    let d = lyap.layout.d;
    let q = lyap.theta_exponent;
    let th = sq(&z[..d]).sqrt();
    let mut out = vec![if q == 2.0 { th * th } else { th.powf(q) }];
    for b in 1..lyap.layout.blocks() {
        out.push(sq(&z[b * d..(b + 1) * d]));
    }
    out
}

/// Evaluates `−LW/W − (Σ c_i basis_i − Dc)` at every node, or searches for
/// constants when `constants` is `None`. The searched offset is
/// `offset_cap`, defaulting to four times the construction's nominal offset.
pub fn verify_quadratic_bound(
    spec: &DynamicsSpec,
    lyap: &LyapunovSpec,
    grid: &GridDomain,
    constants: Option<&BoundConstants>,
    offset_cap: Option<f64>,
) -> Result<BoundReport> {
    check_layout(spec, lyap)?;
    check_dim(spec.n(), grid.dims())?;
    let nb = lyap.layout.blocks();
    let nodes: Vec<(f64, Vec<f64>)> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let z = grid.point(i);
            let r = neg_generator_ratio(spec, lyap, &z)?;
            Ok((r, basis(lyap, &z)))
        })
        .collect::<Result<_>>()?;
    let meta = GridMeta { bounds: grid.bounds.clone(), points: grid.points.clone() };
    let residuals = |c: &[f64], dc: f64| -> (f64, usize) {
        nodes
            .iter()
            .enumerate()
            .map(|(i, (r, b))| (r + dc - c.iter().zip(b).map(|(x, y)| x * y).sum::<f64>(), i))
            .fold((f64::INFINITY, 0), |acc, x| if x.0 < acc.0 { x } else { acc })
    };
    match constants {
        Some(k) => {
            let c = k.coefficients();
            if c.len() != nb {
                return Err(Error::usage(format!("bound needs {nb} coefficients for this state, got {}", c.len())));
            }
            if c.iter().chain([&k.dc]).any(|x| !(*x >= 0.0) || !x.is_finite()) {
                return Err(Error::usage("bound constants must be finite and nonnegative"));
            }
            let (min, arg) = residuals(&c, k.dc);
            Ok(BoundReport {
                kind: lyap.kind,
                constants: k.clone(),
                min_residual: min,
                argmin: grid.point(arg),
                pass: min >= 0.0,
                searched: false,
                max_uniform_coefficient: None,
                grid_meta: meta,
                note: NOTE.into(),
            })
        }
        None => {
            let dc = offset_cap.unwrap_or(4.0 * lyap.nominal_offset);
            let mut t = f64::INFINITY;
            let mut origin_ok = true;
            for (r, b) in &nodes {
                let s: f64 = b.iter().sum();
                if s > 0.0 {
                    t = t.min((r + dc) / s);
                } else if r + dc < 0.0 {
                    origin_ok = false;
                }
            }
            if !(t > 0.0) || !origin_ok {
                let zero = vec![0.0; nb];
                let (min, arg) = residuals(&zero, dc);
                return Ok(BoundReport {
                    kind: lyap.kind,
                    constants: BoundConstants::from_coefficients(&zero, dc),
                    min_residual: min,
                    argmin: grid.point(arg),
                    pass: false,
                    searched: true,
                    max_uniform_coefficient: Some(t),
                    grid_meta: meta,
                    note: NOTE.into(),
                });
            }
            let mut c = vec![t; nb];
            for _ in 0..20 {
                for i in 0..nb {
                    let mut inc = f64::INFINITY;
                    for (r, b) in &nodes {
                        if b[i] > 0.0 {
                            let slack = r + dc - c.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
                            inc = inc.min(slack.max(0.0) / b[i]);
                        }
                    }
                    if inc.is_finite() {
                        c[i] += inc;
                    }
                }
            }
            c.iter_mut().for_each(|x| *x *= 1.0 - 1e-9);
            let (min, arg) = residuals(&c, dc);
            Ok(BoundReport {
                kind: lyap.kind,
                constants: BoundConstants::from_coefficients(&c, dc),
                min_residual: min,
                argmin: grid.point(arg),
                pass: min >= 0.0 && c.iter().all(|x| *x > 0.0),
                searched: true,
                max_uniform_coefficient: Some(t),
                grid_meta: meta,
                note: NOTE.into(),
            })
        }
    }
}
