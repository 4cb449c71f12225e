//! Generalized Langevin dynamics `dz = f(z) dt + sqrt(2 D(z)) dW` with
//! `f = −[D + Q]∇H + Γ` and `Γ_i = Σ_j ∂_j (D_ij + Q_ij)`.
//!
//! [`build_variant_spec`] assembles the six built-in samplers. Each built-in
//! also carries its explicit closed-form drift; the generic assembly is kept
//! alongside so the two can be cross-checked.

use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::fd;
use crate::potentials::{MatrixFn, MirrorMetric, PotentialModel, VectorFn};

pub const ANTISYMMETRY_TOL: f64 = 1e-12;
pub const PSD_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Overdamped,
    Underdamped,
    Nonreversible,
    Mirror,
    Highorder,
    Hfhr,
    Custom,
}

impl Variant {
    pub const BUILTIN: [Variant; 6] = [
        Variant::Overdamped,
        Variant::Underdamped,
        Variant::Nonreversible,
        Variant::Mirror,
        Variant::Highorder,
        Variant::Hfhr,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Overdamped => "overdamped",
            Variant::Underdamped => "underdamped",
            Variant::Nonreversible => "nonreversible",
            Variant::Mirror => "mirror",
            Variant::Highorder => "highorder",
            Variant::Hfhr => "hfhr",
            Variant::Custom => "custom",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "overdamped" => Variant::Overdamped,
            "underdamped" => Variant::Underdamped,
            "nonreversible" => Variant::Nonreversible,
            "mirror" => Variant::Mirror,
            "highorder" => Variant::Highorder,
            "hfhr" => Variant::Hfhr,
            "custom" => Variant::Custom,
            other => return Err(Error::usage(format!("unknown variant `{other}`"))),
        })
    }
}

/// Which coordinates of the state belong to θ, p and r. θ always comes first,
/// then p (high-order only), then r.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugLayout {
    pub d: usize,
    pub has_p: bool,
    pub has_r: bool,
}

impl AugLayout {
    pub fn theta_only(d: usize) -> Self {
        Self { d, has_p: false, has_r: false }
    }

    pub fn n(&self) -> usize {
        self.d * (1 + self.has_p as usize + self.has_r as usize)
    }

    pub fn theta(&self) -> Range<usize> {
        0..self.d
    }

    pub fn p(&self) -> Option<Range<usize>> {
        self.has_p.then(|| self.d..2 * self.d)
    }

    pub fn r(&self) -> Option<Range<usize>> {
        let start = self.d * (1 + self.has_p as usize);
        self.has_r.then(|| start..start + self.d)
    }

    /// Number of coordinate blocks (1, 2 or 3).
    pub fn blocks(&self) -> usize {
        1 + self.has_p as usize + self.has_r as usize
    }
}

/// `J = A − Aᵀ`, anti-symmetric by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct AntisymmetricMatrixSeed {
    pub base: DMatrix<f64>,
    pub derived: DMatrix<f64>,
}

impl AntisymmetricMatrixSeed {
    pub fn from_base(base: DMatrix<f64>) -> Result<Self> {
        if !base.is_square() {
            return Err(Error::usage("J seed matrix must be square"));
        }
        let derived = &base - base.transpose();
        Ok(Self { base, derived })
    }

    /// Base matrix with independent standard normal entries.
    pub fn random<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        let base = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        Self::from_base(base).expect("square by construction")
    }
}

/// State-dependent matrix field used for `D` and `Q`.
#[derive(Clone)]
pub enum MatrixField {
    Constant(DMatrix<f64>),
    /// The mirror metric acting on the whole (θ-only) state.
    Mirror(MirrorMetric),
    /// `Q_ij = e^{U}` above the diagonal, `−e^{U}` below.
    MirrorCurl(PotentialModel),
    Custom {
        eval: MatrixFn,
        divergence: Option<VectorFn>,
    },
}

impl MatrixField {
    pub fn eval(&self, z: &[f64]) -> Result<DMatrix<f64>> {
        match self {
            MatrixField::Constant(m) => Ok(m.clone()),
            MatrixField::Mirror(m) => m.metric(z),
            MatrixField::MirrorCurl(u) => {
                let n = z.len();
                let e = u.value(z).exp();
                Ok(DMatrix::from_fn(n, n, |i, j| {
                    if i < j {
                        e
                    } else if i > j {
                        -e
                    } else {
                        0.0
                    }
                }))
            }
            MatrixField::Custom { eval, .. } => Ok(eval(z)),
        }
    }

    /// Row divergence `Σ_j ∂_j M_ij` when a closed form is known.
    pub fn analytic_divergence(&self, z: &[f64]) -> Option<Result<Vec<f64>>> {
        match self {
            MatrixField::Constant(m) => Some(Ok(vec![0.0; m.nrows()])),
            MatrixField::Mirror(m) => Some(m.metric_divergence(z)),
            MatrixField::MirrorCurl(u) => {
                let n = z.len();
                let e = u.value(z).exp();
                let g = u.gradient(z);
                Some(Ok((0..n)
                    .map(|i| {
                        let above: f64 = g[i + 1..].iter().sum();
                        let below: f64 = g[..i].iter().sum();
                        e * (above - below)
                    })
                    .collect()))
            }
            MatrixField::Custom { divergence, .. } => divergence.as_ref().map(|f| Ok(f(z))),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, MatrixField::Constant(_))
    }

    /// Row divergence by central differences with step `fd_step (1 + |z_j|)`.
    pub fn fd_divergence(&self, z: &[f64], fd_step: f64) -> Result<Vec<f64>> {
        let n = z.len();
        let mut out = vec![0.0; n];
        let mut y = z.to_vec();
        for j in 0..n {
            let h = fd::scaled_step(fd_step, z[j]);
            y[j] = z[j] + h;
            let mp = self.eval(&y)?;
            y[j] = z[j] - h;
            let mm = self.eval(&y)?;
            y[j] = z[j];
            for (i, o) in out.iter_mut().enumerate() {
                *o += (mp[(i, j)] - mm[(i, j)]) / (2.0 * h);
            }
        }
        Ok(out)
    }
}

/// Named scalar parameters of the built-in variants.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VariantParams {
    pub gamma: Option<f64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub j: Option<DMatrix<f64>>,
}

impl VariantParams {
    fn need(v: Option<f64>, name: &str, variant: Variant) -> Result<f64> {
        match v {
            Some(x) if x > 0.0 && x.is_finite() => Ok(x),
            Some(x) => Err(Error::usage(format!("{variant}: parameter `{name}` must be positive, got {x}"))),
            None => Err(Error::usage(format!("{variant}: missing parameter `{name}`"))),
        }
    }
}

pub type DriftFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// The `(n, D, Q, H, Γ)` bundle plus variant tag and parameters.
#[derive(Clone)]
pub struct DynamicsSpec {
    variant: Variant,
    layout: AugLayout,
    potential: PotentialModel,
    diffusion: MatrixField,
    curl: MatrixField,
    gamma: f64,
    alpha: f64,
    beta: f64,
    j: Option<DMatrix<f64>>,
    mirror: Option<MirrorMetric>,
    drift_override: Option<DriftFn>,
}

impl fmt::Debug for DynamicsSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DynamicsSpec")
            .field("variant", &self.variant)
            .field("layout", &self.layout)
            .field("potential", &self.potential.name())
            .field("gamma", &self.gamma)
            .field("alpha", &self.alpha)
            .field("beta", &self.beta)
            .finish()
    }
}

fn block_diag(layout: &AugLayout, entries: &[f64]) -> DMatrix<f64> {
    let n = layout.n();
    let d = layout.d;
    DMatrix::from_fn(n, n, |i, j| if i == j { entries[i / d] } else { 0.0 })
}

/// Block matrix from a small `blocks x blocks` coefficient table, each entry
/// multiplying the `d x d` identity.
fn block_identity(d: usize, table: &[&[f64]]) -> DMatrix<f64> {
    let b = table.len();
    DMatrix::from_fn(b * d, b * d, |i, j| if i % d == j % d { table[i / d][j / d] } else { 0.0 })
}

/// Assembles a built-in variant.
pub fn build_variant_spec(
    kind: Variant,
    potential: PotentialModel,
    params: &VariantParams,
    mirror: Option<MirrorMetric>,
) -> Result<DynamicsSpec> {
    let d = potential.dim();
    let mut spec = DynamicsSpec {
        variant: kind,
        layout: AugLayout::theta_only(d),
        potential: potential.clone(),
        diffusion: MatrixField::Constant(DMatrix::identity(d, d)),
        curl: MatrixField::Constant(DMatrix::zeros(d, d)),
        gamma: f64::NAN,
        alpha: f64::NAN,
        beta: f64::NAN,
        j: None,
        mirror: None,
        drift_override: None,
    };
    match kind {
        Variant::Overdamped => {}
        Variant::Underdamped => {
            let g = VariantParams::need(params.gamma, "gamma", kind)?;
            spec.gamma = g;
            spec.layout = AugLayout { d, has_p: false, has_r: true };
            spec.diffusion = MatrixField::Constant(block_diag(&spec.layout, &[0.0, g]));
            spec.curl = MatrixField::Constant(block_identity(d, &[&[0.0, -1.0], &[1.0, 0.0]]));
        }
        Variant::Nonreversible => {
            let j = params
                .j
                .clone()
                .ok_or_else(|| Error::usage("nonreversible: missing parameter `J`"))?;
            if j.nrows() != d || j.ncols() != d {
                return Err(Error::usage(format!(
                    "nonreversible: J is {}x{}, potential dimension is {d}",
                    j.nrows(),
                    j.ncols()
                )));
            }
            if (&j + j.transpose()).amax() > ANTISYMMETRY_TOL {
                return Err(Error::usage("nonreversible: J is not anti-symmetric"));
            }
            spec.curl = MatrixField::Constant(j.clone());
            spec.j = Some(j);
        }
        Variant::Mirror => {
            let m = mirror.ok_or_else(|| Error::usage("mirror: missing mirror metric"))?;
            check_dim(d, m.dim())?;
            spec.diffusion = MatrixField::Mirror(m.clone());
            spec.curl = MatrixField::MirrorCurl(potential);
            spec.mirror = Some(m);
        }
        Variant::Highorder => {
            let g = VariantParams::need(params.gamma, "gamma", kind)?;
            let a = VariantParams::need(params.alpha, "alpha", kind)?;
            spec.gamma = g;
            spec.alpha = a;
            spec.layout = AugLayout { d, has_p: true, has_r: true };
            spec.diffusion = MatrixField::Constant(block_diag(&spec.layout, &[0.0, 0.0, a]));
            spec.curl = MatrixField::Constant(block_identity(
                d,
                &[&[0.0, -1.0, 0.0], &[1.0, 0.0, -g], &[0.0, g, 0.0]],
            ));
        }
        Variant::Hfhr => {
            let a = VariantParams::need(params.alpha, "alpha", kind)?;
            let b = VariantParams::need(params.beta, "beta", kind)?;
            spec.alpha = a;
            spec.beta = b;
            spec.layout = AugLayout { d, has_p: false, has_r: true };
            spec.diffusion = MatrixField::Constant(block_diag(&spec.layout, &[b, a]));
            spec.curl = MatrixField::Constant(block_identity(d, &[&[0.0, -1.0], &[1.0, 0.0]]));
        }
        Variant::Custom => {
            return Err(Error::usage("custom specs are built with DynamicsSpec::custom"));
        }
    }
    Ok(spec)
}

impl DynamicsSpec {
    /// A user-assembled spec. `Q` is spot-checked for anti-symmetry and `D`
    /// for symmetry and positive semidefiniteness at a few fixed points.
    pub fn custom(
        layout: AugLayout,
        potential: PotentialModel,
        diffusion: MatrixField,
        curl: MatrixField,
    ) -> Result<Self> {
        check_dim(layout.d, potential.dim())?;
        let spec = DynamicsSpec {
            variant: Variant::Custom,
            layout,
            potential,
            diffusion,
            curl,
            gamma: f64::NAN,
            alpha: f64::NAN,
            beta: f64::NAN,
            j: None,
            mirror: None,
            drift_override: None,
        };
        let n = layout.n();
        let probes = [
            vec![0.0; n],
            (0..n).map(|i| 0.3 + 0.7 * i as f64).collect::<Vec<_>>(),
            (0..n).map(|i| if i % 2 == 0 { -1.1 } else { 0.6 }).collect(),
        ];
        for z in &probes {
            spec.check_invariants(z)?;
        }
        Ok(spec)
    }

    /// Replaces the runtime drift, e.g. to build a deliberately broken
    /// negative control. `D`, `Q` and `H` are left untouched.
    pub fn with_drift_override(mut self, f: DriftFn) -> Self {
        self.drift_override = Some(f);
        self
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn layout(&self) -> AugLayout {
        self.layout
    }

    pub fn n(&self) -> usize {
        self.layout.n()
    }

    pub fn potential(&self) -> &PotentialModel {
        &self.potential
    }

    pub fn mirror(&self) -> Option<&MirrorMetric> {
        self.mirror.as_ref()
    }

    pub fn j_matrix(&self) -> Option<&DMatrix<f64>> {
        self.j.as_ref()
    }

    pub fn gamma_param(&self) -> f64 {
        self.gamma
    }

    pub fn alpha_param(&self) -> f64 {
        self.alpha
    }

    pub fn beta_param(&self) -> f64 {
        self.beta
    }

    pub fn diffusion_field(&self) -> &MatrixField {
        &self.diffusion
    }

    pub fn curl_field(&self) -> &MatrixField {
        &self.curl
    }

    /// `H(z) = U(θ) + ½|p|² + ½|r|²` (auxiliary blocks only when present).
    pub fn hamiltonian(&self, z: &[f64]) -> f64 {
        let d = self.layout.d;
        let aux: f64 = z[d..].iter().map(|v| v * v).sum();
        self.potential.value(&z[..d]) + 0.5 * aux
    }

    pub fn hamiltonian_grad(&self, z: &[f64]) -> Vec<f64> {
        let d = self.layout.d;
        let mut g = z.to_vec();
        self.potential.gradient_into(&z[..d], &mut g[..d]);
        g
    }

    pub fn diffusion(&self, z: &[f64]) -> Result<DMatrix<f64>> {
        self.diffusion.eval(z)
    }

    pub fn curl(&self, z: &[f64]) -> Result<DMatrix<f64>> {
        self.curl.eval(z)
    }

    /// Checks `Q + Qᵀ = 0` and `D` symmetric PSD at `z`.
    pub fn check_invariants(&self, z: &[f64]) -> Result<()> {
        check_dim(self.n(), z.len())?;
        let q = self.curl(z)?;
        let scale = q.amax().max(1.0);
        if (&q + q.transpose()).amax() > ANTISYMMETRY_TOL * scale {
            return Err(Error::usage(format!("Q is not anti-symmetric at {z:?}")));
        }
        let dm = self.diffusion(z)?;
        let scale = dm.amax().max(1.0);
        if (&dm - dm.transpose()).amax() > ANTISYMMETRY_TOL * scale {
            return Err(Error::usage(format!("D is not symmetric at {z:?}")));
        }
        let min_eig = dm.symmetric_eigenvalues().min();
        if min_eig < -PSD_TOL * scale {
            return Err(Error::usage(format!("D has eigenvalue {min_eig} < 0 at {z:?}")));
        }
        Ok(())
    }

    /// Runtime drift written into `out`.
    pub fn drift_into(&self, z: &[f64], out: &mut [f64]) -> Result<()> {
        if let Some(f) = &self.drift_override {
            out.copy_from_slice(&f(z));
            return finite_or_err(out, "drift");
        }
        let d = self.layout.d;
        match self.variant {
            Variant::Overdamped => {
                self.potential.gradient_into(z, out);
                out.iter_mut().for_each(|v| *v = -*v);
            }
            Variant::Nonreversible => {
                let mut g = vec![0.0; d];
                self.potential.gradient_into(z, &mut g);
                let j = self.j.as_ref().expect("J present for nonreversible");
                for i in 0..d {
                    let jg: f64 = (0..d).map(|k| j[(i, k)] * g[k]).sum();
                    out[i] = -g[i] - jg;
                }
            }
            Variant::Mirror => {
                let m = self.mirror.as_ref().expect("mirror metric present");
                let metric = m.metric_diag(z)?;
                let div = m.metric_divergence(z)?;
                self.potential.gradient_into(z, out);
                for i in 0..d {
                    out[i] = div[i] - metric[i] * out[i];
                }
            }
            Variant::Underdamped => {
                let (th, r) = z.split_at(d);
                let (o_th, o_r) = out.split_at_mut(d);
                self.potential.gradient_into(th, o_r);
                for i in 0..d {
                    o_th[i] = r[i];
                    o_r[i] = -self.gamma * r[i] - o_r[i];
                }
            }
            Variant::Highorder => {
                let th = &z[..d];
                let p = &z[d..2 * d];
                let r = &z[2 * d..];
                let (o_th, rest) = out.split_at_mut(d);
                let (o_p, o_r) = rest.split_at_mut(d);
                self.potential.gradient_into(th, o_p);
                for i in 0..d {
                    o_th[i] = p[i];
                    o_p[i] = -o_p[i] + self.gamma * r[i];
                    o_r[i] = -self.gamma * p[i] - self.alpha * r[i];
                }
            }
            Variant::Hfhr => {
                let (th, r) = z.split_at(d);
                let mut g = vec![0.0; d];
                self.potential.gradient_into(th, &mut g);
                for i in 0..d {
                    out[i] = r[i] - self.beta * g[i];
                    out[d + i] = -self.alpha * r[i] - g[i];
                }
            }
            Variant::Custom => {
                let f = self.generic_drift(z, 1e-5)?;
                out.copy_from_slice(&f);
            }
        }
        finite_or_err(out, "drift")
    }

    pub fn antisymmetric_drift_into(&self, z: &[f64], out: &mut [f64]) -> Result<()> {
        let d = self.layout.d;
        out.iter_mut().for_each(|v| *v = 0.0);
        match self.variant {
            Variant::Overdamped | Variant::Mirror => {}
            Variant::Nonreversible => {
                let g = self.potential.gradient(z);
                let j = self.j.as_ref().expect("J present for nonreversible");
                for i in 0..d {
                    out[i] = -(0..d).map(|k| j[(i, k)] * g[k]).sum::<f64>();
                }
            }
            Variant::Underdamped | Variant::Hfhr => {
                let g = self.potential.gradient(&z[..d]);
                for i in 0..d {
                    out[i] = z[d + i];
                    out[d + i] = -g[i];
                }
            }
            Variant::Highorder => {
                let g = self.potential.gradient(&z[..d]);
                for i in 0..d {
                    out[i] = z[d + i];
                    out[d + i] = -g[i] + self.gamma * z[2 * d + i];
                    out[2 * d + i] = -self.gamma * z[d + i];
                }
            }
            Variant::Custom => {
                let q = self.curl(z)?;
                let gh = DVector::from_vec(self.hamiltonian_grad(z));
                let div = match self.curl.analytic_divergence(z) {
                    Some(v) => v?,
                    None => self.curl.fd_divergence(z, 1e-5)?,
                };
                let qg = q * gh;
                for i in 0..z.len() {
                    out[i] = -qg[i] + div[i];
                }
            }
        }
        finite_or_err(out, "antisymmetric drift")
    }

    /// Anti-symmetric part `b_A = −Q∇H + ∇·Q` of the drift. It generates
    /// the anti-symmetric part of the infinitesimal generator.
    pub fn antisymmetric_drift(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.n(), z.len())?;
        let mut out = vec![0.0; z.len()];
        self.antisymmetric_drift_into(z, &mut out)?;
        Ok(out)
    }

    /// `−[D + Q]∇H + Γ` from the matrix fields, ignoring any closed form.
    pub fn generic_drift(&self, z: &[f64], fd_step: f64) -> Result<Vec<f64>> {
        check_dim(self.n(), z.len())?;
        let m = self.diffusion(z)? + self.curl(z)?;
        let gh = DVector::from_vec(self.hamiltonian_grad(z));
        let gamma = gamma_correction(self, z, fd_step)?;
        let mg = m * gh;
        let out: Vec<f64> = (0..z.len()).map(|i| -mg[i] + gamma[i]).collect();
        finite_or_err(&out, "generic drift")?;
        Ok(out)
    }
}

fn finite_or_err(v: &[f64], context: &str) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(coord) => Err(Error::NonFinite { context: context.into(), coord }),
        None => Ok(()),
    }
}

/// `Γ(z)`: closed-form divergences when both fields supply them, central
/// differences with step `fd_step (1 + |z_j|)` otherwise.
pub fn gamma_correction(spec: &DynamicsSpec, z: &[f64], fd_step: f64) -> Result<Vec<f64>> {
    check_dim(spec.n(), z.len())?;
    let dd = match spec.diffusion.analytic_divergence(z) {
        Some(v) => v?,
        None => spec.diffusion.fd_divergence(z, fd_step)?,
    };
    let dq = match spec.curl.analytic_divergence(z) {
        Some(v) => v?,
        None => spec.curl.fd_divergence(z, fd_step)?,
    };
    Ok(dd.iter().zip(&dq).map(|(a, b)| a + b).collect())
}

/// `Γ(z)` by central differences only.
pub fn gamma_correction_fd(spec: &DynamicsSpec, z: &[f64], fd_step: f64) -> Result<Vec<f64>> {
    check_dim(spec.n(), z.len())?;
    let dd = spec.diffusion.fd_divergence(z, fd_step)?;
    let dq = spec.curl.fd_divergence(z, fd_step)?;
    Ok(dd.iter().zip(&dq).map(|(a, b)| a + b).collect())
}

pub fn drift(spec: &DynamicsSpec, z: &[f64]) -> Result<Vec<f64>> {
    check_dim(spec.n(), z.len())?;
    let mut out = vec![0.0; z.len()];
    spec.drift_into(z, &mut out)?;
    Ok(out)
}

/// Shifted density `e^{−H(y) + H(z₀)}`; `z₀` is the query point.
fn shifted_density<'a>(spec: &'a DynamicsSpec, z0: &[f64]) -> impl Fn(&[f64]) -> f64 + 'a {
    let h0 = spec.hamiltonian(z0);
    move |y: &[f64]| (h0 - spec.hamiltonian(y)).exp()
}

/// Stationary Fokker–Planck residual
/// `Σ_i ∂_i[f_i ρ] − Σ_ij ∂²_ij[D_ij ρ]` with `ρ = e^{−H + H(z)}`.
///
/// Derivatives use fourth-order central stencils with per-coordinate step
/// `fd_step (1 + |z_i|)`.
pub fn stationarity_residual(spec: &DynamicsSpec, z: &[f64], fd_step: f64) -> Result<f64> {
    spec.check_invariants(z)?;
    let n = z.len();
    let rho = shifted_density(spec, z);
    let h: Vec<f64> = z.iter().map(|&x| fd::scaled_step(fd_step, x)).collect();
    let mut transport = 0.0;
    for i in 0..n {
        let g = |y: &[f64]| -> f64 {
            let mut f = vec![0.0; n];
            match spec.drift_into(y, &mut f) {
                Ok(()) => f[i] * rho(y),
                Err(_) => f64::NAN,
            }
        };
        transport += fd::d1(&g, z, i, h[i]);
    }
    let mut diffusion = 0.0;
    let d0 = spec.diffusion(z)?;
    let constant = spec.diffusion.is_constant();
    for i in 0..n {
        for j in 0..n {
            if constant && d0[(i, j)] == 0.0 {
                continue;
            }
            let g = |y: &[f64]| -> f64 {
                match spec.diffusion(y) {
                    Ok(m) => m[(i, j)] * rho(y),
                    Err(_) => f64::NAN,
                }
            };
            diffusion += fd::d2(&g, z, i, j, h[i], h[j]);
        }
    }
    let r = transport - diffusion;
    if !r.is_finite() {
        return Err(Error::NonFinite { context: "stationarity residual".into(), coord: 0 });
    }
    Ok(r)
}

/// `Σ_ij ∂²_ij (Q_ij e^{−H})` in shifted form.
pub fn curl_condition_residual(spec: &DynamicsSpec, z: &[f64], fd_step: f64) -> Result<f64> {
    spec.check_invariants(z)?;
    let n = z.len();
    let rho = shifted_density(spec, z);
    let h: Vec<f64> = z.iter().map(|&x| fd::scaled_step(fd_step, x)).collect();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let g = |y: &[f64]| -> f64 {
                match spec.curl(y) {
                    Ok(m) => m[(i, j)] * rho(y),
                    Err(_) => f64::NAN,
                }
            };
            acc += fd::d2(&g, z, i, j, h[i], h[j]);
        }
    }
    if !acc.is_finite() {
        return Err(Error::NonFinite { context: "curl condition residual".into(), coord: 0 });
    }
    Ok(acc)
}

/// Underdamped spec whose runtime drift omits the friction term `−γr`,
/// a negative control for the stationarity check.
pub fn friction_dropped(spec: &DynamicsSpec) -> Result<DynamicsSpec> {
    if spec.variant != Variant::Underdamped {
        return Err(Error::usage("the friction-dropped control needs an underdamped spec"));
    }
    let d = spec.layout.d;
    let u = spec.potential.clone();
    Ok(spec.clone().with_drift_override(Arc::new(move |z: &[f64]| {
        let g = u.gradient(&z[..d]);
        let mut out = z[d..].to_vec();
        out.extend(g.iter().map(|x| -x));
        out
    })))
}
