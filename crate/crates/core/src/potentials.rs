//! Target potentials `U` and mirror-map metrics.
//!
//! A [`PotentialModel`] evaluates `U`, `∇U` and (when available) `∇²U`.
//! Built-ins are the standard Gaussian, a separable double well and the
//! Bayesian logistic regression posterior; arbitrary closures are accepted
//! through [`PotentialModel::custom`].

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{check_dim, Error, Result};

pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
pub type MatrixFn = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;

/// Logistic-regression data folded into the potential: rows of `features`
/// are multiplied by the signed label `2y - 1`.
#[derive(Clone, Debug)]
pub struct BlrTerms {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows x cols`, already multiplied by the signed label.
    pub signed_features: Vec<f64>,
    pub lambda: f64,
}

#[derive(Clone)]
enum Kind {
    Gaussian,
    DoubleWell,
    Blr(Arc<BlrTerms>),
    Custom {
        eval: ScalarFn,
        grad: VectorFn,
        hessian: Option<MatrixFn>,
    },
}

#[derive(Clone)]
pub struct PotentialModel {
    dim: usize,
    name: String,
    kind: Kind,
}

impl fmt::Debug for PotentialModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PotentialModel")
            .field("dim", &self.dim)
            .field("name", &self.name)
            .finish()
    }
}

/// `log(1 + exp(-t))` without overflow.
pub fn softplus_neg(t: f64) -> f64 {
    (-t.abs()).exp().ln_1p() + (-t).max(0.0)
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

impl PotentialModel {
    /// `U(θ) = |θ|² / 2`.
    pub fn gaussian(dim: usize) -> Self {
        assert!(dim > 0, "dimension must be positive");
        Self {
            dim,
            name: "gaussian".into(),
            kind: Kind::Gaussian,
        }
    }

    /// `U(θ) = Σ (θ_i⁴/4 − θ_i²/2)`.
    pub fn double_well(dim: usize) -> Self {
        assert!(dim > 0, "dimension must be positive");
        Self {
            dim,
            name: "double-well".into(),
            kind: Kind::DoubleWell,
        }
    }

    pub fn custom(
        name: impl Into<String>,
        dim: usize,
        eval: ScalarFn,
        grad: VectorFn,
        hessian: Option<MatrixFn>,
    ) -> Self {
        Self {
            dim,
            name: name.into(),
            kind: Kind::Custom { eval, grad, hessian },
        }
    }

    pub(crate) fn from_blr(terms: BlrTerms) -> Self {
        Self {
            dim: terms.cols,
            name: "blr".into(),
            kind: Kind::Blr(Arc::new(terms)),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn has_hessian(&self) -> bool {
        !matches!(self.kind, Kind::Custom { hessian: None, .. })
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match &self.kind {
            Kind::Gaussian => 0.5 * x.iter().map(|v| v * v).sum::<f64>(),
            Kind::DoubleWell => x.iter().map(|v| 0.25 * v.powi(4) - 0.5 * v * v).sum(),
            Kind::Blr(t) => {
                let lik: f64 = t
                    .signed_features
                    .chunks_exact(t.cols)
                    .map(|row| softplus_neg(dot(row, x)))
                    .sum();
                lik + dot(x, x) / (2.0 * t.lambda)
            }
            Kind::Custom { eval, .. } => eval(x),
        }
    }

    /// Writes `∇U(x)` into `out` (length `dim`).
    pub fn gradient_into(&self, x: &[f64], out: &mut [f64]) {
        match &self.kind {
            Kind::Gaussian => out.copy_from_slice(x),
            Kind::DoubleWell => {
                for (o, v) in out.iter_mut().zip(x) {
                    *o = v * v * v - v;
                }
            }
            Kind::Blr(t) => {
                for (o, v) in out.iter_mut().zip(x) {
                    *o = v / t.lambda;
                }
                for row in t.signed_features.chunks_exact(t.cols) {
                    let w = sigmoid(-dot(row, x));
                    for (o, a) in out.iter_mut().zip(row) {
                        *o -= w * a;
                    }
                }
            }
            Kind::Custom { grad, .. } => out.copy_from_slice(&grad(x)),
        }
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim];
        self.gradient_into(x, &mut g);
        g
    }

    pub fn hessian(&self, x: &[f64]) -> Option<DMatrix<f64>> {
        let d = self.dim;
        match &self.kind {
            Kind::Gaussian => Some(DMatrix::identity(d, d)),
            Kind::DoubleWell => Some(DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
                d,
                x.iter().map(|v| 3.0 * v * v - 1.0),
            ))),
            Kind::Blr(t) => {
                let mut h = DMatrix::identity(d, d) / t.lambda;
                for row in t.signed_features.chunks_exact(t.cols) {
                    let m = dot(row, x);
                    let w = sigmoid(m) * sigmoid(-m);
                    for i in 0..d {
                        for j in 0..d {
                            h[(i, j)] += w * row[i] * row[j];
                        }
                    }
                }
                Some(h)
            }
            Kind::Custom { hessian, .. } => hessian.as_ref().map(|h| h(x)),
        }
    }

    /// `ΔU(x)`; closed form for built-ins, trace of the Hessian otherwise.
    pub fn laplacian(&self, x: &[f64]) -> Option<f64> {
        match &self.kind {
            Kind::Gaussian => Some(self.dim as f64),
            Kind::DoubleWell => Some(x.iter().map(|v| 3.0 * v * v - 1.0).sum()),
            _ => self.hessian(x).map(|h| h.trace()),
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Returns `(U(point), ∇U(point))`.
pub fn evaluate(model: &PotentialModel, point: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_dim(model.dim(), point.len())?;
    Ok((model.value(point), model.gradient(point)))
}

/// Separable convex function `φ(x) = Σ g(x_i)` whose second and third
/// derivatives define the mirror geometry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MirrorProfile {
    /// `g(x) = x⁴/4`.
    Quartic,
    /// `g(x) = c (x atan x − ½ log(1 + x²))`, so `g'' = c / (1 + x²)`.
    Arctan { c: f64 },
}

impl MirrorProfile {
    fn second(&self, x: f64) -> f64 {
        match *self {
            MirrorProfile::Quartic => 3.0 * x * x,
            MirrorProfile::Arctan { c } => c / (1.0 + x * x),
        }
    }

    fn third(&self, x: f64) -> f64 {
        match *self {
            MirrorProfile::Quartic => 6.0 * x,
            MirrorProfile::Arctan { c } => -2.0 * c * x / (1.0 + x * x).powi(2),
        }
    }
}

/// Diffusion metric `[∇²φ + eps I]⁻¹` of a separable mirror map.
#[derive(Clone, Debug, PartialEq)]
pub struct MirrorMetric {
    dim: usize,
    eps: f64,
    profile: MirrorProfile,
}

pub fn make_quartic_mirror(dim: usize, eps: f64) -> Result<MirrorMetric> {
    MirrorMetric::new(dim, eps, MirrorProfile::Quartic)
}

/// Mirror map with metric `(1 + x²)/c`, which dominates the identity when
/// `c ≤ 1`.
pub fn make_arctan_mirror(dim: usize, c: f64) -> Result<MirrorMetric> {
    if !(c > 0.0) {
        return Err(Error::usage(format!("arctan mirror needs c > 0, got {c}")));
    }
    MirrorMetric::new(dim, 0.0, MirrorProfile::Arctan { c })
}

impl MirrorMetric {
    pub fn new(dim: usize, eps: f64, profile: MirrorProfile) -> Result<Self> {
        if dim == 0 {
            return Err(Error::usage("mirror dimension must be positive"));
        }
        if !(eps >= 0.0) || !eps.is_finite() {
            return Err(Error::usage(format!("mirror eps must be >= 0, got {eps}")));
        }
        Ok(Self { dim, eps, profile })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn regularization_eps(&self) -> f64 {
        self.eps
    }

    pub fn profile(&self) -> MirrorProfile {
        self.profile
    }

    fn denom(&self, i: usize, x: f64) -> Result<f64> {
        let h = self.profile.second(x) + self.eps;
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::Singularity { coord: i, value: x });
        }
        Ok(h)
    }

    /// Diagonal of the metric at `theta`.
    pub fn metric_diag(&self, theta: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, theta.len())?;
        theta
            .iter()
            .enumerate()
            .map(|(i, &x)| self.denom(i, x).map(|h| 1.0 / h))
            .collect()
    }

    pub fn metric(&self, theta: &[f64]) -> Result<DMatrix<f64>> {
        let d = self.metric_diag(theta)?;
        Ok(DMatrix::from_diagonal(&nalgebra::DVector::from_vec(d)))
    }

    /// `Σ_j ∂_j D_ij`, closed form.
    pub fn metric_divergence(&self, theta: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, theta.len())?;
        theta
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let h = self.denom(i, x)?;
                Ok(-self.profile.third(x) / (h * h))
            })
            .collect()
    }

    /// Curvature correction `−[∇²φ]⁻¹ Tr(∇³φ [∇²φ]⁻¹)` assembled from the
    /// dense third-derivative tensor. Independent of [`Self::metric_divergence`].
    pub fn curvature_correction(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let n = self.dim;
        check_dim(n, theta.len())?;
        let mut hess = DMatrix::zeros(n, n);
        for i in 0..n {
            hess[(i, i)] = self.profile.second(theta[i]) + self.eps;
        }
        let inv = hess
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Singularity {
                coord: theta.iter().position(|x| self.profile.second(*x) + self.eps == 0.0).unwrap_or(0),
                value: 0.0,
            })?;
        let mut tensor = vec![0.0; n * n * n];
        for i in 0..n {
            tensor[i * n * n + i * n + i] = self.profile.third(theta[i]);
        }
        let mut tr = vec![0.0; n];
        for (k, t) in tr.iter_mut().enumerate() {
            for i in 0..n {
                for j in 0..n {
                    *t += tensor[k * n * n + i * n + j] * inv[(j, i)];
                }
            }
        }
        Ok((0..n)
            .map(|i| -(0..n).map(|k| inv[(i, k)] * tr[k]).sum::<f64>())
            .collect())
    }
}
