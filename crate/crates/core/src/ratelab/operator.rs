//! The ν-weighted Dirichlet form on a grid and the weighted Poisson solver.
//!
//! For an edge between nodes `a` and `b = a + e_k` the form carries weight
//! `c = sqrt(ν_a ν_b) D_kk(mid) T_k / h_k`, where `T_k` is the trapezoid weight
//! of the transverse axes. Then `Σ c (v_b − v_a)² ≈ ∫ ∇v·D∇v dν`, the stiffness
//! matrix `K` is symmetric, and the discrete weighted operator is `M⁻¹K` with
//! `M = diag(trapezoid weight × ν)`. Edges never cross the box, which is the
//! homogeneous Neumann closure.

use nalgebra::{DMatrix, DVector};

use super::grid::{GridDomain, GridField};
use crate::error::{Error, Result};

/// Relative size below which an off-diagonal entry of `D` is ignored.
const OFF_DIAGONAL_TOL: f64 = 1e-14;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverOptions {
    /// Dense Cholesky is used as a fallback when CG fails and the system has
    /// at most this many unknowns.
    pub dense_max: usize,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    /// Tolerance on the ν-average of the right-hand side (per fiber).
    pub compat_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { dense_max: 5000, cg_tol: 1e-11, cg_max_iter: 200_000, compat_tol: 1e-6 }
    }
}

/// Edge weights of the Dirichlet form plus the nodal mass.
#[derive(Clone, Debug)]
pub struct WeightedOperator {
    pub domain: GridDomain,
    /// `edges[k][a]` couples node `a` with `a + stride_k`; zero where `a` sits
    /// on the upper face of axis `k`.
    pub edges: Vec<Vec<f64>>,
    pub mass: Vec<f64>,
}

impl WeightedOperator {
    /// `diffusion` returns `D` at a point; only its diagonal is used and a
    /// non-diagonal `D` is rejected.
    pub fn new<F>(nu: &GridField, diffusion: F) -> Result<Self>
    where
        F: Fn(&[f64]) -> Result<DMatrix<f64>>,
    {
        let dom = nu.domain.clone();
        let n = dom.len();
        let w = dom.trapezoid_weights();
        let mass: Vec<f64> = w.iter().zip(&nu.values).map(|(a, b)| a * b).collect();
        let sq: Vec<f64> = nu.values.iter().map(|v| v.max(0.0).sqrt()).collect();
        let mut edges = Vec::with_capacity(dom.dims());
        for k in 0..dom.dims() {
            let stride = dom.stride(k);
            let h = dom.spacing(k);
            let mut ek = vec![0.0; n];
            for (a, e) in ek.iter_mut().enumerate() {
                let mi = dom.multi_index(a);
                if mi[k] + 1 >= dom.points[k] {
                    continue;
                }
                let b = a + stride;
                let pa = dom.point(a);
                let pb = dom.point(b);
                let mid: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| 0.5 * (x + y)).collect();
                let dm = diffusion(&mid)?;
                let scale = dm.amax().max(1.0);
                for i in 0..dm.nrows() {
                    for j in 0..dm.ncols() {
                        if i != j && dm[(i, j)].abs() > OFF_DIAGONAL_TOL * scale {
                            return Err(Error::usage(
                                "the grid operator supports diagonal diffusion matrices only",
                            ));
                        }
                    }
                }
                let transverse: f64 = (0..dom.dims())
                    .filter(|&j| j != k)
                    .map(|j| dom.axis_weight(j, mi[j]))
                    .product();
                *e = sq[a] * sq[b] * dm[(k, k)] * transverse / h;
            }
            edges.push(ek);
        }
        Ok(Self { domain: dom, edges, mass })
    }

    pub fn len(&self) -> usize {
        self.mass.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mass.is_empty()
    }

    /// `Σ_edges c (u_b − u_a)²`.
    pub fn energy(&self, u: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (k, ek) in self.edges.iter().enumerate() {
            let s = self.domain.stride(k);
            for (a, &c) in ek.iter().enumerate() {
                if c != 0.0 {
                    let d = u[a + s] - u[a];
                    acc += c * d * d;
                }
            }
        }
        acc
    }

    /// Energy restricted to edges along `axis`.
    pub fn axis_energy(&self, u: &[f64], axis: usize) -> f64 {
        let s = self.domain.stride(axis);
        self.edges[axis]
            .iter()
            .enumerate()
            .filter(|(_, c)| **c != 0.0)
            .map(|(a, &c)| c * (u[a + s] - u[a]).powi(2))
            .sum()
    }

    /// `out = K u`.
    pub fn apply_stiffness(&self, u: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (k, ek) in self.edges.iter().enumerate() {
            let s = self.domain.stride(k);
            for (a, &c) in ek.iter().enumerate() {
                if c != 0.0 {
                    let f = c * (u[a] - u[a + s]);
                    out[a] += f;
                    out[a + s] -= f;
                }
            }
        }
    }

    /// The weighted operator `M⁻¹ K u`; zero where the mass vanishes.
    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; u.len()];
        self.apply_stiffness(u, &mut out);
        for (o, m) in out.iter_mut().zip(&self.mass) {
            *o = if *m > 0.0 { *o / m } else { 0.0 };
        }
        out
    }

    /// `⟨u, w⟩_ν` by the nodal mass.
    pub fn inner(&self, u: &[f64], w: &[f64]) -> f64 {
        self.mass.iter().zip(u).zip(w).map(|((m, a), b)| m * a * b).sum()
    }

    fn diag(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.len()];
        for (k, ek) in self.edges.iter().enumerate() {
            let s = self.domain.stride(k);
            for (a, &c) in ek.iter().enumerate() {
                d[a] += c;
                if c != 0.0 {
                    d[a + s] += c;
                }
            }
        }
        d
    }

    fn active_axes(&self) -> Vec<usize> {
        (0..self.domain.dims())
            .filter(|&k| self.edges[k].iter().any(|&c| c > 0.0))
            .collect()
    }

    /// Fiber label of every node: nodes sharing the indices of all inactive
    /// axes are coupled, different fibers never are.
    pub fn fibers(&self) -> (Vec<usize>, usize) {
        let active = self.active_axes();
        let dom = &self.domain;
        let mut count = 1;
        let inactive: Vec<usize> = (0..dom.dims()).filter(|k| !active.contains(k)).collect();
        for &k in &inactive {
            count *= dom.points[k];
        }
        let labels = (0..dom.len())
            .map(|idx| {
                let mi = dom.multi_index(idx);
                inactive.iter().fold(0, |acc, &k| acc * dom.points[k] + mi[k])
            })
            .collect();
        (labels, count)
    }

    /// Per-fiber `(∫ rhs dν, ν-mass)` sums.
    pub fn fiber_integrals(&self, rhs: &[f64]) -> Vec<(f64, f64)> {
        let (labels, count) = self.fibers();
        let mut out = vec![(0.0, 0.0); count];
        for (i, &f) in labels.iter().enumerate() {
            out[f].0 += self.mass[i] * rhs[i];
            out[f].1 += self.mass[i];
        }
        out
    }

    /// Largest per-fiber ν-average of `rhs`, the solvability defect.
    pub fn compatibility_defect(&self, rhs: &[f64]) -> f64 {
        self.fiber_integrals(rhs)
            .iter()
            .filter(|(_, m)| *m > 0.0)
            .map(|(s, m)| (s / m).abs())
            .fold(0.0, f64::max)
    }

    /// Solves `−(1/ν)∇·(ν D ∇ψ) = rhs` with `∫ψ dν = 0` on every fiber.
    pub fn solve(&self, rhs: &GridField, opts: &SolverOptions) -> Result<GridField> {
        if rhs.values.len() != self.len() {
            return Err(Error::Dimension { expected: self.len(), got: rhs.values.len() });
        }
        let active = self.active_axes();
        if active.is_empty() {
            return Err(Error::Solver {
                message: "diffusion vanishes on every axis".into(),
                condition: f64::INFINITY,
            });
        }
        let defect = self.compatibility_defect(&rhs.values);
        if defect > opts.compat_tol {
            return Err(Error::Compatibility { integral: defect, tol: opts.compat_tol });
        }
        let (labels, count) = self.fibers();
        let sums = self.fiber_integrals(&rhs.values);
        let b: Vec<f64> = (0..self.len())
            .map(|i| {
                let (s, m) = sums[labels[i]];
                let centred = if m > 0.0 { rhs.values[i] - s / m } else { 0.0 };
                self.mass[i] * centred
            })
            .collect();
        let mut psi = if active.len() == 1 {
            self.solve_lines(active[0], &b)
        } else {
            match self.solve_cg(&labels, count, &b, opts) {
                Ok(x) => x,
                Err(e) if self.len() <= opts.dense_max => self.solve_dense(&labels, count, &b).map_err(|_| e)?,
                Err(e) => return Err(e),
            }
        };
        self.center(&mut psi, &labels, count);
        GridField::new(self.domain.clone(), psi)
    }

    fn center(&self, psi: &mut [f64], labels: &[usize], count: usize) {
        let mut s = vec![(0.0, 0.0); count];
        for (i, &f) in labels.iter().enumerate() {
            s[f].0 += self.mass[i] * psi[i];
            s[f].1 += self.mass[i];
        }
        for (i, &f) in labels.iter().enumerate() {
            if s[f].1 > 0.0 {
                psi[i] -= s[f].0 / s[f].1;
            }
        }
    }

    /// Direct solve when only one axis carries diffusion. Along each line the
    /// edge flux equals a partial sum of the load; partial sums are taken from
    /// whichever end is closer in mass so that tail fluxes keep full relative
    /// precision.
    fn solve_lines(&self, axis: usize, b: &[f64]) -> Vec<f64> {
        let dom = &self.domain;
        let s = dom.stride(axis);
        let m = dom.points[axis];
        let mut psi = vec![0.0; self.len()];
        let starts: Vec<usize> = (0..dom.len()).filter(|&i| dom.multi_index(i)[axis] == 0).collect();
        let mut load = vec![0.0; m];
        let mut left = vec![0.0; m];
        let mut right = vec![0.0; m + 1];
        for start in starts {
            let node = |j: usize| start + j * s;
            for (j, l) in load.iter_mut().enumerate() {
                *l = b[node(j)];
            }
            let mut acc = 0.0;
            for j in 0..m {
                acc += load[j];
                left[j] = acc;
            }
            right[m] = 0.0;
            for j in (0..m).rev() {
                right[j] = right[j + 1] + load[j];
            }
            let mode = (0..m)
                .max_by(|&x, &y| self.mass[node(x)].total_cmp(&self.mass[node(y)]))
                .unwrap_or(0);
            let mut value = 0.0;
            psi[node(0)] = 0.0;
            for j in 0..m - 1 {
                let flux = if j < mode { left[j] } else { -right[j + 1] };
                let c = self.edges[axis][node(j)];
                if c > 0.0 {
                    value -= flux / c;
                }
                psi[node(j + 1)] = value;
            }
        }
        psi
    }

    fn pin_weights(&self, labels: &[usize], count: usize) -> Vec<f64> {
        let diag = self.diag();
        let mut num = vec![0.0; count];
        let mut den = vec![0.0; count];
        let mut cnt = vec![0.0; count];
        for (i, &f) in labels.iter().enumerate() {
            num[f] += diag[i];
            den[f] += self.mass[i] * self.mass[i];
            cnt[f] += 1.0;
        }
        (0..count)
            .map(|f| if den[f] > 0.0 { num[f] / cnt[f] / den[f] } else { 0.0 })
            .collect()
    }

    /// `(K + Σ_f τ_f m_f m_fᵀ) x`.
    fn apply_pinned(&self, x: &[f64], labels: &[usize], tau: &[f64], out: &mut [f64]) {
        self.apply_stiffness(x, out);
        let mut proj = vec![0.0; tau.len()];
        for (i, &f) in labels.iter().enumerate() {
            proj[f] += self.mass[i] * x[i];
        }
        for (i, &f) in labels.iter().enumerate() {
            out[i] += tau[f] * self.mass[i] * proj[f];
        }
    }

    fn solve_cg(&self, labels: &[usize], count: usize, b: &[f64], opts: &SolverOptions) -> Result<Vec<f64>> {
        let n = self.len();
        let tau = self.pin_weights(labels, count);
        let diag = self.diag();
        let pre: Vec<f64> = (0..n)
            .map(|i| {
                let d = diag[i] + tau[labels[i]] * self.mass[i] * self.mass[i];
                if d > 0.0 {
                    1.0 / d
                } else {
                    0.0
                }
            })
            .collect();
        let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut x = vec![0.0; n];
        if bnorm == 0.0 {
            return Ok(x);
        }
        let mut r = b.to_vec();
        let mut z: Vec<f64> = r.iter().zip(&pre).map(|(a, p)| a * p).collect();
        let mut p = z.clone();
        let mut ap = vec![0.0; n];
        let mut rz: f64 = r.iter().zip(&z).map(|(a, c)| a * c).sum();
        for _ in 0..opts.cg_max_iter {
            self.apply_pinned(&p, labels, &tau, &mut ap);
            let pap: f64 = p.iter().zip(&ap).map(|(a, c)| a * c).sum();
            if !(pap > 0.0) {
                break;
            }
            let alpha = rz / pap;
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            let rnorm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if rnorm <= opts.cg_tol * bnorm {
                return Ok(x);
            }
            for i in 0..n {
                z[i] = r[i] * pre[i];
            }
            let rz_new: f64 = r.iter().zip(&z).map(|(a, c)| a * c).sum();
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
        let dmax = pre.iter().filter(|v| **v > 0.0).fold(0.0_f64, |m, v| m.max(1.0 / v));
        let dmin = pre.iter().filter(|v| **v > 0.0).fold(f64::INFINITY, |m, v| m.min(1.0 / v));
        Err(Error::Solver {
            message: format!("conjugate gradient did not reach tolerance {:e}", opts.cg_tol),
            condition: dmax / dmin,
        })
    }

    /// Assembled pinned system solved by Cholesky.
    pub(crate) fn solve_dense(&self, labels: &[usize], count: usize, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.len();
        let a = self.pinned_matrix(labels, count);
        match a.clone().cholesky() {
            Some(ch) => Ok(ch.solve(&DVector::from_column_slice(b)).as_slice().to_vec()),
            None => {
                let eig = a.symmetric_eigenvalues();
                let (lo, hi) = (eig.min(), eig.max());
                Err(Error::Solver {
                    message: format!("dense Cholesky failed on {n} unknowns"),
                    condition: if lo > 0.0 { hi / lo } else { f64::INFINITY },
                })
            }
        }
    }

    /// Dense stiffness matrix `K`.
    pub fn stiffness_matrix(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut k = DMatrix::zeros(n, n);
        for (ax, ek) in self.edges.iter().enumerate() {
            let s = self.domain.stride(ax);
            for (a, &c) in ek.iter().enumerate() {
                if c != 0.0 {
                    k[(a, a)] += c;
                    k[(a + s, a + s)] += c;
                    k[(a, a + s)] -= c;
                    k[(a + s, a)] -= c;
                }
            }
        }
        k
    }

    fn pinned_matrix(&self, labels: &[usize], count: usize) -> DMatrix<f64> {
        let tau = self.pin_weights(labels, count);
        let mut a = self.stiffness_matrix();
        let n = self.len();
        for i in 0..n {
            for j in 0..n {
                if labels[i] == labels[j] {
                    a[(i, j)] += tau[labels[i]] * self.mass[i] * self.mass[j];
                }
            }
        }
        a
    }
}
