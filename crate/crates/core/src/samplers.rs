//! Euler–Maruyama integration of a [`DynamicsSpec`], ensembles of chains and
//! empirical-measure summaries.
//!
//! Every chain draws from its own ChaCha stream keyed by `(seed, chain id)`,
//! so results do not depend on how chains are scheduled across threads.

use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{DynamicsSpec, MatrixField};
use crate::error::{check_dim, Error, Result};

/// Chains are aborted once any coordinate exceeds this magnitude.
pub const DIVERGENCE_BOUND: f64 = 1e8;

#[derive(Clone, Debug)]
pub struct ChainState {
    pub z: Vec<f64>,
    pub step: u64,
    pub seed: u64,
    pub stream: u64,
    rng: ChaCha8Rng,
}

impl ChainState {
    pub fn new(z: Vec<f64>, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { z, step: 0, seed, stream, rng }
    }

    fn draw_normals(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.rng.sample(StandardNormal);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub eta: f64,
    pub n_steps: u64,
    pub burn_in: u64,
    pub thinning: u64,
    pub n_chains: usize,
    pub seed: u64,
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::config("eta", format!("must be positive, got {}", self.eta)));
        }
        if self.n_steps == 0 {
            return Err(Error::config("n_steps", "must be positive"));
        }
        if self.burn_in >= self.n_steps {
            return Err(Error::config("burn_in", "must be smaller than n_steps"));
        }
        if self.thinning == 0 {
            return Err(Error::config("thinning", "must be positive"));
        }
        if self.n_chains == 0 {
            return Err(Error::config("n_chains", "must be at least 1"));
        }
        Ok(())
    }

    fn retains(&self, step: u64) -> bool {
        step > self.burn_in && (step - self.burn_in) % self.thinning == 0
    }
}

/// How `S(z)` with `S Sᵀ = D(z)` is formed.
enum NoisePlan {
    /// Constant diagonal `D`; stores the elementwise square roots.
    Diagonal(Vec<f64>),
    /// Constant non-diagonal `D`; stores a precomputed factor.
    Factor(DMatrix<f64>),
    /// Mirror metric, diagonal but state dependent.
    Mirror,
    /// General state-dependent `D`, factorized every step.
    Dense,
}

fn sym_sqrt(m: DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

impl NoisePlan {
    fn for_spec(spec: &DynamicsSpec) -> Result<Self> {
        Ok(match spec.diffusion_field() {
            MatrixField::Constant(m) => {
                let off = m.iter().enumerate().any(|(k, v)| k % (m.nrows() + 1) != 0 && *v != 0.0);
                if off {
                    NoisePlan::Factor(sym_sqrt(m.clone()))
                } else {
                    NoisePlan::Diagonal(m.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect())
                }
            }
            MatrixField::Mirror(_) => NoisePlan::Mirror,
            _ => NoisePlan::Dense,
        })
    }

    /// Writes `S(z) ξ` into `out`.
    fn apply(&self, spec: &DynamicsSpec, z: &[f64], xi: &[f64], out: &mut [f64]) -> Result<()> {
        match self {
            NoisePlan::Diagonal(s) => {
                for i in 0..out.len() {
                    out[i] = s[i] * xi[i];
                }
            }
            NoisePlan::Factor(f) => {
                for i in 0..out.len() {
                    out[i] = (0..xi.len()).map(|k| f[(i, k)] * xi[k]).sum();
                }
            }
            NoisePlan::Mirror => {
                let m = spec.mirror().expect("mirror spec").metric_diag(z)?;
                for i in 0..out.len() {
                    out[i] = m[i].sqrt() * xi[i];
                }
            }
            NoisePlan::Dense => {
                let f = sym_sqrt(spec.diffusion(z)?);
                for i in 0..out.len() {
                    out[i] = (0..xi.len()).map(|k| f[(i, k)] * xi[k]).sum();
                }
            }
        }
        Ok(())
    }
}

/// Reusable buffers for repeated Euler–Maruyama steps on one spec.
pub struct Integrator<'a> {
    spec: &'a DynamicsSpec,
    plan: NoisePlan,
    f: Vec<f64>,
    xi: Vec<f64>,
    noise: Vec<f64>,
}

impl<'a> Integrator<'a> {
    pub fn new(spec: &'a DynamicsSpec) -> Result<Self> {
        let n = spec.n();
        Ok(Self {
            spec,
            plan: NoisePlan::for_spec(spec)?,
            f: vec![0.0; n],
            xi: vec![0.0; n],
            noise: vec![0.0; n],
        })
    }

    /// One step with externally supplied standard normals `xi`.
    pub fn step_with_noise(&mut self, state: &mut ChainState, eta: f64, xi: &[f64]) -> Result<()> {
        check_dim(self.spec.n(), xi.len())?;
        let z = &state.z;
        let diverged = |step| Error::Divergence { step, eta, last_finite: z.clone() };
        if self.spec.drift_into(z, &mut self.f).is_err() {
            return Err(diverged(state.step + 1));
        }
        if self.plan.apply(self.spec, z, xi, &mut self.noise).is_err() {
            return Err(diverged(state.step + 1));
        }
        let scale = (2.0 * eta).sqrt();
        let next: Vec<f64> = (0..z.len())
            .map(|i| z[i] + self.f[i] * eta + scale * self.noise[i])
            .collect();
        if next.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_BOUND) {
            return Err(diverged(state.step + 1));
        }
        state.z = next;
        state.step += 1;
        Ok(())
    }

    pub fn step(&mut self, state: &mut ChainState, eta: f64) -> Result<()> {
        let mut xi = std::mem::take(&mut self.xi);
        state.draw_normals(&mut xi);
        let r = self.step_with_noise(state, eta, &xi);
        self.xi = xi;
        r
    }
}

/// `z' = z + f(z) η + sqrt(2η) S(z) ξ`.
pub fn em_step(spec: &DynamicsSpec, state: &mut ChainState, eta: f64) -> Result<()> {
    if !(eta > 0.0) {
        return Err(Error::usage(format!("eta must be positive, got {eta}")));
    }
    check_dim(spec.n(), state.z.len())?;
    Integrator::new(spec)?.step(state, eta)
}

/// Fixed-range histogram with explicit under/overflow counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
    pub underflow: u64,
    pub overflow: u64,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Self {
        Self { lo, hi, counts: vec![0; bins], underflow: 0, overflow: 0 }
    }

    pub fn push(&mut self, x: f64) {
        if x < self.lo {
            self.underflow += 1;
        } else if x >= self.hi {
            self.overflow += 1;
        } else {
            let bins = self.counts.len();
            let b = ((x - self.lo) / (self.hi - self.lo) * bins as f64) as usize;
            self.counts[b.min(bins - 1)] += 1;
        }
    }

    pub fn total(&self) -> u64 {
        self.underflow + self.overflow + self.counts.iter().sum::<u64>()
    }

    pub fn edges(&self) -> Vec<f64> {
        let k = self.counts.len();
        (0..=k).map(|i| self.lo + (self.hi - self.lo) * i as f64 / k as f64).collect()
    }

    fn merge(&mut self, other: &Histogram) {
        assert_eq!(self.counts.len(), other.counts.len(), "histogram layouts differ");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.underflow += other.underflow;
        self.overflow += other.overflow;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramSpec {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        Self { lo: -8.0, hi: 8.0, bins: 400 }
    }
}

/// Streaming moments and marginal histograms of retained states.
///
/// Raw sums are stored so that merging is plain addition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub count: u64,
    pub theta_dim: usize,
    sum: Vec<f64>,
    sum_outer: Vec<f64>,
    pub marginal_histograms: Vec<Histogram>,
}

impl EnsembleSummary {
    pub fn new(n: usize, theta_dim: usize, hist: HistogramSpec) -> Self {
        Self {
            count: 0,
            theta_dim,
            sum: vec![0.0; n],
            sum_outer: vec![0.0; n * n],
            marginal_histograms: (0..n).map(|_| Histogram::new(hist.lo, hist.hi, hist.bins)).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.sum.len()
    }

    pub fn push(&mut self, z: &[f64]) {
        let n = self.dim();
        self.count += 1;
        for i in 0..n {
            self.sum[i] += z[i];
            for j in 0..n {
                self.sum_outer[i * n + j] += z[i] * z[j];
            }
            self.marginal_histograms[i].push(z[i]);
        }
    }

    pub fn merge(&mut self, other: &EnsembleSummary) {
        assert_eq!(self.dim(), other.dim(), "summary dimensions differ");
        self.count += other.count;
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        for (a, b) in self.sum_outer.iter_mut().zip(&other.sum_outer) {
            *a += b;
        }
        for (a, b) in self.marginal_histograms.iter_mut().zip(&other.marginal_histograms) {
            a.merge(b);
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        let c = self.count.max(1) as f64;
        self.sum.iter().map(|s| s / c).collect()
    }

    /// Raw second moment `E[z zᵀ]`.
    pub fn second_moment(&self) -> DMatrix<f64> {
        let n = self.dim();
        let c = self.count.max(1) as f64;
        DMatrix::from_fn(n, n, |i, j| self.sum_outer[i * n + j] / c)
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let m = self.mean();
        let n = self.dim();
        let s = self.second_moment();
        DMatrix::from_fn(n, n, |i, j| s[(i, j)] - m[i] * m[j])
    }

    pub fn theta_mean(&self) -> Vec<f64> {
        self.mean()[..self.theta_dim].to_vec()
    }

    pub fn theta_covariance(&self) -> DMatrix<f64> {
        let d = self.theta_dim;
        self.covariance().view((0, 0), (d, d)).into_owned()
    }

    /// JSON-friendly view.
    pub fn report(&self) -> SummaryReport {
        let cov = self.covariance();
        let sm = self.second_moment();
        let n = self.dim();
        let rows = |m: &DMatrix<f64>| (0..n).map(|i| (0..n).map(|j| m[(i, j)]).collect()).collect();
        SummaryReport {
            count: self.count,
            mean: self.mean(),
            second_moment: rows(&sm),
            covariance: rows(&cov),
            theta_mean: self.theta_mean(),
            marginal_histograms: self.marginal_histograms.clone(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SummaryReport {
    pub count: u64,
    pub mean: Vec<f64>,
    pub second_moment: Vec<Vec<f64>>,
    pub covariance: Vec<Vec<f64>>,
    pub theta_mean: Vec<f64>,
    pub marginal_histograms: Vec<Histogram>,
}

/// Where a chain's retained states were written, if anywhere.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrajectoryHandle {
    pub path: Option<PathBuf>,
    pub rows: u64,
}

fn write_row(w: &mut dyn Write, step: u64, z: &[f64]) -> std::io::Result<()> {
    write!(w, "{step}")?;
    for v in z {
        write!(w, ",{v}")?;
    }
    writeln!(w)
}

pub fn trajectory_header(n: usize) -> String {
    let mut s = String::from("step");
    for i in 0..n {
        s.push_str(&format!(",z{i}"));
    }
    s
}

/// Runs one chain with stream id `chain_id`, optionally spilling retained
/// states to a CSV file.
pub fn run_chain_with(
    spec: &DynamicsSpec,
    config: &IntegratorConfig,
    init: &[f64],
    chain_id: u64,
    hist: HistogramSpec,
    spill: Option<&Path>,
) -> Result<(TrajectoryHandle, EnsembleSummary)> {
    config.validate()?;
    check_dim(spec.n(), init.len())?;
    let mut integ = Integrator::new(spec)?;
    let mut state = ChainState::new(init.to_vec(), config.seed, chain_id);
    let mut summary = EnsembleSummary::new(spec.n(), spec.layout().d, hist);
    let mut handle = TrajectoryHandle { path: spill.map(Path::to_path_buf), rows: 0 };
    let mut writer = match spill {
        Some(p) => {
            let f = std::fs::File::create(p).map_err(|e| Error::io(p, e))?;
            let mut w = std::io::BufWriter::new(f);
            writeln!(w, "{}", trajectory_header(spec.n())).map_err(|e| Error::io(p, e))?;
            Some(w)
        }
        None => None,
    };
    for _ in 0..config.n_steps {
        integ.step(&mut state, config.eta)?;
        if config.retains(state.step) {
            summary.push(&state.z);
            if let (Some(w), Some(p)) = (writer.as_mut(), spill) {
                write_row(w, state.step, &state.z).map_err(|e| Error::io(p, e))?;
                handle.rows += 1;
            }
        }
    }
    if let (Some(mut w), Some(p)) = (writer, spill) {
        w.flush().map_err(|e| Error::io(p, e))?;
    }
    Ok((handle, summary))
}

pub fn run_chain(
    spec: &DynamicsSpec,
    config: &IntegratorConfig,
    init: &[f64],
) -> Result<(TrajectoryHandle, EnsembleSummary)> {
    run_chain_with(spec, config, init, 0, HistogramSpec::default(), None)
}

/// Per-chain summaries, in chain order.
pub fn run_chains(
    spec: &DynamicsSpec,
    config: &IntegratorConfig,
    init: &[f64],
    hist: HistogramSpec,
) -> Result<Vec<EnsembleSummary>> {
    config.validate()?;
    let results: Vec<Result<EnsembleSummary>> = (0..config.n_chains as u64)
        .into_par_iter()
        .map(|c| run_chain_with(spec, config, init, c, hist, None).map(|(_, s)| s))
        .collect();
    let failed: Vec<usize> = results
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.is_err().then_some(i))
        .collect();
    if !failed.is_empty() {
        let first = results.into_iter().find_map(|r| r.err()).expect("at least one failure");
        return Err(Error::PartialFailure { failed, first: Box::new(first) });
    }
    Ok(results.into_iter().map(|r| r.expect("checked")).collect())
}

pub fn merge_all<'a, I: IntoIterator<Item = &'a EnsembleSummary>>(parts: I) -> Option<EnsembleSummary> {
    let mut it = parts.into_iter();
    let mut acc = it.next()?.clone();
    for s in it {
        acc.merge(s);
    }
    Some(acc)
}

/// Runs `n_chains` independent chains from `init` and merges their summaries
/// in chain order.
pub fn run_ensemble(spec: &DynamicsSpec, config: &IntegratorConfig, init: &[f64]) -> Result<EnsembleSummary> {
    run_ensemble_with(spec, config, init, HistogramSpec::default())
}

pub fn run_ensemble_with(
    spec: &DynamicsSpec,
    config: &IntegratorConfig,
    init: &[f64],
    hist: HistogramSpec,
) -> Result<EnsembleSummary> {
    let parts = run_chains(spec, config, init, hist)?;
    Ok(merge_all(&parts).expect("n_chains >= 1"))
}

/// Kolmogorov–Smirnov statistic between the binned marginal of `coord` and
/// `cdf`, evaluated at the histogram edges.
pub fn ks_distance_marginal<F: Fn(f64) -> f64>(summary: &EnsembleSummary, coord: usize, cdf: F) -> Result<f64> {
    let h = summary
        .marginal_histograms
        .get(coord)
        .ok_or_else(|| Error::usage(format!("coordinate {coord} out of range")))?;
    let total = h.total();
    if total == 0 {
        return Err(Error::usage("empty summary"));
    }
    let n = total as f64;
    let edges = h.edges();
    let mut below = h.underflow;
    let mut ks: f64 = (below as f64 / n - cdf(edges[0])).abs();
    for (k, c) in h.counts.iter().enumerate() {
        below += c;
        ks = ks.max((below as f64 / n - cdf(edges[k + 1])).abs());
    }
    Ok(ks)
}
