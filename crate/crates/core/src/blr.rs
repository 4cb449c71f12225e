//! Bayesian logistic regression: datasets, the posterior potential and
//! accuracy trajectories of the samplers.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynamics::{build_variant_spec, AntisymmetricMatrixSeed, Variant, VariantParams};
use crate::error::{check_dim, Error, Result};
use crate::potentials::{make_quartic_mirror, sigmoid, BlrTerms, PotentialModel};
use crate::samplers::{ChainState, Integrator};

/// Number of rows in the canonical WDBC file.
pub const WDBC_ROWS: usize = 569;
/// id, diagnosis and 30 measurements.
pub const WDBC_COLUMNS: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub n: usize,
    pub d: usize,
    /// Row-major `n x d`.
    pub features: Vec<f64>,
    pub labels: Vec<u8>,
    pub feature_names: Option<Vec<String>>,
    pub standardized: bool,
    /// When set, the last column is the constant 1.
    pub intercept_appended: bool,
}

impl Dataset {
    pub fn new(d: usize, features: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        let n = labels.len();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        check_dim(n * d, features.len())?;
        if let Some(i) = labels.iter().position(|y| *y > 1) {
            return Err(Error::Format(format!("label {} at row {i} is not 0 or 1", labels[i])));
        }
        if let Some(i) = features.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { context: "dataset features".into(), coord: i });
        }
        Ok(Self { n, d, features, labels, feature_names: None, standardized: false, intercept_appended: false })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.d..(i + 1) * self.d]
    }

    pub fn label_mean(&self) -> f64 {
        self.labels.iter().map(|y| *y as f64).sum::<f64>() / self.n as f64
    }

    /// Rows in the given order.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let mut features = Vec::with_capacity(idx.len() * self.d);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        let mut out = Self::new(self.d, features, labels)?;
        out.feature_names = self.feature_names.clone();
        out.standardized = self.standardized;
        out.intercept_appended = self.intercept_appended;
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let raw: Dataset = serde_json::from_str(s).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Self::new(raw.d, raw.features, raw.labels)?;
        if out.n != raw.n {
            return Err(Error::Format(format!("row count {} disagrees with {} labels", raw.n, out.n)));
        }
        out.feature_names = raw.feature_names;
        out.standardized = raw.standardized;
        out.intercept_appended = raw.intercept_appended;
        Ok(out)
    }

    /// Appends the constant column.
    pub fn with_intercept(mut self) -> Self {
        if self.intercept_appended {
            return self;
        }
        let d = self.d;
        let mut f = Vec::with_capacity(self.n * (d + 1));
        for row in self.features.chunks_exact(d) {
            f.extend_from_slice(row);
            f.push(1.0);
        }
        self.features = f;
        self.d = d + 1;
        if let Some(names) = self.feature_names.as_mut() {
            names.push("intercept".into());
        }
        self.intercept_appended = true;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n: usize,
    pub d: usize,
    /// Variance of each feature.
    pub feature_scale: f64,
    /// Variance of each true weight.
    pub prior_scale: f64,
    pub seed: u64,
    pub intercept: bool,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { n: 5000, d: 30, feature_scale: 10.0, prior_scale: 10.0, seed: 0, intercept: true }
    }
}

/// Draws `X_j ~ N(0, feature_scale I)`, `x_true ~ N(0, prior_scale I)` and
/// sets `y_j = 1` iff `p_j ≤ σ(x_true·X_j)` with `p_j ~ U[0, 1]`. With an
/// intercept the returned weights carry a zero for it.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<(Dataset, Vec<f64>)> {
    if cfg.n == 0 || cfg.d == 0 {
        return Err(Error::usage("synthetic data needs n, d >= 1"));
    }
    if !(cfg.feature_scale > 0.0) || !(cfg.prior_scale > 0.0) {
        return Err(Error::usage("synthetic scales must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let fs = cfg.feature_scale.sqrt();
    let ps = cfg.prior_scale.sqrt();
    let features: Vec<f64> = (0..cfg.n * cfg.d).map(|_| fs * rng.sample::<f64, _>(StandardNormal)).collect();
    let truth: Vec<f64> = (0..cfg.d).map(|_| ps * rng.sample::<f64, _>(StandardNormal)).collect();
    let labels: Vec<u8> = features
        .chunks_exact(cfg.d)
        .map(|x| {
            let p: f64 = rng.random();
            let m: f64 = x.iter().zip(&truth).map(|(a, b)| a * b).sum();
            (p <= sigmoid(m)) as u8
        })
        .collect();
    let mut data = Dataset::new(cfg.d, features, labels)?;
    let mut weights = truth;
    if cfg.intercept {
        data = data.with_intercept();
        weights.push(0.0);
    }
    Ok((data, weights))
}

/// Reads the UCI breast-cancer layout: `id,diagnosis,30 values` per line,
/// no header (a header-like first line is skipped). `M` maps to 1, `B` to 0
/// and an intercept column is appended.
pub fn load_wdbc(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(file);
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Ingestion {
            line: e.position().map_or(k + 1, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(k + 1, |p| p.line() as usize);
        if rec.len() == 1 && rec.get(0).is_some_and(|s| s.trim().is_empty()) {
            continue;
        }
        if rec.len() != WDBC_COLUMNS {
            return Err(Error::Format(format!(
                "line {line}: expected {WDBC_COLUMNS} columns, found {}",
                rec.len()
            )));
        }
        let diag = rec.get(1).unwrap_or("").trim();
        let label = match diag {
            "M" => 1,
            "B" => 0,
            _ if k == 0 && rec.get(2).is_some_and(|s| s.trim().parse::<f64>().is_err()) => continue,
            other => {
                return Err(Error::Ingestion { line, message: format!("diagnosis `{other}` is neither M nor B") })
            }
        };
        for (j, field) in rec.iter().enumerate().skip(2) {
            let x: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::Ingestion { line, message: format!("column {}: `{field}` is not a number", j + 1) })?;
            if !x.is_finite() {
                return Err(Error::Ingestion { line, message: format!("column {}: non-finite value", j + 1) });
            }
            features.push(x);
        }
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(Dataset::new(WDBC_COLUMNS - 2, features, labels)?.with_intercept())
}

/// Z-score transform fit on the training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformRecord {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    /// False for the intercept and for zero-variance columns.
    pub scaled: Vec<bool>,
    pub warnings: Vec<String>,
    pub n_train: usize,
    pub n_test: usize,
}

impl TransformRecord {
    /// Applies the transform unless `data` is already standardized.
    pub fn apply(&self, data: &mut Dataset) -> Result<()> {
        if data.standardized {
            return Ok(());
        }
        check_dim(self.means.len(), data.d)?;
        let d = data.d;
        for row in data.features.chunks_exact_mut(d) {
            for j in 0..d {
                if self.scaled[j] {
                    row[j] = (row[j] - self.means[j]) / self.stds[j];
                }
            }
        }
        data.standardized = true;
        Ok(())
    }
}

/// Seeded shuffle into `floor(fraction n)` training rows and the rest.
pub fn split(data: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::usage(format!("train fraction must lie in (0, 1), got {train_fraction}")));
    }
    let n_train = (train_fraction * data.n as f64).floor() as usize;
    if n_train == 0 || n_train == data.n {
        return Err(Error::usage(format!("split of {} rows at {train_fraction} leaves an empty side", data.n)));
    }
    let mut idx: Vec<usize> = (0..data.n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((data.subset(&idx[..n_train])?, data.subset(&idx[n_train..])?))
}

/// Seeded shuffle, `floor(fraction n)` training rows, z-scores fit on train.
pub fn split_standardize(data: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset, TransformRecord)> {
    let (mut train, mut test) = split(data, train_fraction, seed)?;
    let n_train = train.n;
    let d = data.d;
    let mut means = vec![0.0; d];
    let mut stds = vec![1.0; d];
    let mut scaled = vec![false; d];
    let mut warnings = Vec::new();
    if !data.standardized {
        for j in 0..d {
            if data.intercept_appended && j == d - 1 {
                continue;
            }
            let col = || train.features.iter().skip(j).step_by(d);
            let m = col().sum::<f64>() / n_train as f64;
            let v = col().map(|x| (x - m).powi(2)).sum::<f64>() / n_train as f64;
            means[j] = m;
            if v.sqrt() > 1e-12 * (1.0 + m.abs()) {
                stds[j] = v.sqrt();
                scaled[j] = true;
            } else {
                warnings.push(format!("column {j} has zero variance on the training rows and was left unscaled"));
            }
        }
    }
    let record = TransformRecord { means, stds, scaled, warnings, n_train, n_test: data.n - n_train };
    record.apply(&mut train)?;
    record.apply(&mut test)?;
    Ok((train, test, record))
}

/// Fraction of rows where `σ(w·X) ≥ 0.5` agrees with the label.
pub fn accuracy(weights: &[f64], data: &Dataset) -> Result<f64> {
    check_dim(data.d, weights.len())?;
    let hits = (0..data.n)
        .filter(|&i| {
            let m: f64 = data.row(i).iter().zip(weights).map(|(a, b)| a * b).sum();
            (sigmoid(m) >= 0.5) == (data.labels[i] == 1)
        })
        .count();
    Ok(hits as f64 / data.n as f64)
}

/// `U(x) = Σ log(1 + exp(−ỹ_j x·X_j)) + |x|²/(2λ)` with `ỹ = 2y − 1`.
pub fn blr_potential(train: &Dataset, lambda: f64) -> Result<PotentialModel> {
    if !(lambda > 0.0) {
        return Err(Error::usage(format!("prior variance must be positive, got {lambda}")));
    }
    let mut signed = Vec::with_capacity(train.features.len());
    for i in 0..train.n {
        let s = 2.0 * train.labels[i] as f64 - 1.0;
        signed.extend(train.row(i).iter().map(|x| s * x));
    }
    Ok(PotentialModel::from_blr(BlrTerms { rows: train.n, cols: train.d, signed_features: signed, lambda }))
}

/// Posterior mode by damped Newton iterations.
pub fn map_estimate(potential: &PotentialModel) -> Result<Vec<f64>> {
    let d = potential.dim();
    let mut x = DVector::zeros(d);
    for _ in 0..100 {
        let g = DVector::from_vec(potential.gradient(x.as_slice()));
        if g.norm() < 1e-10 {
            break;
        }
        let h: DMatrix<f64> = potential
            .hessian(x.as_slice())
            .ok_or_else(|| Error::usage("MAP estimate needs a Hessian"))?;
        let step = h.cholesky().ok_or_else(|| Error::Solver {
            message: "posterior Hessian is not positive definite".into(),
            condition: f64::INFINITY,
        })?;
        let dx = step.solve(&g);
        let u0 = potential.value(x.as_slice());
        let mut t = 1.0;
        loop {
            let cand = &x - &dx * t;
            if potential.value(cand.as_slice()) <= u0 - 1e-4 * t * g.dot(&dx) || t < 1e-10 {
                x = cand;
                break;
            }
            t *= 0.5;
        }
    }
    Ok(x.as_slice().to_vec())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictionRule {
    CurrentIterate,
    RunningMean,
}

impl std::str::FromStr for PredictionRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "current-iterate" => Ok(Self::CurrentIterate),
            "running-mean" => Ok(Self::RunningMean),
            other => Err(Error::usage(format!("unknown prediction rule `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { train_fraction: 0.8, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub variant: Variant,
    /// Named reals: `gamma`, `alpha`, `beta`, `lambda`, `mirror_eps`.
    pub hyperparams: BTreeMap<String, f64>,
    pub eta: f64,
    pub n_steps: u64,
    pub eval_every: u64,
    pub prediction_rule: PredictionRule,
    pub split: SplitConfig,
    pub seed: u64,
    /// When false every `wall_ms` is written as 0.
    pub record_wall_time: bool,
}

/// Step size of the synthetic protocol.
pub fn default_eta(variant: Variant) -> f64 {
    match variant {
        Variant::Underdamped | Variant::Highorder => 0.003,
        _ => 0.0003,
    }
}

/// Hyperparameters of the synthetic protocol.
pub fn default_hyperparams(variant: Variant) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    m.insert("lambda".to_string(), 10.0);
    match variant {
        Variant::Underdamped => {
            m.insert("gamma".into(), 4.0);
        }
        Variant::Highorder => {
            m.insert("gamma".into(), 20.0);
            m.insert("alpha".into(), 15.0);
        }
        Variant::Hfhr => {
            m.insert("beta".into(), 1.0);
            m.insert("alpha".into(), 30.0);
        }
        Variant::Mirror => {
            m.insert("mirror_eps".into(), 1e-2);
        }
        _ => {}
    }
    m
}

impl ExperimentConfig {
    pub fn for_variant(variant: Variant) -> Self {
        Self {
            variant,
            hyperparams: default_hyperparams(variant),
            eta: default_eta(variant),
            n_steps: 20_000,
            eval_every: 1000,
            prediction_rule: PredictionRule::CurrentIterate,
            split: SplitConfig::default(),
            seed: 0,
            record_wall_time: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::config("eta", "must be positive"));
        }
        if self.n_steps == 0 {
            return Err(Error::config("n_steps", "must be positive"));
        }
        if self.eval_every == 0 || self.eval_every > self.n_steps {
            return Err(Error::config("eval_every", "must lie in [1, n_steps]"));
        }
        if self.variant == Variant::Custom {
            return Err(Error::config("variant", "custom dynamics are not available for experiments"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrajectoryRow {
    pub step: u64,
    /// NaN on the failure marker row.
    pub accuracy: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AccuracyTrajectory {
    pub rows: Vec<TrajectoryRow>,
    /// Step at which the chain left the finite region, if it did.
    pub diverged_at: Option<u64>,
    pub final_weights: Vec<f64>,
}

impl AccuracyTrajectory {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.rows.iter().rev().find(|r| r.accuracy.is_finite()).map(|r| r.accuracy)
    }

    /// `step,accuracy,wall_ms`; the failure marker row has `accuracy = NaN`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,accuracy,wall_ms\n");
        for r in &self.rows {
            if r.accuracy.is_finite() {
                s.push_str(&format!("{},{},{}\n", r.step, r.accuracy, r.wall_ms));
            } else {
                s.push_str(&format!("{},NaN,{}\n", r.step, r.wall_ms));
            }
        }
        s
    }
}

fn hyper(exp: &ExperimentConfig, name: &str) -> Option<f64> {
    exp.hyperparams.get(name).copied()
}

/// Splits, standardizes and runs the sampler.
pub fn run_experiment(exp: &ExperimentConfig, data: &Dataset) -> Result<AccuracyTrajectory> {
    let (train, test, _) = split_standardize(data, exp.split.train_fraction, exp.split.seed)?;
    run_on_split(exp, &train, &test)
}

/// Runs the sampler on the posterior of `train` and evaluates on `test`.
pub fn run_on_split(exp: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Result<AccuracyTrajectory> {
    exp.validate()?;
    check_dim(train.d, test.d)?;
    let lambda = hyper(exp, "lambda").unwrap_or(10.0);
    let potential = blr_potential(train, lambda)?;
    let d = train.d;
    let mut params = VariantParams {
        gamma: hyper(exp, "gamma"),
        alpha: hyper(exp, "alpha"),
        beta: hyper(exp, "beta"),
        j: None,
    };
    let mut mirror = None;
    match exp.variant {
        Variant::Nonreversible => {
            let mut rng = ChaCha8Rng::seed_from_u64(exp.seed ^ 0x4a4a_4a4a);
            params.j = Some(AntisymmetricMatrixSeed::random(d, &mut rng).derived);
        }
        Variant::Mirror => {
            mirror = Some(make_quartic_mirror(d, hyper(exp, "mirror_eps").unwrap_or(1e-2))?);
        }
        _ => {}
    }
    let spec = build_variant_spec(exp.variant, potential, &params, mirror)?;
    let mut integ = Integrator::new(&spec)?;
    let mut state = ChainState::new(vec![0.0; spec.n()], exp.seed, 0);
    let mut mean = vec![0.0; d];
    let mut rows = Vec::new();
    let start = Instant::now();
    let wall = |s: &Instant| if exp.record_wall_time { s.elapsed().as_millis() as u64 } else { 0 };
    let mut diverged_at = None;
    for step in 1..=exp.n_steps {
        if let Err(e) = integ.step(&mut state, exp.eta) {
            match e {
                Error::Divergence { step, .. } => {
                    diverged_at = Some(step);
                    rows.push(TrajectoryRow { step, accuracy: f64::NAN, wall_ms: wall(&start) });
                    break;
                }
                other => return Err(other),
            }
        }
        let k = step as f64;
        for (m, x) in mean.iter_mut().zip(&state.z[..d]) {
            *m += (x - *m) / k;
        }
        if step % exp.eval_every == 0 {
            let w: &[f64] = match exp.prediction_rule {
                PredictionRule::CurrentIterate => &state.z[..d],
                PredictionRule::RunningMean => &mean,
            };
            rows.push(TrajectoryRow { step, accuracy: accuracy(w, test)?, wall_ms: wall(&start) });
        }
    }
    let final_weights = match exp.prediction_rule {
        PredictionRule::CurrentIterate => state.z[..d].to_vec(),
        PredictionRule::RunningMean => mean,
    };
    Ok(AccuracyTrajectory { rows, diverged_at, final_weights })
}
