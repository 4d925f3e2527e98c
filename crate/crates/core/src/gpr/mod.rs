//! Exact Gaussian process regression with a Matern 5/2 ARD kernel.

pub mod bfgs;
mod kernel;
mod likelihood;

use std::path::Path;

use nalgebra::{Cholesky, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
pub use bfgs::{BfgsOptions, Termination};
pub use kernel::{matern52, matern52_of_r, scaled_distance, Hyperparams};
use kernel::{cross_covariance, kernel_matrix};
pub use likelihood::log_marginal_likelihood;
use likelihood::factorize;

/// Per-feature affine map applied to inputs, plus the target offset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
    pub target_mean: f64,
}

impl Standardization {
    /// Zero mean and unit population sd per column; constant columns keep scale 1.
    pub fn fit(x: &[f64], d: usize, y: &[f64]) -> Self {
        let n = y.len();
        let mut mean = vec![0.0; d];
        for row in x.chunks_exact(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for row in x.chunks_exact(d) {
            for k in 0..d {
                var[k] += (row[k] - mean[k]).powi(2);
            }
        }
        let scale = var
            .iter()
            .zip(&mean)
            .map(|(v, m)| {
                let s = (v / n as f64).sqrt();
                if s > 1e-12 * m.abs().max(1.0) {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Standardization {
            feature_mean: mean,
            feature_scale: scale,
            target_mean: y.iter().sum::<f64>() / n as f64,
        }
    }

    /// Leaves inputs and targets untouched.
    pub fn identity(d: usize) -> Self {
        Standardization {
            feature_mean: vec![0.0; d],
            feature_scale: vec![1.0; d],
            target_mean: 0.0,
        }
    }

    pub fn width(&self) -> usize {
        self.feature_mean.len()
    }

    fn apply_row(&self, row: &[f64], out: &mut Vec<f64>) {
        out.extend(
            row.iter()
                .zip(&self.feature_mean)
                .zip(&self.feature_scale)
                .map(|((v, m), s)| (v - m) / s),
        );
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks_exact(self.width()) {
            self.apply_row(row, &mut out);
        }
        out
    }
}

/// Posterior predictive for one query, target units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Clone, Debug)]
pub struct FitOptions {
    pub restarts: usize,
    pub seed: u64,
    /// Likelihood maximization uses at most this many evenly spaced rows;
    /// the returned model conditions on all of them.
    pub max_fit_rows: Option<usize>,
    /// Starting point in standardized-input units. Defaults to unit
    /// length-scales, `sigma_f = sd(y)`, `sigma_n = 0.1 sd(y)`.
    pub init: Option<Hyperparams>,
    /// Restarts perturb each hyperparameter by a factor in `[1/p, p]`.
    pub perturbation: f64,
    pub bfgs: BfgsOptions,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            restarts: 5,
            seed: 0,
            max_fit_rows: None,
            init: None,
            perturbation: 3.0,
            bfgs: BfgsOptions::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RestartDiagnostics {
    pub restart: usize,
    pub start: Vec<f64>,
    pub log_likelihood: Option<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Option<Termination>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub rows_used: usize,
    pub best_restart: usize,
    pub restarts: Vec<RestartDiagnostics>,
}

impl std::fmt::Display for FitDiagnostics {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for r in &self.restarts {
            write!(
                f,
                "[restart {} iters {} term {:?} ll {:?} err {:?}] ",
                r.restart, r.iterations, r.termination, r.log_likelihood, r.error
            )?;
        }
        Ok(())
    }
}

/// Conditioned GP. Immutable once built.
#[derive(Clone, Debug)]
pub struct GpModel {
    feature_names: Vec<String>,
    hyper: Hyperparams,
    standardization: Standardization,
    d: usize,
    x_train: Vec<f64>,
    y_train: Vec<f64>,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    jitter: f64,
    diagnostics: Option<FitDiagnostics>,
}

fn check_shape(x: &[f64], d: usize, y: &[f64]) -> Result<()> {
    if d == 0 || y.is_empty() || x.len() != y.len() * d {
        return Err(Error::Usage(format!(
            "training data: {} values for {} rows of width {d}",
            x.len(),
            y.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite training value".into()));
    }
    Ok(())
}

fn subsample(n: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(m) if m >= 2 && m < n => (0..m).map(|i| i * n / m).collect(),
        _ => (0..n).collect(),
    }
}

fn sd(y: &[f64]) -> f64 {
    let m = y.iter().sum::<f64>() / y.len() as f64;
    (y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / y.len() as f64).sqrt()
}

impl GpModel {
    /// Standardizes, maximizes the likelihood from several starts and
    /// conditions on all rows with the best hyperparameters.
    pub fn fit(
        x: &[f64],
        d: usize,
        y: &[f64],
        feature_names: Vec<String>,
        opts: &FitOptions,
    ) -> Result<GpModel> {
        check_shape(x, d, y)?;
        if y.len() < 2 {
            return Err(Error::Usage("fitting needs at least 2 rows".into()));
        }
        if opts.restarts == 0 {
            return Err(Error::Usage("restarts must be at least 1".into()));
        }
        let standardization = Standardization::fit(x, d, y);
        let xs = standardization.apply(x);
        let yc: Vec<f64> = y.iter().map(|v| v - standardization.target_mean).collect();

        let rows = subsample(y.len(), opts.max_fit_rows);
        let mut x_fit = Vec::with_capacity(rows.len() * d);
        let mut y_fit = Vec::with_capacity(rows.len());
        for &r in &rows {
            x_fit.extend_from_slice(&xs[r * d..(r + 1) * d]);
            y_fit.push(yc[r]);
        }

        let y_scale = sd(&yc).max(1e-12);
        let init = match &opts.init {
            Some(h) => {
                h.validate()?;
                if h.n_features() != d {
                    return Err(Error::Usage(format!(
                        "initial hyperparameters have {} length-scales, data has {d} features",
                        h.n_features()
                    )));
                }
                h.clone()
            }
            None => Hyperparams::new(y_scale, vec![1.0; d], 0.1 * y_scale)?,
        };
        let base = init.to_log();
        let ln_y = y_scale.ln();
        let lower: Vec<f64> = std::iter::once(ln_y - 12.0)
            .chain(std::iter::repeat_n(1e-3f64.ln(), d))
            .chain(std::iter::once(ln_y - 16.0))
            .collect();
        let upper: Vec<f64> = std::iter::once(ln_y + 6.0)
            .chain(std::iter::repeat_n(1e4f64.ln(), d))
            .chain(std::iter::once(ln_y + 6.0))
            .collect();

        let spread = opts.perturbation.max(1.0).ln();
        let starts: Vec<Vec<f64>> = (0..opts.restarts)
            .map(|r| {
                if r == 0 {
                    return base.clone();
                }
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
                rng.set_stream(r as u64);
                base.iter()
                    .map(|t| {
                        if spread > 0.0 {
                            t + rng.random_range(-spread..spread)
                        } else {
                            *t
                        }
                    })
                    .collect()
            })
            .collect();

        let results: Vec<(RestartDiagnostics, Option<Vec<f64>>)> = starts
            .par_iter()
            .enumerate()
            .map(|(r, start)| {
                let objective = |theta: &[f64]| {
                    if theta
                        .iter()
                        .zip(lower.iter().zip(&upper))
                        .any(|(t, (lo, hi))| t < lo || t > hi)
                    {
                        return None;
                    }
                    let h = Hyperparams::from_log(theta);
                    log_marginal_likelihood(&x_fit, d, &y_fit, &h)
                        .ok()
                        .map(|(v, g)| (-v, g.into_iter().map(|v| -v).collect()))
                };
                match bfgs::minimize(objective, start, &opts.bfgs) {
                    Ok(res) => {
                        let converged = res.converged() || res.termination == Termination::LineSearch;
                        let diag = RestartDiagnostics {
                            restart: r,
                            start: start.clone(),
                            log_likelihood: Some(-res.f),
                            iterations: res.iterations,
                            evaluations: res.evaluations,
                            termination: Some(res.termination),
                            error: None,
                        };
                        (diag, converged.then_some(res.x))
                    }
                    Err(e) => (
                        RestartDiagnostics {
                            restart: r,
                            start: start.clone(),
                            log_likelihood: None,
                            iterations: 0,
                            evaluations: 1,
                            termination: None,
                            error: Some(e),
                        },
                        None,
                    ),
                }
            })
            .collect();

        let mut best: Option<(usize, f64)> = None;
        for (i, (diag, x)) in results.iter().enumerate() {
            if let (Some(ll), Some(_)) = (diag.log_likelihood, x) {
                if best.is_none_or(|(_, b)| ll > b) {
                    best = Some((i, ll));
                }
            }
        }
        let restarts: Vec<RestartDiagnostics> = results.iter().map(|(d, _)| d.clone()).collect();
        let Some((best_idx, _)) = best else {
            let diagnostics = FitDiagnostics {
                rows_used: rows.len(),
                best_restart: 0,
                restarts,
            };
            return Err(Error::Fit(format!("no restart converged: {diagnostics}")));
        };
        let theta = results[best_idx].1.clone().expect("best restart has a solution");
        let hyper = Hyperparams::from_log(&theta);
        let mut model = Self::build(feature_names, hyper, standardization, d, xs, yc)?;
        model.diagnostics = Some(FitDiagnostics {
            rows_used: rows.len(),
            best_restart: best_idx,
            restarts,
        });
        Ok(model)
    }

    /// Conditions on raw data with fixed hyperparameters, which are taken to
    /// be in the units produced by `standardization`.
    pub fn condition_with(
        x: &[f64],
        d: usize,
        y: &[f64],
        feature_names: Vec<String>,
        hyper: Hyperparams,
        standardization: Standardization,
    ) -> Result<GpModel> {
        check_shape(x, d, y)?;
        hyper.validate()?;
        if hyper.n_features() != d || standardization.width() != d {
            return Err(Error::Usage(format!(
                "hyperparameter width {} or standardization width {} differs from data width {d}",
                hyper.n_features(),
                standardization.width()
            )));
        }
        let xs = standardization.apply(x);
        let yc = y.iter().map(|v| v - standardization.target_mean).collect();
        Self::build(feature_names, hyper, standardization, d, xs, yc)
    }

    /// Conditions on raw data with fixed hyperparameters and no
    /// standardization.
    pub fn condition(x: &[f64], d: usize, y: &[f64], hyper: Hyperparams) -> Result<GpModel> {
        let names = (0..d).map(|k| format!("x{k}")).collect();
        Self::condition_with(x, d, y, names, hyper, Standardization::identity(d))
    }

    fn build(
        feature_names: Vec<String>,
        hyper: Hyperparams,
        standardization: Standardization,
        d: usize,
        x_train: Vec<f64>,
        y_train: Vec<f64>,
    ) -> Result<GpModel> {
        if feature_names.len() != d {
            return Err(Error::Usage(format!(
                "{} feature names for width {d}",
                feature_names.len()
            )));
        }
        let k = kernel_matrix(&x_train, d, &hyper);
        let factor = factorize(&k, hyper.sigma_n)?;
        let alpha = factor.chol.solve(&DVector::from_column_slice(&y_train));
        Ok(GpModel {
            feature_names,
            hyper,
            standardization,
            d,
            x_train,
            y_train,
            chol: factor.chol,
            alpha,
            jitter: factor.jitter,
            diagnostics: None,
        })
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn width(&self) -> usize {
        self.d
    }

    pub fn n_train(&self) -> usize {
        self.y_train.len()
    }

    /// Hyperparameters in standardized-input units.
    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hyper
    }

    /// Length-scales mapped back to raw feature units.
    pub fn raw_length_scales(&self) -> Vec<f64> {
        self.hyper
            .length_scales
            .iter()
            .zip(&self.standardization.feature_scale)
            .map(|(l, s)| l * s)
            .collect()
    }

    pub fn standardization(&self) -> &Standardization {
        &self.standardization
    }

    pub fn diagnostics(&self) -> Option<&FitDiagnostics> {
        self.diagnostics.as_ref()
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Max-norm residual of the weight solve relative to the target norm.
    pub fn solve_residual(&self) -> f64 {
        let mut k = kernel_matrix(&self.x_train, self.d, &self.hyper);
        let s2 = self.hyper.sigma_n.powi(2);
        for i in 0..k.nrows() {
            k[(i, i)] += s2;
        }
        let r = k * &self.alpha - DVector::from_column_slice(&self.y_train);
        let y_norm = self.y_train.iter().map(|v| v * v).sum::<f64>().sqrt();
        r.norm() / y_norm.max(f64::MIN_POSITIVE)
    }

    pub fn predict(&self, x_star: &[f64]) -> Result<Prediction> {
        if x_star.len() != self.d {
            return Err(Error::Usage(format!(
                "query has {} features, model expects {}",
                x_star.len(),
                self.d
            )));
        }
        let mut q = Vec::with_capacity(self.d);
        self.standardization.apply_row(x_star, &mut q);
        let ks = DVector::from_vec(cross_covariance(&self.x_train, self.d, &q, &self.hyper));
        let mean = ks.dot(&self.alpha) + self.standardization.target_mean;
        let v = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&ks)
            .ok_or(Error::Conditioning { jitter: self.jitter })?;
        let var_f = (self.hyper.sigma_f.powi(2) - v.norm_squared()).max(0.0);
        Ok(Prediction {
            mean,
            sd: (var_f + self.hyper.sigma_n.powi(2)).sqrt(),
        })
    }

    /// Row-major queries of width `self.width()`.
    pub fn predict_many(&self, x_star: &[f64]) -> Result<Vec<Prediction>> {
        if !x_star.len().is_multiple_of(self.d) {
            return Err(Error::Usage(format!(
                "{} query values is not a multiple of width {}",
                x_star.len(),
                self.d
            )));
        }
        x_star.chunks_exact(self.d).map(|row| self.predict(row)).collect()
    }

    fn data_hash(d: usize, x: &[f64], y: &[f64]) -> String {
        let mut h = Sha256::new();
        h.update((d as u64).to_le_bytes());
        for v in x.iter().chain(y) {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            feature_names: self.feature_names.clone(),
            hyperparams: self.hyper.clone(),
            raw_length_scales: self.raw_length_scales(),
            standardization: self.standardization.clone(),
            width: self.d,
            n_train: self.n_train(),
            data_sha256: Self::data_hash(self.d, &self.x_train, &self.y_train),
            x_train: self.x_train.clone(),
            y_train: self.y_train.clone(),
            diagnostics: self.diagnostics.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<GpModel> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.format != MODEL_FORMAT {
            return Err(Error::Data(format!("unknown model format {:?}", file.format)));
        }
        if file.x_train.len() != file.n_train * file.width || file.y_train.len() != file.n_train {
            return Err(Error::Data("model training data has inconsistent size".into()));
        }
        let hash = Self::data_hash(file.width, &file.x_train, &file.y_train);
        if hash != file.data_sha256 {
            return Err(Error::Data("model training data hash mismatch".into()));
        }
        let mut m = Self::build(
            file.feature_names,
            file.hyperparams,
            file.standardization,
            file.width,
            file.x_train,
            file.y_train,
        )?;
        m.diagnostics = file.diagnostics;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<GpModel> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

const MODEL_FORMAT: &str = "capfade-gp-1";

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    feature_names: Vec<String>,
    hyperparams: Hyperparams,
    raw_length_scales: Vec<f64>,
    standardization: Standardization,
    width: usize,
    n_train: usize,
    data_sha256: String,
    x_train: Vec<f64>,
    y_train: Vec<f64>,
    diagnostics: Option<FitDiagnostics>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand_distr::{Distribution, StandardNormal};

    fn random_problem(rng: &mut ChaCha8Rng, n: usize, d: usize) -> (Vec<f64>, Vec<f64>, Hyperparams) {
        let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h = Hyperparams::new(
            rng.random_range(0.3..2.0),
            (0..d).map(|_| rng.random_range(0.3..3.0)).collect(),
            rng.random_range(0.05..0.5),
        )
        .unwrap();
        (x, y, h)
    }

    fn oracle(x: &[f64], d: usize, y: &[f64], h: &Hyperparams, q: &[f64]) -> (f64, f64) {
        let n = y.len();
        let rows: Vec<&[f64]> = x.chunks(d).collect();
        let k = DMatrix::from_fn(n, n, |i, j| {
            matern52(rows[i], rows[j], h) + if i == j { h.sigma_n.powi(2) } else { 0.0 }
        });
        let kinv = k.try_inverse().unwrap();
        let ks = DVector::from_fn(n, |i, _| matern52(rows[i], q, h));
        let yv = DVector::from_column_slice(y);
        let mean = (ks.transpose() * &kinv * yv)[0];
        let var = h.sigma_f.powi(2) - (ks.transpose() * &kinv * &ks)[0] + h.sigma_n.powi(2);
        (mean, var.sqrt())
    }

    #[test]
    fn matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..60 {
            let n = rng.random_range(1..=10);
            let d = rng.random_range(1..=3);
            let (x, y, h) = random_problem(&mut rng, n, d);
            let m = GpModel::condition(&x, d, &y, h.clone()).unwrap();
            let q: Vec<f64> = (0..d).map(|_| rng.random_range(-2.5..2.5)).collect();
            let p = m.predict(&q).unwrap();
            let (mean, sd) = oracle(&x, d, &y, &h, &q);
            assert!((p.mean - mean).abs() < 1e-8);
            assert!((p.sd - sd).abs() < 1e-8);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let d = 3;
            let (x, y, h) = random_problem(&mut rng, 20, d);
            let theta = h.to_log();
            let (_, g) = log_marginal_likelihood(&x, d, &y, &h).unwrap();
            for i in 0..theta.len() {
                let mut tp = theta.clone();
                let mut tm = theta.clone();
                tp[i] += 1e-5;
                tm[i] -= 1e-5;
                let fp = log_marginal_likelihood(&x, d, &y, &Hyperparams::from_log(&tp)).unwrap().0;
                let fm = log_marginal_likelihood(&x, d, &y, &Hyperparams::from_log(&tm)).unwrap().0;
                let fd = (fp - fm) / 2e-5;
                let rel = (fd - g[i]).abs() / g[i].abs().max(1e-3);
                assert!(rel < 1e-4, "param {i}: analytic {} fd {fd}", g[i]);
            }
        }
    }

    #[test]
    fn noiseless_interpolation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (x, y, h) = random_problem(&mut rng, 8, 2);
        let h = Hyperparams::new(h.sigma_f, h.length_scales, 1e-8).unwrap();
        let m = GpModel::condition(&x, 2, &y, h).unwrap();
        for (row, t) in x.chunks(2).zip(&y) {
            assert!((m.predict(row).unwrap().mean - t).abs() < 1e-6);
        }
    }

    #[test]
    fn far_query_reverts_to_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (x, y, h) = random_problem(&mut rng, 8, 2);
        let m = GpModel::condition(&x, 2, &y, h.clone()).unwrap();
        let p = m.predict(&[1e3, -1e3]).unwrap();
        assert!((p.sd - h.prior_variance().sqrt()).abs() < 1e-6);
        assert!(p.mean.abs() < 1e-6);
    }

    #[test]
    fn width_mismatch_is_usage_error() {
        let h = Hyperparams::new(1.0, vec![1.0, 1.0], 0.1).unwrap();
        let m = GpModel::condition(&[0.0, 0.0, 1.0, 1.0], 2, &[0.0, 1.0], h).unwrap();
        assert!(matches!(m.predict(&[0.0]), Err(Error::Usage(_))));
    }

    #[test]
    fn solve_residual_is_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (x, y, h) = random_problem(&mut rng, 30, 2);
        let m = GpModel::condition(&x, 2, &y, h).unwrap();
        assert!(m.solve_residual() < 1e-8);
    }

    fn sample_gp(n: usize, seed: u64, h: &Hyperparams) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let k = kernel_matrix(&x, 1, h);
        let f = factorize(&k, h.sigma_n).unwrap();
        let z = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        let y = (f.chol.l() * z).iter().copied().collect();
        (x, y)
    }

    #[test]
    fn recovers_known_hyperparameters() {
        let truth = Hyperparams::new(1.0, vec![0.5], 0.1).unwrap();
        let (x, y) = sample_gp(200, 21, &truth);
        let opts = FitOptions {
            seed: 1,
            ..Default::default()
        };
        // identity standardization keeps the recovered values in sampling units
        let init = Hyperparams::new(1.0, vec![1.0], 0.1).unwrap();
        let std = Standardization::identity(1);
        let xs = std.apply(&x);
        let theta0 = init.to_log();
        let res = bfgs::minimize(
            |t| {
                log_marginal_likelihood(&xs, 1, &y, &Hyperparams::from_log(t))
                    .ok()
                    .map(|(v, g)| (-v, g.iter().map(|v| -v).collect()))
            },
            &theta0,
            &opts.bfgs,
        )
        .unwrap();
        let got = Hyperparams::from_log(&res.x);
        for (a, b) in got.to_log().iter().zip(truth.to_log()) {
            assert!((a - b).abs() < 0.3, "{got:?}");
        }
        // the full fit path, after undoing the standardization of x
        let m = GpModel::fit(&x, 1, &y, vec!["x".into()], &opts).unwrap();
        let ls = m.raw_length_scales()[0];
        assert!((ls.ln() - 0.5f64.ln()).abs() < 0.3, "{ls}");
        assert!((m.hyperparams().sigma_n.ln() - 0.1f64.ln()).abs() < 0.3);
    }

    #[test]
    fn duplicated_points_do_not_inflate_noise() {
        let truth = Hyperparams::new(1.0, vec![0.5], 0.1).unwrap();
        let (x, y) = sample_gp(80, 2, &truth);
        let opts = FitOptions::default();
        let single = GpModel::fit(&x, 1, &y, vec!["x".into()], &opts).unwrap();
        let x2: Vec<f64> = x.iter().chain(&x).copied().collect();
        let y2: Vec<f64> = y.iter().chain(&y).copied().collect();
        let double = GpModel::fit(&x2, 1, &y2, vec!["x".into()], &opts).unwrap();
        assert!(double.hyperparams().sigma_n <= 2.0 * single.hyperparams().sigma_n);
    }

    #[test]
    fn single_restart_is_deterministic() {
        let truth = Hyperparams::new(1.0, vec![0.5], 0.1).unwrap();
        let (x, y) = sample_gp(40, 9, &truth);
        let opts = FitOptions {
            restarts: 1,
            seed: 4,
            ..Default::default()
        };
        let a = GpModel::fit(&x, 1, &y, vec!["x".into()], &opts).unwrap();
        let b = GpModel::fit(&x, 1, &y, vec!["x".into()], &opts).unwrap();
        assert_eq!(a.hyperparams(), b.hyperparams());
    }

    #[test]
    fn json_round_trip_predicts_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (x, y, h) = random_problem(&mut rng, 12, 2);
        let std = Standardization::fit(&x, 2, &y);
        let m = GpModel::condition_with(&x, 2, &y, vec!["a".into(), "b".into()], h, std).unwrap();
        let back = GpModel::from_json(&m.to_json().unwrap()).unwrap();
        let q = [0.3, -0.7];
        assert_eq!(m.predict(&q).unwrap(), back.predict(&q).unwrap());
    }

    #[test]
    fn tampered_model_is_rejected() {
        let h = Hyperparams::new(1.0, vec![1.0], 0.1).unwrap();
        let m = GpModel::condition(&[0.0, 1.0], 1, &[0.0, 1.0], h).unwrap();
        let text = m.to_json().unwrap().replacen("\"y_train\": [\n    0.0", "\"y_train\": [\n    0.5", 1);
        assert!(GpModel::from_json(&text).is_err());
    }
}
