use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SQRT5: f64 = 2.236_067_977_499_79;

/// Matern 5/2 ARD hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Signal magnitude, target units.
    pub sigma_f: f64,
    /// One length-scale per input feature.
    pub length_scales: Vec<f64>,
    /// Observation noise standard deviation, target units.
    pub sigma_n: f64,
}

impl Hyperparams {
    pub fn new(sigma_f: f64, length_scales: Vec<f64>, sigma_n: f64) -> Result<Self> {
        let h = Hyperparams {
            sigma_f,
            length_scales,
            sigma_n,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.sigma_f) || !ok(self.sigma_n) || !self.length_scales.iter().all(|&l| ok(l)) {
            return Err(Error::Usage(format!(
                "hyperparameters must be finite and positive: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn n_features(&self) -> usize {
        self.length_scales.len()
    }

    /// Number of free parameters: sigma_f, each length-scale, sigma_n.
    pub fn n_params(&self) -> usize {
        self.length_scales.len() + 2
    }

    /// `[ln sigma_f, ln l_1, .., ln l_d, ln sigma_n]`.
    pub fn to_log(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        v.push(self.sigma_f.ln());
        v.extend(self.length_scales.iter().map(|l| l.ln()));
        v.push(self.sigma_n.ln());
        v
    }

    pub fn from_log(theta: &[f64]) -> Self {
        let d = theta.len() - 2;
        Hyperparams {
            sigma_f: theta[0].exp(),
            length_scales: theta[1..=d].iter().map(|t| t.exp()).collect(),
            sigma_n: theta[d + 1].exp(),
        }
    }

    /// Prior variance of a noisy observation.
    pub fn prior_variance(&self) -> f64 {
        self.sigma_f.powi(2) + self.sigma_n.powi(2)
    }
}

/// ARD distance `sqrt(sum_k (a_k - b_k)^2 / l_k^2)`.
pub fn scaled_distance(a: &[f64], b: &[f64], length_scales: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(length_scales)
        .map(|((x, y), l)| ((x - y) / l).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// `sigma_f^2 (1 + sqrt5 r + 5/3 r^2) exp(-sqrt5 r)`.
pub fn matern52_of_r(r: f64, sigma_f: f64) -> f64 {
    let s = SQRT5 * r;
    sigma_f * sigma_f * (1.0 + s + s * s / 3.0) * (-s).exp()
}

/// Matern 5/2 covariance between two feature vectors.
pub fn matern52(a: &[f64], b: &[f64], hyper: &Hyperparams) -> f64 {
    debug_assert_eq!(a.len(), hyper.length_scales.len());
    matern52_of_r(scaled_distance(a, b, &hyper.length_scales), hyper.sigma_f)
}

/// `-(dk/dr) / r`, finite at `r = 0`; the length-scale derivative is this
/// times `d_k^2 / l_k^2`.
pub(crate) fn matern52_radial_factor(r: f64, sigma_f: f64) -> f64 {
    let s = SQRT5 * r;
    sigma_f * sigma_f * (5.0 / 3.0) * (1.0 + s) * (-s).exp()
}

/// Noise-free covariance matrix over row-major inputs of width `d`.
pub(crate) fn kernel_matrix(x: &[f64], d: usize, hyper: &Hyperparams) -> DMatrix<f64> {
    let n = x.len() / d;
    let mut k = DMatrix::<f64>::zeros(n, n);
    let sf2 = hyper.sigma_f.powi(2);
    let inv_l: Vec<f64> = hyper.length_scales.iter().map(|l| 1.0 / l).collect();
    for i in 0..n {
        k[(i, i)] = sf2;
        let xi = &x[i * d..(i + 1) * d];
        for j in 0..i {
            let xj = &x[j * d..(j + 1) * d];
            let mut r2 = 0.0;
            for kk in 0..d {
                let z = (xi[kk] - xj[kk]) * inv_l[kk];
                r2 += z * z;
            }
            let v = matern52_of_r(r2.sqrt(), hyper.sigma_f);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Cross-covariance between one query and every row of `x`.
pub(crate) fn cross_covariance(x: &[f64], d: usize, query: &[f64], hyper: &Hyperparams) -> Vec<f64> {
    x.chunks_exact(d)
        .map(|row| matern52(row, query, hyper))
        .collect()
}
