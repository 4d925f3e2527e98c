use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::kernel::{kernel_matrix, matern52_radial_factor, Hyperparams};
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// After a failed factorization, jitter starts at this fraction of the mean
/// diagonal...
const JITTER_START: f64 = 1e-10;
/// ...and grows by 10x up to this fraction.
const JITTER_MAX: f64 = 1e-4;

/// Cholesky factor of `K + (sigma_n^2 + jitter) I`.
pub(crate) struct Factor {
    pub chol: Cholesky<f64, Dyn>,
    pub jitter: f64,
}

/// Factorizes `k_signal + sigma_n^2 I`, escalating diagonal jitter on failure.
pub(crate) fn factorize(k_signal: &DMatrix<f64>, sigma_n: f64) -> Result<Factor> {
    let n = k_signal.nrows();
    let noise = sigma_n * sigma_n;
    let mean_diag = k_signal.trace() / n as f64 + noise;
    // first attempt without jitter
    let mut scale = 0.0;
    loop {
        let jitter = scale * mean_diag;
        let mut m = k_signal.clone();
        for i in 0..n {
            m[(i, i)] += noise + jitter;
        }
        if let Some(chol) = Cholesky::new(m) {
            return Ok(Factor { chol, jitter });
        }
        if scale >= JITTER_MAX * (1.0 - 1e-9) {
            return Err(Error::Conditioning { jitter });
        }
        scale = if scale == 0.0 { JITTER_START } else { scale * 10.0 };
    }
}

/// Log marginal likelihood of centered targets `y` at row-major inputs `x`
/// (width `d`), with its gradient w.r.t. `hyper.to_log()`.
pub fn log_marginal_likelihood(x: &[f64], d: usize, y: &[f64], hyper: &Hyperparams) -> Result<(f64, Vec<f64>)> {
    let n = y.len();
    if n == 0 || x.len() != n * d || hyper.n_features() != d {
        return Err(Error::Usage(format!(
            "likelihood inputs: {} values for {n} rows of width {d}, {} length-scales",
            x.len(),
            hyper.n_features()
        )));
    }
    let k = kernel_matrix(x, d, hyper);
    let factor = factorize(&k, hyper.sigma_n)?;
    let yv = DVector::from_column_slice(y);
    let alpha = factor.chol.solve(&yv);
    let l = factor.chol.l_dirty();
    let log_det_half: f64 = (0..n).map(|i| l[(i, i)].ln()).sum();
    let value = -0.5 * yv.dot(&alpha) - log_det_half - 0.5 * n as f64 * LN_2PI;

    // W = alpha alpha^T - K^{-1}; dL/dtheta = 1/2 tr(W dK/dtheta)
    let l_inv = factor
        .chol
        .l()
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or(Error::Conditioning {
            jitter: factor.jitter,
        })?;
    let mut w = l_inv.tr_mul(&l_inv);
    w.ger(1.0, &alpha, &alpha, -1.0);

    let sf2 = hyper.sigma_f * hyper.sigma_f;
    let inv_l2: Vec<f64> = hyper.length_scales.iter().map(|l| 1.0 / (l * l)).collect();
    let mut grad = vec![0.0; d + 2];
    let mut diag_sum = 0.0;
    let mut row_acc = vec![0.0; d];
    for i in 0..n {
        let wii = w[(i, i)];
        diag_sum += wii;
        grad[0] += wii * sf2;
        let xi = &x[i * d..(i + 1) * d];
        for j in 0..i {
            let wij = w[(i, j)];
            let xj = &x[j * d..(j + 1) * d];
            let mut r2 = 0.0;
            for kk in 0..d {
                let z = xi[kk] - xj[kk];
                r2 += z * z * inv_l2[kk];
            }
            // off-diagonal pairs count twice
            grad[0] += 2.0 * wij * k[(i, j)];
            let g = 2.0 * wij * matern52_radial_factor(r2.sqrt(), hyper.sigma_f);
            for kk in 0..d {
                let z = xi[kk] - xj[kk];
                row_acc[kk] += g * z * z;
            }
        }
    }
    for kk in 0..d {
        grad[1 + kk] = 0.5 * row_acc[kk] * inv_l2[kk];
    }
    // d K / d ln sigma_n = 2 sigma_n^2 I
    grad[d + 1] = diag_sum * hyper.sigma_n * hyper.sigma_n;
    Ok((value, grad))
}
