//! BFGS minimizer with Armijo backtracking.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Converged when the gradient infinity norm falls below this.
    pub grad_tol: f64,
    /// Converged when the relative objective change falls below this.
    pub f_tol: f64,
    /// Longest step allowed, Euclidean norm.
    pub max_step: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            max_iter: 200,
            grad_tol: 1e-5,
            f_tol: 1e-10,
            max_step: 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Gradient,
    ObjectiveChange,
    LineSearch,
    MaxIterations,
}

#[derive(Clone, Debug)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
}

impl BfgsResult {
    pub fn converged(&self) -> bool {
        matches!(
            self.termination,
            Termination::Gradient | Termination::ObjectiveChange
        )
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Minimizes `f`, which returns the value and gradient or `None` where the
/// objective is undefined. `None` at the start point is returned as `Err`.
pub fn minimize<F>(mut f: F, x0: &[f64], opts: &BfgsOptions) -> Result<BfgsResult, String>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut fx, mut g) = f(&x).ok_or_else(|| "objective undefined at start".to_string())?;
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err("objective not finite at start".into());
    }
    let mut evals = 1;
    let mut h = identity(n);
    let mut first = true;
    let mut termination = Termination::MaxIterations;
    let mut iter = 0;
    while iter < opts.max_iter {
        if inf_norm(&g) < opts.grad_tol {
            termination = Termination::Gradient;
            break;
        }
        let mut p: Vec<f64> = (0..n).map(|i| -dot(&h[i], &g)).collect();
        let mut slope = dot(&p, &g);
        if slope >= 0.0 {
            // lost descent; fall back to steepest descent
            h = identity(n);
            p = g.iter().map(|v| -v).collect();
            slope = dot(&p, &g);
        }
        let norm = dot(&p, &p).sqrt();
        let mut step = if first { (1.0f64).min(1.0 / inf_norm(&g).max(1e-12)) } else { 1.0 };
        if norm * step > opts.max_step {
            step = opts.max_step / norm;
        }
        let mut accepted = None;
        for _ in 0..40 {
            let xn: Vec<f64> = x.iter().zip(&p).map(|(a, b)| a + step * b).collect();
            evals += 1;
            if let Some((fn_, gn)) = f(&xn) {
                if fn_.is_finite() && gn.iter().all(|v| v.is_finite()) && fn_ <= fx + 1e-4 * step * slope {
                    accepted = Some((xn, fn_, gn));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else {
            termination = Termination::LineSearch;
            break;
        };
        iter += 1;
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let f_change = (fx - fn_).abs() / fx.abs().max(fn_.abs()).max(1.0);
        x = xn;
        fx = fn_;
        g = gn;
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if first {
                let scale = sy / dot(&y, &y);
                for (i, row) in h.iter_mut().enumerate() {
                    row[i] = scale;
                }
            }
            update_inverse(&mut h, &s, &y, sy);
        }
        first = false;
        if f_change < opts.f_tol {
            termination = Termination::ObjectiveChange;
            break;
        }
    }
    if termination == Termination::MaxIterations && inf_norm(&g) < opts.grad_tol {
        termination = Termination::Gradient;
    }
    Ok(BfgsResult {
        x,
        f: fx,
        grad: g,
        iterations: iter,
        evaluations: evals,
        termination,
    })
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

// H <- (I - rho s y^T) H (I - rho y s^T) + rho s s^T
fn update_inverse(h: &mut [Vec<f64>], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| dot(&h[i], y)).collect();
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i][j] += -rho * (s[i] * hy[j] + hy[i] * s[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_rosenbrock() {
        let rosen = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
            Some((f, g))
        };
        let opts = BfgsOptions {
            max_iter: 500,
            grad_tol: 1e-8,
            ..Default::default()
        };
        let r = minimize(rosen, &[-1.2, 1.0], &opts).unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-5 && (r.x[1] - 1.0).abs() < 1e-5, "{r:?}");
    }

    #[test]
    fn quadratic_converges_on_gradient() {
        let q = |x: &[f64]| Some((x[0] * x[0] + 10.0 * x[1] * x[1], vec![2.0 * x[0], 20.0 * x[1]]));
        let r = minimize(q, &[3.0, -2.0], &BfgsOptions::default()).unwrap();
        assert!(r.converged());
        assert!(r.f < 1e-9);
    }

    #[test]
    fn undefined_start_is_error() {
        assert!(minimize(|_| None, &[0.0], &BfgsOptions::default()).is_err());
    }
}
