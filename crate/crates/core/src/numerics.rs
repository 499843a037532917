//! Small numerical helpers shared across modules: finite-difference steps,
//! Monte Carlo summaries and a least-squares line fit.

use serde::{Deserialize, Serialize};

/// Central-difference step used by every derivative fallback.
#[inline]
pub fn fd_step(x: f64) -> f64 {
    1e-5 * (1.0 + x.abs())
}

/// Central difference of a scalar function of one variable.
pub fn central_diff(f: impl Fn(f64) -> f64, x: f64) -> f64 {
    let h = fd_step(x);
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Gradient of `f` at `x` by central differences, one coordinate at a time.
pub fn central_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], out: &mut [f64]) {
    let mut probe = x.to_vec();
    for k in 0..x.len() {
        let h = fd_step(x[k]);
        probe[k] = x[k] + h;
        let up = f(&probe);
        probe[k] = x[k] - h;
        let down = f(&probe);
        probe[k] = x[k];
        out[k] = (up - down) / (2.0 * h);
    }
}

/// Hessian of `f` at `x` by central differences of the gradient handle,
/// symmetrized. Row-major `n x n`.
pub fn central_hessian(grad: impl Fn(&[f64], &mut [f64]), x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut hess = vec![0.0; n * n];
    let mut probe = x.to_vec();
    let mut up = vec![0.0; n];
    let mut down = vec![0.0; n];
    for k in 0..n {
        let h = fd_step(x[k]);
        probe[k] = x[k] + h;
        grad(&probe, &mut up);
        probe[k] = x[k] - h;
        grad(&probe, &mut down);
        probe[k] = x[k];
        for r in 0..n {
            hess[r * n + k] = (up[r] - down[r]) / (2.0 * h);
        }
    }
    for r in 0..n {
        for c in (r + 1)..n {
            let avg = 0.5 * (hess[r * n + c] + hess[c * n + r]);
            hess[r * n + c] = avg;
            hess[c * n + r] = avg;
        }
    }
    hess
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Largest singular value of a small row-major matrix (power iteration on
/// `AᵀA`).
pub fn operator_norm(a: &[f64], rows: usize, cols: usize) -> f64 {
    let m = nalgebra::DMatrix::from_row_slice(rows, cols, a);
    m.singular_values().iter().fold(0.0_f64, |acc, s| acc.max(*s))
}

/// A Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_err: f64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Estimate {
            value,
            std_err: 0.0,
        }
    }

    /// Sample mean and the usual `s / sqrt(n)` standard error.
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len();
        if n == 0 {
            return Estimate::exact(0.0);
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        if n == 1 {
            return Estimate::exact(mean);
        }
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Estimate {
            value: mean,
            std_err: (var / n as f64).sqrt(),
        }
    }

    /// Mean over all samples with a batch-means standard error over
    /// `batches` contiguous batches. Falls back to per-sample errors when
    /// there are fewer samples than batches.
    pub fn batch_means(samples: &[f64], batches: usize) -> Self {
        let n = samples.len();
        if n < batches.max(2) || batches < 2 {
            return Self::from_samples(samples);
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        let mut means = Vec::with_capacity(batches);
        for b in 0..batches {
            let lo = b * n / batches;
            let hi = (b + 1) * n / batches;
            let chunk = &samples[lo..hi];
            means.push(chunk.iter().sum::<f64>() / chunk.len() as f64);
        }
        let se = Self::from_samples(&means).std_err;
        Estimate {
            value: mean,
            std_err: se,
        }
    }

    pub fn minus(self, other: Estimate) -> Estimate {
        Estimate {
            value: self.value - other.value,
            std_err: self.std_err.hypot(other.std_err),
        }
    }
}

/// Number of batches used for batch-means standard errors.
pub const BATCHES: usize = 20;

/// Least-squares slope and intercept of `y` on `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_diff_of_cubic() {
        let d = central_diff(|x| x * x * x, 2.0);
        assert!((d - 12.0).abs() < 1e-8);
    }

    #[test]
    fn batch_means_of_constant_has_zero_error() {
        let est = Estimate::batch_means(&[3.0; 100], BATCHES);
        assert_eq!(est.value, 3.0);
        assert_eq!(est.std_err, 0.0);
    }

    #[test]
    fn fit_recovers_line() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| -0.5 * v + 2.0).collect();
        let (s, c) = linear_fit(&x, &y).unwrap();
        assert!((s + 0.5).abs() < 1e-12 && (c - 2.0).abs() < 1e-12);
        assert!(linear_fit(&[1.0], &[1.0]).is_none());
    }

    #[test]
    fn operator_norm_of_diagonal() {
        assert!((operator_norm(&[3.0, 0.0, 0.0, -4.0], 2, 2) - 4.0).abs() < 1e-12);
    }
}
