//! Independent reference computations shared by the integration tests.
#![allow(dead_code, clippy::needless_range_loop)]

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

/// `E[r⁻²]` under the radial marginal `∝ r exp(-10(r-1)² - 1/r)` (β = 1).
pub fn lemon_inverse_r2() -> f64 {
    let n = 200_000;
    let (lo, hi) = (1e-6, 4.0);
    let h = (hi - lo) / n as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..=n {
        let r = lo + h * i as f64;
        let w = if i == 0 || i == n { 0.5 } else { 1.0 };
        let rho = r * (-(10.0 * (r - 1.0).powi(2) + 1.0 / r)).exp();
        num += w * rho / (r * r);
        den += w * rho;
    }
    num / den
}

/// Implied time scales of the one-dimensional reversible generator with
/// constant diffusion `a` and potential `F` on `(-π, π)`, from a
/// finite-volume discretization on `cells` cells (cells with
/// `F > min F + 50` dropped).
pub fn finite_volume_timescales(f: impl Fn(f64) -> f64, a: f64, cells: usize, count: usize) -> Vec<f64> {
    let h = 2.0 * PI / cells as f64;
    let centers: Vec<f64> = (0..cells).map(|i| -PI + h * (i as f64 + 0.5)).collect();
    let vals: Vec<f64> = centers.iter().map(|&x| f(x)).collect();
    let fmin = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let keep: Vec<f64> = vals.into_iter().filter(|v| v.is_finite() && *v < fmin + 50.0).collect();
    let n = keep.len();
    let k = 0.5 * a / (h * h);
    // Symmetrized rate matrix is tridiagonal with off-diagonal k.
    let diag: Vec<f64> = (0..n)
        .map(|i| {
            let mut out = 0.0;
            if i > 0 {
                out += k * (-(keep[i - 1] - keep[i]) / 2.0).exp();
            }
            if i + 1 < n {
                out += k * (-(keep[i + 1] - keep[i]) / 2.0).exp();
            }
            -out
        })
        .collect();
    // number of eigenvalues strictly greater than x (Sturm sequence)
    let above = |x: f64| {
        let mut count = 0;
        let mut q = 1.0f64;
        for i in 0..n {
            let off = if i == 0 { 0.0 } else { k * k / q };
            q = (x - diag[i]) - off;
            if q == 0.0 {
                q = 1e-300;
            }
            if q < 0.0 {
                count += 1;
            }
        }
        count
    };
    let lo0 = diag.iter().copied().fold(0.0, f64::min) - 2.0 * k;
    let mut out = Vec::with_capacity(count);
    for idx in 1..=count {
        // eigenvalue number idx (0-based, descending)
        let (mut lo, mut hi) = (lo0, 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if above(mid) > idx {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        out.push(-1.0 / (0.5 * (lo + hi)));
    }
    out
}

/// Gauss–Hermite-free reference Gram matrix of monomials ≤ `deg` under the
/// uniform density on `[lo, hi]`.
pub fn uniform_monomial_gram(lo: f64, hi: f64, deg: usize) -> DMatrix<f64> {
    DMatrix::from_fn(deg + 1, deg + 1, |i, j| {
        let p = (i + j + 1) as f64;
        (hi.powf(p) - lo.powf(p)) / (p * (hi - lo))
    })
}

pub fn rms(v: &DVector<f64>) -> f64 {
    (v.norm_squared() / v.len() as f64).sqrt()
}

/// Pearson correlation of two equally long series.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}
