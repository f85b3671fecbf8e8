//! Dense linear-algebra kernels shared by the estimators.
//!
//! nalgebra supplies the factorizations (QR, SVD, real Schur, symmetric
//! eigen, Padé matrix exponential). The routines here add what it lacks:
//! compressed least squares, complex eigenvectors of nonsymmetric matrices,
//! the principal matrix logarithm, nonnegative least squares and a few
//! projections.

use nalgebra::{Complex, DMatrix, DVector, Schur, SymmetricEigen, SVD};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;
pub type C64 = Complex<f64>;
pub type CMat = DMatrix<C64>;

/// Upper-triangular factor of the augmented least-squares system `[design | rhs]`.
///
/// For a tall system `design * x ≈ rhs`, the minimizers coincide with those of
/// `r11 * x ≈ r12`, so the compressed form is all a solver ever needs.
#[derive(Debug, Clone)]
pub struct CompressedLstsq {
    pub r11: Mat,
    pub r12: Mat,
    pub rows: usize,
}

impl CompressedLstsq {
    /// Compresses a single tall system.
    pub fn from_dense(design: &Mat, rhs: &Mat) -> Self {
        assert_eq!(design.nrows(), rhs.nrows());
        let r = augmented_r(design, rhs);
        Self::from_r(r, design.ncols(), design.nrows())
    }

    /// Combines per-chunk triangular factors (in the given order) into one.
    pub fn from_chunk_factors(factors: Vec<Mat>, n: usize, rows: usize) -> Self {
        let width = factors.first().map(|f| f.ncols()).unwrap_or(n);
        let total: usize = factors.iter().map(|f| f.nrows()).sum();
        let mut stacked = Mat::zeros(total.max(1), width);
        let mut offset = 0;
        for f in &factors {
            stacked.view_mut((offset, 0), (f.nrows(), width)).copy_from(f);
            offset += f.nrows();
        }
        let r = if factors.len() == 1 { stacked } else { stacked.qr().r() };
        Self::from_r(r, n, rows)
    }

    fn from_r(r: Mat, n: usize, rows: usize) -> Self {
        let width = r.ncols();
        let mut full = Mat::zeros(width, width);
        let k = r.nrows().min(width);
        full.view_mut((0, 0), (k, width)).copy_from(&r.rows(0, k));
        let r11 = full.view((0, 0), (n, n)).into_owned();
        let r12 = full.view((0, n), (n, width - n)).into_owned();
        CompressedLstsq { r11, r12, rows }
    }

    /// Minimum-norm solution with singular values of `r11` below
    /// `rel_cutoff * max` discarded. Returns the solution and the retained rank.
    pub fn solve(&self, rel_cutoff: f64) -> Result<(Mat, usize)> {
        solve_truncated(&self.r11, &self.r12, rel_cutoff)
    }

    /// Same as [`solve`](Self::solve) for an arbitrary right-hand side already
    /// expressed in the compressed coordinates.
    pub fn solve_rhs(&self, rhs: &Mat, rel_cutoff: f64) -> Result<(Mat, usize)> {
        solve_truncated(&self.r11, rhs, rel_cutoff)
    }

    pub fn singular_values(&self) -> Vector {
        SVD::new(self.r11.clone(), false, false).singular_values
    }
}

/// R factor of `[a | b]`, at most `ncols(a) + ncols(b)` rows.
pub fn augmented_r(a: &Mat, b: &Mat) -> Mat {
    let mut aug = Mat::zeros(a.nrows(), a.ncols() + b.ncols());
    aug.view_mut((0, 0), (a.nrows(), a.ncols())).copy_from(a);
    aug.view_mut((0, a.ncols()), (b.nrows(), b.ncols())).copy_from(b);
    aug.qr().r()
}

fn solve_truncated(a: &Mat, rhs: &Mat, rel_cutoff: f64) -> Result<(Mat, usize)> {
    let svd = SVD::try_new(a.clone(), true, true, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numerical("SVD did not converge".into()))?;
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let smax = svd.singular_values.max();
    let tol = rel_cutoff * smax;
    let mut tmp = u.transpose() * rhs;
    let mut rank = 0;
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > tol && s > 0.0 {
            rank += 1;
            tmp.row_mut(i).scale_mut(1.0 / s);
        } else {
            tmp.row_mut(i).fill(0.0);
        }
    }
    Ok((v_t.transpose() * tmp, rank))
}

/// Moore–Penrose pseudoinverse with a relative singular-value cutoff.
pub fn pinv(a: &Mat, rel_cutoff: f64) -> Result<(Mat, usize)> {
    let eye = Mat::identity(a.nrows(), a.nrows());
    solve_truncated(a, &eye, rel_cutoff)
}

/// Complex Schur form `a = u t uᴴ` with `t` upper triangular.
///
/// The real Schur form from nalgebra is converted by annihilating the
/// subdiagonal of each 2×2 block with a complex rotation.
pub fn complex_schur(a: &Mat) -> Result<(CMat, CMat)> {
    let n = a.nrows();
    if n == 0 {
        return Ok((CMat::zeros(0, 0), CMat::zeros(0, 0)));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("matrix has non-finite entries".into()));
    }
    let schur = Schur::try_new(a.clone(), f64::EPSILON, 1000 * n.max(10))
        .ok_or_else(|| Error::Numerical(format!("Schur iteration did not converge (n = {n})")))?;
    let (q, t) = schur.unpack();
    let mut u = q.map(|v| C64::new(v, 0.0));
    let mut t = t.map(|v| C64::new(v, 0.0));
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));

    let mut m = n - 1;
    while m >= 1 {
        let sub = t[(m, m - 1)].re;
        let diag = t[(m, m)].re.abs() + t[(m - 1, m - 1)].re.abs();
        if sub != 0.0 && sub.abs() > f64::EPSILON * diag.max(scale) * 1e-3 {
            let (a11, a12) = (t[(m - 1, m - 1)].re, t[(m - 1, m)].re);
            let (a21, a22) = (t[(m, m - 1)].re, t[(m, m)].re);
            let p = 0.5 * (a11 + a22);
            let disc = 0.25 * (a11 - a22) * (a11 - a22) + a12 * a21;
            let (l1, l2) = if disc < 0.0 {
                let q = (-disc).sqrt();
                (C64::new(p, q), C64::new(p, -q))
            } else {
                let q = disc.sqrt();
                (C64::new(p + q, 0.0), C64::new(p - q, 0.0))
            };
            let mu = l1 - C64::new(a22, 0.0);
            let r = (mu.norm_sqr() + a21 * a21).sqrt();
            let c = mu / r;
            let s = C64::new(a21 / r, 0.0);
            // G = [c̄ s; -s c]
            for j in (m - 1)..n {
                let x = t[(m - 1, j)];
                let y = t[(m, j)];
                t[(m - 1, j)] = c.conj() * x + s * y;
                t[(m, j)] = -s * x + c * y;
            }
            // right-multiply by Gᴴ = [c s̄... ] i.e. columns (m-1, m)
            for i in 0..=m {
                let x = t[(i, m - 1)];
                let y = t[(i, m)];
                t[(i, m - 1)] = x * c + y * s;
                t[(i, m)] = -x * s + y * c.conj();
            }
            for i in 0..n {
                let x = u[(i, m - 1)];
                let y = u[(i, m)];
                u[(i, m - 1)] = x * c + y * s;
                u[(i, m)] = -x * s + y * c.conj();
            }
            t[(m, m - 1)] = C64::new(0.0, 0.0);
            t[(m - 1, m - 1)] = l1;
            t[(m, m)] = l2;
            if m < 2 {
                break;
            }
            m -= 2;
        } else {
            t[(m, m - 1)] = C64::new(0.0, 0.0);
            m -= 1;
        }
    }
    Ok((u, t))
}

/// Eigenvalues and (unnormalized) right eigenvectors of a real square matrix.
#[derive(Debug, Clone)]
pub struct Eigen {
    pub values: Vec<C64>,
    pub vectors: CMat,
}

/// Nonsymmetric eigendecomposition via the complex Schur form and
/// back-substitution on the triangular factor.
///
/// Eigenvectors of the triangular factor form a unit upper-triangular
/// matrix, so the returned eigenvector matrix is always nonsingular, even
/// for clustered eigenvalues.
pub fn eig(a: &Mat) -> Result<Eigen> {
    let n = a.nrows();
    let (u, t) = complex_schur(a)?;
    let tnorm = (0..n)
        .map(|j| (0..n).map(|i| t[(i, j)].norm()).sum::<f64>())
        .fold(0.0f64, f64::max);
    let smin = (f64::EPSILON * tnorm).max(f64::MIN_POSITIVE);
    let mut x = CMat::zeros(n, n);
    for k in 0..n {
        let lambda = t[(k, k)];
        x[(k, k)] = C64::new(1.0, 0.0);
        for i in (0..k).rev() {
            let mut s = C64::new(0.0, 0.0);
            for j in (i + 1)..=k {
                s += t[(i, j)] * x[(j, k)];
            }
            let mut denom = t[(i, i)] - lambda;
            if denom.norm() < smin {
                denom = C64::new(smin, 0.0);
            }
            x[(i, k)] = -s / denom;
            let mag = x[(i, k)].norm();
            if mag > 1e150 {
                let inv = 1.0 / mag;
                for j in i..=k {
                    x[(j, k)] *= inv;
                }
            }
        }
    }
    let vectors = u * x;
    let values = (0..n).map(|k| t[(k, k)]).collect();
    Ok(Eigen { values, vectors })
}

/// Matrix exponential (scaling and squaring with Padé approximants).
pub fn expm(a: &Mat) -> Mat {
    if a.nrows() == 0 {
        return a.clone();
    }
    a.exp()
}

/// Principal matrix logarithm.
///
/// Inverse scaling and squaring on the complex Schur factor: repeated
/// triangular square roots bring the spectrum close to 1, then an 8-point
/// Gauss–Legendre rule (the diagonal Padé approximant) evaluates
/// `log(I + X)`.
pub fn logm(a: &Mat) -> Result<Mat> {
    let n = a.nrows();
    if n == 0 {
        return Ok(a.clone());
    }
    let (u, mut t) = complex_schur(a)?;
    for k in 0..n {
        let z = t[(k, k)];
        let tol = 1e-14 * z.norm().max(1.0);
        if z.norm() == 0.0 || (z.re <= 0.0 && z.im.abs() <= tol) {
            return Err(Error::LogBranch { re: z.re, im: z.im });
        }
    }
    let eye = CMat::identity(n, n);
    let mut squarings = 0u32;
    loop {
        let dist = one_norm(&(&t - &eye));
        if dist <= 0.25 {
            break;
        }
        if squarings >= 64 {
            return Err(Error::Numerical("matrix logarithm: square roots did not converge".into()));
        }
        t = sqrtm_upper(&t);
        squarings += 1;
    }
    let x = &t - &eye;
    let (nodes, weights) = gauss_legendre(8);
    let mut acc = CMat::zeros(n, n);
    for (s, w) in nodes.iter().zip(weights.iter()) {
        // map [-1,1] to [0,1]
        let s01 = 0.5 * (s + 1.0);
        let w01 = 0.5 * w;
        let lhs = &eye + &x * C64::new(s01, 0.0);
        let y = lhs
            .solve_upper_triangular(&x)
            .ok_or_else(|| Error::Numerical("singular factor in logarithm".into()))?;
        acc += y * C64::new(w01, 0.0);
    }
    acc *= C64::new(2f64.powi(squarings as i32), 0.0);
    let full = &u * acc * u.adjoint();
    let imag = full.iter().fold(0.0f64, |m, z| m.max(z.im.abs()));
    let real_scale = full.iter().fold(1.0f64, |m, z| m.max(z.re.abs()));
    if imag > 1e-8 * real_scale {
        return Err(Error::Numerical(format!(
            "matrix logarithm has a non-negligible imaginary part ({imag:.3e})"
        )));
    }
    Ok(full.map(|z| z.re))
}

fn one_norm(m: &CMat) -> f64 {
    (0..m.ncols())
        .map(|j| m.column(j).iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Principal square root of an upper-triangular matrix (Björck–Hammarling).
fn sqrtm_upper(t: &CMat) -> CMat {
    let n = t.nrows();
    let mut r = CMat::zeros(n, n);
    for j in 0..n {
        r[(j, j)] = t[(j, j)].sqrt();
        for i in (0..j).rev() {
            let mut s = t[(i, j)];
            for k in (i + 1)..j {
                s -= r[(i, k)] * r[(k, j)];
            }
            r[(i, j)] = s / (r[(i, i)] + r[(j, j)]);
        }
    }
    r
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        if d != 0.0 {
            dp = d;
        }
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    // ascending order
    nodes.reverse();
    weights.reverse();
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Nonnegative least squares `min ‖a x − b‖, x ≥ 0` (Lawson–Hanson active set).
pub fn nnls(a: &Mat, b: &Vector, max_iter: usize) -> Result<Vector> {
    let n = a.ncols();
    let mut x = Vector::zeros(n);
    let mut passive = vec![false; n];
    let tol = 10.0 * f64::EPSILON * a.norm() * (a.nrows().max(n) as f64);
    let mut iter = 0;
    loop {
        let w = a.transpose() * (b - a * &x);
        let candidate = (0..n)
            .filter(|&j| !passive[j] && w[j] > tol)
            .max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let Some(j) = candidate else { break };
        passive[j] = true;
        loop {
            iter += 1;
            if iter > max_iter {
                return Err(Error::Optimization("nonnegative least squares did not converge".into()));
            }
            let idx: Vec<usize> = (0..n).filter(|&k| passive[k]).collect();
            let sub = a.select_columns(idx.iter());
            let bm = Mat::from_column_slice(b.len(), 1, b.as_slice());
            let (z_sub, _) = solve_truncated(&sub, &bm, 1e-13)?;
            let mut z = Vector::zeros(n);
            for (k, &col) in idx.iter().enumerate() {
                z[col] = z_sub[(k, 0)];
            }
            if idx.iter().all(|&k| z[k] > 0.0) {
                x = z;
                break;
            }
            let mut alpha = f64::INFINITY;
            for &k in &idx {
                if z[k] <= 0.0 {
                    let denom = x[k] - z[k];
                    if denom > 0.0 {
                        alpha = alpha.min(x[k] / denom);
                    }
                }
            }
            if !alpha.is_finite() {
                alpha = 0.0;
            }
            for k in 0..n {
                x[k] += alpha * (z[k] - x[k]);
            }
            for &k in &idx {
                if x[k] <= tol.max(1e-300) {
                    x[k] = 0.0;
                    passive[k] = false;
                }
            }
        }
    }
    Ok(x)
}

/// Symmetric part with negative eigenvalues set to zero.
pub fn clip_psd(a: &Mat) -> Mat {
    let sym = 0.5 * (a + a.transpose());
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0));
    &eig.eigenvectors * Mat::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Lower-triangular factor `l` with `l lᵀ = a` for symmetric positive
/// semidefinite `a`. Columns whose pivot vanishes are set to zero.
pub fn psd_cholesky(a: &Mat) -> Mat {
    let n = a.nrows();
    let mut l = Mat::zeros(n, n);
    let scale = (0..n).map(|i| a[(i, i)].abs()).fold(0.0, f64::max);
    let tiny = 1e-14 * scale.max(f64::MIN_POSITIVE);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= tiny {
            continue;
        }
        let pivot = d.sqrt();
        l[(j, j)] = pivot;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / pivot;
        }
    }
    l
}

/// Euclidean projection onto `{ lo ≤ v₁ ≤ v₂ ≤ … ≤ v_p ≤ hi }`
/// (pool-adjacent-violators followed by clipping).
pub fn project_monotone(v: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(v.len());
    for &x in v {
        blocks.push((x, 1));
        while blocks.len() > 1 {
            let (m2, c2) = blocks[blocks.len() - 1];
            let (m1, c1) = blocks[blocks.len() - 2];
            if m1 <= m2 {
                break;
            }
            blocks.pop();
            let c = c1 + c2;
            let last = blocks.len() - 1;
            blocks[last] = ((m1 * c1 as f64 + m2 * c2 as f64) / c as f64, c);
        }
    }
    let mut out = Vec::with_capacity(v.len());
    for (m, c) in blocks {
        out.extend(std::iter::repeat_n(m.clamp(lo, hi), c));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn eig_of_rotation_block_is_conjugate_pair() {
        let a = Mat::from_row_slice(3, 3, &[0.0, -2.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0, -1.0]);
        let e = eig(&a).unwrap();
        let mut ims: Vec<f64> = e.values.iter().map(|z| z.im).collect();
        ims.sort_by(f64::total_cmp);
        assert_abs_diff_eq!(ims[0], -2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ims[2], 2.0, epsilon = 1e-12);
        let ac = a.map(|v| C64::new(v, 0.0));
        for k in 0..3 {
            let v = e.vectors.column(k);
            let r = &ac * v - v * e.values[k];
            assert!(r.norm() < 1e-12 * v.norm());
        }
    }

    #[test]
    fn eig_repeated_eigenvalue_gives_independent_vectors() {
        let a = Mat::from_diagonal(&Vector::from_vec(vec![2.0, 2.0, -1.0]));
        let e = eig(&a).unwrap();
        assert!(e.vectors.clone().determinant().norm() > 1e-8);
    }

    #[test]
    fn logm_of_identity_is_zero() {
        let l = logm(&Mat::identity(4, 4)).unwrap();
        assert!(l.norm() < 1e-14);
    }

    #[test]
    fn logm_inverts_expm() {
        let a = Mat::from_row_slice(3, 3, &[-1.0, 0.3, 0.0, 0.2, -0.5, 1.0, 0.0, -1.0, -0.2]);
        let l = logm(&expm(&a)).unwrap();
        assert!((l - a).norm() < 1e-11);
    }

    #[test]
    fn logm_rejects_negative_eigenvalue() {
        let a = Mat::from_diagonal(&Vector::from_vec(vec![1.0, -0.5]));
        assert!(matches!(logm(&a), Err(Error::LogBranch { .. })));
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(6);
        let integral: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(10)).sum();
        assert_abs_diff_eq!(integral, 2.0 / 11.0, epsilon = 1e-14);
    }

    #[test]
    fn nnls_matches_unconstrained_when_interior() {
        let a = Mat::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let b = Vector::from_vec(vec![1.0, 2.0, 3.0]);
        let x = nnls(&a, &b, 100).unwrap();
        assert_abs_diff_eq!(x[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(x[1], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn nnls_clamps_negative_direction() {
        let a = Mat::identity(2, 2);
        let b = Vector::from_vec(vec![-1.0, 2.0]);
        let x = nnls(&a, &b, 100).unwrap();
        assert_eq!(x[0], 0.0);
        assert_abs_diff_eq!(x[1], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn psd_cholesky_handles_singular() {
        let a = Mat::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let l = psd_cholesky(&a);
        assert!((&l * l.transpose() - a).norm() < 1e-14);
    }

    #[test]
    fn monotone_projection() {
        let p = project_monotone(&[3.0, 1.0, 2.0, 10.0], 0.0, 5.0);
        assert_eq!(p, vec![2.0, 2.0, 2.0, 5.0]);
    }

    #[test]
    fn compressed_lstsq_matches_dense() {
        let design = Mat::from_fn(50, 3, |i, j| ((i * (j + 1)) as f64 * 0.37).sin());
        let rhs = Mat::from_fn(50, 2, |i, j| ((i + j) as f64 * 0.11).cos());
        let chunks: Vec<Mat> = (0..5)
            .map(|c| augmented_r(&design.rows(c * 10, 10).into_owned(), &rhs.rows(c * 10, 10).into_owned()))
            .collect();
        let comp = CompressedLstsq::from_chunk_factors(chunks, 3, 50);
        let (x, rank) = comp.solve(1e-12).unwrap();
        assert_eq!(rank, 3);
        let normal = (design.transpose() * &design).try_inverse().unwrap() * design.transpose() * &rhs;
        assert!((x - normal).norm() < 1e-10);
    }
}
