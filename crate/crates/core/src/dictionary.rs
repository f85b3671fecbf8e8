//! Basis-function dictionaries with analytic first and second derivatives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Which family of basis functions a dictionary holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BasisKind {
    /// All monomials of total degree `≤ max_degree` in `dim` variables.
    Monomials { dim: usize, max_degree: usize },
    /// Radial kernels `exp(-|x - c|² / (2 σ²))`.
    Gaussians { centers: Vec<Vec<f64>>, bandwidth: f64 },
    /// One-dimensional Gaussians on a circle of length `period`.
    PeriodicGaussians { centers: Vec<f64>, bandwidth: f64, period: f64 },
    /// Tensor Legendre polynomials of total degree `≤ max_degree`, each
    /// coordinate mapped affinely from `domain[j]` onto `[-1, 1]`.
    Legendre { max_degree: usize, domain: Vec<[f64; 2]> },
}

/// Which derivatives to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Derivs {
    None,
    Gradient,
    Hessian,
}

/// Values and derivatives of every basis function at one point.
///
/// `grads[i * d + j]` is `∂ψ_i/∂x_j`, `hess[(i * d + j) * d + k]` is
/// `∂²ψ_i/∂x_j∂x_k`.
#[derive(Debug, Clone, Default)]
pub struct PointEval {
    pub values: Vec<f64>,
    pub grads: Vec<f64>,
    pub hess: Vec<f64>,
}

/// Dictionary evaluated on a whole sample.
#[derive(Debug, Clone)]
pub struct EvaluationBlock {
    /// `n × m`, `values[(i, l)] = ψ_i(x_l)`.
    pub values: Mat,
    /// One `n × m` matrix per coordinate direction.
    pub gradients: Vec<Mat>,
    /// `d·d` matrices of size `n × m`, index `j * d + k`.
    pub hessians: Option<Vec<Mat>>,
}

impl EvaluationBlock {
    pub fn dim(&self) -> usize {
        self.gradients.len()
    }

    pub fn hessian(&self, j: usize, k: usize) -> Option<&Mat> {
        let d = self.dim();
        self.hessians.as_ref().map(|h| &h[j * d + k])
    }
}

#[derive(Debug, Clone)]
pub struct Dictionary {
    kind: BasisKind,
    dim: usize,
    /// Multi-indices for monomials and Legendre polynomials, graded order.
    indices: Vec<Vec<u32>>,
    /// Sparse form of `indices`: `(variable, exponent)` with exponent > 0.
    sparse: Vec<Vec<(usize, u32)>>,
}

/// Multi-indices of total degree `≤ max_degree`, graded, with the exponent of
/// the first variable descending within each degree.
pub fn graded_indices(dim: usize, max_degree: usize) -> Vec<Vec<u32>> {
    fn fill(rest: usize, pos: usize, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if pos + 1 == cur.len() {
            cur[pos] = rest as u32;
            out.push(cur.clone());
            return;
        }
        for e in (0..=rest).rev() {
            cur[pos] = e as u32;
            fill(rest - e, pos + 1, cur, out);
        }
    }
    let mut out = Vec::new();
    for deg in 0..=max_degree {
        let mut cur = vec![0u32; dim];
        fill(deg, 0, &mut cur, &mut out);
    }
    out
}

fn binomial(n: usize, k: usize) -> usize {
    let k = k.min(n - k);
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

impl Dictionary {
    pub fn new(kind: BasisKind) -> Result<Self> {
        let (dim, indices) = match &kind {
            BasisKind::Monomials { dim, max_degree } => {
                if *dim == 0 {
                    return Err(Error::Input("monomial dictionary needs dim ≥ 1".into()));
                }
                (*dim, graded_indices(*dim, *max_degree))
            }
            BasisKind::Gaussians { centers, bandwidth } => {
                if centers.is_empty() {
                    return Err(Error::Input("gaussian dictionary needs at least one center".into()));
                }
                let d = centers[0].len();
                if d == 0 || centers.iter().any(|c| c.len() != d) {
                    return Err(Error::Input("gaussian centers must share a positive dimension".into()));
                }
                if !(*bandwidth > 0.0) || !bandwidth.is_finite() {
                    return Err(Error::Input(format!("bandwidth must be positive, got {bandwidth}")));
                }
                (d, Vec::new())
            }
            BasisKind::PeriodicGaussians { centers, bandwidth, period } => {
                if centers.is_empty() {
                    return Err(Error::Input("periodic gaussian dictionary needs at least one center".into()));
                }
                if !(*bandwidth > 0.0) || !(*period > 0.0) {
                    return Err(Error::Input("bandwidth and period must be positive".into()));
                }
                (1, Vec::new())
            }
            BasisKind::Legendre { max_degree, domain } => {
                if domain.is_empty() {
                    return Err(Error::Input("legendre dictionary needs a domain".into()));
                }
                if domain.iter().any(|[a, b]| !(b > a) || !a.is_finite() || !b.is_finite()) {
                    return Err(Error::Input("legendre domain intervals must satisfy a < b".into()));
                }
                (domain.len(), graded_indices(domain.len(), *max_degree))
            }
        };
        let sparse = indices
            .iter()
            .map(|e| {
                e.iter()
                    .enumerate()
                    .filter(|(_, &p)| p > 0)
                    .map(|(j, &p)| (j, p))
                    .collect()
            })
            .collect();
        Ok(Dictionary { kind, dim, indices, sparse })
    }

    pub fn monomials(dim: usize, max_degree: usize) -> Self {
        Self::new(BasisKind::Monomials { dim, max_degree }).expect("valid monomial dictionary")
    }

    pub fn kind(&self) -> &BasisKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn size(&self) -> usize {
        match &self.kind {
            BasisKind::Monomials { .. } | BasisKind::Legendre { .. } => self.indices.len(),
            BasisKind::Gaussians { centers, .. } => centers.len(),
            BasisKind::PeriodicGaussians { centers, .. } => centers.len(),
        }
    }

    /// Expected size from the basis parameters alone.
    pub fn expected_size(kind: &BasisKind) -> usize {
        match kind {
            BasisKind::Monomials { dim, max_degree } => binomial(dim + max_degree, *dim),
            BasisKind::Legendre { max_degree, domain } => binomial(domain.len() + max_degree, domain.len()),
            BasisKind::Gaussians { centers, .. } => centers.len(),
            BasisKind::PeriodicGaussians { centers, .. } => centers.len(),
        }
    }

    /// Multi-index of basis function `i` (monomials and Legendre only).
    pub fn multi_index(&self, i: usize) -> Option<&[u32]> {
        self.indices.get(i).map(|v| v.as_slice())
    }

    /// Position of a multi-index, if present.
    pub fn index_of(&self, exps: &[u32]) -> Option<usize> {
        self.indices.iter().position(|e| e.as_slice() == exps)
    }

    /// Index of the constant function, if the dictionary has one.
    pub fn constant_index(&self) -> Option<usize> {
        match self.kind {
            BasisKind::Monomials { .. } | BasisKind::Legendre { .. } => Some(0),
            _ => None,
        }
    }

    /// Human-readable name of basis function `i`.
    pub fn term_name(&self, i: usize) -> String {
        match &self.kind {
            BasisKind::Monomials { .. } => {
                if self.sparse[i].is_empty() {
                    return "1".into();
                }
                self.sparse[i]
                    .iter()
                    .map(|&(j, p)| if p == 1 { format!("x{}", j + 1) } else { format!("x{}^{}", j + 1, p) })
                    .collect::<Vec<_>>()
                    .join("*")
            }
            BasisKind::Legendre { .. } => {
                if self.sparse[i].is_empty() {
                    return "1".into();
                }
                self.sparse[i]
                    .iter()
                    .map(|&(j, p)| format!("P{}(x{})", p, j + 1))
                    .collect::<Vec<_>>()
                    .join("*")
            }
            BasisKind::Gaussians { .. } => format!("gauss{i}"),
            BasisKind::PeriodicGaussians { .. } => format!("pgauss{i}"),
        }
    }

    /// Evaluates every basis function (and optionally derivatives) at `x`.
    pub fn eval_point(&self, x: &[f64], derivs: Derivs, out: &mut PointEval) -> Result<()> {
        let n = self.size();
        let d = self.dim;
        if x.len() != d {
            return Err(Error::Input(format!("point has dimension {}, dictionary expects {d}", x.len())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite coordinate".into()));
        }
        out.values.clear();
        out.values.resize(n, 0.0);
        if derivs != Derivs::None {
            out.grads.clear();
            out.grads.resize(n * d, 0.0);
        }
        if derivs == Derivs::Hessian {
            out.hess.clear();
            out.hess.resize(n * d * d, 0.0);
        }
        match &self.kind {
            BasisKind::Monomials { max_degree, .. } => self.eval_monomials(x, *max_degree, derivs, out),
            BasisKind::Legendre { max_degree, domain } => self.eval_legendre(x, *max_degree, domain, derivs, out)?,
            BasisKind::Gaussians { centers, bandwidth } => {
                let s2 = bandwidth * bandwidth;
                let mut diff = vec![0.0; d];
                for (i, c) in centers.iter().enumerate() {
                    let mut r2 = 0.0;
                    for j in 0..d {
                        diff[j] = x[j] - c[j];
                        r2 += diff[j] * diff[j];
                    }
                    let v = (-r2 / (2.0 * s2)).exp();
                    out.values[i] = v;
                    if derivs != Derivs::None {
                        for j in 0..d {
                            out.grads[i * d + j] = -v * diff[j] / s2;
                        }
                    }
                    if derivs == Derivs::Hessian {
                        for j in 0..d {
                            for k in 0..d {
                                let delta = if j == k { 1.0 / s2 } else { 0.0 };
                                out.hess[(i * d + j) * d + k] = v * (diff[j] * diff[k] / (s2 * s2) - delta);
                            }
                        }
                    }
                }
            }
            BasisKind::PeriodicGaussians { centers, bandwidth, period } => {
                let s2 = bandwidth * bandwidth;
                for (i, c) in centers.iter().enumerate() {
                    let r = x[0] - c;
                    let w = r - period * (r / period).round();
                    let v = (-w * w / (2.0 * s2)).exp();
                    out.values[i] = v;
                    if derivs != Derivs::None {
                        out.grads[i] = -v * w / s2;
                    }
                    if derivs == Derivs::Hessian {
                        out.hess[i] = v * (w * w / (s2 * s2) - 1.0 / s2);
                    }
                }
            }
        }
        Ok(())
    }

    fn eval_monomials(&self, x: &[f64], max_degree: usize, derivs: Derivs, out: &mut PointEval) {
        let d = self.dim;
        // powers[j][e] = x_j^e
        let mut powers = vec![vec![1.0; max_degree + 1]; d];
        for j in 0..d {
            for e in 1..=max_degree {
                powers[j][e] = powers[j][e - 1] * x[j];
            }
        }
        for (i, terms) in self.sparse.iter().enumerate() {
            let mut v = 1.0;
            for &(j, p) in terms {
                v *= powers[j][p as usize];
            }
            out.values[i] = v;
            if derivs == Derivs::None {
                continue;
            }
            for (a, &(j, pj)) in terms.iter().enumerate() {
                let mut g = pj as f64 * powers[j][pj as usize - 1];
                for (b, &(k, pk)) in terms.iter().enumerate() {
                    if b != a {
                        g *= powers[k][pk as usize];
                    }
                }
                out.grads[i * d + j] = g;
            }
            if derivs != Derivs::Hessian {
                continue;
            }
            for (a, &(j, pj)) in terms.iter().enumerate() {
                if pj >= 2 {
                    let mut h = (pj * (pj - 1)) as f64 * powers[j][pj as usize - 2];
                    for (b, &(k, pk)) in terms.iter().enumerate() {
                        if b != a {
                            h *= powers[k][pk as usize];
                        }
                    }
                    out.hess[(i * d + j) * d + j] = h;
                }
                for (b, &(k, pk)) in terms.iter().enumerate().skip(a + 1) {
                    let mut h = (pj * pk) as f64 * powers[j][pj as usize - 1] * powers[k][pk as usize - 1];
                    for (c, &(q, pq)) in terms.iter().enumerate() {
                        if c != a && c != b {
                            h *= powers[q][pq as usize];
                        }
                    }
                    out.hess[(i * d + j) * d + k] = h;
                    out.hess[(i * d + k) * d + j] = h;
                }
            }
        }
    }

    fn eval_legendre(
        &self,
        x: &[f64],
        max_degree: usize,
        domain: &[[f64; 2]],
        derivs: Derivs,
        out: &mut PointEval,
    ) -> Result<()> {
        let d = self.dim;
        // p[j][k], dp[j][k], ddp[j][k] in the physical coordinate x_j
        let mut p = vec![vec![0.0; max_degree + 1]; d];
        let mut dp = vec![vec![0.0; max_degree + 1]; d];
        let mut ddp = vec![vec![0.0; max_degree + 1]; d];
        for j in 0..d {
            let [a, b] = domain[j];
            let t = (2.0 * x[j] - a - b) / (b - a);
            if !(-1.0 - 1e-12..=1.0 + 1e-12).contains(&t) {
                return Err(Error::Domain {
                    index: 0,
                    detail: format!("coordinate {} = {} outside [{a}, {b}]", j + 1, x[j]),
                });
            }
            let s = 2.0 / (b - a);
            legendre_table(t, max_degree, &mut p[j], &mut dp[j], &mut ddp[j]);
            for k in 0..=max_degree {
                dp[j][k] *= s;
                ddp[j][k] *= s * s;
            }
        }
        for (i, e) in self.indices.iter().enumerate() {
            let mut v = 1.0;
            for j in 0..d {
                v *= p[j][e[j] as usize];
            }
            out.values[i] = v;
            if derivs == Derivs::None {
                continue;
            }
            for j in 0..d {
                let mut g = dp[j][e[j] as usize];
                for k in 0..d {
                    if k != j {
                        g *= p[k][e[k] as usize];
                    }
                }
                out.grads[i * d + j] = g;
            }
            if derivs != Derivs::Hessian {
                continue;
            }
            for j in 0..d {
                for k in j..d {
                    let mut h = if j == k {
                        ddp[j][e[j] as usize]
                    } else {
                        dp[j][e[j] as usize] * dp[k][e[k] as usize]
                    };
                    for q in 0..d {
                        if q != j && q != k {
                            h *= p[q][e[q] as usize];
                        }
                    }
                    out.hess[(i * d + j) * d + k] = h;
                    out.hess[(i * d + k) * d + j] = h;
                }
            }
        }
        Ok(())
    }

    /// Evaluates the dictionary on the rows of `points` (`m × d`).
    pub fn evaluate(&self, points: &Mat, with_hessians: bool) -> Result<EvaluationBlock> {
        let m = points.nrows();
        let d = self.dim;
        let n = self.size();
        if m == 0 {
            return Err(Error::Input("no points to evaluate".into()));
        }
        if points.ncols() != d {
            return Err(Error::Input(format!("points have {} columns, dictionary dimension is {d}", points.ncols())));
        }
        let derivs = if with_hessians { Derivs::Hessian } else { Derivs::Gradient };
        let mut values = Mat::zeros(n, m);
        let mut gradients = vec![Mat::zeros(n, m); d];
        let mut hessians = with_hessians.then(|| vec![Mat::zeros(n, m); d * d]);
        let mut pe = PointEval::default();
        let mut x = vec![0.0; d];
        for l in 0..m {
            for j in 0..d {
                x[j] = points[(l, j)];
            }
            self.eval_point(&x, derivs, &mut pe).map_err(|e| match e {
                Error::Domain { detail, .. } => Error::Domain { index: l, detail },
                other => other,
            })?;
            for i in 0..n {
                values[(i, l)] = pe.values[i];
                for j in 0..d {
                    gradients[j][(i, l)] = pe.grads[i * d + j];
                }
                if let Some(h) = hessians.as_mut() {
                    for jk in 0..d * d {
                        h[jk][(i, l)] = pe.hess[i * d * d + jk];
                    }
                }
            }
        }
        Ok(EvaluationBlock { values, gradients, hessians })
    }

    /// `n × d` matrix `B` with `x = Bᵀ ψ(x)`.
    ///
    /// Monomials give unit entries. Legendre coordinates are recovered from
    /// the first-degree polynomial and the constant, so the columns carry the
    /// half-width and midpoint of the domain interval.
    pub fn full_state_selector(&self) -> Result<Mat> {
        let n = self.size();
        let d = self.dim;
        let mut b = Mat::zeros(n, d);
        match &self.kind {
            BasisKind::Monomials { max_degree, .. } | BasisKind::Legendre { max_degree, .. } if *max_degree >= 1 => {
                for j in 0..d {
                    let mut e = vec![0u32; d];
                    e[j] = 1;
                    let idx = self.index_of(&e).expect("degree-one index present");
                    if let BasisKind::Legendre { domain, .. } = &self.kind {
                        let [lo, hi] = domain[j];
                        b[(idx, j)] = 0.5 * (hi - lo);
                        b[(0, j)] = 0.5 * (hi + lo);
                    } else {
                        b[(idx, j)] = 1.0;
                    }
                }
                Ok(b)
            }
            BasisKind::Monomials { .. } | BasisKind::Legendre { .. } => Err(Error::UnsupportedDictionary(
                "dictionary of degree 0 does not contain the coordinate functions".into(),
            )),
            BasisKind::Gaussians { .. } | BasisKind::PeriodicGaussians { .. } => Err(Error::UnsupportedDictionary(
                "gaussian dictionaries do not contain the coordinate functions".into(),
            )),
        }
    }

    /// Coefficients of `x_j · f(x)` where `f = Σ coeffs_i ψ_i`.
    ///
    /// Fails with a closure error when the product leaves the span of the
    /// dictionary (a coefficient above `tol` would need a higher degree).
    pub fn multiply_by_coordinate(&self, coeffs: &[f64], j: usize, tol: f64) -> Result<Vec<f64>> {
        let n = self.size();
        assert_eq!(coeffs.len(), n);
        let mut out = vec![0.0; n];
        match &self.kind {
            BasisKind::Monomials { .. } => {
                for (i, &c) in coeffs.iter().enumerate() {
                    if c == 0.0 {
                        continue;
                    }
                    let mut e = self.indices[i].clone();
                    e[j] += 1;
                    match self.index_of(&e) {
                        Some(k) => out[k] += c,
                        None if c.abs() <= tol => {}
                        None => {
                            return Err(Error::Closure(format!(
                                "x{} * {} needs degree {}; increase the dictionary degree",
                                j + 1,
                                self.term_name(i),
                                e.iter().sum::<u32>()
                            )))
                        }
                    }
                }
            }
            BasisKind::Legendre { domain, .. } => {
                let [lo, hi] = domain[j];
                let half = 0.5 * (hi - lo);
                let mid = 0.5 * (hi + lo);
                for (i, &c) in coeffs.iter().enumerate() {
                    if c == 0.0 {
                        continue;
                    }
                    out[i] += mid * c;
                    // t P_k = ((k+1) P_{k+1} + k P_{k-1}) / (2k+1)
                    let k = self.indices[i][j];
                    let kf = k as f64;
                    let mut up = self.indices[i].clone();
                    up[j] += 1;
                    let w_up = half * c * (kf + 1.0) / (2.0 * kf + 1.0);
                    match self.index_of(&up) {
                        Some(q) => out[q] += w_up,
                        None if w_up.abs() <= tol => {}
                        None => {
                            return Err(Error::Closure(format!(
                                "x{} * {} leaves the polynomial space; increase the dictionary degree",
                                j + 1,
                                self.term_name(i)
                            )))
                        }
                    }
                    if k > 0 {
                        let mut down = self.indices[i].clone();
                        down[j] -= 1;
                        let q = self.index_of(&down).expect("lower index present");
                        out[q] += half * c * kf / (2.0 * kf + 1.0);
                    }
                }
            }
            BasisKind::Gaussians { .. } | BasisKind::PeriodicGaussians { .. } => {
                return Err(Error::UnsupportedDictionary(
                    "products with coordinates are not representable in a gaussian dictionary".into(),
                ))
            }
        }
        Ok(out)
    }
}

/// Legendre polynomials and their first two derivatives on `[-1, 1]`.
pub fn legendre_table(t: f64, max_degree: usize, p: &mut [f64], dp: &mut [f64], ddp: &mut [f64]) {
    p[0] = 1.0;
    dp[0] = 0.0;
    ddp[0] = 0.0;
    if max_degree == 0 {
        return;
    }
    p[1] = t;
    dp[1] = 1.0;
    ddp[1] = 0.0;
    for k in 1..max_degree {
        let kf = k as f64;
        p[k + 1] = ((2.0 * kf + 1.0) * t * p[k] - kf * p[k - 1]) / (kf + 1.0);
        dp[k + 1] = dp[k - 1] + (2.0 * kf + 1.0) * p[k];
        ddp[k + 1] = ddp[k - 1] + (2.0 * kf + 1.0) * dp[k];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn eval(dict: &Dictionary, x: &[f64]) -> PointEval {
        let mut pe = PointEval::default();
        dict.eval_point(x, Derivs::Hessian, &mut pe).unwrap();
        pe
    }

    #[test]
    fn monomial_values_1d() {
        let d = Dictionary::monomials(1, 2);
        assert_eq!(eval(&d, &[2.0]).values, vec![1.0, 2.0, 4.0]);
    }

    #[test]
    fn monomial_ordering_and_derivatives_2d() {
        let d = Dictionary::monomials(2, 3);
        let names: Vec<String> = (0..d.size()).map(|i| d.term_name(i)).collect();
        assert_eq!(&names[..7], &["1", "x1", "x2", "x1^2", "x1*x2", "x2^2", "x1^3"]);
        let i = d.index_of(&[2, 1]).unwrap();
        let pe = eval(&d, &[1.0, 3.0]);
        assert_eq!(pe.values[i], 3.0);
        assert_eq!(&pe.grads[i * 2..i * 2 + 2], &[6.0, 1.0]);
        assert_eq!(&pe.hess[i * 4..i * 4 + 4], &[6.0, 2.0, 2.0, 0.0]);
    }

    #[test]
    fn gaussian_at_center() {
        let d = Dictionary::new(BasisKind::Gaussians { centers: vec![vec![0.0]], bandwidth: 1.0 }).unwrap();
        let pe = eval(&d, &[0.0]);
        assert_eq!(pe.values[0], 1.0);
        assert_eq!(pe.grads[0], 0.0);
        assert_eq!(pe.hess[0], -1.0);
    }

    #[test]
    fn sizes_match_binomial() {
        for (dim, deg) in [(1, 10), (2, 8), (25, 2), (3, 4)] {
            let kind = BasisKind::Monomials { dim, max_degree: deg };
            assert_eq!(Dictionary::new(kind.clone()).unwrap().size(), Dictionary::expected_size(&kind));
        }
    }

    #[test]
    fn selector_for_monomials() {
        let b = Dictionary::monomials(2, 2).full_state_selector().unwrap();
        assert_eq!(b[(1, 0)], 1.0);
        assert_eq!(b[(2, 1)], 1.0);
        assert_eq!(b.sum(), 2.0);
        let b1 = Dictionary::monomials(1, 3).full_state_selector().unwrap();
        assert_eq!(b1.column(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn selector_rejects_gaussians() {
        let d = Dictionary::new(BasisKind::Gaussians { centers: vec![vec![0.0, 0.0]], bandwidth: 1.0 }).unwrap();
        assert!(matches!(d.full_state_selector(), Err(Error::UnsupportedDictionary(_))));
    }

    #[test]
    fn legendre_selector_reproduces_coordinates() {
        let dict = Dictionary::new(BasisKind::Legendre { max_degree: 3, domain: vec![[-1.0, 3.0], [0.0, 2.0]] }).unwrap();
        let b = dict.full_state_selector().unwrap();
        let x = [0.7, 1.9];
        let pe = eval(&dict, &x);
        for j in 0..2 {
            let g: f64 = (0..dict.size()).map(|i| b[(i, j)] * pe.values[i]).sum();
            assert_abs_diff_eq!(g, x[j], epsilon = 1e-14);
        }
    }

    #[test]
    fn legendre_outside_domain_is_rejected() {
        let dict = Dictionary::new(BasisKind::Legendre { max_degree: 2, domain: vec![[-1.0, 1.0]] }).unwrap();
        let pts = Mat::from_row_slice(2, 1, &[0.0, 1.5]);
        assert!(matches!(dict.evaluate(&pts, false), Err(Error::Domain { index: 1, .. })));
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let dict = Dictionary::monomials(1, 2);
        let pts = Mat::from_row_slice(1, 1, &[f64::NAN]);
        assert!(matches!(dict.evaluate(&pts, false), Err(Error::Input(_))));
    }

    #[test]
    fn coordinate_products() {
        let dict = Dictionary::monomials(2, 2);
        // f = 1 + x2 ; x1 f = x1 + x1 x2
        let mut c = vec![0.0; 6];
        c[0] = 1.0;
        c[2] = 1.0;
        let p = dict.multiply_by_coordinate(&c, 0, 1e-12).unwrap();
        assert_eq!(p, vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
        let mut hi = vec![0.0; 6];
        hi[3] = 1.0;
        assert!(matches!(dict.multiply_by_coordinate(&hi, 0, 1e-12), Err(Error::Closure(_))));

        let leg = Dictionary::new(BasisKind::Legendre { max_degree: 4, domain: vec![[-2.0, 1.0]] }).unwrap();
        let coeffs = [0.3, -1.0, 0.5, 0.2, 0.0];
        let prod = leg.multiply_by_coordinate(&coeffs, 0, 1e-12).unwrap();
        for &x in &[-1.7, 0.0, 0.9] {
            let pe = eval(&leg, &[x]);
            let f: f64 = coeffs.iter().zip(&pe.values).map(|(c, v)| c * v).sum();
            let g: f64 = prod.iter().zip(&pe.values).map(|(c, v)| c * v).sum();
            assert_abs_diff_eq!(g, x * f, epsilon = 1e-13);
        }
    }

    #[test]
    fn evaluation_is_deterministic() {
        let dict = Dictionary::monomials(3, 4);
        let pts = Mat::from_fn(20, 3, |i, j| ((i * 7 + j) as f64 * 0.31).sin());
        let a = dict.evaluate(&pts, true).unwrap();
        let b = dict.evaluate(&pts, true).unwrap();
        assert_eq!(a.values, b.values);
        assert_eq!(a.hessians, b.hessians);
    }

    fn fd_check(dict: &Dictionary, x: &[f64]) {
        let h = 1e-5;
        let d = dict.dim();
        let n = dict.size();
        let base = eval(dict, x);
        for j in 0..d {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += h;
            xm[j] -= h;
            let (ep, em) = (eval(dict, &xp), eval(dict, &xm));
            for i in 0..n {
                let fd = (ep.values[i] - em.values[i]) / (2.0 * h);
                let an = base.grads[i * d + j];
                assert!((fd - an).abs() <= 1e-6 * an.abs().max(1.0), "grad {i},{j}: {fd} vs {an}");
                for k in 0..d {
                    let fdh = (ep.grads[i * d + k] - em.grads[i * d + k]) / (2.0 * h);
                    let anh = base.hess[(i * d + k) * d + j];
                    assert!((fdh - anh).abs() <= 1e-6 * anh.abs().max(1.0), "hess {i},{j},{k}: {fdh} vs {anh}");
                    assert_eq!(base.hess[(i * d + k) * d + j], base.hess[(i * d + j) * d + k]);
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn monomial_derivatives_match_finite_differences(x in prop::collection::vec(-1.5f64..1.5, 3)) {
            fd_check(&Dictionary::monomials(3, 4), &x);
        }

        #[test]
        fn gaussian_derivatives_match_finite_differences(x in prop::collection::vec(-2.0f64..2.0, 2)) {
            let centers = vec![vec![0.0, 0.0], vec![1.0, -0.5], vec![-1.2, 0.8]];
            fd_check(&Dictionary::new(BasisKind::Gaussians { centers, bandwidth: 0.7 }).unwrap(), &x);
        }

        #[test]
        fn periodic_gaussian_derivatives_match_finite_differences(x in -2.5f64..2.5) {
            let dict = Dictionary::new(BasisKind::PeriodicGaussians {
                centers: vec![-2.0, 0.0, 1.5], bandwidth: 0.5, period: 2.0 * std::f64::consts::PI,
            }).unwrap();
            fd_check(&dict, &[x]);
        }

        #[test]
        fn legendre_derivatives_match_finite_differences(x in prop::collection::vec(-0.95f64..0.95, 2)) {
            let dict = Dictionary::new(BasisKind::Legendre { max_degree: 5, domain: vec![[-1.0, 1.0], [-2.0, 2.0]] }).unwrap();
            fd_check(&dict, &[x[0], 2.0 * x[1]]);
        }
    }
}
