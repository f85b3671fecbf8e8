//! Eigenvalues, eigenfunctions, implied time scales, Koopman modes and
//! conserved quantities of an estimated generator.

use std::cmp::Ordering;

use nalgebra::SVD;
use serde::{Deserialize, Serialize};

use crate::dictionary::Dictionary;
use crate::error::{Error, Result};
use crate::generator::GeneratorEstimate;
use crate::linalg::{eig, CMat, Mat, Vector, C64};

/// How eigenvectors are scaled after the decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Normalization {
    #[default]
    /// Largest-magnitude entry becomes real positive 1.
    LargestEntry,
    /// The last entry (in basis order) whose magnitude exceeds `tol` times
    /// the largest one becomes 1. For graded monomials this fixes the
    /// coefficient of the highest-order term.
    LastSignificant { tol: f64 },
}

#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    /// Sorted by descending real part, then ascending imaginary part.
    pub eigenvalues: Vec<C64>,
    /// Columns are the coefficient vectors `ξ_ℓ` of `φ_ℓ = ξ_ℓᵀ ψ`.
    pub eigenvectors: CMat,
    /// `|1 / Re λ|`, infinite for (numerically) zero eigenvalues.
    pub timescales: Vec<f64>,
    /// The decomposed matrix `L̂`.
    pub matrix: Mat,
}

/// Decomposes `L̂ = Mᵀ` of a generator estimate.
pub fn decompose(est: &GeneratorEstimate) -> Result<SpectralDecomposition> {
    decompose_matrix(&est.l_hat())
}

/// Eigendecomposition of a matrix acting on coefficient vectors.
pub fn decompose_matrix(l: &Mat) -> Result<SpectralDecomposition> {
    let n = l.nrows();
    if l.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("generator matrix has non-finite entries".into()));
    }
    let e = eig(l).map_err(|err| {
        let sv = SVD::new(l.clone(), false, false).singular_values;
        let cond = sv.max() / sv.min();
        Error::Numerical(format!("{err}; matrix condition number {cond:.3e}"))
    })?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (e.values[i], e.values[j]);
        b.re.total_cmp(&a.re)
            .then(a.im.total_cmp(&b.im))
            .then_with(|| lexicographic(&e.vectors, i, j))
    });
    let eigenvalues: Vec<C64> = order.iter().map(|&i| e.values[i]).collect();
    let mut eigenvectors = CMat::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        eigenvectors.set_column(k, &e.vectors.column(i));
    }
    let radius = eigenvalues.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let zero = 1e-12 * radius.max(f64::MIN_POSITIVE);
    let timescales = eigenvalues
        .iter()
        .map(|z| if z.norm() <= zero || z.re == 0.0 { f64::INFINITY } else { (1.0 / z.re).abs() })
        .collect();
    let mut dec = SpectralDecomposition { eigenvalues, eigenvectors, timescales, matrix: l.clone() };
    dec.normalize(Normalization::LargestEntry);
    Ok(dec)
}

fn lexicographic(v: &CMat, i: usize, j: usize) -> Ordering {
    for r in 0..v.nrows() {
        let (a, b) = (v[(r, i)], v[(r, j)]);
        let o = a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im));
        if o != Ordering::Equal {
            return o;
        }
    }
    Ordering::Equal
}

impl SpectralDecomposition {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn spectral_radius(&self) -> f64 {
        self.eigenvalues.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Rescales every eigenvector according to `norm`.
    pub fn normalize(&mut self, norm: Normalization) {
        let n = self.eigenvectors.nrows();
        for k in 0..self.eigenvectors.ncols() {
            let col = self.eigenvectors.column(k);
            let mags: Vec<f64> = col.iter().map(|z| z.norm()).collect();
            let max = mags.iter().copied().fold(0.0, f64::max);
            if max == 0.0 {
                continue;
            }
            let pivot = match norm {
                Normalization::LargestEntry => (0..n).find(|&i| mags[i] >= max * (1.0 - 1e-12)).unwrap_or(0),
                Normalization::LastSignificant { tol } => (0..n).rev().find(|&i| mags[i] > tol * max).unwrap_or(0),
            };
            let scale = C64::new(1.0, 0.0) / col[pivot];
            for i in 0..n {
                self.eigenvectors[(i, k)] *= scale;
            }
        }
    }

    /// `‖L̂ξ − λξ‖ / ‖L̂‖` for each pair (Frobenius norm of `L̂`).
    pub fn residuals(&self) -> Vec<f64> {
        let lc = self.matrix.map(|v| C64::new(v, 0.0));
        let lnorm = self.matrix.norm().max(f64::MIN_POSITIVE);
        (0..self.len())
            .map(|k| {
                let v = self.eigenvectors.column(k);
                let r = &lc * v - v * self.eigenvalues[k];
                r.norm() / (lnorm * v.norm())
            })
            .collect()
    }

    /// Time scales of the first `count` eigenvalues after skipping `skip`.
    pub fn implied_timescales(&self, skip: usize, count: usize) -> Vec<f64> {
        self.timescales.iter().skip(skip).take(count).copied().collect()
    }

    /// Index of the eigenvalue closest to `target`.
    pub fn nearest(&self, target: C64) -> usize {
        (0..self.len())
            .min_by(|&a, &b| {
                (self.eigenvalues[a] - target)
                    .norm()
                    .total_cmp(&(self.eigenvalues[b] - target).norm())
            })
            .unwrap_or(0)
    }
}

/// `m × n` matrix of `φ_ℓ(x_l)`.
pub fn eigenfunction_values(dec: &SpectralDecomposition, dict: &Dictionary, points: &Mat) -> Result<CMat> {
    let psi = dict.evaluate_values(points)?.map(|v| C64::new(v, 0.0));
    Ok(psi.transpose() * &dec.eigenvectors)
}

#[derive(Debug, Clone)]
pub struct ModeDecomposition {
    /// `d × n`, column `ℓ` is the mode `v_ℓ`.
    pub modes: CMat,
    pub selector: Mat,
    pub active: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Koopman modes of the full-state observable: `V = Bᵀ Ξ⁻ᵀ`.
pub fn koopman_modes(dec: &SpectralDecomposition, selector: &Mat, mode_tol: f64) -> Result<ModeDecomposition> {
    let n = dec.len();
    if selector.nrows() != n {
        return Err(Error::Input("selector does not match the dictionary size".into()));
    }
    let mut warnings = Vec::new();
    let xi = dec.eigenvectors.clone();
    let svd = SVD::new(xi.clone(), false, false);
    let cond = svd.singular_values.max() / svd.singular_values.min();
    let inv = match (cond < 1e14).then(|| xi.clone().try_inverse()).flatten() {
        Some(inv) => inv,
        None => {
            warnings.push(format!("eigenvector matrix is singular (condition {cond:.3e}); using pseudoinverse"));
            SVD::new(xi, true, true)
                .pseudo_inverse(1e-12)
                .map_err(|e| Error::Numerical(e.to_string()))?
        }
    };
    let b = selector.map(|v| C64::new(v, 0.0));
    let modes = b.transpose() * inv.transpose();
    let active = (0..n).filter(|&l| modes.column(l).norm() > mode_tol).collect();
    Ok(ModeDecomposition { modes, selector: selector.clone(), active, warnings })
}

/// `Σ_ℓ λ_ℓ φ_ℓ(x) v_ℓ` at each row of `points` (`m × d`, real part).
pub fn reconstruct_drift(
    dec: &SpectralDecomposition,
    modes: &ModeDecomposition,
    dict: &Dictionary,
    points: &Mat,
) -> Result<Mat> {
    let phi = eigenfunction_values(dec, dict, points)?;
    let lam = CMat::from_diagonal(&nalgebra::DVector::from_vec(dec.eigenvalues.clone()));
    let out = phi * lam * modes.modes.transpose();
    Ok(out.map(|z| z.re))
}

#[derive(Debug, Clone)]
pub struct ConservedQuantities {
    /// Number of eigenvalues with `|λ| < zero_tol` (constant included).
    pub multiplicity: usize,
    pub zero_tol: f64,
    /// Real coefficient vectors with zero constant coefficient.
    pub vectors: Vec<Vector>,
}

/// Observables `E = ξᵀψ` with `𝓛E ≈ 0`, excluding the constant function.
///
/// The null space is spanned by the right singular vectors of `L̂` belonging
/// to its smallest singular values, as many as there are eigenvalues below
/// `zero_tol` (default `1e-6` times the spectral radius).
pub fn conserved_quantities(
    dec: &SpectralDecomposition,
    constant_index: Option<usize>,
    zero_tol: Option<f64>,
) -> Result<ConservedQuantities> {
    let tol = zero_tol.unwrap_or(1e-6 * dec.spectral_radius());
    let multiplicity = dec.eigenvalues.iter().filter(|z| z.norm() < tol).count();
    if multiplicity == 0 {
        return Ok(ConservedQuantities { multiplicity, zero_tol: tol, vectors: Vec::new() });
    }
    let n = dec.len();
    let svd = SVD::try_new(dec.matrix.clone(), false, true, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numerical("SVD did not converge".into()))?;
    let v_t = svd.v_t.expect("v_t requested");
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]));
    let mut basis = Mat::zeros(n, multiplicity);
    for (c, &i) in idx.iter().take(multiplicity).enumerate() {
        basis.set_column(c, &v_t.row(i).transpose());
    }
    let keep = match constant_index {
        Some(c0) => {
            basis.row_mut(c0).fill(0.0);
            multiplicity - 1
        }
        None => multiplicity,
    };
    let mut vectors = Vec::new();
    if keep > 0 {
        let svd = SVD::new(basis, true, false);
        let u = svd.u.expect("u requested");
        let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
        idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        for &i in idx.iter().take(keep) {
            let mut v: Vector = u.column(i).into_owned();
            let pivot = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            if pivot != 0.0 {
                v /= pivot;
            }
            vectors.push(v);
        }
    }
    Ok(ConservedQuantities { multiplicity, zero_tol: tol, vectors })
}
