//! Data-driven estimation of the generator matrix (gEDMD) and the EDMD
//! matrix-logarithm comparison.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dictionary::{BasisKind, Derivs, Dictionary, PointEval};
use crate::error::{Error, Result};
use crate::linalg::{augmented_r, gauss_legendre, logm, CompressedLstsq, Mat};
use crate::models::SampleSet;

pub const CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GedmdOptions {
    /// Relative singular-value cutoff for the pseudoinverse of `Ĝ`.
    pub svd_cutoff: f64,
}

impl Default for GedmdOptions {
    fn default() -> Self {
        GedmdOptions { svd_cutoff: 1e-10 }
    }
}

impl GedmdOptions {
    /// The same cutoff expressed on the singular values of `Ψ` (`Ĝ ∝ ΨΨᵀ`).
    pub fn psi_cutoff(&self) -> f64 {
        self.svd_cutoff.sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct GeneratorEstimate {
    pub a_hat: Mat,
    pub g_hat: Mat,
    /// `M = Â Ĝ⁺`; row `k` holds the coefficients of `𝓛ψ_k`.
    pub m: Mat,
    /// `M* = Âᵀ Ĝ⁺`.
    pub adjoint_m: Mat,
    pub rank: usize,
    pub svd_cutoff: f64,
    pub samples: usize,
    pub dictionary: Option<BasisKind>,
    pub warnings: Vec<String>,
    /// Triangular factor of `[Ψᵀ | dΨᵀ]`; `r12` is empty for the reversible form.
    pub compressed: CompressedLstsq,
}

impl GeneratorEstimate {
    /// `L̂ = Mᵀ`, acting on coefficient vectors.
    pub fn l_hat(&self) -> Mat {
        self.m.transpose()
    }

    pub fn size(&self) -> usize {
        self.m.nrows()
    }

    /// Right-multiplies by `Ĝ⁺` through the triangular factor.
    pub fn times_gram_pinv(&self, a: &Mat) -> Result<Mat> {
        times_gram_pinv(&self.compressed, self.samples, a, self.svd_cutoff.sqrt())
    }
}

/// Plain-data form of an estimate; matrices are lists of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub dictionary: Option<BasisKind>,
    pub samples: usize,
    pub svd_cutoff: f64,
    pub rank: usize,
    pub m: Vec<Vec<f64>>,
    pub adjoint_m: Vec<Vec<f64>>,
    pub a_hat: Vec<Vec<f64>>,
    pub g_hat: Vec<Vec<f64>>,
    pub warnings: Vec<String>,
}

pub fn rows(a: &Mat) -> Vec<Vec<f64>> {
    a.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl From<&GeneratorEstimate> for EstimateRecord {
    fn from(est: &GeneratorEstimate) -> Self {
        EstimateRecord {
            dictionary: est.dictionary.clone(),
            samples: est.samples,
            svd_cutoff: est.svd_cutoff,
            rank: est.rank,
            m: rows(&est.m),
            adjoint_m: rows(&est.adjoint_m),
            a_hat: rows(&est.a_hat),
            g_hat: rows(&est.g_hat),
            warnings: est.warnings.clone(),
        }
    }
}

fn times_gram_pinv(c: &CompressedLstsq, m: usize, a: &Mat, psi_cutoff: f64) -> Result<Mat> {
    // Ĝ = R11ᵀ R11 / m  ⇒  Ĝ⁺ = m R11⁺ R11⁺ᵀ
    let n = c.r11.nrows();
    let (r_pinv, _) = c.solve_rhs(&Mat::identity(n, n), psi_cutoff)?;
    Ok(a * (&r_pinv * r_pinv.transpose()) * m as f64)
}

/// What each chunk of samples contributes.
pub(crate) struct ChunkRows {
    pub psi: Mat,
    pub dpsi: Option<Mat>,
    pub a: Mat,
}

/// Chunked, order-preserving assembly shared by every estimator.
pub(crate) fn assemble<F>(
    m: usize,
    n: usize,
    opts: &GedmdOptions,
    dictionary: Option<BasisKind>,
    chunk_fn: F,
) -> Result<GeneratorEstimate>
where
    F: Fn(std::ops::Range<usize>) -> Result<ChunkRows> + Sync,
{
    if m == 0 {
        return Err(Error::Input("no samples".into()));
    }
    if !(opts.svd_cutoff >= 0.0) {
        return Err(Error::Input("svd cutoff must be nonnegative".into()));
    }
    let chunks = m.div_ceil(CHUNK);
    let parts: Vec<(Mat, Mat, Mat, bool)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let range = c * CHUNK..((c + 1) * CHUNK).min(m);
            let rows = chunk_fn(range)?;
            let g = rows.psi.transpose() * &rows.psi;
            let (r, has_rhs) = match &rows.dpsi {
                Some(dpsi) => (augmented_r(&rows.psi, dpsi), true),
                None => (rows.psi.clone().qr().r(), false),
            };
            Ok((rows.a, g, r, has_rhs))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut a_hat = Mat::zeros(n, n);
    let mut g_hat = Mat::zeros(n, n);
    let has_rhs = parts[0].3;
    let mut factors = Vec::with_capacity(parts.len());
    for (a, g, r, _) in parts {
        a_hat += a;
        g_hat += g;
        factors.push(r);
    }
    a_hat /= m as f64;
    g_hat /= m as f64;
    let compressed = CompressedLstsq::from_chunk_factors(factors, n, m);
    let psi_cut = opts.psi_cutoff();
    let sv = compressed.singular_values();
    let smax = sv.max();
    let rank = sv.iter().filter(|&&s| s > psi_cut * smax && s > 0.0).count();
    let mut warnings = Vec::new();
    if rank < n {
        warnings.push(format!("Gram matrix is rank deficient: rank {rank} of {n}"));
    }
    let m_mat = if has_rhs {
        let (x, _) = compressed.solve(psi_cut)?;
        x.transpose()
    } else {
        times_gram_pinv(&compressed, m, &a_hat, psi_cut)?
    };
    let adjoint_m = times_gram_pinv(&compressed, m, &a_hat.transpose(), psi_cut)?;
    Ok(GeneratorEstimate {
        a_hat,
        g_hat,
        m: m_mat,
        adjoint_m,
        rank,
        svd_cutoff: opts.svd_cutoff,
        samples: m,
        dictionary,
        warnings,
        compressed,
    })
}

fn check_sample(dict: &Dictionary, sample: &SampleSet) -> Result<()> {
    if sample.dim() != dict.dim() {
        return Err(Error::Input(format!(
            "samples have dimension {}, dictionary expects {}",
            sample.dim(),
            dict.dim()
        )));
    }
    sample.validate()
}

fn eval_at(dict: &Dictionary, sample: &SampleSet, l: usize, derivs: Derivs, pe: &mut PointEval) -> Result<()> {
    let x: Vec<f64> = sample.points.row(l).iter().copied().collect();
    dict.eval_point(&x, derivs, pe).map_err(|e| match e {
        Error::Domain { detail, .. } => Error::Domain { index: l, detail },
        other => other,
    })
}

/// `dψ_k(x) = b(x)·∇ψ_k(x) + ½ a(x):∇²ψ_k(x)` for one evaluated point.
pub fn dpsi_point(pe: &PointEval, n: usize, d: usize, b: &[f64], a: Option<&[f64]>, out: &mut [f64]) {
    for k in 0..n {
        let mut v = 0.0;
        for j in 0..d {
            v += b[j] * pe.grads[k * d + j];
        }
        if let Some(a) = a {
            let mut s = 0.0;
            let h = &pe.hess[k * d * d..(k + 1) * d * d];
            for j in 0..d {
                for q in 0..d {
                    s += a[j * d + q] * h[j * d + q];
                }
            }
            if s != 0.0 {
                v += 0.5 * s;
            }
        }
        out[k] = v;
    }
}

fn gedmd_general(dict: &Dictionary, sample: &SampleSet, opts: &GedmdOptions, second_order: bool) -> Result<GeneratorEstimate> {
    check_sample(dict, sample)?;
    let diffusion = if second_order {
        Some(
            sample
                .diffusion
                .as_ref()
                .ok_or_else(|| Error::Input("stochastic gEDMD needs diffusion samples".into()))?,
        )
    } else {
        None
    };
    let n = dict.size();
    let d = dict.dim();
    let derivs = if second_order { Derivs::Hessian } else { Derivs::Gradient };
    assemble(sample.len(), n, opts, Some(dict.kind().clone()), |range| {
        let rows = range.len();
        let mut psi = Mat::zeros(rows, n);
        let mut dpsi = Mat::zeros(rows, n);
        let mut pe = PointEval::default();
        let mut out = vec![0.0; n];
        let mut b = vec![0.0; d];
        let mut a = vec![0.0; d * d];
        for (r, l) in range.enumerate() {
            eval_at(dict, sample, l, derivs, &mut pe)?;
            for j in 0..d {
                b[j] = sample.drift[(l, j)];
            }
            let a_ref = diffusion.map(|mat| {
                for q in 0..d * d {
                    a[q] = mat[(l, q)];
                }
                a.as_slice()
            });
            dpsi_point(&pe, n, d, &b, a_ref, &mut out);
            for k in 0..n {
                psi[(r, k)] = pe.values[k];
                dpsi[(r, k)] = out[k];
            }
        }
        let a_c = dpsi.transpose() * &psi;
        Ok(ChunkRows { psi, dpsi: Some(dpsi), a: a_c })
    })
}

/// Deterministic gEDMD: `dψ_k = b·∇ψ_k`.
pub fn gedmd_deterministic(dict: &Dictionary, sample: &SampleSet, opts: &GedmdOptions) -> Result<GeneratorEstimate> {
    gedmd_general(dict, sample, opts, false)
}

/// Stochastic gEDMD: `dψ_k = b·∇ψ_k + ½ a:∇²ψ_k`.
pub fn gedmd_stochastic(dict: &Dictionary, sample: &SampleSet, opts: &GedmdOptions) -> Result<GeneratorEstimate> {
    gedmd_general(dict, sample, opts, true)
}

/// Reversible form: `Â = -(1/2m) Σ ∇Ψ a ∇Ψᵀ`, exactly symmetric. Only first
/// derivatives of the basis are needed, and no drift information.
pub fn gedmd_reversible(dict: &Dictionary, sample: &SampleSet, opts: &GedmdOptions) -> Result<GeneratorEstimate> {
    check_sample(dict, sample)?;
    let diffusion = sample
        .diffusion
        .as_ref()
        .ok_or_else(|| Error::Input("reversible gEDMD needs diffusion samples".into()))?;
    let n = dict.size();
    let d = dict.dim();
    assemble(sample.len(), n, opts, Some(dict.kind().clone()), |range| {
        let rows = range.len();
        let mut psi = Mat::zeros(rows, n);
        let mut pe = PointEval::default();
        let mut a_c = Mat::zeros(n, n);
        let mut grad = Mat::zeros(n, d);
        for (r, l) in range.enumerate() {
            eval_at(dict, sample, l, Derivs::Gradient, &mut pe)?;
            for k in 0..n {
                psi[(r, k)] = pe.values[k];
                for j in 0..d {
                    grad[(k, j)] = pe.grads[k * d + j];
                }
            }
            let a = Mat::from_row_slice(d, d, diffusion.row(l).transpose().as_slice());
            let ga = &grad * a;
            a_c.gemm(-0.5, &ga, &grad.transpose(), 1.0);
        }
        symmetrize(&mut a_c);
        Ok(ChunkRows { psi, dpsi: None, a: a_c })
    })
}

/// Copies the upper triangle onto the lower one.
pub(crate) fn symmetrize(a: &mut Mat) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            a[(j, i)] = a[(i, j)];
        }
    }
}

/// `M* = Âᵀ Ĝ⁺`, the matrix of the Perron–Frobenius generator.
pub fn perron_frobenius_estimate(est: &GeneratorEstimate) -> Mat {
    est.adjoint_m.clone()
}

/// EDMD matrix `K` (with `K ψ(x) ≈ ψ(y)`) from lagged pairs.
pub fn edmd(dict: &Dictionary, x: &Mat, y: &Mat, opts: &GedmdOptions) -> Result<Mat> {
    if x.shape() != y.shape() {
        return Err(Error::Input("lagged point sets differ in shape".into()));
    }
    let psi_x = dict.evaluate_values(x)?;
    let psi_y = dict.evaluate_values(y)?;
    let c = CompressedLstsq::from_dense(&psi_x.transpose(), &psi_y.transpose());
    let (k, _) = c.solve(opts.psi_cutoff())?;
    Ok(k.transpose())
}

/// `(1/τ) log K̂_τ` for the EDMD matrix of lag `τ`.
pub fn edmd_with_log(dict: &Dictionary, x: &Mat, y: &Mat, tau: f64, opts: &GedmdOptions) -> Result<Mat> {
    if !(tau > 0.0) {
        return Err(Error::Input(format!("lag must be positive, got {tau}")));
    }
    let k = edmd(dict, x, y, opts)?;
    Ok(logm(&k)? / tau)
}

/// Gram matrix `∫ ψ ψᵀ` under the uniform density on a box, by a tensor
/// Gauss–Legendre rule with `nodes` points per axis.
pub fn uniform_gram(dict: &Dictionary, bounds: &[[f64; 2]], nodes: usize) -> Result<Mat> {
    let d = dict.dim();
    if bounds.len() != d || nodes == 0 {
        return Err(Error::Input("box must match the dictionary dimension and nodes must be positive".into()));
    }
    let (x, w) = gauss_legendre(nodes);
    let total = nodes.pow(d as u32);
    let mut pts = Mat::zeros(total, d);
    let mut wts = vec![1.0; total];
    for p in 0..total {
        let mut rest = p;
        for (j, [lo, hi]) in bounds.iter().enumerate() {
            let k = rest % nodes;
            rest /= nodes;
            pts[(p, j)] = lo + 0.5 * (hi - lo) * (x[k] + 1.0);
            wts[p] *= 0.5 * w[k];
        }
    }
    let psi = dict.evaluate_values(&pts)?;
    let weighted = Mat::from_fn(psi.nrows(), total, |i, p| psi[(i, p)] * wts[p]);
    Ok(weighted * psi.transpose())
}

/// Count of entries with magnitude above `tol`.
pub fn nonzero_count(m: &Mat, tol: f64) -> usize {
    m.iter().filter(|v| v.abs() > tol).count()
}

impl Dictionary {
    /// `n × m` matrix of basis values only.
    pub fn evaluate_values(&self, points: &Mat) -> Result<Mat> {
        let (m, d) = points.shape();
        if points.ncols() != self.dim() {
            return Err(Error::Input(format!("points have {d} columns, dictionary dimension is {}", self.dim())));
        }
        let n = self.size();
        let mut out = Mat::zeros(n, m);
        let mut pe = PointEval::default();
        for l in 0..m {
            let x: Vec<f64> = points.row(l).iter().copied().collect();
            self.eval_point(&x, Derivs::None, &mut pe).map_err(|e| match e {
                Error::Domain { detail, .. } => Error::Domain { index: l, detail },
                other => other,
            })?;
            out.column_mut(l).copy_from_slice(&pe.values);
        }
        Ok(out)
    }
}
