//! Generators of reduced coordinates: chain-rule gEDMD on `ξ(x)`, force
//! matching for the effective potential and fitting of the effective
//! diffusion.

use serde::{Deserialize, Serialize};

use crate::dictionary::{BasisKind, Derivs, Dictionary, PointEval};
use crate::error::{Error, Result};
use crate::generator::{dpsi_point, gedmd_reversible, gedmd_stochastic, GedmdOptions, GeneratorEstimate};
use crate::linalg::{nnls, CompressedLstsq, Mat, Vector};
use crate::models::SampleSet;

/// Reduced coordinates `z = ξ(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CoarseGrainMap {
    Identity { dim: usize },
    /// `z = P x` with `P` given row by row (`p × d`).
    Linear { rows: Vec<Vec<f64>> },
    /// Angle `atan2(x₂, x₁)` of a planar point.
    PolarAngle,
}

/// `ξ`, its Jacobian and Hessians at a single point.
///
/// `jac[j * p + q] = ∂ξ_q/∂x_j`, `hess[(q * d + j) * d + k] = ∂²ξ_q/∂x_j∂x_k`.
#[derive(Debug, Clone, Default)]
pub struct MapEval {
    pub z: Vec<f64>,
    pub jac: Vec<f64>,
    pub hess: Vec<f64>,
}

impl CoarseGrainMap {
    pub fn input_dim(&self) -> usize {
        match self {
            CoarseGrainMap::Identity { dim } => *dim,
            CoarseGrainMap::Linear { rows } => rows.first().map_or(0, |r| r.len()),
            CoarseGrainMap::PolarAngle => 2,
        }
    }

    pub fn reduced_dim(&self) -> usize {
        match self {
            CoarseGrainMap::Identity { dim } => *dim,
            CoarseGrainMap::Linear { rows } => rows.len(),
            CoarseGrainMap::PolarAngle => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            CoarseGrainMap::Identity { dim } if *dim == 0 => Err(Error::Input("identity map needs dim ≥ 1".into())),
            CoarseGrainMap::Linear { rows } => {
                let d = self.input_dim();
                if rows.is_empty() || d == 0 || rows.iter().any(|r| r.len() != d) {
                    Err(Error::Input("linear map rows must be nonempty and of equal length".into()))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    fn has_curvature(&self) -> bool {
        matches!(self, CoarseGrainMap::PolarAngle)
    }

    pub fn eval(&self, x: &[f64], out: &mut MapEval) -> Result<()> {
        let d = self.input_dim();
        let p = self.reduced_dim();
        if x.len() != d {
            return Err(Error::Input(format!("point has dimension {}, map expects {d}", x.len())));
        }
        out.z.clear();
        out.z.resize(p, 0.0);
        out.jac.clear();
        out.jac.resize(d * p, 0.0);
        out.hess.clear();
        out.hess.resize(p * d * d, 0.0);
        match self {
            CoarseGrainMap::Identity { .. } => {
                out.z.copy_from_slice(x);
                for j in 0..d {
                    out.jac[j * p + j] = 1.0;
                }
            }
            CoarseGrainMap::Linear { rows } => {
                for (q, row) in rows.iter().enumerate() {
                    out.z[q] = row.iter().zip(x).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        out.jac[j * p + q] = row[j];
                    }
                }
            }
            CoarseGrainMap::PolarAngle => {
                let (x1, x2) = (x[0], x[1]);
                let r2 = x1 * x1 + x2 * x2;
                if !(r2 > 0.0) {
                    return Err(Error::Domain { index: 0, detail: "polar angle is undefined at the origin".into() });
                }
                let r4 = r2 * r2;
                out.z[0] = x2.atan2(x1);
                out.jac[0] = -x2 / r2;
                out.jac[1] = x1 / r2;
                out.hess[0] = 2.0 * x1 * x2 / r4;
                out.hess[1] = (x2 * x2 - x1 * x1) / r4;
                out.hess[2] = out.hess[1];
                out.hess[3] = -out.hess[0];
            }
        }
        Ok(())
    }

    fn check(&self, dict: &Dictionary, sample: &SampleSet) -> Result<()> {
        self.validate()?;
        if sample.dim() != self.input_dim() {
            return Err(Error::Input(format!(
                "samples have dimension {}, map expects {}",
                sample.dim(),
                self.input_dim()
            )));
        }
        if dict.dim() != self.reduced_dim() {
            return Err(Error::Input(format!(
                "reduced dictionary has dimension {}, map produces {}",
                dict.dim(),
                self.reduced_dim()
            )));
        }
        Ok(())
    }
}

/// Pushes the samples through `ξ`: points `z`, drift `b·∇ξ + ½ a:H^ξ` and
/// diffusion `∇ξᵀ a ∇ξ`.
pub fn reduce_sample(map: &CoarseGrainMap, sample: &SampleSet) -> Result<SampleSet> {
    map.validate()?;
    let d = map.input_dim();
    let p = map.reduced_dim();
    if sample.dim() != d {
        return Err(Error::Input(format!("samples have dimension {}, map expects {d}", sample.dim())));
    }
    if let CoarseGrainMap::Identity { .. } = map {
        return Ok(sample.clone());
    }
    let m = sample.len();
    let mut points = Mat::zeros(m, p);
    let mut drift = Mat::zeros(m, p);
    let mut diffusion = sample.diffusion.as_ref().map(|_| Mat::zeros(m, p * p));
    let mut me = MapEval::default();
    for l in 0..m {
        map.eval(&sample.point(l), &mut me).map_err(|e| match e {
            Error::Domain { detail, .. } => Error::Domain { index: l, detail },
            other => other,
        })?;
        let a = sample.diffusion_at(l);
        for q in 0..p {
            points[(l, q)] = me.z[q];
            let mut v = 0.0;
            for j in 0..d {
                v += sample.drift[(l, j)] * me.jac[j * p + q];
            }
            if let (Some(a), true) = (&a, map.has_curvature()) {
                let h = &me.hess[q * d * d..(q + 1) * d * d];
                v += 0.5 * a.iter().zip(h).map(|(x, y)| x * y).sum::<f64>();
            }
            drift[(l, q)] = v;
        }
        if let (Some(a), Some(out)) = (&a, diffusion.as_mut()) {
            for q in 0..p {
                for s in 0..p {
                    let mut v = 0.0;
                    for j in 0..d {
                        for k in 0..d {
                            v += me.jac[j * p + q] * a[j * d + k] * me.jac[k * p + s];
                        }
                    }
                    out[(l, q * p + s)] = v;
                }
            }
        }
    }
    let s = SampleSet {
        points,
        drift,
        diffusion,
        source: sample.source.clone(),
        measure_note: sample.measure_note.clone(),
    };
    s.validate()?;
    Ok(s)
}

/// `dψ̃_k(x)` for `ψ̃_k = ψ_k∘ξ`, one row per sample (`m × n`).
pub fn coarse_dpsi(map: &CoarseGrainMap, dict: &Dictionary, sample: &SampleSet) -> Result<Mat> {
    map.check(dict, sample)?;
    let reduced = reduce_sample(map, sample)?;
    let (n, p) = (dict.size(), dict.dim());
    let derivs = if reduced.diffusion.is_some() { Derivs::Hessian } else { Derivs::Gradient };
    let mut out = Mat::zeros(reduced.len(), n);
    let mut pe = PointEval::default();
    let mut row = vec![0.0; n];
    for l in 0..reduced.len() {
        dict.eval_point(&reduced.point(l), derivs, &mut pe)?;
        let b: Vec<f64> = reduced.drift.row(l).iter().copied().collect();
        let a = reduced.diffusion_at(l);
        dpsi_point(&pe, n, p, &b, a.as_deref(), &mut row);
        for k in 0..n {
            out[(l, k)] = row[k];
        }
    }
    Ok(out)
}

/// Galerkin estimate of the reduced generator from full-space samples.
pub fn coarse_gedmd(map: &CoarseGrainMap, dict: &Dictionary, sample: &SampleSet, opts: &GedmdOptions) -> Result<GeneratorEstimate> {
    map.check(dict, sample)?;
    let reduced = reduce_sample(map, sample)?;
    if reduced.diffusion.is_some() {
        gedmd_stochastic(dict, &reduced, opts)
    } else {
        crate::generator::gedmd_deterministic(dict, &reduced, opts)
    }
}

/// Symmetric (reversible) form of [`coarse_gedmd`].
pub fn coarse_gedmd_reversible(
    map: &CoarseGrainMap,
    dict: &Dictionary,
    sample: &SampleSet,
    opts: &GedmdOptions,
) -> Result<GeneratorEstimate> {
    map.check(dict, sample)?;
    gedmd_reversible(dict, &reduce_sample(map, sample)?, opts)
}

fn small_inverse(a: &Mat) -> Option<Mat> {
    let inv = a.clone().try_inverse()?;
    let cond = a.norm() * inv.norm();
    (cond.is_finite() && cond < 1e12).then_some(inv)
}

/// Local mean force `f = -∇F·G + ∇·G` with `G = ∇ξ (∇ξᵀ∇ξ)⁻¹`.
///
/// Returns `None` when `∇ξ` is numerically rank deficient at `x`.
pub fn local_mean_force(map: &CoarseGrainMap, grad_f: &[f64], x: &[f64], me: &mut MapEval) -> Result<Option<Vec<f64>>> {
    let d = map.input_dim();
    let p = map.reduced_dim();
    map.eval(x, me)?;
    let j = Mat::from_row_slice(d, p, &me.jac);
    let s = match small_inverse(&(j.transpose() * &j)) {
        Some(s) => s,
        None => return Ok(None),
    };
    let g = &j * &s;
    let mut f = vec![0.0; p];
    for q in 0..p {
        f[q] = -(0..d).map(|i| grad_f[i] * g[(i, q)]).sum::<f64>();
    }
    if map.has_curvature() {
        // ∂_k G = (∂_k J) S − J S (∂_k Jᵀ J + Jᵀ ∂_k J) S
        for k in 0..d {
            let dj = Mat::from_fn(d, p, |i, q| me.hess[(q * d + i) * d + k]);
            let ds = -(&s * (dj.transpose() * &j + j.transpose() * &dj) * &s);
            let dg = &dj * &s + &j * ds;
            for q in 0..p {
                f[q] += dg[(k, q)];
            }
        }
    }
    Ok(Some(f))
}

/// Result of a force-matching regression.
#[derive(Debug, Clone)]
pub struct ForceFit {
    /// `n × p`: column `q` holds the coefficients of the mean-force component
    /// `-∂F^ξ/∂z_q`.
    pub force_coeffs: Mat,
    pub excluded: usize,
    pub basis: BasisKind,
}

/// Least-squares fit of the local mean force by functions of `z`.
///
/// `grad_potential` is the gradient of the full potential in units of `kT`
/// (that is, of `βV`).
pub fn force_matching(
    points: &Mat,
    grad_potential: &dyn Fn(&[f64], &mut [f64]),
    map: &CoarseGrainMap,
    basis: &Dictionary,
    opts: &GedmdOptions,
) -> Result<ForceFit> {
    map.validate()?;
    let d = map.input_dim();
    let p = map.reduced_dim();
    if points.ncols() != d || basis.dim() != p {
        return Err(Error::Input("dimensions of points, map and basis disagree".into()));
    }
    let mut me = MapEval::default();
    let mut grad = vec![0.0; d];
    let mut zs = Vec::new();
    let mut targets = Vec::new();
    let mut excluded = 0;
    for l in 0..points.nrows() {
        let x: Vec<f64> = points.row(l).iter().copied().collect();
        grad_potential(&x, &mut grad);
        let f = match map.eval(&x, &mut me) {
            Ok(()) => local_mean_force(map, &grad, &x, &mut me)?,
            Err(Error::Domain { .. }) => None,
            Err(e) => return Err(e),
        };
        match f {
            Some(f) if f.iter().all(|v| v.is_finite()) => {
                zs.extend_from_slice(&me.z);
                targets.extend(f);
            }
            _ => excluded += 1,
        }
    }
    let m = zs.len() / p;
    if m == 0 {
        return Err(Error::Input("no usable samples for force matching".into()));
    }
    let z = Mat::from_row_slice(m, p, &zs);
    let rhs = Mat::from_row_slice(m, p, &targets);
    let psi = basis.evaluate_values(&z)?;
    let (coeffs, _) = CompressedLstsq::from_dense(&psi.transpose(), &rhs).solve(opts.psi_cutoff())?;
    Ok(ForceFit { force_coeffs: coeffs, excluded, basis: basis.kind().clone() })
}

/// Cumulative trapezoid integral of `-force` on a grid, zero at `grid[0]`.
pub fn integrate_potential(grid: &[f64], force: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(grid.len());
    let mut acc = 0.0;
    for i in 0..grid.len() {
        if i > 0 {
            acc -= 0.5 * (force[i] + force[i - 1]) * (grid[i] - grid[i - 1]);
        }
        out.push(acc);
    }
    out
}

/// Design of the diffusion fit: `A_k[i,j] = -½ ⟨∇ψ_i · g_k ∇ψ_j⟩` for an
/// isotropic reduced diffusion `a^ξ(z) = Σ θ_k g_k(z) I`.
pub fn diffusion_design(reduced_points: &Mat, dict: &Dictionary, diffusion_basis: &Dictionary) -> Result<Vec<Mat>> {
    let (m, p) = reduced_points.shape();
    if dict.dim() != p || diffusion_basis.dim() != p {
        return Err(Error::Input("reduced dictionary, diffusion basis and points disagree in dimension".into()));
    }
    if m == 0 {
        return Err(Error::Input("no samples".into()));
    }
    let n = dict.size();
    let kb = diffusion_basis.size();
    let gvals = diffusion_basis.evaluate_values(reduced_points)?;
    let mut out = vec![Mat::zeros(n, n); kb];
    let mut pe = PointEval::default();
    for l in 0..m {
        let z: Vec<f64> = reduced_points.row(l).iter().copied().collect();
        dict.eval_point(&z, Derivs::Gradient, &mut pe)?;
        let grad = Mat::from_row_slice(n, p, &pe.grads);
        let outer = &grad * grad.transpose();
        for k in 0..kb {
            let w = gvals[(k, l)];
            if w != 0.0 {
                out[k] += &outer * (-0.5 * w / m as f64);
            }
        }
    }
    Ok(out)
}

/// `θ` minimizing `‖Â − Σ θ_k A_k‖_F`, optionally with `θ ≥ 0`.
pub fn fit_diffusion(a_hat: &Mat, design: &[Mat], positivity: bool, diffusion_basis: Option<(&Dictionary, &Mat)>) -> Result<Vec<f64>> {
    if design.is_empty() {
        return Err(Error::Input("diffusion model has no parameters".into()));
    }
    if design.iter().any(|a| a.shape() != a_hat.shape()) {
        return Err(Error::Input("design matrices do not match the Galerkin matrix".into()));
    }
    if positivity {
        if let Some((basis, points)) = diffusion_basis {
            let vals = basis.evaluate_values(points)?;
            if vals.iter().any(|&v| v < 0.0) {
                return Err(Error::Optimization(
                    "nonnegativity is only enforced for nonnegative diffusion basis functions".into(),
                ));
            }
        }
    }
    let rows = a_hat.len();
    let x = Mat::from_fn(rows, design.len(), |r, k| design[k].as_slice()[r]);
    let y = Vector::from_column_slice(a_hat.as_slice());
    let theta = if positivity {
        nnls(&x, &y, 50 * design.len().max(10))?
    } else {
        let (t, _) = CompressedLstsq::from_dense(&x, &Mat::from_column_slice(rows, 1, y.as_slice())).solve(1e-12)?;
        t.column(0).into_owned()
    };
    Ok(theta.iter().copied().collect())
}

/// `Σ θ_k A_k`.
pub fn combine_design(design: &[Mat], theta: &[f64]) -> Mat {
    let mut out = Mat::zeros(design[0].nrows(), design[0].ncols());
    for (a, t) in design.iter().zip(theta) {
        out += a * *t;
    }
    out
}

/// One-dimensional reversible reduced model built from a force fit and a
/// diffusion fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReducedModel {
    pub force_basis: BasisKind,
    /// Coefficients of the mean force `-dF^ξ/dz`.
    pub force_coeffs: Vec<f64>,
    pub diffusion_basis: BasisKind,
    pub theta: Vec<f64>,
}

impl ReducedModel {
    fn scalar(kind: &BasisKind, coeffs: &[f64], z: f64) -> Result<(f64, f64)> {
        let dict = Dictionary::new(kind.clone())?;
        let mut pe = PointEval::default();
        dict.eval_point(&[z], Derivs::Gradient, &mut pe)?;
        let v = coeffs.iter().zip(&pe.values).map(|(c, v)| c * v).sum();
        let dv = coeffs.iter().zip(&pe.grads).map(|(c, v)| c * v).sum();
        Ok((v, dv))
    }

    /// `dF^ξ/dz`.
    pub fn potential_gradient(&self, z: f64) -> Result<f64> {
        Ok(-Self::scalar(&self.force_basis, &self.force_coeffs, z)?.0)
    }

    /// `(a^ξ(z), da^ξ/dz)`.
    pub fn diffusion(&self, z: f64) -> Result<(f64, f64)> {
        Self::scalar(&self.diffusion_basis, &self.theta, z)
    }

    /// `b^ξ = -½ a^ξ F^ξ' + ½ a^ξ'`.
    pub fn drift(&self, z: f64) -> Result<f64> {
        let (a, da) = self.diffusion(z)?;
        Ok(drift_from_potential(self.potential_gradient(z)?, a, da))
    }

    /// `(z, F^ξ, b^ξ, a^ξ)` on a uniform grid, `F^ξ` anchored at `lo`.
    pub fn grid(&self, lo: f64, hi: f64, points: usize) -> Result<Vec<[f64; 4]>> {
        if points < 2 || !(hi > lo) {
            return Err(Error::Input("grid needs at least two points and lo < hi".into()));
        }
        let zs: Vec<f64> = (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect();
        let force = zs.iter().map(|&z| self.potential_gradient(z).map(|g| -g)).collect::<Result<Vec<_>>>()?;
        let pot = integrate_potential(&zs, &force);
        zs.iter()
            .zip(pot)
            .map(|(&z, f)| Ok([z, f, self.drift(z)?, self.diffusion(z)?.0]))
            .collect()
    }
}

/// Drift of a one-dimensional reversible model from `F'`, `a` and `a'`.
pub fn drift_from_potential(potential_gradient: f64, a: f64, a_prime: f64) -> f64 {
    -0.5 * a * potential_gradient + 0.5 * a_prime
}

/// Mean validation RMS of a force-matching fit for each candidate bandwidth
/// of a Gaussian basis, using `folds` interleaved folds.
pub fn cross_validate_bandwidth(
    z: &Mat,
    targets: &Mat,
    make_basis: &dyn Fn(f64) -> Result<Dictionary>,
    bandwidths: &[f64],
    folds: usize,
    opts: &GedmdOptions,
) -> Result<Vec<(f64, f64)>> {
    if folds < 2 || z.nrows() < folds {
        return Err(Error::Input("cross validation needs at least two folds and one sample per fold".into()));
    }
    let mut out = Vec::with_capacity(bandwidths.len());
    for &bw in bandwidths {
        let basis = make_basis(bw)?;
        let psi = basis.evaluate_values(z)?.transpose();
        let mut sq = 0.0;
        let mut count = 0usize;
        for f in 0..folds {
            let train: Vec<usize> = (0..z.nrows()).filter(|l| l % folds != f).collect();
            let test: Vec<usize> = (0..z.nrows()).filter(|l| l % folds == f).collect();
            let c = CompressedLstsq::from_dense(&psi.select_rows(train.iter()), &targets.select_rows(train.iter()));
            let (coeffs, _) = c.solve(opts.psi_cutoff())?;
            let pred = psi.select_rows(test.iter()) * coeffs;
            sq += (pred - targets.select_rows(test.iter())).norm_squared();
            count += test.len() * targets.ncols();
        }
        out.push((bw, (sq / count as f64).sqrt()));
    }
    Ok(out)
}

/// The bandwidth with the smallest validation loss.
pub fn best_bandwidth(losses: &[(f64, f64)]) -> Option<f64> {
    losses.iter().min_by(|a, b| a.1.total_cmp(&b.1)).map(|&(bw, _)| bw)
}

/// `ξ` applied row by row.
pub fn reduced_points(map: &CoarseGrainMap, points: &Mat) -> Result<Mat> {
    let mut me = MapEval::default();
    let p = map.reduced_dim();
    let mut out = Mat::zeros(points.nrows(), p);
    for l in 0..points.nrows() {
        let x: Vec<f64> = points.row(l).iter().copied().collect();
        map.eval(&x, &mut me)?;
        for q in 0..p {
            out[(l, q)] = me.z[q];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{exact_samples, sample_uniform, SdeModel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn polar_jacobian_matches_differences() {
        let map = CoarseGrainMap::PolarAngle;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut me = MapEval::default();
        let mut mp = MapEval::default();
        for _ in 0..50 {
            let x = [rng.random_range(-2.0..2.0), rng.random_range(0.2..2.0)];
            map.eval(&x, &mut me).unwrap();
            for j in 0..2 {
                let h = 1e-6;
                let mut xp = x;
                xp[j] += h;
                let mut xm = x;
                xm[j] -= h;
                map.eval(&xp, &mut mp).unwrap();
                let zp = mp.z[0];
                let gp = mp.jac.clone();
                map.eval(&xm, &mut mp).unwrap();
                let fd = (zp - mp.z[0]) / (2.0 * h);
                assert!((fd - me.jac[j]).abs() <= 1e-6 * me.jac[j].abs().max(1.0));
                for k in 0..2 {
                    let fdh = (gp[k] - mp.jac[k]) / (2.0 * h);
                    assert!((fdh - me.hess[k * 2 + j]).abs() <= 1e-5 * me.hess[k * 2 + j].abs().max(1.0));
                }
            }
        }
        assert!(matches!(map.eval(&[0.0, 0.0], &mut me), Err(Error::Domain { .. })));
    }

    #[test]
    fn identity_map_is_plain_gedmd() {
        let model = SdeModel::double_well();
        let pts = sample_uniform(&[[-2.0, 2.0], [-1.0, 1.0]], 300, 2).unwrap();
        let s = exact_samples(&model, &pts, "uniform").unwrap();
        let dict = Dictionary::monomials(2, 4);
        let opts = GedmdOptions::default();
        let a = coarse_gedmd(&CoarseGrainMap::Identity { dim: 2 }, &dict, &s, &opts).unwrap();
        let b = gedmd_stochastic(&dict, &s, &opts).unwrap();
        assert_eq!(a.m, b.m);
        assert_eq!(a.g_hat, b.g_hat);
    }

    #[test]
    fn polar_chain_rule_at_one_point() {
        // ψ(z) = z²  at x = (1, 0):  ∇φ = (0, 1), H^φ = [[0, -1], [-1, 0]]
        let model = SdeModel::lemon_slice(4.0, 1.0);
        let pts = Mat::from_row_slice(1, 2, &[1.0, 0.0]);
        let s = exact_samples(&model, &pts, "point").unwrap();
        let dict = Dictionary::monomials(1, 2);
        let dpsi = coarse_dpsi(&CoarseGrainMap::PolarAngle, &dict, &s).unwrap();
        let b = model.drift_vec(&[1.0, 0.0]);
        // dψ = b₂ ψ'(0) + ½ (a:H) ψ'(0) + ½ ψ''(0) · ∇φᵀ a ∇φ = 0 + 0 + ½·2·2
        assert!((dpsi[(0, 2)] - 2.0).abs() < 1e-10);
        // ψ = z: dψ = b·∇φ = b₂
        assert!((dpsi[(0, 1)] - b[1]).abs() < 1e-10);
    }

    #[test]
    fn linear_map_drops_curvature() {
        let model = SdeModel::double_well();
        let pts = sample_uniform(&[[-2.0, 2.0], [-1.0, 1.0]], 20, 2).unwrap();
        let s = exact_samples(&model, &pts, "uniform").unwrap();
        let map = CoarseGrainMap::Linear { rows: vec![vec![1.0, 0.0]] };
        let r = reduce_sample(&map, &s).unwrap();
        for l in 0..20 {
            assert_eq!(r.drift[(l, 0)], s.drift[(l, 0)]);
            assert_eq!(r.diffusion.as_ref().unwrap()[(l, 0)], s.diffusion.as_ref().unwrap()[(l, 0)]);
        }
    }

    #[test]
    fn mean_force_for_coordinate_projection() {
        let map = CoarseGrainMap::Linear { rows: vec![vec![1.0, 0.0]] };
        let mut me = MapEval::default();
        let f = local_mean_force(&map, &[3.0, -2.0], &[0.4, 0.1], &mut me).unwrap().unwrap();
        assert_eq!(f, vec![-3.0]);
    }

    #[test]
    fn separable_potential_is_recovered() {
        // F(x) = x1⁴/4 − x1² + x2²; ξ = x1 → F^ξ = x1⁴/4 − x1² up to a constant
        let pts = sample_uniform(&[[-2.0, 2.0], [-2.0, 2.0]], 100_000, 9).unwrap();
        let grad = |x: &[f64], g: &mut [f64]| {
            g[0] = x[0].powi(3) - 2.0 * x[0];
            g[1] = 2.0 * x[1];
        };
        let map = CoarseGrainMap::Linear { rows: vec![vec![1.0, 0.0]] };
        let basis = Dictionary::monomials(1, 4);
        let fit = force_matching(&pts, &grad, &map, &basis, &GedmdOptions::default()).unwrap();
        let c = fit.force_coeffs.column(0);
        let expected = [0.0, 2.0, 0.0, -1.0, 0.0];
        for (a, b) in c.iter().zip(expected) {
            assert!((a - b).abs() < 1e-3);
        }
        assert_eq!(fit.excluded, 0);
    }

    #[test]
    fn constant_diffusion_is_exact() {
        let model = SdeModel::ornstein_uhlenbeck(1.0, 4.0, 0.0);
        let pts = sample_uniform(&[[-2.0, 2.0]], 200, 1).unwrap();
        let s = exact_samples(&model, &pts, "uniform").unwrap();
        let dict = Dictionary::monomials(1, 5);
        let est = gedmd_reversible(&dict, &s, &GedmdOptions::default()).unwrap();
        let one = Dictionary::monomials(1, 0);
        let design = diffusion_design(&s.points, &dict, &one).unwrap();
        let theta = fit_diffusion(&est.a_hat, &design, true, Some((&one, &s.points))).unwrap();
        assert!((theta[0] - 0.5).abs() < 1e-8);
        let zero = fit_diffusion(&Mat::zeros(6, 6), &design, true, None).unwrap();
        assert_eq!(zero, vec![0.0]);
    }

    #[test]
    fn reduced_drift_formula() {
        assert_eq!(drift_from_potential(2.0 * 0.5, 3.0, 0.0), -1.5);
        // a = z², F = 0 → b = z
        let model = ReducedModel {
            force_basis: BasisKind::Monomials { dim: 1, max_degree: 0 },
            force_coeffs: vec![0.0],
            diffusion_basis: BasisKind::Monomials { dim: 1, max_degree: 2 },
            theta: vec![0.0, 0.0, 1.0],
        };
        assert!((model.drift(0.7).unwrap() - 0.7).abs() < 1e-15);
        let g = model.grid(0.0, 1.0, 5).unwrap();
        assert!(g.iter().all(|r| r[1] == 0.0));
    }

    #[test]
    fn trapezoid_anchor() {
        let grid = [0.0, 0.5, 1.0];
        let pot = integrate_potential(&grid, &[-1.0, -1.0, -1.0]);
        assert_eq!(pot, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn cross_validation_prefers_reasonable_width() {
        let z = Mat::from_fn(200, 1, |i, _| -2.0 + 4.0 * i as f64 / 199.0);
        let t = Mat::from_fn(200, 1, |i, _| (2.0 * z[(i, 0)]).sin());
        let centers: Vec<Vec<f64>> = (0..21).map(|i| vec![-2.0 + 0.2 * i as f64]).collect();
        let make = |bw: f64| Dictionary::new(BasisKind::Gaussians { centers: centers.clone(), bandwidth: bw });
        let losses = cross_validate_bandwidth(&z, &t, &make, &[0.01, 0.3], 5, &GedmdOptions::default()).unwrap();
        assert_eq!(best_bandwidth(&losses), Some(0.3));
    }
}
