//! Recovery of drift and diffusion coefficients from a generator estimate,
//! with optional iterative hard thresholding.

use serde::{Deserialize, Serialize};

use crate::dictionary::{Derivs, Dictionary, PointEval};
use crate::error::{Error, Result};
use crate::generator::{GedmdOptions, GeneratorEstimate};
use crate::linalg::{clip_psd, psd_cholesky, CompressedLstsq, Mat, Vector};
use crate::models::SampleSet;

/// What the hard threshold is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// Coefficients of `𝓛g` for each identified scalar function `g`
    /// (the coordinates and their pairwise products).
    #[default]
    GeneratorImages,
    /// Coefficients of the drift and of each diffusion entry `a_ij`.
    DiffusionEntries,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentifyOptions {
    #[serde(default)]
    pub threshold: f64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default)]
    pub mode: ThresholdMode,
    /// Coefficients below this size may fall outside the dictionary when
    /// multiplied by a coordinate.
    #[serde(default = "default_closure_tol")]
    pub closure_tol: f64,
    #[serde(default = "default_true")]
    pub diffusion: bool,
}

fn default_iterations() -> usize {
    10
}

fn default_closure_tol() -> f64 {
    1e-6
}

fn default_true() -> bool {
    true
}

impl Default for IdentifyOptions {
    fn default() -> Self {
        IdentifyOptions {
            threshold: 0.0,
            iterations: default_iterations(),
            mode: ThresholdMode::default(),
            closure_tol: default_closure_tol(),
            diffusion: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ThresholdResult {
    pub coeffs: Vector,
    /// `(iteration, surviving coefficients)`, iteration 0 is the plain fit.
    pub history: Vec<(usize, usize)>,
    pub warnings: Vec<String>,
}

/// Sequentially thresholded least squares on `design · c ≈ rhs`.
///
/// `δ = 0` returns the unthresholded least-squares solution.
pub fn hard_threshold(design: &Mat, rhs: &Vector, delta: f64, iterations: usize, rel_cutoff: f64) -> Result<ThresholdResult> {
    if !(delta >= 0.0) {
        return Err(Error::Input(format!("threshold must be nonnegative, got {delta}")));
    }
    let n = design.ncols();
    let rhs_m = Mat::from_column_slice(rhs.len(), 1, rhs.as_slice());
    let solve_on = |support: &[usize]| -> Result<Vector> {
        let sub = design.select_columns(support.iter());
        let c = CompressedLstsq::from_dense(&sub, &rhs_m);
        let (x, _) = c.solve(rel_cutoff)?;
        let mut full = Vector::zeros(n);
        for (k, &i) in support.iter().enumerate() {
            full[i] = x[(k, 0)];
        }
        Ok(full)
    };
    let mut support: Vec<usize> = (0..n).collect();
    let mut coeffs = solve_on(&support)?;
    let mut history = vec![(0, n)];
    let mut warnings = Vec::new();
    if delta == 0.0 {
        return Ok(ThresholdResult { coeffs, history, warnings });
    }
    for it in 1..=iterations {
        support.retain(|&i| coeffs[i].abs() >= delta);
        if support.is_empty() {
            warnings.push(format!("threshold {delta} removed every coefficient"));
            coeffs = Vector::zeros(n);
            history.push((it, 0));
            break;
        }
        coeffs = solve_on(&support)?;
        history.push((it, support.len()));
    }
    Ok(ThresholdResult { coeffs, history, warnings })
}

#[derive(Debug, Clone)]
pub struct IdentifiedModel {
    /// `n × d`, column `i` holds the coefficients of `b_i`.
    pub drift_coeffs: Mat,
    /// `n × d(d+1)/2`, upper triangle of `a` in row-major order.
    pub diffusion_coeffs: Option<Mat>,
    pub threshold_history: Vec<(usize, usize)>,
    pub warnings: Vec<String>,
    pub dim: usize,
}

/// Pairs `(i, j)` with `i ≤ j` in the column order of `diffusion_coeffs`.
pub fn upper_pairs(d: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(d * (d + 1) / 2);
    for i in 0..d {
        for j in i..d {
            out.push((i, j));
        }
    }
    out
}

/// Coefficients of `𝓛 g` for the full-state observable: `L̂ B`.
pub fn identify_drift(est: &GeneratorEstimate, selector: &Mat) -> Mat {
    est.l_hat() * selector
}

fn column(m: &Mat, j: usize) -> Vec<f64> {
    m.column(j).iter().copied().collect()
}

/// Coefficients of `x_i x_j` for the coordinates encoded by `selector`.
fn product_coeffs(dict: &Dictionary, selector: &Mat, i: usize, j: usize, tol: f64) -> Result<Vec<f64>> {
    dict.multiply_by_coordinate(&column(selector, i), j, tol)
}

/// `a_ij = 𝓛(x_i x_j) − b_i x_j − b_j x_i` in dictionary coefficients.
pub fn identify_diffusion(
    est: &GeneratorEstimate,
    dict: &Dictionary,
    selector: &Mat,
    drift_coeffs: &Mat,
    closure_tol: f64,
) -> Result<Mat> {
    let d = selector.ncols();
    let l = est.l_hat();
    let pairs = upper_pairs(d);
    let mut out = Mat::zeros(dict.size(), pairs.len());
    for (c, &(i, j)) in pairs.iter().enumerate() {
        let xij = Vector::from_vec(product_coeffs(dict, selector, i, j, closure_tol)?);
        let lij = &l * xij;
        let bixj = Vector::from_vec(dict.multiply_by_coordinate(&column(drift_coeffs, i), j, closure_tol)?);
        let bjxi = Vector::from_vec(dict.multiply_by_coordinate(&column(drift_coeffs, j), i, closure_tol)?);
        out.set_column(c, &(lij - bixj - bjxi));
    }
    Ok(out)
}

/// Drift and (for stochastic estimates) diffusion, optionally sparsified.
pub fn identify(est: &GeneratorEstimate, dict: &Dictionary, opts: &IdentifyOptions) -> Result<IdentifiedModel> {
    let selector = dict.full_state_selector()?;
    let d = selector.ncols();
    let n = dict.size();
    let mut warnings = est.warnings.clone();
    if opts.threshold == 0.0 {
        let drift = identify_drift(est, &selector);
        let diffusion = if opts.diffusion {
            Some(identify_diffusion(est, dict, &selector, &drift, opts.closure_tol)?)
        } else {
            None
        };
        return Ok(IdentifiedModel {
            drift_coeffs: drift,
            diffusion_coeffs: diffusion,
            threshold_history: vec![(0, n)],
            warnings,
            dim: d,
        });
    }
    let comp = &est.compressed;
    if comp.r12.ncols() != n {
        return Err(Error::Input(
            "thresholding needs the derivative data of a first- or second-order estimate".into(),
        ));
    }
    let psi_cut = GedmdOptions { svd_cutoff: est.svd_cutoff }.psi_cutoff();
    let mut history_total = vec![0usize; opts.iterations + 1];
    let mut record = |res: &ThresholdResult, warnings: &mut Vec<String>| {
        for &(it, count) in &res.history {
            history_total[it] += count;
        }
        if let Some(&(last_it, last_count)) = res.history.last() {
            for slot in history_total.iter_mut().skip(last_it + 1) {
                *slot += last_count;
            }
        }
        warnings.extend(res.warnings.iter().cloned());
    };
    // images 𝓛g for g = cᵀψ:   R11 y ≈ R12 c
    let fit_image = |c: &Vector, warnings: &mut Vec<String>, record: &mut dyn FnMut(&ThresholdResult, &mut Vec<String>)| -> Result<Vector> {
        let rhs = &comp.r12 * c;
        let res = hard_threshold(&comp.r11, &rhs, opts.threshold, opts.iterations, psi_cut)?;
        record(&res, warnings);
        Ok(res.coeffs)
    };
    let mut drift = Mat::zeros(n, d);
    for i in 0..d {
        let c = selector.column(i).into_owned();
        let y = fit_image(&c, &mut warnings, &mut record)?;
        drift.set_column(i, &y);
    }
    let diffusion = if opts.diffusion {
        let pairs = upper_pairs(d);
        let mut out = Mat::zeros(n, pairs.len());
        for (col, &(i, j)) in pairs.iter().enumerate() {
            let xij = Vector::from_vec(product_coeffs(dict, &selector, i, j, opts.closure_tol)?);
            let bixj = Vector::from_vec(dict.multiply_by_coordinate(&column(&drift, i), j, opts.closure_tol)?);
            let bjxi = Vector::from_vec(dict.multiply_by_coordinate(&column(&drift, j), i, opts.closure_tol)?);
            let products = bixj + bjxi;
            let aij = match opts.mode {
                ThresholdMode::GeneratorImages => fit_image(&xij, &mut warnings, &mut record)? - products,
                ThresholdMode::DiffusionEntries => {
                    // Ψᵀα ≈ dΨᵀ c − Ψᵀ(products)  →  R11 α ≈ R12 c − R11 products
                    let rhs = &comp.r12 * &xij - &comp.r11 * &products;
                    let res = hard_threshold(&comp.r11, &rhs, opts.threshold, opts.iterations, psi_cut)?;
                    record(&res, &mut warnings);
                    res.coeffs
                }
            };
            out.set_column(col, &aij);
        }
        Some(out)
    } else {
        None
    };
    let history = history_total.into_iter().enumerate().collect();
    Ok(IdentifiedModel { drift_coeffs: drift, diffusion_coeffs: diffusion, threshold_history: history, warnings, dim: d })
}

impl IdentifiedModel {
    /// `b(x)` from the drift coefficients.
    pub fn drift_at(&self, dict: &Dictionary, x: &[f64]) -> Result<Vec<f64>> {
        let mut pe = PointEval::default();
        dict.eval_point(x, Derivs::None, &mut pe)?;
        Ok((0..self.dim)
            .map(|i| self.drift_coeffs.column(i).iter().zip(&pe.values).map(|(c, v)| c * v).sum())
            .collect())
    }

    /// `a(x)` (row-major `d × d`, symmetric) from the diffusion coefficients.
    pub fn diffusion_at(&self, dict: &Dictionary, x: &[f64]) -> Result<Mat> {
        let coeffs = self
            .diffusion_coeffs
            .as_ref()
            .ok_or_else(|| Error::Input("model has no diffusion coefficients".into()))?;
        diffusion_matrix_at(coeffs, dict, x, self.dim)
    }

    /// RMS deviation of the identified drift from the drift samples.
    pub fn drift_rms(&self, dict: &Dictionary, sample: &SampleSet) -> Result<f64> {
        let mut acc = 0.0;
        for l in 0..sample.len() {
            let b = self.drift_at(dict, &sample.point(l))?;
            for (i, bi) in b.iter().enumerate() {
                acc += (bi - sample.drift[(l, i)]).powi(2);
            }
        }
        Ok((acc / (sample.len() * self.dim) as f64).sqrt())
    }
}

fn diffusion_matrix_at(coeffs: &Mat, dict: &Dictionary, x: &[f64], d: usize) -> Result<Mat> {
    let mut pe = PointEval::default();
    dict.eval_point(x, Derivs::None, &mut pe)?;
    let mut a = Mat::zeros(d, d);
    for (c, (i, j)) in upper_pairs(d).into_iter().enumerate() {
        let v: f64 = coeffs.column(c).iter().zip(&pe.values).map(|(c, v)| c * v).sum();
        a[(i, j)] = v;
        a[(j, i)] = v;
    }
    Ok(a)
}

/// Lower-triangular factor of the clipped diffusion matrix at each point.
///
/// Fails when `a(x)` is strongly indefinite (smallest eigenvalue below
/// `-1e-6 · trace`), which indicates a poor identification.
pub fn diffusion_factor(diffusion_coeffs: &Mat, dict: &Dictionary, points: &Mat, d: usize) -> Result<Vec<Mat>> {
    let mut out = Vec::with_capacity(points.nrows());
    for l in 0..points.nrows() {
        let x: Vec<f64> = points.row(l).iter().copied().collect();
        let a = diffusion_matrix_at(diffusion_coeffs, dict, &x, d)?;
        out.push(factor_of(&a).map_err(|e| match e {
            Error::Quality(msg) => Error::Quality(format!("point {l}: {msg}")),
            other => other,
        })?);
    }
    Ok(out)
}

/// Cholesky-type factor of a single (nearly) PSD matrix after clipping.
pub fn factor_of(a: &Mat) -> Result<Mat> {
    let sym = 0.5 * (a + a.transpose());
    let trace = sym.trace().abs();
    let min_eig = sym.symmetric_eigenvalues().min();
    if min_eig < -1e-6 * trace.max(f64::MIN_POSITIVE) {
        return Err(Error::Quality(format!(
            "diffusion matrix is indefinite (smallest eigenvalue {min_eig:.3e}, trace {trace:.3e})"
        )));
    }
    let clipped = if min_eig < 0.0 { clip_psd(&sym) } else { sym };
    Ok(psd_cholesky(&clipped))
}

/// Direct regression `Ẋ ≈ M_S Ψ_X` of the state derivatives on the
/// dictionary (`d × n`).
pub fn sindy_regression(dict: &Dictionary, sample: &SampleSet, opts: &GedmdOptions) -> Result<Mat> {
    let psi = dict.evaluate_values(&sample.points)?;
    let c = CompressedLstsq::from_dense(&psi.transpose(), &sample.drift);
    let (x, _) = c.solve(opts.psi_cutoff())?;
    Ok(x.transpose())
}

/// One entry of an exported term table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub index: usize,
    pub term: String,
    pub coefficient: f64,
}

/// Nonzero terms of a coefficient vector (|c| > tol).
pub fn term_table(dict: &Dictionary, coeffs: &[f64], tol: f64) -> Vec<Term> {
    coeffs
        .iter()
        .enumerate()
        .filter(|(_, c)| c.abs() > tol)
        .map(|(i, &c)| Term { index: i, term: dict.term_name(i), coefficient: c })
        .collect()
}

/// Mean absolute difference between two coefficient matrices.
pub fn mean_abs_difference(a: &Mat, b: &Mat) -> f64 {
    (a - b).iter().map(|v| v.abs()).sum::<f64>() / a.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{gedmd_deterministic, gedmd_stochastic};
    use crate::models::{exact_samples, sample_uniform, SdeModel};

    fn coeff(dict: &Dictionary, col: &[f64], exps: &[u32]) -> f64 {
        col[dict.index_of(exps).unwrap()]
    }

    #[test]
    fn ou_diffusion_is_constant() {
        let model = SdeModel::ornstein_uhlenbeck(1.0, 4.0, 0.0);
        let pts = sample_uniform(&[[-2.0, 2.0]], 100, 1).unwrap();
        let s = exact_samples(&model, &pts, "uniform").unwrap();
        let dict = Dictionary::monomials(1, 10);
        let est = gedmd_stochastic(&dict, &s, &GedmdOptions::default()).unwrap();
        let id = identify(&est, &dict, &IdentifyOptions::default()).unwrap();
        let a = id.diffusion_coeffs.unwrap();
        assert!((a[(0, 0)] - 0.5).abs() < 1e-8);
        assert!(a.column(0).rows(1, 10).amax() < 1e-8);
        assert!((id.drift_coeffs[(1, 0)] + 1.0).abs() < 1e-8);
    }

    #[test]
    fn double_well_exact() {
        let model = SdeModel::double_well();
        let pts = sample_uniform(&[[-2.0, 2.0], [-1.0, 1.0]], 8000, 3).unwrap();
        let s = exact_samples(&model, &pts, "uniform").unwrap();
        let dict = Dictionary::monomials(2, 4);
        let est = gedmd_stochastic(&dict, &s, &GedmdOptions::default()).unwrap();
        let id = identify(&est, &dict, &IdentifyOptions::default()).unwrap();
        let b1 = column(&id.drift_coeffs, 0);
        let b2 = column(&id.drift_coeffs, 1);
        assert!((coeff(&dict, &b1, &[1, 0]) - 4.0).abs() < 1e-6);
        assert!((coeff(&dict, &b1, &[3, 0]) + 4.0).abs() < 1e-6);
        assert!((coeff(&dict, &b2, &[0, 1]) + 2.0).abs() < 1e-6);
        let a = id.diffusion_coeffs.unwrap();
        let a11 = column(&a, 0);
        let a12 = column(&a, 1);
        let a22 = column(&a, 2);
        assert!((coeff(&dict, &a11, &[0, 0]) - 0.49).abs() < 1e-6);
        assert!((coeff(&dict, &a11, &[2, 0]) - 1.0).abs() < 1e-6);
        assert!((coeff(&dict, &a12, &[1, 0]) - 0.5).abs() < 1e-6);
        assert!((coeff(&dict, &a22, &[0, 0]) - 0.25).abs() < 1e-6);
    }

    #[test]
    fn cubic_dictionary_cannot_give_diffusion() {
        let model = SdeModel::double_well();
        let pts = sample_uniform(&[[-2.0, 2.0], [-1.0, 1.0]], 2000, 3).unwrap();
        let s = exact_samples(&model, &pts, "uniform").unwrap();
        let dict = Dictionary::monomials(2, 3);
        let est = gedmd_stochastic(&dict, &s, &GedmdOptions::default()).unwrap();
        let drift = identify_drift(&est, &dict.full_state_selector().unwrap());
        assert!((coeff(&dict, &column(&drift, 0), &[3, 0]) + 4.0).abs() < 1e-6);
        assert!(matches!(identify(&est, &dict, &IdentifyOptions::default()), Err(Error::Closure(_))));
    }

    #[test]
    fn deterministic_data_has_zero_diffusion() {
        let model = SdeModel::quadratic_ode(-0.8, -0.7);
        let pts = sample_uniform(&[[-2.0, 2.0], [-2.0, 2.0]], 500, 3).unwrap();
        let s = exact_samples(&model, &pts, "uniform").unwrap();
        let dict = Dictionary::monomials(2, 4);
        let est = gedmd_deterministic(&dict, &s, &GedmdOptions::default()).unwrap();
        let id = identify(&est, &dict, &IdentifyOptions::default()).unwrap();
        assert!(id.diffusion_coeffs.unwrap().amax() < 1e-8);
    }

    #[test]
    fn zero_drift_gives_zero_coefficients() {
        let model = SdeModel::ode("frozen", 2, std::sync::Arc::new(|_, o| o.fill(0.0)));
        let pts = sample_uniform(&[[-1.0, 1.0], [-1.0, 1.0]], 100, 3).unwrap();
        let s = exact_samples(&model, &pts, "uniform").unwrap();
        let dict = Dictionary::monomials(2, 2);
        let est = gedmd_deterministic(&dict, &s, &GedmdOptions::default()).unwrap();
        assert_eq!(identify_drift(&est, &dict.full_state_selector().unwrap()).amax(), 0.0);
    }

    #[test]
    fn zero_threshold_is_plain_least_squares() {
        let design = Mat::from_fn(30, 4, |i, j| ((i + 1) as f64 * 0.1).powi(j as i32));
        let rhs = Vector::from_fn(30, |i, _| (i as f64 * 0.2).cos());
        let res = hard_threshold(&design, &rhs, 0.0, 10, 1e-12).unwrap();
        let normal = (design.transpose() * &design).try_inverse().unwrap() * design.transpose() * &rhs;
        assert!((res.coeffs - normal).amax() < 1e-10);
    }

    #[test]
    fn support_never_grows() {
        let design = Mat::from_fn(40, 6, |i, j| ((i * (j + 2)) as f64 * 0.17).sin());
        let truth = Vector::from_vec(vec![1.0, 0.0, -0.5, 0.0, 0.02, 0.0]);
        let rhs = &design * &truth + Vector::from_fn(40, |i, _| 0.01 * (i as f64).sin());
        let res = hard_threshold(&design, &rhs, 0.1, 10, 1e-12).unwrap();
        assert!(res.history.windows(2).all(|w| w[1].1 <= w[0].1));
        assert_eq!(res.coeffs[4], 0.0);
        assert!((res.coeffs[0] - 1.0).abs() < 0.05);
    }

    #[test]
    fn threshold_removing_everything_warns() {
        let design = Mat::identity(3, 3);
        let rhs = Vector::from_vec(vec![0.1, 0.2, 0.3]);
        let res = hard_threshold(&design, &rhs, 1.0, 10, 1e-12).unwrap();
        assert_eq!(res.coeffs.amax(), 0.0);
        assert_eq!(res.warnings.len(), 1);
    }

    #[test]
    fn factors() {
        let f = factor_of(&Mat::from_element(1, 1, 0.5)).unwrap();
        assert!((f[(0, 0)] - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(factor_of(&Mat::identity(2, 2)).unwrap(), Mat::identity(2, 2));
        let a = Mat::from_row_slice(2, 2, &[1.49, 0.5, 0.5, 0.25]);
        let l = factor_of(&a).unwrap();
        assert!((&l * l.transpose() - &a).amax() < 1e-10);
        // direct 2×2 Cholesky
        let l11 = 1.49f64.sqrt();
        let l21 = 0.5 / l11;
        let l22 = (0.25 - l21 * l21).sqrt();
        assert!((l[(0, 0)] - l11).abs() < 1e-14 && (l[(1, 0)] - l21).abs() < 1e-14 && (l[(1, 1)] - l22).abs() < 1e-14);
        let bad = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(factor_of(&bad), Err(Error::Quality(_))));
    }
}
