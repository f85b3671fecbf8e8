mod common;

use gedmd::coarse_grain::*;
use gedmd::dictionary::{BasisKind, Dictionary};
use gedmd::generator::GedmdOptions;
use gedmd::linalg::Mat;
use gedmd::models::{exact_samples, sample_lemon_slice, SdeModel};
use gedmd::spectral::decompose;
use gedmd::sysid::identify_drift;
use std::f64::consts::PI;

#[test]
fn angle_model_matches_one_dimensional_reference() {
    let model = SdeModel::lemon_slice(4.0, 1.0);
    let pts = sample_lemon_slice(4.0, 1.0, 20_000, 11);
    let s = exact_samples(&model, &pts, "invariant").unwrap();
    let map = CoarseGrainMap::PolarAngle;
    let dict = Dictionary::new(BasisKind::Legendre { max_degree: 20, domain: vec![[-PI, PI]] }).unwrap();
    let opts = GedmdOptions::default();
    let est = coarse_gedmd(&map, &dict, &s, &opts).unwrap();
    let dec = decompose(&est).unwrap();
    let ts = dec.implied_timescales(1, 3);
    let rev = coarse_gedmd_reversible(&map, &dict, &s, &opts).unwrap();
    let dec_r = decompose(&rev).unwrap();
    let c = common::lemon_inverse_r2();
    let oracle = common::finite_volume_timescales(|x| (4.0 * x).cos() + 1.0 / (0.5 * x).cos(), 2.0 * c, 2000, 3);
    // diffusion
    let z = reduced_points(&map, &pts).unwrap();
    let centers: Vec<f64> = (0..29).map(|i| -2.8 + 0.2 * i as f64).collect();
    let dbasis = Dictionary::new(BasisKind::PeriodicGaussians { centers, bandwidth: 2.0, period: 2.0 * PI }).unwrap();
    let design = diffusion_design(&z, &dict, &dbasis).unwrap();
    let theta = fit_diffusion(&rev.a_hat, &design, true, Some((&dbasis, &z))).unwrap();
    // force
    let keep: Vec<usize> = (0..z.nrows()).filter(|&l| z[(l, 0)].abs() <= 2.8).collect();
    let fpts = pts.select_rows(keep.iter());
    let grad = |x: &[f64], g: &mut [f64]| {
        let b = model.drift_vec(x);
        g[0] = -b[0];
        g[1] = -b[1];
    };
    let fcenters: Vec<Vec<f64>> = (0..57).map(|i| vec![-2.8 + 0.1 * i as f64]).collect();
    let fbasis = Dictionary::new(BasisKind::Gaussians { centers: fcenters, bandwidth: 0.15 }).unwrap();
    let fit = force_matching(&fpts, &grad, &map, &fbasis, &opts).unwrap();
    let rm = ReducedModel {
        force_basis: fbasis.kind().clone(),
        force_coeffs: fit.force_coeffs.column(0).iter().copied().collect(),
        diffusion_basis: dbasis.kind().clone(),
        theta: theta.clone(),
    };
    let grid = rm.grid(-2.8, 2.8, 113).unwrap();
    let avals: Vec<f64> = grid.iter().map(|r| r[3]).collect();
    let mean = avals.iter().sum::<f64>() / avals.len() as f64;
    let sd = (avals.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / avals.len() as f64).sqrt();
    let fref: Vec<f64> = grid.iter().map(|r| (4.0 * r[0]).cos() + 1.0 / (0.5 * r[0]).cos()).collect();
    let off = grid.iter().zip(&fref).map(|(r, f)| f - r[1]).sum::<f64>() / grid.len() as f64;
    let frms = (grid.iter().zip(&fref).map(|(r, f)| (r[1] + off - f).powi(2)).sum::<f64>() / grid.len() as f64).sqrt();
    let frel = frms / (fref.iter().map(|f| f * f).sum::<f64>() / grid.len() as f64).sqrt();
    // drift
    let sel = dict.full_state_selector().unwrap();
    let bcoef = identify_drift(&est, &sel);
    let zg = Mat::from_fn(81, 1, |i, _| -2.0 + 0.05 * i as f64);
    let vals = dict.evaluate_values(&zg).unwrap();
    let direct = vals.transpose() * bcoef.column(0);
    let recon: Vec<f64> = (0..81).map(|i| rm.drift(zg[(i, 0)]).unwrap()).collect();
    let diff: f64 = (0..81).map(|i| (recon[i] - direct[i]).powi(2)).sum::<f64>();
    let drel = (diff / direct.norm_squared()).sqrt();
    let shape: Vec<f64> = (0..81)
        .map(|i| {
            let z = zg[(i, 0)];
            4.0 * (4.0 * z).sin() - 0.5 * (0.5 * z).tan() / (0.5 * z).cos()
        })
        .collect();
    let direct_vals: Vec<f64> = direct.iter().copied().collect();
    let corr = common::correlation(&direct_vals, &shape);
    assert!(corr > 0.98, "drift shape correlation {corr}");
    assert!(sd / mean < 0.05, "a^phi varies: sd/mean = {}", sd / mean);
    assert!((mean - 2.0 * c).abs() / (2.0 * c) < 0.05);
    assert!(frel < 0.05, "potential error {frel}");
    assert!(drel < 0.1, "drift mismatch {drel}");
    assert_eq!(fit.excluded, 0);
    for (name, got) in [("stochastic", &ts), ("reversible", &dec_r.implied_timescales(1, 3))] {
        for (t, o) in got.iter().zip(&oracle) {
            assert!((t - o).abs() / o < 0.1, "{name} time scale {t} vs {o}");
        }
    }
}
