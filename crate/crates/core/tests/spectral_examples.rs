use gedmd::dictionary::Dictionary;
use gedmd::generator::{gedmd_deterministic, gedmd_stochastic, GedmdOptions};
use gedmd::linalg::Mat;
use gedmd::models::{exact_samples, sample_uniform, SdeModel};
use gedmd::spectral::{decompose, eigenfunction_values, Normalization};
use nalgebra::Complex;

#[test]
fn zero_eigenvalue_eigenfunction_is_constant() {
    let model = SdeModel::ornstein_uhlenbeck(1.0, 4.0, 0.0);
    let dict = Dictionary::monomials(1, 8);
    let s = exact_samples(&model, &sample_uniform(&[[-2.0, 2.0]], 200, 4).unwrap(), "uniform").unwrap();
    let dec = decompose(&gedmd_stochastic(&dict, &s, &GedmdOptions::default()).unwrap()).unwrap();
    let l0 = dec.nearest(Complex::new(0.0, 0.0));
    let grid = Mat::from_fn(41, 1, |i, _| -2.0 + 0.1 * i as f64);
    let phi = eigenfunction_values(&dec, &dict, &grid).unwrap();
    let first = phi[(0, l0)];
    assert!(first.norm() > 0.5);
    for i in 0..grid.nrows() {
        assert!((phi[(i, l0)] - first).norm() < 1e-8, "row {i}: {}", phi[(i, l0)]);
    }
}

#[test]
fn eigenfunction_products_follow_eigenvalue_sums() {
    let model = SdeModel::quadratic_ode(-0.8, -0.7);
    let dict = Dictionary::monomials(2, 8);
    let s = exact_samples(&model, &sample_uniform(&[[-2.0, 2.0]; 2], 1000, 6).unwrap(), "uniform").unwrap();
    let mut dec = decompose(&gedmd_deterministic(&dict, &s, &GedmdOptions::default()).unwrap()).unwrap();
    dec.normalize(Normalization::LastSignificant { tol: 1e-8 });
    let (a, b) = (dec.nearest(Complex::new(-0.8, 0.0)), dec.nearest(Complex::new(-1.6, 0.0)));
    assert!((dec.eigenvalues[b] - Complex::new(-1.6, 0.0)).norm() < 1e-6);
    let grid = sample_uniform(&[[-1.5, 1.5]; 2], 100, 7).unwrap();
    let phi = eigenfunction_values(&dec, &dict, &grid).unwrap();
    for i in 0..grid.nrows() {
        let err = (phi[(i, b)] - phi[(i, a)].powi(2)).norm();
        assert!(err < 1e-6, "point {i}: {err:.2e}");
    }
}
