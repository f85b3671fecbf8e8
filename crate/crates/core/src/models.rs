//! Ground-truth SDE models, sampling, integration and drift/diffusion estimation.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;

pub type Field = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
pub type Scalar = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// `dX = b(X) dt + σ(X) dW` with `σ` of shape `d × s`. `s = 0` is an ODE.
#[derive(Clone)]
pub struct SdeModel {
    pub name: String,
    pub dim: usize,
    pub noise_dim: usize,
    drift: Field,
    diffusion: Field,
    potential: Option<Scalar>,
    pub inverse_temperature: Option<f64>,
    pub reversible: bool,
    pub stratonovich: bool,
}

impl std::fmt::Debug for SdeModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SdeModel")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("noise_dim", &self.noise_dim)
            .field("reversible", &self.reversible)
            .field("stratonovich", &self.stratonovich)
            .finish()
    }
}

impl SdeModel {
    pub fn new(name: impl Into<String>, dim: usize, noise_dim: usize, drift: Field, diffusion: Field) -> Self {
        SdeModel {
            name: name.into(),
            dim,
            noise_dim,
            drift,
            diffusion,
            potential: None,
            inverse_temperature: None,
            reversible: false,
            stratonovich: false,
        }
    }

    /// Deterministic system `ẋ = b(x)`.
    pub fn ode(name: impl Into<String>, dim: usize, drift: Field) -> Self {
        Self::new(name, dim, 0, drift, Arc::new(|_, _| {}))
    }

    /// Overdamped Langevin dynamics `dX = -∇V dt + sqrt(2/β) dW`.
    pub fn overdamped_langevin(name: impl Into<String>, dim: usize, beta: f64, potential: Scalar, grad: Field) -> Self {
        let s = (2.0 / beta).sqrt();
        let drift: Field = Arc::new(move |x, out| {
            grad(x, out);
            out.iter_mut().for_each(|v| *v = -*v);
        });
        let diffusion: Field = Arc::new(move |_, out| {
            out.fill(0.0);
            for i in 0..dim {
                out[i * dim + i] = s;
            }
        });
        let mut m = Self::new(name, dim, dim, drift, diffusion);
        m.potential = Some(potential);
        m.inverse_temperature = Some(beta);
        m.reversible = true;
        m
    }

    pub fn with_potential(mut self, potential: Scalar, beta: f64) -> Self {
        self.potential = Some(potential);
        self.inverse_temperature = Some(beta);
        self
    }

    pub fn drift(&self, x: &[f64], out: &mut [f64]) {
        (self.drift)(x, out)
    }

    pub fn drift_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.drift(x, &mut out);
        out
    }

    /// `σ(x)` row-major, `d × s`.
    pub fn sigma(&self, x: &[f64], out: &mut [f64]) {
        (self.diffusion)(x, out)
    }

    pub fn sigma_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim * self.noise_dim];
        self.sigma(x, &mut out);
        out
    }

    /// `a(x) = σ(x) σ(x)ᵀ`, row-major `d × d`.
    pub fn diffusion_matrix(&self, x: &[f64]) -> Vec<f64> {
        let (d, s) = (self.dim, self.noise_dim);
        let sig = self.sigma_vec(x);
        let mut a = vec![0.0; d * d];
        for i in 0..d {
            for j in i..d {
                let v: f64 = (0..s).map(|k| sig[i * s + k] * sig[j * s + k]).sum();
                a[i * d + j] = v;
                a[j * d + i] = v;
            }
        }
        a
    }

    pub fn potential(&self, x: &[f64]) -> Option<f64> {
        self.potential.as_ref().map(|v| v(x))
    }

    pub fn is_deterministic(&self) -> bool {
        self.noise_dim == 0
    }

    /// Ornstein–Uhlenbeck `dX = -α(X - u) dt + sqrt(2/β) dW`.
    pub fn ornstein_uhlenbeck(alpha: f64, beta: f64, u: f64) -> Self {
        let potential: Scalar = Arc::new(move |x| 0.5 * alpha * (x[0] - u).powi(2));
        let grad: Field = Arc::new(move |x, out| out[0] = alpha * (x[0] - u));
        let mut m = Self::overdamped_langevin("ornstein_uhlenbeck", 1, beta, potential, grad);
        if alpha == 0.0 {
            m.reversible = false;
        }
        m
    }

    /// `ẋ₁ = γ x₁`, `ẋ₂ = δ (x₂ - x₁²)`.
    pub fn quadratic_ode(gamma: f64, delta: f64) -> Self {
        Self::ode(
            "quadratic_ode",
            2,
            Arc::new(move |x, out| {
                out[0] = gamma * x[0];
                out[1] = delta * (x[1] - x[0] * x[0]);
            }),
        )
    }

    /// Double well `V = (x₁² - 1)² + x₂²` driven by `σ = [[0.7, x₁], [0, 0.5]]`.
    pub fn double_well() -> Self {
        let drift: Field = Arc::new(|x, out| {
            out[0] = 4.0 * x[0] - 4.0 * x[0].powi(3);
            out[1] = -2.0 * x[1];
        });
        let diffusion: Field = Arc::new(|x, out| {
            out[0] = 0.7;
            out[1] = x[0];
            out[2] = 0.0;
            out[3] = 0.5;
        });
        Self::new("double_well", 2, 2, drift, diffusion)
    }

    /// Duffing oscillator with multiplicative noise `σ = ε b` in the
    /// Stratonovich sense.
    pub fn duffing(alpha: f64, beta: f64, eps: f64) -> Self {
        let b = move |x: &[f64], out: &mut [f64]| {
            out[0] = x[1];
            out[1] = -alpha * x[0] - beta * x[0].powi(3);
        };
        let drift: Field = Arc::new(b);
        let diffusion: Field = Arc::new(move |x, out| {
            b(x, out);
            out[0] *= eps;
            out[1] *= eps;
        });
        let mut m = Self::new("duffing", 2, 1, drift, diffusion);
        m.stratonovich = true;
        m
    }

    /// Overdamped Langevin dynamics in the lemon-slice potential
    /// `V = cos(kφ) + sec(φ/2) + 10 (r - 1)² + 1/r`.
    pub fn lemon_slice(k: f64, beta: f64) -> Self {
        let potential: Scalar = Arc::new(move |x| {
            let (r, phi) = polar(x);
            (k * phi).cos() + 1.0 / (0.5 * phi).cos() + 10.0 * (r - 1.0).powi(2) + 1.0 / r
        });
        let grad: Field = Arc::new(move |x, out| {
            let (r, phi) = polar(x);
            let vr = 20.0 * (r - 1.0) - 1.0 / (r * r);
            let half = 0.5 * phi;
            let vphi = -k * (k * phi).sin() + 0.5 * half.tan() / half.cos();
            let r2 = r * r;
            out[0] = vr * x[0] / r + vphi * (-x[1] / r2);
            out[1] = vr * x[1] / r + vphi * (x[0] / r2);
        });
        Self::overdamped_langevin("lemon_slice", 2, beta, potential, grad)
    }
}

/// `(r, φ)` with `φ ∈ (-π, π]`.
pub fn polar(x: &[f64]) -> (f64, f64) {
    (x[0].hypot(x[1]), x[1].atan2(x[0]))
}

/// Built-in models addressable from configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    OrnsteinUhlenbeck {
        alpha: f64,
        beta: f64,
        #[serde(default)]
        u: f64,
    },
    QuadraticOde { gamma: f64, delta: f64 },
    DoubleWell,
    Duffing { alpha: f64, beta: f64, eps: f64 },
    LemonSlice {
        #[serde(default = "default_k")]
        k: f64,
        #[serde(default = "default_beta")]
        beta: f64,
    },
}

fn default_k() -> f64 {
    4.0
}

fn default_beta() -> f64 {
    1.0
}

impl ModelSpec {
    pub fn build(&self) -> Result<SdeModel> {
        Ok(match *self {
            ModelSpec::OrnsteinUhlenbeck { alpha, beta, u } => {
                if !(beta > 0.0) {
                    return Err(Error::Config(format!("beta must be positive, got {beta}")));
                }
                SdeModel::ornstein_uhlenbeck(alpha, beta, u)
            }
            ModelSpec::QuadraticOde { gamma, delta } => SdeModel::quadratic_ode(gamma, delta),
            ModelSpec::DoubleWell => SdeModel::double_well(),
            ModelSpec::Duffing { alpha, beta, eps } => SdeModel::duffing(alpha, beta, eps),
            ModelSpec::LemonSlice { k, beta } => {
                if !(beta > 0.0) {
                    return Err(Error::Config(format!("beta must be positive, got {beta}")));
                }
                SdeModel::lemon_slice(k, beta)
            }
        })
    }
}

/// Where drift and diffusion samples came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SampleSource {
    Exact,
    TrajectoryPairs { lag: f64 },
    SpawnedBursts { lag: f64, replicas: usize },
    CentralDifferences { dt: f64 },
}

/// Data points with drift and (optionally) diffusion information.
#[derive(Debug, Clone)]
pub struct SampleSet {
    /// `m × d`
    pub points: Mat,
    /// `m × d`
    pub drift: Mat,
    /// `m × d²`, each row a row-major `d × d` block.
    pub diffusion: Option<Mat>,
    pub source: SampleSource,
    pub measure_note: String,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn point(&self, l: usize) -> Vec<f64> {
        self.points.row(l).iter().copied().collect()
    }

    /// Checks shapes, finiteness and symmetry / PSD of diffusion blocks.
    pub fn validate(&self) -> Result<()> {
        let (m, d) = self.points.shape();
        if m == 0 {
            return Err(Error::Input("sample set is empty".into()));
        }
        if self.drift.shape() != (m, d) {
            return Err(Error::Input("drift samples do not match the points".into()));
        }
        if self.points.iter().chain(self.drift.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Input("sample set contains non-finite entries".into()));
        }
        if let Some(a) = &self.diffusion {
            if a.shape() != (m, d * d) {
                return Err(Error::Input("diffusion samples must be m × d²".into()));
            }
            for l in 0..m {
                let blk = Mat::from_row_slice(d, d, a.row(l).transpose().as_slice());
                let sym = 0.5 * (&blk + blk.transpose());
                if (&blk - &sym).amax() > 1e-12 * blk.amax().max(1.0) {
                    return Err(Error::Input(format!("diffusion sample {l} is not symmetric")));
                }
                let min_eig = sym.symmetric_eigenvalues().min();
                if min_eig < -1e-10 {
                    return Err(Error::Input(format!("diffusion sample {l} has eigenvalue {min_eig:.3e}")));
                }
            }
        }
        Ok(())
    }

    /// Diffusion block of point `l` (row-major), if present.
    pub fn diffusion_at(&self, l: usize) -> Option<Vec<f64>> {
        self.diffusion.as_ref().map(|a| a.row(l).iter().copied().collect())
    }

    /// Adds i.i.d. Gaussian noise of standard deviation `sd` to the drift samples.
    pub fn with_drift_noise(mut self, sd: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in self.drift.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += sd * z;
        }
        self
    }

    /// Restricts to the given rows.
    pub fn select(&self, rows: &[usize]) -> SampleSet {
        SampleSet {
            points: self.points.select_rows(rows.iter()),
            drift: self.drift.select_rows(rows.iter()),
            diffusion: self.diffusion.as_ref().map(|a| a.select_rows(rows.iter())),
            source: self.source.clone(),
            measure_note: self.measure_note.clone(),
        }
    }
}

/// Exact drift (and diffusion, for stochastic models) at the given points.
pub fn exact_samples(model: &SdeModel, points: &Mat, measure_note: &str) -> Result<SampleSet> {
    let (m, d) = points.shape();
    if d != model.dim {
        return Err(Error::Input(format!("points have dimension {d}, model has {}", model.dim)));
    }
    let mut drift = Mat::zeros(m, d);
    let mut diffusion = (!model.is_deterministic()).then(|| Mat::zeros(m, d * d));
    let mut b = vec![0.0; d];
    for l in 0..m {
        let x: Vec<f64> = points.row(l).iter().copied().collect();
        model.drift(&x, &mut b);
        for j in 0..d {
            drift[(l, j)] = b[j];
        }
        if let Some(a) = diffusion.as_mut() {
            let blk = model.diffusion_matrix(&x);
            for k in 0..d * d {
                a[(l, k)] = blk[k];
            }
        }
    }
    let s = SampleSet {
        points: points.clone(),
        drift,
        diffusion,
        source: SampleSource::Exact,
        measure_note: measure_note.to_string(),
    };
    s.validate()?;
    Ok(s)
}

/// `m` points uniformly distributed in an axis-aligned box.
pub fn sample_uniform(bounds: &[[f64; 2]], m: usize, seed: u64) -> Result<Mat> {
    if bounds.is_empty() || bounds.iter().any(|[a, b]| !(b >= a) || !a.is_finite() || !b.is_finite()) {
        return Err(Error::Input("box bounds must be finite with lo ≤ hi".into()));
    }
    let d = bounds.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = Mat::zeros(m, d);
    for l in 0..m {
        for (j, [a, b]) in bounds.iter().enumerate() {
            pts[(l, j)] = a + (b - a) * rng.random::<f64>();
        }
    }
    Ok(pts)
}

/// Euler–Maruyama trajectory, `(steps + 1) × d`.
pub fn integrate_em(model: &SdeModel, x0: &[f64], dt: f64, steps: usize, seed: u64) -> Result<Mat> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    integrate_em_with(model, x0, dt, steps, &mut rng)
}

/// Euler–Maruyama with a caller-supplied random stream.
pub fn integrate_em_with<R: Rng>(model: &SdeModel, x0: &[f64], dt: f64, steps: usize, rng: &mut R) -> Result<Mat> {
    let d = model.dim;
    let s = model.noise_dim;
    if !(dt > 0.0) {
        return Err(Error::Input(format!("time step must be positive, got {dt}")));
    }
    if x0.len() != d {
        return Err(Error::Input("initial state has the wrong dimension".into()));
    }
    let mut traj = Mat::zeros(steps + 1, d);
    let mut x = x0.to_vec();
    let mut b = vec![0.0; d];
    let mut sig = vec![0.0; d * s];
    let mut dw = vec![0.0; s];
    let sq = dt.sqrt();
    for j in 0..d {
        traj[(0, j)] = x[j];
    }
    for step in 1..=steps {
        model.drift(&x, &mut b);
        if s > 0 {
            model.sigma(&x, &mut sig);
            for w in dw.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *w = sq * z;
            }
        }
        for i in 0..d {
            let mut inc = b[i] * dt;
            for k in 0..s {
                inc += sig[i * s + k] * dw[k];
            }
            x[i] += inc;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integration { step });
        }
        for j in 0..d {
            traj[(step, j)] = x[j];
        }
    }
    Ok(traj)
}

/// Classical fourth-order Runge–Kutta on the drift only.
pub fn integrate_rk4(model: &SdeModel, x0: &[f64], dt: f64, steps: usize) -> Result<Mat> {
    let d = model.dim;
    let mut traj = Mat::zeros(steps + 1, d);
    let mut x = x0.to_vec();
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut tmp = vec![0.0; d];
    for j in 0..d {
        traj[(0, j)] = x[j];
    }
    for step in 1..=steps {
        model.drift(&x, &mut k1);
        for i in 0..d {
            tmp[i] = x[i] + 0.5 * dt * k1[i];
        }
        model.drift(&tmp, &mut k2);
        for i in 0..d {
            tmp[i] = x[i] + 0.5 * dt * k2[i];
        }
        model.drift(&tmp, &mut k3);
        for i in 0..d {
            tmp[i] = x[i] + dt * k3[i];
        }
        model.drift(&tmp, &mut k4);
        for i in 0..d {
            x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integration { step });
        }
        for j in 0..d {
            traj[(step, j)] = x[j];
        }
    }
    Ok(traj)
}

/// Kramers–Moyal estimates from consecutive pairs of a trajectory saved at
/// time step `lag`.
pub fn kramers_moyal(traj: &Mat, lag: f64) -> Result<SampleSet> {
    let (n, d) = traj.shape();
    if n < 2 {
        return Err(Error::Input("Kramers–Moyal estimation needs at least two points".into()));
    }
    if !(lag > 0.0) {
        return Err(Error::Input(format!("lag must be positive, got {lag}")));
    }
    let m = n - 1;
    let points = traj.rows(0, m).into_owned();
    let mut drift = Mat::zeros(m, d);
    let mut diffusion = Mat::zeros(m, d * d);
    for l in 0..m {
        for i in 0..d {
            let di = traj[(l + 1, i)] - traj[(l, i)];
            drift[(l, i)] = di / lag;
            for j in 0..d {
                let dj = traj[(l + 1, j)] - traj[(l, j)];
                diffusion[(l, i * d + j)] = di * dj / lag;
            }
        }
    }
    Ok(SampleSet {
        points,
        drift,
        diffusion: Some(diffusion),
        source: SampleSource::TrajectoryPairs { lag },
        measure_note: "trajectory points".into(),
    })
}

/// Burst estimates: from every point, `replicas` independent Euler–Maruyama
/// runs of `steps` steps of size `dt`. Drift and diffusion are the mean
/// increment and the mean squared increment over the burst length.
pub fn spawned_bursts(model: &SdeModel, points: &Mat, dt: f64, steps: usize, replicas: usize, seed: u64) -> Result<SampleSet> {
    let (m, d) = points.shape();
    if points.ncols() != model.dim {
        return Err(Error::Input("points have the wrong dimension".into()));
    }
    if steps == 0 || replicas == 0 {
        return Err(Error::Input("bursts need at least one step and one replica".into()));
    }
    let lag = dt * steps as f64;
    let mut drift = Mat::zeros(m, d);
    let mut diffusion = Mat::zeros(m, d * d);
    for l in 0..m {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(l as u64);
        let x0: Vec<f64> = points.row(l).iter().copied().collect();
        for _ in 0..replicas {
            let traj = integrate_em_with(model, &x0, dt, steps, &mut rng)?;
            for i in 0..d {
                let di = traj[(steps, i)] - x0[i];
                drift[(l, i)] += di;
                for j in 0..d {
                    diffusion[(l, i * d + j)] += di * (traj[(steps, j)] - x0[j]);
                }
            }
        }
    }
    let scale = 1.0 / (lag * replicas as f64);
    Ok(SampleSet {
        points: points.clone(),
        drift: drift * scale,
        diffusion: Some(diffusion * scale),
        source: SampleSource::SpawnedBursts { lag, replicas },
        measure_note: "burst origins".into(),
    })
}

/// Time derivatives of a deterministic trajectory by central differences
/// (interior points only).
pub fn central_differences(traj: &Mat, dt: f64) -> Result<SampleSet> {
    let (n, d) = traj.shape();
    if n < 3 {
        return Err(Error::Input("central differences need at least three points".into()));
    }
    let m = n - 2;
    let points = traj.rows(1, m).into_owned();
    let mut drift = Mat::zeros(m, d);
    for l in 0..m {
        for i in 0..d {
            drift[(l, i)] = (traj[(l + 2, i)] - traj[(l, i)]) / (2.0 * dt);
        }
    }
    Ok(SampleSet {
        points,
        drift,
        diffusion: None,
        source: SampleSource::CentralDifferences { dt },
        measure_note: "trajectory points".into(),
    })
}

/// Itô form of a Stratonovich model: drift `b + c/2` with
/// `c_i = Σ_{j,k} ∂σ_ik/∂x_j σ_jk`, the Jacobian taken by central differences.
pub fn stratonovich_to_ito(model: &SdeModel) -> SdeModel {
    let base = model.clone();
    let d = model.dim;
    let s = model.noise_dim;
    let inner = base.clone();
    let drift: Field = Arc::new(move |x, out| {
        inner.drift(x, out);
        let c = noise_induced_drift(&inner, x);
        for i in 0..d {
            out[i] += 0.5 * c[i];
        }
    });
    let mut ito = base.clone();
    ito.name = format!("{}_ito", model.name);
    ito.drift = drift;
    ito.stratonovich = false;
    debug_assert_eq!(ito.noise_dim, s);
    ito
}

/// `c(x)` of the Stratonovich correction.
pub fn noise_induced_drift(model: &SdeModel, x: &[f64]) -> Vec<f64> {
    let d = model.dim;
    let s = model.noise_dim;
    let h = 1e-6;
    let sig = model.sigma_vec(x);
    let mut c = vec![0.0; d];
    let mut xp = x.to_vec();
    for j in 0..d {
        xp[j] = x[j] + h;
        let sp = model.sigma_vec(&xp);
        xp[j] = x[j] - h;
        let sm = model.sigma_vec(&xp);
        xp[j] = x[j];
        for i in 0..d {
            for k in 0..s {
                let dsig = (sp[i * s + k] - sm[i * s + k]) / (2.0 * h);
                c[i] += dsig * sig[j * s + k];
            }
        }
    }
    c
}

/// Exact generator matrix of the Ornstein–Uhlenbeck process on monomials
/// `1, x, …, x^max_degree`. Column `k` holds the coefficients of `𝓛 x^k`.
pub fn analytic_ou_generator(alpha: f64, beta: f64, max_degree: usize) -> Mat {
    let n = max_degree + 1;
    let mut l = Mat::zeros(n, n);
    for k in 0..n {
        l[(k, k)] = -alpha * k as f64;
        if k >= 2 && beta.is_finite() {
            l[(k - 2, k)] = (k * (k - 1)) as f64 / beta;
        }
    }
    l
}

/// Cumulative table for inverse-transform sampling of a one-dimensional
/// unnormalized density on `[lo, hi]`.
struct InverseCdf {
    grid: Vec<f64>,
    cdf: Vec<f64>,
}

impl InverseCdf {
    fn new(density: impl Fn(f64) -> f64, lo: f64, hi: f64, cells: usize) -> Self {
        let h = (hi - lo) / cells as f64;
        let grid: Vec<f64> = (0..=cells).map(|i| lo + h * i as f64).collect();
        let mut cdf = vec![0.0; cells + 1];
        for i in 0..cells {
            // Simpson rule per cell
            let a = grid[i];
            let b = grid[i + 1];
            let w = (density(a) + 4.0 * density(0.5 * (a + b)) + density(b)) * h / 6.0;
            cdf[i + 1] = cdf[i] + w;
        }
        let total = cdf[cells];
        cdf.iter_mut().for_each(|c| *c /= total);
        InverseCdf { grid, cdf }
    }

    fn sample(&self, u: f64) -> f64 {
        let i = self.cdf.partition_point(|&c| c < u).clamp(1, self.cdf.len() - 1);
        let (c0, c1) = (self.cdf[i - 1], self.cdf[i]);
        let t = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.5 };
        self.grid[i - 1] + t * (self.grid[i] - self.grid[i - 1])
    }
}

/// Independent draws from the invariant density `∝ exp(-β V)` of the
/// lemon-slice model. The density factorizes in polar coordinates, so radius
/// and angle are drawn separately by inverse transform on fine tables.
pub fn sample_lemon_slice(k: f64, beta: f64, m: usize, seed: u64) -> Mat {
    let radial = InverseCdf::new(
        |r| if r <= 0.0 { 0.0 } else { r * (-beta * (10.0 * (r - 1.0).powi(2) + 1.0 / r)).exp() },
        1e-6,
        3.0,
        60_000,
    );
    let eps = 1e-9;
    let angular = InverseCdf::new(
        |phi: f64| {
            let c = (0.5 * phi).cos();
            if c <= 0.0 {
                0.0
            } else {
                (-beta * ((k * phi).cos() + 1.0 / c)).exp()
            }
        },
        -PI + eps,
        PI - eps,
        60_000,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = Mat::zeros(m, 2);
    for l in 0..m {
        let r = radial.sample(rng.random::<f64>());
        let phi = angular.sample(rng.random::<f64>());
        pts[(l, 0)] = r * phi.cos();
        pts[(l, 1)] = r * phi.sin();
    }
    pts
}

/// Independent draws from the Gaussian invariant density of the OU process.
pub fn sample_ou_invariant(alpha: f64, beta: f64, u: f64, m: usize, seed: u64) -> Mat {
    let sd = (1.0 / (alpha * beta)).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Mat::from_fn(m, 1, |_, _| {
        let z: f64 = rng.sample(StandardNormal);
        u + sd * z
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn bursts_recover_ou_coefficients() {
        // a = 2/β = 0.5; drift -x up to O(lag) bias and sampling noise
        let model = SdeModel::ornstein_uhlenbeck(1.0, 4.0, 0.0);
        let pts = Mat::from_column_slice(3, 1, &[-1.0, 0.0, 1.0]);
        let s = spawned_bursts(&model, &pts, 1e-3, 10, 40_000, 4).unwrap();
        s.validate().unwrap();
        let a = s.diffusion.as_ref().unwrap();
        for l in 0..3 {
            let x = pts[(l, 0)];
            assert!((s.drift[(l, 0)] + x).abs() < 0.15, "drift at {x}: {}", s.drift[(l, 0)]);
            assert!((a[(l, 0)] - 0.5).abs() < 0.03, "diffusion at {x}: {}", a[(l, 0)]);
        }
        assert_eq!(s.source, SampleSource::SpawnedBursts { lag: 1e-2, replicas: 40_000 });
    }

    #[test]
    fn em_linear_decay() {
        let m = SdeModel::ode("decay", 1, Arc::new(|x, o| o[0] = -x[0]));
        let t = integrate_em(&m, &[1.0], 1e-4, 10_000, 0).unwrap();
        assert!((t[(10_000, 0)] - (-1.0f64).exp()).abs() < 1e-3);
    }

    #[test]
    fn em_frozen_dynamics_is_constant() {
        let m = SdeModel::ode("frozen", 2, Arc::new(|_, o| o.fill(0.0)));
        let t = integrate_em(&m, &[0.3, -1.0], 0.1, 50, 0).unwrap();
        assert!(t.row_iter().all(|r| r[0] == 0.3 && r[1] == -1.0));
    }

    #[test]
    fn em_ou_stationary_variance() {
        let m = SdeModel::ornstein_uhlenbeck(1.0, 4.0, 0.0);
        let t = integrate_em(&m, &[0.0], 1e-2, 100_000, 42).unwrap();
        let xs = t.column(0);
        let mean = xs.mean();
        let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!((var - 0.25).abs() < 0.025, "variance {var}");
    }

    #[test]
    fn em_reports_blow_up() {
        let m = SdeModel::ode("blowup", 1, Arc::new(|x, o| o[0] = x[0] * x[0]));
        assert!(matches!(integrate_em(&m, &[10.0], 1.0, 100, 0), Err(Error::Integration { .. })));
    }

    #[test]
    fn em_matches_rk4_to_first_order() {
        let m = SdeModel::quadratic_ode(-0.8, -0.7);
        let x0 = [1.0, 0.5];
        let reference = integrate_rk4(&m, &x0, 1e-3, 1000).unwrap();
        let coarse = integrate_em(&m, &x0, 1e-3, 1000, 0).unwrap();
        let fine = integrate_em(&m, &x0, 5e-4, 2000, 0).unwrap();
        let e1 = (coarse.row(1000) - reference.row(1000)).norm();
        let e2 = (fine.row(2000) - reference.row(1000)).norm();
        assert!(e1 < 1e-3);
        assert!((e1 / e2 - 2.0).abs() < 0.2, "ratio {}", e1 / e2);
    }

    #[test]
    fn kramers_moyal_exponential() {
        let lag = 1e-3;
        let traj = Mat::from_fn(2001, 1, |i, _| (-(i as f64) * lag).exp());
        let s = kramers_moyal(&traj, lag).unwrap();
        assert!((s.drift[(0, 0)] + 1.0).abs() < 5e-3);
    }

    #[test]
    fn kramers_moyal_constant_and_single() {
        let traj = Mat::from_element(10, 2, 0.7);
        let s = kramers_moyal(&traj, 0.1).unwrap();
        assert_eq!(s.drift.amax(), 0.0);
        assert_eq!(s.diffusion.unwrap().amax(), 0.0);
        assert!(matches!(kramers_moyal(&Mat::zeros(1, 1), 0.1), Err(Error::Input(_))));
    }

    #[test]
    fn kramers_moyal_ou_slope() {
        let lag = 1e-3;
        let m = SdeModel::ornstein_uhlenbeck(1.0, 4.0, 0.0);
        let traj = integrate_em(&m, &[0.0], lag, 1_000_000, 1).unwrap();
        let s = kramers_moyal(&traj, lag).unwrap();
        let x = s.points.column(0);
        let y = s.drift.column(0);
        let (mx, my) = (x.mean(), y.mean());
        let cov: f64 = x.iter().zip(y.iter()).map(|(a, b)| (a - mx) * (b - my)).sum();
        let var: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let slope = cov / var;
        assert!((slope + 1.0).abs() < 0.05, "slope {slope}");
    }

    #[test]
    fn ito_correction_constant_sigma_is_zero() {
        let m = SdeModel::ornstein_uhlenbeck(1.0, 2.0, 0.0);
        assert_eq!(noise_induced_drift(&m, &[0.4]), vec![0.0]);
    }

    #[test]
    fn ito_correction_linear_sigma() {
        let m = SdeModel::new("lin", 1, 1, Arc::new(|_, o| o[0] = 0.0), Arc::new(|x, o| o[0] = x[0]));
        assert_abs_diff_eq!(noise_induced_drift(&m, &[0.8])[0], 0.8, epsilon = 1e-8);
    }

    #[test]
    fn ito_correction_duffing() {
        let (alpha, beta, eps) = (-1.1, 1.1, 0.05);
        let m = SdeModel::duffing(alpha, beta, eps);
        let pts = sample_uniform(&[[-2.0, 2.0], [-2.0, 2.0]], 50, 3).unwrap();
        for l in 0..50 {
            let x = [pts[(l, 0)], pts[(l, 1)]];
            let b = m.drift_vec(&x);
            let c = noise_induced_drift(&m, &x);
            let expect = [eps * eps * b[1], eps * eps * (-alpha - 3.0 * beta * x[0] * x[0]) * b[0]];
            assert_abs_diff_eq!(c[0], expect[0], epsilon = 1e-6);
            assert_abs_diff_eq!(c[1], expect[1], epsilon = 1e-6);
        }
        let zero = SdeModel::duffing(alpha, beta, 0.0);
        let ito = stratonovich_to_ito(&zero);
        assert_eq!(ito.drift_vec(&[0.3, -0.2]), zero.drift_vec(&[0.3, -0.2]));
    }

    #[test]
    fn uniform_sampling() {
        let p = sample_uniform(&[[-2.0, 2.0], [-2.0, 2.0]], 1000, 1).unwrap();
        assert!(p.iter().all(|v| (-2.0..=2.0).contains(v)));
        assert_eq!(sample_uniform(&[[0.0, 1.0]], 1, 1).unwrap().nrows(), 1);
        assert_eq!(p, sample_uniform(&[[-2.0, 2.0], [-2.0, 2.0]], 1000, 1).unwrap());
    }

    #[test]
    fn ou_generator_entries() {
        let l = analytic_ou_generator(1.0, 4.0, 2);
        assert_eq!(l[(0, 2)], 0.5);
        assert_eq!(l[(2, 2)], -2.0);
        assert_eq!(l.column(1).iter().copied().collect::<Vec<_>>(), vec![0.0, -1.0, 0.0]);
        assert_eq!(analytic_ou_generator(0.0, f64::INFINITY, 4).amax(), 0.0);
    }

    #[test]
    fn langevin_drift_is_negative_gradient() {
        let m = SdeModel::lemon_slice(4.0, 1.0);
        let h = 1e-6;
        for x in [[0.9, 0.3], [-0.5, 0.8], [0.2, -1.1]] {
            let b = m.drift_vec(&x);
            for j in 0..2 {
                let mut xp = x;
                let mut xm = x;
                xp[j] += h;
                xm[j] -= h;
                let g = (m.potential(&xp).unwrap() - m.potential(&xm).unwrap()) / (2.0 * h);
                assert!((b[j] + g).abs() < 1e-6 * g.abs().max(1.0));
            }
        }
    }

    #[test]
    fn diffusion_psd() {
        let m = SdeModel::double_well();
        let pts = sample_uniform(&[[-2.0, 2.0], [-1.0, 1.0]], 200, 9).unwrap();
        exact_samples(&m, &pts, "uniform").unwrap().validate().unwrap();
    }

    #[test]
    fn lemon_samples_avoid_cut() {
        let p = sample_lemon_slice(4.0, 1.0, 5000, 2);
        for l in 0..5000 {
            let (r, phi) = polar(&[p[(l, 0)], p[(l, 1)]]);
            assert!(r > 0.2 && phi.abs() < PI);
        }
    }
}
