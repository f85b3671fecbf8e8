//! Control through per-input linear surrogates `ż = M_u z` of the lifted
//! state `z = ψ(x)`: model predictive control over a finite input set,
//! switching-time optimization, and two plants to close the loop with.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dictionary::{Derivs, Dictionary, PointEval};
use crate::error::{Error, Result};
use crate::generator::{gedmd_deterministic, gedmd_stochastic, GedmdOptions};
use crate::linalg::{expm, gauss_legendre, project_monotone, Mat, Vector};
use crate::models::{SampleSet, SdeModel};

/// Largest exhaustive MPC horizon (in steps of length `h`).
pub const MAX_MPC_HORIZON: usize = 6;

/// One generator matrix per admissible input.
#[derive(Debug, Clone)]
pub struct SurrogateFamily {
    pub inputs: Vec<f64>,
    /// `M_u` with `ż = M_u z`.
    pub matrices: Vec<Mat>,
    pub dictionary: Dictionary,
    /// `r × n`, extracts the tracked observables from `z`.
    pub readout: Mat,
}

impl SurrogateFamily {
    pub fn new(inputs: Vec<f64>, matrices: Vec<Mat>, dictionary: Dictionary, readout: Mat) -> Result<Self> {
        let n = dictionary.size();
        if inputs.is_empty() || inputs.len() != matrices.len() {
            return Err(Error::Input("need one surrogate matrix per input".into()));
        }
        if matrices.iter().any(|m| m.shape() != (n, n)) || readout.ncols() != n {
            return Err(Error::Input(format!("surrogate matrices and readout must act on {n} observables")));
        }
        Ok(SurrogateFamily { inputs, matrices, dictionary, readout })
    }

    pub fn size(&self) -> usize {
        self.dictionary.size()
    }

    /// `ψ(x)` as a column.
    pub fn lift(&self, x: &[f64]) -> Result<Vector> {
        let mut pe = PointEval::default();
        self.dictionary.eval_point(x, Derivs::None, &mut pe)?;
        Ok(Vector::from_vec(pe.values))
    }

    pub fn read(&self, z: &Vector) -> Vector {
        &self.readout * z
    }

    /// `exp(dt M_u)` for every input.
    pub fn propagators(&self, dt: f64) -> Vec<Mat> {
        self.matrices.iter().map(|m| expm(&(m * dt))).collect()
    }
}

/// gEDMD on each autonomized system. The readout picks the coordinates.
pub fn fit_surrogates(dict: &Dictionary, inputs: &[f64], data: &[SampleSet], opts: &GedmdOptions) -> Result<SurrogateFamily> {
    if data.len() != inputs.len() {
        return Err(Error::Input("need one sample set per input".into()));
    }
    let matrices = data
        .iter()
        .map(|s| {
            let est = if s.diffusion.is_some() {
                gedmd_stochastic(dict, s, opts)?
            } else {
                gedmd_deterministic(dict, s, opts)?
            };
            Ok(est.m)
        })
        .collect::<Result<Vec<_>>>()?;
    let readout = dict.full_state_selector()?.transpose();
    SurrogateFamily::new(inputs.to_vec(), matrices, dict.clone(), readout)
}

/// `z(k dt)` for `k = 0..=steps`, by repeated application of `exp(dt M)`.
pub fn predict(m: &Mat, z0: &Vector, dt: f64, steps: usize) -> Result<Vec<Vector>> {
    if !(dt > 0.0) {
        return Err(Error::Input(format!("time step must be positive, got {dt}")));
    }
    let e = expm(&(m * dt));
    let mut out = Vec::with_capacity(steps + 1);
    out.push(z0.clone());
    for k in 0..steps {
        let next = &e * &out[k];
        out.push(next);
    }
    Ok(out)
}

/// Time-dependent target for the readout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Reference {
    Constant { value: Vec<f64> },
    /// `values[i]` holds on `[switch_times[i-1], switch_times[i])`.
    PiecewiseConstant { switch_times: Vec<f64>, values: Vec<Vec<f64>> },
    /// `tanh(t - shift)` in every component.
    Tanh { shift: f64, dim: usize },
    /// Linear interpolation through `(times[i], values[i])`.
    Table { times: Vec<f64>, values: Vec<Vec<f64>> },
}

impl Reference {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            Reference::Constant { value } => !value.is_empty(),
            Reference::PiecewiseConstant { switch_times, values } => {
                values.len() == switch_times.len() + 1
                    && switch_times.windows(2).all(|w| w[0] <= w[1])
                    && values.iter().all(|v| v.len() == values[0].len() && !v.is_empty())
            }
            Reference::Tanh { dim, .. } => *dim > 0,
            Reference::Table { times, values } => {
                !times.is_empty()
                    && times.len() == values.len()
                    && times.windows(2).all(|w| w[0] < w[1])
                    && values.iter().all(|v| v.len() == values[0].len() && !v.is_empty())
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config("malformed reference trajectory".into()))
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Reference::Constant { value } => value.len(),
            Reference::PiecewiseConstant { values, .. } | Reference::Table { values, .. } => values[0].len(),
            Reference::Tanh { dim, .. } => *dim,
        }
    }

    pub fn value(&self, t: f64) -> Vec<f64> {
        match self {
            Reference::Constant { value } => value.clone(),
            Reference::PiecewiseConstant { switch_times, values } => {
                values[switch_times.partition_point(|&s| s <= t)].clone()
            }
            Reference::Tanh { shift, dim } => vec![(t - shift).tanh(); *dim],
            Reference::Table { times, values } => {
                if times.len() == 1 {
                    return values[0].clone();
                }
                let (i, w) = table_position(times, t);
                values[i].iter().zip(&values[i + 1]).map(|(a, b)| a + w * (b - a)).collect()
            }
        }
    }

    /// Time derivative (zero across jumps of a piecewise-constant target).
    pub fn derivative(&self, t: f64) -> Vec<f64> {
        match self {
            Reference::Constant { value } => vec![0.0; value.len()],
            Reference::PiecewiseConstant { values, .. } => vec![0.0; values[0].len()],
            Reference::Tanh { shift, dim } => vec![1.0 - (t - shift).tanh().powi(2); *dim],
            Reference::Table { times, values } => {
                if times.len() < 2 || t < times[0] || t > times[times.len() - 1] {
                    return vec![0.0; values[0].len()];
                }
                let (i, _) = table_position(times, t);
                let dt = times[i + 1] - times[i];
                values[i].iter().zip(&values[i + 1]).map(|(a, b)| (b - a) / dt).collect()
            }
        }
    }
}

/// Interval index `i` (with `i + 1` valid when there are two or more knots)
/// and interpolation weight, clamped at both ends.
fn table_position(times: &[f64], t: f64) -> (usize, f64) {
    let n = times.len();
    if n == 1 || t <= times[0] {
        return (0, 0.0);
    }
    if t >= times[n - 1] {
        return (n - 2, 1.0);
    }
    let i = times.partition_point(|&s| s <= t) - 1;
    (i, (t - times[i]) / (times[i + 1] - times[i]))
}

/// Ground-truth system driven by a scalar input.
pub trait Plant: Sync {
    fn dim(&self) -> usize;

    /// Internal integration step.
    fn dt(&self) -> f64;

    /// Advances `x` by one internal step.
    fn step(&self, x: &mut [f64], u: f64, rng: &mut ChaCha8Rng) -> Result<()>;

    /// Advances over `duration` (rounded to whole steps) and returns the
    /// state after every step.
    fn advance(&self, x: &mut [f64], u: f64, duration: f64, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
        let steps = (duration / self.dt()).round() as usize;
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            self.step(x, u, rng)?;
            out.push(x.to_vec());
        }
        Ok(out)
    }
}

/// Controlled OU process `dX = -α(X - u) dt + sqrt(2/β) dW`, Euler–Maruyama.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OuPlant {
    pub alpha: f64,
    pub beta: f64,
    pub dt: f64,
}

impl OuPlant {
    pub fn model(&self, u: f64) -> SdeModel {
        SdeModel::ornstein_uhlenbeck(self.alpha, self.beta, u)
    }

    /// `E[X_t]` from `x0` under a constant input.
    pub fn mean(&self, x0: f64, u: f64, t: f64) -> f64 {
        u + (x0 - u) * (-self.alpha * t).exp()
    }
}

impl Plant for OuPlant {
    fn dim(&self) -> usize {
        1
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn step(&self, x: &mut [f64], u: f64, rng: &mut ChaCha8Rng) -> Result<()> {
        let z: f64 = rng.sample(StandardNormal);
        x[0] += -self.alpha * (x[0] - u) * self.dt + (2.0 / self.beta * self.dt).sqrt() * z;
        Ok(())
    }
}

/// Viscous Burgers equation `y_t = ν y_xx - y y_x + u(t) χ(x)` on a periodic
/// grid, second-order central differences, classical Runge–Kutta in time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BurgersPlant {
    pub nu: f64,
    pub length: f64,
    pub nodes: usize,
    pub dt: f64,
    /// Bump shape `exp(-(x - L/2)² / (2 w²))` with `w = length * width_fraction`.
    #[serde(default = "default_width")]
    pub width_fraction: f64,
}

fn default_width() -> f64 {
    0.125
}

/// Stability margin on the scaled eigenvalues of the semi-discretization.
const RK4_LIMIT: f64 = 2.5;

impl BurgersPlant {
    pub fn new(nu: f64, length: f64, nodes: usize, dt: f64) -> Result<Self> {
        let p = BurgersPlant { nu, length, nodes, dt, width_fraction: default_width() };
        p.validate()?;
        Ok(p)
    }

    pub fn spacing(&self) -> f64 {
        self.length / self.nodes as f64
    }

    pub fn grid(&self) -> Vec<f64> {
        (0..self.nodes).map(|i| i as f64 * self.spacing()).collect()
    }

    pub fn chi(&self) -> Vec<f64> {
        let w = self.length * self.width_fraction;
        let c = 0.5 * self.length;
        self.grid().iter().map(|x| (-(x - c).powi(2) / (2.0 * w * w)).exp()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes < 3 || !(self.length > 0.0) || !(self.dt > 0.0) || !(self.nu >= 0.0) || !(self.width_fraction > 0.0) {
            return Err(Error::Config("burgers plant needs ≥ 3 nodes and positive length, dt, width; ν ≥ 0".into()));
        }
        let h = self.spacing();
        if self.dt * 4.0 * self.nu / (h * h) > RK4_LIMIT {
            return Err(Error::Config(format!(
                "time step {} violates the diffusive stability bound {:.3e}",
                self.dt,
                RK4_LIMIT * h * h / (4.0 * self.nu)
            )));
        }
        Ok(())
    }

    /// Checks the advective bound for the current state.
    pub fn check_state(&self, y: &[f64]) -> Result<()> {
        let vmax = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !vmax.is_finite() || self.dt * vmax / self.spacing() > RK4_LIMIT {
            return Err(Error::Config(format!(
                "time step {} violates the advective stability bound for |y| = {vmax:.3e}",
                self.dt
            )));
        }
        Ok(())
    }

    pub fn rhs(&self, y: &[f64], u: f64, chi: &[f64], out: &mut [f64]) {
        let n = self.nodes;
        let h = self.spacing();
        for i in 0..n {
            let l = y[(i + n - 1) % n];
            let r = y[(i + 1) % n];
            out[i] = self.nu * (r - 2.0 * y[i] + l) / (h * h) - y[i] * (r - l) / (2.0 * h) + u * chi[i];
        }
    }

    /// The plant under a frozen input, as an ODE model.
    pub fn model(&self, u: f64) -> SdeModel {
        let p = self.clone();
        let chi = self.chi();
        SdeModel::ode("burgers", self.nodes, std::sync::Arc::new(move |y, out| p.rhs(y, u, &chi, out)))
    }

    fn rk4(&self, y: &mut [f64], u: f64, chi: &[f64]) {
        let n = self.nodes;
        let dt = self.dt;
        let mut k1 = vec![0.0; n];
        let mut k2 = vec![0.0; n];
        let mut k3 = vec![0.0; n];
        let mut k4 = vec![0.0; n];
        let mut tmp = vec![0.0; n];
        self.rhs(y, u, chi, &mut k1);
        for i in 0..n {
            tmp[i] = y[i] + 0.5 * dt * k1[i];
        }
        self.rhs(&tmp, u, chi, &mut k2);
        for i in 0..n {
            tmp[i] = y[i] + 0.5 * dt * k2[i];
        }
        self.rhs(&tmp, u, chi, &mut k3);
        for i in 0..n {
            tmp[i] = y[i] + dt * k3[i];
        }
        self.rhs(&tmp, u, chi, &mut k4);
        for i in 0..n {
            y[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }

    /// Trajectory under a time-dependent input, `(steps + 1)` states.
    pub fn simulate(&self, y0: &[f64], input: &dyn Fn(f64) -> f64, steps: usize) -> Result<Vec<Vec<f64>>> {
        self.validate()?;
        if y0.len() != self.nodes {
            return Err(Error::Input("initial state has the wrong length".into()));
        }
        let chi = self.chi();
        let mut y = y0.to_vec();
        let mut out = Vec::with_capacity(steps + 1);
        out.push(y.clone());
        for k in 0..steps {
            self.check_state(&y)?;
            // input held over the step
            self.rk4(&mut y, input(k as f64 * self.dt), &chi);
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::Integration { step: k + 1 });
            }
            out.push(y.clone());
        }
        Ok(out)
    }

    /// `sin(2π x / L)` scaled by `amplitude`.
    pub fn sine_state(&self, amplitude: f64) -> Vec<f64> {
        self.grid().iter().map(|x| amplitude * (2.0 * PI * x / self.length).sin()).collect()
    }
}

impl Plant for BurgersPlant {
    fn dim(&self) -> usize {
        self.nodes
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn step(&self, x: &mut [f64], u: f64, _rng: &mut ChaCha8Rng) -> Result<()> {
        self.check_state(x)?;
        self.rk4(x, u, &self.chi());
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integration { step: 0 });
        }
        Ok(())
    }

    fn advance(&self, x: &mut [f64], u: f64, duration: f64, _rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
        let chi = self.chi();
        let steps = (duration / self.dt).round() as usize;
        let mut out = Vec::with_capacity(steps);
        for k in 0..steps {
            self.check_state(x)?;
            self.rk4(x, u, &chi);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Integration { step: k + 1 });
            }
            out.push(x.to_vec());
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcOptions {
    /// Input hold time.
    pub h: f64,
    /// Prediction horizon in multiples of `h`.
    pub horizon: usize,
    /// Cost samples per hold interval.
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    /// Input penalty.
    #[serde(default)]
    pub alpha: f64,
    pub t_end: f64,
    /// Initialize `z₀` from `ψ` averaged over the last hold interval.
    #[serde(default)]
    pub average_window: bool,
}

fn default_substeps() -> usize {
    4
}

impl MpcOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0) || !(self.t_end > 0.0) {
            return Err(Error::Config("MPC needs h > 0 and a positive horizon".into()));
        }
        if self.horizon == 0 || self.horizon > MAX_MPC_HORIZON {
            return Err(Error::Config(format!(
                "MPC horizon must be between 1 and {MAX_MPC_HORIZON} steps, got {}",
                self.horizon
            )));
        }
        if self.substeps == 0 {
            return Err(Error::Config("MPC needs at least one cost sample per step".into()));
        }
        Ok(())
    }
}

/// Closed-loop record. `times[k]`, `states[k]` are plant samples; `inputs[k]`
/// and `costs[k]` belong to the decision taken at `decision_times[k]`.
#[derive(Debug, Clone)]
pub struct MpcRun {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub decision_times: Vec<f64>,
    pub inputs: Vec<f64>,
    pub costs: Vec<f64>,
}

/// Precomputed sub-step propagators for the exhaustive search.
pub struct MpcSolver<'a> {
    family: &'a SurrogateFamily,
    sub: Vec<Mat>,
    opts: MpcOptions,
}

impl<'a> MpcSolver<'a> {
    pub fn new(family: &'a SurrogateFamily, opts: MpcOptions) -> Result<Self> {
        opts.validate()?;
        let sub = family.propagators(opts.h / opts.substeps as f64);
        Ok(MpcSolver { family, sub, opts })
    }

    /// Best input index and open-loop cost from `z0` at time `t0`.
    pub fn decide(&self, z0: &Vector, t0: f64, reference: &Reference) -> (usize, f64) {
        let nc = self.family.inputs.len();
        let mut best = (0, f64::INFINITY);
        self.search(z0, t0, 0, 0.0, nc, reference, None, &mut best);
        best
    }

    #[allow(clippy::too_many_arguments)]
    fn search(
        &self,
        z: &Vector,
        t: f64,
        depth: usize,
        acc: f64,
        nc: usize,
        reference: &Reference,
        first: Option<usize>,
        best: &mut (usize, f64),
    ) {
        if depth == self.opts.horizon {
            if acc < best.1 {
                *best = (first.unwrap_or(0), acc);
            }
            return;
        }
        let dt = self.opts.h / self.opts.substeps as f64;
        for i in 0..nc {
            let mut zi = z.clone();
            let mut cost = acc + self.opts.alpha * self.family.inputs[i].powi(2) * self.opts.h;
            for s in 1..=self.opts.substeps {
                zi = &self.sub[i] * zi;
                let y = self.family.read(&zi);
                let r = reference.value(t + s as f64 * dt);
                cost += dt * y.iter().zip(&r).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            }
            if cost >= best.1 {
                continue;
            }
            self.search(&zi, t + self.opts.h, depth + 1, cost, nc, reference, first.or(Some(i)), best);
        }
    }
}

/// Receding-horizon loop on `plant`.
pub fn mpc(
    family: &SurrogateFamily,
    plant: &dyn Plant,
    x0: &[f64],
    reference: &Reference,
    opts: &MpcOptions,
    rng: &mut ChaCha8Rng,
) -> Result<MpcRun> {
    reference.validate()?;
    if reference.dim() != family.readout.nrows() {
        return Err(Error::Config("reference and readout dimensions differ".into()));
    }
    if x0.len() != plant.dim() {
        return Err(Error::Input("initial state has the wrong dimension".into()));
    }
    let solver = MpcSolver::new(family, *opts)?;
    let steps = (opts.t_end / opts.h).round() as usize;
    let mut x = x0.to_vec();
    let mut run = MpcRun {
        times: vec![0.0],
        states: vec![x.clone()],
        decision_times: Vec::with_capacity(steps),
        inputs: Vec::with_capacity(steps),
        costs: Vec::with_capacity(steps),
    };
    let mut window: Vec<Vec<f64>> = vec![x.clone()];
    for k in 0..steps {
        let t = k as f64 * opts.h;
        let z0 = if opts.average_window {
            let mut acc = Vector::zeros(family.size());
            for w in &window {
                acc += family.lift(w)?;
            }
            acc / window.len() as f64
        } else {
            family.lift(&x)?
        };
        let (i, cost) = solver.decide(&z0, t, reference);
        let u = family.inputs[i];
        let traj = plant.advance(&mut x, u, opts.h, rng)?;
        let dt = opts.h / traj.len().max(1) as f64;
        for (s, state) in traj.iter().enumerate() {
            run.times.push(t + (s + 1) as f64 * dt);
            run.states.push(state.clone());
        }
        window = if traj.is_empty() { vec![x.clone()] } else { traj };
        run.decision_times.push(t);
        run.inputs.push(u);
        run.costs.push(cost);
    }
    Ok(run)
}

/// Averages `runs` independent replicas; replica `r` draws from stream `r`
/// of a generator seeded with `seed`.
pub fn monte_carlo_mean<F>(runs: usize, seed: u64, replica: F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> + Sync,
{
    if runs == 0 {
        return Err(Error::Input("need at least one Monte Carlo run".into()));
    }
    let results = (0..runs)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            replica(&mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut mean = results[0].clone();
    for res in &results[1..] {
        if res.len() != mean.len() {
            return Err(Error::Numerical("Monte Carlo replicas differ in length".into()));
        }
        for (m, v) in mean.iter_mut().zip(res) {
            for (a, b) in m.iter_mut().zip(v) {
                *a += b;
            }
        }
    }
    for m in mean.iter_mut() {
        for a in m.iter_mut() {
            *a /= runs as f64;
        }
    }
    Ok(mean)
}

/// Switch instants of a cyclic input sequence; segment `j` uses input
/// `j mod n_c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchingSchedule {
    pub t0: f64,
    pub t_end: f64,
    pub switch_times: Vec<f64>,
}

impl SwitchingSchedule {
    pub fn uniform(t0: f64, t_end: f64, p: usize) -> Self {
        let switch_times = (1..=p).map(|j| t0 + (t_end - t0) * j as f64 / (p + 1) as f64).collect();
        SwitchingSchedule { t0, t_end, switch_times }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_end > self.t0) {
            return Err(Error::Config("schedule horizon must be positive".into()));
        }
        let ok = self.switch_times.iter().all(|&t| t >= self.t0 && t <= self.t_end)
            && self.switch_times.windows(2).all(|w| w[0] <= w[1]);
        if ok {
            Ok(())
        } else {
            Err(Error::Config("switch times must be nondecreasing within the horizon".into()))
        }
    }

    /// Segment boundaries `t0, τ₁, …, τ_p, t_end`.
    pub fn boundaries(&self) -> Vec<f64> {
        let mut b = Vec::with_capacity(self.switch_times.len() + 2);
        b.push(self.t0);
        b.extend_from_slice(&self.switch_times);
        b.push(self.t_end);
        b
    }

    /// Index of the input active at `t`.
    pub fn input_index(&self, t: f64, nc: usize) -> usize {
        self.switch_times.partition_point(|&s| s <= t) % nc
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoOptions {
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Gauss–Legendre nodes per segment in the cost quadrature.
    #[serde(default = "default_nodes")]
    pub quadrature_nodes: usize,
    #[serde(default)]
    pub alpha: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn default_max_iter() -> usize {
    500
}

fn default_nodes() -> usize {
    4
}

fn default_tol() -> f64 {
    1e-9
}

impl Default for StoOptions {
    fn default() -> Self {
        StoOptions { max_iter: default_max_iter(), quadrature_nodes: default_nodes(), alpha: 0.0, tol: default_tol() }
    }
}

/// Cost of a schedule and its gradient with respect to the switch times.
pub struct StoProblem<'a> {
    pub family: &'a SurrogateFamily,
    pub z0: Vector,
    pub reference: &'a Reference,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    alpha: f64,
}

impl<'a> StoProblem<'a> {
    pub fn new(family: &'a SurrogateFamily, z0: Vector, reference: &'a Reference, opts: &StoOptions) -> Result<Self> {
        reference.validate()?;
        if reference.dim() != family.readout.nrows() || z0.len() != family.size() {
            return Err(Error::Config("reference, readout and initial state disagree in dimension".into()));
        }
        if opts.quadrature_nodes == 0 {
            return Err(Error::Config("need at least one quadrature node".into()));
        }
        let (x, w) = gauss_legendre(opts.quadrature_nodes);
        Ok(StoProblem {
            family,
            z0,
            reference,
            nodes: x.iter().map(|v| 0.5 * (v + 1.0)).collect(),
            weights: w.iter().map(|v| 0.5 * v).collect(),
            alpha: opts.alpha,
        })
    }

    /// `J(τ)` and `∂J/∂τ`.
    pub fn cost_and_gradient(&self, schedule: &SwitchingSchedule) -> (f64, Vec<f64>) {
        let bounds = schedule.boundaries();
        let segs = bounds.len() - 1;
        let nc = self.family.inputs.len();
        let c = &self.family.readout;
        // forward pass
        let mut starts = Vec::with_capacity(segs + 1);
        starts.push(self.z0.clone());
        let mut cost = 0.0;
        struct Node {
            z: Vector,
            resid: Vector,
        }
        let mut seg_nodes: Vec<Vec<Node>> = Vec::with_capacity(segs);
        for j in 0..segs {
            let (a, b) = (bounds[j], bounds[j + 1]);
            let s = b - a;
            let m = &self.family.matrices[j % nc];
            let z = &starts[j];
            let mut nodes = Vec::with_capacity(self.nodes.len());
            for (&ck, &wk) in self.nodes.iter().zip(&self.weights) {
                let zk = expm(&(m * (s * ck))) * z;
                let r = Vector::from_vec(self.reference.value(a + s * ck));
                let resid = c * &zk - r;
                cost += s * wk * resid.norm_squared();
                nodes.push(Node { z: zk, resid });
            }
            cost += self.alpha * self.family.inputs[j % nc].powi(2) * s;
            seg_nodes.push(nodes);
            starts.push(expm(&(m * s)) * z);
        }
        // reverse pass
        let p = schedule.switch_times.len();
        let mut grad = vec![0.0; p];
        let mut lambda = Vector::zeros(self.family.size());
        for j in (0..segs).rev() {
            let (a, b) = (bounds[j], bounds[j + 1]);
            let s = b - a;
            let m = &self.family.matrices[j % nc];
            let u2 = self.family.inputs[j % nc].powi(2);
            let mut d_b = self.alpha * u2;
            let mut d_a = -self.alpha * u2;
            let mut g_z = expm(&(m * s)).transpose() * &lambda;
            let end_rate = lambda.dot(&(m * &starts[j + 1]));
            d_b += end_rate;
            d_a -= end_rate;
            for (k, node) in seg_nodes[j].iter().enumerate() {
                let (ck, wk) = (self.nodes[k], self.weights[k]);
                let l = node.resid.norm_squared();
                let grad_z = 2.0 * c.transpose() * &node.resid;
                let dr = Vector::from_vec(self.reference.derivative(a + s * ck));
                let grad_t = -2.0 * node.resid.dot(&dr);
                let rate = grad_z.dot(&(m * &node.z));
                d_b += wk * (l + s * (rate * ck + grad_t * ck));
                d_a += wk * (-l + s * (-rate * ck + grad_t * (1.0 - ck)));
                let ek = expm(&(m * (s * ck)));
                g_z += s * wk * (ek.transpose() * grad_z);
            }
            if j < p {
                grad[j] += d_b;
            }
            if j > 0 {
                grad[j - 1] += d_a;
            }
            lambda = g_z;
        }
        (cost, grad)
    }

    pub fn cost(&self, schedule: &SwitchingSchedule) -> f64 {
        self.cost_and_gradient(schedule).0
    }

    /// Readout along the schedule at `t0 + k dt`.
    pub fn trajectory(&self, schedule: &SwitchingSchedule, dt: f64) -> Vec<(f64, Vector)> {
        let nc = self.family.inputs.len();
        let steps = ((schedule.t_end - schedule.t0) / dt).round() as usize;
        let bounds = schedule.boundaries();
        let mut out = Vec::with_capacity(steps + 1);
        let mut z = self.z0.clone();
        let mut seg = 0;
        let mut t = schedule.t0;
        out.push((t, self.family.read(&z)));
        for k in 1..=steps {
            let target = schedule.t0 + k as f64 * dt;
            while t < target {
                while seg + 1 < bounds.len() - 1 && bounds[seg + 1] <= t {
                    seg += 1;
                }
                let next = bounds[seg + 1].min(target).max(t);
                let step = if next > t { next - t } else { target - t };
                z = expm(&(&self.family.matrices[seg % nc] * step)) * z;
                t += step;
            }
            out.push((target, self.family.read(&z)));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct StoResult {
    pub schedule: SwitchingSchedule,
    pub cost: f64,
    pub iterations: usize,
    pub cost_history: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Projected quasi-Newton (limited-memory BFGS direction, projection onto
/// monotone schedules, Armijo backtracking along the projection arc).
pub fn switching_time_optimize(problem: &StoProblem, initial: &SwitchingSchedule, opts: &StoOptions) -> Result<StoResult> {
    initial.validate()?;
    let (t0, te) = (initial.t0, initial.t_end);
    let project = |v: &[f64]| project_monotone(v, t0, te);
    let mut x = project(&initial.switch_times);
    let sched = |x: &[f64]| SwitchingSchedule { t0, t_end: te, switch_times: x.to_vec() };
    let (mut f, mut g) = problem.cost_and_gradient(&sched(&x));
    let mut history = vec![f];
    let memory = 10;
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut iterations = 0;
    let mut converged = false;
    let mut warnings = Vec::new();
    if x.is_empty() {
        return Ok(StoResult { schedule: sched(&x), cost: f, iterations: 0, cost_history: history, warnings });
    }
    while iterations < opts.max_iter {
        iterations += 1;
        // projected-gradient stationarity measure
        let pg: Vec<f64> = project(&x.iter().zip(&g).map(|(a, b)| a - b).collect::<Vec<_>>());
        let stat = pg.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if stat <= opts.tol * (te - t0) {
            converged = true;
            break;
        }
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(s_hist.len());
        for (s, y) in s_hist.iter().zip(&y_hist).rev() {
            let rho = 1.0 / dot(y, s);
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= a * yi;
            }
            alphas.push(a);
        }
        let gamma = match (s_hist.last(), y_hist.last()) {
            (Some(s), Some(y)) => dot(s, y) / dot(y, y),
            _ => (te - t0) / (x.len() as f64 * g.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300)),
        };
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
        for ((s, y), a) in s_hist.iter().zip(&y_hist).zip(alphas.iter().rev()) {
            let rho = 1.0 / dot(y, s);
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (a - b) * si;
            }
        }
        let mut accepted = None;
        for dir in [q, g.clone()] {
            let mut t = 1.0;
            for _ in 0..40 {
                let trial = project(&x.iter().zip(&dir).map(|(a, d)| a - t * d).collect::<Vec<_>>());
                let step: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
                let decrease = dot(&g, &step);
                if decrease >= 0.0 {
                    t *= 0.5;
                    continue;
                }
                let (ft, gt) = problem.cost_and_gradient(&sched(&trial));
                if ft <= f + 1e-4 * decrease {
                    accepted = Some((trial, ft, gt));
                    break;
                }
                t *= 0.5;
            }
            if accepted.is_some() {
                break;
            }
            s_hist.clear();
            y_hist.clear();
        }
        let Some((xn, fn_, gn)) = accepted else {
            converged = true;
            break;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        if dot(&s, &y) > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            s_hist.push(s);
            y_hist.push(y);
            if s_hist.len() > memory {
                s_hist.remove(0);
                y_hist.remove(0);
            }
        }
        let rel = (f - fn_).abs() / f.abs().max(1e-300);
        x = xn;
        f = fn_;
        g = gn;
        history.push(f);
        if rel < 1e-14 {
            converged = true;
            break;
        }
    }
    if !converged {
        warnings.push(format!("switching-time optimization stopped after {} iterations", opts.max_iter));
    }
    Ok(StoResult { schedule: sched(&x), cost: f, iterations, cost_history: history, warnings })
}

/// Runs `plant` open loop under a schedule, sampling every `sample_dt`
/// (a multiple of the plant step). Returns `(steps + 1)` states.
pub fn apply_schedule(
    plant: &dyn Plant,
    x0: &[f64],
    schedule: &SwitchingSchedule,
    inputs: &[f64],
    sample_dt: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    let per_sample = (sample_dt / plant.dt()).round().max(1.0) as usize;
    let samples = ((schedule.t_end - schedule.t0) / sample_dt).round() as usize;
    let mut x = x0.to_vec();
    let mut out = Vec::with_capacity(samples + 1);
    out.push(x.clone());
    let mut t = schedule.t0;
    for _ in 0..samples {
        for _ in 0..per_sample {
            let u = inputs[schedule.input_index(t, inputs.len())];
            plant.step(&mut x, u, rng)?;
            t += plant.dt();
        }
        out.push(x.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{exact_samples, sample_uniform};

    fn ou_family(inputs: &[f64]) -> SurrogateFamily {
        let plant = OuPlant { alpha: 1.0, beta: 2.0, dt: 1e-3 };
        let dict = Dictionary::monomials(1, 12);
        let pts = sample_uniform(&[[-6.0, 6.0]], 400, 3).unwrap();
        let data: Vec<SampleSet> = inputs
            .iter()
            .map(|&u| exact_samples(&plant.model(u), &pts, "uniform").unwrap())
            .collect();
        fit_surrogates(&dict, inputs, &data, &GedmdOptions { svd_cutoff: 1e-24 }).unwrap()
    }

    #[test]
    fn zero_generator_keeps_state() {
        let z0 = Vector::from_vec(vec![1.0, -2.0]);
        let traj = predict(&Mat::zeros(2, 2), &z0, 0.1, 5).unwrap();
        assert!(traj.iter().all(|z| *z == z0));
    }

    #[test]
    fn diagonal_decay() {
        let m = Mat::from_diagonal(&Vector::from_vec(vec![0.0, -1.0]));
        let traj = predict(&m, &Vector::from_vec(vec![1.0, 1.0]), 0.1, 30).unwrap();
        for (k, z) in traj.iter().enumerate() {
            assert!((z[1] - (-0.1 * k as f64).exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn input_free_plant_gives_equal_surrogates() {
        let plant = OuPlant { alpha: 1.0, beta: 2.0, dt: 1e-3 };
        let dict = Dictionary::monomials(1, 4);
        let data: Vec<SampleSet> = [1, 2]
            .iter()
            .map(|&seed| {
                let pts = sample_uniform(&[[-2.0, 2.0]], 300, seed).unwrap();
                exact_samples(&plant.model(0.0), &pts, "uniform").unwrap()
            })
            .collect();
        let fam = fit_surrogates(&dict, &[-1.0, 1.0], &data, &GedmdOptions::default()).unwrap();
        assert!((&fam.matrices[0] - &fam.matrices[1]).amax() < 1e-8);
    }

    #[test]
    fn ou_surrogate_mean() {
        let fam = ou_family(&[-5.0, 5.0]);
        let z0 = fam.lift(&[0.0]).unwrap();
        for (i, u) in [-5.0, 5.0].into_iter().enumerate() {
            let traj = predict(&fam.matrices[i], &z0, 0.01, 300).unwrap();
            for (k, z) in traj.iter().enumerate() {
                let t = 0.01 * k as f64;
                assert!((fam.read(z)[0] - u * (1.0 - (-t).exp())).abs() < 1e-3);
            }
        }
        // linearity
        let a = predict(&fam.matrices[1], &(&z0 * 3.0), 0.1, 10).unwrap();
        let b = predict(&fam.matrices[1], &z0, 0.1, 10).unwrap();
        assert!((&a[10] - &b[10] * 3.0).amax() < 1e-9 * a[10].amax());
    }

    #[test]
    fn horizon_guard() {
        let fam = ou_family(&[-5.0, 5.0]);
        let opts = MpcOptions { h: 0.1, horizon: 7, substeps: 2, alpha: 0.0, t_end: 1.0, average_window: false };
        assert!(matches!(MpcSolver::new(&fam, opts), Err(Error::Config(_))));
    }

    #[test]
    fn larger_input_set_never_costs_more() {
        let small = ou_family(&[-5.0, 5.0]);
        let large = ou_family(&[-5.0, 0.0, 5.0]);
        let opts = MpcOptions { h: 0.1, horizon: 3, substeps: 4, alpha: 0.1, t_end: 1.0, average_window: false };
        let r = Reference::Constant { value: vec![0.3] };
        let z0 = small.lift(&[1.0]).unwrap();
        let c_small = MpcSolver::new(&small, opts).unwrap().decide(&z0, 0.0, &r).1;
        let c_large = MpcSolver::new(&large, opts).unwrap().decide(&z0, 0.0, &r).1;
        assert!(c_large <= c_small + 1e-12);
    }

    #[test]
    fn mpc_holds_equilibrium() {
        let fam = ou_family(&[0.0, 5.0]);
        let plant = OuPlant { alpha: 1.0, beta: 1e6, dt: 0.01 };
        let opts = MpcOptions { h: 0.1, horizon: 2, substeps: 2, alpha: 0.0, t_end: 2.0, average_window: false };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let run = mpc(&fam, &plant, &[0.0], &Reference::Constant { value: vec![0.0] }, &opts, &mut rng).unwrap();
        assert!(run.inputs.iter().all(|&u| u == 0.0));
        assert!(run.states.iter().all(|x| x[0].abs() < 0.05));
    }

    #[test]
    fn gradient_matches_differences() {
        let fam = ou_family(&[-5.0, 5.0]);
        let z0 = fam.lift(&[0.0]).unwrap();
        let r = Reference::Tanh { shift: 2.0, dim: 1 };
        let opts = StoOptions { alpha: 0.01, ..Default::default() };
        let prob = StoProblem::new(&fam, z0, &r, &opts).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut times: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..4.0)).collect();
        times.sort_by(f64::total_cmp);
        let sched = SwitchingSchedule { t0: 0.0, t_end: 4.0, switch_times: times.clone() };
        let (_, g) = prob.cost_and_gradient(&sched);
        for j in 0..times.len() {
            let h = 1e-6;
            let mut tp = times.clone();
            tp[j] += h;
            let mut tm = times.clone();
            tm[j] -= h;
            let fp = prob.cost(&SwitchingSchedule { switch_times: tp, ..sched.clone() });
            let fm = prob.cost(&SwitchingSchedule { switch_times: tm, ..sched.clone() });
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - g[j]).abs() <= 1e-5 * g[j].abs().max(1e-3), "τ_{j}: {fd} vs {}", g[j]);
        }
    }

    #[test]
    fn single_switch_goes_to_the_end() {
        // reference sits at the u = -5 ... with x0 = -5 and u¹ = -5 active first
        let fam = ou_family(&[-5.0, 5.0]);
        let z0 = fam.lift(&[-5.0]).unwrap();
        let r = Reference::Constant { value: vec![-5.0] };
        let opts = StoOptions::default();
        let prob = StoProblem::new(&fam, z0, &r, &opts).unwrap();
        let res = switching_time_optimize(&prob, &SwitchingSchedule::uniform(0.0, 2.0, 1), &opts).unwrap();
        assert!((res.schedule.switch_times[0] - 2.0).abs() < 1e-9);
        assert!(res.cost_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn burgers_basics() {
        let plant = BurgersPlant::new(0.05, 2.0, 25, 0.002).unwrap();
        let y0 = plant.sine_state(0.5);
        let traj = plant.simulate(&y0, &|_| 0.0, 500).unwrap();
        let energy: Vec<f64> = traj.iter().map(|y| 0.5 * y.iter().map(|v| v * v).sum::<f64>()).collect();
        assert!(energy.windows(2).all(|w| w[1] <= w[0] + 1e-14));
        let flat = plant.simulate(&[0.3; 25], &|_| 0.0, 100).unwrap();
        assert!(flat.iter().all(|y| y.iter().all(|v| (v - 0.3).abs() < 1e-13)));
        assert!(matches!(BurgersPlant::new(0.05, 2.0, 25, 0.5), Err(Error::Config(_))));
    }

    #[test]
    fn burgers_refinement() {
        let coarse = BurgersPlant::new(0.05, 2.0, 25, 0.002).unwrap();
        let fine = BurgersPlant::new(0.05, 2.0, 101, 0.0005).unwrap();
        let yc = coarse.simulate(&coarse.sine_state(0.5), &|_| 0.0, 500).unwrap();
        let yf = fine.simulate(&fine.sine_state(0.5), &|_| 0.0, 2000).unwrap();
        let (c, f) = (yc.last().unwrap(), yf.last().unwrap());
        let hf = fine.spacing();
        let mut err = 0.0;
        let mut norm = 0.0;
        for (i, x) in coarse.grid().iter().enumerate() {
            let pos = x / hf;
            let k = pos.floor() as usize;
            let w = pos - k as f64;
            let v = (1.0 - w) * f[k % 101] + w * f[(k + 1) % 101];
            err += (c[i] - v).powi(2);
            norm += v * v;
        }
        assert!((err / norm).sqrt() < 0.05);
    }

    #[test]
    fn reference_table() {
        let r = Reference::Table { times: vec![0.0, 1.0, 3.0], values: vec![vec![0.0], vec![1.0], vec![0.0]] };
        assert_eq!(r.value(0.5), vec![0.5]);
        assert_eq!(r.value(2.0), vec![0.5]);
        assert_eq!(r.value(5.0), vec![0.0]);
        assert_eq!(r.derivative(2.0), vec![-0.5]);
        let pc = Reference::PiecewiseConstant { switch_times: vec![1.0], values: vec![vec![2.0], vec![-2.0]] };
        assert_eq!(pc.value(0.99), vec![2.0]);
        assert_eq!(pc.value(1.0), vec![-2.0]);
    }
}
