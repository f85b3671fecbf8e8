//! Executes the experiments of a configuration and writes their artifacts.

use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use serde_json::{json, Value};

use gedmd::coarse_grain::{
    best_bandwidth, coarse_gedmd, coarse_gedmd_reversible, cross_validate_bandwidth, diffusion_design, fit_diffusion,
    force_matching, local_mean_force, reduced_points, CoarseGrainMap, MapEval, ReducedModel,
};
use gedmd::control::{
    apply_schedule, fit_surrogates, monte_carlo_mean, mpc, Plant, Reference, StoProblem, SurrogateFamily,
    SwitchingSchedule,
};
use gedmd::dictionary::{BasisKind, Dictionary};
use gedmd::generator::{
    gedmd_deterministic, gedmd_reversible, gedmd_stochastic, uniform_gram, EstimateRecord, GedmdOptions,
    GeneratorEstimate,
};
use gedmd::linalg::Mat;
use gedmd::models::{
    analytic_ou_generator, central_differences, exact_samples, integrate_em, integrate_rk4, kramers_moyal,
    sample_lemon_slice, sample_ou_invariant, sample_uniform, spawned_bursts, stratonovich_to_ito, ModelSpec,
    SampleSet, SampleSource, SdeModel,
};
use gedmd::spectral::{conserved_quantities, decompose, koopman_modes, reconstruct_drift, SpectralDecomposition};
use gedmd::sysid::{identify, mean_abs_difference, sindy_regression, term_table, upper_pairs, IdentifiedModel};

use crate::config::{
    Experiment, Form, InitialState, PlantSpec, ReferenceSpec, RunConfig, Sampling, Training,
};
use crate::error::{CliError, CliResult};
use crate::output::{header, ArtifactDir, Field};

/// Record of one run, written as `manifest.json`.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub seed: u64,
    pub config: Value,
    pub status: String,
    pub experiments: Vec<ExperimentRecord>,
}

#[derive(Debug, Serialize)]
pub struct ExperimentRecord {
    pub name: String,
    pub kind: String,
    pub seed: u64,
    pub directory: String,
    pub artifacts: Vec<String>,
    pub summary: Value,
}

/// Runs every experiment in order. The manifest is written even when an
/// experiment fails.
pub fn run(config: &RunConfig, out: &Path, seed_override: Option<u64>) -> CliResult<Manifest> {
    let seed = seed_override.unwrap_or(config.seed);
    let mut manifest = Manifest {
        tool: "gedmd",
        version: env!("CARGO_PKG_VERSION"),
        seed,
        config: config.to_value(),
        status: "ok".into(),
        experiments: Vec::new(),
    };
    let root = ArtifactDir::create(out)?;
    let mut failure = None;
    for (i, exp) in config.experiments.iter().enumerate() {
        let name = exp.name().map(str::to_string).unwrap_or_else(|| format!("{:02}-{}", i + 1, exp.kind()));
        let exp_seed = exp.seed().unwrap_or(seed.wrapping_add(i as u64));
        let mut dir = ArtifactDir::create(&root.path().join(&name))?;
        match run_one(exp, exp_seed, &mut dir) {
            Ok(summary) => manifest.experiments.push(ExperimentRecord {
                name,
                kind: exp.kind().into(),
                seed: exp_seed,
                directory: name_of(&dir),
                artifacts: dir.written().to_vec(),
                summary,
            }),
            Err(e) => {
                let e = match e {
                    CliError::Module { source, .. } => CliError::Module { experiment: name.clone(), source },
                    other => other,
                };
                manifest.status = format!("failed: {e}");
                failure = Some(e);
                break;
            }
        }
    }
    let mut root = root;
    root.json("manifest.json", &manifest)?;
    match failure {
        Some(e) => Err(e),
        None => Ok(manifest),
    }
}

fn name_of(dir: &ArtifactDir) -> String {
    dir.path().file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn module(e: gedmd::Error) -> CliError {
    CliError::Module { experiment: String::new(), source: e }
}

trait Ctx<T> {
    fn ctx(self) -> CliResult<T>;
}

impl<T> Ctx<T> for gedmd::Result<T> {
    fn ctx(self) -> CliResult<T> {
        self.map_err(module)
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    module(gedmd::Error::Config(msg.into()))
}

fn run_one(exp: &Experiment, seed: u64, out: &mut ArtifactDir) -> CliResult<Value> {
    match exp {
        Experiment::Estimate {
            model,
            dictionary,
            sampling,
            form,
            svd_cutoff,
            drift_noise,
            convergence,
            save_samples,
            ..
        } => {
            let dict = Dictionary::new(dictionary.clone()).ctx()?;
            let (_, sample) = build_samples(model, sampling, seed, *drift_noise)?;
            if *save_samples {
                write_samples(out, &sample, model, seed)?;
            }
            let opts = GedmdOptions { svd_cutoff: *svd_cutoff };
            let est = estimate(&dict, &sample, *form, &opts)?;
            write_generator(out, &dict, &est)?;
            let mut summary = json!({
                "samples": est.samples,
                "size": est.size(),
                "rank": est.rank,
                "warnings": est.warnings,
            });
            if let (ModelSpec::OrnsteinUhlenbeck { alpha, beta, u }, BasisKind::Monomials { dim: 1, max_degree }) =
                (model, dictionary)
            {
                if *u == 0.0 {
                    let exact = analytic_ou_generator(*alpha, *beta, *max_degree);
                    summary["max_abs_error_vs_analytic"] = json!((est.l_hat() - exact).amax());
                }
            }
            if let Some(conv) = convergence {
                let Sampling::Uniform { bounds, .. } = sampling else {
                    return Err(config_err("the convergence study needs uniform sampling"));
                };
                let g = uniform_gram(&dict, bounds, conv.quadrature_nodes).ctx()?;
                let mut rows = Vec::new();
                let mut logs = Vec::new();
                for &m in &conv.sample_sizes {
                    let mut acc = 0.0;
                    for r in 0..conv.repeats {
                        let s = seed.wrapping_add(1000 * (r as u64 + 1)).wrapping_add(m as u64);
                        let pts = sample_uniform(bounds, m, s).ctx()?;
                        let psi = dict.evaluate_values(&pts).ctx()?;
                        let g_hat = &psi * psi.transpose() / m as f64;
                        acc += (g_hat - &g).norm();
                    }
                    let err = acc / conv.repeats as f64;
                    logs.push(((m as f64).ln(), err.ln()));
                    rows.push(vec![Field::from(m), Field::from(err)]);
                }
                out.csv("gram_convergence.csv", &header(&["m", "gram_error"]), rows)?;
                summary["gram_error_slope"] = json!(slope(&logs));
            }
            Ok(summary)
        }
        Experiment::Spectrum {
            model,
            dictionary,
            sampling,
            form,
            svd_cutoff,
            count,
            normalization,
            modes,
            mode_tol,
            term_tol,
            validation,
            ..
        } => {
            let dict = Dictionary::new(dictionary.clone()).ctx()?;
            let (sde, sample) = build_samples(model, sampling, seed, 0.0)?;
            let est = estimate(&dict, &sample, *form, &GedmdOptions { svd_cutoff: *svd_cutoff })?;
            let mut dec = decompose(&est).ctx()?;
            dec.normalize(*normalization);
            write_eigenvalues(out, &dec)?;
            write_eigenfunctions(out, &dict, &dec, *count, *term_tol)?;
            let mut summary = json!({
                "rank": est.rank,
                "eigenvalues": dec.eigenvalues.iter().take(*count).map(|z| [z.re, z.im]).collect::<Vec<_>>(),
                "max_residual": dec.residuals().into_iter().fold(0.0, f64::max),
                "warnings": est.warnings,
            });
            if *modes {
                let selector = dict.full_state_selector().ctx()?;
                let md = koopman_modes(&dec, &selector, *mode_tol).ctx()?;
                let d = selector.ncols();
                let mut head = vec!["index".to_string(), "eigenvalue_re".into(), "eigenvalue_im".into()];
                for j in 0..d {
                    head.push(format!("v{}_re", j + 1));
                    head.push(format!("v{}_im", j + 1));
                }
                let rows = md.active.iter().map(|&l| {
                    let mut r = vec![Field::from(l), dec.eigenvalues[l].re.into(), dec.eigenvalues[l].im.into()];
                    for j in 0..d {
                        r.push(md.modes[(j, l)].re.into());
                        r.push(md.modes[(j, l)].im.into());
                    }
                    r
                });
                out.csv("modes.csv", &head, rows)?;
                summary["active_modes"] = json!(md.active);
                if let Some(v) = validation {
                    let (_, fresh) = build_samples(model, v, seed.wrapping_add(1), 0.0)?;
                    let rec = reconstruct_drift(&dec, &md, &dict, &fresh.points).ctx()?;
                    summary["drift_reconstruction_max_error"] = json!((rec - &fresh.drift).amax());
                }
                summary["mode_warnings"] = json!(md.warnings);
            }
            let _ = sde;
            Ok(summary)
        }
        Experiment::Identify {
            model,
            dictionary,
            sampling,
            form,
            svd_cutoff,
            drift_noise,
            options,
            term_tol,
            compare_sindy,
            ..
        } => {
            let dict = Dictionary::new(dictionary.clone()).ctx()?;
            let opts = GedmdOptions { svd_cutoff: *svd_cutoff };
            let (_, sample) = build_samples(model, sampling, seed, *drift_noise)?;
            let est = estimate(&dict, &sample, *form, &opts)?;
            let mut id_opts = *options;
            if sample.diffusion.is_none() || *form == Form::Deterministic {
                id_opts.diffusion = false;
            }
            let id = identify(&est, &dict, &id_opts).ctx()?;
            write_identified(out, &dict, &id, *term_tol)?;
            let mut summary = json!({
                "rank": est.rank,
                "threshold_history": id.threshold_history,
                "warnings": id.warnings,
                "drift_rms": id.drift_rms(&dict, &sample).ctx()?,
            });
            if *drift_noise > 0.0 {
                let (_, clean) = build_samples(model, sampling, seed, 0.0)?;
                let clean_est = estimate(&dict, &clean, *form, &opts)?;
                let reference = identify(&clean_est, &dict, &gedmd::sysid::IdentifyOptions { threshold: 0.0, ..id_opts })
                    .ctx()?;
                summary["drift_mean_abs_error"] = json!(mean_abs_difference(&id.drift_coeffs, &reference.drift_coeffs));
                summary["drift_max_abs_error"] = json!((&id.drift_coeffs - &reference.drift_coeffs).amax());
            }
            if *compare_sindy {
                let direct = sindy_regression(&dict, &sample, &opts).ctx()?;
                let psi = dict.evaluate_values(&sample.points).ctx()?;
                let selector = dict.full_state_selector().ctx()?;
                let via_generator = selector.transpose() * &est.m * &psi;
                summary["sindy_max_difference"] = json!((via_generator - direct * &psi).amax());
            }
            Ok(summary)
        }
        Experiment::Conserved { model, dictionary, sampling, form, svd_cutoff, zero_tol, term_tol, .. } => {
            let dict = Dictionary::new(dictionary.clone()).ctx()?;
            let (_, sample) = build_samples(model, sampling, seed, 0.0)?;
            let est = estimate(&dict, &sample, *form, &GedmdOptions { svd_cutoff: *svd_cutoff })?;
            let dec = decompose(&est).ctx()?;
            write_eigenvalues(out, &dec)?;
            let tol = zero_tol * dec.spectral_radius();
            let cq = conserved_quantities(&dec, dict.constant_index(), Some(tol)).ctx()?;
            let tables: Vec<_> = cq
                .vectors
                .iter()
                .map(|v| term_table(&dict, v.as_slice(), *term_tol))
                .collect();
            out.json("conserved.json", &json!({ "multiplicity": cq.multiplicity, "zero_tol": cq.zero_tol, "quantities": tables }))?;
            Ok(json!({ "multiplicity": cq.multiplicity, "zero_tol": cq.zero_tol, "quantities": tables }))
        }
        Experiment::Coarsegrain {
            model,
            map,
            dictionary,
            sampling,
            svd_cutoff,
            timescales,
            diffusion_basis,
            positivity,
            force_centers,
            bandwidths,
            folds,
            window,
            grid_points,
            ..
        } => run_coarsegrain(
            out,
            seed,
            CoarseSpec {
                model,
                map,
                dictionary,
                sampling,
                svd_cutoff: *svd_cutoff,
                timescales: *timescales,
                diffusion_basis,
                positivity: *positivity,
                centers: force_centers.points(),
                bandwidths,
                folds: *folds,
                window: *window,
                grid_points: *grid_points,
            },
        ),
        Experiment::ControlMpc {
            plant, inputs, dictionary, training, svd_cutoff, initial, reference, mpc: opts, monte_carlo, ..
        } => {
            let setup = control_setup(plant, inputs, dictionary, training, *svd_cutoff, initial, reference, seed)?;
            let ControlSetup { family, x0, reference, plant } = setup;
            let plant_ref: &dyn Plant = plant.as_ref();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(0);
            let first = mpc(&family, plant_ref, &x0, &reference, opts, &mut rng).ctx()?;
            let mean = if *monte_carlo > 1 {
                monte_carlo_mean(*monte_carlo, seed, |rng| Ok(mpc(&family, plant_ref, &x0, &reference, opts, rng)?.states))
                    .ctx()?
            } else {
                first.states.clone()
            };
            let d = x0.len();
            let r = reference.dim();
            let mut head = vec!["t".to_string()];
            head.extend((0..d).map(|j| format!("x{}", j + 1)));
            head.extend((0..r).map(|j| format!("ref{}", j + 1)));
            head.push("u".into());
            head.push("stage_cost".into());
            let mut sq = 0.0;
            let rows: Vec<Vec<Field>> = first
                .times
                .iter()
                .zip(&mean)
                .map(|(&t, x)| {
                    let y = family.read(&family.lift(x).unwrap_or_else(|_| DVector::zeros(family.size())));
                    let rv = reference.value(t);
                    let cost: f64 = y.iter().zip(&rv).map(|(a, b)| (a - b).powi(2)).sum();
                    sq += cost;
                    let k = ((t / opts.h) as usize).min(first.inputs.len().saturating_sub(1));
                    let mut row: Vec<Field> = vec![t.into()];
                    row.extend(x.iter().map(|&v| Field::from(v)));
                    row.extend(rv.into_iter().map(Field::from));
                    row.push(first.inputs[k].into());
                    row.push(cost.into());
                    row
                })
                .collect();
            out.csv("trajectory.csv", &head, rows)?;
            out.csv(
                "decisions.csv",
                &header(&["t", "u", "open_loop_cost"]),
                first
                    .decision_times
                    .iter()
                    .zip(&first.inputs)
                    .zip(&first.costs)
                    .map(|((&t, &u), &c)| vec![Field::from(t), u.into(), c.into()]),
            )?;
            let mut summary = json!({
                "runs": monte_carlo,
                "tracking_rms": (sq / first.times.len() as f64).sqrt(),
            });
            if let Reference::PiecewiseConstant { switch_times, values } = &reference {
                summary["plateau_offsets"] = json!(plateau_offsets(&first.times, &mean, &family, switch_times, values, opts.t_end));
            }
            Ok(summary)
        }
        Experiment::ControlSwitching {
            plant,
            inputs,
            dictionary,
            training,
            svd_cutoff,
            initial,
            reference,
            t_end,
            switches,
            optimizer,
            monte_carlo,
            sample_dt,
            ..
        } => {
            let setup = control_setup(plant, inputs, dictionary, training, *svd_cutoff, initial, reference, seed)?;
            let ControlSetup { family, x0, reference, plant } = setup;
            let z0 = family.lift(&x0).ctx()?;
            let problem = StoProblem::new(&family, z0, &reference, optimizer).ctx()?;
            let init = SwitchingSchedule::uniform(0.0, *t_end, *switches);
            let res = gedmd::control::switching_time_optimize(&problem, &init, optimizer).ctx()?;
            out.json("schedule.json", &json!({ "t0": 0.0, "t_end": t_end, "inputs": inputs, "switch_times": res.schedule.switch_times }))?;
            let traj = problem.trajectory(&res.schedule, *sample_dt);
            let plant_ref: &dyn Plant = plant.as_ref();
            let mc = monte_carlo_mean((*monte_carlo).max(1), seed, |rng| {
                apply_schedule(plant_ref, &x0, &res.schedule, inputs, *sample_dt, rng)
            })
            .ctx()?;
            let r = reference.dim();
            let mut head = vec!["t".to_string()];
            head.extend((0..r).map(|j| format!("surrogate{}", j + 1)));
            head.extend((0..r).map(|j| format!("plant_mean{}", j + 1)));
            head.extend((0..r).map(|j| format!("ref{}", j + 1)));
            head.push("u".into());
            let mut sq_ref = 0.0;
            let mut sq_mc = 0.0;
            let mut rows = Vec::new();
            for ((t, y), x) in traj.iter().zip(&mc) {
                let ym = family.read(&family.lift(x).ctx()?);
                let rv = reference.value(*t);
                sq_ref += y.iter().zip(&rv).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                sq_mc += y.iter().zip(ym.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                let mut row: Vec<Field> = vec![(*t).into()];
                row.extend(y.iter().map(|&v| Field::from(v)));
                row.extend(ym.iter().map(|&v| Field::from(v)));
                row.extend(rv.into_iter().map(Field::from));
                row.push(inputs[res.schedule.input_index(*t, inputs.len())].into());
                rows.push(row);
            }
            out.csv("trajectory.csv", &head, rows)?;
            let n = traj.len() as f64;
            Ok(json!({
                "cost": res.cost,
                "iterations": res.iterations,
                "warnings": res.warnings,
                "surrogate_rms_vs_reference": (sq_ref / n).sqrt(),
                "plant_mean_rms_vs_surrogate": (sq_mc / n).sqrt(),
                "runs": monte_carlo,
            }))
        }
    }
}

fn slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Mean deviation from the target over the second half of each plateau.
fn plateau_offsets(
    times: &[f64],
    states: &[Vec<f64>],
    family: &SurrogateFamily,
    switch_times: &[f64],
    values: &[Vec<f64>],
    t_end: f64,
) -> Vec<f64> {
    let mut edges = vec![0.0];
    edges.extend_from_slice(switch_times);
    edges.push(t_end);
    (0..values.len())
        .map(|i| {
            let (a, b) = (edges[i], edges[i + 1]);
            let mid = 0.5 * (a + b);
            let mut acc = 0.0;
            let mut count = 0;
            for (t, x) in times.iter().zip(states) {
                if *t >= mid && *t < b {
                    if let Ok(z) = family.lift(x) {
                        acc += family.read(&z)[0] - values[i][0];
                        count += 1;
                    }
                }
            }
            if count == 0 {
                0.0
            } else {
                acc / count as f64
            }
        })
        .collect()
}

fn model_of(spec: &ModelSpec) -> CliResult<SdeModel> {
    let m = spec.build().ctx()?;
    Ok(if m.stratonovich { stratonovich_to_ito(&m) } else { m })
}

fn build_samples(spec: &ModelSpec, sampling: &Sampling, seed: u64, drift_noise: f64) -> CliResult<(SdeModel, SampleSet)> {
    let model = model_of(spec)?;
    let sample = match sampling {
        Sampling::Uniform { bounds, m } => {
            let pts = sample_uniform(bounds, *m, seed).ctx()?;
            exact_samples(&model, &pts, "uniform on a box").ctx()?
        }
        Sampling::Invariant { m } => {
            let pts = match *spec {
                ModelSpec::OrnsteinUhlenbeck { alpha, beta, u } => sample_ou_invariant(alpha, beta, u, *m, seed),
                ModelSpec::LemonSlice { k, beta } => sample_lemon_slice(k, beta, *m, seed),
                _ => return Err(config_err("invariant sampling is available for the OU and lemon-slice models")),
            };
            exact_samples(&model, &pts, "invariant density").ctx()?
        }
        Sampling::Points { points } => {
            let d = model.dim;
            if points.iter().any(|p| p.len() != d) {
                return Err(config_err(format!("every point needs {d} coordinates")));
            }
            let pts = Mat::from_fn(points.len(), d, |i, j| points[i][j]);
            exact_samples(&model, &pts, "listed points").ctx()?
        }
        Sampling::Bursts { bounds, m, dt, steps, replicas } => {
            let pts = sample_uniform(bounds, *m, seed).ctx()?;
            spawned_bursts(&model, &pts, *dt, *steps, *replicas, seed).ctx()?
        }
        Sampling::Trajectory { x0, dt, steps } => {
            if model.is_deterministic() {
                let traj = integrate_rk4(&model, x0, *dt, *steps).ctx()?;
                central_differences(&traj, *dt).ctx()?
            } else {
                let traj = integrate_em(&model, x0, *dt, *steps, seed).ctx()?;
                kramers_moyal(&traj, *dt).ctx()?
            }
        }
    };
    let sample = if drift_noise > 0.0 {
        sample.with_drift_noise(drift_noise, seed ^ 0x5eed)
    } else {
        sample
    };
    Ok((model, sample))
}

fn estimate(dict: &Dictionary, sample: &SampleSet, form: Form, opts: &GedmdOptions) -> CliResult<GeneratorEstimate> {
    match form {
        Form::Auto if sample.diffusion.is_some() => gedmd_stochastic(dict, sample, opts),
        Form::Auto | Form::Deterministic => gedmd_deterministic(dict, sample, opts),
        Form::Stochastic => gedmd_stochastic(dict, sample, opts),
        Form::Reversible => gedmd_reversible(dict, sample, opts),
    }
    .ctx()
}

fn term_names(dict: &Dictionary) -> Vec<String> {
    (0..dict.size()).map(|i| dict.term_name(i)).collect()
}

fn write_generator(out: &mut ArtifactDir, dict: &Dictionary, est: &GeneratorEstimate) -> CliResult<()> {
    let names = term_names(dict);
    let l = est.l_hat();
    let mut head = vec!["term".to_string()];
    head.extend(names.iter().map(|n| format!("L({n})")));
    let rows = (0..l.nrows()).map(|i| {
        let mut r = vec![Field::from(names[i].clone())];
        r.extend(l.row(i).iter().map(|&v| Field::from(v)));
        r
    });
    out.csv("generator.csv", &head, rows)?;
    out.json("estimate.json", &EstimateRecord::from(est))
}

/// One row per sample: time (trajectory sources only), point, drift and
/// the flattened diffusion matrix, plus a JSON description.
fn write_samples(out: &mut ArtifactDir, sample: &SampleSet, model: &ModelSpec, seed: u64) -> CliResult<()> {
    let d = sample.dim();
    let times: Option<Box<dyn Fn(usize) -> f64>> = match sample.source {
        SampleSource::TrajectoryPairs { lag } => Some(Box::new(move |l| l as f64 * lag)),
        SampleSource::CentralDifferences { dt } => Some(Box::new(move |l| (l + 1) as f64 * dt)),
        _ => None,
    };
    let mut head = Vec::new();
    if times.is_some() {
        head.push("t".to_string());
    }
    head.extend((1..=d).map(|i| format!("x{i}")));
    head.extend((1..=d).map(|i| format!("b{i}")));
    if sample.diffusion.is_some() {
        for i in 1..=d {
            head.extend((1..=d).map(|j| format!("a{i}{j}")));
        }
    }
    let rows = (0..sample.len()).map(|l| {
        let mut r: Vec<Field> = Vec::new();
        if let Some(t) = &times {
            r.push(t(l).into());
        }
        r.extend(sample.points.row(l).iter().map(|&v| Field::from(v)));
        r.extend(sample.drift.row(l).iter().map(|&v| Field::from(v)));
        if let Some(a) = &sample.diffusion {
            r.extend(a.row(l).iter().map(|&v| Field::from(v)));
        }
        r
    });
    out.csv("samples.csv", &head, rows)?;
    out.json(
        "samples.json",
        &json!({
            "model": model,
            "seed": seed,
            "samples": sample.len(),
            "dim": d,
            "source": sample.source,
            "measure": sample.measure_note,
        }),
    )
}

fn write_eigenvalues(out: &mut ArtifactDir, dec: &SpectralDecomposition) -> CliResult<()> {
    let res = dec.residuals();
    out.csv(
        "eigenvalues.csv",
        &header(&["index", "re", "im", "timescale", "residual"]),
        (0..dec.len()).map(|i| {
            vec![
                Field::from(i),
                dec.eigenvalues[i].re.into(),
                dec.eigenvalues[i].im.into(),
                dec.timescales[i].into(),
                res[i].into(),
            ]
        }),
    )
}

fn write_eigenfunctions(out: &mut ArtifactDir, dict: &Dictionary, dec: &SpectralDecomposition, count: usize, tol: f64) -> CliResult<()> {
    let list: Vec<Value> = (0..count.min(dec.len()))
        .map(|l| {
            let col = dec.eigenvectors.column(l);
            let terms: Vec<Value> = col
                .iter()
                .enumerate()
                .filter(|(_, z)| z.norm() > tol)
                .map(|(i, z)| json!({ "term": dict.term_name(i), "re": z.re, "im": z.im }))
                .collect();
            json!({ "index": l, "eigenvalue": [dec.eigenvalues[l].re, dec.eigenvalues[l].im], "terms": terms })
        })
        .collect();
    out.json("eigenfunctions.json", &list)
}

fn write_identified(out: &mut ArtifactDir, dict: &Dictionary, id: &IdentifiedModel, tol: f64) -> CliResult<()> {
    let mut rows = Vec::new();
    let mut drift = serde_json::Map::new();
    for i in 0..id.dim {
        let col: Vec<f64> = id.drift_coeffs.column(i).iter().copied().collect();
        let table = term_table(dict, &col, tol);
        for t in &table {
            rows.push(vec![Field::from(format!("b{}", i + 1)), t.term.clone().into(), t.coefficient.into()]);
        }
        drift.insert(format!("b{}", i + 1), json!(table));
    }
    let mut diffusion = serde_json::Map::new();
    if let Some(a) = &id.diffusion_coeffs {
        for (c, (i, j)) in upper_pairs(id.dim).into_iter().enumerate() {
            let col: Vec<f64> = a.column(c).iter().copied().collect();
            let table = term_table(dict, &col, tol);
            for t in &table {
                rows.push(vec![Field::from(format!("a{}{}", i + 1, j + 1)), t.term.clone().into(), t.coefficient.into()]);
            }
            diffusion.insert(format!("a{}{}", i + 1, j + 1), json!(table));
        }
    }
    out.csv("terms.csv", &header(&["function", "term", "coefficient"]), rows)?;
    out.json("identified.json", &json!({ "drift": drift, "diffusion": diffusion }))?;
    out.csv(
        "threshold_history.csv",
        &header(&["iteration", "nonzero"]),
        id.threshold_history.iter().map(|&(it, c)| vec![Field::from(it), Field::from(c)]),
    )
}

struct CoarseSpec<'a> {
    model: &'a ModelSpec,
    map: &'a CoarseGrainMap,
    dictionary: &'a BasisKind,
    sampling: &'a Sampling,
    svd_cutoff: f64,
    timescales: usize,
    diffusion_basis: &'a BasisKind,
    positivity: bool,
    centers: Vec<f64>,
    bandwidths: &'a [f64],
    folds: usize,
    window: [f64; 2],
    grid_points: usize,
}

fn run_coarsegrain(out: &mut ArtifactDir, seed: u64, spec: CoarseSpec) -> CliResult<Value> {
    if spec.map.reduced_dim() != 1 {
        return Err(config_err("the reduced-model pipeline handles one reduced coordinate"));
    }
    let (model, sample) = build_samples(spec.model, spec.sampling, seed, 0.0)?;
    let beta = match (model.reversible, model.inverse_temperature) {
        (true, Some(b)) => b,
        _ => return Err(config_err("force matching needs a reversible model with a known temperature")),
    };
    let dict = Dictionary::new(spec.dictionary.clone()).ctx()?;
    let opts = GedmdOptions { svd_cutoff: spec.svd_cutoff };
    let est = coarse_gedmd(spec.map, &dict, &sample, &opts).ctx()?;
    let rev = coarse_gedmd_reversible(spec.map, &dict, &sample, &opts).ctx()?;
    let dec = decompose(&est).ctx()?;
    let dec_rev = decompose(&rev).ctx()?;
    let z = reduced_points(spec.map, &sample.points).ctx()?;
    // diffusion
    let dbasis = Dictionary::new(spec.diffusion_basis.clone()).ctx()?;
    let design = diffusion_design(&z, &dict, &dbasis).ctx()?;
    let theta = fit_diffusion(&rev.a_hat, &design, spec.positivity, Some((&dbasis, &z))).ctx()?;
    let fitted = gedmd::coarse_grain::combine_design(&design, &theta);
    let dec_fit = gedmd::spectral::decompose_matrix(&rev.times_gram_pinv(&fitted).ctx()?.transpose()).ctx()?;
    // force matching inside the window
    let [lo, hi] = spec.window;
    let keep: Vec<usize> = (0..z.nrows()).filter(|&l| z[(l, 0)] >= lo && z[(l, 0)] <= hi).collect();
    let pts = sample.points.select_rows(keep.iter());
    let grad = |x: &[f64], g: &mut [f64]| {
        let b = model.drift_vec(x);
        for (gi, bi) in g.iter_mut().zip(b) {
            *gi = -beta * bi;
        }
    };
    let centers: Vec<Vec<f64>> = spec.centers.iter().map(|&c| vec![c]).collect();
    let make = |bw: f64| Dictionary::new(BasisKind::Gaussians { centers: centers.clone(), bandwidth: bw });
    let mut zs = Vec::new();
    let mut targets = Vec::new();
    let mut me = MapEval::default();
    let mut g = vec![0.0; model.dim];
    for l in 0..pts.nrows() {
        let x: Vec<f64> = pts.row(l).iter().copied().collect();
        grad(&x, &mut g);
        let f = match spec.map.eval(&x, &mut me) {
            Ok(()) => local_mean_force(spec.map, &g, &x, &mut me).ctx()?,
            Err(gedmd::Error::Domain { .. }) => None,
            Err(e) => return Err(module(e)),
        };
        if let Some(f) = f.filter(|f| f[0].is_finite()) {
            zs.push(me.z[0]);
            targets.push(f[0]);
        }
    }
    let zm = Mat::from_column_slice(zs.len(), 1, &zs);
    let tm = Mat::from_column_slice(targets.len(), 1, &targets);
    let losses = cross_validate_bandwidth(&zm, &tm, &make, spec.bandwidths, spec.folds, &opts).ctx()?;
    let bw = best_bandwidth(&losses).ok_or_else(|| config_err("no candidate bandwidths"))?;
    let fbasis = make(bw).ctx()?;
    let fit = force_matching(&pts, &grad, spec.map, &fbasis, &opts).ctx()?;
    let reduced = ReducedModel {
        force_basis: fbasis.kind().clone(),
        force_coeffs: fit.force_coeffs.column(0).iter().copied().collect(),
        diffusion_basis: dbasis.kind().clone(),
        theta: theta.clone(),
    };
    let grid = reduced.grid(lo, hi, spec.grid_points).ctx()?;
    let selector = dict.full_state_selector().ctx()?;
    let direct_coeffs = gedmd::sysid::identify_drift(&est, &selector);
    let zg = Mat::from_fn(grid.len(), 1, |i, _| grid[i][0]);
    let direct = dict.evaluate_values(&zg).ctx()?.transpose() * direct_coeffs.column(0);
    out.csv(
        "grid.csv",
        &header(&["z", "potential", "drift", "diffusion", "drift_direct"]),
        grid.iter().zip(direct.iter()).map(|(r, &d)| vec![Field::from(r[0]), r[1].into(), r[2].into(), r[3].into(), d.into()]),
    )?;
    let count = spec.timescales;
    let ts = dec.implied_timescales(1, count);
    let ts_rev = dec_rev.implied_timescales(1, count);
    let ts_fit = dec_fit.implied_timescales(1, count);
    out.csv(
        "timescales.csv",
        &header(&["index", "stochastic", "reversible", "fitted_diffusion"]),
        (0..ts.len()).map(|i| vec![Field::from(i + 1), ts[i].into(), ts_rev[i].into(), ts_fit[i].into()]),
    )?;
    out.csv(
        "bandwidth_cv.csv",
        &header(&["bandwidth", "validation_rms"]),
        losses.iter().map(|&(b, l)| vec![Field::from(b), l.into()]),
    )?;
    out.json("reduced_model.json", &json!({ "model": reduced, "bandwidth": bw, "excluded_samples": fit.excluded }))?;
    let avals: Vec<f64> = grid.iter().map(|r| r[3]).collect();
    let mean = avals.iter().sum::<f64>() / avals.len() as f64;
    let sd = (avals.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / avals.len() as f64).sqrt();
    Ok(json!({
        "timescales": ts,
        "timescales_reversible": ts_rev,
        "timescales_fitted_diffusion": ts_fit,
        "diffusion_mean": mean,
        "diffusion_relative_sd": sd / mean,
        "bandwidth": bw,
        "warnings": est.warnings,
    }))
}

struct ControlSetup {
    family: SurrogateFamily,
    x0: Vec<f64>,
    reference: Reference,
    plant: Box<dyn Plant>,
}

#[allow(clippy::too_many_arguments)]
fn control_setup(
    plant: &PlantSpec,
    inputs: &[f64],
    dictionary: &BasisKind,
    training: &Training,
    svd_cutoff: f64,
    initial: &InitialState,
    reference: &ReferenceSpec,
    seed: u64,
) -> CliResult<ControlSetup> {
    if inputs.is_empty() {
        return Err(config_err("need at least one input value"));
    }
    let dict = Dictionary::new(dictionary.clone()).ctx()?;
    let model_for = |u: f64| match plant {
        PlantSpec::Ou(p) => p.model(u),
        PlantSpec::Burgers(p) => p.model(u),
    };
    let x0 = match (initial, plant) {
        (InitialState::Values { values }, _) => values.clone(),
        (InitialState::Sine { amplitude }, PlantSpec::Burgers(p)) => p.sine_state(*amplitude),
        (InitialState::Sine { .. }, _) => return Err(config_err("a sine initial state needs the Burgers plant")),
    };
    let points = match training {
        Training::Uniform { bounds, m } => sample_uniform(bounds, *m, seed).ctx()?,
        Training::PlantTrajectories { runs, duration, hold, stride, perturbation } => {
            let PlantSpec::Burgers(p) = plant else {
                return Err(config_err("trajectory training is available for the Burgers plant"));
            };
            if !(*hold > 0.0) || *stride == 0 {
                return Err(config_err("hold must be positive and stride nonzero"));
            }
            let lo = inputs.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = inputs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let holds = (duration / hold).ceil() as usize;
            let steps = (duration / p.dt).round() as usize;
            let mut states = Vec::new();
            for _ in 0..*runs {
                let levels: Vec<f64> = (0..holds.max(1)).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect();
                let traj = p
                    .simulate(&x0, &|t| levels[((t / hold) as usize).min(levels.len() - 1)], steps)
                    .ctx()?;
                for y in traj.iter().step_by(*stride) {
                    let noisy: Vec<f64> = y.iter().map(|v| v + perturbation * rng.sample::<f64, _>(StandardNormal)).collect();
                    states.push(noisy);
                }
            }
            Mat::from_fn(states.len(), p.nodes, |i, j| states[i][j])
        }
    };
    let data = inputs
        .iter()
        .map(|&u| exact_samples(&model_for(u), &points, "training").ctx())
        .collect::<CliResult<Vec<_>>>()?;
    let family = fit_surrogates(&dict, inputs, &data, &GedmdOptions { svd_cutoff }).ctx()?;
    let r = family.readout.nrows();
    let reference = match reference {
        ReferenceSpec::Constant { value } => Reference::Constant { value: value.clone() },
        ReferenceSpec::PiecewiseConstant { switch_times, values } => {
            Reference::PiecewiseConstant { switch_times: switch_times.clone(), values: values.clone() }
        }
        ReferenceSpec::Tanh { shift } => Reference::Tanh { shift: *shift, dim: r },
        ReferenceSpec::PlantResponse { offset, amplitude, period, duration } => {
            let PlantSpec::Burgers(p) = plant else {
                return Err(config_err("plant-response references need the Burgers plant"));
            };
            let steps = (duration / p.dt).round() as usize;
            let (o, a, per) = (*offset, *amplitude, *period);
            let states = p.simulate(&x0, &|t| o + a * (2.0 * std::f64::consts::PI * t / per).sin(), steps).ctx()?;
            let times = (0..=steps).map(|k| k as f64 * p.dt).collect();
            Reference::Table { times, values: states }
        }
    };
    reference.validate().ctx()?;
    let plant: Box<dyn Plant> = match plant {
        PlantSpec::Ou(p) => Box::new(*p),
        PlantSpec::Burgers(p) => {
            p.validate().ctx()?;
            Box::new(p.clone())
        }
    };
    if x0.len() != plant.dim() {
        return Err(config_err("initial state has the wrong dimension"));
    }
    Ok(ControlSetup { family, x0, reference, plant })
}
