//! JSON experiment configurations.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use serde_path_to_error::Segment;

use gedmd::coarse_grain::CoarseGrainMap;
use gedmd::control::{BurgersPlant, MpcOptions, OuPlant, StoOptions};
use gedmd::dictionary::BasisKind;
use gedmd::models::ModelSpec;
use gedmd::spectral::Normalization;
use gedmd::sysid::IdentifyOptions;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub seed: u64,
    pub experiments: Vec<Experiment>,
}

impl RunConfig {
    /// Parses a document, reporting schema violations with their field path.
    pub fn from_json(text: &str) -> CliResult<Self> {
        let mut doc: Value =
            serde_json::from_str(text).map_err(|e| CliError::Usage(format!("config is not valid JSON: {e}")))?;
        if let Some(list) = doc.get_mut("experiments").and_then(Value::as_array_mut) {
            for (i, item) in list.iter_mut().enumerate() {
                *item = untag(item.take()).map_err(|msg| CliError::Usage(format!("invalid config at `experiments[{i}]`: {msg}")))?;
            }
        }
        let cfg: RunConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
            CliError::Usage(format!("invalid config at `{}`: {}", field_path(e.path()), e.inner()))
        })?;
        if cfg.experiments.is_empty() {
            return Err(CliError::Usage("config lists no experiments".into()));
        }
        Ok(cfg)
    }

    /// The configuration in its document form.
    pub fn to_value(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(list) = v.get_mut("experiments").and_then(Value::as_array_mut) {
            for item in list {
                if let Value::Object(outer) = item.take() {
                    let (kind, body) = outer.into_iter().next().expect("one variant");
                    let mut fields = Map::new();
                    fields.insert("kind".into(), Value::String(kind));
                    if let Value::Object(inner) = body {
                        fields.extend(inner);
                    }
                    *item = Value::Object(fields);
                }
            }
        }
        v
    }
}

// {"kind": k, ...rest} -> {k: {...rest}}, so that the path tracker can see
// inside the variant.
fn untag(item: Value) -> Result<Value, String> {
    let Value::Object(mut fields) = item else {
        return Err("expected an object".into());
    };
    match fields.remove("kind") {
        Some(Value::String(kind)) => {
            let mut outer = Map::new();
            outer.insert(kind, Value::Object(fields));
            Ok(Value::Object(outer))
        }
        Some(_) => Err("`kind` must be a string".into()),
        None => Err("missing field `kind`".into()),
    }
}

fn field_path(path: &serde_path_to_error::Path) -> String {
    let mut out = String::new();
    for seg in path.iter() {
        match seg {
            Segment::Seq { index } => out.push_str(&format!("[{index}]")),
            Segment::Map { key } => {
                if !out.is_empty() {
                    out.push('.');
                }
                out.push_str(key);
            }
            Segment::Enum { .. } => {}
            Segment::Unknown => out.push_str(".?"),
        }
    }
    if out.is_empty() {
        out.push('.');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Form {
    /// Stochastic when the samples carry diffusion, deterministic otherwise.
    #[default]
    Auto,
    Deterministic,
    Stochastic,
    Reversible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum Sampling {
    Uniform {
        #[serde(rename = "box")]
        bounds: Vec<[f64; 2]>,
        m: usize,
    },
    /// Independent draws from the invariant density (OU and lemon slice).
    Invariant { m: usize },
    Points { points: Vec<Vec<f64>> },
    /// One simulated path; drift (and diffusion) from finite differences.
    Trajectory { x0: Vec<f64>, dt: f64, steps: usize },
    /// Uniform points, each followed by `replicas` short Euler–Maruyama
    /// runs of `steps` steps.
    Bursts {
        #[serde(rename = "box")]
        bounds: Vec<[f64; 2]>,
        m: usize,
        dt: f64,
        steps: usize,
        replicas: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Convergence {
    pub sample_sizes: Vec<usize>,
    #[serde(default = "one")]
    pub repeats: usize,
    #[serde(default = "default_quadrature")]
    pub quadrature_nodes: usize,
}

fn one() -> usize {
    1
}

fn default_quadrature() -> usize {
    32
}

fn default_cutoff() -> f64 {
    1e-10
}

fn default_count() -> usize {
    6
}

fn default_mode_tol() -> f64 {
    1e-8
}

fn default_term_tol() -> f64 {
    1e-8
}

fn default_true() -> bool {
    true
}

fn default_folds() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum Experiment {
    Estimate {
        #[serde(default)]
        name: Option<String>,
        #[serde(default)]
        seed: Option<u64>,
        model: ModelSpec,
        dictionary: BasisKind,
        sampling: Sampling,
        #[serde(default)]
        form: Form,
        #[serde(default = "default_cutoff")]
        svd_cutoff: f64,
        #[serde(default)]
        drift_noise: f64,
        #[serde(default)]
        convergence: Option<Convergence>,
        /// Write the sample set next to the estimate.
        #[serde(default)]
        save_samples: bool,
    },
    Spectrum {
        #[serde(default)]
        name: Option<String>,
        #[serde(default)]
        seed: Option<u64>,
        model: ModelSpec,
        dictionary: BasisKind,
        sampling: Sampling,
        #[serde(default)]
        form: Form,
        #[serde(default = "default_cutoff")]
        svd_cutoff: f64,
        #[serde(default = "default_count")]
        count: usize,
        #[serde(default)]
        normalization: Normalization,
        #[serde(default)]
        modes: bool,
        #[serde(default = "default_mode_tol")]
        mode_tol: f64,
        #[serde(default = "default_term_tol")]
        term_tol: f64,
        /// Fresh points on which the mode expansion of the drift is checked.
        #[serde(default)]
        validation: Option<Sampling>,
    },
    Identify {
        #[serde(default)]
        name: Option<String>,
        #[serde(default)]
        seed: Option<u64>,
        model: ModelSpec,
        dictionary: BasisKind,
        sampling: Sampling,
        #[serde(default)]
        form: Form,
        #[serde(default = "default_cutoff")]
        svd_cutoff: f64,
        #[serde(default)]
        drift_noise: f64,
        #[serde(default)]
        options: IdentifyOptions,
        #[serde(default = "default_term_tol")]
        term_tol: f64,
        /// Also run the direct state-derivative regression and compare.
        #[serde(default)]
        compare_sindy: bool,
    },
    Conserved {
        #[serde(default)]
        name: Option<String>,
        #[serde(default)]
        seed: Option<u64>,
        model: ModelSpec,
        dictionary: BasisKind,
        sampling: Sampling,
        #[serde(default)]
        form: Form,
        #[serde(default = "default_cutoff")]
        svd_cutoff: f64,
        /// Relative to the spectral radius.
        #[serde(default = "default_zero_tol")]
        zero_tol: f64,
        #[serde(default = "default_term_tol")]
        term_tol: f64,
    },
    Coarsegrain {
        #[serde(default)]
        name: Option<String>,
        #[serde(default)]
        seed: Option<u64>,
        model: ModelSpec,
        map: CoarseGrainMap,
        dictionary: BasisKind,
        sampling: Sampling,
        #[serde(default = "default_cutoff")]
        svd_cutoff: f64,
        #[serde(default = "default_timescales")]
        timescales: usize,
        diffusion_basis: BasisKind,
        #[serde(default = "default_true")]
        positivity: bool,
        force_centers: CenterGrid,
        bandwidths: Vec<f64>,
        #[serde(default = "default_folds")]
        folds: usize,
        /// Samples outside this interval are left out of force matching,
        /// and the exported grid spans it.
        window: [f64; 2],
        #[serde(default = "default_grid")]
        grid_points: usize,
    },
    ControlMpc {
        #[serde(default)]
        name: Option<String>,
        #[serde(default)]
        seed: Option<u64>,
        plant: PlantSpec,
        inputs: Vec<f64>,
        dictionary: BasisKind,
        training: Training,
        #[serde(default = "default_cutoff")]
        svd_cutoff: f64,
        initial: InitialState,
        reference: ReferenceSpec,
        mpc: MpcOptions,
        #[serde(default = "one")]
        monte_carlo: usize,
    },
    ControlSwitching {
        #[serde(default)]
        name: Option<String>,
        #[serde(default)]
        seed: Option<u64>,
        plant: PlantSpec,
        inputs: Vec<f64>,
        dictionary: BasisKind,
        training: Training,
        #[serde(default = "default_cutoff")]
        svd_cutoff: f64,
        initial: InitialState,
        reference: ReferenceSpec,
        t_end: f64,
        switches: usize,
        #[serde(default)]
        optimizer: StoOptions,
        #[serde(default = "one")]
        monte_carlo: usize,
        sample_dt: f64,
    },
}

fn default_zero_tol() -> f64 {
    1e-6
}

fn default_timescales() -> usize {
    3
}

fn default_grid() -> usize {
    113
}

/// `count` equally spaced centers on `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CenterGrid {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl CenterGrid {
    pub fn points(&self) -> Vec<f64> {
        if self.count == 1 {
            return vec![0.5 * (self.lo + self.hi)];
        }
        (0..self.count)
            .map(|i| self.lo + (self.hi - self.lo) * i as f64 / (self.count - 1) as f64)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PlantSpec {
    Ou(OuPlant),
    Burgers(BurgersPlant),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum Training {
    Uniform {
        #[serde(rename = "box")]
        bounds: Vec<[f64; 2]>,
        m: usize,
    },
    /// States visited under random piecewise-constant inputs, perturbed by
    /// Gaussian noise.
    PlantTrajectories {
        runs: usize,
        duration: f64,
        hold: f64,
        stride: usize,
        perturbation: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialState {
    Values { values: Vec<f64> },
    /// `amplitude · sin(2π x / L)` on the Burgers grid.
    Sine { amplitude: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReferenceSpec {
    Constant { value: Vec<f64> },
    PiecewiseConstant { switch_times: Vec<f64>, values: Vec<Vec<f64>> },
    Tanh { shift: f64 },
    /// Response of the plant to `offset + amplitude · sin(2π t / period)`.
    PlantResponse { offset: f64, amplitude: f64, period: f64, duration: f64 },
}

impl Experiment {
    pub fn kind(&self) -> &'static str {
        match self {
            Experiment::Estimate { .. } => "estimate",
            Experiment::Spectrum { .. } => "spectrum",
            Experiment::Identify { .. } => "identify",
            Experiment::Conserved { .. } => "conserved",
            Experiment::Coarsegrain { .. } => "coarsegrain",
            Experiment::ControlMpc { .. } => "control-mpc",
            Experiment::ControlSwitching { .. } => "control-switching",
        }
    }

    pub fn name(&self) -> Option<&str> {
        match self {
            Experiment::Estimate { name, .. }
            | Experiment::Spectrum { name, .. }
            | Experiment::Identify { name, .. }
            | Experiment::Conserved { name, .. }
            | Experiment::Coarsegrain { name, .. }
            | Experiment::ControlMpc { name, .. }
            | Experiment::ControlSwitching { name, .. } => name.as_deref(),
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            Experiment::Estimate { seed, .. }
            | Experiment::Spectrum { seed, .. }
            | Experiment::Identify { seed, .. }
            | Experiment::Conserved { seed, .. }
            | Experiment::Coarsegrain { seed, .. }
            | Experiment::ControlMpc { seed, .. }
            | Experiment::ControlSwitching { seed, .. } => *seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_list_is_a_usage_error() {
        let err = RunConfig::from_json(r#"{"name": "x", "experiments": []}"#).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn errors_name_the_field() {
        let text = r#"{"name": "x", "experiments": [{"kind": "estimate",
            "model": {"name": "double_well"},
            "dictionary": {"kind": "monomials", "dim": 2, "max_degree": 4},
            "sampling": {"method": "uniform", "box": [[-1, 1], [-1, 1]], "m": "many"}}]}"#;
        let msg = RunConfig::from_json(text).unwrap_err().to_string();
        assert!(msg.contains("experiments[0].sampling"), "{msg}");
        let text = text.replace(r#""m": "many""#, r#""m": 10"#).replace("max_degree", "max_deg");
        let msg = RunConfig::from_json(&text).unwrap_err().to_string();
        assert!(msg.contains("experiments[0].dictionary"), "{msg}");
        let text = r#"{"name": "x", "experiments": [{"kind": "spectrum", "model": {"name": "double_well"},
            "dictionary": {"kind": "monomials", "dim": 2, "max_degree": 4},
            "sampling": {"method": "invariant", "m": 10}, "count": -1}]}"#;
        let msg = RunConfig::from_json(text).unwrap_err().to_string();
        assert!(msg.contains("experiments[0].count"), "{msg}");
    }

    #[test]
    fn document_form_round_trips() {
        let text = r#"{"name": "x", "experiments": [{"kind": "estimate", "model": {"name": "double_well"},
            "dictionary": {"kind": "monomials", "dim": 2, "max_degree": 4},
            "sampling": {"method": "invariant", "m": 10}}]}"#;
        let cfg = RunConfig::from_json(text).unwrap();
        let v = cfg.to_value();
        assert_eq!(v["experiments"][0]["kind"], "estimate");
        assert_eq!(RunConfig::from_json(&v.to_string()).unwrap(), cfg);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = r#"{"name": "x", "bogus": 1, "experiments": []}"#;
        let msg = RunConfig::from_json(text).unwrap_err().to_string();
        assert!(msg.contains("bogus"), "{msg}");
    }
}
