//! Run configuration file.
//!
//! ```toml
//! [model]
//! preset = "d"                 # a | b | c | d, or an [model.inline] table
//! [model.constants]            # optional overrides of the declared constants
//! k = 0.5
//!
//! [noise]
//! kind = "power-decay"         # white | power-decay | custom
//! exponent = 1.5
//!
//! [solver]
//! dt = 1e-3
//!
//! [experiment]
//! paths = 500
//! alpha_ladder = [1.0, 0.1, 0.01]
//!
//! [output]
//! archive = "runs"
//! emit_plots = true
//! ```
//!
//! Every section is optional except `model`. Unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spde_core::drift::{DriftModel, Polynomial, Preset};
use spde_core::harness::{Experiment, ExperimentSpec, Tolerances};
use spde_core::noise::{CovarianceSpec, NoiseKind};
use spde_core::solver::SolverConfig;
use spde_core::SpectralField;

#[derive(Debug)]
pub struct ConfigError {
    /// Dotted key path, or the file name for IO and syntax errors.
    pub key: String,
    pub message: String,
}

impl ConfigError {
    fn new(key: impl Into<String>, message: impl fmt::Display) -> Self {
        Self {
            key: key.into(),
            message: message.to_string(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.key, self.message)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub experiment: ExperimentConfig,
    #[serde(default, skip_serializing_if = "OutputConfig::is_default")]
    pub output: OutputConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub preset: Option<Preset>,
    pub inline: Option<DriftModel>,
    #[serde(default, skip_serializing_if = "Constants::is_empty")]
    pub constants: Constants,
}

/// Replacements for the constants a model declares.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Constants {
    pub k: Option<f64>,
    pub l: Option<f64>,
    pub one_sided_l: Option<f64>,
    /// Constant `c₁`.
    pub c1: Option<f64>,
    /// Constant `c₂`.
    pub c2: Option<f64>,
    pub m: Option<u32>,
}

impl Constants {
    fn is_empty(&self) -> bool {
        *self == Self::default()
    }

    fn apply(&self, model: &mut DriftModel) {
        if let Some(k) = self.k {
            model.transport.k = k;
        }
        if let Some(l) = self.l {
            model.transport.l = l;
        }
        if let Some(l) = self.one_sided_l {
            model.one_sided_l = Some(l);
        }
        if let Some(c) = self.c1 {
            model.reaction.c1 = Polynomial::constant(c);
        }
        if let Some(c) = self.c2 {
            model.reaction.c2 = Polynomial::constant(c);
        }
        if let Some(m) = self.m {
            model.reaction.m = m;
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseShape {
    #[default]
    White,
    PowerDecay,
    Custom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub kind: NoiseShape,
    /// `ρ` in `g_k = amplitude · k^{-ρ}`; power-decay only.
    pub exponent: Option<f64>,
    pub amplitude: f64,
    /// Explicit `g_1..g_N`; custom only.
    pub weights: Option<Vec<f64>>,
    pub delta: f64,
    pub delta1: f64,
    pub theta: f64,
    pub q: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        let w = CovarianceSpec::white(1);
        Self {
            kind: NoiseShape::White,
            exponent: None,
            amplitude: 1.0,
            weights: None,
            delta: w.delta,
            delta1: w.delta1,
            theta: w.theta,
            q: w.q,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Defaults to 2000, or 64 seeds for the contraction experiment.
    pub paths: Option<usize>,
    /// Defaults to `[1, 0.1, 0.01]`.
    pub alpha_ladder: Option<Vec<f64>>,
    pub seed: u64,
    /// Defaults to `[1e-3, 1e-4, 1e-5]`.
    pub perturbations: Option<Vec<f64>>,
    /// Spectral coefficients, padded with zeros to the number of modes.
    /// Defaults to `e₁`.
    pub initial_states: Option<Vec<Vec<f64>>>,
    pub tolerances: Tolerances,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub archive: Option<PathBuf>,
    pub emit_plots: bool,
    /// Where plot data goes; defaults to `plots/` inside the run directory.
    pub plot_dir: Option<PathBuf>,
}

impl OutputConfig {
    fn is_default(&self) -> bool {
        *self == Self::default()
    }
}

pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::new(path.display().to_string(), e))?;
    parse_str(&text)
}

pub fn parse_str(text: &str) -> Result<RunConfig, ConfigError> {
    let mut cfg: RunConfig = toml::from_str(text).map_err(|e| {
        let key = e.message().split('`').nth(1).unwrap_or("config").to_string();
        ConfigError::new(key, e.to_string().trim_end())
    })?;
    cfg.resolve_defaults();
    Ok(cfg)
}

impl RunConfig {
    /// Fills every optional experiment field with the value a run would use, so
    /// the echoed config is complete.
    fn resolve_defaults(&mut self) {
        let e = &mut self.experiment;
        let base = ExperimentSpec::new(Experiment::Simulate, DriftModel::preset(Preset::Linear));
        e.alpha_ladder.get_or_insert(base.alpha_ladder);
        e.perturbations.get_or_insert(base.perturbations);
        e.initial_states.get_or_insert_with(|| vec![vec![1.0]]);
    }

    /// Validated experiment spec for `name`. `paths` falls back to the
    /// experiment's default.
    pub fn spec(&self, name: Experiment) -> Result<ExperimentSpec, ConfigError> {
        let model = self.model()?;
        let modes = self.solver.modes;
        check_unit("solver.alpha", self.solver.alpha)?;
        self.solver.validate().map_err(|e| ConfigError::new("solver", e))?;
        let noise = self.noise(modes)?;
        let mut spec = ExperimentSpec::new(name, model);
        let e = &self.experiment;
        spec.solver = self.solver.clone();
        spec.noise = noise;
        if let Some(p) = e.paths {
            spec.paths = p;
        }
        if let Some(l) = &e.alpha_ladder {
            for (i, a) in l.iter().enumerate() {
                check_unit(&format!("experiment.alpha_ladder[{i}]"), *a)?;
            }
            spec.alpha_ladder = l.clone();
        }
        if let Some(p) = &e.perturbations {
            spec.perturbations = p.clone();
        }
        if let Some(states) = &e.initial_states {
            spec.initial_states = states
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    if c.len() > modes {
                        return Err(ConfigError::new(
                            format!("experiment.initial_states[{i}]"),
                            format!("{} coefficients for {modes} modes", c.len()),
                        ));
                    }
                    let mut v = c.clone();
                    v.resize(modes, 0.0);
                    Ok(SpectralField::new(v))
                })
                .collect::<Result<_, _>>()?;
        }
        spec.seed = e.seed;
        spec.tolerances = e.tolerances.clone();
        spec.tolerances
            .validate()
            .map_err(|err| ConfigError::new("experiment.tolerances", err))?;
        spec.validate().map_err(|err| ConfigError::new("experiment", err))?;
        Ok(spec)
    }

    fn model(&self) -> Result<DriftModel, ConfigError> {
        let m = &self.model;
        let mut model = match (&m.preset, &m.inline) {
            (Some(p), None) => DriftModel::preset(*p),
            (None, Some(inline)) => inline.clone(),
            (Some(_), Some(_)) => return Err(ConfigError::new("model", "give either `preset` or `inline`, not both")),
            (None, None) => return Err(ConfigError::new("model", "missing `preset` or `inline`")),
        };
        m.constants.apply(&mut model);
        model.validate().map_err(|e| ConfigError::new("model", e))?;
        Ok(model)
    }

    fn noise(&self, modes: usize) -> Result<CovarianceSpec, ConfigError> {
        let n = &self.noise;
        let base = match n.kind {
            NoiseShape::White => CovarianceSpec::from_kind(modes, NoiseKind::White, n.amplitude),
            NoiseShape::PowerDecay => {
                let exponent = n
                    .exponent
                    .ok_or_else(|| ConfigError::new("noise.exponent", "required for power-decay noise"))?;
                CovarianceSpec::from_kind(modes, NoiseKind::PowerDecay { exponent }, n.amplitude)
            }
            NoiseShape::Custom => {
                let w = n
                    .weights
                    .as_ref()
                    .ok_or_else(|| ConfigError::new("noise.weights", "required for custom noise"))?;
                if w.len() != modes {
                    return Err(ConfigError::new(
                        "noise.weights",
                        format!("{} weights for {modes} modes", w.len()),
                    ));
                }
                CovarianceSpec::custom(w.iter().map(|g| g * n.amplitude).collect())
                    .map_err(|e| ConfigError::new("noise.weights", e))?
            }
        };
        if n.kind != NoiseShape::PowerDecay && n.exponent.is_some() {
            return Err(ConfigError::new("noise.exponent", "only used by power-decay noise"));
        }
        if n.kind != NoiseShape::Custom && n.weights.is_some() {
            return Err(ConfigError::new("noise.weights", "only used by custom noise"));
        }
        let spec = base
            .with_trace_exponents(n.delta, n.delta1)
            .with_g1_exponents(n.theta, n.q);
        spec.validate().map_err(|e| ConfigError::new("noise", e))?;
        Ok(spec)
    }

    /// The config that `spec` was built from with every default written out
    /// and the model inlined, so equal specs echo identically. The output
    /// section is dropped; it does not affect results.
    pub fn echo(&self, spec: &ExperimentSpec) -> String {
        let mut c = self.clone();
        c.model = ModelConfig {
            preset: None,
            inline: Some(spec.model.clone()),
            constants: Constants::default(),
        };
        c.solver = spec.solver.clone();
        c.experiment = ExperimentConfig {
            paths: Some(spec.paths),
            alpha_ladder: Some(spec.alpha_ladder.clone()),
            seed: spec.seed,
            perturbations: Some(spec.perturbations.clone()),
            initial_states: Some(spec.initial_states.iter().map(|x| x.coeffs().to_vec()).collect()),
            tolerances: spec.tolerances.clone(),
        };
        c.output = OutputConfig::default();
        toml::to_string(&c).expect("run config serializes")
    }
}

fn check_unit(key: &str, a: f64) -> Result<(), ConfigError> {
    if (0.0..=1.0).contains(&a) {
        Ok(())
    } else {
        Err(ConfigError::new(key, format!("alpha must lie in [0, 1], got {a}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_resolves_documented_defaults() {
        let cfg = parse_str("[model]\npreset = \"d\"\n").unwrap();
        let spec = cfg.spec(Experiment::Energy).unwrap();
        assert_eq!(spec.solver, SolverConfig::default());
        assert_eq!(spec.paths, 2000);
        assert_eq!(spec.alpha_ladder, vec![1.0, 0.1, 0.01]);
        assert_eq!(spec.noise, CovarianceSpec::white(64));
        assert_eq!(spec.initial_states, vec![SpectralField::single_mode(64, 1, 1.0)]);
        assert_eq!(spec.tolerances, Tolerances::default());
        assert_eq!(cfg.spec(Experiment::Gronwall).unwrap().paths, 64);
        // The echo is complete and rebuilds the same spec.
        let echo = cfg.echo(&spec);
        for key in ["dt", "horizon", "alpha_ladder", "stderr_factor", "amplitude", "paths"] {
            assert!(echo.contains(key), "{key} missing from\n{echo}");
        }
        let back = parse_str(&echo).unwrap();
        assert_eq!(back.spec(Experiment::Energy).unwrap(), spec);
        assert_eq!(back.echo(&spec), echo);
    }

    #[test]
    fn unknown_keys_are_named() {
        for text in [
            "foo = 1\n[model]\npreset = \"d\"\n",
            "[model]\npreset = \"d\"\n[solver]\nfoo = 1\n",
            "[model]\npreset = \"d\"\n[experiment.tolerances]\nfoo = 1\n",
            "[model]\npreset = \"d\"\n[model.constants]\nfoo = 1\n",
        ] {
            let err = parse_str(text).unwrap_err();
            assert_eq!(err.key, "foo", "{err}");
        }
    }

    #[test]
    fn alpha_outside_unit_interval_is_rejected() {
        let cfg = parse_str("[model]\npreset = \"b\"\n[solver]\nalpha = 1.5\n").unwrap();
        assert_eq!(cfg.spec(Experiment::Energy).unwrap_err().key, "solver.alpha");
        let cfg = parse_str("[model]\npreset = \"b\"\n[experiment]\nalpha_ladder = [1.0, 1.5]\n").unwrap();
        assert_eq!(
            cfg.spec(Experiment::Moment2m).unwrap_err().key,
            "experiment.alpha_ladder[1]"
        );
    }

    #[test]
    fn inline_model_matches_preset() {
        let preset = DriftModel::preset(Preset::Combined);
        let mut cfg = RunConfig::default();
        cfg.model.inline = Some(preset.clone());
        let back = parse_str(&toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back.spec(Experiment::Simulate).unwrap().model, preset);
        cfg.model.preset = Some(Preset::Combined);
        assert_eq!(cfg.spec(Experiment::Simulate).unwrap_err().key, "model");
    }

    #[test]
    fn noise_shapes() {
        let cfg = parse_str(
            "[model]\npreset = \"d\"\n[solver]\nmodes = 4\ngrid_size = 16\n[noise]\nkind = \"power-decay\"\nexponent = 2.0\n",
        )
        .unwrap();
        assert_eq!(cfg.spec(Experiment::Simulate).unwrap().noise.weights(), &[1.0, 0.25, 1.0 / 9.0, 1.0 / 16.0]);
        let cfg = parse_str("[model]\npreset = \"d\"\n[noise]\nkind = \"custom\"\nweights = [1.0]\n").unwrap();
        assert_eq!(cfg.spec(Experiment::Simulate).unwrap_err().key, "noise.weights");
        let cfg = parse_str("[model]\npreset = \"d\"\n[noise]\nexponent = 2.0\n").unwrap();
        assert_eq!(cfg.spec(Experiment::Simulate).unwrap_err().key, "noise.exponent");
    }

    #[test]
    fn constants_override_preset() {
        let cfg = parse_str("[model]\npreset = \"a\"\n[model.constants]\nk = 0.25\n").unwrap();
        assert_eq!(cfg.spec(Experiment::HypothesisAudit).unwrap().model.transport.k, 0.25);
    }
}
