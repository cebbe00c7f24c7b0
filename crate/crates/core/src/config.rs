//! Experiment configuration: JSON parsing, defaults, validation and the
//! canonical form used for hashing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::catalog::{self, CatalogError, ParamValues};
use crate::fpe::GridSpec;
use crate::model::SdeModel;
use crate::sim::{EnsembleSpec, StepScheme};

pub const SEED_ENV: &str = "MARKOVSDE_SEED";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid `{key}`: {message}")]
    Invalid { key: String, message: String },
}

impl ConfigError {
    fn invalid(key: &str, message: impl Into<String>) -> Self {
        ConfigError::Invalid {
            key: key.to_string(),
            message: message.into(),
        }
    }

    /// Config key at fault, for validation errors.
    pub fn key(&self) -> Option<&str> {
        match self {
            ConfigError::Invalid { key, .. } => Some(key),
            _ => None,
        }
    }
}

/// Model section as written: either a catalog reference or inline
/// expressions.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub catalog: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coupling: Option<Vec<Vec<String>>>,
    #[serde(default)]
    pub params: ParamValues,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub x_min: Option<f64>,
    pub x_max: Option<f64>,
    pub n_cells: Option<usize>,
}

/// Raw document; every field optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub model: Option<ModelSection>,
    pub scheme: Option<String>,
    pub x0: Option<Vec<f64>>,
    pub t_final: Option<f64>,
    pub m_steps: Option<usize>,
    pub n_paths: Option<usize>,
    pub seed: Option<u64>,
    pub grid: Option<GridSection>,
    pub alpha: Option<f64>,
    pub record_every: Option<usize>,
    pub output: Option<PathBuf>,
}

/// Validated configuration with all defaults filled in.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    /// Effective model parameters (catalog defaults merged with overrides).
    pub params: ParamValues,
    pub scheme: String,
    pub x0: Vec<f64>,
    pub t_final: f64,
    pub m_steps: usize,
    pub n_paths: usize,
    pub seed: u64,
    pub grid: Option<GridSpec>,
    pub alpha: f64,
    pub record_every: usize,
    pub output: PathBuf,
    #[serde(skip)]
    built: Option<SdeModel>,
}

pub const DEFAULT_N_CELLS: usize = 400;
const DEFAULT_T_FINAL: f64 = 1.0;
const DEFAULT_M_STEPS: usize = 1000;
const DEFAULT_N_PATHS: usize = 1000;
const DEFAULT_OUTPUT: &str = "markovsde-out";

/// Parses JSON text, reporting the line of any syntax or schema error.
pub fn parse_raw(text: &str) -> Result<RawConfig, ConfigError> {
    serde_json::from_str(text).map_err(|e| parse_error(&e))
}

/// Converts a serde_json error, dropping its own position suffix.
pub fn parse_error(e: &serde_json::Error) -> ConfigError {
    let message = e.to_string();
    let suffix = format!(" at line {} column {}", e.line(), e.column());
    ConfigError::Parse {
        line: e.line(),
        column: e.column(),
        message: message.strip_suffix(&suffix).unwrap_or(&message).to_string(),
    }
}

/// Reads and validates a config file. `MARKOVSDE_SEED` overrides the seed.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    ExperimentConfig::from_raw(parse_raw(&text)?, seed_from_env()?)
}

/// Seed override from the environment, if set.
pub fn seed_from_env() -> Result<Option<u64>, ConfigError> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| ConfigError::invalid("seed", format!("{SEED_ENV}={v:?} is not a non-negative integer"))),
        Err(_) => Ok(None),
    }
}

/// Applies a `key=value` style override to a raw JSON document. Dotted keys
/// reach into objects (`grid.n_cells`, `model.params.sigma`). The value is
/// read as JSON when it parses, else as a string.
pub fn apply_override(doc: &mut Value, key: &str, value: &str) -> Result<(), ConfigError> {
    let mut parsed: Value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    if key == "x0" {
        if let Value::Number(_) = parsed {
            parsed = Value::Array(vec![parsed]);
        } else if let Value::String(s) = &parsed {
            let items = s
                .split(',')
                .map(|p| p.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| ConfigError::invalid("x0", format!("cannot read {s:?} as a list of numbers")))?;
            parsed = serde_json::to_value(items).expect("finite numbers serialize");
        }
    }
    let parts: Vec<&str> = key.split('.').collect();
    let mut cursor = doc;
    for (depth, part) in parts.iter().enumerate() {
        if !cursor.is_object() {
            *cursor = Value::Object(Map::new());
        }
        let obj = cursor.as_object_mut().expect("just made an object");
        if depth + 1 == parts.len() {
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        cursor = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    Err(ConfigError::invalid(key, "empty key"))
}

/// Deserializes an already-merged JSON value.
pub fn raw_from_value(doc: Value) -> Result<RawConfig, ConfigError> {
    // round-trip through text so schema errors carry a position
    let text = serde_json::to_string_pretty(&doc).expect("Value always serializes");
    parse_raw(&text)
}

fn positive(key: &str, v: f64) -> Result<f64, ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(ConfigError::invalid(
            key,
            format!("must be a positive finite number (got {v})"),
        ))
    }
}

fn at_least_one(key: &str, v: usize) -> Result<usize, ConfigError> {
    if v >= 1 {
        Ok(v)
    } else {
        Err(ConfigError::invalid(key, "must be at least 1"))
    }
}

fn build_model(section: &ModelSection) -> Result<(SdeModel, ParamValues), ConfigError> {
    let wrap = |key: &str, e: CatalogError| ConfigError::invalid(key, e.to_string());
    match (&section.catalog, &section.drift, &section.coupling) {
        (Some(name), None, None) => {
            let params = catalog::effective_params(name, &section.params).map_err(|e| match e {
                CatalogError::UnknownModel(_) => wrap("model.catalog", e),
                e => wrap("model.params", e),
            })?;
            let model = catalog::build(name, &section.params).map_err(|e| wrap("model.params", e))?;
            Ok((model, params))
        }
        (None, Some(drift), Some(coupling)) => {
            let label = section.label.clone().unwrap_or_else(|| "inline".to_string());
            let model = catalog::instantiate(&label, drift, coupling, &section.params).map_err(|e| wrap("model", e))?;
            Ok((model, section.params.clone()))
        }
        (Some(_), _, _) => Err(ConfigError::invalid(
            "model",
            "give either `catalog` or `drift` + `coupling`, not both",
        )),
        (None, None, _) => Err(ConfigError::invalid(
            "model.drift",
            "missing (or name a `catalog` model)",
        )),
        (None, Some(_), None) => Err(ConfigError::invalid("model.coupling", "missing")),
    }
}

impl ExperimentConfig {
    /// Validates `raw` and fills defaults. `seed_override` wins over the
    /// document's seed.
    pub fn from_raw(raw: RawConfig, seed_override: Option<u64>) -> Result<Self, ConfigError> {
        let section = raw.model.ok_or_else(|| ConfigError::invalid("model", "missing"))?;
        let (model, params) = build_model(&section)?;
        let n = model.dim();

        let scheme = raw.scheme.unwrap_or_else(|| "q".to_string());
        scheme
            .parse::<StepScheme>()
            .map_err(|e| ConfigError::invalid("scheme", e.to_string()))?;

        let x0 = match raw.x0 {
            Some(x0) => x0,
            None => match &section.catalog {
                Some(name) => {
                    catalog::default_x0(name).map_err(|e| ConfigError::invalid("model.catalog", e.to_string()))?
                }
                None => vec![0.0; n],
            },
        };
        if x0.len() != n {
            return Err(ConfigError::invalid(
                "x0",
                format!("has {} entries, model has {n} state variables", x0.len()),
            ));
        }
        if let Some(v) = x0.iter().find(|v| !v.is_finite()) {
            return Err(ConfigError::invalid("x0", format!("entry {v} is not finite")));
        }

        let t_final = positive("t_final", raw.t_final.unwrap_or(DEFAULT_T_FINAL))?;
        let m_steps = at_least_one("m_steps", raw.m_steps.unwrap_or(DEFAULT_M_STEPS))?;
        let n_paths = at_least_one("n_paths", raw.n_paths.unwrap_or(DEFAULT_N_PATHS))?;
        let record_every = at_least_one("record_every", raw.record_every.unwrap_or((m_steps / 100).max(1)))?;

        let alpha = raw.alpha.unwrap_or(1.0);
        if !(0.0..=1.0).contains(&alpha) {
            return Err(ConfigError::invalid(
                "alpha",
                format!("must lie in [0, 1] (got {alpha})"),
            ));
        }

        let grid = if n == 1 {
            let g = raw.grid.unwrap_or_default();
            let bounds = match &section.catalog {
                Some(name) => catalog::default_grid(name).ok().flatten(),
                None => None,
            };
            let x_min = g.x_min.or(bounds.map(|b| b.0));
            let x_max = g.x_max.or(bounds.map(|b| b.1));
            match (x_min, x_max) {
                (Some(lo), Some(hi)) => Some(
                    GridSpec::new(lo, hi, g.n_cells.unwrap_or(DEFAULT_N_CELLS))
                        .map_err(|e| ConfigError::invalid("grid", e.to_string()))?,
                ),
                (None, _) if g != GridSection::default() => return Err(ConfigError::invalid("grid.x_min", "missing")),
                (_, None) if g != GridSection::default() => return Err(ConfigError::invalid("grid.x_max", "missing")),
                _ => None,
            }
        } else {
            if raw.grid.is_some() {
                return Err(ConfigError::invalid(
                    "grid",
                    format!("the Fokker-Planck solver is 1-D only; this model has {n} state variables"),
                ));
            }
            None
        };

        Ok(ExperimentConfig {
            model: section,
            params,
            scheme,
            x0,
            t_final,
            m_steps,
            n_paths,
            seed: seed_override.or(raw.seed).unwrap_or(0),
            grid,
            alpha,
            record_every,
            output: raw.output.unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT)),
            built: Some(model),
        })
    }

    pub fn model(&self) -> &SdeModel {
        self.built.as_ref().expect("validated configs carry their model")
    }

    pub fn step_scheme(&self) -> StepScheme {
        self.scheme.parse().expect("validated at load time")
    }

    pub fn ensemble_spec(&self) -> EnsembleSpec {
        EnsembleSpec::new(
            self.step_scheme(),
            self.x0.clone(),
            self.t_final,
            self.m_steps,
            self.n_paths,
            self.seed,
        )
        .record_every(self.record_every)
    }

    /// The grid, or a validation error naming `grid` when there is none.
    pub fn require_grid(&self) -> Result<GridSpec, ConfigError> {
        match self.grid {
            Some(g) => Ok(g),
            None if self.model().dim() != 1 => {
                Err(ConfigError::invalid("grid", "the Fokker-Planck solver is 1-D only"))
            }
            None => Err(ConfigError::invalid(
                "grid",
                "required for inline 1-D models (x_min, x_max)",
            )),
        }
    }

    /// Canonical JSON of the effective configuration (fixed key order).
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// SHA-256 of [`ExperimentConfig::canonical_json`], hex encoded.
    pub fn config_hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(text: &str) -> Result<ExperimentConfig, ConfigError> {
        ExperimentConfig::from_raw(parse_raw(text)?, None)
    }

    #[test]
    fn minimal_catalog_config_gets_defaults() {
        let c = load(r#"{"model": {"catalog": "tanh1d"}}"#).unwrap();
        assert_eq!(c.seed, 0);
        assert_eq!(c.grid.unwrap().n_cells, 400);
        assert_eq!(c.grid.unwrap().x_min, -6.0);
        assert_eq!(c.scheme, "q");
        assert_eq!(c.x0, vec![0.0]);
        assert_eq!(c.params["sigma"], 1.0.into());
        assert_eq!(c.model().label(), "tanh1d");
    }

    #[test]
    fn validation_errors_name_the_key() {
        let err = load(r#"{"model": {"catalog": "tanh1d"}, "scheme": "milstein"}"#).unwrap_err();
        assert_eq!(err.key(), Some("scheme"));
        let err = load(r#"{"model": {"catalog": "linear2d"}, "grid": {"x_min": -1, "x_max": 1}}"#).unwrap_err();
        assert_eq!(err.key(), Some("grid"));
        let err = load(r#"{"model": {"catalog": "nope"}}"#).unwrap_err();
        assert_eq!(err.key(), Some("model.catalog"));
        let err = load(r#"{"model": {"catalog": "ou1d", "params": {"kappa": 1}}}"#).unwrap_err();
        assert_eq!(err.key(), Some("model.params"));
        let err = load(r#"{"model": {"catalog": "ou1d"}, "x0": [1, 2]}"#).unwrap_err();
        assert_eq!(err.key(), Some("x0"));
        let err = load(r#"{"model": {"catalog": "ou1d"}, "t_final": -1}"#).unwrap_err();
        assert_eq!(err.key(), Some("t_final"));
        let err = load(r#"{"model": {"drift": ["-x1"]}}"#).unwrap_err();
        assert_eq!(err.key(), Some("model.coupling"));
    }

    #[test]
    fn unknown_keys_and_syntax_errors_report_lines() {
        let err = load("{\n  \"model\": {\"catalog\": \"tanh1d\"},\n  \"sede\": 3\n}").unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 3, .. }), "{err}");
        let err = load("{\n  \"model\": {\"catalog\": \"tanh1d\"\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse { .. }));
    }

    #[test]
    fn overrides_and_hash() {
        let mut doc: Value = serde_json::from_str(r#"{"model": {"catalog": "tanh1d"}}"#).unwrap();
        apply_override(&mut doc, "grid.n_cells", "200").unwrap();
        apply_override(&mut doc, "x0", "1.5").unwrap();
        apply_override(&mut doc, "scheme", "ito").unwrap();
        apply_override(&mut doc, "model.params.sigma", "0.5").unwrap();
        let c = ExperimentConfig::from_raw(raw_from_value(doc.clone()).unwrap(), Some(9)).unwrap();
        assert_eq!(c.grid.unwrap().n_cells, 200);
        assert_eq!(c.x0, vec![1.5]);
        assert_eq!(c.seed, 9);
        assert_eq!(c.params["sigma"], 0.5.into());
        let again = ExperimentConfig::from_raw(raw_from_value(doc).unwrap(), Some(9)).unwrap();
        assert_eq!(c.config_hash(), again.config_hash());
        let other =
            ExperimentConfig::from_raw(parse_raw(r#"{"model": {"catalog": "tanh1d"}}"#).unwrap(), None).unwrap();
        assert_ne!(c.config_hash(), other.config_hash());
        assert_eq!(c.config_hash().len(), 64);
    }

    #[test]
    fn inline_models_and_expression_params() {
        let c = load(
            r#"{"model": {"label": "kk", "drift": ["x2", "-g*x2 - x1"], "coupling": [["0"], ["sqrt(2*g)"]],
                 "params": {"g": "1 + 0.1*tanh(x1*x2)"}}}"#,
        )
        .unwrap();
        assert_eq!(c.model().dim(), 2);
        assert!(c.grid.is_none());
        assert_eq!(c.x0, vec![0.0, 0.0]);
        let err = load(r#"{"model": {"drift": ["-x1"], "coupling": [["1"]]}, "grid": {"n_cells": 10}}"#).unwrap_err();
        assert_eq!(err.key(), Some("grid.x_min"));
    }
}
