//! Built-in models and instantiation of expression templates with
//! parameters that are either numbers or expressions.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exprlang::{self, Expr, Params, ParseError};
use crate::model::{ModelError, SdeModel};

/// A parameter value: a number, or an expression substituted into the
/// templates before binding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Number(f64),
    Expr(String),
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::Number(v) => write!(f, "{v}"),
            ParamValue::Expr(s) => f.write_str(s),
        }
    }
}

impl From<f64> for ParamValue {
    fn from(v: f64) -> Self {
        ParamValue::Number(v)
    }
}

impl From<&str> for ParamValue {
    fn from(s: &str) -> Self {
        ParamValue::Expr(s.to_string())
    }
}

pub type ParamValues = BTreeMap<String, ParamValue>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CatalogError {
    #[error("unknown catalog model `{0}` (known: ou1d, tanh1d, klein-kramers, linear2d)")]
    UnknownModel(String),
    #[error("model `{model}` has no parameter `{name}`")]
    UnknownParameter { model: String, name: String },
    #[error("in `{entry}`: {source}")]
    Parse {
        entry: String,
        #[source]
        source: ParseError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

struct Entry {
    name: &'static str,
    drift: &'static [&'static str],
    coupling: &'static [&'static [&'static str]],
    defaults: fn() -> ParamValues,
    grid: Option<(f64, f64)>,
    x0: &'static [f64],
}

fn pairs(items: &[(&str, ParamValue)]) -> ParamValues {
    items.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

const ENTRIES: &[Entry] = &[
    Entry {
        name: "ou1d",
        drift: &["-k*x1"],
        coupling: &[&["sigma"]],
        defaults: || pairs(&[("k", 1.0.into()), ("sigma", std::f64::consts::SQRT_2.into())]),
        grid: Some((-6.0, 6.0)),
        x0: &[0.0],
    },
    Entry {
        name: "tanh1d",
        drift: &["-x1"],
        coupling: &[&["sigma*(2 + tanh(x1))"]],
        defaults: || pairs(&[("sigma", 1.0.into())]),
        grid: Some((-6.0, 16.0)),
        x0: &[0.0],
    },
    Entry {
        name: "klein-kramers",
        // dU is filled with the x1-derivative of the potential U
        drift: &["x2", "-gamma*x2 - dU"],
        coupling: &[&["0"], &["sqrt(2*gamma*T)"]],
        defaults: || pairs(&[("gamma", 1.0.into()), ("T", 1.0.into()), ("U", "x1^2/2".into())]),
        grid: None,
        x0: &[0.0, 0.0],
    },
    Entry {
        name: "linear2d",
        drift: &["m11*x1 + m12*x2", "m21*x1 + m22*x2"],
        coupling: &[&["b11", "b12"], &["b21", "b22"]],
        defaults: || {
            pairs(&[
                ("m11", (-1.0).into()),
                ("m12", 1.0.into()),
                ("m21", (-1.0).into()),
                ("m22", (-1.0).into()),
                ("b11", 1.0.into()),
                ("b12", 0.0.into()),
                ("b21", 0.0.into()),
                ("b22", 1.0.into()),
            ])
        },
        grid: None,
        x0: &[0.0, 0.0],
    },
];

fn entry(name: &str) -> Result<&'static Entry, CatalogError> {
    ENTRIES
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| CatalogError::UnknownModel(name.to_string()))
}

pub fn names() -> Vec<&'static str> {
    ENTRIES.iter().map(|e| e.name).collect()
}

/// Default FPE grid bounds, for 1-D entries.
pub fn default_grid(name: &str) -> Result<Option<(f64, f64)>, CatalogError> {
    Ok(entry(name)?.grid)
}

pub fn default_x0(name: &str) -> Result<Vec<f64>, CatalogError> {
    Ok(entry(name)?.x0.to_vec())
}

/// Defaults merged with `overrides`; unknown names are rejected.
pub fn effective_params(name: &str, overrides: &ParamValues) -> Result<ParamValues, CatalogError> {
    let e = entry(name)?;
    let mut params = (e.defaults)();
    for (k, v) in overrides {
        if !params.contains_key(k) {
            return Err(CatalogError::UnknownParameter {
                model: name.to_string(),
                name: k.clone(),
            });
        }
        params.insert(k.clone(), v.clone());
    }
    Ok(params)
}

/// Instantiates a catalog model.
pub fn build(name: &str, overrides: &ParamValues) -> Result<SdeModel, CatalogError> {
    let e = entry(name)?;
    let mut params = effective_params(name, overrides)?;
    let drift: Vec<String> = e.drift.iter().map(|s| s.to_string()).collect();
    let coupling: Vec<Vec<String>> = e
        .coupling
        .iter()
        .map(|row| row.iter().map(|s| s.to_string()).collect())
        .collect();
    let mut drift = parse_all(&drift, "drift")?;
    if let Some(u) = params.remove("U") {
        let potential = match &u {
            ParamValue::Number(v) => Expr::Num(*v),
            ParamValue::Expr(s) => parse_entry(s, "U")?,
        };
        let potential = substitute_expressions(potential, &params)?;
        let du = potential.derivative(1);
        drift = drift.into_iter().map(|d| d.substitute("dU", &du)).collect();
    }
    instantiate_parsed(name, drift, parse_coupling(&coupling)?, &params)
}

/// Instantiates inline expression strings.
pub fn instantiate(
    label: &str,
    drift: &[String],
    coupling: &[Vec<String>],
    params: &ParamValues,
) -> Result<SdeModel, CatalogError> {
    instantiate_parsed(label, parse_all(drift, "drift")?, parse_coupling(coupling)?, params)
}

fn parse_entry(src: &str, entry: &str) -> Result<Expr, CatalogError> {
    exprlang::parse(src).map_err(|source| CatalogError::Parse {
        entry: entry.to_string(),
        source,
    })
}

fn parse_all(srcs: &[String], what: &str) -> Result<Vec<Expr>, CatalogError> {
    srcs.iter()
        .enumerate()
        .map(|(i, s)| parse_entry(s, &format!("{what}[{}]", i + 1)))
        .collect()
}

fn parse_coupling(rows: &[Vec<String>]) -> Result<Vec<Vec<Expr>>, CatalogError> {
    rows.iter()
        .enumerate()
        .map(|(i, row)| {
            row.iter()
                .enumerate()
                .map(|(k, s)| parse_entry(s, &format!("coupling[{}][{}]", i + 1, k + 1)))
                .collect()
        })
        .collect()
}

fn substitute_expressions(mut e: Expr, params: &ParamValues) -> Result<Expr, CatalogError> {
    for (name, value) in params {
        if let ParamValue::Expr(src) = value {
            e = e.substitute(name, &parse_entry(src, name)?);
        }
    }
    Ok(e)
}

fn instantiate_parsed(
    label: &str,
    drift: Vec<Expr>,
    coupling: Vec<Vec<Expr>>,
    params: &ParamValues,
) -> Result<SdeModel, CatalogError> {
    let drift = drift
        .into_iter()
        .map(|e| substitute_expressions(e, params))
        .collect::<Result<Vec<_>, _>>()?;
    let coupling = coupling
        .into_iter()
        .map(|row| row.into_iter().map(|e| substitute_expressions(e, params)).collect())
        .collect::<Result<Vec<Vec<_>>, _>>()?;
    let numbers: Params = params
        .iter()
        .filter_map(|(k, v)| match v {
            ParamValue::Number(x) => Some((k.clone(), *x)),
            ParamValue::Expr(_) => None,
        })
        .collect();
    Ok(SdeModel::new(label, drift, coupling, numbers)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_models_evaluate() {
        let m = build("tanh1d", &ParamValues::new()).unwrap();
        assert_eq!(m.dim(), 1);
        assert_eq!(m.drift(&[0.5]).unwrap()[0], -0.5);
        assert!((m.coupling(&[0.0]).unwrap()[(0, 0)] - 2.0).abs() < 1e-15);

        let m = build("ou1d", &pairs(&[("k", 2.0.into())])).unwrap();
        assert_eq!(m.drift(&[1.0]).unwrap()[0], -2.0);
        assert!((m.diffusion(&[0.0]).unwrap()[(0, 0)] - 2.0).abs() < 1e-15);

        let m = build("linear2d", &ParamValues::new()).unwrap();
        assert_eq!(m.drift(&[1.0, 0.0]).unwrap().as_slice(), &[-1.0, -1.0]);
    }

    #[test]
    fn klein_kramers_uses_potential_slope() {
        let m = build("klein-kramers", &ParamValues::new()).unwrap();
        assert_eq!(m.drift(&[0.5, 2.0]).unwrap().as_slice(), &[2.0, -2.5]);
        assert!((m.diffusion(&[0.0, 0.0]).unwrap()[(1, 1)] - 2.0).abs() < 1e-15);

        let over = pairs(&[
            ("gamma", "1 + 0.1*tanh(x1*x2)".into()),
            ("T", 2.0.into()),
            ("U", "x1^4/4 - x1^2/2".into()),
        ]);
        let m = build("klein-kramers", &over).unwrap();
        let (x, v) = (1.5f64, -0.4f64);
        let gamma = 1.0 + 0.1 * (x * v).tanh();
        let a = m.drift(&[x, v]).unwrap();
        assert!((a[1] - (-gamma * v - (x.powi(3) - x))).abs() < 1e-12);
        assert!((m.diffusion(&[x, v]).unwrap()[(1, 1)] - 2.0 * gamma * 2.0).abs() < 1e-12);
    }

    #[test]
    fn catalog_errors() {
        assert!(matches!(
            build("milstein", &ParamValues::new()),
            Err(CatalogError::UnknownModel(_))
        ));
        assert!(matches!(
            build("ou1d", &pairs(&[("kappa", 1.0.into())])),
            Err(CatalogError::UnknownParameter { .. })
        ));
        assert!(matches!(
            build("tanh1d", &pairs(&[("sigma", "1 +".into())])),
            Err(CatalogError::Parse { .. })
        ));
        assert_eq!(default_grid("tanh1d").unwrap(), Some((-6.0, 16.0)));
        assert_eq!(default_grid("linear2d").unwrap(), None);
    }

    #[test]
    fn inline_models_take_expression_params() {
        let m = instantiate(
            "inline",
            &["-k*x1".to_string()],
            &[vec!["s".to_string()]],
            &pairs(&[("k", 3.0.into()), ("s", "1 + x1^2".into())]),
        )
        .unwrap();
        assert_eq!(m.drift(&[1.0]).unwrap()[0], -3.0);
        assert_eq!(m.coupling(&[2.0]).unwrap()[(0, 0)], 5.0);
    }
}
