use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser};
use serde_json::{Map, Value};

use markovsde::cli::{self, RunError, Subcommand};
use markovsde::config::{
    apply_override, parse_error, parse_raw, raw_from_value, seed_from_env, ConfigError, ExperimentConfig,
};

#[derive(Parser)]
#[command(
    name = "markovsde",
    version,
    about = "Simulate and analyze Markovian SDEs under several stochastic calculi"
)]
enum Cli {
    /// Monte Carlo path ensemble with moments and a path plot
    Simulate(RunArgs),
    /// Evolve a 1-D density with the Fokker-Planck solver
    FpeEvolve(RunArgs),
    /// 1-D steady densities for several alpha plus a Monte Carlo histogram
    Steady(RunArgs),
    /// Quasipotential and the A, S matrices at the attractor
    Quasipotential(RunArgs),
    /// Monte Carlo against Fokker-Planck at the final time
    Compare(RunArgs),
    /// Run the acceptance suite
    Validate(ValidateArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON config file; flags below override its entries
    #[arg(long)]
    config: Option<PathBuf>,
    /// Catalog model name (ou1d, tanh1d, klein-kramers, linear2d)
    #[arg(long)]
    model: Option<String>,
    /// Step scheme: ito, stratonovich, anti-ito, alpha=<a> or q
    #[arg(long)]
    scheme: Option<String>,
    /// Initial state, comma separated
    #[arg(long, allow_hyphen_values = true)]
    x0: Option<String>,
    #[arg(long = "t_final", alias = "t-final")]
    t_final: Option<f64>,
    #[arg(long = "m_steps", alias = "m-steps")]
    m_steps: Option<usize>,
    #[arg(long = "n_paths", alias = "n-paths")]
    n_paths: Option<usize>,
    /// Overrides both the config file and MARKOVSDE_SEED
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "x_min", alias = "x-min", allow_hyphen_values = true)]
    x_min: Option<f64>,
    #[arg(long = "x_max", alias = "x-max", allow_hyphen_values = true)]
    x_max: Option<f64>,
    #[arg(long = "n_cells", alias = "n-cells")]
    n_cells: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    alpha: Option<f64>,
    #[arg(long = "record_every", alias = "record-every")]
    record_every: Option<usize>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Model parameter, NAME=VALUE; VALUE is a number or an expression
    #[arg(long = "param", value_name = "NAME=VALUE", allow_hyphen_values = true)]
    params: Vec<String>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long, default_value = "markovsde-validate")]
    output: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

fn invalid(key: &str, message: impl Into<String>) -> RunError {
    RunError::Config(ConfigError::Invalid {
        key: key.to_string(),
        message: message.into(),
    })
}

fn read_document(path: &PathBuf) -> Result<Value, RunError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.clone(),
        source,
    })?;
    // schema check on the file itself so positions refer to its lines
    parse_raw(&text)?;
    serde_json::from_str(&text).map_err(|e| RunError::Config(parse_error(&e)))
}

fn build_config(args: RunArgs) -> Result<ExperimentConfig, RunError> {
    let mut doc = match &args.config {
        Some(path) => read_document(path)?,
        None => Value::Object(Map::new()),
    };
    let mut set = |key: &str, value: Option<String>| -> Result<(), RunError> {
        if let Some(v) = value {
            apply_override(&mut doc, key, &v)?;
        }
        Ok(())
    };
    set(
        "model.catalog",
        args.model.map(|m| serde_json::to_string(&m).expect("string")),
    )?;
    set(
        "scheme",
        args.scheme.map(|s| serde_json::to_string(&s).expect("string")),
    )?;
    set("x0", args.x0)?;
    set("t_final", args.t_final.map(|v| v.to_string()))?;
    set("m_steps", args.m_steps.map(|v| v.to_string()))?;
    set("n_paths", args.n_paths.map(|v| v.to_string()))?;
    set("grid.x_min", args.x_min.map(|v| v.to_string()))?;
    set("grid.x_max", args.x_max.map(|v| v.to_string()))?;
    set("grid.n_cells", args.n_cells.map(|v| v.to_string()))?;
    set("alpha", args.alpha.map(|v| v.to_string()))?;
    set("record_every", args.record_every.map(|v| v.to_string()))?;
    set(
        "output",
        args.output
            .map(|p| serde_json::to_string(&p.to_string_lossy()).expect("string")),
    )?;
    for p in &args.params {
        let (name, value) = p
            .split_once('=')
            .ok_or_else(|| invalid("model.params", format!("expected NAME=VALUE, got {p:?}")))?;
        set(&format!("model.params.{}", name.trim()), Some(value.trim().to_string()))?;
    }
    let seed = match args.seed {
        Some(s) => Some(s),
        None => seed_from_env()?,
    };
    Ok(ExperimentConfig::from_raw(raw_from_value(doc)?, seed)?)
}

fn execute(cli: Cli) -> Result<(), RunError> {
    let (sub, args) = match cli {
        Cli::Validate(v) => {
            let seed = match v.seed {
                Some(s) => s,
                None => seed_from_env()?.unwrap_or(0),
            };
            let outcome = cli::run_validate(&v.output, seed)?;
            println!("{}", outcome.summary);
            return Ok(());
        }
        Cli::Simulate(a) => (Subcommand::Simulate, a),
        Cli::FpeEvolve(a) => (Subcommand::FpeEvolve, a),
        Cli::Steady(a) => (Subcommand::Steady, a),
        Cli::Quasipotential(a) => (Subcommand::Quasipotential, a),
        Cli::Compare(a) => (Subcommand::Compare, a),
    };
    let config = build_config(args)?;
    let outcome = cli::run(sub, &config)?;
    println!("{}", outcome.summary);
    for f in &outcome.files {
        println!("wrote {}", config.output.join(f).display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("markovsde: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
