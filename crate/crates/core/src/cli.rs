//! Subcommand runners behind the `markovsde` binary.
//!
//! Each runner writes its CSV tables and SVG plots into the configured
//! output directory, followed by `config.json` and `manifest.txt`.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig};
use crate::fpe::{density_mode, steady_1d, DensityGrid, FpeError, FpeSolver};
use crate::plot::{LinePlot, Series};
use crate::sim::{simulate_ensemble, SimError, StepScheme};
use crate::stats::{histogram, kde_mode, l1_distance, moments, SampleSet, StatsError};
use crate::steady::{analyze, find_fixed_point, quasipotential_1d, SteadyError};
use crate::validation;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subcommand {
    Simulate,
    FpeEvolve,
    Steady,
    Quasipotential,
    Compare,
    Validate,
}

impl Subcommand {
    pub fn name(self) -> &'static str {
        match self {
            Subcommand::Simulate => "simulate",
            Subcommand::FpeEvolve => "fpe-evolve",
            Subcommand::Steady => "steady",
            Subcommand::Quasipotential => "quasipotential",
            Subcommand::Compare => "compare",
            Subcommand::Validate => "validate",
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{failed} acceptance criteria failed")]
    Validation { failed: usize },
}

impl RunError {
    /// 1 for usage, config and I/O problems, 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Io { .. } => 1,
            RunError::Numerical(_) | RunError::Validation { .. } => 2,
        }
    }
}

macro_rules! numerical {
    ($($t:ty),*) => {$(
        impl From<$t> for RunError {
            fn from(e: $t) -> Self {
                RunError::Numerical(e.to_string())
            }
        }
    )*};
}
numerical!(SimError, FpeError, SteadyError, StatsError);

/// Files written by a run, relative to the output directory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOutcome {
    pub files: Vec<String>,
    pub summary: String,
}

struct Out<'a> {
    dir: &'a Path,
    files: Vec<String>,
}

impl<'a> Out<'a> {
    fn new(dir: &'a Path) -> Result<Self, RunError> {
        fs::create_dir_all(dir).map_err(|source| RunError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        Ok(Self { dir, files: Vec::new() })
    }

    fn write(&mut self, name: &str, body: impl FnOnce(&mut BufWriter<File>) -> io::Result<()>) -> Result<(), RunError> {
        let path = self.dir.join(name);
        let io_err = |source| RunError::Io {
            path: path.clone(),
            source,
        };
        let mut w = BufWriter::new(File::create(&path).map_err(io_err)?);
        body(&mut w).and_then(|_| w.flush()).map_err(io_err)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn text(&mut self, name: &str, text: &str) -> Result<(), RunError> {
        self.write(name, |w| w.write_all(text.as_bytes()))
    }
}

/// Runs a model subcommand and writes its manifest. On a numerical failure a
/// `diagnostic.txt` is written before the error is returned.
pub fn run(sub: Subcommand, config: &ExperimentConfig) -> Result<RunOutcome, RunError> {
    let started = chrono::Utc::now();
    let clock = Instant::now();
    let mut out = Out::new(&config.output)?;
    let result = match sub {
        Subcommand::Simulate => simulate(config, &mut out),
        Subcommand::FpeEvolve => fpe_evolve(config, &mut out),
        Subcommand::Steady => steady(config, &mut out),
        Subcommand::Quasipotential => quasipotential(config, &mut out),
        Subcommand::Compare => compare(config, &mut out),
        Subcommand::Validate => validate(config.seed, &mut out),
    };
    let summary = match result {
        Ok(s) => s,
        Err(e) => {
            if matches!(e, RunError::Numerical(_)) {
                let diag = format!(
                    "subcommand = {}\nconfig_hash = {}\nseed = {}\nerror = {e}\n",
                    sub.name(),
                    config.config_hash(),
                    config.seed
                );
                // best effort: the original error matters more than this file
                let _ = out.text("diagnostic.txt", &diag);
            }
            return Err(e);
        }
    };
    write_manifest(
        &mut out,
        sub,
        &config.canonical_json(),
        &config.config_hash(),
        config.seed,
        started,
        clock,
    )?;
    Ok(RunOutcome {
        files: out.files,
        summary,
    })
}

/// `validate` without a model config.
pub fn run_validate(output: &Path, seed: u64) -> Result<RunOutcome, RunError> {
    let started = chrono::Utc::now();
    let clock = Instant::now();
    let mut out = Out::new(output)?;
    let result = validate(seed, &mut out);
    let canonical = format!(r#"{{"subcommand":"validate","seed":{seed}}}"#);
    let hash = hex::encode(<sha2::Sha256 as sha2::Digest>::digest(canonical.as_bytes()));
    write_manifest(&mut out, Subcommand::Validate, &canonical, &hash, seed, started, clock)?;
    let summary = result?;
    Ok(RunOutcome {
        files: out.files,
        summary,
    })
}

fn write_manifest(
    out: &mut Out<'_>,
    sub: Subcommand,
    canonical: &str,
    hash: &str,
    seed: u64,
    started: chrono::DateTime<chrono::Utc>,
    clock: Instant,
) -> Result<(), RunError> {
    out.text("config.json", &format!("{canonical}\n"))?;
    let manifest = format!(
        "config_hash = {hash}\nseed = {seed}\nversion = {VERSION}\nsubcommand = {}\nstarted = {}\nelapsed_seconds = {:.3}\n",
        sub.name(),
        started.to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
        clock.elapsed().as_secs_f64()
    );
    out.text("manifest.txt", &manifest)
}

fn one_dimensional(config: &ExperimentConfig, what: &str) -> Result<(), RunError> {
    let n = config.model().dim();
    if n != 1 {
        return Err(ConfigError::Invalid {
            key: "model".into(),
            message: format!("`{what}` needs a 1-D model (this one has {n} state variables)"),
        }
        .into());
    }
    Ok(())
}

fn scheme_alpha(scheme: StepScheme) -> f64 {
    // the Q-increment scheme is consistent with the anti-Ito equation
    match scheme {
        StepScheme::QIncrement => 1.0,
        StepScheme::AlphaEuler(a) => a,
    }
}

fn simulate(config: &ExperimentConfig, out: &mut Out<'_>) -> Result<String, RunError> {
    let model = config.model();
    let ens = simulate_ensemble(model, &config.ensemble_spec())?;
    out.write("ensemble.csv", |w| ens.write_csv(w))?;

    let steps = ens.recorded_steps();
    let dt = ens.spec.dt();
    let n = model.dim();
    let mut rows = Vec::with_capacity(steps.len());
    for (slot, &step) in steps.iter().enumerate() {
        let mut row = vec![step as f64 * dt];
        for k in 0..n {
            let m = moments(&SampleSet::new(ens.values_at(slot, k))?)?;
            row.extend([m.mean, m.variance]);
        }
        rows.push(row);
    }
    out.write("moments.csv", |w| {
        write!(w, "t")?;
        for k in 1..=n {
            write!(w, ",mean_x{k},var_x{k}")?;
        }
        writeln!(w)?;
        for row in &rows {
            let cells: Vec<String> = row.iter().map(f64::to_string).collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    })?;

    let ts: Vec<f64> = steps.iter().map(|&s| s as f64 * dt).collect();
    let mut plot = LinePlot::new(format!("{}: sample paths", model.label()), "t", "x1");
    for p in ens.paths.iter().take(20) {
        let xs: Vec<f64> = p.states.iter().step_by(n).copied().collect();
        plot = plot.with(Series::new(format!("path {}", p.path_id), &ts, &xs));
    }
    out.text("paths.svg", &plot.to_svg())?;
    Ok(format!(
        "{} paths completed, {} aborted",
        ens.paths.len(),
        ens.aborted.len()
    ))
}

/// Boundary cells above this fraction of the peak mean the grid is too narrow.
const BOUNDARY_WARN_RATIO: f64 = 1e-10;

fn warn_boundary(w: &DensityGrid, what: &str) -> f64 {
    let ratio = w.boundary_ratio();
    if ratio > BOUNDARY_WARN_RATIO {
        eprintln!("warning: {what}: boundary density is {ratio:.1e} of the peak; widen the grid");
    }
    ratio
}

fn fpe_evolve(config: &ExperimentConfig, out: &mut Out<'_>) -> Result<String, RunError> {
    one_dimensional(config, "fpe-evolve")?;
    let model = config.model();
    let spec = config.require_grid()?;
    let solver = FpeSolver::new(model, spec, config.alpha)?;
    let w0 = DensityGrid::gaussian(spec, config.x0[0], 3.0 * spec.dx())?;
    let dt = solver.stable_dt();
    let steps = (config.t_final / dt).ceil().max(1.0) as usize;
    let every = (steps / 200).max(1);
    let mut traj = vec![(0.0, density_mode(&w0), w0.mean(), w0.variance())];
    let evo = solver.evolve_observed(&w0, config.t_final, dt, every, |t, w| {
        traj.push((t, density_mode(w), w.mean(), w.variance()));
    })?;

    let meta = [
        ("t", config.t_final.to_string()),
        ("alpha", config.alpha.to_string()),
        ("dt", evo.dt.to_string()),
        ("steps", evo.steps.to_string()),
        ("max_mass_drift", evo.max_mass_drift.to_string()),
        (
            "boundary_ratio",
            warn_boundary(&evo.density, "final density").to_string(),
        ),
    ];
    out.write("density.csv", |w| evo.density.write_csv(w, &meta))?;
    out.write("trajectory.csv", |w| {
        writeln!(w, "t,mode,mode_flag,mean,variance")?;
        for (t, m, mean, var) in &traj {
            writeln!(w, "{t},{},{:?},{mean},{var}", m.x, m.flag)?;
        }
        Ok(())
    })?;

    let xs = spec.centers();
    let density = LinePlot::new(format!("{}: density", model.label()), "x", "w")
        .with(Series::new("t = 0", &xs, w0.values()))
        .with(Series::new(
            format!("t = {}", config.t_final),
            &xs,
            evo.density.values(),
        ));
    out.text("density.svg", &density.to_svg())?;
    let ts: Vec<f64> = traj.iter().map(|r| r.0).collect();
    let modes: Vec<f64> = traj.iter().map(|r| r.1.x).collect();
    let means: Vec<f64> = traj.iter().map(|r| r.2).collect();
    let trajectory = LinePlot::new(format!("{}: mode and mean", model.label()), "t", "x")
        .with(Series::new("mode", &ts, &modes))
        .with(Series::new("mean", &ts, &means));
    out.text("trajectory.svg", &trajectory.to_svg())?;
    let last = traj.last().expect("at least the initial row");
    Ok(format!("t = {}: mode {} mean {}", config.t_final, last.1.x, last.2))
}

fn steady(config: &ExperimentConfig, out: &mut Out<'_>) -> Result<String, RunError> {
    one_dimensional(config, "steady")?;
    let model = config.model();
    let spec = config.require_grid()?;
    let ito = steady_1d(model, spec, 0.0)?;
    let strat = steady_1d(model, spec, 0.5)?;
    let anti = steady_1d(model, spec, 1.0)?;
    let chosen = steady_1d(model, spec, config.alpha)?;

    let ens = simulate_ensemble(model, &config.ensemble_spec().record_every(config.m_steps))?;
    let finals = SampleSet::new(ens.final_values(0))?;
    let hist = histogram(&finals, spec)?;
    let mc = moments(&finals)?;

    let x_star = find_fixed_point(model, &config.x0)?.x_star[0];
    let boundary = warn_boundary(&chosen, "steady density");
    let mode = density_mode(&chosen);
    let mean = chosen.mean();
    let dx = spec.dx();
    let l1_mc = l1_distance(&hist.density, &chosen)?;
    let l1_ito_anti = l1_distance(&ito, &anti)?;

    out.write("steady.csv", |w| {
        writeln!(w, "x,w_ito,w_stratonovich,w_anti_ito,w_alpha,w_monte_carlo")?;
        for i in 0..spec.n_cells {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                spec.center(i),
                ito.values()[i],
                strat.values()[i],
                anti.values()[i],
                chosen.values()[i],
                hist.density.values()[i]
            )?;
        }
        Ok(())
    })?;
    let report = format!(
        "label = {}\nalpha = {}\nx_star = {x_star}\nmode = {}\nmode_flag = {:?}\nmean = {mean}\n\
         mode_at_attractor = {}\nmean_positive = {}\nmc_scheme = {}\nmc_paths = {}\nmc_aborted = {}\n\
         mc_mean = {}\nmc_std_error = {}\nmc_out_of_range = {}\nl1_monte_carlo_vs_alpha = {l1_mc}\n\
         l1_ito_vs_anti_ito = {l1_ito_anti}\nboundary_ratio = {boundary}\n",
        model.label(),
        config.alpha,
        mode.x,
        mode.flag,
        (mode.x - x_star).abs() <= dx,
        mean > x_star,
        config.step_scheme(),
        ens.paths.len(),
        ens.aborted.len(),
        mc.mean,
        mc.std_error,
        hist.out_of_range,
    );
    out.text("report.txt", &report)?;
    let xs = spec.centers();
    let plot = LinePlot::new(format!("{}: steady densities", model.label()), "x", "w")
        .with(Series::new("ito", &xs, ito.values()))
        .with(Series::new("stratonovich", &xs, strat.values()))
        .with(Series::new("anti-ito", &xs, anti.values()))
        .with(Series::new("monte carlo", &xs, hist.density.values()));
    out.text("steady.svg", &plot.to_svg())?;
    Ok(format!("mode {} mean {mean} (L1 vs Monte Carlo {l1_mc})", mode.x))
}

fn quasipotential(config: &ExperimentConfig, out: &mut Out<'_>) -> Result<String, RunError> {
    let model = config.model();
    if model.dim() == 1 {
        let spec = config.require_grid()?;
        let q = quasipotential_1d(model, (spec.x_min, spec.x_max), spec.n_cells + 1)?;
        out.write("phi.csv", |w| {
            writeln!(w, "x,phi")?;
            for (x, p) in q.x.iter().zip(&q.phi) {
                writeln!(w, "{x},{p}")?;
            }
            Ok(())
        })?;
        out.text(
            "report.txt",
            &format!(
                "label = {}\nn = 1\nanchor = {}\nanchored_at_fixed_point = {}\n",
                model.label(),
                q.anchor,
                q.anchored_at_fixed_point
            ),
        )?;
        let plot = LinePlot::new(format!("{}: quasipotential", model.label()), "x", "phi")
            .with(Series::new("phi", &q.x, &q.phi));
        out.text("phi.svg", &plot.to_svg())?;
        return Ok(format!("quasipotential anchored at {}", q.anchor));
    }
    let report = analyze(model, &config.x0)?;
    out.text("report.txt", &report.to_key_value())?;
    for (name, csv) in report.matrix_csvs() {
        out.text(&format!("{name}.csv"), &csv)?;
    }
    out.write("residuals.csv", |w| {
        writeln!(w, "residual,value")?;
        for (k, v) in &report.residuals {
            writeln!(w, "{k},{v}")?;
        }
        Ok(())
    })?;
    Ok(if report.is_complete() {
        "complete report".to_string()
    } else {
        format!("partial report: {}", report.flags.join("; "))
    })
}

/// Tolerance on the histogram-vs-density L1 distance in `compare`.
pub const COMPARE_L1_TOLERANCE: f64 = 0.1;

fn compare(config: &ExperimentConfig, out: &mut Out<'_>) -> Result<String, RunError> {
    one_dimensional(config, "compare")?;
    let model = config.model();
    let spec = config.require_grid()?;
    let dx = spec.dx();
    let alpha = scheme_alpha(config.step_scheme());

    let ens = simulate_ensemble(model, &config.ensemble_spec().record_every(config.m_steps))?;
    let finals = SampleSet::new(ens.final_values(0))?;
    let mc = moments(&finals)?;
    let kde = kde_mode(&finals)?;
    let hist = histogram(&finals, spec)?;

    let solver = FpeSolver::new(model, spec, alpha)?;
    let w0 = DensityGrid::gaussian(spec, config.x0[0], 3.0 * dx)?;
    let evolved = solver.evolve(&w0, config.t_final, solver.stable_dt())?.density;
    // displacement of the discretized start, as for the propagator statistics
    let fpe_mean = config.x0[0] + evolved.mean() - w0.mean();
    let fpe_mode = config.x0[0] + density_mode(&evolved).x - density_mode(&w0).x;
    let l1 = l1_distance(&hist.density, &evolved)?;

    let rows = [
        ("mean", mc.mean, fpe_mean, 3.0 * mc.std_error + 0.5 * dx),
        ("mode", kde.mode, fpe_mode, kde.bandwidth + dx),
        ("l1_histogram_vs_density", l1, 0.0, COMPARE_L1_TOLERANCE),
    ];
    let mut agree = 0;
    out.write("verdict.csv", |w| {
        writeln!(w, "quantity,monte_carlo,fpe,tolerance,verdict")?;
        for (name, a, b, tol) in rows {
            let ok = (a - b).abs() <= tol;
            agree += usize::from(ok);
            writeln!(w, "{name},{a},{b},{tol},{}", if ok { "agree" } else { "differ" })?;
        }
        Ok(())
    })?;
    let xs = spec.centers();
    let plot = LinePlot::new(format!("{}: Monte Carlo vs Fokker-Planck", model.label()), "x", "w")
        .with(Series::new("monte carlo", &xs, hist.density.values()))
        .with(Series::new(format!("fpe alpha = {alpha}"), &xs, evolved.values()));
    out.text("compare.svg", &plot.to_svg())?;
    Ok(format!("{agree}/3 quantities agree"))
}

fn validate(seed: u64, out: &mut Out<'_>) -> Result<String, RunError> {
    let results = validation::run_all(seed);
    out.write("validation.csv", |w| {
        writeln!(w, "criterion,passed,elapsed_seconds,budget_seconds,detail")?;
        for r in &results {
            writeln!(
                w,
                "{},{},{:.3},{},\"{}\"",
                r.id,
                r.passed,
                r.elapsed.as_secs_f64(),
                r.budget.as_secs(),
                r.detail.replace('"', "'")
            )?;
        }
        Ok(())
    })?;
    let lines: Vec<String> = results.iter().map(|r| r.line()).collect();
    let report = lines.join("\n") + "\n";
    out.text("validation.txt", &report)?;
    print!("{report}");
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(RunError::Validation { failed });
    }
    Ok(format!("all {} criteria passed", results.len()))
}
