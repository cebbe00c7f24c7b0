//! The acceptance suite: ten numbered criteria, each a self-contained check
//! with a pinned tolerance and a runtime budget.

use std::cell::OnceCell;
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::catalog::{self, ParamValue, ParamValues};
use crate::cli::{self, Subcommand};
use crate::config::{parse_raw, ExperimentConfig};
use crate::exprlang::Params;
use crate::fpe::{density_mode, propagator_stats, steady_1d, DensityGrid, FpeSolver, GridSpec};
use crate::model::SdeModel;
use crate::sim::{simulate_ensemble, step_alpha, step_q_mean_substituted, EnsembleSpec, PathEnsemble, StepScheme};
use crate::stats::{histogram, kde_mode, l1_distance, moments, SampleSet};
use crate::steady::{
    a_from_balance, a_matrix_paper, analyze, condition_residual, find_fixed_point, freidlin_residual,
    lyapunov_residual, lyapunov_solve, s_matrix_paper,
};

/// Criteria that fail for reasons outside the implementation; see the README.
pub const KNOWN_UNATTAINABLE: &[u8] = &[4];

#[derive(Debug, Clone)]
pub struct CriterionResult {
    pub id: u8,
    pub title: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
    pub budget: Duration,
}

impl CriterionResult {
    /// One summary line.
    pub fn line(&self) -> String {
        format!(
            "criterion {:>2} {} {} [{:.2} s / {} s] {}",
            self.id,
            if self.passed { "PASS" } else { "FAIL" },
            self.title,
            self.elapsed.as_secs_f64(),
            self.budget.as_secs(),
            self.detail
        )
    }
}

pub const TITLES: [(u8, &str, u64); 10] = [
    (1, "spurious-drift identity", 1),
    (2, "Q-increment mean", 10),
    (3, "mode vs mean split", 30),
    (4, "most probable path", 60),
    (5, "steady state", 600),
    (6, "FPE conservation", 30),
    (7, "quasipotential linear oracle", 1),
    (8, "Klein-Kramers", 5),
    (9, "Freidlin residual scaling", 5),
    (10, "determinism", 60),
];

/// Shared state so criteria 2 and 3 use one ensemble.
pub struct Suite {
    seed: u64,
    one_step: OnceCell<Result<PathEnsemble, String>>,
}

const ONE_STEP_DT: f64 = 1e-3;
const ONE_STEP_PATHS: usize = 100_000;

impl Suite {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            one_step: OnceCell::new(),
        }
    }

    fn one_step_ensemble(&self) -> Result<&PathEnsemble, String> {
        self.one_step
            .get_or_init(|| {
                let spec = EnsembleSpec::new(
                    StepScheme::QIncrement,
                    vec![0.0],
                    ONE_STEP_DT,
                    1,
                    ONE_STEP_PATHS,
                    self.seed,
                );
                simulate_ensemble(&tanh1d(), &spec).map_err(|e| e.to_string())
            })
            .as_ref()
            .map_err(Clone::clone)
    }

    pub fn run(&self, id: u8) -> CriterionResult {
        let (_, title, budget) = TITLES[usize::from(id) - 1];
        let budget = Duration::from_secs(budget);
        let clock = Instant::now();
        let outcome = match id {
            1 => spurious_drift_identity(self.seed),
            2 => q_increment_mean(self),
            3 => mode_mean_split(self),
            4 => most_probable_path(),
            5 => steady_state(self.seed),
            6 => fpe_conservation(),
            7 => linear_oracle(self.seed),
            8 => klein_kramers(self.seed),
            9 => freidlin_scaling(),
            10 => determinism(self.seed),
            _ => Err(format!("no criterion {id}")),
        };
        let elapsed = clock.elapsed();
        let (passed, detail) = match outcome {
            Ok((ok, detail)) => (ok && elapsed <= budget, detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let detail = if elapsed > budget {
            format!("{detail}; over runtime budget")
        } else {
            detail
        };
        CriterionResult {
            id,
            title,
            passed,
            detail,
            elapsed,
            budget,
        }
    }
}

pub fn run_all(seed: u64) -> Vec<CriterionResult> {
    let suite = Suite::new(seed);
    (1..=10).map(|id| suite.run(id)).collect()
}

type Outcome = Result<(bool, String), String>;

fn tanh1d() -> SdeModel {
    catalog::build("tanh1d", &ParamValues::new()).expect("catalog model")
}

fn default_grid() -> GridSpec {
    GridSpec::new(-6.0, 16.0, 400).expect("valid grid")
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn random_coupling(rng: &mut ChaCha8Rng, own: usize, other: Option<usize>) -> String {
    let c: Vec<f64> = (0..4).map(|_| rng.random_range(0.2..1.5)).collect();
    let x = format!("x{own}");
    let base = match rng.random_range(0..4) {
        0 => format!("{:?} + {:?}*tanh({:?}*{x})", c[0] + 1.0, c[1], c[2]),
        1 => format!("{:?}*exp({:?}*{x})", c[0], 0.3 * c[1]),
        2 => format!("sqrt({:?} + {:?}*{x}^2)", c[0], c[1]),
        _ => format!("{:?} + {:?}*sin({:?}*{x})", c[0] + 1.0, 0.5 * c[1], c[2]),
    };
    match other {
        Some(j) => format!("{base} + {:?}*cos(x{j})", 0.3 * c[3]),
        None => base,
    }
}

/// Criterion 1: both spurious-drift forms agree on random 1-D and
/// diagonal-coupling models.
fn spurious_drift_identity(seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut worst: f64 = 0.0;
    for k in 0..50 {
        let n = if k < 25 { 1 } else { rng.random_range(2..=3) };
        let drift: Vec<String> = (1..=n).map(|i| format!("-x{i}")).collect();
        let coupling: Vec<Vec<String>> = (1..=n)
            .map(|i| {
                (1..=n)
                    .map(|j| {
                        if i != j {
                            "0".to_string()
                        } else {
                            random_coupling(&mut rng, i, (n > 1).then_some(i % n + 1))
                        }
                    })
                    .collect()
            })
            .collect();
        let model = catalog::instantiate(&format!("random{k}"), &drift, &coupling, &ParamValues::new()).map_err(err)?;
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let a = model.spurious_drift(&x).map_err(err)?;
        let b = model.spurious_drift_coupling_form(&x).map_err(err)?;
        worst = worst.max((&a - &b).norm() / a.norm().max(1e-300));
    }
    Ok((
        worst <= 1e-6,
        format!("max relative difference {worst:.2e} over 50 models (tol 1e-6)"),
    ))
}

/// Criterion 2: one-step Q-increment mean and the mean-substitution identity.
fn q_increment_mean(suite: &Suite) -> Outcome {
    let ens = suite.one_step_ensemble()?;
    let m = moments(&SampleSet::new(ens.final_values(0)).map_err(err)?).map_err(err)?;
    let target = 2e-3;
    let z = (m.mean - target) / m.std_error;
    let mean_ok = z.abs() <= 3.0;

    let mut worst: f64 = 0.0;
    let model = tanh1d();
    let diag = SdeModel::parse(
        "diag",
        &["-x1", "-x2"],
        &[vec!["1 + 0.5*tanh(x1)", "0"], vec!["0", "exp(0.3*x2)"]],
        Params::new(),
    )
    .map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(suite.seed);
    rng.set_stream(2);
    for _ in 0..100 {
        let x = [rng.random_range(-3.0..3.0)];
        let dw = [rng.random_range(-0.1..0.1)];
        let q = step_q_mean_substituted(&model, &x, ONE_STEP_DT, &dw).map_err(err)?;
        let a = step_alpha(&model, &x, ONE_STEP_DT, &dw, 1.0).map_err(err)?;
        worst = worst.max((q - a).amax());
        let x2 = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let dw2 = [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)];
        let q = step_q_mean_substituted(&diag, &x2, ONE_STEP_DT, &dw2).map_err(err)?;
        let a = step_alpha(&diag, &x2, ONE_STEP_DT, &dw2, 1.0).map_err(err)?;
        worst = worst.max((q - a).amax());
    }
    let algebra_ok = worst <= 1e-12;
    Ok((
        mean_ok && algebra_ok,
        format!(
            "mean {:.4e} vs 2e-3 ({z:+.2} SE, tol 3); mean-substituted vs alpha=1 max diff {worst:.1e} (tol 1e-12)",
            m.mean
        ),
    ))
}

/// Criterion 3: kernel-density mode near 0 while the mean is positive, and
/// the same split from the Fokker-Planck propagator.
fn mode_mean_split(suite: &Suite) -> Outcome {
    let ens = suite.one_step_ensemble()?;
    let samples = SampleSet::new(ens.final_values(0)).map_err(err)?;
    let m = moments(&samples).map_err(err)?;
    let kde = kde_mode(&samples).map_err(err)?;
    let mc_ok = kde.mode.abs() <= kde.bandwidth && m.mean > 3.0 * m.std_error;

    let spec = GridSpec::new(-3.0, 5.0, 800).map_err(err)?;
    let p = propagator_stats(&tanh1d(), spec, 0.0, ONE_STEP_DT, 1.0).map_err(err)?;
    let fpe_ok = p.mode.abs() <= spec.dx() && (p.mean - 2e-3).abs() <= 0.1 * 2e-3;
    Ok((
        mc_ok && fpe_ok,
        format!(
            "kde mode {:.4e} (bandwidth {:.4e}), mean {:.4e} = {:.1} SE; fpe mode {:.3e} (cell {}), fpe mean {:.4e} (target 2e-3 +-10%)",
            kde.mode,
            kde.bandwidth,
            m.mean,
            m.mean / m.std_error,
            p.mode,
            spec.dx(),
            p.mean
        ),
    ))
}

/// Criterion 4: the density mode follows the deterministic path `x0 e^{-t}`.
fn most_probable_path() -> Outcome {
    let spec = default_grid();
    let dx = spec.dx();
    let solver = FpeSolver::new(&tanh1d(), spec, 1.0).map_err(err)?;
    let x0 = 1.0;
    let w0 = DensityGrid::gaussian(spec, x0, 3.0 * dx).map_err(err)?;
    let dt = solver.stable_dt();
    let every = ((0.01 / dt).round() as usize).max(1);
    let mut worst = ((density_mode(&w0).x - x0) / dx).abs();
    let mut worst_t = 0.0;
    solver
        .evolve_observed(&w0, 1.0, dt, every, |t, w| {
            let dev = ((density_mode(w).x - x0 * (-t).exp()) / dx).abs();
            if dev > worst {
                worst = dev;
                worst_t = t;
            }
        })
        .map_err(err)?;
    Ok((
        worst <= 1.0,
        format!("max |mode - x0 e^-t| = {worst:.2} cells at t = {worst_t:.2} (tol 1 cell of {dx})"),
    ))
}

/// Criterion 5: steady density mode and mean, Monte Carlo agreement and
/// scheme inequivalence.
fn steady_state(seed: u64) -> Outcome {
    let model = tanh1d();
    let spec = default_grid();
    let anti = steady_1d(&model, spec, 1.0).map_err(err)?;
    let ito = steady_1d(&model, spec, 0.0).map_err(err)?;
    let mode = density_mode(&anti).x;
    let mean = anti.mean();
    let density_ok = mode.abs() <= spec.dx() && mean > 0.0;

    let m_steps = 20_000;
    let ens = simulate_ensemble(
        &model,
        &EnsembleSpec::new(StepScheme::QIncrement, vec![0.0], 20.0, m_steps, 100_000, seed).record_every(m_steps),
    )
    .map_err(err)?;
    let hist = histogram(&SampleSet::new(ens.final_values(0)).map_err(err)?, spec).map_err(err)?;
    let l1_mc = l1_distance(&hist.density, &anti).map_err(err)?;
    let l1_alpha = l1_distance(&ito, &anti).map_err(err)?;
    Ok((
        density_ok && l1_mc <= 0.05 && l1_alpha > 0.01,
        format!(
            "mode {mode:.3e} (cell {}), mean {mean:.4}; L1(Monte Carlo, steady) {l1_mc:.4} (tol 0.05, {} out of range, {} aborted); L1(alpha=0, alpha=1) {l1_alpha:.3} (> 0.01)",
            spec.dx(),
            hist.out_of_range,
            ens.aborted.len()
        ),
    ))
}

/// Criterion 6: mass conservation, steady self-consistency and zero current.
fn fpe_conservation() -> Outcome {
    let model = tanh1d();
    let spec = default_grid();
    let mut worst_drift: f64 = 0.0;
    let mut worst_l1: f64 = 0.0;
    let mut worst_current: f64 = 0.0;
    for alpha in [0.0, 0.5, 1.0] {
        let solver = FpeSolver::new(&model, spec, alpha).map_err(err)?;
        let w0 = DensityGrid::gaussian(spec, 1.0, 0.5).map_err(err)?;
        let evo = solver.evolve(&w0, 1.0, solver.stable_dt()).map_err(err)?;
        worst_drift = worst_drift.max(evo.max_mass_drift);

        let steady = steady_1d(&model, spec, alpha).map_err(err)?;
        let again = solver.evolve(&steady, 1.0, solver.stable_dt()).map_err(err)?;
        worst_drift = worst_drift.max(again.max_mass_drift);
        worst_l1 = worst_l1.max(l1_distance(&steady, &again.density).map_err(err)?);
        let current = solver
            .currents(steady.values())
            .iter()
            .fold(0.0f64, |m, j| m.max(j.abs()));
        worst_current = worst_current.max(current);
    }
    Ok((
        worst_drift < 1e-12 && worst_l1 <= 1e-6 && worst_current <= 1e-8,
        format!(
            "alpha in {{0, 0.5, 1}}: mass drift per step {worst_drift:.1e} (< 1e-12), steady L1 after t=1 {worst_l1:.1e} (tol 1e-6), max |J| {worst_current:.1e} (tol 1e-8)"
        ),
    ))
}

fn linear2d(m: [f64; 4]) -> Result<SdeModel, String> {
    let params: ParamValues = [("m11", m[0]), ("m12", m[1]), ("m21", m[2]), ("m22", m[3])]
        .iter()
        .map(|(k, v)| (k.to_string(), ParamValue::Number(*v)))
        .collect();
    catalog::build("linear2d", &params).map_err(err)
}

/// Criterion 7: closed form and Lyapunov oracle on linear systems.
fn linear_oracle(seed: u64) -> Outcome {
    let eye = DMatrix::<f64>::identity(2, 2);
    let m = -&eye;
    let d = eye.clone();
    let a = a_matrix_paper(&m, &d, 2.0).map_err(err)?;
    let s_paper = s_matrix_paper(&m, &d, &a).map_err(err)?;
    let sigma = lyapunov_solve(&m, &d).map_err(err)?;
    let s_oracle = sigma.clone().try_inverse().ok_or("singular sigma")?;
    let two = &eye * 2.0;
    let gap_iso = (&s_paper - &two).amax().max((&s_oracle - &two).amax());
    let lyap_iso = lyapunov_residual(&m, &d, &sigma);

    let rot = linear2d([-1.0, 1.0, -1.0, -1.0])?;
    let mr = rot.jacobian_drift(&[0.0, 0.0]).map_err(err)?;
    let dr = rot.diffusion(&[0.0, 0.0]).map_err(err)?;
    let sigma_r = lyapunov_solve(&mr, &dr).map_err(err)?;
    let s_rot = sigma_r.clone().try_inverse().ok_or("singular sigma")?;
    let gap_rot = (&s_rot - &two).amax();
    let lyap_rot = lyapunov_residual(&mr, &dr, &sigma_r);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    let mut freidlin: f64 = 0.0;
    for _ in 0..10 {
        let x = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        freidlin = freidlin.max(freidlin_residual(&rot, &s_rot, &[0.0, 0.0], &x).map_err(err)?.abs());
    }
    let ok = gap_iso <= 1e-10 && gap_rot <= 1e-10 && freidlin <= 1e-10 && lyap_iso.max(lyap_rot) <= 1e-10;
    Ok((
        ok,
        format!(
            "M=-I: max|S - 2I| {gap_iso:.1e}; rotational: max|S_oracle - 2I| {gap_rot:.1e}, Freidlin {freidlin:.1e}; Lyapunov residual {:.1e} (all tol 1e-10)",
            lyap_iso.max(lyap_rot)
        ),
    ))
}

fn klein_kramers_model(gamma: &str, t: f64) -> Result<SdeModel, String> {
    let params: ParamValues = [
        ("gamma".to_string(), ParamValue::Expr(gamma.to_string())),
        ("T".to_string(), ParamValue::Number(t)),
    ]
    .into();
    catalog::build("klein-kramers", &params).map_err(err)
}

/// Criterion 8: Klein-Kramers `A = T J` and the necessary condition.
fn klein_kramers(seed: u64) -> Outcome {
    let j = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
    let mut a_gap: f64 = 0.0;
    let mut paper = Vec::new();
    for t in [1.0, 2.0] {
        let model = klein_kramers_model("1", t)?;
        let fp = find_fixed_point(&model, &[0.5, 0.5]).map_err(err)?;
        let s = lyapunov_solve(&fp.m, &fp.d_star)
            .map_err(err)?
            .try_inverse()
            .ok_or("singular sigma")?;
        let a = a_from_balance(&fp.m, &fp.d_star, &s).map_err(err)?;
        a_gap = a_gap.max((&a - &j * t).amax());
        let report = analyze(&model, &[0.5, 0.5]).map_err(err)?;
        let ap = report.a_paper.as_ref().ok_or("closed-form A missing")?;
        paper.push(format!(
            "T={t}: A_paper [[{:.4},{:.4}],[{:.4},{:.4}]] vs A_oracle gap {:.3}",
            ap[(0, 0)],
            ap[(0, 1)],
            ap[(1, 0)],
            ap[(1, 1)],
            report.residuals.get("paper_vs_oracle_A").copied().unwrap_or(f64::NAN)
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(8);
    let mut cond: f64 = 0.0;
    for gamma in ["1", "1 + 0.1*tanh(x1*x2)"] {
        let t = 1.0;
        let model = klein_kramers_model(gamma, t)?;
        for _ in 0..10 {
            let x = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            cond = cond.max(condition_residual(&model, &(&j * t), &x).map_err(err)?);
        }
    }
    Ok((
        a_gap <= 1e-8 && cond <= 1e-6,
        format!(
            "max|A_oracle - T J| {a_gap:.1e} (tol 1e-8); condition residual {cond:.1e} at 20 points (tol 1e-6); {}",
            paper.join("; ")
        ),
    ))
}

/// Criterion 9: Freidlin residual order for a cubic perturbation of a
/// Hurwitz linear drift.
fn freidlin_scaling() -> Outcome {
    let model = SdeModel::parse(
        "cubic2d",
        &["-x1 + x2 - x1^3", "-x1 - x2 - x2^3 + x1^2*x2"],
        &[vec!["1", "0"], vec!["0", "1"]],
        Params::new(),
    )
    .map_err(err)?;
    let report = analyze(&model, &[0.1, 0.1]).map_err(err)?;
    let s = report.s_oracle.as_ref().ok_or("S_oracle missing")?;
    let x_star: Vec<f64> = report.fixed_point.x_star.iter().copied().collect();
    let mut worst = f64::INFINITY;
    for k in 0..8 {
        let angle = 0.3 + k as f64 * std::f64::consts::PI / 4.0;
        let r = |eps: f64| -> Result<f64, String> {
            let x = [x_star[0] + eps * angle.cos(), x_star[1] + eps * angle.sin()];
            Ok(freidlin_residual(&model, s, &x_star, &x).map_err(err)?.abs())
        };
        let order = (r(0.1)? / r(0.05)?).log2();
        worst = worst.min(order);
    }
    Ok((
        worst >= 2.7,
        format!("min observed order {worst:.2} over 8 directions (tol 2.7)"),
    ))
}

const DETERMINISM_CONFIGS: [(Subcommand, &str); 5] = [
    (
        Subcommand::Simulate,
        r#"{"model": {"catalog": "tanh1d"}, "x0": [0.5], "t_final": 1, "m_steps": 200, "n_paths": 200, "record_every": 20}"#,
    ),
    (
        Subcommand::FpeEvolve,
        r#"{"model": {"catalog": "tanh1d"}, "x0": [1], "t_final": 0.5, "grid": {"n_cells": 200}}"#,
    ),
    (
        Subcommand::Steady,
        r#"{"model": {"catalog": "tanh1d"}, "t_final": 2, "m_steps": 400, "n_paths": 500, "grid": {"n_cells": 200}}"#,
    ),
    (
        Subcommand::Quasipotential,
        r#"{"model": {"catalog": "klein-kramers"}, "x0": [0.5, 0.5]}"#,
    ),
    (
        Subcommand::Compare,
        r#"{"model": {"catalog": "tanh1d"}, "x0": [1], "t_final": 0.2, "m_steps": 100, "n_paths": 2000, "grid": {"n_cells": 200}}"#,
    ),
];

fn csv_files(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(err)? {
        let path = entry.map_err(err)?.path();
        if path.extension().is_some_and(|e| e == "csv") {
            let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
            out.push((name, std::fs::read(&path).map_err(err)?));
        }
    }
    out.sort();
    Ok(out)
}

/// Criterion 10: every subcommand reproduces its CSV outputs byte for byte.
fn determinism(seed: u64) -> Outcome {
    let root = std::env::temp_dir().join(format!(
        "markovsde-determinism-{}-{}",
        std::process::id(),
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_nanos())
            .unwrap_or(0)
    ));
    let result = (|| -> Outcome {
        let mut compared = 0;
        let mut mismatches = Vec::new();
        for (sub, text) in DETERMINISM_CONFIGS {
            let mut runs = Vec::new();
            for rep in 0..2 {
                let mut raw = parse_raw(text).map_err(err)?;
                raw.seed = Some(seed);
                raw.output = Some(root.join(format!("{}-{rep}", sub.name())));
                let config = ExperimentConfig::from_raw(raw, None).map_err(err)?;
                cli::run(sub, &config).map_err(err)?;
                runs.push(csv_files(&config.output)?);
            }
            if runs[0].is_empty() {
                mismatches.push(format!("{}: no CSV output", sub.name()));
            } else if runs[0] != runs[1] {
                mismatches.push(sub.name().to_string());
            }
            compared += runs[0].len();
        }
        Ok((
            mismatches.is_empty(),
            if mismatches.is_empty() {
                format!("{compared} CSV files from 5 subcommands identical across reruns")
            } else {
                format!("differing outputs: {}", mismatches.join(", "))
            },
        ))
    })();
    let _ = std::fs::remove_dir_all(&root);
    result
}
