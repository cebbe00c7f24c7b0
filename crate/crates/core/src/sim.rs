//! Path simulation: the classical α-family Euler step and the non-Gaussian
//! Q-increment step, single paths and parallel ensembles.
//!
//! Every path owns a [`WienerStream`] keyed by `(seed, stream_id)`, so an
//! ensemble is bit-reproducible independent of thread scheduling.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::model::{ModelError, Scratch, SdeModel};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("time step must be positive (got {0})")]
    NonPositiveDt(f64),
    #[error("noise increment has {got} entries, model has {m} noise sources")]
    NoiseLength { got: usize, m: usize },
    #[error("initial state has {got} entries, model dimension is {n}")]
    StateLength { got: usize, n: usize },
    #[error("need t_final > 0 and m_steps >= 1 (got t_final = {t_final}, m_steps = {m_steps})")]
    BadInterval { t_final: f64, m_steps: usize },
    #[error("need at least one path")]
    NoPaths,
    #[error("alpha must lie in [0, 1] (got {0})")]
    BadAlpha(f64),
    #[error("non-finite state {state:?} after step {step}")]
    NonFinite { step: usize, state: Vec<f64> },
    #[error("{aborted} of {n_paths} paths aborted (first: path {first_path}: {first_reason})")]
    TooManyAborts {
        aborted: usize,
        n_paths: usize,
        first_path: u64,
        first_reason: String,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Reproducible stream of Gaussian draws.
///
/// Streams with the same seed but different ids are independent ChaCha8
/// streams; the same `(seed, stream_id)` always replays the same sequence.
#[derive(Debug, Clone)]
pub struct WienerStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl WienerStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self { seed, stream_id, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// `m` independent `Normal(0, dt)` draws.
    pub fn sample_dw(&mut self, dt: f64, m: usize) -> Result<Vec<f64>, SimError> {
        let mut out = vec![0.0; m];
        self.fill_dw(dt, &mut out)?;
        Ok(out)
    }

    pub fn fill_dw(&mut self, dt: f64, out: &mut [f64]) -> Result<(), SimError> {
        if !(dt > 0.0) {
            return Err(SimError::NonPositiveDt(dt));
        }
        let scale = dt.sqrt();
        for v in out.iter_mut() {
            let z: f64 = self.rng.sample(StandardNormal);
            *v = z * scale;
        }
        Ok(())
    }
}

/// Integration scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepScheme {
    /// Gaussian Euler step with drift `a + α a_sp`.
    AlphaEuler(f64),
    /// Non-Gaussian step `a dt + B dW + Q` with the quadratic noise term Q.
    QIncrement,
}

impl StepScheme {
    pub const ITO: StepScheme = StepScheme::AlphaEuler(0.0);
    pub const STRATONOVICH: StepScheme = StepScheme::AlphaEuler(0.5);
    pub const ANTI_ITO: StepScheme = StepScheme::AlphaEuler(1.0);

    pub fn alpha(alpha: f64) -> Result<Self, SimError> {
        if (0.0..=1.0).contains(&alpha) {
            Ok(StepScheme::AlphaEuler(alpha))
        } else {
            Err(SimError::BadAlpha(alpha))
        }
    }
}

impl fmt::Display for StepScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            StepScheme::QIncrement => f.write_str("q-increment"),
            StepScheme::AlphaEuler(a) if a == 0.0 => f.write_str("ito"),
            StepScheme::AlphaEuler(a) if a == 0.5 => f.write_str("stratonovich"),
            StepScheme::AlphaEuler(a) if a == 1.0 => f.write_str("anti-ito"),
            StepScheme::AlphaEuler(a) => write!(f, "alpha={a}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("unknown scheme `{0}` (expected q-increment, ito, stratonovich, anti-ito or alpha=<value>)")]
pub struct UnknownScheme(pub String);

impl FromStr for StepScheme {
    type Err = UnknownScheme;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "q" | "q-increment" | "qincrement" => Ok(StepScheme::QIncrement),
            "ito" => Ok(StepScheme::ITO),
            "stratonovich" => Ok(StepScheme::STRATONOVICH),
            "anti-ito" | "anti_ito" | "hanggi-klimontovich" => Ok(StepScheme::ANTI_ITO),
            _ => s
                .strip_prefix("alpha=")
                .and_then(|v| v.parse::<f64>().ok())
                .and_then(|a| StepScheme::alpha(a).ok())
                .ok_or_else(|| UnknownScheme(s.to_string())),
        }
    }
}

/// Per-path stepping state with preallocated buffers.
#[derive(Debug, Clone)]
pub struct Stepper<'a> {
    model: &'a SdeModel,
    drift: Vec<f64>,
    coupling: Vec<f64>,
    noise: Vec<f64>,
    correction: Vec<f64>,
    grad: Vec<f64>,
    scratch: Scratch,
}

impl<'a> Stepper<'a> {
    pub fn new(model: &'a SdeModel) -> Self {
        let (n, m) = (model.dim(), model.noise_dim());
        Self {
            model,
            drift: vec![0.0; n],
            coupling: vec![0.0; n * m],
            noise: vec![0.0; n],
            correction: vec![0.0; n],
            grad: vec![0.0; n * m * n],
            scratch: Scratch::new(n, m),
        }
    }

    /// Advances `x` in place by one step of `scheme`.
    pub fn step(&mut self, scheme: StepScheme, x: &mut [f64], dt: f64, dw: &[f64]) -> Result<(), SimError> {
        match scheme {
            StepScheme::AlphaEuler(alpha) => self.step_alpha(x, dt, dw, alpha),
            StepScheme::QIncrement => self.step_q(x, dt, dw, QuadraticNoise::Sampled),
        }
    }

    fn base_terms(&mut self, x: &[f64], dw: &[f64]) -> Result<(), SimError> {
        let (n, m) = (self.model.dim(), self.model.noise_dim());
        self.model.drift_into(x, &mut self.drift)?;
        self.model.coupling_into(x, &mut self.coupling)?;
        for i in 0..n {
            let row = &self.coupling[i * m..(i + 1) * m];
            self.noise[i] = row.iter().zip(dw).map(|(b, w)| b * w).sum();
        }
        Ok(())
    }

    fn assemble(&self, x: &mut [f64], dt: f64) {
        for i in 0..x.len() {
            x[i] = x[i] + self.drift[i] * dt + self.noise[i] + self.correction[i];
        }
    }

    fn step_alpha(&mut self, x: &mut [f64], dt: f64, dw: &[f64], alpha: f64) -> Result<(), SimError> {
        self.base_terms(x, dw)?;
        if alpha == 0.0 {
            self.correction.fill(0.0);
        } else {
            self.model
                .spurious_drift_into(x, &mut self.correction, &mut self.scratch)?;
            for c in &mut self.correction {
                *c *= alpha * dt;
            }
        }
        self.assemble(x, dt);
        Ok(())
    }

    fn step_q(&mut self, x: &mut [f64], dt: f64, dw: &[f64], products: QuadraticNoise) -> Result<(), SimError> {
        let (n, m) = (self.model.dim(), self.model.noise_dim());
        self.base_terms(x, dw)?;
        self.model
            .coupling_gradient_into(x, &mut self.grad, &mut self.scratch)?;
        for i in 0..n {
            let mut q = 0.0;
            match products {
                // Q^i = sum_mu dw_mu sum_lambda b^{i mu}_{,lambda} (B dw)_lambda
                QuadraticNoise::Sampled => {
                    for mu in 0..m {
                        let g = &self.grad[(i * m + mu) * n..(i * m + mu + 1) * n];
                        let inner: f64 = g.iter().zip(&self.noise).map(|(g, y)| g * y).sum();
                        q += dw[mu] * inner;
                    }
                }
                // dw_mu dw_nu -> delta_{mu nu} dt
                QuadraticNoise::MeanSubstituted => {
                    for mu in 0..m {
                        let g = &self.grad[(i * m + mu) * n..(i * m + mu + 1) * n];
                        let inner: f64 = (0..n).map(|l| g[l] * self.coupling[l * m + mu]).sum();
                        q += inner;
                    }
                    q *= dt;
                }
            }
            self.correction[i] = q;
        }
        self.assemble(x, dt);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum QuadraticNoise {
    Sampled,
    MeanSubstituted,
}

fn check_step_args(model: &SdeModel, x: &[f64], dt: f64, dw: &[f64]) -> Result<(), SimError> {
    if !(dt > 0.0) {
        return Err(SimError::NonPositiveDt(dt));
    }
    if dw.len() != model.noise_dim() {
        return Err(SimError::NoiseLength {
            got: dw.len(),
            m: model.noise_dim(),
        });
    }
    if x.len() != model.dim() {
        return Err(SimError::StateLength {
            got: x.len(),
            n: model.dim(),
        });
    }
    Ok(())
}

/// Classical step `x + a dt + B dw + α a_sp dt`.
pub fn step_alpha(model: &SdeModel, x: &[f64], dt: f64, dw: &[f64], alpha: f64) -> Result<DVector<f64>, SimError> {
    check_step_args(model, x, dt, dw)?;
    let mut out = x.to_vec();
    Stepper::new(model).step_alpha(&mut out, dt, dw, alpha)?;
    Ok(DVector::from_vec(out))
}

/// Q-increment step `x + a dt + B dw + Q`,
/// `Q^i = b^{iμ}_{,λ} b^{λν} dw_μ dw_ν`.
pub fn step_q(model: &SdeModel, x: &[f64], dt: f64, dw: &[f64]) -> Result<DVector<f64>, SimError> {
    check_step_args(model, x, dt, dw)?;
    let mut out = x.to_vec();
    Stepper::new(model).step_q(&mut out, dt, dw, QuadraticNoise::Sampled)?;
    Ok(DVector::from_vec(out))
}

/// [`step_q`] with `dw_μ dw_ν` replaced by `δ_{μν} dt` in the quadratic term.
pub fn step_q_mean_substituted(model: &SdeModel, x: &[f64], dt: f64, dw: &[f64]) -> Result<DVector<f64>, SimError> {
    check_step_args(model, x, dt, dw)?;
    let mut out = x.to_vec();
    Stepper::new(model).step_q(&mut out, dt, dw, QuadraticNoise::MeanSubstituted)?;
    Ok(DVector::from_vec(out))
}

/// A single path on a uniform grid of `m_steps + 1` times.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub n: usize,
    /// Row-major `(m_steps + 1) x n`.
    pub states: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len() / self.n
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, step: usize) -> &[f64] {
        &self.states[step * self.n..(step + 1) * self.n]
    }

    pub fn last(&self) -> &[f64] {
        self.state(self.len() - 1)
    }
}

fn integrate(
    model: &SdeModel,
    scheme: StepScheme,
    x0: &[f64],
    t_final: f64,
    m_steps: usize,
    stream: &mut WienerStream,
    record_every: usize,
) -> Result<Vec<f64>, SimError> {
    let dt = t_final / m_steps as f64;
    let mut x = x0.to_vec();
    let mut dw = vec![0.0; model.noise_dim()];
    let mut stepper = Stepper::new(model);
    let mut recorded = x.clone();
    // countdown instead of a modulo in the hot loop
    let mut until_record = record_every;
    for step in 1..=m_steps {
        stream.fill_dw(dt, &mut dw)?;
        stepper.step(scheme, &mut x, dt, &dw)?;
        if !x.iter().all(|v| v.is_finite()) {
            return Err(SimError::NonFinite { step, state: x });
        }
        until_record -= 1;
        if until_record == 0 || step == m_steps {
            recorded.extend_from_slice(&x);
            until_record = record_every;
        }
    }
    Ok(recorded)
}

fn check_run(model: &SdeModel, scheme: StepScheme, x0: &[f64], t_final: f64, m_steps: usize) -> Result<(), SimError> {
    if !(t_final > 0.0) || m_steps == 0 {
        return Err(SimError::BadInterval { t_final, m_steps });
    }
    if x0.len() != model.dim() {
        return Err(SimError::StateLength {
            got: x0.len(),
            n: model.dim(),
        });
    }
    if let StepScheme::AlphaEuler(a) = scheme {
        StepScheme::alpha(a)?;
    }
    Ok(())
}

/// Iterates `m_steps` steps of size `t_final / m_steps`, each conditioned on
/// the state reached by the previous one.
pub fn simulate_path(
    model: &SdeModel,
    scheme: StepScheme,
    x0: &[f64],
    t_final: f64,
    m_steps: usize,
    stream: &mut WienerStream,
) -> Result<Trajectory, SimError> {
    check_run(model, scheme, x0, t_final, m_steps)?;
    let states = integrate(model, scheme, x0, t_final, m_steps, stream, 1)?;
    Ok(Trajectory {
        dt: t_final / m_steps as f64,
        n: model.dim(),
        states,
    })
}

/// Ensemble run description.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSpec {
    pub scheme: StepScheme,
    pub x0: Vec<f64>,
    pub t_final: f64,
    pub m_steps: usize,
    pub n_paths: usize,
    pub seed: u64,
    /// Keep every `record_every`-th state (the final state is always kept).
    pub record_every: usize,
}

impl EnsembleSpec {
    pub fn new(scheme: StepScheme, x0: Vec<f64>, t_final: f64, m_steps: usize, n_paths: usize, seed: u64) -> Self {
        Self {
            scheme,
            x0,
            t_final,
            m_steps,
            n_paths,
            seed,
            record_every: 1,
        }
    }

    pub fn record_every(mut self, every: usize) -> Self {
        self.record_every = every.max(1);
        self
    }

    pub fn dt(&self) -> f64 {
        self.t_final / self.m_steps as f64
    }

    /// Step indices kept for every path.
    pub fn recorded_steps(&self) -> Vec<usize> {
        let every = self.record_every.max(1);
        let mut steps: Vec<usize> = (0..=self.m_steps).step_by(every).collect();
        if steps.last() != Some(&self.m_steps) {
            steps.push(self.m_steps);
        }
        steps
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledPath {
    pub path_id: u64,
    /// Row-major `recorded_steps().len() x n`.
    pub states: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbortedPath {
    pub path_id: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub label: String,
    pub n: usize,
    pub spec: EnsembleSpec,
    pub paths: Vec<SampledPath>,
    pub aborted: Vec<AbortedPath>,
}

impl PathEnsemble {
    pub fn recorded_steps(&self) -> Vec<usize> {
        self.spec.recorded_steps()
    }

    /// Coordinate `coord` (0-based) of every completed path at recorded slot `slot`.
    pub fn values_at(&self, slot: usize, coord: usize) -> Vec<f64> {
        self.paths.iter().map(|p| p.states[slot * self.n + coord]).collect()
    }

    pub fn final_values(&self, coord: usize) -> Vec<f64> {
        let last = self.recorded_steps().len() - 1;
        self.values_at(last, coord)
    }

    /// Writes `path_id,step,t,x1..xn` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        write!(w, "path_id,step,t")?;
        for i in 1..=self.n {
            write!(w, ",x{i}")?;
        }
        writeln!(w)?;
        let steps = self.recorded_steps();
        let dt = self.spec.dt();
        for p in &self.paths {
            for (slot, &step) in steps.iter().enumerate() {
                write!(w, "{},{},{}", p.path_id, step, step as f64 * dt)?;
                for v in &p.states[slot * self.n..(slot + 1) * self.n] {
                    write!(w, ",{v}")?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

/// Runs `n_paths` independent paths in parallel; path `k` uses stream id `k`.
///
/// Fails when more than 0.1% of the paths hit a non-finite state.
pub fn simulate_ensemble(model: &SdeModel, spec: &EnsembleSpec) -> Result<PathEnsemble, SimError> {
    check_run(model, spec.scheme, &spec.x0, spec.t_final, spec.m_steps)?;
    if spec.n_paths == 0 {
        return Err(SimError::NoPaths);
    }
    let every = spec.record_every.max(1);
    let results: Vec<Result<Vec<f64>, SimError>> = (0..spec.n_paths as u64)
        .into_par_iter()
        .map(|id| {
            let mut stream = WienerStream::new(spec.seed, id);
            integrate(
                model,
                spec.scheme,
                &spec.x0,
                spec.t_final,
                spec.m_steps,
                &mut stream,
                every,
            )
        })
        .collect();

    let mut paths = Vec::with_capacity(spec.n_paths);
    let mut aborted = Vec::new();
    for (id, r) in results.into_iter().enumerate() {
        match r {
            Ok(states) => paths.push(SampledPath {
                path_id: id as u64,
                states,
            }),
            Err(e @ SimError::NonFinite { .. }) => aborted.push(AbortedPath {
                path_id: id as u64,
                reason: e.to_string(),
            }),
            Err(e) => return Err(e),
        }
    }
    if aborted.len() * 1000 > spec.n_paths {
        return Err(SimError::TooManyAborts {
            aborted: aborted.len(),
            n_paths: spec.n_paths,
            first_path: aborted[0].path_id,
            first_reason: aborted[0].reason.clone(),
        });
    }
    Ok(PathEnsemble {
        label: model.label().to_string(),
        n: model.dim(),
        spec: spec.clone(),
        paths,
        aborted,
    })
}
