//! One-dimensional Fokker-Planck solver in conservative flux form.
//!
//! The current for integration sense α is
//! `J = [a + (α - 1) a_sp] w - D w' / 2`. Cell faces use the exponentially
//! fitted (Scharfetter-Gummel) flux built from the same trapezoid increments
//! of `2 a_eff / D` that [`steady_1d`] integrates, so the steady density is
//! an exact discrete equilibrium of [`FpeSolver::step`]. The flux reduces to
//! upwinding for strong drift and to central diffusion for weak drift.

use std::io::{self, Write};

use thiserror::Error;

use crate::model::{ModelError, SdeModel};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FpeError {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("the Fokker-Planck solver is 1-D only (model has dimension {0})")]
    NotOneDimensional(usize),
    #[error("diffusion D = {d} is not positive at x = {x}")]
    NonPositiveDiffusion { x: f64, d: f64 },
    #[error("time step {dt} exceeds the stability bound; use dt <= {suggested}")]
    Unstable { dt: f64, suggested: f64 },
    #[error("density went negative ({value} at x = {x}); use dt <= {suggested}")]
    NegativeDensity { x: f64, value: f64, suggested: f64 },
    #[error("steady density is not normalizable on the grid (exponent increases toward x = {x})")]
    NonNormalizable { x: f64 },
    #[error("density has no mass")]
    ZeroMass,
    #[error("propagator under-resolved: width {width} is below 3 cells of {dx}")]
    UnderResolved { width: f64, dx: f64 },
    #[error("grids differ")]
    GridMismatch,
    #[error("time must be positive (got t = {t}, dt = {dt})")]
    BadTime { t: f64, dt: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Uniform cell-centered grid on `[x_min, x_max]`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub n_cells: usize,
}

impl GridSpec {
    pub fn new(x_min: f64, x_max: f64, n_cells: usize) -> Result<Self, FpeError> {
        if !(x_min.is_finite() && x_max.is_finite() && x_min < x_max) {
            return Err(FpeError::Grid(format!(
                "need finite x_min < x_max (got {x_min}, {x_max})"
            )));
        }
        if n_cells < 2 {
            return Err(FpeError::Grid(format!("need at least 2 cells (got {n_cells})")));
        }
        Ok(Self { x_min, x_max, n_cells })
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / self.n_cells as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        self.x_min + (i as f64 + 0.5) * self.dx()
    }

    /// Face `j` sits between cells `j - 1` and `j`; faces 0 and `n_cells` are the walls.
    pub fn face(&self, j: usize) -> f64 {
        self.x_min + j as f64 * self.dx()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n_cells).map(|i| self.center(i)).collect()
    }

    /// Cell index holding `x` (closed-open cells, last cell closed).
    pub fn cell_of(&self, x: f64) -> Option<usize> {
        if !(x >= self.x_min && x <= self.x_max) {
            return None;
        }
        let i = ((x - self.x_min) / self.dx()).floor() as usize;
        Some(i.min(self.n_cells - 1))
    }
}

/// Cell-centered probability density (units 1/length).
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    spec: GridSpec,
    values: Vec<f64>,
}

impl DensityGrid {
    pub fn new(spec: GridSpec, values: Vec<f64>) -> Result<Self, FpeError> {
        if values.len() != spec.n_cells {
            return Err(FpeError::Grid(format!(
                "{} values for {} cells",
                values.len(),
                spec.n_cells
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(FpeError::Grid(format!("density value {v} is negative or non-finite")));
        }
        Ok(Self { spec, values })
    }

    pub fn from_fn(spec: GridSpec, f: impl Fn(f64) -> f64) -> Result<Self, FpeError> {
        let values = (0..spec.n_cells).map(|i| f(spec.center(i))).collect();
        Self::new(spec, values)
    }

    /// Normalized Gaussian sampled at cell centers.
    pub fn gaussian(spec: GridSpec, mean: f64, sd: f64) -> Result<Self, FpeError> {
        let mut g = Self::from_fn(spec, |x| (-0.5 * ((x - mean) / sd).powi(2)).exp())?;
        g.normalize()?;
        Ok(g)
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dx(&self) -> f64 {
        self.spec.dx()
    }

    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.dx()
    }

    pub fn normalize(&mut self) -> Result<(), FpeError> {
        let mass = self.mass();
        if !(mass > 0.0) {
            return Err(FpeError::ZeroMass);
        }
        for v in &mut self.values {
            *v /= mass;
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        let dx = self.dx();
        self.values
            .iter()
            .enumerate()
            .map(|(i, w)| self.spec.center(i) * w * dx)
            .sum::<f64>()
            / self.mass()
    }

    pub fn variance(&self) -> f64 {
        let mu = self.mean();
        let dx = self.dx();
        self.values
            .iter()
            .enumerate()
            .map(|(i, w)| (self.spec.center(i) - mu).powi(2) * w * dx)
            .sum::<f64>()
            / self.mass()
    }

    /// Larger of the two boundary cells relative to the peak.
    pub fn boundary_ratio(&self) -> f64 {
        let peak = self.values.iter().copied().fold(0.0, f64::max);
        let edge = self.values[0].max(self.values[self.values.len() - 1]);
        if peak > 0.0 {
            edge / peak
        } else {
            0.0
        }
    }

    /// CSV `x,w` preceded by `#`-prefixed metadata lines.
    pub fn write_csv<W: Write>(&self, mut w: W, metadata: &[(&str, String)]) -> io::Result<()> {
        for (k, v) in metadata {
            writeln!(w, "# {k} = {v}")?;
        }
        writeln!(w, "x,w")?;
        for (i, v) in self.values.iter().enumerate() {
            writeln!(w, "{},{}", self.spec.center(i), v)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeFlag {
    Interior,
    /// The maximum sits in a boundary cell (e.g. a monotone density).
    Boundary,
    /// The maximum is a flat run wider than 10% of the grid; `x` is its center.
    Plateau,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeEstimate {
    pub x: f64,
    pub flag: ModeFlag,
}

/// Arg-max cell center refined by a three-point parabola.
pub fn density_mode(w: &DensityGrid) -> ModeEstimate {
    let v = w.values();
    let n = v.len();
    let (imax, vmax) =
        v.iter().copied().enumerate().fold(
            (0, f64::NEG_INFINITY),
            |best, (i, x)| if x > best.1 { (i, x) } else { best },
        );
    let flat = |x: f64| (vmax - x).abs() <= 1e-12 * vmax.abs();
    let mut lo = imax;
    while lo > 0 && flat(v[lo - 1]) {
        lo -= 1;
    }
    let mut hi = imax;
    while hi + 1 < n && flat(v[hi + 1]) {
        hi += 1;
    }
    let spec = w.spec();
    if (hi - lo + 1) as f64 > 0.1 * n as f64 {
        return ModeEstimate {
            x: 0.5 * (spec.center(lo) + spec.center(hi)),
            flag: ModeFlag::Plateau,
        };
    }
    if imax == 0 || imax == n - 1 {
        return ModeEstimate {
            x: spec.center(imax),
            flag: ModeFlag::Boundary,
        };
    }
    let (y0, y1, y2) = (v[imax - 1], v[imax], v[imax + 1]);
    let curvature = y0 - 2.0 * y1 + y2;
    let shift = if curvature < 0.0 {
        0.5 * (y0 - y2) / curvature
    } else {
        0.0
    };
    ModeEstimate {
        x: spec.center(imax) + shift.clamp(-0.5, 0.5) * spec.dx(),
        flag: ModeFlag::Interior,
    }
}

fn require_1d(model: &SdeModel) -> Result<(), FpeError> {
    if model.dim() != 1 || model.noise_dim() < 1 {
        return Err(FpeError::NotOneDimensional(model.dim()));
    }
    Ok(())
}

/// Effective drift `a + (α - 1) a_sp` and diffusion `D` at `x`.
fn coefficients(model: &SdeModel, x: f64, alpha: f64) -> Result<(f64, f64), FpeError> {
    let a = model.drift(&[x])?[0];
    let d = model.diffusion(&[x])?[(0, 0)];
    let a_eff = if alpha == 1.0 {
        a
    } else {
        a + (alpha - 1.0) * model.spurious_drift(&[x])?[0]
    };
    Ok((a_eff, d))
}

/// `(ln w_steady)'` = `2 a_eff / D` at every cell center.
fn log_slopes(model: &SdeModel, spec: &GridSpec, alpha: f64) -> Result<Vec<f64>, FpeError> {
    (0..spec.n_cells)
        .map(|i| {
            let x = spec.center(i);
            let (a_eff, d) = coefficients(model, x, alpha)?;
            if !(d > 0.0) {
                return Err(FpeError::NonPositiveDiffusion { x, d });
            }
            Ok(2.0 * a_eff / d)
        })
        .collect()
}

/// Trapezoid increment of the log-density exponent across face `j`.
fn face_increment(slopes: &[f64], j: usize, dx: f64) -> f64 {
    0.5 * dx * (slopes[j - 1] + slopes[j])
}

/// Bernoulli function `z / (e^z - 1)`.
fn bernoulli(z: f64) -> f64 {
    if z.abs() < 1e-10 {
        1.0 - 0.5 * z
    } else {
        z / z.exp_m1()
    }
}

/// Explicit flux-form solver for a fixed model, grid and α.
#[derive(Debug, Clone)]
pub struct FpeSolver {
    spec: GridSpec,
    alpha: f64,
    // J_j = from_left[j] w_{j-1} - from_right[j] w_j on interior faces
    from_left: Vec<f64>,
    from_right: Vec<f64>,
    stable_dt: f64,
}

/// Result of [`FpeSolver::evolve`].
#[derive(Debug, Clone)]
pub struct Evolution {
    pub density: DensityGrid,
    pub steps: usize,
    pub dt: f64,
    /// Largest per-step change of the total mass before renormalization.
    pub max_mass_drift: f64,
}

impl FpeSolver {
    pub fn new(model: &SdeModel, spec: GridSpec, alpha: f64) -> Result<Self, FpeError> {
        require_1d(model)?;
        let slopes = log_slopes(model, &spec, alpha)?;
        let dx = spec.dx();
        let n = spec.n_cells;
        let mut from_left = vec![0.0; n + 1];
        let mut from_right = vec![0.0; n + 1];
        let mut d_max: f64 = 0.0;
        let mut a_max: f64 = 0.0;
        for i in 0..n {
            let (a_eff, d) = coefficients(model, spec.center(i), alpha)?;
            d_max = d_max.max(d);
            a_max = a_max.max(a_eff.abs());
        }
        for j in 1..n {
            let x = spec.face(j);
            let (a_eff, d) = coefficients(model, x, alpha)?;
            if !(d > 0.0) {
                return Err(FpeError::NonPositiveDiffusion { x, d });
            }
            d_max = d_max.max(d);
            a_max = a_max.max(a_eff.abs());
            let z = face_increment(&slopes, j, dx);
            let k = 0.5 * d / dx;
            from_left[j] = k * bernoulli(-z);
            from_right[j] = k * bernoulli(z);
        }
        let mut stable_dt = dx * dx / d_max;
        if a_max > 0.0 {
            stable_dt = stable_dt.min(dx / a_max);
        }
        Ok(Self {
            spec,
            alpha,
            from_left,
            from_right,
            stable_dt: 0.4 * stable_dt,
        })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `0.4 * min(dx² / D_max, dx / |a_eff|_max)`.
    pub fn stable_dt(&self) -> f64 {
        self.stable_dt
    }

    /// Discrete current on every face (walls included, always zero there).
    pub fn currents(&self, w: &[f64]) -> Vec<f64> {
        let n = self.spec.n_cells;
        let mut j = vec![0.0; n + 1];
        for f in 1..n {
            j[f] = self.from_left[f] * w[f - 1] - self.from_right[f] * w[f];
        }
        j
    }

    /// One explicit Euler step of `w_t = -∂_x J` with zero-flux walls.
    pub fn step(&self, w: &mut [f64], dt: f64) {
        let n = self.spec.n_cells;
        let r = dt / self.spec.dx();
        let mut inflow = 0.0;
        for i in 0..n {
            let outflow = if i + 1 < n {
                self.from_left[i + 1] * w[i] - self.from_right[i + 1] * w[i + 1]
            } else {
                0.0
            };
            let wi = w[i];
            w[i] = wi + r * (inflow - outflow);
            inflow = outflow;
        }
    }

    /// Evolves `w0` to `t_final` with uniform steps no larger than `dt`,
    /// calling `observe(t, &values)` after every `observe_every` steps and at
    /// the end.
    pub fn evolve_observed(
        &self,
        w0: &DensityGrid,
        t_final: f64,
        dt: f64,
        observe_every: usize,
        mut observe: impl FnMut(f64, &DensityGrid),
    ) -> Result<Evolution, FpeError> {
        if w0.spec() != &self.spec {
            return Err(FpeError::GridMismatch);
        }
        if !(t_final > 0.0 && dt > 0.0) {
            return Err(FpeError::BadTime { t: t_final, dt });
        }
        if dt > self.stable_dt * (1.0 + 1e-12) {
            return Err(FpeError::Unstable {
                dt,
                suggested: self.stable_dt,
            });
        }
        let steps = (t_final / dt - 1e-9).ceil().max(1.0) as usize;
        let h = t_final / steps as f64;
        let dx = self.spec.dx();
        let mut grid = w0.clone();
        let mut mass = grid.mass();
        let mut max_mass_drift: f64 = 0.0;
        let every = observe_every.max(1);
        for s in 1..=steps {
            self.step(&mut grid.values, h);
            let new_mass = grid.values.iter().sum::<f64>() * dx;
            max_mass_drift = max_mass_drift.max((new_mass - mass).abs());
            mass = new_mass;
            if let Some((i, v)) = grid.values.iter().enumerate().find(|(_, v)| **v < -1e-12) {
                return Err(FpeError::NegativeDensity {
                    x: self.spec.center(i),
                    value: *v,
                    suggested: 0.5 * h,
                });
            }
            if s % every == 0 || s == steps {
                observe(s as f64 * h, &grid);
            }
        }
        for v in &mut grid.values {
            *v = v.max(0.0);
        }
        grid.normalize()?;
        Ok(Evolution {
            density: grid,
            steps,
            dt: h,
            max_mass_drift,
        })
    }

    pub fn evolve(&self, w0: &DensityGrid, t_final: f64, dt: f64) -> Result<Evolution, FpeError> {
        self.evolve_observed(w0, t_final, dt, usize::MAX, |_, _| {})
    }
}

/// Evolves `w0` for `t_final` under integration sense `alpha`.
pub fn evolve(model: &SdeModel, w0: &DensityGrid, t_final: f64, dt: f64, alpha: f64) -> Result<DensityGrid, FpeError> {
    Ok(FpeSolver::new(model, *w0.spec(), alpha)?
        .evolve(w0, t_final, dt)?
        .density)
}

/// Zero-current density `w ∝ exp(∫ 2 a_eff / D dx)` by the trapezoid rule.
pub fn steady_1d(model: &SdeModel, spec: GridSpec, alpha: f64) -> Result<DensityGrid, FpeError> {
    require_1d(model)?;
    let slopes = log_slopes(model, &spec, alpha)?;
    let n = spec.n_cells;
    let dx = spec.dx();
    let mut exponent = vec![0.0; n];
    for j in 1..n {
        exponent[j] = exponent[j - 1] + face_increment(&slopes, j, dx);
    }
    let (imax, top) =
        exponent.iter().copied().enumerate().fold(
            (0, f64::NEG_INFINITY),
            |best, (i, e)| if e > best.1 { (i, e) } else { best },
        );
    if (imax == 0 && slopes[0] < 0.0) || (imax == n - 1 && slopes[n - 1] > 0.0) {
        return Err(FpeError::NonNormalizable { x: spec.center(imax) });
    }
    let values = exponent.iter().map(|e| (e - top).exp()).collect();
    let mut w = DensityGrid::new(spec, values)?;
    w.normalize()?;
    Ok(w)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropagatorStats {
    pub mean: f64,
    pub mode: f64,
    /// Standard deviation of the evolved peak.
    pub width: f64,
}

/// Evolves a narrow peak (Gaussian of width 3 cells) at `x0` for `dt_small`
/// and reports where its mean and mode went.
///
/// Both are measured as displacements of the discretized initial peak and
/// reported relative to `x0`.
pub fn propagator_stats(
    model: &SdeModel,
    spec: GridSpec,
    x0: f64,
    dt_small: f64,
    alpha: f64,
) -> Result<PropagatorStats, FpeError> {
    let solver = FpeSolver::new(model, spec, alpha)?;
    let dx = spec.dx();
    let w0 = DensityGrid::gaussian(spec, x0, 3.0 * dx)?;
    let evolved = solver.evolve(&w0, dt_small, solver.stable_dt())?.density;
    let width = evolved.variance().sqrt();
    if width < 3.0 * dx {
        return Err(FpeError::UnderResolved { width, dx });
    }
    Ok(PropagatorStats {
        mean: x0 + (evolved.mean() - w0.mean()),
        mode: x0 + (density_mode(&evolved).x - density_mode(&w0).x),
        width,
    })
}
