//! Steady-state structure near attractors.
//!
//! A steady density `w = N exp(-Φ)` with `a = (-D/2 + A) ∇Φ`, `A` constant and
//! antisymmetric. Near a fixed point `x*` the quasipotential is quadratic,
//! `Φ ≈ ½ (x - x*)ᵀ S (x - x*)`. Two routes to `A` and `S` are computed side
//! by side:
//!
//! * closed form: `A = (M D)_a / (2ρ)` and `S = (-D/2 + A)⁻¹ M`;
//! * Lyapunov: `M Σ + Σ Mᵀ + D = 0`, `S = Σ⁻¹`, `A = M S⁻¹ + D/2`.
//!
//! Neither is preferred; [`QuasipotentialReport`] carries both plus the
//! residuals relating them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{self, Write};

use nalgebra::{Complex, DMatrix, DVector};
use thiserror::Error;

use crate::model::{fd_step, ModelError, SdeModel};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SteadyError {
    #[error("Newton iteration did not converge in {iterations} iterations (|a| = {residual})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("drift Jacobian is singular at {0:?}")]
    SingularJacobian(Vec<f64>),
    #[error("dissipation ρ = {0} vanishes; A = (MD)_a / 2ρ is undefined")]
    NoDissipation(f64),
    #[error("M is not Hurwitz (eigenvalue with real part {0})")]
    NotHurwitz(f64),
    #[error("{0} is singular")]
    Singular(&'static str),
    #[error("antisymmetric A does not exist for n = 1; use the 1-D quasipotential")]
    OneDimensional,
    #[error("matrix dimensions do not match")]
    Shape,
    #[error("diffusion D = {d} is not positive at x = {x}")]
    NonPositiveDiffusion { x: f64, d: f64 },
    #[error("need at least 2 points on a non-empty range")]
    BadRange,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointReport {
    pub x_star: DVector<f64>,
    /// Drift Jacobian at `x_star`.
    pub m: DMatrix<f64>,
    pub d_star: DMatrix<f64>,
    pub rho: f64,
    pub eigenvalues: Vec<Complex<f64>>,
    pub iterations: usize,
    pub residual: f64,
}

impl FixedPointReport {
    /// All eigenvalues of `M` in the open left half-plane.
    pub fn is_attractor(&self) -> bool {
        self.eigenvalues.iter().all(|l| l.re < 0.0)
    }

    pub fn max_real_eigenvalue(&self) -> f64 {
        self.eigenvalues.iter().map(|l| l.re).fold(f64::NEG_INFINITY, f64::max)
    }
}

const NEWTON_TOL: f64 = 1e-10;
const NEWTON_MAX_ITER: usize = 100;
const MAX_HALVINGS: usize = 20;
const MAX_CONDITION: f64 = 1e12;

/// Damped Newton iteration on `a(x) = 0`.
pub fn find_fixed_point(model: &SdeModel, x_guess: &[f64]) -> Result<FixedPointReport, SteadyError> {
    let mut x = DVector::from_column_slice(x_guess);
    let mut a = model.drift(x.as_slice())?;
    let mut iterations = 0;
    while a.norm() > NEWTON_TOL {
        if iterations == NEWTON_MAX_ITER {
            return Err(SteadyError::NoConvergence {
                iterations,
                residual: a.norm(),
            });
        }
        iterations += 1;
        let jac = model.jacobian_drift(x.as_slice())?;
        let step = jac
            .lu()
            .solve(&a)
            .filter(|s| s.iter().all(|v| v.is_finite()))
            .ok_or_else(|| SteadyError::SingularJacobian(x.as_slice().to_vec()))?;
        let mut scale = 1.0;
        let mut candidate = &x - &step;
        let mut a_new = model.drift(candidate.as_slice());
        for _ in 0..MAX_HALVINGS {
            if matches!(&a_new, Ok(v) if v.norm() < a.norm()) {
                break;
            }
            scale *= 0.5;
            candidate = &x - &step * scale;
            a_new = model.drift(candidate.as_slice());
        }
        x = candidate;
        a = a_new?;
    }
    let m = model.jacobian_drift(x.as_slice())?;
    let d_star = model.diffusion(x.as_slice())?;
    let eigenvalues = m.complex_eigenvalues().iter().copied().collect();
    Ok(FixedPointReport {
        rho: -m.trace(),
        x_star: x,
        m,
        d_star,
        eigenvalues,
        iterations,
        residual: a.norm(),
    })
}

fn check_square(mats: &[&DMatrix<f64>]) -> Result<usize, SteadyError> {
    let n = mats[0].nrows();
    if mats.iter().any(|m| m.nrows() != n || m.ncols() != n) {
        return Err(SteadyError::Shape);
    }
    Ok(n)
}

/// Antisymmetric part `(X - Xᵀ) / 2`.
pub fn antisymmetric_part(x: &DMatrix<f64>) -> DMatrix<f64> {
    (x - x.transpose()) * 0.5
}

/// Closed form `A = (M D)_a / (2ρ)`.
pub fn a_matrix_paper(m: &DMatrix<f64>, d: &DMatrix<f64>, rho: f64) -> Result<DMatrix<f64>, SteadyError> {
    let n = check_square(&[m, d])?;
    if n == 1 {
        return Err(SteadyError::OneDimensional);
    }
    if rho.abs() < 1e-12 {
        return Err(SteadyError::NoDissipation(rho));
    }
    Ok(antisymmetric_part(&(m * d)) / (2.0 * rho))
}

/// Stationary covariance `Σ` with `M Σ + Σ Mᵀ + D = 0`, solved as an
/// `n² x n²` linear system.
pub fn lyapunov_solve(m: &DMatrix<f64>, d: &DMatrix<f64>) -> Result<DMatrix<f64>, SteadyError> {
    let n = check_square(&[m, d])?;
    let worst = m
        .complex_eigenvalues()
        .iter()
        .map(|l| l.re)
        .fold(f64::NEG_INFINITY, f64::max);
    if worst >= 0.0 {
        return Err(SteadyError::NotHurwitz(worst));
    }
    let eye = DMatrix::<f64>::identity(n, n);
    // column-major vec: vec(MΣ) = (I ⊗ M) vec Σ, vec(ΣMᵀ) = (M ⊗ I) vec Σ
    let system = eye.kronecker(m) + m.kronecker(&eye);
    let rhs = -DVector::from_column_slice(d.as_slice());
    let sol = system
        .lu()
        .solve(&rhs)
        .ok_or(SteadyError::Singular("Lyapunov system"))?;
    let sigma = DMatrix::from_column_slice(n, n, sol.as_slice());
    Ok((&sigma + sigma.transpose()) * 0.5)
}

/// `‖M Σ + Σ Mᵀ + D‖_max`.
pub fn lyapunov_residual(m: &DMatrix<f64>, d: &DMatrix<f64>, sigma: &DMatrix<f64>) -> f64 {
    (m * sigma + sigma * m.transpose() + d).abs().max()
}

/// `S = (-D/2 + A)⁻¹ M`.
pub fn s_matrix_paper(m: &DMatrix<f64>, d: &DMatrix<f64>, a: &DMatrix<f64>) -> Result<DMatrix<f64>, SteadyError> {
    check_square(&[m, d, a])?;
    let k = a - d * 0.5;
    k.lu().solve(m).ok_or(SteadyError::Singular("-D/2 + A"))
}

/// `A = M S⁻¹ + D/2`, from linearizing `a = (-D/2 + A) ∇Φ` at the fixed point.
pub fn a_from_balance(m: &DMatrix<f64>, d: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<DMatrix<f64>, SteadyError> {
    check_square(&[m, d, s])?;
    let s_inv = s.clone().try_inverse().ok_or(SteadyError::Singular("S"))?;
    Ok(m * s_inv + d * 0.5)
}

/// `‖X - Xᵀ‖_F / ‖X‖_F` (0 for the zero matrix).
pub fn symmetry_residual(x: &DMatrix<f64>) -> f64 {
    let norm = x.norm();
    if norm == 0.0 {
        0.0
    } else {
        (x - x.transpose()).norm() / norm
    }
}

/// `‖X + Xᵀ‖_F / ‖X‖_F` (0 for the zero matrix).
pub fn antisymmetry_residual(x: &DMatrix<f64>) -> f64 {
    let norm = x.norm();
    if norm == 0.0 {
        0.0
    } else {
        (x + x.transpose()).norm() / norm
    }
}

/// `|∇·(D A⁻¹ a) - 2ρ|` at `x`, with the divergence taken by central
/// differences of the full vector field.
pub fn condition_residual(model: &SdeModel, a_mat: &DMatrix<f64>, x: &[f64]) -> Result<f64, SteadyError> {
    let n = model.dim();
    if n == 1 {
        return Err(SteadyError::OneDimensional);
    }
    if a_mat.nrows() != n || a_mat.ncols() != n {
        return Err(SteadyError::Shape);
    }
    let a_inv = a_mat.clone().try_inverse().ok_or(SteadyError::Singular("A"))?;
    let field = |p: &[f64]| -> Result<DVector<f64>, SteadyError> { Ok(model.diffusion(p)? * &a_inv * model.drift(p)?) };
    let mut point = x.to_vec();
    let mut div = 0.0;
    for k in 0..n {
        let h = fd_step(x[k]);
        let (xp, xm) = (x[k] + h, x[k] - h);
        point[k] = xp;
        let fp = field(&point)?[k];
        point[k] = xm;
        let fm = field(&point)?[k];
        point[k] = x[k];
        div += (fp - fm) / (xp - xm);
    }
    Ok((div - 2.0 * model.dissipation(x)?).abs())
}

fn quadratic_gradient(s: &DMatrix<f64>, x_star: &[f64], x: &[f64]) -> DVector<f64> {
    let y = DVector::from_iterator(x.len(), x.iter().zip(x_star).map(|(a, b)| a - b));
    s * y
}

/// `a_c = a + D ∇Φ / 2` with the quadratic `Φ` about `x_star`.
pub fn conservative_drift(
    model: &SdeModel,
    s: &DMatrix<f64>,
    x_star: &[f64],
    x: &[f64],
) -> Result<DVector<f64>, SteadyError> {
    let grad = quadratic_gradient(s, x_star, x);
    Ok(model.drift(x)? + model.diffusion(x)? * grad * 0.5)
}

/// `(a + D ∇Φ / 2) · ∇Φ` with the quadratic `Φ` about `x_star`.
pub fn freidlin_residual(model: &SdeModel, s: &DMatrix<f64>, x_star: &[f64], x: &[f64]) -> Result<f64, SteadyError> {
    let grad = quadratic_gradient(s, x_star, x);
    let ac = model.drift(x)? + model.diffusion(x)? * &grad * 0.5;
    Ok(ac.dot(&grad))
}

/// Tabulated 1-D quasipotential.
#[derive(Debug, Clone, PartialEq)]
pub struct Quasipotential1d {
    pub x: Vec<f64>,
    pub phi: Vec<f64>,
    /// Point where `Φ = 0`.
    pub anchor: f64,
    /// False when no fixed point lies in range; the anchor is then the
    /// minimum of `Φ`.
    pub anchored_at_fixed_point: bool,
}

/// `Φ(x) = -∫_{x*}^{x} 2a/D ds` by the trapezoid rule on `n_points` nodes.
pub fn quasipotential_1d(
    model: &SdeModel,
    x_range: (f64, f64),
    n_points: usize,
) -> Result<Quasipotential1d, SteadyError> {
    if model.dim() != 1 {
        return Err(SteadyError::Shape);
    }
    let (lo, hi) = x_range;
    if n_points < 2 || !(lo < hi) {
        return Err(SteadyError::BadRange);
    }
    let h = (hi - lo) / (n_points - 1) as f64;
    let slope = |x: f64| -> Result<f64, SteadyError> {
        let d = model.diffusion(&[x])?[(0, 0)];
        if !(d > 0.0) {
            return Err(SteadyError::NonPositiveDiffusion { x, d });
        }
        Ok(-2.0 * model.drift(&[x])?[0] / d)
    };
    let xs: Vec<f64> = (0..n_points).map(|i| lo + i as f64 * h).collect();
    let slopes = xs.iter().map(|&x| slope(x)).collect::<Result<Vec<_>, _>>()?;
    let mut phi = vec![0.0; n_points];
    for i in 1..n_points {
        phi[i] = phi[i - 1] + 0.5 * h * (slopes[i - 1] + slopes[i]);
    }

    // anchor at a drift zero inside the range when there is one
    let fixed = (1..n_points)
        .find(|&i| slopes[i - 1] == 0.0 || slopes[i - 1].signum() != slopes[i].signum())
        .and_then(|i| {
            let guess = if slopes[i - 1] == 0.0 {
                xs[i - 1]
            } else {
                0.5 * (xs[i - 1] + xs[i])
            };
            find_fixed_point(model, &[guess]).ok()
        })
        .map(|r| r.x_star[0])
        .filter(|x| (lo..=hi).contains(x));
    let (anchor, offset, at_fixed) = match fixed {
        Some(xs_star) => {
            let i = (((xs_star - lo) / h).floor() as usize).min(n_points - 2);
            let partial = 0.5 * (xs_star - xs[i]) * (slopes[i] + slope(xs_star)?);
            (xs_star, phi[i] + partial, true)
        }
        None => {
            let (i, min) = phi
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::INFINITY), |b, (i, p)| if p < b.1 { (i, p) } else { b });
            (xs[i], min, false)
        }
    };
    for p in &mut phi {
        *p -= offset;
    }
    Ok(Quasipotential1d {
        x: xs,
        phi,
        anchor,
        anchored_at_fixed_point: at_fixed,
    })
}

/// Full analysis around an attractor.
#[derive(Debug, Clone, PartialEq)]
pub struct QuasipotentialReport {
    pub label: String,
    pub fixed_point: FixedPointReport,
    pub a_paper: Option<DMatrix<f64>>,
    pub s_paper: Option<DMatrix<f64>>,
    pub sigma: Option<DMatrix<f64>>,
    pub s_oracle: Option<DMatrix<f64>>,
    pub a_oracle: Option<DMatrix<f64>>,
    pub residuals: BTreeMap<String, f64>,
    /// Reasons some quantities are missing or suspect.
    pub flags: Vec<String>,
}

impl QuasipotentialReport {
    pub fn is_complete(&self) -> bool {
        self.a_paper.is_some() && self.s_paper.is_some() && self.s_oracle.is_some() && self.a_oracle.is_some()
    }

    fn matrices(&self) -> Vec<(&'static str, &DMatrix<f64>)> {
        let fp = &self.fixed_point;
        let mut out = vec![("M", &fp.m), ("D", &fp.d_star)];
        for (name, m) in [
            ("A_paper", &self.a_paper),
            ("A_oracle", &self.a_oracle),
            ("S_paper", &self.s_paper),
            ("S_oracle", &self.s_oracle),
            ("sigma", &self.sigma),
        ] {
            if let Some(m) = m {
                out.push((name, m));
            }
        }
        out
    }

    /// Flat `name = value` text, matrices as `[[..],[..]]`.
    pub fn to_key_value(&self) -> String {
        let fp = &self.fixed_point;
        let mut s = String::new();
        let _ = writeln!(s, "label = {}", self.label);
        let _ = writeln!(s, "n = {}", fp.x_star.len());
        let _ = writeln!(s, "x_star = {}", vector_literal(fp.x_star.as_slice()));
        let _ = writeln!(s, "newton_iterations = {}", fp.iterations);
        let _ = writeln!(s, "rho = {}", fp.rho);
        let eig: Vec<String> = fp.eigenvalues.iter().map(|l| format!("{}{:+}i", l.re, l.im)).collect();
        let _ = writeln!(s, "eigenvalues = [{}]", eig.join(","));
        let _ = writeln!(s, "attractor = {}", fp.is_attractor());
        for (name, m) in self.matrices() {
            let _ = writeln!(s, "{name} = {}", matrix_literal(m));
        }
        for (k, v) in &self.residuals {
            let _ = writeln!(s, "residual.{k} = {v}");
        }
        for f in &self.flags {
            let _ = writeln!(s, "flag = {f}");
        }
        s
    }

    /// Every matrix as `(name, csv)`.
    pub fn matrix_csvs(&self) -> Vec<(String, String)> {
        self.matrices()
            .into_iter()
            .map(|(name, m)| {
                let mut buf = Vec::new();
                write_matrix_csv(&mut buf, m).expect("writing to a Vec cannot fail");
                (name.to_string(), String::from_utf8(buf).expect("csv is utf-8"))
            })
            .collect()
    }
}

pub fn write_matrix_csv<W: Write>(mut w: W, m: &DMatrix<f64>) -> io::Result<()> {
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|k| m[(i, k)].to_string()).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

fn vector_literal(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(f64::to_string).collect();
    format!("[{}]", parts.join(","))
}

fn matrix_literal(m: &DMatrix<f64>) -> String {
    let rows: Vec<String> = (0..m.nrows())
        .map(|i| vector_literal(&m.row(i).iter().copied().collect::<Vec<_>>()))
        .collect();
    format!("[{}]", rows.join(","))
}

fn relative_gap(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = a.norm().max(b.norm());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).norm() / scale
    }
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Runs both routes to `A` and `S` at the attractor reached from `x_guess`.
///
/// `residual.condition_4_7` and `residual.freidlin_quadratic` use the
/// Lyapunov-route matrices; the `_paper` variants use the closed forms.
/// A non-Hurwitz `M` yields a partial report with only the closed-form `A`.
pub fn analyze(model: &SdeModel, x_guess: &[f64]) -> Result<QuasipotentialReport, SteadyError> {
    if model.dim() == 1 {
        return Err(SteadyError::OneDimensional);
    }
    let fp = find_fixed_point(model, x_guess)?;
    let (m, d) = (fp.m.clone(), fp.d_star.clone());
    let x_star: Vec<f64> = fp.x_star.iter().copied().collect();
    let mut residuals = BTreeMap::new();
    let mut flags = Vec::new();

    let a_paper = match a_matrix_paper(&m, &d, fp.rho) {
        Ok(a) => Some(a),
        Err(e) => {
            flags.push(format!("A_paper unavailable: {e}"));
            None
        }
    };

    let mut report = QuasipotentialReport {
        label: model.label().to_string(),
        fixed_point: fp.clone(),
        a_paper: a_paper.clone(),
        s_paper: None,
        sigma: None,
        s_oracle: None,
        a_oracle: None,
        residuals: BTreeMap::new(),
        flags: Vec::new(),
    };

    if !fp.is_attractor() {
        flags.push(format!(
            "fixed point is not an attractor (max Re λ = {}); partial report",
            fp.max_real_eigenvalue()
        ));
        report.flags = flags;
        return Ok(report);
    }

    if let Some(a) = &a_paper {
        residuals.insert("a_paper_antisymmetry".into(), antisymmetry_residual(a));
        match s_matrix_paper(&m, &d, a) {
            Ok(s) => {
                residuals.insert("s_symmetry".into(), symmetry_residual(&s));
                report.s_paper = Some(s);
            }
            Err(e) => flags.push(format!("S_paper unavailable: {e}")),
        }
        match condition_residual(model, a, &x_star) {
            Ok(r) => {
                residuals.insert("condition_4_7_paper".into(), r);
            }
            Err(e) => flags.push(format!("condition residual (closed-form A) unavailable: {e}")),
        }
    }

    let sigma = lyapunov_solve(&m, &d)?;
    residuals.insert("lyapunov".into(), lyapunov_residual(&m, &d, &sigma));
    let cond = condition_number(&sigma);
    if cond > MAX_CONDITION {
        flags.push(format!(
            "sigma is singular (condition number {cond:e}); S_oracle unavailable"
        ));
    } else {
        let s_oracle = sigma.clone().try_inverse().ok_or(SteadyError::Singular("sigma"))?;
        let s_oracle = (&s_oracle + s_oracle.transpose()) * 0.5;
        let a_oracle = a_from_balance(&m, &d, &s_oracle)?;
        residuals.insert("a_antisymmetry".into(), antisymmetry_residual(&a_oracle));
        match condition_residual(model, &a_oracle, &x_star) {
            Ok(r) => {
                residuals.insert("condition_4_7".into(), r);
            }
            Err(e) => flags.push(format!("condition residual unavailable: {e}")),
        }
        // probe the quadratic neighborhood along each axis
        let probe = |s: &DMatrix<f64>| -> Result<f64, SteadyError> {
            let mut worst: f64 = 0.0;
            for k in 0..x_star.len() {
                for sign in [-1.0, 1.0] {
                    let mut x = x_star.clone();
                    let eps = 1e-3 * x_star[k].abs().max(1.0);
                    x[k] += sign * eps;
                    worst = worst.max(freidlin_residual(model, s, &x_star, &x)?.abs() / (eps * eps));
                }
            }
            Ok(worst)
        };
        residuals.insert("freidlin_quadratic".into(), probe(&s_oracle)?);
        if let Some(s) = &report.s_paper {
            residuals.insert("freidlin_quadratic_paper".into(), probe(s)?);
            residuals.insert("paper_vs_oracle_S".into(), relative_gap(s, &s_oracle));
        }
        if let Some(a) = &a_paper {
            residuals.insert("paper_vs_oracle_A".into(), relative_gap(a, &a_oracle));
        }
        report.s_oracle = Some(s_oracle);
        report.a_oracle = Some(a_oracle);
    }
    report.sigma = Some(sigma);
    report.residuals = residuals;
    report.flags = flags;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exprlang::Params;
    use proptest::prelude::*;

    fn mat(n: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(n, n, v)
    }

    fn j2() -> DMatrix<f64> {
        mat(2, &[0.0, 1.0, -1.0, 0.0])
    }

    fn close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
        (a - b).abs().max() <= tol
    }

    fn p(pairs: &[(&str, f64)]) -> Params {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn spiral(omega: f64) -> SdeModel {
        SdeModel::parse(
            "linear2d",
            &["-x1 + omega*x2", "-omega*x1 - x2"],
            &[vec!["1", "0"], vec!["0", "1"]],
            p(&[("omega", omega)]),
        )
        .unwrap()
    }

    fn kramers(gamma: &str) -> SdeModel {
        SdeModel::parse(
            "klein-kramers",
            &["x2", &format!("-({gamma})*x2 - x1")],
            &[vec!["0"], vec![&format!("sqrt(2*({gamma})*T)")]],
            p(&[("T", 1.0)]),
        )
        .unwrap()
    }

    #[test]
    fn fixed_point_examples() {
        let ou = SdeModel::parse("ou", &["-x1"], &[vec!["1"]], Params::new()).unwrap();
        let r = find_fixed_point(&ou, &[3.0]).unwrap();
        assert!(r.x_star[0].abs() <= 1e-10);
        assert!((r.m[(0, 0)] + 1.0).abs() < 1e-9);
        assert!((r.rho - 1.0).abs() < 1e-9);
        assert!(r.is_attractor());

        let r = find_fixed_point(&kramers("1"), &[0.5, 0.5]).unwrap();
        assert!(r.x_star.norm() <= 1e-10);
        assert!(close(&r.m, &mat(2, &[0.0, 1.0, -1.0, -1.0]), 1e-9));
        assert!((r.rho - 1.0).abs() < 1e-9);
        assert_eq!(r.rho, -r.m.trace());

        let saddle = SdeModel::parse("saddle", &["x2", "x1"], &[vec!["1"], vec!["1"]], Params::new()).unwrap();
        let r = find_fixed_point(&saddle, &[0.1, -0.2]).unwrap();
        assert!(r.x_star.norm() <= 1e-10);
        assert!(!r.is_attractor());
        assert!((r.max_real_eigenvalue() - 1.0).abs() < 1e-9);

        let cubic = SdeModel::parse("cubic", &["-x1 - x1^3 + 2"], &[vec!["1"]], Params::new()).unwrap();
        let r = find_fixed_point(&cubic, &[5.0]).unwrap();
        assert!((r.x_star[0] - 1.0).abs() < 1e-9);

        let none = SdeModel::parse("none", &["1 + x1^2"], &[vec!["1"]], Params::new()).unwrap();
        assert!(find_fixed_point(&none, &[0.0]).is_err());
    }

    #[test]
    fn closed_form_a_examples() {
        let d = DMatrix::identity(2, 2) * 3.0;
        let a = a_matrix_paper(&mat(2, &[-1.0, 0.5, 0.5, -2.0]), &d, 3.0).unwrap();
        assert_eq!(a, DMatrix::zeros(2, 2));

        let (u2, gamma, dvv) = (1.5, 0.7, 0.4);
        let a = a_matrix_paper(&mat(2, &[0.0, 1.0, -u2, -gamma]), &mat(2, &[0.0, 0.0, 0.0, dvv]), gamma).unwrap();
        assert!(close(&a, &(j2() * (dvv / (4.0 * gamma))), 1e-15));

        let omega = 1.3;
        let a = a_matrix_paper(&mat(2, &[-1.0, omega, -omega, -1.0]), &DMatrix::identity(2, 2), 2.0).unwrap();
        assert!(close(&a, &(j2() * (omega / 4.0)), 1e-15));

        assert!(matches!(
            a_matrix_paper(&mat(2, &[0.0, 1.0, -1.0, 0.0]), &DMatrix::identity(2, 2), 0.0),
            Err(SteadyError::NoDissipation(_))
        ));
        assert!(matches!(
            a_matrix_paper(&mat(1, &[-1.0]), &mat(1, &[1.0]), 1.0),
            Err(SteadyError::OneDimensional)
        ));
    }

    #[test]
    fn lyapunov_examples() {
        let eye = DMatrix::<f64>::identity(2, 2);
        let s = lyapunov_solve(&(-&eye), &eye).unwrap();
        assert!(close(&s, &(&eye * 0.5), 1e-14));
        let m = mat(2, &[-1.0, 0.8, -0.8, -1.0]);
        let s = lyapunov_solve(&m, &eye).unwrap();
        assert!(close(&s, &(&eye * 0.5), 1e-14));
        assert!(lyapunov_residual(&m, &eye, &s) <= 1e-10);
        let (gamma, t) = (0.6, 1.7);
        let m = mat(2, &[0.0, 1.0, -1.0, -gamma]);
        let d = mat(2, &[0.0, 0.0, 0.0, 2.0 * gamma * t]);
        let s = lyapunov_solve(&m, &d).unwrap();
        assert!(close(&s, &(&eye * t), 1e-12));
        assert!(matches!(
            lyapunov_solve(&mat(2, &[0.0, 1.0, -1.0, 0.0]), &eye),
            Err(SteadyError::NotHurwitz(_))
        ));
    }

    #[test]
    fn closed_form_s_examples() {
        let eye = DMatrix::<f64>::identity(2, 2);
        let s = s_matrix_paper(&(-&eye), &eye, &DMatrix::zeros(2, 2)).unwrap();
        assert!(close(&s, &(&eye * 2.0), 1e-15));
        let (k, dd) = (1.7, 0.3);
        let s = s_matrix_paper(&mat(1, &[-k]), &mat(1, &[dd]), &mat(1, &[0.0])).unwrap();
        assert!((s[(0, 0)] - 2.0 * k / dd).abs() < 1e-12);

        let m = mat(2, &[-1.0, 1.0, -1.0, -1.0]);
        let a = a_matrix_paper(&m, &eye, 2.0).unwrap();
        let s = s_matrix_paper(&m, &eye, &a).unwrap();
        let oracle = lyapunov_solve(&m, &eye).unwrap().try_inverse().unwrap();
        assert!(close(&oracle, &(&eye * 2.0), 1e-12));
        // the closed form misses the oracle here; the gap is what gets reported
        assert!(relative_gap(&s, &oracle) > 0.1);
        assert!(matches!(
            s_matrix_paper(&m, &DMatrix::zeros(2, 2), &DMatrix::zeros(2, 2)),
            Err(SteadyError::Singular(_))
        ));
    }

    #[test]
    fn balance_a_examples() {
        let (gamma, t) = (0.9, 2.5);
        let m = mat(2, &[0.0, 1.0, -1.0, -gamma]);
        let d = mat(2, &[0.0, 0.0, 0.0, 2.0 * gamma * t]);
        let eye = DMatrix::<f64>::identity(2, 2);
        let a = a_from_balance(&m, &d, &(&eye / t)).unwrap();
        assert!(close(&a, &(j2() * t), 1e-12));
        let a = a_from_balance(&(-&eye), &eye, &(&eye * 2.0)).unwrap();
        assert!(close(&a, &DMatrix::zeros(2, 2), 1e-15));
        let omega = 0.6;
        let a = a_from_balance(&mat(2, &[-1.0, omega, -omega, -1.0]), &eye, &(&eye * 2.0)).unwrap();
        assert!(close(&a, &(j2() * (omega / 2.0)), 1e-15));
        assert!(antisymmetry_residual(&a) < 1e-15);
        assert!(a_from_balance(&eye, &eye, &DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn condition_residual_examples() {
        let omega = 1.0;
        let a = j2() * (omega / 2.0);
        for x in [[0.3, -0.2], [1.0, 2.0], [0.0, 0.0]] {
            assert!(condition_residual(&spiral(omega), &a, &x).unwrap() <= 1e-6);
        }
        for gamma in ["1", "1 + 0.1*tanh(x1*x2)"] {
            for x in [[0.5, -1.0], [1.5, 0.7], [-2.0, 0.3]] {
                let r = condition_residual(&kramers(gamma), &j2(), &x).unwrap();
                assert!(r <= 1e-6, "{gamma} at {x:?}: {r}");
            }
        }
        let ou = SdeModel::parse("ou", &["-x1"], &[vec!["1"]], Params::new()).unwrap();
        assert!(matches!(
            condition_residual(&ou, &mat(1, &[0.0]), &[0.0]),
            Err(SteadyError::OneDimensional)
        ));
        assert!(matches!(
            condition_residual(&spiral(1.0), &DMatrix::zeros(2, 2), &[0.0, 0.0]),
            Err(SteadyError::Singular(_))
        ));
    }

    #[test]
    fn conservative_drift_examples() {
        let model = spiral(1.0);
        let s = DMatrix::<f64>::identity(2, 2) * 2.0;
        assert_eq!(
            conservative_drift(&model, &s, &[0.0, 0.0], &[0.0, 0.0]).unwrap(),
            DVector::zeros(2)
        );
        let eps = 0.01;
        let ac = conservative_drift(&model, &s, &[0.0, 0.0], &[eps, 0.0]).unwrap();
        let a_oracle = j2() * 0.5;
        let expect = &a_oracle * DVector::from_vec(vec![2.0 * eps, 0.0]);
        assert!((&ac - &expect).norm() <= 1e-10);
        assert!((ac - DVector::from_vec(vec![0.0, -eps])).norm() <= 1e-10);

        let ou = SdeModel::parse("ou", &["-x1"], &[vec!["sqrt(2)"]], Params::new()).unwrap();
        for x in [-1.0, 0.5, 3.0] {
            let ac = conservative_drift(&ou, &mat(1, &[1.0]), &[0.0], &[x]).unwrap();
            assert!(ac[0].abs() < 1e-14);
        }
    }

    #[test]
    fn freidlin_examples() {
        let model = spiral(1.0);
        let s = lyapunov_solve(
            &model.jacobian_drift(&[0.0, 0.0]).unwrap(),
            &model.diffusion(&[0.0, 0.0]).unwrap(),
        )
        .unwrap()
        .try_inverse()
        .unwrap();
        for x in [[0.3, 0.1], [-2.0, 1.5], [10.0, -7.0]] {
            assert!(
                freidlin_residual(&model, &s, &[0.0, 0.0], &x).unwrap().abs()
                    <= 1e-10 * (1.0 + x[0] * x[0] + x[1] * x[1])
            );
        }
        assert_eq!(freidlin_residual(&model, &s, &[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);

        let cubic = SdeModel::parse("cubic", &["-x1 - x1^3"], &[vec!["1"]], Params::new()).unwrap();
        let s = mat(1, &[2.0]);
        let r = |y: f64| freidlin_residual(&cubic, &s, &[0.0], &[y]).unwrap().abs();
        let order = (r(0.1) / r(0.05)).log2();
        assert!(order >= 2.7, "{order}");
    }

    #[test]
    fn quasipotential_1d_examples() {
        let ou = SdeModel::parse("ou", &["-x1"], &[vec!["sqrt(2)"]], Params::new()).unwrap();
        let q = quasipotential_1d(&ou, (-3.0, 3.0), 61).unwrap();
        assert!(q.anchored_at_fixed_point);
        for (x, phi) in q.x.iter().zip(&q.phi) {
            assert!((phi - x * x / 2.0).abs() < 1e-12, "{x}: {phi}");
        }
        let tanh = SdeModel::parse("tanh1d", &["-x1"], &[vec!["2 + tanh(x1)"]], Params::new()).unwrap();
        let q = quasipotential_1d(&tanh, (-4.0, 10.0), 141).unwrap();
        let imin = q
            .phi
            .iter()
            .enumerate()
            .fold(0, |b, (i, p)| if *p < q.phi[b] { i } else { b });
        assert!(q.x[imin].abs() < 1e-9);
        assert!(q.anchor.abs() < 1e-10);

        let rep = SdeModel::parse("rep", &["x1"], &[vec!["sqrt(2)"]], Params::new()).unwrap();
        let q = quasipotential_1d(&rep, (-2.0, 2.0), 41).unwrap();
        for (x, phi) in q.x.iter().zip(&q.phi) {
            assert!((phi + x * x / 2.0).abs() < 1e-12);
        }
        let bad = SdeModel::parse("bad", &["-x1"], &[vec!["x1"]], Params::new()).unwrap();
        assert!(matches!(
            quasipotential_1d(&bad, (-1.0, 1.0), 3),
            Err(SteadyError::NonPositiveDiffusion { .. })
        ));
    }

    #[test]
    fn analyze_examples() {
        let iso = SdeModel::parse("iso", &["-x1", "-x2"], &[vec!["1", "0"], vec!["0", "1"]], Params::new()).unwrap();
        let r = analyze(&iso, &[0.4, 0.2]).unwrap();
        let eye = DMatrix::<f64>::identity(2, 2);
        assert!(close(r.a_paper.as_ref().unwrap(), &DMatrix::zeros(2, 2), 1e-10));
        assert!(close(r.a_oracle.as_ref().unwrap(), &DMatrix::zeros(2, 2), 1e-10));
        assert!(close(r.s_paper.as_ref().unwrap(), &(&eye * 2.0), 1e-10));
        assert!(close(r.s_oracle.as_ref().unwrap(), &(&eye * 2.0), 1e-10));
        for (k, v) in &r.residuals {
            assert!(*v <= 1e-9, "{k} = {v}");
        }

        let r = analyze(&kramers("1"), &[0.5, 0.5]).unwrap();
        assert!(close(r.a_oracle.as_ref().unwrap(), &j2(), 1e-8));
        assert!(close(r.s_oracle.as_ref().unwrap(), &eye, 1e-8));
        assert!(close(r.a_paper.as_ref().unwrap(), &(j2() * 0.5), 1e-8));
        assert!(r.residuals["paper_vs_oracle_A"] > 0.1);
        assert!(r.residuals["condition_4_7"] <= 1e-6);

        let r = analyze(&spiral(1.0), &[0.1, 0.1]).unwrap();
        assert!(close(r.s_oracle.as_ref().unwrap(), &(&eye * 2.0), 1e-9));
        assert!(r.residuals.contains_key("paper_vs_oracle_S"));
        let text = r.to_key_value();
        assert!(text.contains("S_oracle = [["));
        assert!(text.contains("residual.paper_vs_oracle_S = "));
        assert_eq!(r.matrix_csvs().len(), 7);

        let saddle = SdeModel::parse(
            "saddle",
            &["x2 - 0.1*x1", "x1"],
            &[vec!["1", "0"], vec!["0", "1"]],
            Params::new(),
        )
        .unwrap();
        let r = analyze(&saddle, &[0.1, 0.1]).unwrap();
        assert!(!r.is_complete());
        assert!(r.a_paper.is_some() && r.s_oracle.is_none());
        assert!(!r.flags.is_empty());

        let ou = SdeModel::parse("ou", &["-x1"], &[vec!["1"]], Params::new()).unwrap();
        assert!(matches!(analyze(&ou, &[0.0]), Err(SteadyError::OneDimensional)));
    }

    fn hurwitz_system() -> impl Strategy<Value = (DMatrix<f64>, DMatrix<f64>)> {
        (2usize..=4).prop_flat_map(|n| {
            (
                proptest::collection::vec(-1.0f64..1.0, n * n),
                proptest::collection::vec(-1.0f64..1.0, n * n),
            )
                .prop_map(move |(mv, bv)| {
                    let raw = DMatrix::from_row_slice(n, n, &mv);
                    // shift the spectrum into the left half-plane
                    let shift = raw
                        .complex_eigenvalues()
                        .iter()
                        .map(|l| l.re)
                        .fold(f64::NEG_INFINITY, f64::max);
                    let m = raw - DMatrix::identity(n, n) * (shift + 0.5);
                    let b = DMatrix::from_row_slice(n, n, &bv) + DMatrix::identity(n, n);
                    (m, &b * b.transpose())
                })
        })
    }

    proptest! {
        #[test]
        fn lyapunov_route_identities((m, d) in hurwitz_system()) {
            let sigma = lyapunov_solve(&m, &d).unwrap();
            prop_assume!(condition_number(&sigma) < 1e8);
            let s = sigma.try_inverse().unwrap();
            let scale = 1.0 + s.norm() * s.norm() * (1.0 + d.norm() + m.norm());
            let ident = m.transpose() * &s + &s * &m + &s * &d * &s;
            prop_assert!(ident.abs().max() <= 1e-9 * scale);
            let a = a_from_balance(&m, &d, &s).unwrap();
            prop_assert!((&a + a.transpose()).abs().max() <= 1e-8 * (1.0 + a.norm()));
            let ap = a_matrix_paper(&m, &d, -m.trace()).unwrap();
            prop_assert!(antisymmetry_residual(&ap) <= 1e-15);
        }

        #[test]
        fn conservative_drift_is_a_times_gradient_for_linear_systems(
            (m, d) in hurwitz_system(),
            probe in proptest::collection::vec(-2.0f64..2.0, 4),
        ) {
            let n = m.nrows();
            let sigma = lyapunov_solve(&m, &d).unwrap();
            prop_assume!(condition_number(&sigma) < 1e6);
            let s = sigma.try_inverse().unwrap();
            let a = a_from_balance(&m, &d, &s).unwrap();
            let b = d.clone().cholesky().unwrap().l();
            let entry = |v: f64| format!("({v:?})");
            let drift: Vec<String> = (0..n)
                .map(|i| (0..n).map(|k| format!("{}*x{}", entry(m[(i, k)]), k + 1)).collect::<Vec<_>>().join(" + "))
                .collect();
            let coupling: Vec<Vec<String>> = (0..n).map(|i| (0..n).map(|k| entry(b[(i, k)])).collect()).collect();
            let drift: Vec<&str> = drift.iter().map(String::as_str).collect();
            let coupling: Vec<Vec<&str>> = coupling.iter().map(|r| r.iter().map(String::as_str).collect()).collect();
            let model = SdeModel::parse("linear", &drift, &coupling, Params::new()).unwrap();
            let x = &probe[..n];
            let ac = conservative_drift(&model, &s, &vec![0.0; n], x).unwrap();
            let want = &a * &s * DVector::from_column_slice(x);
            let scale = 1.0 + a.norm() * s.norm();
            prop_assert!((&ac - &want).amax() <= 1e-9 * scale, "{ac} vs {want}");
        }
    }
}
