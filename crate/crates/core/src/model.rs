//! SDE model `dX = a(X) dt + B(X) dW` with numerically differentiated
//! coefficients.
//!
//! All derivatives are central finite differences with step
//! `h = cbrt(eps) * max(1, |x_k|)`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::exprlang::{self, EvalError, Expr, Params, ParseError, Program};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("model needs n >= 1 and m >= 1 (got n = {n}, m = {m})")]
    Dimension { n: usize, m: usize },
    #[error("coupling row {row} has {got} entries, expected {expected}")]
    RaggedCoupling { row: usize, got: usize, expected: usize },
    #[error("{entry} references x{index} but the model has dimension {n}")]
    UnknownVariable { entry: String, index: usize, n: usize },
    #[error("{entry}: parameter `{name}` is not bound")]
    UnboundParameter { entry: String, name: String },
    #[error("{entry}: {source}")]
    Parse {
        entry: String,
        #[source]
        source: ParseError,
    },
    #[error("{entry}: {source}")]
    Eval {
        entry: String,
        #[source]
        source: EvalError,
    },
    #[error("state has {got} entries, model dimension is {n}")]
    StateLength { got: usize, n: usize },
}

/// `cbrt(f64::EPSILON)`.
const CBRT_EPS: f64 = 6.0554544523933395e-6;

/// Finite-difference step for coordinate value `xk`.
#[inline]
pub fn fd_step(xk: f64) -> f64 {
    CBRT_EPS * xk.abs().max(1.0)
}

/// An SDE with `n` state variables and `m` noise sources.
#[derive(Debug, Clone)]
pub struct SdeModel {
    label: String,
    n: usize,
    m: usize,
    params: Params,
    drift_src: Vec<Expr>,
    coupling_src: Vec<Expr>,
    // parameter-bound copies used for evaluation
    drift: Vec<Expr>,
    coupling: Vec<Expr>,
    drift_prog: Vec<Option<Program>>,
    coupling_prog: Vec<Option<Program>>,
}

impl SdeModel {
    /// `coupling` is given row by row: `coupling[i][k]` is `b^{ik}`.
    pub fn new(
        label: impl Into<String>,
        drift: Vec<Expr>,
        coupling: Vec<Vec<Expr>>,
        params: Params,
    ) -> Result<Self, ModelError> {
        let n = drift.len();
        let m = coupling.first().map_or(0, Vec::len);
        if n == 0 || m == 0 || coupling.len() != n {
            return Err(ModelError::Dimension {
                n,
                m: if coupling.len() != n { 0 } else { m },
            });
        }
        for (row, r) in coupling.iter().enumerate() {
            if r.len() != m {
                return Err(ModelError::RaggedCoupling {
                    row: row + 1,
                    got: r.len(),
                    expected: m,
                });
            }
        }
        let coupling_src: Vec<Expr> = coupling.into_iter().flatten().collect();

        let bind = |entry: String, e: &Expr| -> Result<Expr, ModelError> {
            let index = e.max_var_index();
            if index > n {
                return Err(ModelError::UnknownVariable { entry, index, n });
            }
            e.bind(&params).map_err(|source| match source {
                EvalError::UnboundParameter { name } => ModelError::UnboundParameter { entry, name },
                source => ModelError::Eval { entry, source },
            })
        };
        let drift_bound = drift
            .iter()
            .enumerate()
            .map(|(i, e)| bind(drift_entry(i), e))
            .collect::<Result<Vec<_>, _>>()?;
        let coupling_bound = coupling_src
            .iter()
            .enumerate()
            .map(|(idx, e)| bind(coupling_entry(idx / m, idx % m), e))
            .collect::<Result<Vec<_>, _>>()?;

        Ok(Self {
            label: label.into(),
            n,
            m,
            params,
            drift_src: drift,
            coupling_src,
            drift_prog: drift_bound.iter().map(Program::compile).collect(),
            coupling_prog: coupling_bound.iter().map(Program::compile).collect(),
            drift: drift_bound,
            coupling: coupling_bound,
        })
    }

    /// Builds a model from expression strings.
    pub fn parse(
        label: impl Into<String>,
        drift: &[&str],
        coupling: &[Vec<&str>],
        params: Params,
    ) -> Result<Self, ModelError> {
        let drift = drift
            .iter()
            .enumerate()
            .map(|(i, s)| {
                exprlang::parse(s).map_err(|source| ModelError::Parse {
                    entry: drift_entry(i),
                    source,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let coupling = coupling
            .iter()
            .enumerate()
            .map(|(i, row)| {
                row.iter()
                    .enumerate()
                    .map(|(k, s)| {
                        exprlang::parse(s).map_err(|source| ModelError::Parse {
                            entry: coupling_entry(i, k),
                            source,
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(label, drift, coupling, params)
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// State dimension `n`.
    pub fn dim(&self) -> usize {
        self.n
    }

    /// Noise dimension `m`.
    pub fn noise_dim(&self) -> usize {
        self.m
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn drift_exprs(&self) -> &[Expr] {
        &self.drift_src
    }

    /// Coupling expressions, row-major `n x m`.
    pub fn coupling_exprs(&self) -> &[Expr] {
        &self.coupling_src
    }

    fn check_state(&self, x: &[f64]) -> Result<(), ModelError> {
        if x.len() != self.n {
            return Err(ModelError::StateLength {
                got: x.len(),
                n: self.n,
            });
        }
        Ok(())
    }

    /// Writes `a(x)` into `out` (length `n`). No length checks.
    #[inline]
    pub fn drift_into(&self, x: &[f64], out: &mut [f64]) -> Result<(), ModelError> {
        for (i, o) in out.iter_mut().enumerate().take(self.n) {
            *o = match self.drift_prog[i].as_ref().and_then(|p| p.eval(x)) {
                Some(v) => v,
                None => self.drift[i].eval_bound(x).map_err(|source| ModelError::Eval {
                    entry: drift_entry(i),
                    source,
                })?,
            };
        }
        Ok(())
    }

    /// Writes `B(x)` row-major into `out` (length `n*m`). No length checks.
    #[inline]
    pub fn coupling_into(&self, x: &[f64], out: &mut [f64]) -> Result<(), ModelError> {
        for (idx, o) in out.iter_mut().enumerate().take(self.n * self.m) {
            *o = match self.coupling_prog[idx].as_ref().and_then(|p| p.eval(x)) {
                Some(v) => v,
                None => self.coupling[idx].eval_bound(x).map_err(|source| ModelError::Eval {
                    entry: coupling_entry(idx / self.m, idx % self.m),
                    source,
                })?,
            };
        }
        Ok(())
    }

    pub fn drift(&self, x: &[f64]) -> Result<DVector<f64>, ModelError> {
        self.check_state(x)?;
        let mut out = DVector::zeros(self.n);
        self.drift_into(x, out.as_mut_slice())?;
        Ok(out)
    }

    pub fn coupling(&self, x: &[f64]) -> Result<DMatrix<f64>, ModelError> {
        self.check_state(x)?;
        let mut buf = vec![0.0; self.n * self.m];
        self.coupling_into(x, &mut buf)?;
        Ok(DMatrix::from_row_slice(self.n, self.m, &buf))
    }

    /// Diffusion matrix `D = B Bᵀ`.
    pub fn diffusion(&self, x: &[f64]) -> Result<DMatrix<f64>, ModelError> {
        let b = self.coupling(x)?;
        let d = &b * b.transpose();
        // exact symmetry regardless of summation order
        Ok((&d + d.transpose()) * 0.5)
    }

    /// `∂_λ b^{iμ}` at `x`, stored at `[(i*m + μ)*n + λ]`.
    pub fn coupling_gradient(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_state(x)?;
        let mut grad = vec![0.0; self.n * self.m * self.n];
        let mut scratch = Scratch::new(self.n, self.m);
        self.coupling_gradient_into(x, &mut grad, &mut scratch)?;
        Ok(grad)
    }

    pub(crate) fn coupling_gradient_into(
        &self,
        x: &[f64],
        grad: &mut [f64],
        scratch: &mut Scratch,
    ) -> Result<(), ModelError> {
        let (n, m) = (self.n, self.m);
        scratch.point.copy_from_slice(x);
        for lambda in 0..n {
            let (xp, xm) = fd_pair(x[lambda]);
            scratch.point[lambda] = xp;
            self.coupling_into(&scratch.point, &mut scratch.b_plus)?;
            scratch.point[lambda] = xm;
            self.coupling_into(&scratch.point, &mut scratch.b_minus)?;
            scratch.point[lambda] = x[lambda];
            let width = xp - xm;
            for im in 0..n * m {
                grad[im * n + lambda] = (scratch.b_plus[im] - scratch.b_minus[im]) / width;
            }
        }
        Ok(())
    }

    /// Spurious drift in coupling form, `a_sp^i = b^{ij}_{,k} b^{kj}`.
    ///
    /// Only used to cross-check [`SdeModel::spurious_drift`]; the two agree
    /// identically for `n = 1` and for diagonal coupling.
    pub fn spurious_drift_coupling_form(&self, x: &[f64]) -> Result<DVector<f64>, ModelError> {
        let (n, m) = (self.n, self.m);
        let grad = self.coupling_gradient(x)?;
        let b = self.coupling(x)?;
        let mut out = DVector::zeros(n);
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..m {
                for k in 0..n {
                    acc += grad[(i * m + j) * n + k] * b[(k, j)];
                }
            }
            out[i] = acc;
        }
        Ok(out)
    }

    /// Spurious drift `a_sp^i = D^{ik}_{,k} / 2`, the form used by the
    /// integrators and the Fokker-Planck solver.
    pub fn spurious_drift(&self, x: &[f64]) -> Result<DVector<f64>, ModelError> {
        self.check_state(x)?;
        let mut out = DVector::zeros(self.n);
        let mut scratch = Scratch::new(self.n, self.m);
        self.spurious_drift_into(x, out.as_mut_slice(), &mut scratch)?;
        Ok(out)
    }

    pub(crate) fn spurious_drift_into(
        &self,
        x: &[f64],
        out: &mut [f64],
        scratch: &mut Scratch,
    ) -> Result<(), ModelError> {
        let (n, m) = (self.n, self.m);
        out.fill(0.0);
        scratch.point.copy_from_slice(x);
        for k in 0..n {
            let (xp, xm) = fd_pair(x[k]);
            scratch.point[k] = xp;
            self.coupling_into(&scratch.point, &mut scratch.b_plus)?;
            scratch.point[k] = xm;
            self.coupling_into(&scratch.point, &mut scratch.b_minus)?;
            scratch.point[k] = x[k];
            let width = xp - xm;
            for (i, o) in out.iter_mut().enumerate() {
                // D^{ik} = sum_j b^{ij} b^{kj}
                let mut dp = 0.0;
                let mut dm = 0.0;
                for j in 0..m {
                    dp += scratch.b_plus[i * m + j] * scratch.b_plus[k * m + j];
                    dm += scratch.b_minus[i * m + j] * scratch.b_minus[k * m + j];
                }
                *o += 0.5 * (dp - dm) / width;
            }
        }
        Ok(())
    }

    /// Drift Jacobian `M^{ik} = ∂_k a^i` by central differences.
    pub fn jacobian_drift(&self, x: &[f64]) -> Result<DMatrix<f64>, ModelError> {
        self.jacobian_drift_scaled(x, 1.0)
    }

    /// Jacobian with the finite-difference step multiplied by `step_scale`.
    pub fn jacobian_drift_scaled(&self, x: &[f64], step_scale: f64) -> Result<DMatrix<f64>, ModelError> {
        self.check_state(x)?;
        let n = self.n;
        let mut jac = DMatrix::zeros(n, n);
        let mut point = x.to_vec();
        let mut ap = vec![0.0; n];
        let mut am = vec![0.0; n];
        for k in 0..n {
            let h = fd_step(x[k]) * step_scale;
            let (xp, xm) = (x[k] + h, x[k] - h);
            point[k] = xp;
            self.drift_into(&point, &mut ap)?;
            point[k] = xm;
            self.drift_into(&point, &mut am)?;
            point[k] = x[k];
            for i in 0..n {
                jac[(i, k)] = (ap[i] - am[i]) / (xp - xm);
            }
        }
        Ok(jac)
    }

    /// Dissipation `ρ = -∇·a`.
    pub fn dissipation(&self, x: &[f64]) -> Result<f64, ModelError> {
        Ok(-self.jacobian_drift(x)?.trace())
    }
}

/// Reusable buffers for derivative evaluations.
#[derive(Debug, Clone)]
pub(crate) struct Scratch {
    point: Vec<f64>,
    b_plus: Vec<f64>,
    b_minus: Vec<f64>,
}

impl Scratch {
    pub(crate) fn new(n: usize, m: usize) -> Self {
        Self {
            point: vec![0.0; n],
            b_plus: vec![0.0; n * m],
            b_minus: vec![0.0; n * m],
        }
    }
}

#[inline]
fn fd_pair(xk: f64) -> (f64, f64) {
    let h = fd_step(xk);
    (xk + h, xk - h)
}

fn drift_entry(i: usize) -> String {
    format!("drift[{}]", i + 1)
}

fn coupling_entry(i: usize, k: usize) -> String {
    format!("coupling[{},{}]", i + 1, k + 1)
}
