//! C ABI over the markovsde core.
//!
//! Models are opaque `MsdeModel` handles created by `msde_model_from_catalog`
//! or `msde_model_from_json` and released with `msde_model_free`. Every call
//! returns an `MsdeStatus`; on failure `msde_last_error_message` describes the
//! most recent error on the calling thread. Arrays are caller-allocated and
//! matrices are row-major.

#![allow(clippy::too_many_arguments)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use markovsde::catalog::{self, ParamValues};
use markovsde::config::ModelSection;
use markovsde::fpe::{steady_1d, GridSpec};
use markovsde::sim::{self, simulate_ensemble, EnsembleSpec};
use markovsde::steady::analyze;
use markovsde::{SdeModel, StepScheme};

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MsdeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ModelError = 3,
    NumericalError = 4,
    BufferTooSmall = 5,
    Panic = 6,
}

/// Opaque model handle.
pub struct MsdeModel {
    inner: SdeModel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(MsdeStatus, String);

impl Failure {
    fn new(status: MsdeStatus, msg: impl ToString) -> Self {
        Failure(status, msg.to_string())
    }
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MsdeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            MsdeStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MsdeStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::new(MsdeStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(MsdeStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn model_arg<'a>(m: *const MsdeModel) -> Result<&'a SdeModel, Failure> {
    m.as_ref()
        .map(|m| &m.inner)
        .ok_or_else(|| Failure::new(MsdeStatus::NullPointer, "model handle is null"))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(Failure::new(MsdeStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a>(p: *mut f64, len: usize, need: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if p.is_null() {
        return Err(Failure::new(MsdeStatus::NullPointer, format!("{what} is null")));
    }
    if len < need {
        return Err(Failure::new(
            MsdeStatus::BufferTooSmall,
            format!("{what} holds {len} values, {need} needed"),
        ));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn check_dim(model: &SdeModel, len: usize, what: &str) -> Result<(), Failure> {
    if len != model.dim() {
        return Err(Failure::new(
            MsdeStatus::InvalidArgument,
            format!("{what} has length {len}, model dimension is {}", model.dim()),
        ));
    }
    Ok(())
}

fn model_err(e: impl ToString) -> Failure {
    Failure::new(MsdeStatus::ModelError, e)
}

fn numerical(e: impl ToString) -> Failure {
    Failure::new(MsdeStatus::NumericalError, e)
}

unsafe fn store_model(out: *mut *mut MsdeModel, model: SdeModel) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::new(MsdeStatus::NullPointer, "output handle pointer is null"));
    }
    *out = Box::into_raw(Box::new(MsdeModel { inner: model }));
    Ok(())
}

/// Message for the last failed call on this thread. Valid until the next
/// call on the same thread; never null.
#[no_mangle]
pub extern "C" fn msde_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn msde_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a catalog model. `params_json` may be null or a JSON object of
/// parameter overrides (numbers or expression strings).
///
/// # Safety
/// `name` and `params_json` must be null or NUL-terminated strings; `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn msde_model_from_catalog(
    name: *const c_char,
    params_json: *const c_char,
    out: *mut *mut MsdeModel,
) -> MsdeStatus {
    guard(|| {
        let name = str_arg(name, "name")?;
        let params: ParamValues = if params_json.is_null() {
            ParamValues::new()
        } else {
            serde_json::from_str(str_arg(params_json, "params_json")?)
                .map_err(|e| Failure::new(MsdeStatus::InvalidArgument, e))?
        };
        let model = catalog::build(name, &params).map_err(model_err)?;
        store_model(out, model)
    })
}

/// Builds a model from a JSON model section: either
/// `{"catalog": name, "params": {...}}` or
/// `{"label": .., "drift": [..], "coupling": [[..]], "params": {...}}`.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn msde_model_from_json(json: *const c_char, out: *mut *mut MsdeModel) -> MsdeStatus {
    guard(|| {
        let section: ModelSection =
            serde_json::from_str(str_arg(json, "json")?).map_err(|e| Failure::new(MsdeStatus::InvalidArgument, e))?;
        let model = match (&section.catalog, &section.drift, &section.coupling) {
            (Some(name), None, None) => catalog::build(name, &section.params),
            (None, Some(drift), Some(coupling)) => catalog::instantiate(
                section.label.as_deref().unwrap_or("inline"),
                drift,
                coupling,
                &section.params,
            ),
            _ => {
                return Err(Failure::new(
                    MsdeStatus::InvalidArgument,
                    "give either `catalog` or `drift` + `coupling`",
                ))
            }
        }
        .map_err(model_err)?;
        store_model(out, model)
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn msde_model_free(model: *mut MsdeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// State dimension n, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn msde_model_dim(model: *const MsdeModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.dim())
}

/// Noise dimension m, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn msde_model_noise_dim(model: *const MsdeModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.noise_dim())
}

/// Drift a(x) into `out[0..n]`.
///
/// # Safety
/// `x` must hold `n` values and `out` `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn msde_drift(
    model: *const MsdeModel,
    x: *const f64,
    n: usize,
    out: *mut f64,
    out_len: usize,
) -> MsdeStatus {
    guard(|| {
        let m = model_arg(model)?;
        check_dim(m, n, "x")?;
        let x = slice_arg(x, n, "x")?;
        let out = out_arg(out, out_len, n, "out")?;
        out[..n].copy_from_slice(m.drift(x).map_err(model_err)?.as_slice());
        Ok(())
    })
}

/// Diffusion D = B B^T at x into `out[0..n*n]`, row-major.
///
/// # Safety
/// `x` must hold `n` values and `out` `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn msde_diffusion(
    model: *const MsdeModel,
    x: *const f64,
    n: usize,
    out: *mut f64,
    out_len: usize,
) -> MsdeStatus {
    guard(|| {
        let m = model_arg(model)?;
        check_dim(m, n, "x")?;
        let x = slice_arg(x, n, "x")?;
        let out = out_arg(out, out_len, n * n, "out")?;
        let d = m.diffusion(x).map_err(model_err)?;
        for i in 0..n {
            for k in 0..n {
                out[i * n + k] = d[(i, k)];
            }
        }
        Ok(())
    })
}

/// Spurious drift (half the divergence of D) into `out[0..n]`.
///
/// # Safety
/// `x` must hold `n` values and `out` `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn msde_spurious_drift(
    model: *const MsdeModel,
    x: *const f64,
    n: usize,
    out: *mut f64,
    out_len: usize,
) -> MsdeStatus {
    guard(|| {
        let m = model_arg(model)?;
        check_dim(m, n, "x")?;
        let x = slice_arg(x, n, "x")?;
        let out = out_arg(out, out_len, n, "out")?;
        out[..n].copy_from_slice(m.spurious_drift(x).map_err(model_err)?.as_slice());
        Ok(())
    })
}

unsafe fn one_step(
    model: *const MsdeModel,
    x: *const f64,
    n: usize,
    dt: f64,
    dw: *const f64,
    m_noise: usize,
    out: *mut f64,
    out_len: usize,
    scheme: StepScheme,
) -> MsdeStatus {
    guard(|| {
        let m = model_arg(model)?;
        check_dim(m, n, "x")?;
        if m_noise != m.noise_dim() {
            return Err(Failure::new(
                MsdeStatus::InvalidArgument,
                format!("dw has length {m_noise}, noise dimension is {}", m.noise_dim()),
            ));
        }
        let x = slice_arg(x, n, "x")?;
        let dw = slice_arg(dw, m_noise, "dw")?;
        let out = out_arg(out, out_len, n, "out")?;
        let next = match scheme {
            StepScheme::QIncrement => sim::step_q(m, x, dt, dw),
            StepScheme::AlphaEuler(a) => sim::step_alpha(m, x, dt, dw, a),
        }
        .map_err(numerical)?;
        out[..n].copy_from_slice(next.as_slice());
        Ok(())
    })
}

/// One Q-increment step from x with Wiener increment `dw[0..m]`.
///
/// # Safety
/// `x` holds `n` values, `dw` holds `m_noise`, `out` holds `out_len`.
#[no_mangle]
pub unsafe extern "C" fn msde_step_q(
    model: *const MsdeModel,
    x: *const f64,
    n: usize,
    dt: f64,
    dw: *const f64,
    m_noise: usize,
    out: *mut f64,
    out_len: usize,
) -> MsdeStatus {
    one_step(model, x, n, dt, dw, m_noise, out, out_len, StepScheme::QIncrement)
}

/// One α-Euler step; α = 0, 1/2, 1 give Ito, Stratonovich, anti-Ito.
///
/// # Safety
/// `x` holds `n` values, `dw` holds `m_noise`, `out` holds `out_len`.
#[no_mangle]
pub unsafe extern "C" fn msde_step_alpha(
    model: *const MsdeModel,
    x: *const f64,
    n: usize,
    dt: f64,
    dw: *const f64,
    m_noise: usize,
    alpha: f64,
    out: *mut f64,
    out_len: usize,
) -> MsdeStatus {
    let scheme = match StepScheme::alpha(alpha) {
        Ok(s) => s,
        Err(e) => {
            set_error(&e.to_string());
            return MsdeStatus::InvalidArgument;
        }
    };
    one_step(model, x, n, dt, dw, m_noise, out, out_len, scheme)
}

/// Simulates `n_paths` paths and writes the final states of completed paths
/// row-major into `out`; `*written` receives the number of completed paths.
/// `scheme` is "q", "ito", "stratonovich", "anti-ito" or "alpha=<a>".
///
/// # Safety
/// `x0` holds `n` values, `out` holds `out_len`, `written` is writable.
#[no_mangle]
pub unsafe extern "C" fn msde_ensemble_final(
    model: *const MsdeModel,
    scheme: *const c_char,
    x0: *const f64,
    n: usize,
    t_final: f64,
    m_steps: usize,
    n_paths: usize,
    seed: u64,
    out: *mut f64,
    out_len: usize,
    written: *mut usize,
) -> MsdeStatus {
    guard(|| {
        let m = model_arg(model)?;
        check_dim(m, n, "x0")?;
        let scheme: StepScheme = str_arg(scheme, "scheme")?
            .parse()
            .map_err(|e: sim::UnknownScheme| Failure::new(MsdeStatus::InvalidArgument, e))?;
        let x0 = slice_arg(x0, n, "x0")?.to_vec();
        if written.is_null() {
            return Err(Failure::new(MsdeStatus::NullPointer, "written is null"));
        }
        let out = out_arg(out, out_len, n * n_paths, "out")?;
        let spec = EnsembleSpec::new(scheme, x0, t_final, m_steps, n_paths, seed).record_every(m_steps.max(1));
        let ens = simulate_ensemble(m, &spec).map_err(numerical)?;
        for (i, p) in ens.paths.iter().enumerate() {
            out[i * n..(i + 1) * n].copy_from_slice(&p.states[p.states.len() - n..]);
        }
        *written = ens.paths.len();
        Ok(())
    })
}

/// Steady density of a 1-D model on `n_cells` cells of [x_min, x_max]:
/// cell centers into `out_x`, density into `out_w`.
///
/// # Safety
/// `out_x` and `out_w` each hold `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn msde_steady_1d(
    model: *const MsdeModel,
    x_min: f64,
    x_max: f64,
    n_cells: usize,
    alpha: f64,
    out_x: *mut f64,
    out_w: *mut f64,
    out_len: usize,
) -> MsdeStatus {
    guard(|| {
        let m = model_arg(model)?;
        let spec = GridSpec::new(x_min, x_max, n_cells).map_err(|e| Failure::new(MsdeStatus::InvalidArgument, e))?;
        let out_x = out_arg(out_x, out_len, n_cells, "out_x")?;
        let out_w = out_arg(out_w, out_len, n_cells, "out_w")?;
        let w = steady_1d(m, spec, alpha).map_err(numerical)?;
        out_x[..n_cells].copy_from_slice(&spec.centers());
        out_w[..n_cells].copy_from_slice(w.values());
        Ok(())
    })
}

/// Fixed point near `x_guess` and the quadratic quasipotential there:
/// x* into `out_x_star[0..n]`, S (Hessian of the quasipotential) and the
/// antisymmetric A into `out_s` and `out_a` (n*n each, row-major), both from
/// the Lyapunov route. Fails for non-attracting fixed points.
///
/// # Safety
/// `x_guess` holds `n` values; `out_x_star` holds `n`, `out_s` and `out_a`
/// hold `n*n`. `out_a` may be null.
#[no_mangle]
pub unsafe extern "C" fn msde_analyze(
    model: *const MsdeModel,
    x_guess: *const f64,
    n: usize,
    out_x_star: *mut f64,
    out_s: *mut f64,
    out_a: *mut f64,
) -> MsdeStatus {
    guard(|| {
        let m = model_arg(model)?;
        check_dim(m, n, "x_guess")?;
        let guess = slice_arg(x_guess, n, "x_guess")?;
        let x_star = out_arg(out_x_star, n, n, "out_x_star")?;
        let s_out = out_arg(out_s, n * n, n * n, "out_s")?;
        let report = analyze(m, guess).map_err(numerical)?;
        let s = report
            .s_oracle
            .as_ref()
            .ok_or_else(|| numerical("fixed point is not an attractor"))?;
        x_star.copy_from_slice(report.fixed_point.x_star.as_slice());
        for i in 0..n {
            for k in 0..n {
                s_out[i * n + k] = s[(i, k)];
            }
        }
        if !out_a.is_null() {
            let a_out = std::slice::from_raw_parts_mut(out_a, n * n);
            match &report.a_oracle {
                Some(a) => {
                    for i in 0..n {
                        for k in 0..n {
                            a_out[i * n + k] = a[(i, k)];
                        }
                    }
                }
                None => a_out.fill(0.0),
            }
        }
        Ok(())
    })
}
