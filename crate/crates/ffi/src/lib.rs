//! C ABI over `squeezesim`.
//!
//! Every function returns an [`SqzStatus`]; results go through out-pointers.
//! On failure the message is kept per thread and can be copied out with
//! [`sqz_last_error_message`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use squeezesim::calibration::threshold_for_policy;
use squeezesim::config::RunConfig;
use squeezesim::model::{escape_efficiency, max_onchip_squeezing_db, DetectionChain, ResonatorModel};
use squeezesim::spectra::{
    extrema_for_state, homodyne_variance_with, output_covariance, pair_scattering, power_sweep, SweepOptions,
};
use squeezesim::steady::{select_branch, solve_with_policy, BranchPolicy, DetuningPolicy};
use squeezesim::trace::{detect_resonances, fit_lorentzian, FitOptions, TransmissionTrace};
use squeezesim::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SqzStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    AboveThreshold = 3,
    ThresholdUnreachable = 4,
    Config = 5,
    FitFailed = 6,
    BufferTooSmall = 7,
    Io = 8,
    Panic = 9,
    Internal = 10,
}

/// Opaque simulator handle.
pub struct SqzSimulator {
    model: ResonatorModel,
    chain: DetectionChain,
    detuning: DetuningPolicy,
    branch: BranchPolicy,
    mode_index: i32,
}

/// Plain parameter set for [`sqz_simulator_new`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SqzParams {
    pub wavelength_nm: f64,
    pub q_intrinsic: f64,
    pub q_loaded: f64,
    pub fsr_hz: f64,
    /// rad/s
    pub d2: f64,
    /// rad/s
    pub g0: f64,
    /// Fixed pump detuning in units of the loaded linewidth.
    pub delta_over_kappa: f64,
    pub eta_total: f64,
    pub mode_index: i32,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SqzExtrema {
    pub s_min_db: f64,
    pub s_max_db: f64,
    pub theta_opt: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SqzSweepPoint {
    pub power_w: f64,
    pub rho: f64,
    /// NaN when above threshold.
    pub s_min_db: f64,
    pub s_max_db: f64,
    pub above_threshold: bool,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SqzFit {
    pub center_nm: f64,
    pub linewidth_pm: f64,
    pub extinction: f64,
    pub q_loaded: f64,
    pub q_intrinsic: f64,
    pub q_coupling: f64,
    pub eta: f64,
    pub fit_rms: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> SqzStatus {
    match e {
        Error::Domain(_) | Error::InsufficientData(_) | Error::GridMismatch(_) | Error::EmptyRoots => {
            SqzStatus::InvalidArgument
        }
        Error::AboveThreshold { .. } => SqzStatus::AboveThreshold,
        Error::ThresholdUnreachable(_) => SqzStatus::ThresholdUnreachable,
        Error::Config { .. } | Error::Parse { .. } => SqzStatus::Config,
        Error::FitNonConvergence { .. } => SqzStatus::FitFailed,
        Error::Io(_) | Error::Json(_) => SqzStatus::Io,
        _ => SqzStatus::Internal,
    }
}

/// Runs `f`, recording any error or panic.
fn guard(f: impl FnOnce() -> Result<(), (SqzStatus, String)>) -> SqzStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SqzStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_error(format!("panic: {msg}"));
            SqzStatus::Panic
        }
    }
}

trait IntoFfi<T> {
    fn ffi(self) -> Result<T, (SqzStatus, String)>;
}

impl<T> IntoFfi<T> for squeezesim::Result<T> {
    fn ffi(self) -> Result<T, (SqzStatus, String)> {
        self.map_err(|e| (status_of(&e), e.to_string()))
    }
}

fn null(what: &str) -> (SqzStatus, String) {
    (SqzStatus::NullPointer, format!("{what} is null"))
}

/// Copies the last error of this thread into `buf` (NUL-terminated,
/// truncated to fit) and returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn sqz_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// # Safety
/// `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn sqz_escape_efficiency(q_intrinsic: f64, q_loaded: f64, out: *mut f64) -> SqzStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let v = escape_efficiency(q_intrinsic, q_loaded).ffi()?;
        unsafe { *out = v };
        Ok(())
    })
}

/// # Safety
/// `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn sqz_max_onchip_squeezing_db(eta: f64, out: *mut f64) -> SqzStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let v = max_onchip_squeezing_db(eta).ffi()?;
        unsafe { *out = v };
        Ok(())
    })
}

/// Builds a simulator with a fixed detuning and the adiabatic-upsweep branch.
///
/// # Safety
/// `params` must point to a valid [`SqzParams`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sqz_simulator_new(params: *const SqzParams, out: *mut *mut SqzSimulator) -> SqzStatus {
    guard(|| {
        if params.is_null() || out.is_null() {
            return Err(null("params or out"));
        }
        let p = *params;
        let base = ResonatorModel::from_quality_factors(p.wavelength_nm * 1e-9, p.q_intrinsic, p.q_loaded, p.fsr_hz)
            .ffi()?;
        let model = base.with_delta(p.delta_over_kappa * base.kappa()).with_d2(p.d2).with_g0(p.g0);
        model.validate().ffi()?;
        if p.mode_index == 0 {
            return Err((SqzStatus::InvalidArgument, "mode_index must be nonzero".into()));
        }
        let chain = DetectionChain::lumped(model.escape_efficiency(), p.eta_total).ffi()?;
        let sim = SqzSimulator {
            model,
            chain,
            detuning: DetuningPolicy::Fixed,
            branch: BranchPolicy::AdiabaticUpsweep,
            mode_index: p.mode_index,
        };
        *out = Box::into_raw(Box::new(sim));
        Ok(())
    })
}

/// Builds a simulator from the text of a TOML run configuration (g0
/// calibration included).
///
/// # Safety
/// `toml` must be a NUL-terminated UTF-8 string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sqz_simulator_from_config(toml: *const c_char, out: *mut *mut SqzSimulator) -> SqzStatus {
    guard(|| {
        if toml.is_null() || out.is_null() {
            return Err(null("toml or out"));
        }
        let text = CStr::from_ptr(toml)
            .to_str()
            .map_err(|e| (SqzStatus::InvalidArgument, format!("configuration is not UTF-8: {e}")))?;
        let resolved = RunConfig::from_toml_str(text).and_then(|c| c.resolve()).ffi()?;
        let sim = SqzSimulator {
            model: resolved.model,
            chain: resolved.chain,
            detuning: resolved.detuning,
            branch: resolved.branch,
            mode_index: resolved.mode_index,
        };
        *out = Box::into_raw(Box::new(sim));
        Ok(())
    })
}

/// # Safety
/// `sim` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sqz_simulator_free(sim: *mut SqzSimulator) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}

/// Calibrated (or given) g0 of the handle, rad/s.
///
/// # Safety
/// `sim` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sqz_simulator_g0(sim: *const SqzSimulator, out: *mut f64) -> SqzStatus {
    guard(|| {
        let sim = sim.as_ref().ok_or_else(|| null("sim"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = sim.model.g0;
        Ok(())
    })
}

/// Threshold power (W) and intracavity photon number of the pair.
///
/// # Safety
/// `sim` must be a live handle; the out-pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn sqz_threshold(sim: *const SqzSimulator, power_w: *mut f64, rho: *mut f64) -> SqzStatus {
    guard(|| {
        let sim = sim.as_ref().ok_or_else(|| null("sim"))?;
        if power_w.is_null() || rho.is_null() {
            return Err(null("power_w or rho"));
        }
        let th = threshold_for_policy(&sim.model, sim.mode_index, sim.detuning).ffi()?;
        *power_w = th.power;
        *rho = th.rho;
        Ok(())
    })
}

fn covariance_at(
    sim: &SqzSimulator,
    power: f64,
    omega: f64,
) -> Result<(ResonatorModel, squeezesim::steady::SteadyState), (SqzStatus, String)> {
    let (model, roots) = solve_with_policy(&sim.model, power, sim.detuning).ffi()?;
    let state = select_branch(&roots, sim.branch).ffi()?;
    // surfaces AboveThreshold before any covariance is formed
    pair_scattering(&model, &state, sim.mode_index, omega).ffi()?;
    Ok((model, state))
}

/// Detected homodyne variance (shot noise = 1) at LO phase `theta`.
///
/// # Safety
/// `sim` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sqz_variance(
    sim: *const SqzSimulator,
    power_w: f64,
    omega: f64,
    theta: f64,
    out: *mut f64,
) -> SqzStatus {
    guard(|| {
        let sim = sim.as_ref().ok_or_else(|| null("sim"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let (model, state) = covariance_at(sim, power_w, omega)?;
        let cov = output_covariance(&pair_scattering(&model, &state, sim.mode_index, omega).ffi()?, &sim.chain).ffi()?;
        *out = homodyne_variance_with(&cov, theta, &sim.chain.lo);
        Ok(())
    })
}

/// Squeezed and anti-squeezed levels (signed dB) and the optimal LO phase.
///
/// # Safety
/// `sim` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sqz_quadratures(
    sim: *const SqzSimulator,
    power_w: f64,
    omega: f64,
    out: *mut SqzExtrema,
) -> SqzStatus {
    guard(|| {
        let sim = sim.as_ref().ok_or_else(|| null("sim"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let (model, state) = covariance_at(sim, power_w, omega)?;
        let e = extrema_for_state(&model, &state, sim.mode_index, &sim.chain, omega).ffi()?;
        *out = SqzExtrema {
            s_min_db: e.s_min_db,
            s_max_db: e.s_max_db,
            theta_opt: e.theta_opt,
        };
        Ok(())
    })
}

/// Power sweep; `out` receives `n` points in input order.
///
/// # Safety
/// `powers_w` must point to `n` readable doubles and `out` to `n` writable
/// points (either may be null when `n == 0`).
#[no_mangle]
pub unsafe extern "C" fn sqz_sweep(
    sim: *const SqzSimulator,
    powers_w: *const f64,
    n: usize,
    omega: f64,
    out: *mut SqzSweepPoint,
) -> SqzStatus {
    guard(|| {
        let sim = sim.as_ref().ok_or_else(|| null("sim"))?;
        if n == 0 {
            return Ok(());
        }
        if powers_w.is_null() || out.is_null() {
            return Err(null("powers_w or out"));
        }
        let powers = std::slice::from_raw_parts(powers_w, n);
        let opts = SweepOptions {
            branch: sim.branch,
            detuning: sim.detuning,
        };
        let points = power_sweep(&sim.model, &sim.chain, powers, sim.mode_index, omega, &opts).ffi()?;
        let dst = std::slice::from_raw_parts_mut(out, n);
        for (d, p) in dst.iter_mut().zip(points) {
            *d = SqzSweepPoint {
                power_w: p.power,
                rho: p.rho,
                s_min_db: p.s_min_db.unwrap_or(f64::NAN),
                s_max_db: p.s_max_db.unwrap_or(f64::NAN),
                above_threshold: p.above_threshold,
            };
        }
        Ok(())
    })
}

/// Detects and fits every resonance of a transmission trace. `count`
/// receives the number of fits; if it exceeds `capacity` nothing is written
/// to `out` and `BufferTooSmall` is returned. Resonances whose fit fails
/// are skipped.
///
/// # Safety
/// `wavelength_nm` and `transmission` must point to `n` readable doubles,
/// `out` to `capacity` writable fits, `count` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sqz_fit_trace(
    wavelength_nm: *const f64,
    transmission: *const f64,
    n: usize,
    min_prominence: f64,
    min_spacing_nm: f64,
    out: *mut SqzFit,
    capacity: usize,
    count: *mut usize,
) -> SqzStatus {
    guard(|| {
        if wavelength_nm.is_null() || transmission.is_null() || count.is_null() {
            return Err(null("wavelength_nm, transmission or count"));
        }
        let wl = std::slice::from_raw_parts(wavelength_nm, n).to_vec();
        let tr = std::slice::from_raw_parts(transmission, n).to_vec();
        let trace = TransmissionTrace::new(wl, tr).ffi()?;
        let opts = FitOptions::default();
        let fits: Vec<SqzFit> = detect_resonances(&trace, min_prominence, min_spacing_nm)
            .iter()
            .filter_map(|w| fit_lorentzian(&trace, w, &opts).ok())
            .map(|f| SqzFit {
                center_nm: f.center,
                linewidth_pm: f.linewidth_fwhm,
                extinction: f.extinction,
                q_loaded: f.q_l,
                q_intrinsic: f.q_i,
                q_coupling: f.q_c,
                eta: f.eta,
                fit_rms: f.fit_rms,
            })
            .collect();
        *count = fits.len();
        if fits.len() > capacity {
            return Err((
                SqzStatus::BufferTooSmall,
                format!("{} fits do not fit in {capacity} slots", fits.len()),
            ));
        }
        if !fits.is_empty() {
            if out.is_null() {
                return Err(null("out"));
            }
            std::slice::from_raw_parts_mut(out, fits.len()).copy_from_slice(&fits);
        }
        Ok(())
    })
}
