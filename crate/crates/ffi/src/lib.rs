//! C interface to `difreg`.
//!
//! Objects are opaque handles released with their `_free` function. Every
//! entry point returns a `DfrStatus`; on failure `dfr_last_error_message`
//! describes the error for the calling thread. Fields are row-major `double`
//! arrays, rows along x.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use difreg::actions::Action;
use difreg::baseline::{run_er_hio, ErHioConfig, Schedule};
use difreg::error::Error;
use difreg::forward::{DiffractionData, SimilarityKind};
use difreg::grid::ScalarField;
use difreg::io::{read_grid, write_grid};
use difreg::lddmm::{run_registration, KernelParams, Mode, Registration, RunConfig, Spacing};
use difreg::simkit::{recon_error, simulate_measurement, NoiseModel};
use difreg::template::{estimate_template, AmplitudeMode, TemplateShape};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DfrStatus {
    Ok = 0,
    InvalidArgument = 1,
    ShapeMismatch = 2,
    Degenerate = 3,
    Parse = 4,
    Io = 5,
    NullPointer = 6,
    Panic = 7,
}

pub const DFR_ACTION_GEOMETRIC: u32 = 0;
pub const DFR_ACTION_MASS: u32 = 1;
pub const DFR_ACTION_SQRT_MASS: u32 = 2;

pub const DFR_SIMILARITY_L2: u32 = 0;
pub const DFR_SIMILARITY_CC: u32 = 1;

pub const DFR_MODE_INDIRECT: u32 = 0;
pub const DFR_MODE_DIRECT: u32 = 1;

pub const DFR_TEMPLATE_GEOMETRIC: u32 = 0;
pub const DFR_TEMPLATE_MASS: u32 = 1;

pub const DFR_SHAPE_DISK: u32 = 0;
pub const DFR_SHAPE_RECT: u32 = 1;

/// Opaque 2-D field of doubles.
pub struct DfrField {
    inner: ScalarField,
}

/// Opaque result of a registration run.
pub struct DfrRegistration {
    reg: Registration,
    kernel: KernelParams,
}

#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct DfrNoise {
    pub max_intensity: f64,
    pub poisson: bool,
    pub quantize: bool,
    pub gaussian_std: f64,
    pub seed: u64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct DfrRunConfig {
    pub sigma: f64,
    pub eta: f64,
    pub gamma: f64,
    pub n_steps: usize,
    pub cap: f64,
    pub max_iter: usize,
    /// One of `DFR_ACTION_*`.
    pub action: u32,
    /// One of `DFR_SIMILARITY_*`.
    pub similarity: u32,
    /// One of `DFR_MODE_*`.
    pub mode: u32,
    /// Grid spacing; zero or negative selects the unit torus.
    pub spacing: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct DfrErHioConfig {
    pub beta: f64,
    pub shrinkwrap_threshold: f64,
    pub shrinkwrap_every: usize,
    pub restarts: usize,
    pub seed: u64,
    pub support_threshold: f64,
}

enum Failure {
    Core(Error),
    Null(&'static str),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type FfiResult = Result<(), Failure>;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> FfiResult) -> DfrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DfrStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_last_error(&format!("null pointer: {what}"));
            DfrStatus::NullPointer
        }
        Ok(Err(Failure::Core(e))) => {
            set_last_error(&e.to_string());
            match e {
                Error::InvalidArgument(_) => DfrStatus::InvalidArgument,
                Error::ShapeMismatch { .. } => DfrStatus::ShapeMismatch,
                Error::Degenerate(_) => DfrStatus::Degenerate,
                Error::Parse { .. } => DfrStatus::Parse,
                Error::Io { .. } => DfrStatus::Io,
            }
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("internal panic: {msg}"));
            DfrStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    unsafe { p.as_ref() }.ok_or(Failure::Null(what))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    unsafe { p.as_mut() }.ok_or(Failure::Null(what))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::Null("path"));
    }
    let s = unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Error::InvalidArgument("path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

fn boxed_field(f: ScalarField) -> *mut DfrField {
    Box::into_raw(Box::new(DfrField {
        inner: f.as_standard_layout().into_owned(),
    }))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Core(Error::InvalidArgument(msg.into()))
}

fn action_from(code: u32) -> Result<Action, Failure> {
    match code {
        DFR_ACTION_GEOMETRIC => Ok(Action::Geometric),
        DFR_ACTION_MASS => Ok(Action::MassPreserving),
        DFR_ACTION_SQRT_MASS => Ok(Action::SqrtJacobian),
        _ => Err(invalid(format!("unknown action code {code}"))),
    }
}

fn similarity_from(code: u32) -> Result<SimilarityKind, Failure> {
    match code {
        DFR_SIMILARITY_L2 => Ok(SimilarityKind::L2),
        DFR_SIMILARITY_CC => Ok(SimilarityKind::CrossCorrelation),
        _ => Err(invalid(format!("unknown similarity code {code}"))),
    }
}

fn mode_from(code: u32) -> Result<Mode, Failure> {
    match code {
        DFR_MODE_INDIRECT => Ok(Mode::Indirect),
        DFR_MODE_DIRECT => Ok(Mode::Direct),
        _ => Err(invalid(format!("unknown mode code {code}"))),
    }
}

/// Library version as a static NUL-terminated string.
#[unsafe(no_mangle)]
pub extern "C" fn dfr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread. Valid until the next
/// failing call on the same thread; empty if nothing failed yet.
#[unsafe(no_mangle)]
pub extern "C" fn dfr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// New field of `rows * cols` values copied from `data`, or zeros if `data` is null.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn dfr_field_new(
    rows: usize,
    cols: usize,
    data: *const f64,
    out: *mut *mut DfrField,
) -> DfrStatus {
    guard(|| {
        let out = unsafe { out_ptr(out, "out") }?;
        if rows == 0 || cols == 0 {
            return Err(invalid("field dimensions must be positive"));
        }
        let n = rows.checked_mul(cols).ok_or_else(|| invalid("field too large"))?;
        let f = if data.is_null() {
            ScalarField::zeros((rows, cols))
        } else {
            let values = unsafe { std::slice::from_raw_parts(data, n) }.to_vec();
            ScalarField::from_shape_vec((rows, cols), values).expect("length matches")
        };
        *out = boxed_field(f);
        Ok(())
    })
}

#[unsafe(no_mangle)]
pub unsafe extern "C" fn dfr_field_free(field: *mut DfrField) {
    if !field.is_null() {
        drop(unsafe { Box::from_raw(field) });
    }
}

/// Row count, or 0 for a null handle.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn dfr_field_rows(field: *const DfrField) -> usize {
    unsafe { field.as_ref() }.map_or(0, |f| f.inner.nrows())
}

/// Column count, or 0 for a null handle.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn dfr_field_cols(field: *const DfrField) -> usize {
    unsafe { field.as_ref() }.map_or(0, |f| f.inner.ncols())
}

/// Borrowed pointer to the row-major values; valid while the handle lives.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn dfr_field_data(field: *const DfrField) -> *const f64 {
    unsafe { field.as_ref() }.map_or(std::ptr::null(), |f| f.inner.as_ptr())
}

#[unsafe(no_mangle)]
pub unsafe extern "C" fn dfr_field_read(path: *const c_char, out: *mut *mut DfrField) -> DfrStatus {
    guard(|| {
        let out = unsafe { out_ptr(out, "out") }?;
        let path = unsafe { path_arg(path) }?;
        *out = boxed_field(read_grid(&path)?);
        Ok(())
    })
}

#[unsafe(no_mangle)]
pub unsafe extern "C" fn dfr_field_write(field: *const DfrField, path: *const c_char) -> DfrStatus {
    guard(|| {
        let f = unsafe { deref(field, "field") }?;
        let path = unsafe { path_arg(path) }?;
        write_grid(&path, &f.inner)?;
        Ok(())
    })
}

/// Noiseless defaults at peak intensity 100.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn dfr_noise_default(out: *mut DfrNoise) -> DfrStatus {
    guard(|| {
        let out = unsafe { out_ptr(out, "out") }?;
        let n = NoiseModel::noiseless(100.0);
        *out = DfrNoise {
            max_intensity: n.max_intensity,
            poisson: n.poisson,
            quantize: n.quantize,
            gaussian_std: n.gaussian_std,
            seed: n.seed,
        };
        Ok(())
    })
}

/// Diffraction amplitudes of `target` under `noise`. `out_snr` may be null.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn dfr_simulate(
    target: *const DfrField,
    noise: *const DfrNoise,
    out_data: *mut *mut DfrField,
    out_snr: *mut f64,
) -> DfrStatus {
    guard(|| {
        let target = unsafe { deref(target, "target") }?;
        let n = unsafe { deref(noise, "noise") }?;
        let out_data = unsafe { out_ptr(out_data, "out_data") }?;
        let model = NoiseModel {
            max_intensity: n.max_intensity,
            poisson: n.poisson,
            quantize: n.quantize,
            gaussian_std: n.gaussian_std,
            seed: n.seed,
        };
        let m = simulate_measurement(&target.inner, &model)?;
        if let Some(snr) = unsafe { out_snr.as_mut() } {
            *snr = m.snr;
        }
        *out_data = boxed_field(m.data.into_values());
        Ok(())
    })
}

/// Template from amplitudes. `ratio` is used only for `DFR_TEMPLATE_GEOMETRIC`,
/// `aspect` only for `DFR_SHAPE_RECT`.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn dfr_template_estimate(
    data: *const DfrField,
    mode: u32,
    ratio: f64,
    shape: u32,
    aspect: f64,
    threshold: f64,
    out: *mut *mut DfrField,
) -> DfrStatus {
    guard(|| {
        let data = unsafe { deref(data, "data") }?;
        let out = unsafe { out_ptr(out, "out") }?;
        let mode = match mode {
            DFR_TEMPLATE_GEOMETRIC => AmplitudeMode::Geometric { ratio },
            DFR_TEMPLATE_MASS => AmplitudeMode::Mass,
            _ => return Err(invalid(format!("unknown template mode {mode}"))),
        };
        let shape = match shape {
            DFR_SHAPE_DISK => TemplateShape::Disk,
            DFR_SHAPE_RECT => TemplateShape::Rectangle { aspect },
            _ => return Err(invalid(format!("unknown template shape {shape}"))),
        };
        let b = DiffractionData::new(data.inner.clone())?;
        let (image, _) = estimate_template(&b, mode, shape, threshold)?;
        *out = boxed_field(image);
        Ok(())
    })
}

#[unsafe(no_mangle)]
pub unsafe extern "C" fn dfr_run_config_default(out: *mut DfrRunConfig) -> DfrStatus {
    guard(|| {
        let out = unsafe { out_ptr(out, "out") }?;
        let d = RunConfig::default();
        *out = DfrRunConfig {
            sigma: d.sigma,
            eta: d.kernel.eta,
            gamma: d.kernel.gamma,
            n_steps: d.n_steps,
            cap: d.cap,
            max_iter: d.max_iter,
            action: DFR_ACTION_GEOMETRIC,
            similarity: DFR_SIMILARITY_CC,
            mode: DFR_MODE_INDIRECT,
            spacing: 0.0,
        };
        Ok(())
    })
}

/// Register `template` against amplitudes (indirect) or a target image (direct).
#[unsafe(no_mangle)]
pub unsafe extern "C" fn dfr_register(
    template: *const DfrField,
    data: *const DfrField,
    config: *const DfrRunConfig,
    out: *mut *mut DfrRegistration,
) -> DfrStatus {
    guard(|| {
        let template = unsafe { deref(template, "template") }?;
        let data = unsafe { deref(data, "data") }?;
        let c = unsafe { deref(config, "config") }?;
        let out = unsafe { out_ptr(out, "out") }?;
        let cfg = RunConfig {
            sigma: c.sigma,
            kernel: KernelParams {
                eta: c.eta,
                gamma: c.gamma,
            },
            n_steps: c.n_steps,
            cap: c.cap,
            max_iter: c.max_iter,
            action: action_from(c.action)?,
            similarity: similarity_from(c.similarity)?,
            mode: mode_from(c.mode)?,
            spacing: if c.spacing > 0.0 {
                Spacing::Fixed(c.spacing)
            } else {
                Spacing::UnitTorus
            },
        };
        let reg = run_registration(&template.inner, &data.inner, &cfg, |_| {})?;
        *out = Box::into_raw(Box::new(DfrRegistration {
            reg,
            kernel: cfg.kernel,
        }));
        Ok(())
    })
}

#[unsafe(no_mangle)]
pub unsafe extern "C" fn dfr_registration_free(reg: *mut DfrRegistration) {
    if !reg.is_null() {
        drop(unsafe { Box::from_raw(reg) });
    }
}

/// Copy of the reconstructed image; release with `dfr_field_free`.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn dfr_registration_reconstruction(
    reg: *const DfrRegistration,
    out: *mut *mut DfrField,
) -> DfrStatus {
    guard(|| {
        let r = unsafe { deref(reg, "reg") }?;
        let out = unsafe { out_ptr(out, "out") }?;
        *out = boxed_field(r.reg.reconstruction.clone());
        Ok(())
    })
}

/// Number of recorded iterations, or 0 for a null handle.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn dfr_registration_iterations(reg: *const DfrRegistration) -> usize {
    unsafe { reg.as_ref() }.map_or(0, |r| r.reg.trace.len())
}

/// Energies recorded at `iteration`. Any output pointer may be null.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn dfr_registration_energy(
    reg: *const DfrRegistration,
    iteration: usize,
    total: *mut f64,
    e1: *mut f64,
    e2: *mut f64,
) -> DfrStatus {
    guard(|| {
        let r = unsafe { deref(reg, "reg") }?;
        let rec = r
            .reg
            .trace
            .get(iteration)
            .ok_or_else(|| invalid(format!("iteration {iteration} out of range")))?;
        for (p, v) in [(total, rec.total), (e1, rec.e1), (e2, rec.e2)] {
            if let Some(slot) = unsafe { p.as_mut() } {
                *slot = v;
            }
        }
        Ok(())
    })
}

#[unsafe(no_mangle)]
pub unsafe extern "C" fn dfr_registration_path_distance(reg: *const DfrRegistration, out: *mut f64) -> DfrStatus {
    guard(|| {
        let r = unsafe { deref(reg, "reg") }?;
        let out = unsafe { out_ptr(out, "out") }?;
        *out = r.reg.path_distance(&r.kernel);
        Ok(())
    })
}

#[unsafe(no_mangle)]
pub unsafe extern "C" fn dfr_erhio_config_default(out: *mut DfrErHioConfig) -> DfrStatus {
    guard(|| {
        let out = unsafe { out_ptr(out, "out") }?;
        let d = ErHioConfig::default();
        *out = DfrErHioConfig {
            beta: d.beta,
            shrinkwrap_threshold: d.shrinkwrap.threshold,
            shrinkwrap_every: d.shrinkwrap.every,
            restarts: d.restarts,
            seed: d.seed,
            support_threshold: d.support_threshold,
        };
        Ok(())
    })
}

/// ER/HIO with shrinkwrap. `schedule` (e.g. "ER50HIO100x20") and `truth` may
/// be null. Writes the best restart's reconstruction and, when `truth` is
/// given and `out_error` is non-null, its error.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn dfr_erhio(
    data: *const DfrField,
    schedule: *const c_char,
    config: *const DfrErHioConfig,
    truth: *const DfrField,
    out: *mut *mut DfrField,
    out_error: *mut f64,
) -> DfrStatus {
    guard(|| {
        let data = unsafe { deref(data, "data") }?;
        let c = unsafe { deref(config, "config") }?;
        let out = unsafe { out_ptr(out, "out") }?;
        let mut cfg = ErHioConfig::default();
        if !schedule.is_null() {
            let s = unsafe { CStr::from_ptr(schedule) }
                .to_str()
                .map_err(|_| invalid("schedule is not valid UTF-8"))?;
            cfg.schedule = s.parse::<Schedule>()?;
        }
        cfg.beta = c.beta;
        cfg.shrinkwrap.threshold = c.shrinkwrap_threshold;
        cfg.shrinkwrap.every = c.shrinkwrap_every;
        cfg.restarts = c.restarts;
        cfg.seed = c.seed;
        cfg.support_threshold = c.support_threshold;
        let truth = unsafe { truth.as_ref() }.map(|t| &t.inner);
        let b = DiffractionData::new(data.inner.clone())?;
        let run = run_er_hio(&b, &cfg, truth)?;
        let best = run.best();
        if let (Some(slot), Some(e)) = (unsafe { out_error.as_mut() }, best.error) {
            *slot = e;
        }
        *out = boxed_field(best.reconstruction.clone());
        Ok(())
    })
}

/// Relative error after the best whole-pixel shift and point inversion.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn dfr_recon_error(
    recon: *const DfrField,
    truth: *const DfrField,
    out: *mut f64,
) -> DfrStatus {
    guard(|| {
        let recon = unsafe { deref(recon, "recon") }?;
        let truth = unsafe { deref(truth, "truth") }?;
        let out = unsafe { out_ptr(out, "out") }?;
        *out = recon_error(&recon.inner, &truth.inner)?;
        Ok(())
    })
}
