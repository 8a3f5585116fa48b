//! C interface to the reconstruction library.
//!
//! Objects cross the boundary as opaque handles created by `*_load` /
//! `*_simulate` / `*_reconstruct` functions and released with the matching
//! `*_free`. Every fallible function returns a [`CrunetStatus`]; on failure
//! the message is available from [`crunet_last_error`] on the same thread.
//! Panics never unwind into the caller; they surface as
//! [`CrunetStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use candle_core::DType;
use crunet_core::data::{generate_phantom_case, load_case, Contrast, KSpaceCase, ScanMeta};
use crunet_core::inference::{reconstruct_case, zero_filled_case, TargetOrder};
use crunet_core::nn::{load_checkpoint, Model};
use crunet_core::objectives::evaluate;
use crunet_core::sampling::{Accel, Trajectory};
use crunet_core::Error;
use ndarray::Array3;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrunetStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// Inputs were rejected (bad file, shape, option value, non-UTF-8 path).
    Validation = 2,
    /// The operation failed while running.
    Runtime = 3,
    /// A panic was caught at the boundary.
    Panic = 4,
}

/// A loaded or simulated acquisition.
pub struct CrunetCase {
    inner: KSpaceCase,
}

/// A trained reconstruction model.
pub struct CrunetModel {
    inner: Model,
}

/// A magnitude image sequence `[T, H, W]` in row-major float32.
pub struct CrunetImage {
    inner: Array3<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Failure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CrunetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CrunetStatus::Ok
        }
        Ok(Err(Failure::Null(name))) => {
            set_last_error(format!("argument `{name}` is null"));
            CrunetStatus::NullArgument
        }
        Ok(Err(Failure::Lib(e))) => {
            set_last_error(e.to_string());
            if e.is_validation() {
                CrunetStatus::Validation
            } else {
                CrunetStatus::Runtime
            }
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            CrunetStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, name: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(name))
}

unsafe fn path_arg(p: *const c_char, name: &'static str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Error::validation(format!("{name}: path is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

fn write_out<T>(out: *mut *mut T, value: T, name: &'static str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null(name));
    }
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

/// Message of the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call into this library on the
/// same thread.
#[no_mangle]
pub extern "C" fn crunet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn crunet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a case directory written by `crunet simulate`.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn crunet_case_load(dir: *const c_char, out: *mut *mut CrunetCase) -> CrunetStatus {
    guard(|| {
        let dir = path_arg(dir, "dir")?;
        write_out(out, CrunetCase { inner: load_case(dir)? }, "out")
    })
}

/// Generates a noiseless synthetic cine case. `trajectory` is 0 (uniform),
/// 1 (gaussian) or 2 (pseudo-radial); `accel` is 8, 16 or 24.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn crunet_case_simulate(
    trajectory: u32,
    accel: u32,
    frames: usize,
    coils: usize,
    height: usize,
    width: usize,
    seed: u64,
    out: *mut *mut CrunetCase,
) -> CrunetStatus {
    guard(|| {
        let meta = ScanMeta {
            vendor: "Siemens".into(),
            scanner_model: "Vida".into(),
            field_strength: "3.0T".into(),
            contrast: Contrast::Cine,
            trajectory: Trajectory::from_index(trajectory as usize)?,
            accel: Accel::try_from(accel)?,
            center_id: "C001".into(),
        };
        let case = generate_phantom_case("ffi_case", &meta, frames, coils, height, width, seed, 0.0)?;
        write_out(out, CrunetCase { inner: case }, "out")
    })
}

/// Writes `(T, C, H, W)` of a case. Any output pointer may be null.
///
/// # Safety
/// `case` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn crunet_case_dims(
    case: *const CrunetCase,
    frames: *mut usize,
    coils: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> CrunetStatus {
    guard(|| {
        let (t, c, h, w) = deref(case, "case")?.inner.dims();
        for (p, v) in [(frames, t), (coils, c), (height, h), (width, w)] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `case` must be null or a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn crunet_case_free(case: *mut CrunetCase) {
    if !case.is_null() {
        drop(Box::from_raw(case));
    }
}

/// Loads a model checkpoint (`.safetensors` written by training).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn crunet_model_load(path: *const c_char, out: *mut *mut CrunetModel) -> CrunetStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let (model, _) = load_checkpoint(path, DType::F32)?;
        write_out(out, CrunetModel { inner: model }, "out")
    })
}

/// Number of cascades of a loaded model, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn crunet_model_num_cascades(model: *const CrunetModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.num_cascades())
}

/// # Safety
/// `model` must be null or a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn crunet_model_free(model: *mut CrunetModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Reconstructs every frame of `case` with sliding-window inference.
///
/// # Safety
/// `model` and `case` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn crunet_reconstruct(
    model: *const CrunetModel,
    case: *const CrunetCase,
    out: *mut *mut CrunetImage,
) -> CrunetStatus {
    guard(|| {
        let model = deref(model, "model")?;
        let case = deref(case, "case")?;
        let image = reconstruct_case(&model.inner, &case.inner, TargetOrder::Forward)?;
        write_out(out, CrunetImage { inner: image }, "out")
    })
}

/// Root-sum-of-squares image of the zero-filled measurements.
///
/// # Safety
/// `case` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn crunet_zero_filled(case: *const CrunetCase, out: *mut *mut CrunetImage) -> CrunetStatus {
    guard(|| {
        let case = deref(case, "case")?;
        write_out(out, CrunetImage { inner: zero_filled_case(&case.inner)? }, "out")
    })
}

/// Writes `(T, H, W)` of an image. Any output pointer may be null.
///
/// # Safety
/// `image` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn crunet_image_dims(
    image: *const CrunetImage,
    frames: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> CrunetStatus {
    guard(|| {
        let (t, h, w) = deref(image, "image")?.inner.dim();
        for (p, v) in [(frames, t), (height, h), (width, w)] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Pointer to the `T·H·W` row-major pixels, valid while the handle lives.
/// Null for a null handle.
///
/// # Safety
/// `image` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn crunet_image_data(image: *const CrunetImage) -> *const f32 {
    image.as_ref().map_or(ptr::null(), |i| i.inner.as_ptr())
}

/// # Safety
/// `image` must be null or a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn crunet_image_free(image: *mut CrunetImage) {
    if !image.is_null() {
        drop(Box::from_raw(image));
    }
}

/// Scores `image` against the case's reference on the central
/// `crop_fraction` of each axis.
///
/// # Safety
/// `image` and `case` must be live handles; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn crunet_evaluate(
    image: *const CrunetImage,
    case: *const CrunetCase,
    crop_fraction: f64,
    psnr: *mut f64,
    ssim: *mut f64,
    nmse: *mut f64,
) -> CrunetStatus {
    guard(|| {
        let image = deref(image, "image")?;
        let case = deref(case, "case")?;
        if psnr.is_null() || ssim.is_null() || nmse.is_null() {
            return Err(Failure::Null("psnr/ssim/nmse"));
        }
        let m = evaluate(
            image.inner.mapv(f64::from).view(),
            case.inner.ground_truth_f64().view(),
            crop_fraction,
        )?;
        *psnr = m.psnr;
        *ssim = m.ssim;
        *nmse = m.nmse;
        Ok(())
    })
}
