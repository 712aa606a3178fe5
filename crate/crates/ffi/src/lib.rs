//! C ABI for the shadowbench toolkit.
//!
//! Objects cross the boundary as opaque handles created by `sb_*_new` /
//! `sb_*_load` and released with the matching `sb_*_free`. Every fallible call
//! returns an [`SbStatus`]; on failure the message is available from
//! [`sb_last_error_message`] on the same thread. Panics never unwind into C.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use shadowbench::adv_attack::{attack, AttackConfig, SceneRef, ToyDetector};
use shadowbench::factor_bench::shape_complexity;
use shadowbench::imaging::{load_field, load_image, save_field, save_image, FieldRole};
use shadowbench::metrics::{nme, rmse_lab, Landmarks};
use shadowbench::shadow_synth::{compose_shadow, synthetic_face_depth, ShadowParams};
use shadowbench::{Error, Image, ScalarField};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    DimensionMismatch = 5,
    Domain = 6,
    Oracle = 7,
    Panic = 8,
}

/// RGB image with samples in `[0, 1]`.
pub struct SbImage(Image);

/// Single-channel field (mask or depth) with values in `[0, 1]`.
pub struct SbField(ScalarField);

/// 68 `(x, y)` landmarks.
pub struct SbLandmarks(Landmarks);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(err: &Error) -> SbStatus {
    match err {
        Error::MissingFile(_) | Error::Io { .. } => SbStatus::Io,
        Error::UnsupportedFormat { .. } | Error::CorruptStream { .. } | Error::Format(_) => SbStatus::Format,
        Error::DimensionMismatch { .. } | Error::Shape(_) => SbStatus::DimensionMismatch,
        Error::InvalidArgument(_) | Error::InvalidSeverity(_) | Error::Config(_) => SbStatus::InvalidArgument,
        Error::Oracle { .. } => SbStatus::Oracle,
        _ => SbStatus::Domain,
    }
}

struct Fail(SbStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SbStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SbStatus::Panic
        }
    }
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref()
        .ok_or_else(|| Fail(SbStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut()
        .ok_or_else(|| Fail(SbStatus::NullPointer, format!("{what} is null")))
}

unsafe fn path_arg(p: *const c_char) -> Result<String, Fail> {
    if p.is_null() {
        return Err(Fail(SbStatus::NullPointer, "path is null".into()));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| Fail(SbStatus::InvalidArgument, "path is not valid UTF-8".into()))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail(SbStatus::NullPointer, "data is null".into()));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

/// Copies the calling thread's last error message (NUL-terminated, truncated
/// to `len`) into `buf` and returns the full message length in bytes.
/// `buf` may be null to query the length.
///
/// # Safety
/// `buf` must be null or valid for `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn sb_last_error_message(buf: *mut c_char, len: usize) -> usize {
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

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates an image from `height * width * 3` interleaved RGB samples in `[0, 1]`.
///
/// # Safety
/// `data` must be valid for `len` reads; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sb_image_new(
    height: usize,
    width: usize,
    data: *const f64,
    len: usize,
    out: *mut *mut SbImage,
) -> SbStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let img = Image::new(height, width, slice_arg(data, len)?.to_vec())?;
        *out = boxed(SbImage(img));
        Ok(())
    })
}

/// Loads a PNG as an RGB image.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sb_image_load(path: *const c_char, out: *mut *mut SbImage) -> SbStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = boxed(SbImage(load_image(path_arg(path)?)?));
        Ok(())
    })
}

/// Writes an 8-bit RGB PNG.
///
/// # Safety
/// `img` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sb_image_save(img: *const SbImage, path: *const c_char) -> SbStatus {
    guard(|| {
        save_image(&borrow(img, "image")?.0, path_arg(path)?)?;
        Ok(())
    })
}

/// # Safety
/// `img` must be a live handle; `height` and `width` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sb_image_dims(img: *const SbImage, height: *mut usize, width: *mut usize) -> SbStatus {
    guard(|| {
        let (h, w) = borrow(img, "image")?.0.dims();
        *out_ptr(height, "height")? = h;
        *out_ptr(width, "width")? = w;
        Ok(())
    })
}

/// Copies the interleaved RGB samples into `buf`, which must hold exactly
/// `height * width * 3` values.
///
/// # Safety
/// `img` must be a live handle and `buf` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn sb_image_read(img: *const SbImage, buf: *mut f64, len: usize) -> SbStatus {
    guard(|| {
        let data = borrow(img, "image")?.0.data();
        if len != data.len() {
            return Err(Fail(
                SbStatus::DimensionMismatch,
                format!("buffer holds {len} values, image has {}", data.len()),
            ));
        }
        if buf.is_null() {
            return Err(Fail(SbStatus::NullPointer, "buf is null".into()));
        }
        ptr::copy_nonoverlapping(data.as_ptr(), buf, len);
        Ok(())
    })
}

/// # Safety
/// `img` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sb_image_free(img: *mut SbImage) {
    if !img.is_null() {
        drop(Box::from_raw(img));
    }
}

/// Creates a mask field from `height * width` values in `[0, 1]`.
///
/// # Safety
/// `data` must be valid for `len` reads; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sb_field_new(
    height: usize,
    width: usize,
    data: *const f64,
    len: usize,
    out: *mut *mut SbField,
) -> SbStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let field = ScalarField::new(height, width, FieldRole::Mask, slice_arg(data, len)?.to_vec())?;
        *out = boxed(SbField(field));
        Ok(())
    })
}

/// Loads a PNG as a single-channel field (colour is reduced to luminance).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sb_field_load(path: *const c_char, out: *mut *mut SbField) -> SbStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = boxed(SbField(load_field(path_arg(path)?, FieldRole::Mask)?));
        Ok(())
    })
}

/// # Safety
/// `field` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sb_field_save(field: *const SbField, path: *const c_char) -> SbStatus {
    guard(|| {
        save_field(&borrow(field, "field")?.0, path_arg(path)?)?;
        Ok(())
    })
}

/// Smooth face-shaped depth map used when no depth estimate is available.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sb_field_face_depth(height: usize, width: usize, out: *mut *mut SbField) -> SbStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = boxed(SbField(synthetic_face_depth(height, width)?));
        Ok(())
    })
}

/// # Safety
/// `field` must be a live handle; `height` and `width` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sb_field_dims(field: *const SbField, height: *mut usize, width: *mut usize) -> SbStatus {
    guard(|| {
        let (h, w) = borrow(field, "field")?.0.dims();
        *out_ptr(height, "height")? = h;
        *out_ptr(width, "width")? = w;
        Ok(())
    })
}

/// # Safety
/// `field` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sb_field_free(field: *mut SbField) {
    if !field.is_null() {
        drop(Box::from_raw(field));
    }
}

/// Creates landmarks from 136 values `x0, y0, x1, y1, ...`.
///
/// # Safety
/// `xy` must be valid for `len` reads; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sb_landmarks_new(xy: *const f64, len: usize, out: *mut *mut SbLandmarks) -> SbStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = boxed(SbLandmarks(Landmarks::from_flat(slice_arg(xy, len)?)?));
        Ok(())
    })
}

/// Loads a JSON array of 68 `[x, y]` pairs.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sb_landmarks_load(path: *const c_char, out: *mut *mut SbLandmarks) -> SbStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = boxed(SbLandmarks(Landmarks::load(path_arg(path)?)?));
        Ok(())
    })
}

/// # Safety
/// `lm` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sb_landmarks_free(lm: *mut SbLandmarks) {
    if !lm.is_null() {
        drop(Box::from_raw(lm));
    }
}

/// Composites a shadow with default matte settings and zero scattering.
/// `depth` may be null to use the built-in face depth.
///
/// # Safety
/// Handles must be live (or null where allowed); `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sb_compose_shadow(
    clean: *const SbImage,
    mask: *const SbField,
    depth: *const SbField,
    alpha: f64,
    out: *mut *mut SbImage,
) -> SbStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let clean = &borrow(clean, "clean")?.0;
        let mask = borrow(mask, "mask")?.0.clone().with_role(FieldRole::Mask);
        let depth = match depth.as_ref() {
            Some(d) => d.0.clone().with_role(FieldRole::Depth),
            None => synthetic_face_depth(clean.height(), clean.width())?,
        };
        if !alpha.is_finite() {
            return Err(Fail(SbStatus::InvalidArgument, "alpha must be finite".into()));
        }
        let params = ShadowParams::new(alpha, mask, depth)?;
        *out = boxed(SbImage(compose_shadow(clean, &params)?));
        Ok(())
    })
}

/// Root-mean-square CIELAB distance; `region` may be null for the whole image.
///
/// # Safety
/// Handles must be live (or null where allowed); `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sb_rmse_lab(
    a: *const SbImage,
    b: *const SbImage,
    region: *const SbField,
    out: *mut f64,
) -> SbStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let region = region.as_ref().map(|r| &r.0);
        *out = rmse_lab(&borrow(a, "a")?.0, &borrow(b, "b")?.0, region)?;
        Ok(())
    })
}

/// Normalised mean error in percent of the outer inter-ocular distance.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sb_nme(pred: *const SbLandmarks, truth: *const SbLandmarks, out: *mut f64) -> SbStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = nme(&borrow(pred, "pred")?.0, &borrow(truth, "truth")?.0)?;
        Ok(())
    })
}

/// Boundary irregularity of a single-component mask.
///
/// # Safety
/// `mask` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sb_shape_complexity(mask: *const SbField, out: *mut f64) -> SbStatus {
    guard(|| {
        *out_ptr(out, "out")? = shape_complexity(&borrow(mask, "mask")?.0)?;
        Ok(())
    })
}

/// Outcome of [`sb_toy_attack`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SbAttackSummary {
    pub initial_loss: f64,
    pub best_loss: f64,
    pub best_iteration: usize,
    pub alpha: f64,
    pub theta: [f64; 6],
}

/// Runs the adversarial shadow attack against the built-in toy detector
/// with default step sizes and radii. `iterations` of 0 keeps the default.
///
/// # Safety
/// Handles must be live; `out_image` and `summary` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sb_toy_attack(
    clean: *const SbImage,
    depth: *const SbField,
    truth: *const SbLandmarks,
    mask_init: *const SbField,
    weights_seed: u64,
    iterations: usize,
    out_image: *mut *mut SbImage,
    summary: *mut SbAttackSummary,
) -> SbStatus {
    guard(|| {
        let out_image = out_ptr(out_image, "out_image")?;
        let summary = out_ptr(summary, "summary")?;
        let clean = &borrow(clean, "clean")?.0;
        let depth = borrow(depth, "depth")?.0.clone().with_role(FieldRole::Depth);
        let mask = borrow(mask_init, "mask_init")?.0.clone().with_role(FieldRole::Mask);
        let truth = &borrow(truth, "truth")?.0;
        let mut cfg = AttackConfig::default();
        if iterations > 0 {
            cfg.iterations = iterations;
        }
        let scene = SceneRef {
            clean,
            depth: &depth,
            truth,
            beta: Default::default(),
            matte: Default::default(),
        };
        let result = attack(&scene, &ToyDetector::new(weights_seed), &cfg, &mask)?;
        *summary = SbAttackSummary {
            initial_loss: result.initial_loss(),
            best_loss: result.best_loss(),
            best_iteration: result.best_iteration,
            alpha: result.state.alpha,
            theta: result.state.theta.0,
        };
        *out_image = boxed(SbImage(result.image));
        Ok(())
    })
}
