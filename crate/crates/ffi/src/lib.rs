//! C ABI over the liquidseg library.
//!
//! Every fallible call returns an [`LsStatus`]. On failure the message is
//! kept per thread and can be read with [`ls_last_error_message`]. Objects
//! are opaque handles created by `*_new`/`*_load`/`*_fit` and released by
//! the matching `*_free`. Images are row-major interleaved RGB `float`
//! buffers in `[0, 1]` of length `height * width * 3`; masks are one byte
//! per pixel, zero for background.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use liquidseg::bgsub::{fit_background_model, subtract, BackgroundModel};
use liquidseg::imaging::{iou, BinaryMask, BoundingBox, Image};
use liquidseg::nn::Checkpoint;
use liquidseg::pour::{controller_step, ControlState, ControllerConfig};
use liquidseg::postprocess::estimate_fill;
use liquidseg::segmentation::SegmentationModel;
use liquidseg::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Io = 4,
    Checkpoint = 5,
    Panic = 6,
    Other = 7,
}

/// Inclusive pixel box.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct LsBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

/// Trained UNet.
pub struct LsSegModel(SegmentationModel);

/// Per-pixel background mixture.
pub struct LsBackgroundModel(BackgroundModel);

/// Latched two-state pouring controller.
pub struct LsController {
    config: ControllerConfig,
    latched: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> LsStatus {
    match e {
        Error::InvalidArgument(_) | Error::InvalidGeometry(_) | Error::NonFinite(_) | Error::Config { .. } => {
            LsStatus::InvalidArgument
        }
        Error::DimensionMismatch { .. } => LsStatus::DimensionMismatch,
        Error::Io { .. } | Error::Image { .. } | Error::MissingPrerequisite { .. } => LsStatus::Io,
        Error::Checkpoint(_) => LsStatus::Checkpoint,
        _ => LsStatus::Other,
    }
}

enum Fail {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

/// Run `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> LsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LsStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            LsStatus::NullPointer
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            LsStatus::Panic
        }
    }
}

fn nonnull<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    // SAFETY: caller promises `p` is null or valid for reads.
    unsafe { p.as_ref() }.ok_or(Fail::Null(what))
}

fn nonnull_mut<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    // SAFETY: caller promises `p` is null or valid and unaliased.
    unsafe { p.as_mut() }.ok_or(Fail::Null(what))
}

fn pixels(h: usize, w: usize) -> Result<usize, Fail> {
    h.checked_mul(w)
        .filter(|&n| n > 0)
        .ok_or_else(|| Fail::Lib(Error::InvalidArgument(format!("bad image size {h}x{w}"))))
}

fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    // SAFETY: non-null, caller promises `len` readable elements.
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

fn slice_mut<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    // SAFETY: non-null, caller promises `len` writable elements.
    Ok(unsafe { std::slice::from_raw_parts_mut(p, len) })
}

fn read_image(rgb: *const f32, h: usize, w: usize) -> Result<Image, Fail> {
    let n = pixels(h, w)?;
    Ok(Image::new(h, w, slice(rgb, n * 3, "rgb")?.to_vec())?)
}

fn read_mask(mask: *const u8, h: usize, w: usize) -> Result<BinaryMask, Fail> {
    let n = pixels(h, w)?;
    Ok(BinaryMask::new(h, w, slice(mask, n, "mask")?.iter().map(|&b| b != 0).collect())?)
}

fn write_mask(m: &BinaryMask, out: *mut u8) -> Result<(), Fail> {
    let dst = slice_mut(out, m.data().len(), "out_mask")?;
    for (d, &v) in dst.iter_mut().zip(m.data()) {
        *d = v as u8;
    }
    Ok(())
}

/// Copy the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `cap`). Returns the full message length in
/// bytes, excluding the terminator.
///
/// # Safety
/// `buf` must be null or valid for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn ls_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ls_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load a segmentation checkpoint written by `liquidseg train-seg`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ls_seg_model_load(path: *const c_char, out: *mut *mut LsSegModel) -> LsStatus {
    guard(|| {
        let out = nonnull_mut(out, "out")?;
        *out = ptr::null_mut();
        if path.is_null() {
            return Err(Fail::Null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Error::InvalidArgument("path is not UTF-8".into()))?;
        let model = SegmentationModel::from_checkpoint(&Checkpoint::load(Path::new(path))?)?;
        *out = Box::into_raw(Box::new(LsSegModel(model)));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`ls_seg_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ls_seg_model_free(model: *mut LsSegModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Threshold the UNet probability map. `out_mask` receives `height * width`
/// bytes.
///
/// # Safety
/// Pointers must be valid for the sizes described in the crate docs.
#[no_mangle]
pub unsafe extern "C" fn ls_seg_model_predict(
    model: *const LsSegModel,
    rgb: *const f32,
    height: usize,
    width: usize,
    threshold: f64,
    out_mask: *mut u8,
) -> LsStatus {
    guard(|| {
        let model = nonnull(model, "model")?;
        let img = read_image(rgb, height, width)?;
        write_mask(&model.0.predict_mask(&img, threshold)?, out_mask)
    })
}

/// Fit a background model from `num_frames` consecutive empty-scene frames.
///
/// # Safety
/// `frames` must hold `num_frames * height * width * 3` floats; `out` must
/// be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ls_background_fit(
    frames: *const f32,
    num_frames: usize,
    height: usize,
    width: usize,
    max_components: usize,
    seed: u64,
    out: *mut *mut LsBackgroundModel,
) -> LsStatus {
    guard(|| {
        let out = nonnull_mut(out, "out")?;
        *out = ptr::null_mut();
        let n = pixels(height, width)? * 3;
        let total = n
            .checked_mul(num_frames)
            .ok_or_else(|| Error::InvalidArgument("frame buffer too large".into()))?;
        let data = slice(frames, total, "frames")?;
        let imgs = data
            .chunks(n)
            .map(|c| Image::new(height, width, c.to_vec()))
            .collect::<liquidseg::Result<Vec<_>>>()?;
        let model = fit_background_model(&imgs, max_components, seed)?;
        *out = Box::into_raw(Box::new(LsBackgroundModel(model)));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`ls_background_fit`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ls_background_free(model: *mut LsBackgroundModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Foreground mask: pixels farther than `threshold_sigma` from every
/// background component.
///
/// # Safety
/// Pointers must be valid for the sizes described in the crate docs.
#[no_mangle]
pub unsafe extern "C" fn ls_background_subtract(
    model: *const LsBackgroundModel,
    rgb: *const f32,
    height: usize,
    width: usize,
    threshold_sigma: f64,
    out_mask: *mut u8,
) -> LsStatus {
    guard(|| {
        let model = nonnull(model, "model")?;
        let img = read_image(rgb, height, width)?;
        write_mask(&subtract(&model.0, &img, threshold_sigma)?, out_mask)
    })
}

/// Intersection over union of two masks of the same size.
///
/// # Safety
/// `a` and `b` must hold `height * width` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ls_iou(a: *const u8, b: *const u8, height: usize, width: usize, out: *mut f64) -> LsStatus {
    guard(|| {
        let out = nonnull_mut(out, "out")?;
        *out = iou(&read_mask(a, height, width)?, &read_mask(b, height, width)?)?;
        Ok(())
    })
}

/// Fill level of `mask` inside the cup box after opening with a
/// `kernel x kernel` square and keeping the largest component.
///
/// # Safety
/// `mask` must hold `height * width` bytes; `out_level` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ls_estimate_fill(
    mask: *const u8,
    height: usize,
    width: usize,
    cup: LsBox,
    kernel: usize,
    out_level: *mut f64,
) -> LsStatus {
    guard(|| {
        let out = nonnull_mut(out_level, "out_level")?;
        let m = read_mask(mask, height, width)?;
        let bbox = BoundingBox::new(cup.x_min, cup.y_min, cup.x_max, cup.y_max)?;
        *out = estimate_fill(&m, &bbox, kernel)?.level;
        Ok(())
    })
}

/// New controller with the default tilt dynamics.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn ls_controller_new(
    l_target: f64,
    epsilon: f64,
    initial_pour_duration: f64,
    loop_period: f64,
    out: *mut *mut LsController,
) -> LsStatus {
    guard(|| {
        let out = nonnull_mut(out, "out")?;
        *out = ptr::null_mut();
        let config = ControllerConfig { l_target, epsilon, initial_pour_duration, loop_period, ..Default::default() };
        config.validate()?;
        *out = Box::into_raw(Box::new(LsController { config, latched: false }));
        Ok(())
    })
}

/// # Safety
/// `ctl` must be null or a handle from [`ls_controller_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ls_controller_free(ctl: *mut LsController) {
    if !ctl.is_null() {
        drop(Box::from_raw(ctl));
    }
}

/// One tick at time `t` with fill reading `l_hat`. Writes 1 to `out_pouring`
/// to keep pouring, 0 to stop. Once stopped the controller stays stopped
/// until [`ls_controller_reset`].
///
/// # Safety
/// `ctl` must be a live handle; `out_pouring` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ls_controller_step(ctl: *mut LsController, l_hat: f64, t: f64, out_pouring: *mut u8) -> LsStatus {
    guard(|| {
        let ctl = nonnull_mut(ctl, "ctl")?;
        let out = nonnull_mut(out_pouring, "out_pouring")?;
        if !(l_hat.is_finite() && t.is_finite()) {
            return Err(Error::NonFinite("controller input").into());
        }
        let (cmd, latch) = controller_step(l_hat, t, &ctl.config, ctl.latched);
        ctl.latched = latch;
        *out = (cmd == ControlState::Pouring) as u8;
        Ok(())
    })
}

/// Clear the stop latch for a new episode.
///
/// # Safety
/// `ctl` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ls_controller_reset(ctl: *mut LsController) -> LsStatus {
    guard(|| {
        nonnull_mut(ctl, "ctl")?.latched = false;
        Ok(())
    })
}
