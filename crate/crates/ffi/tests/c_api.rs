use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use liquidseg::imaging::Image;
use liquidseg::segmentation::{SegmentationModel, UNetConfig};
use liquidseg_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 256];
    let n = unsafe { ls_last_error_message(buf.as_mut_ptr(), buf.len()) };
    assert!(n > 0);
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(ls_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn iou_and_fill() {
    let a = [1u8, 1, 0, 0];
    let b = [1u8, 0, 1, 0];
    let mut out = 0.0;
    assert_eq!(unsafe { ls_iou(a.as_ptr(), b.as_ptr(), 2, 2, &mut out) }, LsStatus::Ok);
    assert!((out - 1.0 / 3.0).abs() < 1e-12);

    // bottom half of a 10-row cup
    let mask: Vec<u8> = (0..20 * 20).map(|p| (p / 20 >= 10 && p / 20 < 15 && (5..15).contains(&(p % 20))) as u8).collect();
    let cup = LsBox { x_min: 5, y_min: 5, x_max: 14, y_max: 14 };
    let mut level = -1.0;
    assert_eq!(unsafe { ls_estimate_fill(mask.as_ptr(), 20, 20, cup, 3, &mut level) }, LsStatus::Ok);
    assert_eq!(level, 0.5);
}

#[test]
fn errors_are_reported() {
    let mut out = 0.0;
    assert_eq!(unsafe { ls_iou(ptr::null(), ptr::null(), 2, 2, &mut out) }, LsStatus::NullPointer);
    assert!(last_error().contains("null"));

    let m = [0u8; 4];
    let bad = LsBox { x_min: 1, y_min: 1, x_max: 0, y_max: 0 };
    assert_eq!(unsafe { ls_estimate_fill(m.as_ptr(), 2, 2, bad, 3, &mut out) }, LsStatus::InvalidArgument);
    let cup = LsBox { x_min: 0, y_min: 0, x_max: 1, y_max: 1 };
    assert_eq!(unsafe { ls_estimate_fill(m.as_ptr(), 2, 2, cup, 2, &mut out) }, LsStatus::InvalidArgument);
    assert!(last_error().contains("kernel"));

    let mut model = ptr::null_mut();
    let path = CString::new("/nonexistent/unet.ckpt").unwrap();
    assert_eq!(unsafe { ls_seg_model_load(path.as_ptr(), &mut model) }, LsStatus::Io);
    assert!(model.is_null());

    // truncation keeps the terminator and reports the full length
    let mut small = [0 as std::ffi::c_char; 4];
    let n = unsafe { ls_last_error_message(small.as_mut_ptr(), 4) };
    assert!(n > 3);
    assert_eq!(small[3], 0);
}

#[test]
fn controller_latches_until_reset() {
    let mut c = ptr::null_mut();
    assert_eq!(unsafe { ls_controller_new(0.5, 0.01, 1.0, 0.1, &mut c) }, LsStatus::Ok);
    let mut pour = 9u8;
    let step = |c, l, t, p: &mut u8| unsafe { ls_controller_step(c, l, t, p) };
    assert_eq!(step(c, 0.9, 0.0, &mut pour), LsStatus::Ok);
    assert_eq!(pour, 1, "initial pour ignores the reading");
    step(c, 0.2, 1.5, &mut pour);
    assert_eq!(pour, 1);
    step(c, 0.495, 1.6, &mut pour);
    assert_eq!(pour, 0);
    step(c, 0.0, 1.7, &mut pour);
    assert_eq!(pour, 0, "latched");
    assert_eq!(step(c, f64::NAN, 1.8, &mut pour), LsStatus::InvalidArgument);
    assert_eq!(unsafe { ls_controller_reset(c) }, LsStatus::Ok);
    step(c, 0.0, 1.9, &mut pour);
    assert_eq!(pour, 1);
    unsafe { ls_controller_free(c) };

    let mut bad = ptr::null_mut();
    assert_eq!(unsafe { ls_controller_new(0.5, 0.0, 1.0, 0.1, &mut bad) }, LsStatus::InvalidArgument);
    assert!(bad.is_null());
    unsafe { ls_controller_free(ptr::null_mut()) };
}

#[test]
fn background_fit_and_subtract() {
    let (h, w) = (4, 4);
    let frame: Vec<f32> = (0..h * w * 3).map(|i| 0.2 + 0.01 * (i % 5) as f32).collect();
    let frames: Vec<f32> = (0..5).flat_map(|_| frame.clone()).collect();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { ls_background_fit(frames.as_ptr(), 5, h, w, 3, 0, &mut model) }, LsStatus::Ok);
    let mut probe = frame.clone();
    probe[..3].copy_from_slice(&[0.9, 0.1, 0.1]);
    let mut mask = vec![7u8; h * w];
    assert_eq!(unsafe { ls_background_subtract(model, probe.as_ptr(), h, w, 4.0, mask.as_mut_ptr()) }, LsStatus::Ok);
    assert_eq!(mask[0], 1);
    assert!(mask[1..].iter().all(|&m| m == 0));
    assert_eq!(
        unsafe { ls_background_subtract(model, probe.as_ptr(), 2, 2, 4.0, mask.as_mut_ptr()) },
        LsStatus::DimensionMismatch
    );
    unsafe { ls_background_free(model) };
}

#[test]
fn seg_model_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let m = SegmentationModel::new(UNetConfig { width: 2, depth: 2 }, 4).unwrap();
    let path = dir.path().join("unet.ckpt");
    m.to_checkpoint(serde_json::Value::Null).save(&path).unwrap();
    let img = Image::from_clamped(16, 16, (0..16 * 16 * 3).map(|i| (i % 11) as f32 / 10.0).collect()).unwrap();
    let want = m.predict_mask(&img, 0.5).unwrap();

    let mut h = ptr::null_mut();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { ls_seg_model_load(cpath.as_ptr(), &mut h) }, LsStatus::Ok);
    let mut mask = vec![0u8; 256];
    assert_eq!(unsafe { ls_seg_model_predict(h, img.data().as_ptr(), 16, 16, 0.5, mask.as_mut_ptr()) }, LsStatus::Ok);
    assert!(mask.iter().zip(want.data()).all(|(&a, &b)| (a != 0) == b));
    // sides must be divisible by the pooling factor
    let odd = vec![0.5f32; 10 * 10 * 3];
    assert_ne!(unsafe { ls_seg_model_predict(h, odd.as_ptr(), 10, 10, 0.5, mask.as_mut_ptr()) }, LsStatus::Ok);
    unsafe { ls_seg_model_free(h) };
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/liquidseg.h");
    let text = std::fs::read_to_string(header).unwrap();
    for f in ["ls_seg_model_load", "ls_background_fit", "ls_estimate_fill", "ls_controller_step", "ls_iou"] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let Ok(out) = Command::new("cc").args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", header]).output() else {
        eprintln!("no C compiler; skipping syntax check");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
