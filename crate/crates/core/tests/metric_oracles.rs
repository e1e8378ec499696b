#[path = "support/fidelity.rs"]
mod fidelity;

use fidelity::*;
use liquidseg::eval::{fill_category, FillCategory};

#[test]
fn iou_exhaustive_3x3() {
    assert_eq!(exhaustive_iou_mismatches(), 0);
}

#[test]
fn pouring_rmse_matches_recomputation() {
    let d = rmse_max_deviation(500, 5);
    assert!(d <= 1e-12, "{d:e}");
}

#[test]
fn fill_category_grid() {
    for i in 0..=3000 {
        let f = i as f64 / 3000.0;
        let want = if f < 1.0 / 3.0 {
            FillCategory::Low
        } else if f < 2.0 / 3.0 {
            FillCategory::Medium
        } else {
            FillCategory::High
        };
        assert_eq!(fill_category(f).unwrap(), want, "{f}");
    }
    assert!(fill_category(-0.01).is_err());
    assert!(fill_category(1.01).is_err());
    assert!(fill_category(f64::NAN).is_err());
}
