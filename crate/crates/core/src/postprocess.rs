//! Mask clean-up and fill-level estimation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{bounding_box_of, BinaryMask, BoundingBox};

pub const DEFAULT_KERNEL: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FillEstimate {
    /// Liquid height in pixels, measured up from the cup bottom.
    pub liquid_height: usize,
    pub cup_height: usize,
    pub level: f64,
    #[serde(skip)]
    pub filtered_mask: Option<BinaryMask>,
}

fn check_kernel(kernel: usize) -> Result<usize> {
    if kernel == 0 || kernel % 2 == 0 {
        return Err(Error::InvalidArgument(format!("kernel must be odd and >= 1, got {kernel}")));
    }
    Ok(kernel / 2)
}

/// Separable min/max filter along one axis. `fill` is the value assumed
/// outside the image.
fn filter_1d(mask: &BinaryMask, r: usize, horizontal: bool, erode: bool) -> BinaryMask {
    let (h, w) = (mask.height(), mask.width());
    BinaryMask::from_fn(h, w, |y, x| {
        let (pos, len) = if horizontal { (x, w) } else { (y, h) };
        let lo = pos.saturating_sub(r);
        let hi = (pos + r).min(len - 1);
        // erosion treats outside as true, dilation ignores it
        let mut window = (lo..=hi).map(|i| if horizontal { mask.get(y, i) } else { mask.get(i, x) });
        if erode {
            window.all(|v| v)
        } else {
            window.any(|v| v)
        }
    })
}

pub fn erode(mask: &BinaryMask, kernel: usize) -> Result<BinaryMask> {
    let r = check_kernel(kernel)?;
    Ok(filter_1d(&filter_1d(mask, r, true, true), r, false, true))
}

pub fn dilate(mask: &BinaryMask, kernel: usize) -> Result<BinaryMask> {
    let r = check_kernel(kernel)?;
    Ok(filter_1d(&filter_1d(mask, r, true, false), r, false, false))
}

/// Erosion followed by dilation with a `kernel x kernel` square.
pub fn morphological_open(mask: &BinaryMask, kernel: usize) -> Result<BinaryMask> {
    dilate(&erode(mask, kernel)?, kernel)
}

/// Keep the largest 4-connected component. Ties go to the component whose
/// first pixel comes first in row-major order.
pub fn largest_component(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = (mask.height(), mask.width());
    let mut label = vec![0u32; h * w];
    let mut best = (0usize, 0u32);
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask.data()[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        stack.push(start);
        let mut size = 0;
        while let Some(p) = stack.pop() {
            size += 1;
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if mask.data()[q] && label[q] == 0 {
                    label[q] = next;
                    stack.push(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
        if size > best.0 {
            best = (size, next);
        }
    }
    let keep = best.1;
    BinaryMask::new(h, w, label.iter().map(|&l| keep != 0 && l == keep).collect()).expect("same dims")
}

/// Fill level of `mask` inside `cup_bbox`: restrict, open, keep the largest
/// component, and measure its top edge against the cup bottom.
pub fn estimate_fill(mask: &BinaryMask, cup_bbox: &BoundingBox, kernel: usize) -> Result<FillEstimate> {
    if cup_bbox.y_max < cup_bbox.y_min || cup_bbox.x_max < cup_bbox.x_min {
        return Err(Error::InvalidGeometry(format!("degenerate cup box {cup_bbox:?}")));
    }
    if !cup_bbox.fits_in(mask.height(), mask.width()) {
        return Err(Error::InvalidGeometry(format!(
            "cup box {cup_bbox:?} outside {}x{} mask",
            mask.height(),
            mask.width()
        )));
    }
    let cup_height = cup_bbox.height();
    let filtered = largest_component(&morphological_open(&mask.restricted_to(cup_bbox), kernel)?);
    let liquid_height = match bounding_box_of(&filtered) {
        Some(b) => cup_bbox.y_max - b.y_min + 1,
        None => 0,
    };
    let level = (liquid_height as f64 / cup_height as f64).clamp(0.0, 1.0);
    Ok(FillEstimate {
        liquid_height: liquid_height.min(cup_height),
        cup_height,
        level,
        filtered_mask: Some(filtered),
    })
}
