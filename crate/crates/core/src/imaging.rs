//! Image, mask and box primitives shared by every stage.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// RGB image, channel-last, every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    /// Values outside `[0, 1]` (or non-finite) are rejected.
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!("empty image {height}x{width}")));
        }
        if data.len() != height * width * Self::CHANNELS {
            return Err(Error::dims(
                format!("{} values for {height}x{width}x3", height * width * 3),
                data.len(),
            ));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    /// Build from arbitrary floats, clamping into `[0, 1]` (NaN becomes 0).
    pub fn from_clamped(height: usize, width: usize, mut data: Vec<f32>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Channel-first copy (`[3, h, w]`), the layout the networks consume.
    pub fn to_chw(&self) -> Vec<f32> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; 3 * hw];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * hw + p] = px[c];
            }
        }
        out
    }

    /// Inverse of [`Image::to_chw`]; values are clamped into `[0, 1]`.
    pub fn from_chw(height: usize, width: usize, chw: &[f32]) -> Result<Self> {
        let hw = height * width;
        if chw.len() != 3 * hw {
            return Err(Error::dims(3 * hw, chw.len()));
        }
        let mut data = vec![0.0; 3 * hw];
        for p in 0..hw {
            for c in 0..3 {
                data[p * 3 + c] = chw[c * hw + p];
            }
        }
        Self::from_clamped(height, width, data)
    }

    /// Mean absolute per-value difference.
    pub fn mean_abs_diff(&self, other: &Image) -> Result<f64> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::dims(
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", other.height, other.width),
            ));
        }
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        Ok(s / self.data.len() as f64)
    }

    /// 8-bit RGB PNG; values are rounded to the nearest level.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| (v * 255.0).round() as u8).collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer sized from dimensions")
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image { path: path.into(), source })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image { path: path.into(), source })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
        Self::new(h as usize, w as usize, data)
    }
}

/// Boolean liquid mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dims(height * width, data.len()));
        }
        Ok(Self { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![false; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn same_dims(&self, other: &BinaryMask) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::dims(
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", other.height, other.width),
            ));
        }
        Ok(())
    }

    /// `true` when every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    /// Pixel-wise AND with the box region.
    pub fn restricted_to(&self, bbox: &BoundingBox) -> BinaryMask {
        BinaryMask::from_fn(self.height, self.width, |y, x| self.get(y, x) && bbox.contains(x, y))
    }

    /// 8-bit grayscale PNG, 0 = background, 255 = liquid.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| if v { 255 } else { 0 }).collect();
        image::GrayImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer sized from dimensions")
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image { path: path.into(), source })
    }

    /// Levels of 128 and above count as liquid.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image { path: path.into(), source })?
            .to_luma8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|b| b >= 128).collect();
        Self::new(h as usize, w as usize, data)
    }
}

/// Axis-aligned box with inclusive pixel coordinates, `y` growing downward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BoundingBox {
    pub fn new(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Result<Self> {
        if x_min > x_max || y_min > y_max {
            return Err(Error::InvalidGeometry(format!(
                "box ({x_min},{y_min})-({x_max},{y_max}) is inverted"
            )));
        }
        Ok(Self { x_min, y_min, x_max, y_max })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self { x_min: 0, y_min: 0, x_max: width - 1, y_max: height - 1 }
    }

    pub fn width(&self) -> usize {
        self.x_max - self.x_min + 1
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min + 1
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x_min..=self.x_max).contains(&x) && (self.y_min..=self.y_max).contains(&y)
    }

    pub fn fits_in(&self, height: usize, width: usize) -> bool {
        self.x_min <= self.x_max && self.y_min <= self.y_max && self.x_max < width && self.y_max < height
    }
}

/// Intersection over union. Two empty masks agree perfectly (1.0).
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.same_dims(b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Crop `bbox` grown by `padding` on every side, clamped to the image.
pub fn crop(img: &Image, bbox: &BoundingBox, padding: usize) -> Result<Image> {
    if !bbox.fits_in(img.height, img.width) {
        return Err(Error::InvalidGeometry(format!(
            "box {bbox:?} outside {}x{} image",
            img.height, img.width
        )));
    }
    let region = padded_box(bbox, padding, img.height, img.width);
    let mut data = Vec::with_capacity(region.width() * region.height() * 3);
    for y in region.y_min..=region.y_max {
        let row = (y * img.width + region.x_min) * 3;
        data.extend_from_slice(&img.data[row..row + region.width() * 3]);
    }
    Image::new(region.height(), region.width(), data)
}

/// `bbox` grown by `padding`, clamped to `height x width`.
pub fn padded_box(bbox: &BoundingBox, padding: usize, height: usize, width: usize) -> BoundingBox {
    BoundingBox {
        x_min: bbox.x_min.saturating_sub(padding),
        y_min: bbox.y_min.saturating_sub(padding),
        x_max: (bbox.x_max + padding).min(width - 1),
        y_max: (bbox.y_max + padding).min(height - 1),
    }
}

/// Tightest box around the set pixels, or `None` for an empty mask.
pub fn bounding_box_of(mask: &BinaryMask) -> Option<BoundingBox> {
    let mut bbox: Option<BoundingBox> = None;
    for y in 0..mask.height {
        for x in 0..mask.width {
            if !mask.get(y, x) {
                continue;
            }
            bbox = Some(match bbox {
                None => BoundingBox { x_min: x, y_min: y, x_max: x, y_max: y },
                Some(b) => BoundingBox {
                    x_min: b.x_min.min(x),
                    y_min: b.y_min,
                    x_max: b.x_max.max(x),
                    y_max: y,
                },
            });
        }
    }
    bbox
}

/// Closed interval a random factor or shift is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn fixed(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.gen_range(self.lo..=self.hi)
        }
    }
}

/// Photometric jitter: brightness and contrast factors, hue shift as a
/// fraction of the hue circle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorJitter {
    pub brightness: Range,
    pub contrast: Range,
    pub hue: Range,
}

impl ColorJitter {
    /// Magnitude form: factors in `[1 - m, 1 + m]`, hue shift in `[-h, h]`.
    pub fn magnitudes(brightness: f64, contrast: f64, hue: f64) -> Self {
        Self {
            brightness: Range { lo: 1.0 - brightness, hi: 1.0 + brightness },
            contrast: Range { lo: 1.0 - contrast, hi: 1.0 + contrast },
            hue: Range { lo: -hue, hi: hue },
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("brightness", self.brightness), ("contrast", self.contrast)] {
            if !(r.lo > 0.0 && r.lo <= r.hi && r.hi.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "{name} factor range [{}, {}] must be positive and ordered",
                    r.lo, r.hi
                )));
            }
        }
        let h = self.hue;
        if !(h.lo <= h.hi && h.lo >= -0.5 && h.hi <= 0.5) {
            return Err(Error::InvalidArgument(format!(
                "hue shift range [{}, {}] must lie in [-0.5, 0.5]",
                h.lo, h.hi
            )));
        }
        Ok(())
    }
}

/// Random brightness, contrast and hue change, deterministic under `seed`.
/// Applied in that order; results are clamped to `[0, 1]`.
pub fn color_jitter(img: &Image, jitter: &ColorJitter, seed: u64) -> Result<Image> {
    jitter.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = jitter.brightness.sample(&mut rng) as f32;
    let c = jitter.contrast.sample(&mut rng) as f32;
    let h = jitter.hue.sample(&mut rng) as f32;
    let mut data = img.data.clone();
    if b != 1.0 {
        data.iter_mut().for_each(|v| *v = (*v * b).clamp(0.0, 1.0));
    }
    if c != 1.0 {
        let mean = data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .sum::<f32>()
            / (img.height * img.width) as f32;
        data.iter_mut().for_each(|v| *v = ((*v - mean) * c + mean).clamp(0.0, 1.0));
    }
    if h != 0.0 {
        for p in data.chunks_exact_mut(3) {
            let (hh, s, v) = rgb_to_hsv([p[0], p[1], p[2]]);
            let rgb = hsv_to_rgb((hh + h).rem_euclid(1.0), s, v);
            p.copy_from_slice(&rgb);
        }
    }
    Image::from_clamped(img.height, img.width, data)
}

fn rgb_to_hsv([r, g, b]: [f32; 3]) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = h * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match (i as i32).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}
