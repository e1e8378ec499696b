//! Procedural cup-and-liquid scenes with exact ground truth.
//!
//! A [`Rig`] fixes what a static camera sees (cup, background, liquid
//! tint); a [`SceneSpec`] adds the fill level and per-frame sensor noise.
//! The same spec rendered in colored and transparent mode shares its
//! geometry, so the two renders differ only inside the liquid mask.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, DomainTag, Record, SplitTag};
use crate::error::{Error, Result};
use crate::imaging::{BinaryMask, BoundingBox, Image};

/// Brightness added inside transparent liquid.
pub const TRANSPARENT_LIFT: f32 = 0.05;
/// Opacity of the tint in colored mode.
pub const TINT_ALPHA: f32 = 0.65;
/// Vertical period (pixels) of the refraction wobble.
const WOBBLE_PERIOD: f64 = 9.0;
const WALL_SHADE: f32 = 0.18;
const MENISCUS_SHADE: f32 = 0.35;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderMode {
    Colored,
    Transparent,
}

impl RenderMode {
    pub fn domain(self) -> DomainTag {
        match self {
            RenderMode::Colored => DomainTag::Colored,
            RenderMode::Transparent => DomainTag::Transparent,
        }
    }
}

/// Trapezoidal cup: walls run from `top_width` at `top_y` to `base_width`
/// at `bottom_y`, centred on `center_x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CupGeometry {
    pub base_width: f64,
    pub top_width: f64,
    pub top_y: usize,
    pub bottom_y: usize,
    pub center_x: f64,
}

impl CupGeometry {
    /// Wall columns `(left, right)` at row `y`.
    fn walls(&self, y: usize) -> (usize, usize) {
        let t = (y - self.top_y) as f64 / (self.bottom_y - self.top_y) as f64;
        let half = 0.5 * (self.top_width + t * (self.base_width - self.top_width));
        (
            (self.center_x - half).round() as usize,
            (self.center_x + half).round() as usize,
        )
    }

    fn validate(&self, height: usize, width: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidGeometry(m));
        if !(self.base_width >= 4.0 && self.top_width >= 4.0) {
            return bad("cup walls must be at least 4 pixels apart".into());
        }
        if self.bottom_y < self.top_y + 4 {
            return bad("cup must be at least 4 pixels tall".into());
        }
        let half = 0.5 * self.base_width.max(self.top_width);
        if self.top_y < 1
            || self.bottom_y + 1 >= height
            || self.center_x - half < 1.0
            || self.center_x + half > (width - 2) as f64
        {
            return bad(format!("cup {self:?} is not strictly inside a {height}x{width} image"));
        }
        Ok(())
    }

    /// Interior rows `top_y..bottom_y` (the bottom row is the cup floor).
    pub fn interior_height(&self) -> usize {
        self.bottom_y - self.top_y
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundKind {
    Gradient,
    Stripes,
    Noise,
    Checker,
}

impl BackgroundKind {
    pub fn from_id(id: u32) -> Self {
        match id % 4 {
            0 => BackgroundKind::Stripes,
            1 => BackgroundKind::Checker,
            2 => BackgroundKind::Noise,
            _ => BackgroundKind::Gradient,
        }
    }
}

/// Everything a static camera sees apart from the liquid level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rig {
    pub height: usize,
    pub width: usize,
    pub cup: CupGeometry,
    /// Selects the procedural texture and its parameters.
    pub background_id: u32,
    pub liquid_tint: [f32; 3],
    /// Horizontal displacement amplitude (pixels) inside transparent liquid.
    pub refraction_strength: f64,
}

impl Rig {
    /// Random but plausible rig for `size x size` frames.
    pub fn random(size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5249_4721);
        let s = size as f64;
        let cup_h = rng.gen_range(0.55..0.7) * s;
        let bottom_y = (s * rng.gen_range(0.86..0.9)).round() as usize;
        let top_y = bottom_y - cup_h.round() as usize;
        let top_width = rng.gen_range(0.4..0.5) * s;
        let base_width = top_width * rng.gen_range(0.7..0.85);
        let center_x = s / 2.0 + rng.gen_range(-0.08..0.08) * s;
        let g: f32 = rng.gen_range(0.55..0.75);
        Self {
            height: size,
            width: size,
            cup: CupGeometry { base_width, top_width, top_y, bottom_y, center_x },
            background_id: rng.gen_range(0..64),
            liquid_tint: [rng.gen_range(0.05..0.2), g, rng.gen_range(0.1..0.3)],
            refraction_strength: rng.gen_range(1.5..2.5),
        }
    }
}

/// One frame: a rig, a fill level and sensor noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub rig: Rig,
    pub fill_fraction: f64,
    /// Standard deviation of additive Gaussian sensor noise.
    #[serde(default)]
    pub sensor_noise: f64,
}

impl SceneSpec {
    pub fn new(rig: Rig, fill_fraction: f64, seed: u64) -> Self {
        Self { seed, rig, fill_fraction, sensor_noise: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fill_fraction) {
            return Err(Error::InvalidArgument(format!(
                "fill_fraction {} outside [0, 1]",
                self.fill_fraction
            )));
        }
        if self.rig.height < 8 || self.rig.width < 8 {
            return Err(Error::InvalidGeometry("scenes need at least 8x8 pixels".into()));
        }
        if !(self.sensor_noise >= 0.0 && self.sensor_noise.is_finite()) {
            return Err(Error::InvalidArgument("sensor_noise must be non-negative".into()));
        }
        self.rig.cup.validate(self.rig.height, self.rig.width)
    }

    /// Row of the liquid surface; equals `bottom_y` (no liquid) when empty.
    pub fn surface_row(&self) -> usize {
        let cup = &self.rig.cup;
        let rows = (self.fill_fraction * cup.interior_height() as f64).round() as usize;
        cup.bottom_y - rows
    }
}

/// Box of the cup interior: the region liquid can occupy.
pub fn cup_interior_bbox(cup: &CupGeometry) -> BoundingBox {
    let (mut x_min, mut x_max) = (usize::MAX, 0);
    for y in cup.top_y..cup.bottom_y {
        let (l, r) = cup.walls(y);
        x_min = x_min.min(l + 1);
        x_max = x_max.max(r - 1);
    }
    BoundingBox { x_min, y_min: cup.top_y, x_max, y_max: cup.bottom_y - 1 }
}

fn cup_interior(rig: &Rig) -> BinaryMask {
    let cup = rig.cup;
    BinaryMask::from_fn(rig.height, rig.width, |y, x| {
        if y < cup.top_y || y >= cup.bottom_y {
            return false;
        }
        let (l, r) = cup.walls(y);
        x > l && x < r
    })
}

fn is_wall(cup: &CupGeometry, y: usize, x: usize) -> bool {
    if y < cup.top_y || y > cup.bottom_y {
        return false;
    }
    let (l, r) = cup.walls(y);
    x == l || x == r || (y == cup.bottom_y && x > l && x < r)
}

/// Background texture value at fractional column `x` of row `y`.
fn background_rgb(rig: &Rig, y: f64, x: f64) -> [f32; 3] {
    let id = rig.background_id;
    let variant = (id / 4) as f64;
    let (h, w) = (rig.height as f64, rig.width as f64);
    let v = match BackgroundKind::from_id(id) {
        BackgroundKind::Stripes => {
            let period = 5.0 + (variant % 4.0) * 1.5;
            let angle = (variant % 3.0 - 1.0) * 0.35;
            let u = x * angle.cos() + y * angle.sin();
            0.55 + 0.25 * (2.0 * PI * u / period).sin()
        }
        BackgroundKind::Checker => {
            let cell = 4.0 + (variant % 4.0);
            let c = ((x / cell).floor() + (y / cell).floor()).rem_euclid(2.0);
            0.35 + 0.35 * c + 0.04 * (x / w)
        }
        BackgroundKind::Noise => {
            // sum of incommensurate waves: smooth, non-repeating texture
            let a = 0.7 + 0.1 * variant;
            0.55 + 0.12 * (a * x * 0.9 + 1.3 * variant).sin() * (0.7 * y + 0.4).cos()
                + 0.1 * ((x + 1.7 * y) * 0.55 * a).sin()
                + 0.06 * ((2.3 * x - y) * 0.8).cos()
        }
        BackgroundKind::Gradient => {
            let angle = variant * 0.7;
            let u = (x / w - 0.5) * angle.cos() + (y / h - 0.5) * angle.sin();
            0.55 + 0.4 * u + 0.08 * (x * 0.8).sin() * (y * 0.5).sin()
        }
    } as f32;
    // faint warm/cool cast per background
    let cast = ((id % 7) as f32 - 3.0) * 0.012;
    [
        (v + cast).clamp(0.05, 0.95),
        v.clamp(0.05, 0.95),
        (v - cast).clamp(0.05, 0.95),
    ]
}

/// Render a frame. Returns the image, the liquid mask and the box of the
/// cup interior.
pub fn render_scene(spec: &SceneSpec, mode: RenderMode) -> Result<(Image, BinaryMask, BoundingBox)> {
    spec.validate()?;
    let rig = &spec.rig;
    let (h, w) = (rig.height, rig.width);
    let cup = rig.cup;
    let interior = cup_interior(rig);
    let surface = spec.surface_row();
    let mask = BinaryMask::from_fn(h, w, |y, x| y >= surface && interior.get(y, x));

    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let mut px = background_rgb(rig, y as f64, x as f64);
            if is_wall(&cup, y, x) {
                px = px.map(|v| 0.55 * v + 0.45 * WALL_SHADE);
            } else if mask.get(y, x) {
                px = match mode {
                    RenderMode::Colored => {
                        let t = rig.liquid_tint;
                        [0, 1, 2].map(|c| (1.0 - TINT_ALPHA) * px[c] + TINT_ALPHA * t[c])
                    }
                    RenderMode::Transparent => {
                        if y == surface {
                            px.map(|v| 0.5 * v + 0.5 * MENISCUS_SHADE)
                        } else {
                            let phase = 2.0 * PI * (y as f64) / WOBBLE_PERIOD;
                            let sx = x as f64 + rig.refraction_strength * phase.sin();
                            background_rgb(rig, y as f64, sx).map(|v| (v + TRANSPARENT_LIFT).min(1.0))
                        }
                    }
                };
            }
            data.extend_from_slice(&px);
        }
    }
    if spec.sensor_noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0, spec.sensor_noise).expect("checked non-negative");
        for v in &mut data {
            *v += normal.sample(&mut rng) as f32;
        }
    }
    let img = Image::from_clamped(h, w, data)?;
    Ok((img, mask, cup_interior_bbox(&cup)))
}

/// `count` empty-cup frames of `rig`, differing only in sensor noise.
pub fn render_empty_frames(rig: &Rig, count: usize, sensor_noise: f64, seed: u64) -> Result<Vec<Image>> {
    (0..count)
        .map(|i| {
            let spec = SceneSpec { seed: derive_seed(seed, i as u64), rig: *rig, fill_fraction: 0.0, sensor_noise };
            render_scene(&spec, RenderMode::Colored).map(|(img, _, _)| img)
        })
        .collect()
}

/// SplitMix64 step: decorrelated child seeds from a master seed.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Settings for [`make_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetOptions {
    pub count: usize,
    pub seed: u64,
    pub mode: RenderMode,
    pub image_size: usize,
    /// Rigs are shared between datasets built with the same `rig_seed`,
    /// mirroring data captured in one workspace.
    pub rig_seed: u64,
    pub num_rigs: u32,
    pub sensor_noise: f64,
    /// Write masks for transparent data (evaluation only).
    pub with_masks: bool,
    pub split: SplitTag,
    pub id_prefix: String,
}

impl DatasetOptions {
    pub fn new(count: usize, seed: u64, mode: RenderMode) -> Self {
        Self {
            count,
            seed,
            mode,
            image_size: 64,
            rig_seed: 0,
            num_rigs: 1,
            sensor_noise: 0.004,
            with_masks: false,
            split: SplitTag::Train,
            id_prefix: match mode {
                RenderMode::Colored => "col".into(),
                RenderMode::Transparent => "tr".into(),
            },
        }
    }

    pub fn rig(&self, scene_id: u32) -> Rig {
        Rig::random(self.image_size, derive_seed(self.rig_seed, scene_id as u64))
    }

    /// Spec of record `i`. Fill fractions are stratified over `[0, 1]`.
    pub fn scene_spec(&self, i: usize) -> SceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, u64::MAX - i as u64));
        let fill = ((i as f64 + rng.gen::<f64>()) / self.count as f64).clamp(0.0, 1.0);
        let scene_id = (i % self.num_rigs.max(1) as usize) as u32;
        SceneSpec {
            seed: derive_seed(self.seed, i as u64),
            rig: self.rig(scene_id),
            fill_fraction: fill,
            sensor_noise: self.sensor_noise,
        }
    }
}

/// Render `opts.count` scenes into `out_dir/{images,masks}` and write the
/// manifest. Transparent datasets carry no masks unless `with_masks` is set.
pub fn make_dataset(opts: &DatasetOptions, out_dir: &Path) -> Result<DatasetManifest> {
    if opts.count == 0 {
        return Err(Error::InvalidArgument("dataset needs at least one scene".into()));
    }
    let images = out_dir.join("images");
    let masks = out_dir.join("masks");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let write_masks = opts.mode == RenderMode::Colored || opts.with_masks;
    if write_masks {
        fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;
    }
    let mut manifest = DatasetManifest::new(opts.mode.domain(), out_dir);
    manifest.config_echo = serde_json::to_value(opts)?;
    for i in 0..opts.count {
        let spec = opts.scene_spec(i);
        let (img, mask, bbox) = render_scene(&spec, opts.mode)?;
        let id = format!("{}_{i:05}", opts.id_prefix);
        let image_path = Path::new("images").join(format!("{id}.png"));
        img.save_png(&out_dir.join(&image_path))?;
        let mask_path = if write_masks {
            let p = Path::new("masks").join(format!("{id}.png"));
            mask.save_png(&out_dir.join(&p))?;
            Some(p)
        } else {
            None
        };
        manifest.records.push(Record {
            image_id: id,
            image_path,
            mask_path,
            fill_fraction: Some(spec.fill_fraction),
            cup_bbox: bbox,
            scene_id: (i % opts.num_rigs.max(1) as usize) as u32,
            split_tag: opts.split,
        });
    }
    manifest.save()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(fill: f64) -> SceneSpec {
        SceneSpec { seed: 9, rig: Rig::random(64, 3), fill_fraction: fill, sensor_noise: 0.01 }
    }

    #[test]
    fn empty_and_full_cups() {
        let (_, m0, _) = render_scene(&spec(0.0), RenderMode::Colored).unwrap();
        assert!(m0.is_empty());
        let s = spec(1.0);
        let (_, m1, bbox) = render_scene(&s, RenderMode::Transparent).unwrap();
        assert_eq!(m1, cup_interior(&s.rig));
        assert_eq!(crate::imaging::bounding_box_of(&m1), Some(bbox));
    }

    #[test]
    fn modes_share_mask_and_outside_pixels() {
        for fill in [0.2, 0.55, 0.9] {
            let s = spec(fill);
            let (ic, mc, bc) = render_scene(&s, RenderMode::Colored).unwrap();
            let (it, mt, bt) = render_scene(&s, RenderMode::Transparent).unwrap();
            assert_eq!(mc, mt);
            assert_eq!(bc, bt);
            let mut inside_diff = 0;
            for y in 0..64 {
                for x in 0..64 {
                    if mc.get(y, x) {
                        inside_diff += (ic.pixel(y, x) != it.pixel(y, x)) as usize;
                    } else {
                        assert_eq!(ic.pixel(y, x), it.pixel(y, x));
                    }
                }
            }
            assert!(inside_diff > mc.count() / 2);
        }
    }

    #[test]
    fn masks_nest_and_stay_inside_cup() {
        let s = spec(0.0);
        let interior = cup_interior(&s.rig);
        let mut prev = BinaryMask::empty(64, 64);
        for i in 0..=20 {
            let (_, m, _) = render_scene(&spec(i as f64 / 20.0), RenderMode::Colored).unwrap();
            assert!(m.is_subset_of(&interior));
            assert!(prev.is_subset_of(&m));
            prev = m;
        }
    }

    #[test]
    fn rejects_cup_outside_image() {
        let mut s = spec(0.5);
        s.rig.cup.center_x = 3.0;
        assert!(render_scene(&s, RenderMode::Colored).is_err());
        let mut s = spec(0.5);
        s.rig.cup.bottom_y = 63;
        assert!(render_scene(&s, RenderMode::Colored).is_err());
    }

    #[test]
    fn random_rigs_are_valid() {
        for seed in 0..200 {
            let rig = Rig::random(64, seed);
            rig.cup.validate(64, 64).unwrap();
        }
    }

    #[test]
    fn dataset_layout_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let colored = make_dataset(&DatasetOptions::new(10, 4, RenderMode::Colored), &dir.path().join("c")).unwrap();
        assert_eq!(colored.len(), 10);
        assert!(colored.records.iter().all(|r| r.mask_path.is_some()));

        let tr = make_dataset(&DatasetOptions::new(10, 4, RenderMode::Transparent), &dir.path().join("t")).unwrap();
        assert_eq!(tr.len(), 10);
        assert!(tr.records.iter().all(|r| r.mask_path.is_none()));
        assert!(!dir.path().join("t/masks").exists());

        make_dataset(&DatasetOptions::new(10, 4, RenderMode::Colored), &dir.path().join("c2")).unwrap();
        for name in ["manifest.json", "images/col_00003.png", "masks/col_00007.png"] {
            assert_eq!(
                fs::read(dir.path().join("c").join(name)).unwrap(),
                fs::read(dir.path().join("c2").join(name)).unwrap(),
                "{name}"
            );
        }
    }

    #[test]
    fn fills_are_stratified() {
        let opts = DatasetOptions::new(10, 1, RenderMode::Colored);
        for i in 0..10 {
            let f = opts.scene_spec(i).fill_fraction;
            assert!(f >= i as f64 / 10.0 && f <= (i + 1) as f64 / 10.0);
        }
    }
}
