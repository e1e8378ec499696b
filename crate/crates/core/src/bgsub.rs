//! Per-pixel Gaussian-mixture background model and pseudo-labelling.
//!
//! Each pixel gets 1..=K diagonal Gaussians fitted by batch EM over a
//! stack of empty-scene frames; K is picked by BIC. A pixel is foreground
//! when it is far (in Mahalanobis terms) from every significant component.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, DomainTag, Record};
use crate::error::{Error, Result};
use crate::imaging::{BinaryMask, Image};
use crate::nn::{Checkpoint, Tensor};
use crate::synth::derive_seed;

pub const VARIANCE_FLOOR: f64 = 1e-4;
/// Components lighter than this are treated as transient noise.
pub const MIN_WEIGHT: f64 = 0.05;
pub const DEFAULT_THRESHOLD_SIGMA: f64 = 4.0;
const EM_MAX_ITERS: usize = 200;
const EM_TOL: f64 = 1e-10;
const CHECKPOINT_KIND: &str = "background_model";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub mean: [f64; 3],
    pub var: [f64; 3],
    pub weight: f64,
}

impl Component {
    /// Squared Mahalanobis distance under the diagonal covariance.
    pub fn dist_sq(&self, x: [f64; 3]) -> f64 {
        (0..3).map(|c| (x[c] - self.mean[c]).powi(2) / self.var[c]).sum()
    }

    fn log_density(&self, x: [f64; 3]) -> f64 {
        let log_det: f64 = self.var.iter().map(|v| v.ln()).sum();
        -0.5 * (self.dist_sq(x) + log_det + 3.0 * (2.0 * std::f64::consts::PI).ln())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundModel {
    height: usize,
    width: usize,
    max_components: usize,
    /// Row-major, one mixture per pixel.
    pixels: Vec<Vec<Component>>,
    pub frame_count: usize,
    pub seed: u64,
}

impl BackgroundModel {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn max_components(&self) -> usize {
        self.max_components
    }

    pub fn components(&self, y: usize, x: usize) -> &[Component] {
        &self.pixels[y * self.width + x]
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let k = self.max_components;
        let n = self.pixels.len();
        let mut means = vec![0f32; n * k * 3];
        let mut vars = vec![1f32; n * k * 3];
        let mut weights = vec![0f32; n * k];
        for (p, comps) in self.pixels.iter().enumerate() {
            for (j, c) in comps.iter().enumerate() {
                for ch in 0..3 {
                    means[(p * k + j) * 3 + ch] = c.mean[ch] as f32;
                    vars[(p * k + j) * 3 + ch] = c.var[ch] as f32;
                }
                weights[p * k + j] = c.weight as f32;
            }
        }
        let mut ck = Checkpoint::new(
            CHECKPOINT_KIND,
            serde_json::json!({
                "height": self.height,
                "width": self.width,
                "max_components": k,
                "frame_count": self.frame_count,
                "seed": self.seed,
            }),
        );
        let shape = [self.height, self.width, k];
        ck.tensors.push(("means".into(), Tensor::from_vec(&[shape[0], shape[1], k, 3], means)));
        ck.tensors.push(("vars".into(), Tensor::from_vec(&[shape[0], shape[1], k, 3], vars)));
        ck.tensors.push(("weights".into(), Tensor::from_vec(&shape, weights)));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!("expected a {CHECKPOINT_KIND}, found `{}`", ck.kind)));
        }
        let get = |name: &str| {
            ck.tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
        };
        let (means, vars, weights) = (get("means")?, get("vars")?, get("weights")?);
        let &[h, w, k] = weights.shape() else {
            return Err(Error::Checkpoint("weights must be rank 3".into()));
        };
        if means.shape() != [h, w, k, 3] || vars.shape() != [h, w, k, 3] {
            return Err(Error::Checkpoint("inconsistent tensor shapes".into()));
        }
        let pixels = (0..h * w)
            .map(|p| {
                (0..k)
                    .filter(|&j| weights.data()[p * k + j] > 0.0)
                    .map(|j| Component {
                        mean: [0, 1, 2].map(|c| means.data()[(p * k + j) * 3 + c] as f64),
                        var: [0, 1, 2].map(|c| vars.data()[(p * k + j) * 3 + c] as f64),
                        weight: weights.data()[p * k + j] as f64,
                    })
                    .collect()
            })
            .collect();
        let field = |name: &str| ck.config.get(name).and_then(|v| v.as_u64()).unwrap_or(0);
        Ok(Self {
            height: h,
            width: w,
            max_components: k,
            pixels,
            frame_count: field("frame_count") as usize,
            seed: field("seed"),
        })
    }
}

/// Diagonal-covariance EM on a handful of 3-d points. Returns the fitted
/// components and the final log-likelihood.
fn em_fit(points: &[[f64; 3]], k: usize, rng: &mut ChaCha8Rng) -> (Vec<Component>, f64) {
    let n = points.len();
    // k-means++ style seeding; ties in distance resolved by the rng
    let mut means = vec![points[rng.gen_range(0..n)]];
    while means.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| {
                means
                    .iter()
                    .map(|m| (0..3).map(|c| (p[c] - m[c]).powi(2)).sum::<f64>())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            d2.iter()
                .position(|&d| {
                    r -= d;
                    r < 0.0
                })
                .unwrap_or(n - 1)
        } else {
            rng.gen_range(0..n)
        };
        means.push(points[pick]);
    }
    let mut global_var = [0.0; 3];
    for c in 0..3 {
        let m = points.iter().map(|p| p[c]).sum::<f64>() / n as f64;
        global_var[c] = (points.iter().map(|p| (p[c] - m).powi(2)).sum::<f64>() / n as f64).max(VARIANCE_FLOOR);
    }
    let mut comps: Vec<Component> = means
        .into_iter()
        .map(|mean| Component { mean, var: global_var, weight: 1.0 / k as f64 })
        .collect();

    let mut resp = vec![0.0; n * k];
    let mut prev_ll = f64::NEG_INFINITY;
    let mut ll = prev_ll;
    for _ in 0..EM_MAX_ITERS {
        // E step
        ll = 0.0;
        for (i, &p) in points.iter().enumerate() {
            let logs: Vec<f64> = comps.iter().map(|c| c.weight.ln() + c.log_density(p)).collect();
            let mx = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = logs.iter().map(|l| (l - mx).exp()).sum();
            ll += mx + s.ln();
            for j in 0..k {
                resp[i * k + j] = (logs[j] - mx).exp() / s;
            }
        }
        // M step
        for (j, comp) in comps.iter_mut().enumerate() {
            let nk: f64 = (0..n).map(|i| resp[i * k + j]).sum();
            if nk < 1e-12 {
                // starved component: keep it but make it irrelevant
                comp.weight = 0.0;
                continue;
            }
            for c in 0..3 {
                comp.mean[c] = (0..n).map(|i| resp[i * k + j] * points[i][c]).sum::<f64>() / nk;
                let v = (0..n).map(|i| resp[i * k + j] * (points[i][c] - comp.mean[c]).powi(2)).sum::<f64>() / nk;
                comp.var[c] = v.max(VARIANCE_FLOOR);
            }
            comp.weight = nk / n as f64;
        }
        comps.retain(|c| c.weight > 0.0);
        if comps.len() < k {
            // a collapsed fit is never better than the smaller model
            return (comps, f64::NEG_INFINITY);
        }
        if (ll - prev_ll).abs() < EM_TOL * (1.0 + ll.abs()) {
            break;
        }
        prev_ll = ll;
    }
    (comps, ll)
}

fn bic(ll: f64, k: usize, n: usize) -> f64 {
    let params = k * 6 + (k - 1);
    -2.0 * ll + params as f64 * (n as f64).ln()
}

/// Fit the per-pixel mixtures. Needs at least two equally sized frames.
pub fn fit_background_model(frames: &[Image], max_components: usize, seed: u64) -> Result<BackgroundModel> {
    if frames.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "background fitting needs at least 2 frames, got {}",
            frames.len()
        )));
    }
    if !(1..=8).contains(&max_components) {
        return Err(Error::InvalidArgument(format!("max_components {max_components} outside 1..=8")));
    }
    let (h, w) = (frames[0].height(), frames[0].width());
    for f in frames {
        if (f.height(), f.width()) != (h, w) {
            return Err(Error::dims(format!("{h}x{w}"), format!("{}x{}", f.height(), f.width())));
        }
    }
    let n = frames.len();
    let mut pixels = Vec::with_capacity(h * w);
    let mut points = vec![[0.0; 3]; n];
    for p in 0..h * w {
        for (pt, f) in points.iter_mut().zip(frames) {
            let d = &f.data()[p * 3..p * 3 + 3];
            *pt = [d[0] as f64, d[1] as f64, d[2] as f64];
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, p as u64));
        let mut best: Option<(f64, Vec<Component>)> = None;
        for k in 1..=max_components.min(n) {
            let (comps, ll) = em_fit(&points, k, &mut rng);
            if !ll.is_finite() {
                continue;
            }
            let score = bic(ll, k, n);
            // strict improvement required, so ties keep the simpler model
            if best.as_ref().map_or(true, |(b, _)| score < *b - 1e-9) {
                best = Some((score, comps));
            }
        }
        let mut comps = best.expect("k = 1 always succeeds").1;
        let total: f64 = comps.iter().map(|c| c.weight).sum();
        for c in &mut comps {
            c.weight /= total;
        }
        pixels.push(comps);
    }
    Ok(BackgroundModel { height: h, width: w, max_components, pixels, frame_count: n, seed })
}

/// Foreground mask of `img` against `model`.
pub fn subtract(model: &BackgroundModel, img: &Image, threshold_sigma: f64) -> Result<BinaryMask> {
    if (img.height(), img.width()) != (model.height, model.width) {
        return Err(Error::dims(
            format!("{}x{}", model.height, model.width),
            format!("{}x{}", img.height(), img.width()),
        ));
    }
    if !(threshold_sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("threshold_sigma {threshold_sigma} must be >= 0")));
    }
    let t2 = threshold_sigma * threshold_sigma;
    let data = model
        .pixels
        .iter()
        .enumerate()
        .map(|(p, comps)| {
            let d = &img.data()[p * 3..p * 3 + 3];
            let x = [d[0] as f64, d[1] as f64, d[2] as f64];
            comps.iter().filter(|c| c.weight >= MIN_WEIGHT).all(|c| c.dist_sq(x) > t2)
        })
        .collect();
    BinaryMask::new(model.height, model.width, data)
}

/// Pseudo-label a colored dataset whose records all come from one camera
/// setup, using `empty_frames` of that setup. See [`pseudo_label_scenes`].
pub fn pseudo_label_dataset(
    colored: &DatasetManifest,
    empty_frames: &[Image],
    threshold_sigma: f64,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let model = fit_background_model(empty_frames, 3, seed)?;
    label_with(colored, |_| Ok(&model), threshold_sigma, out_dir)
}

/// Pseudo-label a colored dataset spanning several camera setups: one
/// model is fitted per `scene_id` from `frames[scene_id]`. Images are
/// copied to `out_dir/images`, masks written to `out_dir/masks`, record
/// order is preserved.
pub fn pseudo_label_scenes(
    colored: &DatasetManifest,
    frames: &BTreeMap<u32, Vec<Image>>,
    threshold_sigma: f64,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let mut models = BTreeMap::new();
    for r in &colored.records {
        if !models.contains_key(&r.scene_id) {
            let f = frames.get(&r.scene_id).ok_or_else(|| {
                Error::Dataset(format!("no empty-scene frames for scene {}", r.scene_id))
            })?;
            models.insert(r.scene_id, fit_background_model(f, 3, derive_seed(seed, r.scene_id as u64))?);
        }
    }
    label_with(colored, |sid| Ok(&models[&sid]), threshold_sigma, out_dir)
}

fn label_with<'m>(
    colored: &DatasetManifest,
    model_for: impl Fn(u32) -> Result<&'m BackgroundModel>,
    threshold_sigma: f64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if colored.domain_tag != DomainTag::Colored {
        return Err(Error::Dataset(format!(
            "pseudo-labelling needs a colored dataset, got {:?}",
            colored.domain_tag
        )));
    }
    let (images, masks) = (out_dir.join("images"), out_dir.join("masks"));
    for d in [&images, &masks] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut out = DatasetManifest::new(DomainTag::Colored, out_dir);
    out.config_echo = serde_json::json!({
        "source": colored.config_echo,
        "threshold_sigma": threshold_sigma,
    });
    for r in &colored.records {
        let img = colored.load_image(r)?;
        let mask = subtract(model_for(r.scene_id)?, &img, threshold_sigma)?;
        let image_path = Path::new("images").join(format!("{}.png", r.image_id));
        let mask_path = Path::new("masks").join(format!("{}.png", r.image_id));
        let src = colored.image_path(r);
        fs::copy(&src, out_dir.join(&image_path)).map_err(|e| Error::io(&src, e))?;
        mask.save_png(&out_dir.join(&mask_path))?;
        out.records.push(Record { image_path, mask_path: Some(mask_path), ..r.clone() });
    }
    out.save()?;
    Ok(out)
}
