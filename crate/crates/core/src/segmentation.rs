//! UNet liquid segmentation trained with binary cross-entropy.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetManifest;
use crate::error::{Error, Result};
use crate::imaging::{color_jitter, BinaryMask, ColorJitter, Image};
use crate::nn::graph::{sigmoid, PROB_EPS};
use crate::nn::layers::update_running_stats;
use crate::nn::{BatchNorm, Bound, Checkpoint, Conv2d, Float, Graph, Init, Mode, NodeId, ParamSet, Sgd, Tensor};
use crate::synth::derive_seed;

pub const CHECKPOINT_KIND: &str = "segmentation";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    /// Base channel width.
    pub width: usize,
    /// Number of pooling stages.
    pub depth: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self { width: 8, depth: 4 }
    }
}

impl UNetConfig {
    pub fn full_scale() -> Self {
        Self { width: 64, depth: 4 }
    }
}

/// conv-BN-ReLU twice.
#[derive(Debug, Clone)]
struct DoubleConv {
    c1: Conv2d,
    n1: BatchNorm,
    c2: Conv2d,
    n2: BatchNorm,
}

impl DoubleConv {
    fn new<T: Float>(ps: &mut ParamSet<T>, name: &str, cin: usize, mid: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            c1: Conv2d::new(ps, &format!("{name}.conv1"), cin, mid, 3, 1, false, Init::KaimingUniform, rng),
            n1: BatchNorm::new(ps, &format!("{name}.bn1"), mid),
            c2: Conv2d::new(ps, &format!("{name}.conv2"), mid, cout, 3, 1, false, Init::KaimingUniform, rng),
            n2: BatchNorm::new(ps, &format!("{name}.bn2"), cout),
        }
    }

    fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, ps: &ParamSet<T>, x: NodeId, mode: Mode) -> NodeId {
        let h = self.c1.forward(g, p, x);
        let h = self.n1.forward(g, p, ps, h, mode);
        let h = g.relu(h);
        let h = self.c2.forward(g, p, h);
        let h = self.n2.forward(g, p, ps, h, mode);
        g.relu(h)
    }
}

/// Encoder-decoder with skip connections and bilinear upsampling. Layer
/// handles only; the weights live in a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct UNet {
    pub config: UNetConfig,
    inc: DoubleConv,
    downs: Vec<DoubleConv>,
    ups: Vec<DoubleConv>,
    outc: Conv2d,
}

/// Activations exposed for structural tests.
#[derive(Debug, Clone)]
pub struct UNetTaps {
    pub logits: NodeId,
    /// Encoder outputs, shallowest first (`depth + 1` entries).
    pub skips: Vec<NodeId>,
    /// Inputs to each decoder block after concatenation, deepest first.
    pub decoder_inputs: Vec<NodeId>,
}

impl UNet {
    pub fn new<T: Float>(config: UNetConfig, ps: &mut ParamSet<T>, rng: &mut ChaCha8Rng) -> Result<Self> {
        if config.width == 0 || config.depth == 0 {
            return Err(Error::InvalidArgument("UNet width and depth must be positive".into()));
        }
        let w = config.width;
        let d = config.depth;
        // encoder widths; the deepest stage keeps its input width because
        // bilinear upsampling cannot reduce channels
        let enc: Vec<usize> = (0..=d).map(|i| w << i.min(d - 1)).collect();
        let inc = DoubleConv::new(ps, "inc", 3, w, w, rng);
        let downs = (1..=d)
            .map(|i| DoubleConv::new(ps, &format!("down{i}"), enc[i - 1], enc[i], enc[i], rng))
            .collect();
        let mut ups = Vec::with_capacity(d);
        let mut below = enc[d];
        for (j, i) in (0..d).rev().enumerate() {
            let cin = enc[i] + below;
            let cout = if i == 0 { w } else { enc[i] / 2 };
            ups.push(DoubleConv::new(ps, &format!("up{}", j + 1), cin, cin / 2, cout, rng));
            below = cout;
        }
        let outc = Conv2d::new(ps, "outc", w, 1, 1, 1, true, Init::KaimingUniform, rng);
        Ok(Self { config, inc, downs, ups, outc })
    }

    pub fn divisor(&self) -> usize {
        1 << self.config.depth
    }

    pub fn forward_taps<T: Float>(&self, g: &mut Graph<T>, p: &Bound, ps: &ParamSet<T>, x: NodeId, mode: Mode) -> UNetTaps {
        let mut skips = vec![self.inc.forward(g, p, ps, x, mode)];
        for down in &self.downs {
            let pooled = g.max_pool2(*skips.last().expect("non-empty"));
            skips.push(down.forward(g, p, ps, pooled, mode));
        }
        let mut h = *skips.last().expect("non-empty");
        let mut decoder_inputs = Vec::with_capacity(self.ups.len());
        for (j, up) in self.ups.iter().enumerate() {
            let skip = skips[skips.len() - 2 - j];
            let (_, _, sh, sw) = g.value(skip).dims4();
            let upsampled = g.resize_bilinear(h, sh, sw);
            let cat = g.concat_channels(skip, upsampled);
            decoder_inputs.push(cat);
            h = up.forward(g, p, ps, cat, mode);
        }
        let logits = self.outc.forward(g, p, h);
        UNetTaps { logits, skips, decoder_inputs }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, ps: &ParamSet<T>, x: NodeId, mode: Mode) -> NodeId {
        self.forward_taps(g, p, ps, x, mode).logits
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegTrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub threshold: f64,
    pub unet: UNetConfig,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 2,
            epochs: 50,
            seed: 0,
            threshold: 0.5,
            unet: UNetConfig::default(),
        }
    }
}

impl SegTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.momentum >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument("learning rate must be positive, momentum and decay non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::InvalidArgument("threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Trained network: architecture plus weights and running statistics.
#[derive(Debug, Clone)]
pub struct SegmentationModel {
    pub net: UNet,
    pub params: ParamSet<f32>,
}

impl SegmentationModel {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let net = UNet::new(config, &mut params, &mut rng)?;
        Ok(Self { net, params })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_trainable()
    }

    fn check_dims(&self, img: &Image) -> Result<()> {
        let d = self.net.divisor();
        if img.height() % d != 0 || img.width() % d != 0 {
            return Err(Error::dims(
                format!("sides divisible by {d}"),
                format!("{}x{}", img.height(), img.width()),
            ));
        }
        Ok(())
    }

    /// Per-pixel liquid probabilities for a batch of equally sized images,
    /// clamped to `[PROB_EPS, 1 - PROB_EPS]`.
    pub fn forward_batch(&self, imgs: &[&Image]) -> Result<Vec<Vec<f32>>> {
        let Some(first) = imgs.first() else {
            return Ok(Vec::new());
        };
        for img in imgs {
            self.check_dims(img)?;
            if (img.height(), img.width()) != (first.height(), first.width()) {
                return Err(Error::dims(
                    format!("{}x{}", first.height(), first.width()),
                    format!("{}x{}", img.height(), img.width()),
                ));
            }
        }
        let x = stack(imgs);
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xi = g.input(x);
        let logits = self.net.forward(&mut g, &p, &self.params, xi, Mode::Eval);
        let hw = first.height() * first.width();
        let (lo, hi) = (PROB_EPS as f32, 1.0 - PROB_EPS as f32);
        Ok(g.value(logits)
            .data()
            .chunks(hw)
            .map(|c| c.iter().map(|&z| sigmoid(z).clamp(lo, hi)).collect())
            .collect())
    }

    pub fn forward(&self, img: &Image) -> Result<Vec<f32>> {
        Ok(self.forward_batch(&[img])?.remove(0))
    }

    pub fn predict_mask(&self, img: &Image, threshold: f64) -> Result<BinaryMask> {
        let probs = self.forward(img)?;
        BinaryMask::new(img.height(), img.width(), threshold_probs(&probs, threshold))
    }

    pub fn predict_masks(&self, imgs: &[&Image], threshold: f64) -> Result<Vec<BinaryMask>> {
        let mut out = Vec::with_capacity(imgs.len());
        for chunk in imgs.chunks(16) {
            for (img, probs) in chunk.iter().zip(self.forward_batch(chunk)?) {
                out.push(BinaryMask::new(img.height(), img.width(), threshold_probs(&probs, threshold))?);
            }
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self, config_echo: serde_json::Value) -> Checkpoint {
        let mut ck = Checkpoint::new(
            CHECKPOINT_KIND,
            serde_json::json!({ "unet": self.net.config, "echo": config_echo }),
        );
        ck.push_section("unet", &self.params);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!("expected a {CHECKPOINT_KIND} checkpoint, found `{}`", ck.kind)));
        }
        let cfg: UNetConfig = serde_json::from_value(ck.config["unet"].clone())?;
        let mut model = Self::new(cfg, 0)?;
        model.params.load_named(&ck.section("unet")).map_err(Error::Checkpoint)?;
        Ok(model)
    }
}

fn threshold_probs(probs: &[f32], threshold: f64) -> Vec<bool> {
    probs.iter().map(|&p| p as f64 >= threshold).collect()
}

fn stack(imgs: &[&Image]) -> Tensor<f32> {
    let (h, w) = (imgs[0].height(), imgs[0].width());
    let mut data = Vec::with_capacity(imgs.len() * 3 * h * w);
    for img in imgs {
        data.extend(img.to_chw());
    }
    Tensor::from_vec(&[imgs.len(), 3, h, w], data)
}

/// Mean clamped binary cross-entropy between logits and a mask.
pub fn bce_loss(logits: &[f64], target: &BinaryMask) -> Result<f64> {
    if logits.len() != target.data().len() {
        return Err(Error::dims(target.data().len(), logits.len()));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    let mut g = Graph::<f64>::new();
    let z = g.input(Tensor::from_vec(&[logits.len()], logits.to_vec()));
    let t = target.data().iter().map(|&b| b as u8 as f64).collect();
    let l = g.bce_logits(z, t);
    Ok(g.value(l).item())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegEpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
}

/// Images and masks of every record; fails on unmasked records.
pub fn load_labeled(dataset: &DatasetManifest) -> Result<Vec<(Image, BinaryMask)>> {
    dataset
        .records
        .iter()
        .map(|r| {
            if r.mask_path.is_none() {
                return Err(Error::Dataset(format!("record {} has no mask", r.image_id)));
            }
            Ok((dataset.load_image(r)?, dataset.load_mask(r)?))
        })
        .collect()
}

pub fn train_segmentation(dataset: &DatasetManifest, config: &SegTrainConfig) -> Result<(SegmentationModel, Vec<SegEpochLog>)> {
    let samples = load_labeled(dataset)?;
    train_on_samples(&samples, config, None, |_| {})
}

/// Training loop over in-memory pairs. With `jitter` every image is
/// re-jittered each epoch from a derived seed. `progress` sees each epoch.
pub fn train_on_samples(
    samples: &[(Image, BinaryMask)],
    config: &SegTrainConfig,
    jitter: Option<&ColorJitter>,
    mut progress: impl FnMut(&SegEpochLog),
) -> Result<(SegmentationModel, Vec<SegEpochLog>)> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Dataset("no training samples".into()));
    }
    if let Some(j) = jitter {
        j.validate()?;
    }
    let mut model = SegmentationModel::new(config.unet, config.seed)?;
    for (img, mask) in samples {
        model.check_dims(img)?;
        if (mask.height(), mask.width()) != (img.height(), img.width()) {
            return Err(Error::dims(
                format!("{}x{}", img.height(), img.width()),
                format!("{}x{}", mask.height(), mask.width()),
            ));
        }
    }
    let mut opt = Sgd::new(config.learning_rate, config.momentum, config.weight_decay);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            // batch norm needs more than one value per channel
            let deepest = (samples[0].0.height() / model.net.divisor()) * (samples[0].0.width() / model.net.divisor());
            if batch.len() * deepest < 2 {
                continue;
            }
            let jittered: Vec<Image>;
            let imgs: Vec<&Image> = match jitter {
                Some(j) => {
                    jittered = batch
                        .iter()
                        .map(|&i| {
                            let s = derive_seed(config.seed ^ 0x4A49_5454, (epoch * samples.len() + i) as u64);
                            color_jitter(&samples[i].0, j, s)
                        })
                        .collect::<Result<_>>()?;
                    jittered.iter().collect()
                }
                None => batch.iter().map(|&i| &samples[i].0).collect(),
            };
            let target: Vec<f32> = batch
                .iter()
                .flat_map(|&i| samples[i].1.data().iter().map(|&b| b as u8 as f32))
                .collect();
            let mut g = Graph::new();
            let p = model.params.bind(&mut g, true);
            let x = g.input(stack(&imgs));
            let logits = model.net.forward(&mut g, &p, &model.params, x, Mode::Train);
            let loss = g.bce_logits(logits, target);
            let lv = g.value(loss).item() as f64;
            if !lv.is_finite() {
                return Err(Error::NonFinite("segmentation loss"));
            }
            total += lv * batch.len() as f64;
            g.backward(loss);
            let grads = model.params.grads(&g, &p);
            opt.step(&mut model.params, &grads);
            update_running_stats(&mut model.params, &mut g);
        }
        let entry = SegEpochLog { epoch, mean_loss: total / samples.len() as f64 };
        progress(&entry);
        log.push(entry);
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_parameter_count_in_bracket() {
        let m = SegmentationModel::new(UNetConfig::full_scale(), 0).unwrap();
        let n = m.num_parameters();
        assert!((10_000_000..=20_000_000).contains(&n), "{n}");
    }

    #[test]
    fn shapes_and_range() {
        let m = SegmentationModel::new(UNetConfig::default(), 1).unwrap();
        let img = Image::from_clamped(64, 64, (0..64 * 64 * 3).map(|i| (i % 17) as f32 / 16.0).collect()).unwrap();
        let p = m.forward(&img).unwrap();
        assert_eq!(p.len(), 64 * 64);
        assert!(p.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        let bad = Image::filled(40, 40, [0.5; 3]).unwrap();
        assert!(m.forward(&bad).is_err());
    }

    #[test]
    fn threshold_extremes_and_ordering() {
        let m = SegmentationModel::new(UNetConfig::default(), 2).unwrap();
        let img = Image::from_clamped(32, 32, (0..32 * 32 * 3).map(|i| (i % 7) as f32 / 6.0).collect()).unwrap();
        assert!(m.predict_mask(&img, 1.0).unwrap().is_empty());
        assert_eq!(m.predict_mask(&img, 0.0).unwrap().count(), 32 * 32);
        let hi = m.predict_mask(&img, 0.7).unwrap();
        let lo = m.predict_mask(&img, 0.3).unwrap();
        assert!(hi.is_subset_of(&lo));
    }

    #[test]
    fn bce_closed_forms() {
        let t = BinaryMask::from_fn(4, 4, |y, _| y > 1);
        assert!((bce_loss(&[0.0; 16], &t).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let z: Vec<f64> = t.data().iter().map(|&b| if b { 20.0 } else { -20.0 }).collect();
        assert!(bce_loss(&z, &t).unwrap() <= 1e-6);
        assert!(bce_loss(&[0.0; 3], &t).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = SegmentationModel::new(UNetConfig { width: 4, depth: 2 }, 3).unwrap();
        let back = SegmentationModel::from_checkpoint(&m.to_checkpoint(serde_json::Value::Null)).unwrap();
        let img = Image::filled(16, 16, [0.3, 0.5, 0.7]).unwrap();
        assert_eq!(m.forward(&img).unwrap(), back.forward(&img).unwrap());
    }
}
