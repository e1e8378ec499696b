//! Contrastive unpaired translation from colored to transparent liquid.
//!
//! A ResNet-style generator is trained with an adversarial loss against a
//! patch discriminator plus PatchNCE terms that tie each output patch to
//! the input patch at the same location.

use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, DomainTag, Record};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::nn::graph::patch_nce_forward;
use crate::nn::{Adam, Bound, Checkpoint, Conv2d, Float, Graph, Init, InstanceNorm, Linear, NodeId, ParamSet, Tensor};
use crate::synth::derive_seed;

pub const CHECKPOINT_KIND: &str = "translation";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanMode {
    /// Log-loss with the non-saturating generator objective.
    Log,
    LeastSquares,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    /// Channels after the stem; doubled by each downsampling.
    pub base_channels: usize,
    pub residual_blocks: usize,
    pub stem_kernel: usize,
    /// Add the input's logit before the output sigmoid, so the generator
    /// starts at the identity and learns a correction.
    pub input_skip: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { base_channels: 16, residual_blocks: 4, stem_kernel: 7, input_skip: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    /// Stride-2 blocks before the logit head.
    pub layers: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { base_channels: 16, layers: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TranslationConfig {
    pub lambda_x: f64,
    pub lambda_y: f64,
    pub tau: f64,
    pub num_patches: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub lr_h: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub gan_mode: GanMode,
    pub embed_dim: usize,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for TranslationConfig {
    fn default() -> Self {
        Self {
            lambda_x: 1.0,
            lambda_y: 1.0,
            tau: 0.07,
            num_patches: 64,
            lr_g: 2e-4,
            lr_d: 2e-4,
            lr_h: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 1,
            epochs: 30,
            seed: 0,
            gan_mode: GanMode::Log,
            embed_dim: 64,
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

impl TranslationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(self.lambda_x >= 0.0 && self.lambda_y >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if !(self.tau > 0.0) {
            return bad("tau must be positive");
        }
        if self.num_patches < 2 {
            return bad("num_patches must be at least 2");
        }
        if !(self.lr_g > 0.0 && self.lr_d > 0.0 && self.lr_h > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.batch_size == 0 || self.embed_dim == 0 {
            return bad("batch_size and embed_dim must be positive");
        }
        let g = &self.generator;
        if g.base_channels == 0 || g.stem_kernel % 2 == 0 {
            return bad("generator needs positive width and an odd stem kernel");
        }
        if self.discriminator.base_channels == 0 || self.discriminator.layers == 0 {
            return bad("discriminator needs positive width and depth");
        }
        Ok(())
    }
}

/// Encoder layers whose activations feed the contrastive loss.
/// Clamp applied to input pixels before taking their logit.
const SKIP_EPS: f64 = 1e-3;

pub const NCE_LAYERS: usize = 3;

#[derive(Debug, Clone)]
struct ResBlock {
    c1: Conv2d,
    c2: Conv2d,
}

/// Generator layer handles: stem, two stride-2 downsamplings, residual
/// blocks, two bilinear upsamplings, sigmoid output.
#[derive(Debug, Clone)]
pub struct Generator {
    pub config: GeneratorConfig,
    stem: Conv2d,
    down: [Conv2d; 2],
    res: Vec<ResBlock>,
    up: [Conv2d; 2],
    out: Conv2d,
}

/// Output node plus the encoder activations used by PatchNCE.
#[derive(Debug, Clone)]
pub struct GenOutput {
    pub image: NodeId,
    pub features: Vec<NodeId>,
}

impl Generator {
    pub fn new<T: Float>(config: GeneratorConfig, ps: &mut ParamSet<T>, rng: &mut ChaCha8Rng) -> Self {
        let c = config.base_channels;
        let init = Init::Normal(0.02);
        let conv = |ps: &mut ParamSet<T>, rng: &mut ChaCha8Rng, name: &str, cin, cout, k, s, bias| {
            Conv2d::new(ps, name, cin, cout, k, s, bias, init, rng)
        };
        let stem = conv(ps, rng, "stem", 3, c, config.stem_kernel, 1, false);
        let down = [
            conv(ps, rng, "down1", c, 2 * c, 3, 2, false),
            conv(ps, rng, "down2", 2 * c, 4 * c, 3, 2, false),
        ];
        let res = (0..config.residual_blocks)
            .map(|i| ResBlock {
                c1: conv(ps, rng, &format!("res{i}.conv1"), 4 * c, 4 * c, 3, 1, false),
                c2: conv(ps, rng, &format!("res{i}.conv2"), 4 * c, 4 * c, 3, 1, false),
            })
            .collect();
        let up = [
            conv(ps, rng, "up1", 4 * c, 2 * c, 3, 1, false),
            conv(ps, rng, "up2", 2 * c, c, 3, 1, false),
        ];
        let out = conv(ps, rng, "out", c, 3, config.stem_kernel, 1, true);
        Self { config, stem, down, res, up, out }
    }

    fn block<T: Float>(g: &mut Graph<T>, p: &Bound, conv: &Conv2d, x: NodeId) -> NodeId {
        let h = conv.forward(g, p, x);
        let h = InstanceNorm.forward(g, h);
        g.relu(h)
    }

    /// Encoder activations only (stem and both downsamplings).
    pub fn encode<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: NodeId) -> Vec<NodeId> {
        let f0 = Self::block(g, p, &self.stem, x);
        let f1 = Self::block(g, p, &self.down[0], f0);
        let f2 = Self::block(g, p, &self.down[1], f1);
        vec![f0, f1, f2]
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: NodeId) -> GenOutput {
        let features = self.encode(g, p, x);
        let mut h = features[2];
        for rb in &self.res {
            let r = Self::block(g, p, &rb.c1, h);
            let r = rb.c2.forward(g, p, r);
            let r = InstanceNorm.forward(g, r);
            h = g.add(h, r);
        }
        for conv in &self.up {
            let (_, _, hh, ww) = g.value(h).dims4();
            let u = g.resize_bilinear(h, 2 * hh, 2 * ww);
            h = Self::block(g, p, conv, u);
        }
        let mut o = self.out.forward(g, p, h);
        if self.config.input_skip {
            let eps = T::of(SKIP_EPS);
            let logit = g.value(x).map(|v| {
                let v = v.max(eps).min(T::of(1.0) - eps);
                (v / (T::of(1.0) - v)).ln()
            });
            let l = g.input(logit);
            o = g.add(o, l);
        }
        GenOutput { image: g.sigmoid(o), features }
    }

    /// Channel counts of the PatchNCE layers.
    pub fn feature_channels(&self) -> [usize; NCE_LAYERS] {
        let c = self.config.base_channels;
        [c, 2 * c, 4 * c]
    }
}

/// Patch discriminator: stride-2 convolutions with leaky ReLU and a
/// 1-channel logit map.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    blocks: Vec<Conv2d>,
    head: Conv2d,
}

impl Discriminator {
    pub fn new<T: Float>(config: DiscriminatorConfig, ps: &mut ParamSet<T>, rng: &mut ChaCha8Rng) -> Self {
        let init = Init::Normal(0.02);
        let mut cin = 3;
        let mut blocks = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let cout = config.base_channels << i;
            let mut conv = Conv2d::new(ps, &format!("block{i}"), cin, cout, 4, 2, i == 0, init, rng);
            conv.pad = 1;
            blocks.push(conv);
            cin = cout;
        }
        let head = Conv2d::new(ps, "head", cin, 1, 3, 1, true, init, rng);
        Self { config, blocks, head }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, x: NodeId) -> NodeId {
        let mut h = x;
        for (i, conv) in self.blocks.iter().enumerate() {
            h = conv.forward(g, p, h);
            if i > 0 {
                h = InstanceNorm.forward(g, h);
            }
            h = g.leaky_relu(h, T::of(0.2));
        }
        self.head.forward(g, p, h)
    }
}

/// One two-layer perceptron per PatchNCE layer.
#[derive(Debug, Clone)]
pub struct ProjectionHeads {
    layers: Vec<(Linear, Linear)>,
    pub embed_dim: usize,
}

impl ProjectionHeads {
    pub fn new<T: Float>(channels: &[usize], embed_dim: usize, ps: &mut ParamSet<T>, rng: &mut ChaCha8Rng) -> Self {
        let init = Init::XavierNormal(1.0);
        let layers = channels
            .iter()
            .enumerate()
            .map(|(l, &c)| {
                (
                    Linear::new(ps, &format!("h{l}.fc1"), c, embed_dim, init, rng),
                    Linear::new(ps, &format!("h{l}.fc2"), embed_dim, embed_dim, init, rng),
                )
            })
            .collect();
        Self { layers, embed_dim }
    }

    /// Unit-norm embeddings of feature rows `[rows, C]` for layer `l`.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, layer: usize, rows: NodeId) -> NodeId {
        let (fc1, fc2) = &self.layers[layer];
        let h = fc1.forward(g, p, rows);
        let h = g.relu(h);
        let h = fc2.forward(g, p, h);
        g.l2_normalize_rows(h)
    }
}

/// Architecture handles of the three networks.
#[derive(Debug, Clone)]
pub struct CutNets {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub heads: ProjectionHeads,
}

/// Weights of the three networks.
#[derive(Debug, Clone)]
pub struct CutParams<T> {
    pub g: ParamSet<T>,
    pub d: ParamSet<T>,
    pub h: ParamSet<T>,
}

impl CutNets {
    pub fn new<T: Float>(config: &TranslationConfig, seed: u64) -> (Self, CutParams<T>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = CutParams { g: ParamSet::new(), d: ParamSet::new(), h: ParamSet::new() };
        let generator = Generator::new(config.generator, &mut params.g, &mut rng);
        let discriminator = Discriminator::new(config.discriminator, &mut params.d, &mut rng);
        let heads = ProjectionHeads::new(&generator.feature_channels(), config.embed_dim, &mut params.h, &mut rng);
        (Self { generator, discriminator, heads }, params)
    }
}

/// Random patch locations per PatchNCE layer, shared by source and output.
pub fn sample_locations(feature_sizes: &[(usize, usize)], num_patches: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    feature_sizes
        .iter()
        .map(|&(h, w)| {
            let n = h * w;
            index::sample(rng, n, num_patches.min(n)).into_vec()
        })
        .collect()
}

/// Spatial sizes of the PatchNCE layers for an `h x w` input.
pub fn feature_sizes(h: usize, w: usize) -> [(usize, usize); NCE_LAYERS] {
    let d1 = ((h + 1) / 2, (w + 1) / 2);
    [(h, w), d1, ((d1.0 + 1) / 2, (d1.1 + 1) / 2)]
}

/// Contrastive loss between the encoder features of a source batch
/// (keys) and of its translation (queries), summed over layers. With
/// `detach_keys` no gradient flows through the key branch.
#[allow(clippy::too_many_arguments)]
pub fn patchnce_node<T: Float>(
    g: &mut Graph<T>,
    heads: &ProjectionHeads,
    ph: &Bound,
    src_features: &[NodeId],
    out_features: &[NodeId],
    locations: &[Vec<usize>],
    tau: f64,
    detach_keys: bool,
) -> NodeId {
    let mut total: Option<NodeId> = None;
    for (l, locs) in locations.iter().enumerate() {
        let n = g.value(src_features[l]).dims4().0;
        let k_rows = g.gather_locations(src_features[l], locs);
        let mut k = heads.forward(g, ph, l, k_rows);
        if detach_keys {
            k = g.detach(k);
        }
        let q_rows = g.gather_locations(out_features[l], locs);
        let q = heads.forward(g, ph, l, q_rows);
        let loss = g.patch_nce(q, k, n, T::of(tau));
        total = Some(match total {
            Some(t) => g.add(t, loss),
            None => loss,
        });
    }
    total.expect("at least one layer")
}

/// Discriminator loss: the negated adversarial objective.
pub fn d_loss_node<T: Float>(g: &mut Graph<T>, real_logits: NodeId, fake_logits: NodeId, mode: GanMode) -> NodeId {
    let (nr, nf) = (g.value(real_logits).len(), g.value(fake_logits).len());
    let (lr, lf) = match mode {
        GanMode::Log => (g.bce_logits(real_logits, vec![T::one(); nr]), g.bce_logits(fake_logits, vec![T::zero(); nf])),
        GanMode::LeastSquares => (g.mse(real_logits, vec![T::one(); nr]), g.mse(fake_logits, vec![T::zero(); nf])),
    };
    g.add(lr, lf)
}

/// Generator adversarial loss (non-saturating for the log form).
pub fn g_gan_node<T: Float>(g: &mut Graph<T>, fake_logits: NodeId, mode: GanMode) -> NodeId {
    let n = g.value(fake_logits).len();
    match mode {
        GanMode::Log => g.bce_logits(fake_logits, vec![T::one(); n]),
        GanMode::LeastSquares => g.mse(fake_logits, vec![T::one(); n]),
    }
}

/// `(loss_D, loss_G)` of the log-loss game for given logits.
pub fn gan_loss(d_real_logits: &[f64], d_fake_logits: &[f64]) -> Result<(f64, f64)> {
    if d_real_logits.iter().chain(d_fake_logits).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("discriminator logits"));
    }
    if d_real_logits.is_empty() || d_fake_logits.is_empty() {
        return Err(Error::InvalidArgument("empty logit map".into()));
    }
    let mut g = Graph::<f64>::new();
    let r = g.input(Tensor::from_vec(&[d_real_logits.len()], d_real_logits.to_vec()));
    let f = g.input(Tensor::from_vec(&[d_fake_logits.len()], d_fake_logits.to_vec()));
    let ld = d_loss_node(&mut g, r, f, GanMode::Log);
    let lg = g_gan_node(&mut g, f, GanMode::Log);
    Ok((g.value(ld).item(), g.value(lg).item()))
}

/// PatchNCE over precomputed unit embeddings: one `[N, d]` row-major
/// matrix per layer for queries and keys. Sum over layers of the mean
/// cross-entropy over queries.
pub fn patchnce_loss(queries: &[Vec<f64>], keys: &[Vec<f64>], dim: usize, tau: f64) -> Result<f64> {
    if queries.len() != keys.len() || queries.is_empty() {
        return Err(Error::InvalidArgument("queries and keys need the same non-zero number of layers".into()));
    }
    if !(tau > 0.0) || dim == 0 {
        return Err(Error::InvalidArgument("tau and dim must be positive".into()));
    }
    let mut total = 0.0;
    for (q, k) in queries.iter().zip(keys) {
        if q.len() != k.len() || q.len() % dim != 0 {
            return Err(Error::dims(q.len(), k.len()));
        }
        let n = q.len() / dim;
        if n < 2 {
            return Err(Error::InvalidArgument(format!("PatchNCE needs at least 2 patches, got {n}")));
        }
        total += patch_nce_forward(q, k, n, dim, 1, tau).0;
    }
    Ok(total)
}

pub fn cut_total_loss(gan_term: f64, nce_x: f64, nce_y: f64, config: &TranslationConfig) -> f64 {
    gan_term + config.lambda_x * nce_x + config.lambda_y * nce_y
}

/// Every loss term of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub loss_d: f64,
    pub loss_g: f64,
    pub nce_x: f64,
    pub nce_y: f64,
}

/// Loss nodes of the generator objective built on an existing graph.
#[derive(Debug, Clone, Copy)]
pub struct GenLossNodes {
    pub gan: NodeId,
    pub nce_x: Option<NodeId>,
    pub nce_y: Option<NodeId>,
    pub total: NodeId,
}

/// Build the full generator-side objective for source batch `x` and
/// target batch `y`. D weights enter as constants.
#[allow(clippy::too_many_arguments)]
pub fn generator_objective<T: Float>(
    g: &mut Graph<T>,
    nets: &CutNets,
    pg: &Bound,
    ph: &Bound,
    pd: &Bound,
    x: NodeId,
    y: NodeId,
    locations: &[Vec<usize>],
    config: &TranslationConfig,
    detach_keys: bool,
) -> (GenOutput, GenLossNodes) {
    let fwd = nets.generator.forward(g, pg, x);
    let logits = nets.discriminator.forward(g, pd, fwd.image);
    let gan = g_gan_node(g, logits, config.gan_mode);
    let mut total = gan;
    let mut nce_x = None;
    if config.lambda_x > 0.0 {
        let q = nets.generator.encode(g, pg, fwd.image);
        let l = patchnce_node(g, &nets.heads, ph, &fwd.features, &q, locations, config.tau, detach_keys);
        let s = g.scale(l, T::of(config.lambda_x));
        total = g.add(total, s);
        nce_x = Some(l);
    }
    let mut nce_y = None;
    if config.lambda_y > 0.0 {
        let idt = nets.generator.forward(g, pg, y);
        let q = nets.generator.encode(g, pg, idt.image);
        let l = patchnce_node(g, &nets.heads, ph, &idt.features, &q, locations, config.tau, detach_keys);
        let s = g.scale(l, T::of(config.lambda_y));
        total = g.add(total, s);
        nce_y = Some(l);
    }
    (fwd, GenLossNodes { gan, nce_x, nce_y, total })
}

/// Trained translator (generator weights; the discriminator and heads are
/// kept for resuming and inspection).
#[derive(Debug, Clone)]
pub struct TranslationModel {
    pub config: TranslationConfig,
    pub nets: CutNets,
    pub params: CutParams<f32>,
}

impl TranslationModel {
    pub fn new(config: TranslationConfig) -> Result<Self> {
        config.validate()?;
        let (nets, params) = CutNets::new(&config, config.seed);
        Ok(Self { config, nets, params })
    }

    pub fn generator_parameters(&self) -> usize {
        self.params.g.num_trainable()
    }

    /// Translate a batch of equally sized images.
    pub fn generate_batch(&self, imgs: &[&Image]) -> Result<Vec<Image>> {
        let Some(first) = imgs.first() else {
            return Ok(Vec::new());
        };
        let (h, w) = (first.height(), first.width());
        for img in imgs {
            if img.height() % 4 != 0 || img.width() % 4 != 0 {
                return Err(Error::dims("sides divisible by 4", format!("{}x{}", img.height(), img.width())));
            }
            if (img.height(), img.width()) != (h, w) {
                return Err(Error::dims(format!("{h}x{w}"), format!("{}x{}", img.height(), img.width())));
            }
        }
        let mut g = Graph::new();
        let pg = self.params.g.bind(&mut g, false);
        let x = g.input(stack(imgs));
        let out = self.nets.generator.forward(&mut g, &pg, x).image;
        if !g.value(out).all_finite() {
            return Err(Error::NonFinite("generator output"));
        }
        g.value(out)
            .data()
            .chunks(3 * h * w)
            .map(|chw| Image::from_chw(h, w, chw))
            .collect()
    }

    pub fn generate(&self, img: &Image) -> Result<Image> {
        Ok(self.generate_batch(&[img])?.remove(0))
    }

    pub fn to_checkpoint(&self, config_echo: serde_json::Value) -> Checkpoint {
        let mut ck = Checkpoint::new(
            CHECKPOINT_KIND,
            serde_json::json!({ "translation": self.config, "echo": config_echo }),
        );
        ck.push_section("generator", &self.params.g);
        ck.push_section("discriminator", &self.params.d);
        ck.push_section("heads", &self.params.h);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!("expected a {CHECKPOINT_KIND} checkpoint, found `{}`", ck.kind)));
        }
        let config: TranslationConfig = serde_json::from_value(ck.config["translation"].clone())?;
        let mut m = Self::new(config)?;
        for (name, ps) in [("generator", &mut m.params.g), ("discriminator", &mut m.params.d), ("heads", &mut m.params.h)] {
            ps.load_named(&ck.section(name)).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        }
        Ok(m)
    }
}

fn stack(imgs: &[&Image]) -> Tensor<f32> {
    let (h, w) = (imgs[0].height(), imgs[0].width());
    let mut data = Vec::with_capacity(imgs.len() * 3 * h * w);
    for img in imgs {
        data.extend(img.to_chw());
    }
    Tensor::from_vec(&[imgs.len(), 3, h, w], data)
}

/// Adam states of the three networks.
struct Optimizers {
    g: Adam<f32>,
    d: Adam<f32>,
    h: Adam<f32>,
}

/// One alternating update: discriminator first, then generator and heads.
fn train_step(
    model: &mut TranslationModel,
    opt: &mut Optimizers,
    x: Tensor<f32>,
    y: Tensor<f32>,
    locations: &[Vec<usize>],
) -> Result<(f64, f64, f64, f64)> {
    let cfg = &model.config;
    let nets = &model.nets;
    // generator forward on the source batch, kept for the G update
    let mut g = Graph::new();
    let pg = model.params.g.bind(&mut g, true);
    let ph = model.params.h.bind(&mut g, true);
    let xi = g.input(x);
    let yi = g.input(y.clone());
    let fake = nets.generator.forward(&mut g, &pg, xi);

    // discriminator update on real y and detached fake
    let mut gd = Graph::new();
    let pd = model.params.d.bind(&mut gd, true);
    let real = gd.input(y);
    let fake_d = gd.input(g.value(fake.image).clone());
    let real_logits = nets.discriminator.forward(&mut gd, &pd, real);
    let fake_logits = nets.discriminator.forward(&mut gd, &pd, fake_d);
    let loss_d_node = d_loss_node(&mut gd, real_logits, fake_logits, cfg.gan_mode);
    let loss_d = gd.value(loss_d_node).item() as f64;
    gd.backward(loss_d_node);
    let grads_d = model.params.d.grads(&gd, &pd);
    opt.d.step(&mut model.params.d, &grads_d);
    drop(gd);

    // generator objective against the updated discriminator
    let pd = model.params.d.bind(&mut g, false);
    let logits = nets.discriminator.forward(&mut g, &pd, fake.image);
    let gan = g_gan_node(&mut g, logits, cfg.gan_mode);
    let mut total = gan;
    let (mut nce_x, mut nce_y) = (0.0, 0.0);
    if cfg.lambda_x > 0.0 {
        let q = nets.generator.encode(&mut g, &pg, fake.image);
        let l = patchnce_node(&mut g, &nets.heads, &ph, &fake.features, &q, locations, cfg.tau, true);
        nce_x = g.value(l).item() as f64;
        let s = g.scale(l, cfg.lambda_x as f32);
        total = g.add(total, s);
    }
    if cfg.lambda_y > 0.0 {
        let idt = nets.generator.forward(&mut g, &pg, yi);
        let q = nets.generator.encode(&mut g, &pg, idt.image);
        let l = patchnce_node(&mut g, &nets.heads, &ph, &idt.features, &q, locations, cfg.tau, true);
        nce_y = g.value(l).item() as f64;
        let s = g.scale(l, cfg.lambda_y as f32);
        total = g.add(total, s);
    }
    let loss_g = g.value(gan).item() as f64;
    if ![loss_d, loss_g, nce_x, nce_y].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("translation losses"));
    }
    g.backward(total);
    let grads_g = model.params.g.grads(&g, &pg);
    let grads_h = model.params.h.grads(&g, &ph);
    opt.g.step(&mut model.params.g, &grads_g);
    opt.h.step(&mut model.params.h, &grads_h);
    Ok((loss_d, loss_g, nce_x, nce_y))
}

/// Train on unpaired colored (`x`) and transparent (`y`) images. Each
/// epoch visits every colored image once in seeded order; transparent
/// images are drawn from an independent seeded permutation.
pub fn train_translation_images(
    colored: &[Image],
    transparent: &[Image],
    config: &TranslationConfig,
    mut progress: impl FnMut(&StepLog, bool),
) -> Result<(TranslationModel, Vec<StepLog>)> {
    config.validate()?;
    if colored.is_empty() || transparent.is_empty() {
        return Err(Error::Dataset("translation needs non-empty colored and transparent sets".into()));
    }
    let (h, w) = (colored[0].height(), colored[0].width());
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::dims("sides divisible by 4", format!("{h}x{w}")));
    }
    if colored.iter().chain(transparent).any(|i| (i.height(), i.width()) != (h, w)) {
        return Err(Error::Dataset("all translation images must share one size".into()));
    }
    let mut model = TranslationModel::new(config.clone())?;
    let mut opt = Optimizers {
        g: Adam::new(config.lr_g, config.beta1, config.beta2),
        d: Adam::new(config.lr_d, config.beta1, config.beta2),
        h: Adam::new(config.lr_h, config.beta1, config.beta2),
    };
    let sizes = feature_sizes(h, w);
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, epoch as u64));
        let mut ox: Vec<usize> = (0..colored.len()).collect();
        let mut oy: Vec<usize> = (0..transparent.len()).collect();
        ox.shuffle(&mut rng);
        oy.shuffle(&mut rng);
        let batches = ox.chunks(config.batch_size).count();
        for (b, xb) in ox.chunks(config.batch_size).enumerate() {
            let yb: Vec<&Image> = (0..xb.len())
                .map(|j| &transparent[oy[(b * config.batch_size + j) % oy.len()]])
                .collect();
            let xs: Vec<&Image> = xb.iter().map(|&i| &colored[i]).collect();
            let locations = sample_locations(&sizes, config.num_patches, &mut rng);
            let (loss_d, loss_g, nce_x, nce_y) = train_step(&mut model, &mut opt, stack(&xs), stack(&yb), &locations)?;
            let entry = StepLog { step, epoch, loss_d, loss_g, nce_x, nce_y };
            progress(&entry, b + 1 == batches);
            log.push(entry);
            step += 1;
        }
    }
    Ok((model, log))
}

pub fn train_translation(
    colored: &DatasetManifest,
    transparent: &DatasetManifest,
    config: &TranslationConfig,
    progress: impl FnMut(&StepLog, bool),
) -> Result<(TranslationModel, Vec<StepLog>)> {
    if colored.is_empty() || transparent.is_empty() {
        return Err(Error::Dataset("translation needs non-empty colored and transparent manifests".into()));
    }
    let xs = colored.records.iter().map(|r| colored.load_image(r)).collect::<Result<Vec<_>>>()?;
    let ys = transparent.records.iter().map(|r| transparent.load_image(r)).collect::<Result<Vec<_>>>()?;
    train_translation_images(&xs, &ys, config, progress)
}

/// Translate every colored record and carry its mask over byte for byte.
pub fn translate_dataset(colored_with_masks: &DatasetManifest, model: &TranslationModel, out_dir: &Path) -> Result<DatasetManifest> {
    let (images, masks) = (out_dir.join("images"), out_dir.join("masks"));
    for d in [&images, &masks] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut out = DatasetManifest::new(DomainTag::SyntheticTransparent, out_dir);
    out.config_echo = serde_json::json!({
        "source": colored_with_masks.config_echo,
        "translation": model.config,
    });
    for chunk in colored_with_masks.records.chunks(16) {
        let mut imgs = Vec::with_capacity(chunk.len());
        for r in chunk {
            if r.mask_path.is_none() {
                return Err(Error::Dataset(format!("record {} has no mask to carry over", r.image_id)));
            }
            imgs.push(colored_with_masks.load_image(r)?);
        }
        let refs: Vec<&Image> = imgs.iter().collect();
        for (r, fake) in chunk.iter().zip(model.generate_batch(&refs)?) {
            let image_path = Path::new("images").join(format!("{}.png", r.image_id));
            let mask_path = Path::new("masks").join(format!("{}.png", r.image_id));
            fake.save_png(&out_dir.join(&image_path))?;
            let src = colored_with_masks.mask_path(r).expect("checked above");
            fs::copy(&src, out_dir.join(&mask_path)).map_err(|e| Error::io(&src, e))?;
            out.records.push(Record { image_path, mask_path: Some(mask_path), ..r.clone() });
        }
    }
    out.save()?;
    Ok(out)
}
