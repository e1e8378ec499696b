//! Micro networks and finite-difference checks of the training losses,
//! shared by the gradient tests and the acceptance binary.

#![allow(dead_code)]

use liquidseg::nn::{Bound, Graph, Mode, NodeId, ParamSet, Tensor};
use liquidseg::segmentation::{UNet, UNetConfig};
use liquidseg::translation::{
    d_loss_node, feature_sizes, generator_objective, patchnce_node, sample_locations, CutNets, CutParams,
    DiscriminatorConfig, GanMode, GeneratorConfig, TranslationConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Five-point stencil steps, largest first. A smaller step is used only
/// when the larger one moves some ReLU, max-pool or clamp across its kink.
pub const STEPS: [f64; 5] = [1e-4, 5e-5, 2e-5, 1e-5, 1e-6];
/// Denominator floor so structurally tiny gradients compare absolutely.
pub const FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradReport {
    pub name: String,
    pub params: usize,
    /// Parameters whose stencil crossed a ReLU, max-pool or clamp boundary.
    pub skipped: usize,
    pub max_rel_err: f64,
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

fn randomize(ps: &mut ParamSet<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = ps.ids().collect();
    for id in ids {
        if ps.is_trainable(id) {
            ps.get_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        }
    }
}

fn image_batch(n: usize, side: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_vec(&[n, 3, side, side], (0..n * 3 * side * side).map(|_| rng.gen::<f64>()).collect())
}

/// Analytic vs five-point central-difference gradients w.r.t. every
/// trainable scalar of the sets listed in `wrt`. A scalar is skipped when
/// every step in `STEPS` leaves the smooth piece of the unperturbed point.
fn check_sets(
    name: &str,
    sets: &mut [ParamSet<f64>],
    wrt: &[usize],
    build: &dyn Fn(&mut Graph<f64>, &[Bound]) -> NodeId,
) -> GradReport {
    let eval = |sets: &[ParamSet<f64>]| {
        let mut g = Graph::new();
        let b: Vec<Bound> = sets.iter().map(|s| s.bind(&mut g, false)).collect();
        let l = build(&mut g, &b);
        (g.value(l).item(), g.branch_signature())
    };
    let base = eval(sets).1;
    let mut g = Graph::new();
    let b: Vec<Bound> = sets.iter().enumerate().map(|(i, s)| s.bind(&mut g, wrt.contains(&i))).collect();
    let loss = build(&mut g, &b);
    g.backward(loss);
    let analytic: Vec<Vec<Option<Tensor<f64>>>> = wrt.iter().map(|&i| sets[i].grads(&g, &b[i])).collect();
    let (mut worst, mut count, mut skipped) = (0.0f64, 0usize, 0usize);
    for (wi, &si) in wrt.iter().enumerate() {
        let ids: Vec<_> = sets[si].ids().collect();
        for (pi, id) in ids.into_iter().enumerate() {
            let Some(grad) = &analytic[wi][pi] else { continue };
            for j in 0..grad.len() {
                let orig = sets[si].get(id).data()[j];
                let mut at = |d: f64| {
                    sets[si].get_mut(id).data_mut()[j] = orig + d;
                    eval(sets)
                };
                let num = STEPS.iter().find_map(|&h| {
                    let pts = [at(2.0 * h), at(h), at(-h), at(-2.0 * h)];
                    let [p2, p1, m1, m2] = pts.map(|p| p.0);
                    pts.iter().all(|p| p.1 == base).then(|| (m2 - p2 + 8.0 * (p1 - m1)) / (12.0 * h))
                });
                sets[si].get_mut(id).data_mut()[j] = orig;
                let Some(num) = num else {
                    skipped += 1;
                    continue;
                };
                worst = worst.max(rel_err(grad.data()[j], num));
                count += 1;
            }
        }
    }
    GradReport { name: name.into(), params: count, skipped, max_rel_err: worst }
}

/// Tiny translation setups for 8x8 images. The second one keeps a
/// residual block by shrinking the stem and output kernels to 1x1.
pub fn micro_translation_configs() -> Vec<TranslationConfig> {
    let base = TranslationConfig {
        num_patches: 6,
        embed_dim: 4,
        tau: 0.2,
        discriminator: DiscriminatorConfig { base_channels: 1, layers: 2 },
        ..Default::default()
    };
    vec![
        TranslationConfig { generator: GeneratorConfig { base_channels: 1, residual_blocks: 0, stem_kernel: 3, input_skip: true }, ..base.clone() },
        TranslationConfig {
            generator: GeneratorConfig { base_channels: 1, residual_blocks: 1, stem_kernel: 1, input_skip: false },
            gan_mode: GanMode::LeastSquares,
            lambda_y: 0.5,
            ..base
        },
    ]
}

struct Setup {
    nets: CutNets,
    sets: Vec<ParamSet<f64>>,
    x: Tensor<f64>,
    y: Tensor<f64>,
    locations: Vec<Vec<usize>>,
}

fn setup(cfg: &TranslationConfig, seed: u64) -> Setup {
    let (nets, CutParams { g, d, h }) = CutNets::new::<f64>(cfg, seed);
    let mut sets = vec![g, d, h];
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    sets.iter_mut().for_each(|s| randomize(s, &mut rng));
    let x = image_batch(2, 8, &mut rng);
    let y = image_batch(2, 8, &mut rng);
    let locations = sample_locations(&feature_sizes(8, 8), cfg.num_patches, &mut rng);
    Setup { nets, sets, x, y, locations }
}

/// Parameter counts of generator, discriminator and heads.
pub fn micro_param_counts(cfg: &TranslationConfig) -> [usize; 3] {
    let (_, p) = CutNets::new::<f64>(cfg, 0);
    [p.g.num_trainable(), p.d.num_trainable(), p.h.num_trainable()]
}

/// Discriminator loss w.r.t. discriminator weights; fakes are fixed.
pub fn check_d_loss(cfg: &TranslationConfig, seed: u64) -> GradReport {
    let mut s = setup(cfg, seed);
    let fake = {
        let mut g = Graph::new();
        let pg = s.sets[0].bind(&mut g, false);
        let xi = g.input(s.x.clone());
        let out = s.nets.generator.forward(&mut g, &pg, xi).image;
        g.value(out).clone()
    };
    let (nets, y, mode) = (&s.nets, s.y.clone(), cfg.gan_mode);
    check_sets("loss_D", &mut s.sets, &[1], &move |g, b| {
        let real = g.input(y.clone());
        let fk = g.input(fake.clone());
        let lr = nets.discriminator.forward(g, &b[1], real);
        let lf = nets.discriminator.forward(g, &b[1], fk);
        d_loss_node(g, lr, lf, mode)
    })
}

/// Full generator objective w.r.t. generator and projection-head weights.
pub fn check_g_loss(cfg: &TranslationConfig, seed: u64) -> GradReport {
    let mut s = setup(cfg, seed);
    let (nets, x, y, locs) = (&s.nets, s.x.clone(), s.y.clone(), s.locations.clone());
    check_sets("loss_G", &mut s.sets, &[0, 2], &move |g, b| {
        let xi = g.input(x.clone());
        let yi = g.input(y.clone());
        generator_objective(g, nets, &b[0], &b[2], &b[1], xi, yi, &locs, cfg, false).1.total
    })
}

/// PatchNCE between an input and its translation, w.r.t. generator and heads.
pub fn check_patchnce(cfg: &TranslationConfig, seed: u64) -> GradReport {
    let mut s = setup(cfg, seed);
    let (nets, x, locs, tau) = (&s.nets, s.x.clone(), s.locations.clone(), cfg.tau);
    check_sets("patchnce", &mut s.sets, &[0, 2], &move |g, b| {
        let xi = g.input(x.clone());
        let fwd = nets.generator.forward(g, &b[0], xi);
        let q = nets.generator.encode(g, &b[0], fwd.image);
        patchnce_node(g, &nets.heads, &b[2], &fwd.features, &q, &locs, tau, false)
    })
}

/// Segmentation BCE of a one-down/one-up UNet on 16x16 inputs.
pub fn check_seg_bce(seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    let net = UNet::new(UNetConfig { width: 2, depth: 1 }, &mut ps, &mut rng).expect("valid config");
    randomize(&mut ps, &mut rng);
    let x = image_batch(2, 16, &mut rng);
    let target: Vec<f64> = (0..2 * 256).map(|_| (rng.gen::<f64>() < 0.4) as u8 as f64).collect();
    let buffers = ps.clone();
    let mut sets = vec![ps];
    check_sets("segmentation bce", &mut sets, &[0], &move |g, b| {
        let xi = g.input(x.clone());
        let logits = net.forward(g, &b[0], &buffers, xi, Mode::Train);
        g.bce_logits(logits, target.clone())
    })
}
