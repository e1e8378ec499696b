//! Independent scalar re-implementations of the losses, written from the
//! formulas without touching the autodiff engine.

#![allow(dead_code)]

use liquidseg::imaging::BinaryMask;
use liquidseg::segmentation::bce_loss;
use liquidseg::translation::{cut_total_loss, gan_loss, patchnce_loss, TranslationConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-7;

fn prob(z: f64) -> f64 {
    (1.0 / (1.0 + (-z).exp())).clamp(EPS, 1.0 - EPS)
}

/// `(loss_D, loss_G)` for the log-loss game.
pub fn gan_oracle(real: &[f64], fake: &[f64]) -> (f64, f64) {
    let er = real.iter().map(|&z| prob(z).ln()).sum::<f64>() / real.len() as f64;
    let ef = fake.iter().map(|&z| (1.0 - prob(z)).ln()).sum::<f64>() / fake.len() as f64;
    let g = -fake.iter().map(|&z| prob(z).ln()).sum::<f64>() / fake.len() as f64;
    (-(er + ef), g)
}

pub fn bce_oracle(logits: &[f64], target: &[bool]) -> f64 {
    let mut s = 0.0;
    for (&z, &t) in logits.iter().zip(target) {
        let p = prob(z);
        s -= if t { p.ln() } else { (1.0 - p).ln() };
    }
    s / logits.len() as f64
}

/// One layer: mean over queries of -log softmax of the diagonal.
fn nce_layer(q: &[f64], k: &[f64], d: usize, tau: f64) -> f64 {
    let n = q.len() / d;
    let dot = |i: usize, j: usize| (0..d).map(|c| q[i * d + c] * k[j * d + c]).sum::<f64>() / tau;
    let mut total = 0.0;
    for i in 0..n {
        let denom: f64 = (0..n).map(|j| dot(i, j).exp()).sum();
        total += -(dot(i, i).exp() / denom).ln();
    }
    total / n as f64
}

pub fn patchnce_oracle(q: &[Vec<f64>], k: &[Vec<f64>], d: usize, tau: f64) -> f64 {
    q.iter().zip(k).map(|(a, b)| nce_layer(a, b, d, tau)).sum()
}

fn unit_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    for row in v.chunks_mut(d) {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        row.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Largest absolute deviation of each loss from its oracle over `trials`
/// random inputs: `[gan, bce, patchnce, total]`.
pub fn max_deviations(trials: usize, seed: u64) -> [f64; 4] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 4];
    for _ in 0..trials {
        let nr = rng.gen_range(1..40);
        let nf = rng.gen_range(1..40);
        let real: Vec<f64> = (0..nr).map(|_| rng.gen_range(-12.0..12.0)).collect();
        let fake: Vec<f64> = (0..nf).map(|_| rng.gen_range(-12.0..12.0)).collect();
        let (d, g) = gan_loss(&real, &fake).expect("finite logits");
        let (od, og) = gan_oracle(&real, &fake);
        worst[0] = worst[0].max((d - od).abs()).max((g - og).abs());

        let (h, w) = (rng.gen_range(1..12), rng.gen_range(1..12));
        let logits: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-20.0..20.0)).collect();
        let t: Vec<bool> = (0..h * w).map(|_| rng.gen()).collect();
        let mask = BinaryMask::new(h, w, t.clone()).expect("dims");
        worst[1] = worst[1].max((bce_loss(&logits, &mask).expect("finite") - bce_oracle(&logits, &t)).abs());

        let layers = rng.gen_range(1..4);
        let d = rng.gen_range(2..9);
        let tau = rng.gen_range(0.05..1.0);
        let (mut qs, mut ks) = (Vec::new(), Vec::new());
        for _ in 0..layers {
            let n = rng.gen_range(2..20);
            qs.push(unit_rows(n, d, &mut rng));
            ks.push(unit_rows(n, d, &mut rng));
        }
        let nce = patchnce_loss(&qs, &ks, d, tau).expect("valid shapes");
        worst[2] = worst[2].max((nce - patchnce_oracle(&qs, &ks, d, tau)).abs());

        let cfg = TranslationConfig { lambda_x: rng.gen_range(0.0..3.0), lambda_y: rng.gen_range(0.0..3.0), ..Default::default() };
        let (a, b, c) = (rng.gen_range(0.0..5.0), rng.gen_range(0.0..5.0), rng.gen_range(0.0..5.0));
        let oracle = a + cfg.lambda_x * b + cfg.lambda_y * c;
        worst[3] = worst[3].max((cut_total_loss(a, b, c, &cfg) - oracle).abs());
    }
    worst
}
