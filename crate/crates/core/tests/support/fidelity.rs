//! Metric oracles, background-subtraction fidelity and the segmentation
//! canary, shared by the integration tests and the acceptance binary.

#![allow(dead_code)]

use liquidseg::bgsub::{fit_background_model, subtract, DEFAULT_THRESHOLD_SIGMA};
use liquidseg::eval::eval_pouring;
use liquidseg::imaging::{iou, BinaryMask, Image};
use liquidseg::pour::{ControllerConfig, PourTrace};
use liquidseg::segmentation::{train_on_samples, SegTrainConfig, SegmentationModel};
use liquidseg::synth::{derive_seed, DatasetOptions, render_empty_frames, render_scene, RenderMode, Rig, SceneSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Desk-default sensor noise.
const NOISE: f64 = 0.004;

fn mask3(bits: u32) -> BinaryMask {
    BinaryMask::new(3, 3, (0..9).map(|i| bits >> i & 1 == 1).collect()).unwrap()
}

/// `iou` on every pair of 3x3 masks against popcount arithmetic. Returns
/// the number of mismatching pairs.
pub fn exhaustive_iou_mismatches() -> usize {
    let masks: Vec<BinaryMask> = (0..512).map(mask3).collect();
    let mut bad = 0;
    for a in 0..512u32 {
        for b in 0..512u32 {
            let inter = (a & b).count_ones();
            let union = (a | b).count_ones();
            let want = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
            if iou(&masks[a as usize], &masks[b as usize]).unwrap() != want {
                bad += 1;
            }
        }
    }
    bad
}

fn trace(l0: f64, target: f64, final_fill: f64) -> PourTrace {
    PourTrace {
        steps: Vec::new(),
        l0,
        final_fill,
        final_error: final_fill - target,
        complete: true,
        config: ControllerConfig { l_target: target, ..Default::default() },
        q_max: 0.05,
        seed: 0,
    }
}

/// Largest absolute gap between `eval_pouring` RMSE (per scenario and
/// aggregate) and a direct recomputation, over random trace sets.
pub fn rmse_max_deviation(trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let scenarios: Vec<(f64, f64)> = (0..rng.gen_range(1..5))
            .map(|i| (0.1 * i as f64, 0.5 + 0.1 * i as f64))
            .collect();
        let mut traces = Vec::new();
        for _ in 0..rng.gen_range(1..30) {
            let (l0, t) = scenarios[rng.gen_range(0..scenarios.len())];
            traces.push(trace(l0, t, (t + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0)));
        }
        let report = eval_pouring("oracle", &traces).unwrap();
        let rmse = |ts: &[&PourTrace]| {
            let mut s = 0.0;
            for t in ts {
                let e = 100.0 * (t.final_fill - t.config.l_target);
                s += e * e;
            }
            (s / ts.len() as f64).sqrt()
        };
        for st in &report.scenarios {
            let group: Vec<&PourTrace> =
                traces.iter().filter(|t| Some(t.l0) == st.l0 && Some(t.config.l_target) == st.l_target).collect();
            worst = worst.max((st.rmse_pct - rmse(&group)).abs());
        }
        let all: Vec<&PourTrace> = traces.iter().collect();
        worst = worst.max((report.aggregate.rmse_pct - rmse(&all)).abs());
    }
    worst
}

/// Mean IoU of background-subtraction masks against rendered ground truth
/// over `n` colored 64x64 scenes, each on its own rig.
pub fn bgsub_mean_iou(n: usize, seed: u64) -> f64 {
    let mut total = 0.0;
    for i in 0..n as u64 {
        let rig = Rig::random(64, derive_seed(seed, 2 * i));
        let spec = SceneSpec {
            sensor_noise: NOISE,
            ..SceneSpec::new(rig, (i as f64 + 0.5) / n as f64, derive_seed(seed, 2 * i + 1))
        };
        let (img, truth, _) = render_scene(&spec, RenderMode::Colored).unwrap();
        let frames = render_empty_frames(&rig, 30, spec.sensor_noise, derive_seed(seed, 1000 + i)).unwrap();
        let model = fit_background_model(&frames, 3, i).unwrap();
        let mask = subtract(&model, &img, DEFAULT_THRESHOLD_SIGMA).unwrap();
        total += iou(&mask, &truth).unwrap();
    }
    total / n as f64
}

/// Eight labeled scenes from one rig, fills stratified over
/// [0, 1], for the overfit canary.
pub fn canary_samples(seed: u64, mode: RenderMode) -> Vec<(Image, BinaryMask)> {
    let opts = DatasetOptions { rig_seed: seed, ..DatasetOptions::new(8, seed, mode) };
    (0..8)
        .map(|i| {
            let (img, mask, _) = render_scene(&opts.scene_spec(i), mode).unwrap();
            (img, mask)
        })
        .collect()
}

/// Train the desk-scale UNet for `epochs` on the canary pairs and return
/// the model with its mean training IoU.
pub fn canary(epochs: usize, seed: u64) -> (SegmentationModel, f64) {
    let samples = canary_samples(seed, RenderMode::Colored);
    let cfg = SegTrainConfig { epochs, seed, ..Default::default() };
    let (model, _) = train_on_samples(&samples, &cfg, None, |_| {}).unwrap();
    let imgs: Vec<&Image> = samples.iter().map(|s| &s.0).collect();
    let preds = model.predict_masks(&imgs, cfg.threshold).unwrap();
    let mean = preds.iter().zip(&samples).map(|(p, s)| iou(p, &s.1).unwrap()).sum::<f64>() / samples.len() as f64;
    (model, mean)
}
