//! Invariant checks shared by the property tests and the acceptance
//! binary. Each returns a description of the first violation.

#![allow(dead_code)]

use liquidseg::imaging::{BinaryMask, BoundingBox};
use liquidseg::postprocess::{estimate_fill, largest_component, morphological_open};
use liquidseg::pour::{controller_step, simulate_pour, ControlState, ControllerConfig, OracleSensor, PlantState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<(), String>;

pub fn random_mask(h: usize, w: usize, density: f64, rng: &mut impl Rng) -> BinaryMask {
    BinaryMask::new(h, w, (0..h * w).map(|_| rng.gen::<f64>() < density).collect()).unwrap()
}

/// Blocky random mask: a few rectangles plus salt noise, so openings are
/// not trivially empty.
pub fn blobby_mask(h: usize, w: usize, rng: &mut impl Rng) -> BinaryMask {
    let mut m = random_mask(h, w, rng.gen_range(0.0..0.15), rng);
    for _ in 0..rng.gen_range(0..5) {
        let (y0, x0) = (rng.gen_range(0..h), rng.gen_range(0..w));
        let (y1, x1) = ((y0 + rng.gen_range(1..12)).min(h), (x0 + rng.gen_range(1..12)).min(w));
        for y in y0..y1 {
            for x in x0..x1 {
                m.set(y, x, true);
            }
        }
    }
    m
}

pub fn check_opening(m: &BinaryMask, kernel: usize) -> Check {
    let o = morphological_open(m, kernel).map_err(|e| e.to_string())?;
    if !o.is_subset_of(m) {
        return Err("opening added pixels".into());
    }
    if morphological_open(&o, kernel).map_err(|e| e.to_string())? != o {
        return Err("opening is not idempotent".into());
    }
    Ok(())
}

fn connected_4(m: &BinaryMask) -> bool {
    let (h, w) = (m.height(), m.width());
    let Some(start) = m.data().iter().position(|&v| v) else {
        return true;
    };
    let mut seen = vec![false; h * w];
    let mut stack = vec![start];
    seen[start] = true;
    let mut n = 0;
    while let Some(p) = stack.pop() {
        n += 1;
        let (y, x) = (p / w, p % w);
        let mut nb = Vec::with_capacity(4);
        if y > 0 {
            nb.push(p - w);
        }
        if y + 1 < h {
            nb.push(p + w);
        }
        if x > 0 {
            nb.push(p - 1);
        }
        if x + 1 < w {
            nb.push(p + 1);
        }
        for q in nb {
            if m.data()[q] && !seen[q] {
                seen[q] = true;
                stack.push(q);
            }
        }
    }
    n == m.count()
}

pub fn check_largest_component(m: &BinaryMask) -> Check {
    let c = largest_component(m);
    if !c.is_subset_of(m) {
        return Err("component not a subset of its input".into());
    }
    if !connected_4(&c) {
        return Err("component is not 4-connected".into());
    }
    if c.is_empty() != m.is_empty() {
        return Err("emptiness changed".into());
    }
    Ok(())
}

pub const CUP: BoundingBox = BoundingBox { x_min: 12, y_min: 10, x_max: 51, y_max: 49 };

/// Full-width liquid body from `surface` down to the cup bottom.
pub fn liquid_body(h: usize, w: usize, surface: usize) -> BinaryMask {
    BinaryMask::from_fn(h, w, |y, x| CUP.contains(x, y) && y >= surface)
}

/// Half-filled cup plus 30 speckles outside the body.
pub fn check_speckled_half_fill(rng: &mut impl Rng) -> Check {
    let clean = liquid_body(64, 64, CUP.y_min + CUP.height() / 2);
    let mut noisy = clean.clone();
    let mut added = 0;
    while added < 30 {
        let (y, x) = (rng.gen_range(0..64), rng.gen_range(0..64));
        if !noisy.get(y, x) {
            noisy.set(y, x, true);
            added += 1;
        }
    }
    let a = estimate_fill(&clean, &CUP, 5).map_err(|e| e.to_string())?;
    let b = estimate_fill(&noisy, &CUP, 5).map_err(|e| e.to_string())?;
    if a.level != 0.5 || b.level != a.level {
        return Err(format!("clean {} vs speckled {}", a.level, b.level));
    }
    Ok(())
}

/// Nested masks `m1 ⊆ m2`: liquid bodies anchored at the cup bottom with
/// `m2` filled at least as high, each with sparse speckle noise where
/// `m2`'s noise contains `m1`'s.
pub fn nested_liquid_masks(rng: &mut impl Rng) -> (BinaryMask, BinaryMask) {
    let s2 = rng.gen_range(CUP.y_min..=CUP.y_max + 1);
    let s1 = rng.gen_range(s2..=CUP.y_max + 1);
    let noise2 = random_mask(64, 64, rng.gen_range(0.0..0.05), rng);
    let keep = random_mask(64, 64, rng.gen_range(0.0..1.0), rng);
    let b1 = liquid_body(64, 64, s1);
    let b2 = liquid_body(64, 64, s2);
    let m1 = BinaryMask::from_fn(64, 64, |y, x| b1.get(y, x) || (noise2.get(y, x) && keep.get(y, x)));
    let m2 = BinaryMask::from_fn(64, 64, |y, x| b2.get(y, x) || noise2.get(y, x));
    (m1, m2)
}

pub fn check_nested_monotone(m1: &BinaryMask, m2: &BinaryMask) -> Check {
    if !m1.is_subset_of(m2) {
        return Err("generator produced non-nested masks".into());
    }
    let a = estimate_fill(m1, &CUP, 5).map_err(|e| e.to_string())?;
    let b = estimate_fill(m2, &CUP, 5).map_err(|e| e.to_string())?;
    if a.level > b.level {
        return Err(format!("inner mask level {} exceeds outer {}", a.level, b.level));
    }
    Ok(())
}

/// Run every post-processing invariant on `n` random masks.
pub fn postprocess_suite(n: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        let (h, w) = (rng.gen_range(1..40), rng.gen_range(1..40));
        let m = blobby_mask(h, w, &mut rng);
        let k = [1, 3, 5, 7][i % 4];
        check_opening(&m, k).map_err(|e| format!("mask {i}: {e}"))?;
        check_largest_component(&m).map_err(|e| format!("mask {i}: {e}"))?;
        check_speckled_half_fill(&mut rng).map_err(|e| format!("case {i}: {e}"))?;
        let (a, b) = nested_liquid_masks(&mut rng);
        check_nested_monotone(&a, &b).map_err(|e| format!("case {i}: {e}"))?;
    }
    Ok(())
}

/// Feed an arbitrary reading sequence through the controller and verify
/// that once the stop fires it never pours again.
pub fn check_latch(readings: &[f64], config: &ControllerConfig) -> Check {
    let mut latched = false;
    for (k, &l) in readings.iter().enumerate() {
        let t = k as f64 * config.loop_period;
        let was = latched;
        let (cmd, latch) = controller_step(l, t, config, latched);
        if was && (!latch || cmd == ControlState::Pouring) {
            return Err(format!("tick {k}: latch released or pouring resumed"));
        }
        if latch && cmd == ControlState::Pouring {
            return Err(format!("tick {k}: latched while pouring"));
        }
        latched = latch;
    }
    Ok(())
}

pub fn latch_suite(n: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        let config = ControllerConfig {
            l_target: rng.gen_range(0.0..1.0),
            epsilon: rng.gen_range(0.001..0.2),
            initial_pour_duration: rng.gen_range(0.0..2.0),
            ..Default::default()
        };
        let len = rng.gen_range(1..200);
        let readings: Vec<f64> = (0..len).map(|_| rng.gen_range(-0.2..1.2)).collect();
        check_latch(&readings, &config).map_err(|e| format!("sequence {i}: {e}"))?;
    }
    Ok(())
}

pub const SCENARIOS: [(f64, f64); 4] = [(0.0, 0.25), (0.0, 0.5), (0.0, 0.75), (0.25, 0.75)];

/// Oracle-perception pours at epsilon 0.01, q_max 0.05 and 10 Hz. Returns
/// `(l0, target, final_error)` per scenario.
pub fn oracle_scenarios() -> Result<Vec<(f64, f64, f64)>, String> {
    SCENARIOS
        .iter()
        .map(|&(l0, target)| {
            let config = ControllerConfig { l_target: target, epsilon: 0.01, loop_period: 0.1, ..Default::default() };
            let trace = simulate_pour(&config, PlantState::new(l0, 0.05), &mut OracleSensor, 0).map_err(|e| e.to_string())?;
            if !trace.complete {
                return Err(format!("{l0} -> {target} did not finish"));
            }
            Ok((l0, target, trace.final_error))
        })
        .collect()
}
