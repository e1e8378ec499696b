//! Two-state pouring controller and a simulated tilting-cup plant.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{BinaryMask, Image};
use crate::postprocess::{estimate_fill, DEFAULT_KERNEL};
use crate::synth::{derive_seed, render_scene, RenderMode, Rig, SceneSpec};

/// Tilt (degrees) below which nothing flows.
pub const POUR_THRESHOLD_DEG: f64 = 30.0;
/// Perception is replaced by the true level for this long after start.
pub const PERCEPTION_WARMUP_S: f64 = 2.0;
/// Hard stop for runaway simulations.
const MAX_SIM_SECONDS: f64 = 600.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ControlState {
    NotPouring,
    Pouring,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    pub l_target: f64,
    pub epsilon: f64,
    pub initial_pour_duration: f64,
    pub loop_period: f64,
    /// Tilt held while pouring, degrees.
    pub pour_tilt: f64,
    /// Degrees per second.
    pub tilt_rate: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            l_target: 0.5,
            epsilon: 0.01,
            initial_pour_duration: 1.0,
            loop_period: 0.1,
            pour_tilt: 60.0,
            tilt_rate: 60.0,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(0.0..=1.0).contains(&self.l_target) {
            return bad("l_target must lie in [0, 1]");
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad("epsilon must lie in (0, 1)");
        }
        if !(self.loop_period > 0.0 && self.loop_period.is_finite()) {
            return bad("loop_period must be positive");
        }
        if !(self.tilt_rate > 0.0) {
            return bad("tilt_rate must be positive");
        }
        if !(self.pour_tilt > POUR_THRESHOLD_DEG && self.pour_tilt <= 180.0) {
            return bad("pour_tilt must exceed the 30 degree flow threshold");
        }
        if !(self.initial_pour_duration >= 0.0) {
            return bad("initial_pour_duration must be non-negative");
        }
        Ok(())
    }

    /// Fill delivered after the stop command while the cup tilts back from
    /// `pour_tilt`, per unit `q_max`.
    pub fn shutoff_drain_seconds(&self) -> f64 {
        let span = self.pour_tilt - POUR_THRESHOLD_DEG;
        // flow falls linearly from full to zero over span / rate seconds
        0.5 * span / self.tilt_rate
    }
}

/// One controller tick. Returns the command and the updated latch.
pub fn controller_step(l_hat: f64, t: f64, config: &ControllerConfig, latched_stop: bool) -> (ControlState, bool) {
    if latched_stop {
        (ControlState::NotPouring, true)
    } else if t < config.initial_pour_duration {
        (ControlState::Pouring, false)
    } else if l_hat >= config.l_target - config.epsilon {
        (ControlState::NotPouring, true)
    } else {
        (ControlState::Pouring, false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    /// True fill fraction of the receiving cup.
    pub fill: f64,
    /// Tilt of the source container, degrees.
    pub tilt: f64,
    /// Liquid left in the source, in receiving-cup fill units.
    pub source_remaining: f64,
    /// Fill fraction per second at full tilt.
    pub q_max: f64,
}

impl PlantState {
    pub fn new(fill: f64, q_max: f64) -> Self {
        Self { fill, tilt: 0.0, source_remaining: 2.0, q_max }
    }
}

fn flow_fraction(tilt: f64, pour_tilt: f64) -> f64 {
    ((tilt - POUR_THRESHOLD_DEG) / (pour_tilt - POUR_THRESHOLD_DEG)).clamp(0.0, 1.0)
}

/// Advance the plant by `dt`. Tilt ramps toward the commanded angle at
/// `tilt_rate`; the inflow integral is exact for the piecewise-linear tilt.
pub fn plant_step(state: &PlantState, cmd: ControlState, dt: f64, config: &ControllerConfig) -> PlantState {
    assert!(dt > 0.0, "plant_step: dt must be positive");
    let target = match cmd {
        ControlState::Pouring => config.pour_tilt,
        ControlState::NotPouring => 0.0,
    };
    let rate = config.tilt_rate;
    let dir = (target - state.tilt).signum();
    let t_reach = (target - state.tilt).abs() / rate;
    let tilt_at = |t: f64| {
        let v = if t >= t_reach { target } else { state.tilt + dir * rate * t };
        // keep rounding from leaving the tilt a hair short of its target
        if (v - target).abs() < 1e-9 {
            target
        } else {
            v
        }
    };
    let mut cuts = vec![0.0, t_reach.min(dt), dt];
    if dir != 0.0 {
        let t_cross = (POUR_THRESHOLD_DEG - state.tilt) / (dir * rate);
        if t_cross > 0.0 && t_cross < t_reach.min(dt) {
            cuts.push(t_cross);
        }
    }
    cuts.sort_by(f64::total_cmp);
    let mut volume = 0.0;
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b > a {
            let fa = flow_fraction(tilt_at(a), config.pour_tilt);
            let fb = flow_fraction(tilt_at(b), config.pour_tilt);
            volume += 0.5 * (fa + fb) * (b - a);
        }
    }
    let inflow = (state.q_max * volume).min(state.source_remaining).min(1.0 - state.fill).max(0.0);
    PlantState {
        fill: (state.fill + inflow).min(1.0),
        tilt: tilt_at(dt),
        source_remaining: state.source_remaining - inflow,
        q_max: state.q_max,
    }
}

/// Source of fill-level readings for the controller.
pub trait FillSensor {
    fn read(&mut self, true_fill: f64, t: f64, step: u64) -> Result<f64>;
}

/// Reads the true fill level.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleSensor;

impl FillSensor for OracleSensor {
    fn read(&mut self, true_fill: f64, _t: f64, _step: u64) -> Result<f64> {
        Ok(true_fill.clamp(0.0, 1.0))
    }
}

/// Renders the current state as a transparent-liquid frame, segments it
/// and post-processes the mask. Falls back to the true level during the
/// warm-up window.
pub struct VisionSensor<F> {
    pub rig: Rig,
    pub sensor_noise: f64,
    pub seed: u64,
    pub kernel: usize,
    pub segment: F,
}

impl<F: FnMut(&Image) -> Result<BinaryMask>> FillSensor for VisionSensor<F> {
    fn read(&mut self, true_fill: f64, t: f64, step: u64) -> Result<f64> {
        if t < PERCEPTION_WARMUP_S {
            return Ok(true_fill.clamp(0.0, 1.0));
        }
        let spec = SceneSpec {
            seed: derive_seed(self.seed, step),
            rig: self.rig,
            fill_fraction: true_fill.clamp(0.0, 1.0),
            sensor_noise: self.sensor_noise,
        };
        let (img, _, bbox) = render_scene(&spec, RenderMode::Transparent)?;
        let mask = (self.segment)(&img)?;
        Ok(estimate_fill(&mask, &bbox, self.kernel)?.level)
    }
}

impl<F> VisionSensor<F> {
    pub fn new(rig: Rig, seed: u64, segment: F) -> Self {
        Self { rig, sensor_noise: 0.004, seed, kernel: DEFAULT_KERNEL, segment }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub t: f64,
    pub state: ControlState,
    pub l_true: f64,
    pub l_hat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PourTrace {
    pub steps: Vec<TraceStep>,
    pub l0: f64,
    pub final_fill: f64,
    pub final_error: f64,
    /// False when the source ran dry, the cup overflowed or the time limit
    /// hit before shutdown.
    pub complete: bool,
    pub config: ControllerConfig,
    pub q_max: f64,
    pub seed: u64,
}

impl PourTrace {
    /// One JSON object per step, then a summary line.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        let io = |e| Error::io(path, e);
        for s in &self.steps {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n").map_err(io)?;
        }
        let summary = serde_json::json!({
            "summary": true,
            "l0": self.l0,
            "l_target": self.config.l_target,
            "final_fill": self.final_fill,
            "final_error": self.final_error,
            "complete": self.complete,
            "q_max": self.q_max,
            "seed": self.seed,
            "config": self.config,
        });
        serde_json::to_writer(&mut w, &summary)?;
        w.write_all(b"\n").map_err(io)?;
        w.flush().map_err(io)
    }
}

/// Closed-loop pour: at every tick read the level, step the controller,
/// then advance the plant by one period. Ends once the stop is latched and
/// the source is upright again.
pub fn simulate_pour(
    config: &ControllerConfig,
    initial: PlantState,
    sensor: &mut dyn FillSensor,
    seed: u64,
) -> Result<PourTrace> {
    config.validate()?;
    let (l0, q_max) = (initial.fill, initial.q_max);
    if !(0.0..=1.0).contains(&l0) {
        return Err(Error::InvalidArgument(format!("initial fill {l0} outside [0, 1]")));
    }
    if !(q_max > 0.0) {
        return Err(Error::InvalidArgument("q_max must be positive".into()));
    }
    let mut plant = initial;
    let mut latched = false;
    let mut steps = Vec::new();
    let mut complete = false;
    let max_steps = (MAX_SIM_SECONDS / config.loop_period).ceil() as u64;
    for k in 0..max_steps {
        // multiply rather than accumulate so ticks land on exact multiples
        let t = k as f64 * config.loop_period;
        let l_hat = sensor.read(plant.fill, t, k)?;
        let (cmd, latch) = controller_step(l_hat, t, config, latched);
        latched = latch;
        steps.push(TraceStep { t, state: cmd, l_true: plant.fill, l_hat });
        if latched && plant.tilt == 0.0 {
            complete = true;
            break;
        }
        // a dry source or an overflowing cup ends the episode unfinished
        if !latched && (plant.source_remaining <= 0.0 || plant.fill >= 1.0) {
            break;
        }
        plant = plant_step(&plant, cmd, config.loop_period, config);
    }
    Ok(PourTrace {
        steps,
        l0,
        final_fill: plant.fill,
        final_error: plant.fill - config.l_target,
        complete,
        config: *config,
        q_max,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn controller_rules() {
        let c = ControllerConfig::default();
        assert_eq!(controller_step(c.l_target, 0.0, &c, false), (ControlState::Pouring, false));
        assert_eq!(
            controller_step(c.l_target - c.epsilon / 2.0, 2.0, &c, false),
            (ControlState::NotPouring, true)
        );
        assert_eq!(controller_step(0.0, 5.0, &c, true), (ControlState::NotPouring, true));
        assert_eq!(controller_step(0.1, 2.0, &c, false), (ControlState::Pouring, false));
    }

    #[test]
    fn plant_rest_ramp_and_flow() {
        let c = ControllerConfig::default();
        let rest = PlantState::new(0.3, 0.05);
        assert_eq!(plant_step(&rest, ControlState::NotPouring, 0.1, &c), rest);

        let mut s = rest;
        let mut t = 0.0;
        while s.tilt < 60.0 {
            s = plant_step(&s, ControlState::Pouring, 0.1, &c);
            t += 0.1;
        }
        assert!((t - 1.0f64).abs() < 1e-9);

        let full = PlantState { tilt: 60.0, ..PlantState::new(0.2, 0.05) };
        let next = plant_step(&full, ControlState::Pouring, 0.1, &c);
        assert!((next.fill - 0.205).abs() < 1e-12);
    }

    #[test]
    fn integration_is_step_size_independent() {
        let c = ControllerConfig::default();
        let mut coarse = PlantState::new(0.0, 0.05);
        let mut fine = coarse;
        for _ in 0..15 {
            coarse = plant_step(&coarse, ControlState::Pouring, 0.1, &c);
            for _ in 0..10 {
                fine = plant_step(&fine, ControlState::Pouring, 0.01, &c);
            }
        }
        for _ in 0..10 {
            coarse = plant_step(&coarse, ControlState::NotPouring, 0.1, &c);
            for _ in 0..10 {
                fine = plant_step(&fine, ControlState::NotPouring, 0.01, &c);
            }
        }
        assert!((coarse.fill - fine.fill).abs() < 1e-12);
        // 0.5 s ramp below threshold, 0.5 s ramp above, 0.5 s full, 0.5 s drain
        assert!((coarse.fill - 0.05 * (0.25 + 0.5 + 0.25)).abs() < 1e-12);
    }

    #[test]
    fn fill_never_exceeds_one() {
        let c = ControllerConfig::default();
        let mut s = PlantState { tilt: 60.0, ..PlantState::new(0.999, 0.05) };
        for _ in 0..5 {
            s = plant_step(&s, ControlState::Pouring, 0.1, &c);
        }
        assert_eq!(s.fill, 1.0);
    }

    #[test]
    fn exhausted_source_marks_trace_incomplete() {
        let c = ControllerConfig { l_target: 0.9, ..Default::default() };
        let plant = PlantState { source_remaining: 0.2, ..PlantState::new(0.0, 0.05) };
        let tr = simulate_pour(&c, plant, &mut OracleSensor, 0).unwrap();
        assert!(!tr.complete);
        assert!((tr.final_fill - 0.2).abs() < 1e-12);
    }

    #[test]
    fn stuck_sensor_never_overfills() {
        struct Stuck;
        impl FillSensor for Stuck {
            fn read(&mut self, _: f64, _: f64, _: u64) -> Result<f64> {
                Ok(0.0)
            }
        }
        let c = ControllerConfig::default();
        let plant = PlantState { source_remaining: 5.0, ..PlantState::new(0.0, 0.05) };
        let tr = simulate_pour(&c, plant, &mut Stuck, 0).unwrap();
        assert!(!tr.complete);
        assert_eq!(tr.final_fill, 1.0);
        // overflow ends the episode well before the time limit
        assert!(tr.steps.len() < 400, "{}", tr.steps.len());
    }
}
