//! Workspace layout, configuration, and the commands that chain every
//! stage from scene generation to the pouring report.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bgsub::{pseudo_label_scenes, DEFAULT_THRESHOLD_SIGMA};
use crate::dataset::{DatasetManifest, SplitTag};
use crate::error::{Error, Result};
use crate::eval::{
    eval_pouring, eval_segmentation, render_table, run_ablation_color_jitter, run_ablation_fraction, write_reports,
    PourEvalReport, SegEvalReport,
};
use crate::imaging::{iou, ColorJitter, Image};
use crate::nn::Checkpoint;
use crate::pour::{simulate_pour, ControllerConfig, FillSensor, OracleSensor, PlantState, VisionSensor};
use crate::segmentation::{load_labeled, train_on_samples, SegTrainConfig, SegmentationModel};
use crate::synth::{derive_seed, make_dataset, render_empty_frames, DatasetOptions, RenderMode};
use crate::translation::{train_translation, translate_dataset, TranslationConfig, TranslationModel};

pub const WORKSPACE_ENV: &str = "LIQUIDSEG_WORKSPACE";
pub const DEFAULT_WORKSPACE: &str = "liquidseg-workspace";
pub const STAMP_FILE: &str = "stamp.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    SynthGen,
    PseudoLabel,
    TrainTranslate,
    Translate,
    TrainSeg,
    Segment,
    EvalSeg,
    Ablate,
    PourSim,
    Report,
}

impl Command {
    pub const ALL: [Command; 10] = [
        Command::SynthGen,
        Command::PseudoLabel,
        Command::TrainTranslate,
        Command::Translate,
        Command::TrainSeg,
        Command::Segment,
        Command::EvalSeg,
        Command::Ablate,
        Command::PourSim,
        Command::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::SynthGen => "synth-gen",
            Command::PseudoLabel => "pseudo-label",
            Command::TrainTranslate => "train-translate",
            Command::Translate => "translate",
            Command::TrainSeg => "train-seg",
            Command::Segment => "segment",
            Command::EvalSeg => "eval-seg",
            Command::Ablate => "ablate",
            Command::PourSim => "pour-sim",
            Command::Report => "report",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSettings {
    pub image_size: usize,
    pub colored_count: usize,
    pub transparent_count: usize,
    pub test_count: usize,
    pub num_rigs: u32,
    pub sensor_noise: f64,
    /// Empty-scene frames captured per rig for the background model.
    pub empty_frames: usize,
}

impl Default for SynthSettings {
    fn default() -> Self {
        Self {
            image_size: 64,
            colored_count: 200,
            transparent_count: 200,
            test_count: 40,
            num_rigs: 4,
            sensor_noise: 0.004,
            empty_frames: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BgSettings {
    pub threshold_sigma: f64,
}

impl Default for BgSettings {
    fn default() -> Self {
        Self { threshold_sigma: DEFAULT_THRESHOLD_SIGMA }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perception {
    Oracle,
    Vision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PourSettings {
    pub q_max: f64,
    /// `[l0, l_target]` pairs.
    pub scenarios: Vec<[f64; 2]>,
    pub perception: Perception,
    pub runs_per_scenario: usize,
}

impl Default for PourSettings {
    fn default() -> Self {
        Self {
            q_max: 0.05,
            scenarios: vec![[0.0, 0.25], [0.0, 0.5], [0.0, 0.75], [0.25, 0.75]],
            perception: Perception::Vision,
            runs_per_scenario: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub jitter: ColorJitter,
    pub fractions: Vec<f64>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { jitter: ColorJitter::magnitudes(0.4, 0.4, 0.5), fractions: vec![0.01, 0.1] }
    }
}

/// Every setting of a pipeline run. All fields have desk-scale defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Not echoed into artifacts so identical runs in different
    /// directories stay byte-identical.
    #[serde(skip_serializing)]
    pub workspace: Option<PathBuf>,
    pub seed: u64,
    pub synth: SynthSettings,
    pub bgsub: BgSettings,
    pub translation: TranslationConfig,
    pub segmentation: SegTrainConfig,
    pub controller: ControllerConfig,
    pub pour: PourSettings,
    pub eval: EvalSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            workspace: None,
            seed: 0,
            synth: SynthSettings::default(),
            bgsub: BgSettings::default(),
            translation: TranslationConfig::default(),
            segmentation: SegTrainConfig::default(),
            controller: ControllerConfig::default(),
            pour: PourSettings::default(),
            eval: EvalSettings::default(),
        }
    }
}

fn config_err(path: &str, e: impl fmt::Display) -> Error {
    Error::Config { path: path.into(), message: e.to_string() }
}

/// Seed streams of the stages, all derived from the pipeline seed.
mod stage {
    pub const RIGS: u64 = 0;
    pub const COLORED: u64 = 1;
    pub const TRANSPARENT: u64 = 2;
    pub const TEST: u64 = 3;
    pub const EMPTY: u64 = 4;
    pub const BGSUB: u64 = 5;
    pub const TRANSLATE: u64 = 6;
    pub const SEG: u64 = 7;
    pub const ABLATE: u64 = 8;
    pub const POUR: u64 = 9;
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.synth;
        if s.image_size < 16 || s.image_size % 16 != 0 {
            return Err(config_err("synth.image_size", "must be a multiple of 16 and at least 16"));
        }
        if s.colored_count == 0 || s.transparent_count == 0 || s.test_count == 0 {
            return Err(config_err("synth", "dataset counts must be positive"));
        }
        if s.num_rigs == 0 {
            return Err(config_err("synth.num_rigs", "must be positive"));
        }
        if !(0.0..=0.5).contains(&s.sensor_noise) {
            return Err(config_err("synth.sensor_noise", "must lie in [0, 0.5]"));
        }
        if s.empty_frames < 2 {
            return Err(config_err("synth.empty_frames", "need at least 2 frames per rig"));
        }
        if !(self.bgsub.threshold_sigma > 0.0) {
            return Err(config_err("bgsub.threshold_sigma", "must be positive"));
        }
        self.translation.validate().map_err(|e| config_err("translation", e))?;
        self.segmentation.validate().map_err(|e| config_err("segmentation", e))?;
        self.controller.validate().map_err(|e| config_err("controller", e))?;
        let p = &self.pour;
        if !(p.q_max > 0.0) {
            return Err(config_err("pour.q_max", "must be positive"));
        }
        if p.runs_per_scenario == 0 || p.scenarios.is_empty() {
            return Err(config_err("pour", "need at least one scenario and one run"));
        }
        if p.scenarios.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(config_err("pour.scenarios", "levels must lie in [0, 1]"));
        }
        self.eval.jitter.validate().map_err(|e| config_err("eval.jitter", e))?;
        if self.eval.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(config_err("eval.fractions", "fractions must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn stage_seed(&self, stage: u64) -> u64 {
        derive_seed(self.seed, stage)
    }

    /// Provenance embedded in every artifact.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::json!({ "pipeline_seed": self.seed, "config": self })
    }

    fn dataset_options(&self, stage_id: u64, mode: RenderMode) -> DatasetOptions {
        let s = &self.synth;
        let (count, prefix, split, masks) = match stage_id {
            stage::COLORED => (s.colored_count, "col", SplitTag::Train, false),
            stage::TRANSPARENT => (s.transparent_count, "tr", SplitTag::Train, false),
            _ => (s.test_count, "test", SplitTag::Test, true),
        };
        DatasetOptions {
            count,
            seed: self.stage_seed(stage_id),
            mode,
            image_size: s.image_size,
            rig_seed: self.stage_seed(stage::RIGS),
            num_rigs: s.num_rigs,
            sensor_noise: s.sensor_noise,
            with_masks: masks,
            split,
            id_prefix: prefix.into(),
        }
    }

    /// Translation settings with the seed derived for this pipeline seed.
    pub fn translation_config(&self) -> TranslationConfig {
        TranslationConfig { seed: derive_seed(self.stage_seed(stage::TRANSLATE), self.translation.seed), ..self.translation.clone() }
    }

    pub fn seg_config(&self) -> SegTrainConfig {
        SegTrainConfig { seed: derive_seed(self.stage_seed(stage::SEG), self.segmentation.seed), ..self.segmentation.clone() }
    }
}

/// Insert `value` at the dotted `key` of a TOML table.
fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_err(key, "empty key segment"));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| config_err(key, format!("`{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Parse `key=value`; the value is read as a TOML literal, falling back to
/// a bare string.
pub fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| config_err(s, "override must look like key=value"))?;
    let (k, v) = (k.trim(), v.trim());
    let value = match format!("v = {v}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("just inserted"),
        Err(_) => toml::Value::String(v.to_string()),
    };
    Ok((k.to_string(), value))
}

/// Config from optional TOML text plus `key=value` overrides.
pub fn config_from_str(text: &str, overrides: &[String]) -> Result<PipelineConfig> {
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| config_err("<file>", e.message()))?;
    for o in overrides {
        let (k, v) = parse_override(o)?;
        set_dotted(&mut table, &k, v)?;
    }
    let cfg: PipelineConfig = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
        let path = e.path().to_string();
        config_err(&path, e.into_inner())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<PipelineConfig> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|e| config_err(&p.display().to_string(), e))?,
        None => String::new(),
    };
    config_from_str(&text, overrides)
}

/// Workspace directory from flag, environment, config, then default.
pub fn resolve_workspace(flag: Option<&Path>, cfg: &PipelineConfig) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(WORKSPACE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .or_else(|| cfg.workspace.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_WORKSPACE))
}

/// Fixed layout under the workspace root.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn colored(&self) -> PathBuf {
        self.root.join("datasets/colored")
    }
    pub fn colored_labeled(&self) -> PathBuf {
        self.root.join("datasets/colored_labeled")
    }
    pub fn transparent(&self) -> PathBuf {
        self.root.join("datasets/transparent")
    }
    pub fn test(&self) -> PathBuf {
        self.root.join("datasets/transparent_test")
    }
    pub fn empty(&self) -> PathBuf {
        self.root.join("datasets/empty")
    }
    pub fn synthetic(&self) -> PathBuf {
        self.root.join("datasets/synthetic_transparent")
    }
    pub fn translate_model(&self) -> PathBuf {
        self.root.join("models/translate")
    }
    pub fn seg_model(&self) -> PathBuf {
        self.root.join("models/seg")
    }
    pub fn segment_out(&self) -> PathBuf {
        self.root.join("eval/segment")
    }
    pub fn eval_seg(&self) -> PathBuf {
        self.root.join("eval/seg")
    }
    pub fn eval_ablate(&self) -> PathBuf {
        self.root.join("eval/ablate")
    }
    pub fn traces(&self) -> PathBuf {
        self.root.join("traces")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("eval/report")
    }
    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    /// Output directories owned by `cmd`.
    pub fn outputs(&self, cmd: Command) -> Vec<PathBuf> {
        match cmd {
            Command::SynthGen => vec![self.colored(), self.transparent(), self.test(), self.empty()],
            Command::PseudoLabel => vec![self.colored_labeled()],
            Command::TrainTranslate => vec![self.translate_model()],
            Command::Translate => vec![self.synthetic()],
            Command::TrainSeg => vec![self.seg_model()],
            Command::Segment => vec![self.segment_out()],
            Command::EvalSeg => vec![self.eval_seg()],
            Command::Ablate => vec![self.eval_ablate()],
            Command::PourSim => vec![self.traces()],
            Command::Report => vec![self.report()],
        }
    }
}

pub const TRANSLATOR_FILE: &str = "translator.ckpt";
pub const UNET_FILE: &str = "unet.ckpt";

fn require(artifact: PathBuf, producer: Command) -> Result<PathBuf> {
    if artifact.exists() {
        Ok(artifact)
    } else {
        Err(Error::MissingPrerequisite { command: producer.name().into(), artifact })
    }
}

fn require_stamped(dir: PathBuf, producer: Command) -> Result<PathBuf> {
    require(dir.join(STAMP_FILE), producer)?;
    Ok(dir)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub command: String,
    pub pipeline_seed: u64,
    pub config: serde_json::Value,
}

fn write_stamp(dir: &Path, cmd: Command, cfg: &PipelineConfig) -> Result<()> {
    let stamp = Stamp { command: cmd.name().into(), pipeline_seed: cfg.seed, config: serde_json::to_value(cfg)? };
    write_json(&dir.join(STAMP_FILE), &stamp)
}

pub fn read_stamp(dir: &Path) -> Result<Stamp> {
    let p = dir.join(STAMP_FILE);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for it in items {
        serde_json::to_writer(&mut out, it)?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Console plus per-command log file.
pub struct Logger {
    file: Option<File>,
    quiet: bool,
    start: Instant,
}

impl Logger {
    pub fn open(ws: &Workspace, cmd: Command, quiet: bool) -> Result<Self> {
        let dir = ws.logs();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(format!("{}.log", cmd.name()));
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self { file: Some(file), quiet, start: Instant::now() })
    }

    pub fn silent() -> Self {
        Self { file: None, quiet: true, start: Instant::now() }
    }

    pub fn log(&mut self, msg: impl AsRef<str>) {
        let line = format!("[{:7.1}s] {}", self.start.elapsed().as_secs_f64(), msg.as_ref());
        if !self.quiet {
            eprintln!("{line}");
        }
        if let Some(f) = &mut self.file {
            // logging must never abort a run
            let _ = writeln!(f, "{line}");
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Let `report` combine artifacts from different pipeline seeds.
    pub force: bool,
}

pub fn run_command(cmd: Command, cfg: &PipelineConfig, ws: &Workspace, opts: RunOptions, log: &mut Logger) -> Result<()> {
    log.log(format!("{cmd}: workspace {}", ws.root.display()));
    // prerequisites are checked before any output is touched
    match cmd {
        Command::SynthGen => synth_gen(cfg, ws, log),
        Command::PseudoLabel => pseudo_label(cfg, ws, log),
        Command::TrainTranslate => train_translate(cfg, ws, log),
        Command::Translate => translate(cfg, ws, log),
        Command::TrainSeg => train_seg(cfg, ws, log),
        Command::Segment => segment(cfg, ws, log),
        Command::EvalSeg => eval_seg(cfg, ws, log),
        Command::Ablate => ablate(cfg, ws, log),
        Command::PourSim => pour_sim(cfg, ws, log),
        Command::Report => report(cfg, ws, opts, log),
    }?;
    log.log(format!("{cmd}: done"));
    Ok(())
}

fn reecho(mut m: DatasetManifest, cfg: &PipelineConfig) -> Result<DatasetManifest> {
    m.config_echo = serde_json::json!({ "stage": m.config_echo, "pipeline": cfg.echo() });
    m.save()?;
    Ok(m)
}

fn synth_gen(cfg: &PipelineConfig, ws: &Workspace, log: &mut Logger) -> Result<()> {
    let sets = [
        (ws.colored(), stage::COLORED, RenderMode::Colored),
        (ws.transparent(), stage::TRANSPARENT, RenderMode::Transparent),
        (ws.test(), stage::TEST, RenderMode::Transparent),
    ];
    for (dir, id, mode) in sets {
        fresh_dir(&dir)?;
        let m = make_dataset(&cfg.dataset_options(id, mode), &dir)?;
        reecho(m, cfg)?;
        write_stamp(&dir, Command::SynthGen, cfg)?;
        log.log(format!("wrote {} ({} images)", dir.display(), cfg.dataset_options(id, mode).count));
    }
    let empty = ws.empty();
    fresh_dir(&empty)?;
    let opts = cfg.dataset_options(stage::COLORED, RenderMode::Colored);
    for sid in 0..cfg.synth.num_rigs {
        let dir = empty.join(format!("scene_{sid}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let seed = derive_seed(cfg.stage_seed(stage::EMPTY), sid as u64);
        for (k, f) in render_empty_frames(&opts.rig(sid), cfg.synth.empty_frames, cfg.synth.sensor_noise, seed)?
            .iter()
            .enumerate()
        {
            f.save_png(&dir.join(format!("frame_{k:03}.png")))?;
        }
    }
    write_stamp(&empty, Command::SynthGen, cfg)?;
    log.log(format!("wrote {} empty frames for each of {} rigs", cfg.synth.empty_frames, cfg.synth.num_rigs));
    Ok(())
}

fn load_empty_frames(dir: &Path, num_rigs: u32) -> Result<BTreeMap<u32, Vec<Image>>> {
    let mut frames = BTreeMap::new();
    for sid in 0..num_rigs {
        let sd = dir.join(format!("scene_{sid}"));
        let mut paths: Vec<PathBuf> = fs::read_dir(&sd)
            .map_err(|e| Error::io(&sd, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "png"))
            .collect();
        paths.sort();
        frames.insert(sid, paths.iter().map(|p| Image::load_png(p)).collect::<Result<Vec<_>>>()?);
    }
    Ok(frames)
}

fn pseudo_label(cfg: &PipelineConfig, ws: &Workspace, log: &mut Logger) -> Result<()> {
    let colored = DatasetManifest::load(&require_stamped(ws.colored(), Command::SynthGen)?)?;
    let frames = load_empty_frames(&require_stamped(ws.empty(), Command::SynthGen)?, cfg.synth.num_rigs)?;
    let out = ws.colored_labeled();
    fresh_dir(&out)?;
    let labeled = pseudo_label_scenes(&colored, &frames, cfg.bgsub.threshold_sigma, cfg.stage_seed(stage::BGSUB), &out)?;
    // diagnostic only: the generator's own masks are never used for training
    let mut total = 0.0;
    for (a, b) in colored.records.iter().zip(&labeled.records) {
        total += iou(&colored.load_mask(a)?, &labeled.load_mask(b)?)?;
    }
    log.log(format!("pseudo-labelled {} images, mean IoU vs rendered truth {:.4}", labeled.len(), total / labeled.len() as f64));
    reecho(labeled, cfg)?;
    write_stamp(&out, Command::PseudoLabel, cfg)
}

fn train_translate(cfg: &PipelineConfig, ws: &Workspace, log: &mut Logger) -> Result<()> {
    let colored = DatasetManifest::load(&require_stamped(ws.colored(), Command::SynthGen)?)?;
    let transparent = DatasetManifest::load(&require_stamped(ws.transparent(), Command::SynthGen)?)?;
    let out = ws.translate_model();
    fresh_dir(&out)?;
    let tc = cfg.translation_config();
    let mut acc = [0.0f64; 4];
    let mut n = 0usize;
    let (model, steps) = train_translation(&colored, &transparent, &tc, |s, last| {
        for (a, v) in acc.iter_mut().zip([s.loss_d, s.loss_g, s.nce_x, s.nce_y]) {
            *a += v;
        }
        n += 1;
        if last {
            let m = acc.map(|a| a / n as f64);
            log.log(format!(
                "translate epoch {:>3}/{}: loss_D {:.4} loss_G {:.4} nce_X {:.4} nce_Y {:.4}",
                s.epoch + 1,
                tc.epochs,
                m[0],
                m[1],
                m[2],
                m[3]
            ));
            acc = [0.0; 4];
            n = 0;
        }
    })?;
    model.to_checkpoint(cfg.echo()).save(&out.join(TRANSLATOR_FILE))?;
    write_jsonl(&out.join("train_log.jsonl"), &steps)?;
    write_stamp(&out, Command::TrainTranslate, cfg)
}

fn translate(cfg: &PipelineConfig, ws: &Workspace, log: &mut Logger) -> Result<()> {
    let ck = require(ws.translate_model().join(TRANSLATOR_FILE), Command::TrainTranslate)?;
    let labeled = DatasetManifest::load(&require_stamped(ws.colored_labeled(), Command::PseudoLabel)?)?;
    let model = TranslationModel::from_checkpoint(&Checkpoint::load(&ck)?)?;
    let out = ws.synthetic();
    fresh_dir(&out)?;
    let m = translate_dataset(&labeled, &model, &out)?;
    log.log(format!("translated {} images", m.len()));
    reecho(m, cfg)?;
    write_stamp(&out, Command::Translate, cfg)
}

fn train_seg(cfg: &PipelineConfig, ws: &Workspace, log: &mut Logger) -> Result<()> {
    let synthetic = DatasetManifest::load(&require_stamped(ws.synthetic(), Command::Translate)?)?;
    let out = ws.seg_model();
    fresh_dir(&out)?;
    let sc = cfg.seg_config();
    let samples = load_labeled(&synthetic)?;
    let (model, epochs) = train_on_samples(&samples, &sc, None, |e| {
        log.log(format!("segmentation epoch {:>3}/{}: loss {:.4}", e.epoch + 1, sc.epochs, e.mean_loss))
    })?;
    model.to_checkpoint(cfg.echo()).save(&out.join(UNET_FILE))?;
    write_jsonl(&out.join("train_log.jsonl"), &epochs)?;
    write_stamp(&out, Command::TrainSeg, cfg)
}

fn load_seg(ws: &Workspace) -> Result<SegmentationModel> {
    let ck = require(ws.seg_model().join(UNET_FILE), Command::TrainSeg)?;
    SegmentationModel::from_checkpoint(&Checkpoint::load(&ck)?)
}

fn segment(cfg: &PipelineConfig, ws: &Workspace, log: &mut Logger) -> Result<()> {
    let model = load_seg(ws)?;
    let test = DatasetManifest::load(&require_stamped(ws.test(), Command::SynthGen)?)?;
    let out = ws.segment_out();
    fresh_dir(&out)?;
    let masks_dir = out.join("masks");
    fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;
    let mut index = Vec::with_capacity(test.len());
    for r in &test.records {
        let mask = model.predict_mask(&test.load_image(r)?, cfg.segmentation.threshold)?;
        let rel = Path::new("masks").join(format!("{}.png", r.image_id));
        mask.save_png(&out.join(&rel))?;
        index.push(serde_json::json!({ "image_id": r.image_id, "mask_path": rel, "foreground_pixels": mask.count() }));
    }
    log.log(format!("segmented {} images", index.len()));
    write_jsonl(&out.join("predictions.jsonl"), &index)?;
    write_stamp(&out, Command::Segment, cfg)
}

fn eval_seg(cfg: &PipelineConfig, ws: &Workspace, log: &mut Logger) -> Result<()> {
    let model = load_seg(ws)?;
    let test = DatasetManifest::load(&require_stamped(ws.test(), Command::SynthGen)?)?;
    let out = ws.eval_seg();
    fresh_dir(&out)?;
    let mut rep = eval_segmentation(&model, &test, cfg.segmentation.threshold)?;
    rep.label = "ours".into();
    log.log(format!("\n{}", render_table(std::slice::from_ref(&rep), &[])));
    write_reports(&out, "report", std::slice::from_ref(&rep), &[])?;
    write_json(&out.join("report.json"), &rep)?;
    write_stamp(&out, Command::EvalSeg, cfg)
}

fn ablate(cfg: &PipelineConfig, ws: &Workspace, log: &mut Logger) -> Result<()> {
    let labeled = DatasetManifest::load(&require_stamped(ws.colored_labeled(), Command::PseudoLabel)?)?;
    let synthetic = DatasetManifest::load(&require_stamped(ws.synthetic(), Command::Translate)?)?;
    let test = DatasetManifest::load(&require_stamped(ws.test(), Command::SynthGen)?)?;
    let out = ws.eval_ablate();
    fresh_dir(&out)?;
    let sc = cfg.seg_config();
    let mut reports = Vec::new();
    log.log("ablation: color jitter on pseudo-labelled colored images");
    let (rep, _) = run_ablation_color_jitter(&labeled, &test, &cfg.eval.jitter, &sc, |e| {
        log.log(format!("jitter epoch {:>3}/{}: loss {:.4}", e.epoch + 1, sc.epochs, e.mean_loss))
    })?;
    reports.push(rep);
    for &f in &cfg.eval.fractions {
        log.log(format!("ablation: {}% of the synthetic set", f * 100.0));
        let (rep, _) = run_ablation_fraction(&synthetic, f, &test, &sc, cfg.stage_seed(stage::ABLATE), |e| {
            if (e.epoch + 1) % 10 == 0 {
                log.log(format!("subset epoch {:>3}/{}: loss {:.4}", e.epoch + 1, sc.epochs, e.mean_loss))
            }
        })?;
        reports.push(rep);
    }
    log.log(format!("\n{}", render_table(&reports, &[])));
    write_reports(&out, "report", &reports, &[])?;
    write_json(&out.join("report.json"), &reports)?;
    write_stamp(&out, Command::Ablate, cfg)
}

/// File-name label of a scenario, e.g. `0-50`.
fn scenario_label(l0: f64, target: f64) -> String {
    format!("{:.0}-{:.0}", 100.0 * l0, 100.0 * target)
}

fn pour_sim(cfg: &PipelineConfig, ws: &Workspace, log: &mut Logger) -> Result<()> {
    let model = match cfg.pour.perception {
        Perception::Vision => Some(load_seg(ws)?),
        Perception::Oracle => None,
    };
    let out = ws.traces();
    fresh_dir(&out)?;
    let rigs = cfg.dataset_options(stage::TEST, RenderMode::Transparent);
    let mut traces = Vec::new();
    let mut incomplete = 0usize;
    for (si, &[l0, target]) in cfg.pour.scenarios.iter().enumerate() {
        for run in 0..cfg.pour.runs_per_scenario {
            let seed = derive_seed(cfg.stage_seed(stage::POUR), (si * cfg.pour.runs_per_scenario + run) as u64);
            let cc = ControllerConfig { l_target: target, ..cfg.controller };
            let plant = PlantState::new(l0, cfg.pour.q_max);
            let trace = match &model {
                Some(m) => {
                    let thr = cfg.segmentation.threshold;
                    let mut sensor = VisionSensor::new(rigs.rig(run as u32 % cfg.synth.num_rigs), seed, |img: &Image| {
                        m.predict_mask(img, thr)
                    });
                    sensor.sensor_noise = cfg.synth.sensor_noise;
                    simulate_pour(&cc, plant, &mut sensor as &mut dyn FillSensor, seed)?
                }
                None => simulate_pour(&cc, plant, &mut OracleSensor, seed)?,
            };
            trace.write_jsonl(&out.join(format!("pour_{}_run{run}.jsonl", scenario_label(l0, target))))?;
            log.log(format!(
                "pour {:.0}% -> {:.0}% run {run}: final {:.4} error {:+.4}{}",
                100.0 * l0,
                100.0 * target,
                trace.final_fill,
                trace.final_error,
                if trace.complete { "" } else { " (incomplete)" }
            ));
            if trace.complete {
                traces.push(trace);
            } else {
                incomplete += 1;
            }
        }
    }
    let label = match cfg.pour.perception {
        Perception::Vision => "vision",
        Perception::Oracle => "oracle",
    };
    // an untrained model can overfill every episode; that is a result, not an error
    let rep = if traces.is_empty() { None } else { Some(eval_pouring(label, &traces)?) };
    let reps: Vec<PourEvalReport> = rep.iter().cloned().collect();
    if reps.is_empty() {
        log.log(format!("{label} pouring: no complete episodes ({incomplete} incomplete)"));
    } else {
        log.log(format!("\n{}", render_table(&[], &reps)));
    }
    write_reports(&out, "report", &[], &reps)?;
    write_json(&out.join("report.json"), &serde_json::json!({ "report": rep, "incomplete": incomplete }))?;
    write_stamp(&out, Command::PourSim, cfg)
}

fn report(cfg: &PipelineConfig, ws: &Workspace, opts: RunOptions, log: &mut Logger) -> Result<()> {
    let seg_dir = require_stamped(ws.eval_seg(), Command::EvalSeg)?;
    let pour_dir = require_stamped(ws.traces(), Command::PourSim)?;
    let ablate_dir = ws.eval_ablate();
    let has_ablate = ablate_dir.join(STAMP_FILE).exists();
    let mut dirs = vec![seg_dir.clone(), pour_dir.clone()];
    if has_ablate {
        dirs.push(ablate_dir.clone());
    }
    for d in &dirs {
        let s = read_stamp(d)?;
        if s.pipeline_seed != cfg.seed {
            let msg = format!("{} was produced with pipeline seed {}, current seed is {}", d.display(), s.pipeline_seed, cfg.seed);
            if !opts.force {
                return Err(Error::InvalidArgument(format!("{msg}; pass --force to combine anyway")));
            }
            log.log(format!("warning: {msg}"));
        }
    }
    let mut seg: Vec<SegEvalReport> = vec![read_json(&seg_dir.join("report.json"))?];
    if has_ablate {
        seg.extend(read_json::<Vec<SegEvalReport>>(&ablate_dir.join("report.json"))?);
    }
    #[derive(Deserialize)]
    struct PourFile {
        report: Option<PourEvalReport>,
        incomplete: usize,
    }
    let pf = read_json::<PourFile>(&pour_dir.join("report.json"))?;
    if pf.incomplete > 0 {
        log.log(format!("pouring: {} incomplete episodes left out of the statistics", pf.incomplete));
    }
    let pour: Vec<PourEvalReport> = pf.report.into_iter().collect();
    let out = ws.report();
    fresh_dir(&out)?;
    let table = render_table(&seg, &pour);
    println!("{table}");
    log.log(format!("\n{table}"));
    write_reports(&out, "summary", &seg, &pour)?;
    write_stamp(&out, Command::Report, cfg)
}

/// Every command in pipeline order.
pub fn run_all(cfg: &PipelineConfig, ws: &Workspace, opts: RunOptions, quiet: bool) -> Result<()> {
    for cmd in Command::ALL {
        let mut log = Logger::open(ws, cmd, quiet)?;
        run_command(cmd, cfg, ws, opts, &mut log)?;
    }
    Ok(())
}

/// Process exit code of a result: 0 ok, 2 config, 3 missing prerequisite,
/// 4 anything else.
pub fn exit_code(r: &Result<()>) -> i32 {
    match r {
        Ok(()) => 0,
        Err(Error::Config { .. }) => 2,
        Err(Error::MissingPrerequisite { .. }) => 3,
        Err(_) => 4,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(config_from_str(&text, &[]).unwrap(), cfg);
    }

    #[test]
    fn overrides_and_errors() {
        let cfg = config_from_str("seed = 3", &["translation.epochs=2".into(), "pour.perception=oracle".into()]).unwrap();
        assert_eq!((cfg.seed, cfg.translation.epochs, cfg.pour.perception), (3, 2, Perception::Oracle));
        let e = config_from_str("", &["segmentation.epochs=\"x\"".into()]).unwrap_err();
        assert!(matches!(&e, Error::Config { path, .. } if path == "segmentation.epochs"), "{e}");
        let e = config_from_str("[synth]\ncolour = 1", &[]).unwrap_err();
        assert!(matches!(&e, Error::Config { path, .. } if path.starts_with("synth")), "{e}");
        assert!(matches!(config_from_str("", &["noequals".into()]), Err(Error::Config { .. })));
        assert!(matches!(config_from_str("", &["synth.num_rigs=0".into()]), Err(Error::Config { .. })));
        assert_eq!(exit_code(&Err(config_err("a", "b"))), 2);
    }

    #[test]
    fn command_names() {
        for c in Command::ALL {
            assert_eq!(Command::parse(c.name()), Some(c));
        }
        assert_eq!(Command::parse("nope"), None);
    }
}
