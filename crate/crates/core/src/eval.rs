//! Segmentation and pouring metrics, ablation drivers, and report files.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetManifest;
use crate::error::{Error, Result};
use crate::imaging::{iou, BinaryMask, ColorJitter, Image};
use crate::pour::PourTrace;
use crate::segmentation::{load_labeled, train_on_samples, SegEpochLog, SegTrainConfig, SegmentationModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FillCategory {
    Low,
    Medium,
    High,
}

impl FillCategory {
    pub const ALL: [FillCategory; 3] = [FillCategory::Low, FillCategory::Medium, FillCategory::High];

    pub fn name(self) -> &'static str {
        match self {
            FillCategory::Low => "Low",
            FillCategory::Medium => "Medium",
            FillCategory::High => "High",
        }
    }
}

/// Thirds of the cup: `[0, 1/3)`, `[1/3, 2/3)`, `[2/3, 1]`.
pub fn fill_category(fill_fraction: f64) -> Result<FillCategory> {
    if !(0.0..=1.0).contains(&fill_fraction) {
        return Err(Error::InvalidArgument(format!("fill fraction {fill_fraction} outside [0, 1]")));
    }
    Ok(if fill_fraction < 1.0 / 3.0 {
        FillCategory::Low
    } else if fill_fraction < 2.0 / 3.0 {
        FillCategory::Medium
    } else {
        FillCategory::High
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordIou {
    pub image_id: String,
    pub fill_fraction: f64,
    pub category: FillCategory,
    pub iou: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryMean {
    pub count: usize,
    /// `None` when the band has no records.
    pub mean_iou: Option<f64>,
}

impl CategoryMean {
    fn of(values: impl Iterator<Item = f64>) -> Self {
        let (mut n, mut s) = (0usize, 0.0);
        for v in values {
            n += 1;
            s += v;
        }
        Self { count: n, mean_iou: (n > 0).then(|| s / n as f64) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegEvalReport {
    pub label: String,
    pub records: Vec<RecordIou>,
    pub low: CategoryMean,
    pub medium: CategoryMean,
    pub high: CategoryMean,
    pub all: CategoryMean,
}

impl SegEvalReport {
    pub fn from_records(label: impl Into<String>, records: Vec<RecordIou>) -> Self {
        let band = |c| CategoryMean::of(records.iter().filter(|r| r.category == c).map(|r| r.iou));
        Self {
            label: label.into(),
            low: band(FillCategory::Low),
            medium: band(FillCategory::Medium),
            high: band(FillCategory::High),
            all: CategoryMean::of(records.iter().map(|r| r.iou)),
            records,
        }
    }

    pub fn category(&self, c: FillCategory) -> &CategoryMean {
        match c {
            FillCategory::Low => &self.low,
            FillCategory::Medium => &self.medium,
            FillCategory::High => &self.high,
        }
    }

    /// All-band mean IoU (0 for an empty report).
    pub fn all_iou(&self) -> f64 {
        self.all.mean_iou.unwrap_or(0.0)
    }
}

/// Score precomputed masks against the test set, in record order.
pub fn eval_predictions(label: &str, test: &DatasetManifest, predictions: &[BinaryMask]) -> Result<SegEvalReport> {
    if predictions.len() != test.len() {
        return Err(Error::dims(test.len(), predictions.len()));
    }
    let mut records = Vec::with_capacity(test.len());
    for (r, pred) in test.records.iter().zip(predictions) {
        let f = r
            .fill_fraction
            .ok_or_else(|| Error::Dataset(format!("record {} has no fill fraction", r.image_id)))?;
        if r.mask_path.is_none() {
            return Err(Error::Dataset(format!("record {} has no ground-truth mask", r.image_id)));
        }
        let truth = test.load_mask(r)?;
        records.push(RecordIou {
            image_id: r.image_id.clone(),
            fill_fraction: f,
            category: fill_category(f)?,
            iou: iou(pred, &truth)?,
        });
    }
    Ok(SegEvalReport::from_records(label, records))
}

pub fn eval_segmentation(model: &SegmentationModel, test: &DatasetManifest, threshold: f64) -> Result<SegEvalReport> {
    for r in &test.records {
        if r.mask_path.is_none() || r.fill_fraction.is_none() {
            return Err(Error::Dataset(format!("record {} lacks a mask or fill fraction", r.image_id)));
        }
    }
    let imgs = test.records.iter().map(|r| test.load_image(r)).collect::<Result<Vec<Image>>>()?;
    let refs: Vec<&Image> = imgs.iter().collect();
    let preds = model.predict_masks(&refs, threshold)?;
    eval_predictions("segmentation", test, &preds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioStats {
    /// None on the aggregate row.
    pub l0: Option<f64>,
    pub l_target: Option<f64>,
    pub runs: usize,
    /// Root mean square of the percent errors.
    pub rmse_pct: f64,
    pub mean_abs_pct: f64,
    /// Population standard deviation of the percent errors.
    pub std_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PourEvalReport {
    pub label: String,
    pub scenarios: Vec<ScenarioStats>,
    pub aggregate: ScenarioStats,
}

fn pct_stats(l0: Option<f64>, l_target: Option<f64>, errors: &[f64]) -> ScenarioStats {
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
    ScenarioStats {
        l0,
        l_target,
        runs: errors.len(),
        rmse_pct: (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt(),
        mean_abs_pct: mean,
        std_pct: var.sqrt(),
    }
}

/// Percent error `100 |l_final - l_target|` per trace, grouped by
/// `(l0, l_target)` in order of first appearance.
pub fn eval_pouring(label: &str, traces: &[PourTrace]) -> Result<PourEvalReport> {
    if traces.is_empty() {
        return Err(Error::InvalidArgument("no pour traces to evaluate".into()));
    }
    let mut groups: Vec<((f64, f64), Vec<f64>)> = Vec::new();
    let mut all = Vec::with_capacity(traces.len());
    for t in traces {
        if !t.complete {
            return Err(Error::InvalidArgument(format!(
                "trace {} -> {} (seed {}) did not complete",
                t.l0, t.config.l_target, t.seed
            )));
        }
        let e = 100.0 * (t.final_fill - t.config.l_target).abs();
        let key = (t.l0, t.config.l_target);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(e),
            None => groups.push((key, vec![e])),
        }
        all.push(e);
    }
    let scenarios = groups.iter().map(|((l0, lt), v)| pct_stats(Some(*l0), Some(*lt), v)).collect();
    Ok(PourEvalReport {
        label: label.into(),
        scenarios,
        aggregate: pct_stats(None, None, &all),
    })
}

fn fmt_mean(m: &CategoryMean) -> String {
    match m.mean_iou {
        Some(v) => format!("{v:.3} ({})", m.count),
        None => format!("- ({})", m.count),
    }
}

/// Plain-text table: one row per segmentation report, one row per pour
/// scenario plus an aggregate row.
pub fn render_table(seg: &[SegEvalReport], pour: &[PourEvalReport]) -> String {
    let mut s = String::new();
    if !seg.is_empty() {
        let _ = writeln!(s, "{:<28} {:>14} {:>14} {:>14} {:>14}", "IoU (records)", "Low", "Medium", "High", "All");
        for r in seg {
            let _ = writeln!(
                s,
                "{:<28} {:>14} {:>14} {:>14} {:>14}",
                r.label,
                fmt_mean(&r.low),
                fmt_mean(&r.medium),
                fmt_mean(&r.high),
                fmt_mean(&r.all)
            );
        }
    }
    for p in pour {
        if !s.is_empty() {
            s.push('\n');
        }
        let _ = writeln!(s, "pouring: {}", p.label);
        let _ = writeln!(s, "{:<16} {:>6} {:>10} {:>10} {:>10}", "scenario", "runs", "RMSE %", "mean %", "std %");
        let row = |s: &mut String, name: String, st: &ScenarioStats| {
            let _ = writeln!(
                s,
                "{:<16} {:>6} {:>10.3} {:>10.3} {:>10.3}",
                name, st.runs, st.rmse_pct, st.mean_abs_pct, st.std_pct
            );
        };
        for st in &p.scenarios {
            let name = match (st.l0, st.l_target) {
                (Some(a), Some(b)) => format!("{:.0}% -> {:.0}%", 100.0 * a, 100.0 * b),
                _ => "?".into(),
            };
            row(&mut s, name, st);
        }
        row(&mut s, "all".into(), &p.aggregate);
    }
    s
}

/// Write `<stem>.txt` (table) and `<stem>.jsonl` (one record per line).
pub fn write_reports(dir: &Path, stem: &str, seg: &[SegEvalReport], pour: &[PourEvalReport]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let txt = dir.join(format!("{stem}.txt"));
    fs::write(&txt, render_table(seg, pour)).map_err(|e| Error::io(&txt, e))?;
    let path = dir.join(format!("{stem}.jsonl"));
    let mut out = Vec::new();
    for r in seg {
        for rec in &r.records {
            serde_json::to_writer(&mut out, &serde_json::json!({ "kind": "record_iou", "report": r.label, "record": rec }))?;
            out.push(b'\n');
        }
        let summary = serde_json::json!({
            "kind": "seg_summary", "report": r.label,
            "low": r.low, "medium": r.medium, "high": r.high, "all": r.all,
        });
        serde_json::to_writer(&mut out, &summary)?;
        out.push(b'\n');
    }
    for p in pour {
        for st in p.scenarios.iter().chain([&p.aggregate]) {
            serde_json::to_writer(&mut out, &serde_json::json!({ "kind": "pour_scenario", "report": p.label, "stats": st }))?;
            out.push(b'\n');
        }
    }
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(&out).map_err(|e| Error::io(&path, e))
}

/// Train on colored images with photometric jitter and their masks, then
/// evaluate on the transparent test set.
pub fn run_ablation_color_jitter(
    colored_with_masks: &DatasetManifest,
    test: &DatasetManifest,
    jitter: &ColorJitter,
    seg: &SegTrainConfig,
    progress: impl FnMut(&SegEpochLog),
) -> Result<(SegEvalReport, SegmentationModel)> {
    let samples = load_labeled(colored_with_masks)?;
    let (model, _) = train_on_samples(&samples, seg, Some(jitter), progress)?;
    let mut report = eval_segmentation(&model, test, seg.threshold)?;
    report.label = "color jitter".into();
    Ok((report, model))
}

/// Seeded subsample keeping `round(fraction * n)` records in their
/// original order.
pub fn subsample(dataset: &DatasetManifest, fraction: f64, seed: u64) -> Result<DatasetManifest> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("fraction {fraction} outside (0, 1]")));
    }
    let n = dataset.len();
    let k = (fraction * n as f64).round() as usize;
    if k == 0 {
        return Err(Error::Dataset(format!("fraction {fraction} of {n} records selects nothing")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = index::sample(&mut rng, n, k).into_vec();
    keep.sort_unstable();
    let mut out = dataset.clone();
    out.records = keep.into_iter().map(|i| dataset.records[i].clone()).collect();
    Ok(out)
}

pub fn run_ablation_fraction(
    synthetic_labeled: &DatasetManifest,
    fraction: f64,
    test: &DatasetManifest,
    seg: &SegTrainConfig,
    seed: u64,
    progress: impl FnMut(&SegEpochLog),
) -> Result<(SegEvalReport, SegmentationModel)> {
    let sub = subsample(synthetic_labeled, fraction, seed)?;
    let samples = load_labeled(&sub)?;
    let (model, _) = train_on_samples(&samples, seg, None, progress)?;
    let mut report = eval_segmentation(&model, test, seg.threshold)?;
    report.label = format!("{}% subset", fraction * 100.0);
    Ok((report, model))
}
