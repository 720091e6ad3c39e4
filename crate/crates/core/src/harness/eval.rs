use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::controlparse::first_noun;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{EvalReport, Prediction};
use crate::model::{CaptionModel, CaptionOutput, Controls, InferenceOptions};
use crate::synthworld::{render, BBox, DatasetManifest, RegionSample, Split};

/// Where control words come from at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControlMode {
    /// Empty control sentence.
    None,
    /// Thresholded tagger predictions.
    #[serde(rename = "self")]
    SelfTags,
    /// First noun of the ground-truth caption.
    Interactive,
    /// Every gold tag of the ground-truth caption.
    #[serde(alias = "gold")]
    GoldFull,
}

impl ControlMode {
    pub const ALL: [ControlMode; 4] = [
        ControlMode::None,
        ControlMode::SelfTags,
        ControlMode::Interactive,
        ControlMode::GoldFull,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ControlMode::None => "none",
            ControlMode::SelfTags => "self",
            ControlMode::Interactive => "interactive",
            ControlMode::GoldFull => "gold-full",
        }
    }
}

impl std::str::FromStr for ControlMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown control mode {s:?}")))
    }
}

impl std::fmt::Display for ControlMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Captions one region the way the service does: explicit control words
/// when given, self tags otherwise.
pub fn caption_region(
    model: &CaptionModel,
    canvas: &Image,
    bbox: BBox,
    control_words: &[String],
    opts: &InferenceOptions,
) -> Result<CaptionOutput> {
    let input = model.prepare(canvas, bbox)?;
    let controls = if control_words.is_empty() {
        Controls::SelfTags
    } else {
        Controls::Words(control_words.to_vec())
    };
    model.caption(&input, &controls, opts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub split: Split,
    pub mode: ControlMode,
    pub report: EvalReport,
    /// Samples dropped because no control could be derived.
    pub skipped: usize,
    pub mean_logprob: f64,
    /// Mean number of thresholded self tags per region.
    pub mean_self_tags: f64,
    #[serde(skip)]
    pub predictions: Vec<Prediction>,
}

fn controls_for(model: &CaptionModel, sample: &RegionSample, mode: ControlMode) -> Option<Controls> {
    match mode {
        ControlMode::None => Some(Controls::Empty),
        ControlMode::SelfTags => Some(Controls::SelfTags),
        ControlMode::Interactive => first_noun(&sample.caption, &model.class_set).map(|w| Controls::Words(vec![w])),
        ControlMode::GoldFull => Some(Controls::Words(sample.gold_tags_in_caption_order())),
    }
}

/// Captions every sample of `split` with ground-truth boxes under `mode`.
/// Predictions keep the sample order and carry the requested controls.
pub fn evaluate(
    model: &CaptionModel,
    manifest: &DatasetManifest,
    split: Split,
    mode: ControlMode,
    opts: &InferenceOptions,
    max_samples: Option<usize>,
) -> Result<EvalOutcome> {
    let all = manifest.split(split);
    let all = &all[..max_samples.unwrap_or(all.len()).min(all.len())];
    let mut kept: Vec<RegionSample> = Vec::with_capacity(all.len());
    let mut predictions = Vec::with_capacity(all.len());
    let mut skipped = 0;
    let mut logprob = 0.0;
    let mut tags = 0usize;
    let mut canvas: Option<(u64, Image)> = None;
    for s in all {
        let Some(controls) = controls_for(model, s, mode) else {
            skipped += 1;
            continue;
        };
        if canvas.as_ref().map(|c| c.0) != Some(s.scene_id) {
            canvas = Some((s.scene_id, render(&manifest.scene(s.scene_id)?)));
        }
        let input = model.prepare(&canvas.as_ref().expect("rendered above").1, s.bbox)?;
        let out = model.caption(&input, &controls, opts)?;
        let requested = match &controls {
            Controls::Empty => Vec::new(),
            Controls::SelfTags => out.self_tags.iter().take(opts.tag_cap).map(|(w, _)| w.clone()).collect(),
            Controls::Words(w) => w.clone(),
        };
        logprob += out.logprob;
        tags += out.self_tags.len();
        predictions.push(Prediction {
            image_id: s.scene_id,
            bbox: s.bbox,
            caption: out.text(),
            confidence: 1.0,
            controls: Some(requested),
        });
        kept.push(s.clone());
    }
    let report = EvalReport::compute(&predictions, &kept)?;
    let n = predictions.len().max(1) as f64;
    Ok(EvalOutcome {
        split,
        mode,
        report,
        skipped,
        mean_logprob: logprob / n,
        mean_self_tags: tags as f64 / n,
        predictions,
    })
}

pub fn write_predictions(path: &Path, predictions: &[Prediction]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in predictions {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub map: f64,
    pub mean_tags: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub points: Vec<SweepPoint>,
    /// Threshold with the highest mAP (the lowest one on ties).
    pub best_threshold: f64,
}

impl SweepCurve {
    pub fn tags_non_increasing(&self) -> bool {
        let mut pts = self.points.clone();
        pts.sort_by(|a, b| a.threshold.total_cmp(&b.threshold));
        pts.windows(2).all(|w| w[1].mean_tags <= w[0].mean_tags)
    }
}

/// Self-control evaluation at each tagging threshold.
pub fn sweep_threshold(
    model: &CaptionModel,
    manifest: &DatasetManifest,
    split: Split,
    grid: &[f64],
    opts: &InferenceOptions,
    max_samples: Option<usize>,
) -> Result<SweepCurve> {
    let mut points = Vec::with_capacity(grid.len());
    for &t in grid {
        let o = InferenceOptions { tag_threshold: t, ..*opts };
        let r = evaluate(model, manifest, split, ControlMode::SelfTags, &o, max_samples)?;
        points.push(SweepPoint {
            threshold: t,
            map: r.report.dense_map,
            mean_tags: r.mean_self_tags,
        });
    }
    let best_threshold = points
        .iter()
        .fold(None::<&SweepPoint>, |best, p| match best {
            Some(b) if b.map >= p.map => Some(b),
            _ => Some(p),
        })
        .map_or(f64::NAN, |p| p.threshold);
    Ok(SweepCurve { points, best_threshold })
}
