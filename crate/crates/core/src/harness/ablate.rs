use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{evaluate, train_cached, ControlMode, EpochRecord, ExperimentConfig};
use crate::error::Result;
use crate::model::bib::BibMode;
use crate::model::visembed::CveMode;
use crate::synthworld::DatasetManifest;

/// One trained configuration of the ablation study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub key: String,
    pub config: ExperimentConfig,
}

fn variant(base: &ExperimentConfig, key: &str, cve: CveMode, control: bool, bib: BibMode, tagger: bool) -> Variant {
    let mut config = base.clone();
    config.name = key.to_string();
    config.model.cve = cve;
    config.model.control = control;
    config.model.bib = bib;
    config.model.tagger = tagger;
    if !control {
        config.control_mode = ControlMode::None;
    } else if config.control_mode == ControlMode::None {
        config.control_mode = ControlMode::SelfTags;
    }
    Variant {
        key: key.to_string(),
        config,
    }
}

/// Every distinct configuration the three tables need, keyed by name.
pub fn ablation_variants(base: &ExperimentConfig) -> Vec<Variant> {
    use BibMode::{C2v, Full, Off};
    use CveMode::{Full as Cve, NoCls, RegionOnly, RoiOnly};
    vec![
        variant(base, "baseline", RegionOnly, false, Off, false),
        variant(base, "cve", Cve, false, Off, false),
        variant(base, "cve-ce", Cve, true, Off, false),
        variant(base, "cve-ce-bib", Cve, true, Full, false),
        variant(base, "full", Cve, true, Full, true),
        variant(base, "roi-only", RoiOnly, false, Off, false),
        variant(base, "no-cls", NoCls, false, Off, false),
        variant(base, "cve-ce-c2v", Cve, true, C2v, false),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub variant: String,
    /// Self-control mAP; `None` marks a cell the table leaves empty.
    pub self_map: f64,
    pub interactive_map: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub title: String,
    pub rows: Vec<AblationRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub tables: Vec<AblationTable>,
    /// Self / interactive mAP of every trained variant.
    pub scores: BTreeMap<String, (f64, f64)>,
}

impl AblationReport {
    pub fn table(&self, title_prefix: &str) -> Option<&AblationTable> {
        self.tables.iter().find(|t| t.title.starts_with(title_prefix))
    }

    /// Markdown rendering, mAP in percent.
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        for t in &self.tables {
            s.push_str(&format!("### {}\n\n| row | variant | self mAP | interactive mAP |\n|---|---|---|---|\n", t.title));
            for r in &t.rows {
                let inter = r.interactive_map.map_or("-".to_string(), |v| format!("{:.2}", v * 100.0));
                s.push_str(&format!("| {} | {} | {:.2} | {} |\n", r.label, r.variant, r.self_map * 100.0, inter));
            }
            s.push('\n');
        }
        s
    }
}

/// Trains (or reuses from `cache_dir`) every variant and evaluates self and
/// interactive control on the configured split.
pub fn ablate(
    base: &ExperimentConfig,
    manifest: &DatasetManifest,
    cache_dir: &Path,
    progress: &mut dyn FnMut(&str, Option<&EpochRecord>),
) -> Result<AblationReport> {
    let mut scores: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    for v in ablation_variants(base) {
        progress(&v.key, None);
        let (model, _) = train_cached(&v.config, manifest, cache_dir, &mut |e| progress(&v.key, Some(e)))?;
        let opts = v.config.eval.inference_options(&v.config.model);
        let split = v.config.eval.split;
        let max = v.config.eval.max_samples;
        let s = evaluate(&model, manifest, split, ControlMode::SelfTags, &opts, max)?;
        let i = evaluate(&model, manifest, split, ControlMode::Interactive, &opts, max)?;
        scores.insert(v.key.clone(), (s.report.dense_map, i.report.dense_map));
    }

    let row = |label: &str, key: &str, interactive: bool| {
        let (s, i) = scores[key];
        AblationRow {
            label: label.to_string(),
            variant: key.to_string(),
            self_map: s,
            interactive_map: interactive.then_some(i),
        }
    };
    let tables = vec![
        AblationTable {
            title: "Components".into(),
            rows: vec![
                row("1", "baseline", false),
                row("2", "cve", false),
                row("3", "cve-ce", true),
                row("4", "cve-ce-bib", true),
                row("5", "full", true),
            ],
        },
        AblationTable {
            title: "Visual embedding".into(),
            rows: vec![
                row("region + cls", "baseline", false),
                row("roi + cls", "roi-only", false),
                row("region + roi", "no-cls", false),
                row("region + roi + cls", "cve", false),
            ],
        },
        AblationTable {
            title: "Bridging".into(),
            rows: vec![
                row("none", "cve-ce", true),
                row("control to visual", "cve-ce-c2v", true),
                row("both", "cve-ce-bib", true),
            ],
        },
    ];
    Ok(AblationReport {
        seed: base.seed,
        tables,
        scores,
    })
}
