//! Acceptance run: one PASS/FAIL line per criterion, with the measured
//! values and tolerances beneath it.
//!
//! Trained checkpoints are cached under `target/ctrlcap-cache` (override
//! with `CTRLCAP_CACHE`); a cold cache trains every ablation variant first.
//! Failures are reported but only change the exit code when
//! `ACCEPTANCE_STRICT=1`.

mod common;

use std::path::PathBuf;
use std::time::Instant;

use ctrlcap::harness::{ablate, evaluate, load_or_build_dataset, sweep_threshold, train_cached, ControlMode, ExperimentConfig};
use ctrlcap::model::CaptionModel;
use ctrlcap::synthworld::{DatasetManifest, Split, Texture};
use ctrlcap_cli::serve::CaptionResponse;
use ctrlcap_oracles::checks::{gradient_checks, identity_checks, metric_checks, Check};
use serde_json::json;

struct Criterion {
    name: &'static str,
    budget: &'static str,
    parts: Vec<Check>,
    seconds: f64,
}

impl Criterion {
    fn run(name: &'static str, budget: &'static str, f: impl FnOnce() -> Vec<Check>) -> Self {
        let t = Instant::now();
        let parts = f();
        let c = Self {
            name,
            budget,
            parts,
            seconds: t.elapsed().as_secs_f64(),
        };
        c.print();
        c
    }

    fn passed(&self) -> bool {
        !self.parts.is_empty() && self.parts.iter().all(|p| p.passed)
    }

    fn print(&self) {
        let tag = if self.passed() { "PASS" } else { "FAIL" };
        println!("{tag} {} ({:.0}s, budget {})", self.name, self.seconds, self.budget);
        for p in &self.parts {
            println!("    {p}");
        }
    }
}

fn cache_dir() -> PathBuf {
    std::env::var_os("CTRLCAP_CACHE")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target/ctrlcap-cache"))
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn full_model(base: &ExperimentConfig, manifest: &DatasetManifest) -> CaptionModel {
    train_cached(base, manifest, &cache_dir(), &mut |e| {
        eprintln!("[full] epoch {} loss {:.4} token-acc {:.4}", e.epoch + 1, e.loss, e.token_accuracy)
    })
    .map(|(model, dir)| {
        if let Some(acc) = std::fs::read_to_string(dir.join("train_log.json"))
            .ok()
            .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
            .and_then(|v| v.as_array()?.last()?["token_accuracy"].as_f64())
        {
            println!("note: full model final training token accuracy {}% (target 95%)", pct(acc));
        }
        model
    })
    .expect("training the full model")
}

fn degeneration(base: &ExperimentConfig, model: &CaptionModel, manifest: &DatasetManifest) -> Vec<Check> {
    let opts = base.eval.inference_options(&model.config);
    let run = |mode| evaluate(model, manifest, Split::Test, mode, &opts, None).expect("evaluation");
    let none = run(ControlMode::None);
    let selfc = run(ControlMode::SelfTags);
    let inter = run(ControlMode::Interactive);
    let gold = run(ControlMode::GoldFull);
    let rare = |o: &ctrlcap::harness::EvalOutcome| o.report.degeneration.rare.clone();
    let (rn, rg) = (rare(&none), rare(&gold));
    // CIDEr-D points: 100 x the score (identity scores 10, i.e. 1000 points).
    let gap = 100.0 * (rg.cider - rn.cider);
    vec![
        Check::new(
            "(a) no controls: rare-template recovery <= 25%",
            rn.recovery <= 0.25,
            format!("{}% over {} rare regions", pct(rn.recovery), rn.count),
        ),
        Check::new(
            "(b) gold controls: rare recovery >= 70% and rare CIDEr-D +30 points over no controls",
            rg.recovery >= 0.70 && gap >= 30.0,
            format!(
                "recovery {}%; rare CIDEr-D {:.1} vs {:.1} points (gap {gap:.1})",
                pct(rg.recovery),
                100.0 * rg.cider,
                100.0 * rn.cider
            ),
        ),
        Check::new(
            "(c) interactive mAP > self mAP",
            inter.report.dense_map > selfc.report.dense_map,
            format!(
                "{} vs {} ({} interactive regions skipped for lack of a noun)",
                pct(inter.report.dense_map),
                pct(selfc.report.dense_map),
                inter.skipped
            ),
        ),
        Check::new(
            "(d) interactive control accuracy >= 80%",
            inter.report.control_accuracy >= 0.80,
            format!("{}%", pct(inter.report.control_accuracy)),
        ),
    ]
}

fn ablation(base: &ExperimentConfig, manifest: &DatasetManifest) -> Vec<Check> {
    let report = ablate(base, manifest, &cache_dir(), &mut |key, e| match e {
        Some(e) => eprintln!("[{key}] epoch {} loss {:.4}", e.epoch + 1, e.loss),
        None => eprintln!("[{key}] training or loading"),
    })
    .expect("ablation");
    let s = |k: &str| report.scores[k].0;
    let i = |k: &str| report.scores[k].1;
    let line = |pairs: &[(&str, f64)]| {
        pairs
            .iter()
            .map(|(k, v)| format!("{k} {}", pct(*v)))
            .collect::<Vec<_>>()
            .join(", ")
    };
    println!("{}", report.to_markdown());
    vec![
        Check::new(
            "components: full > no tagger > baseline (self mAP)",
            s("full") > s("cve-ce-bib") && s("cve-ce-bib") > s("baseline"),
            line(&[("full", s("full")), ("cve-ce-bib", s("cve-ce-bib")), ("baseline", s("baseline"))]),
        ),
        Check::new(
            "visual embedding: all branches > region + cls > roi + cls (self mAP)",
            s("cve") > s("baseline") && s("baseline") > s("roi-only"),
            line(&[("cve", s("cve")), ("baseline", s("baseline")), ("roi-only", s("roi-only"))]),
        ),
        Check::new(
            "bridging: both >= control-to-visual > none (interactive mAP)",
            i("cve-ce-bib") >= i("cve-ce-c2v") && i("cve-ce-c2v") > i("cve-ce"),
            line(&[("cve-ce-bib", i("cve-ce-bib")), ("cve-ce-c2v", i("cve-ce-c2v")), ("cve-ce", i("cve-ce"))]),
        ),
    ]
}

fn sweep(base: &ExperimentConfig, model: &CaptionModel, manifest: &DatasetManifest) -> Vec<Check> {
    let opts = base.eval.inference_options(&model.config);
    let grid = base.eval.sweep_grid.clone();
    let curve = sweep_threshold(model, manifest, Split::Test, &grid, &opts, None).expect("sweep");
    let points = curve
        .points
        .iter()
        .map(|p| format!("{:.1}: mAP {} tags {:.2}", p.threshold, pct(p.map), p.mean_tags))
        .collect::<Vec<_>>()
        .join("; ");
    vec![
        Check::new(
            "curve over every threshold",
            curve.points.len() == grid.len() && curve.points.iter().all(|p| p.map.is_finite()),
            points,
        ),
        Check::new(
            "mean tags per region non-increasing in the threshold",
            curve.tags_non_increasing(),
            format!("best threshold {:.1}", curve.best_threshold),
        ),
    ]
}

fn service(model: &CaptionModel, manifest: &DatasetManifest) -> Vec<Check> {
    let fx = common::fixtures(model, manifest, 100);
    let (same, diffs) = common::compare_with_harness(model, manifest, &fx);
    let (total, failures) = common::check_error_codes(model, manifest);

    // Striped referents asked for "striped" through the endpoint.
    let router = common::app(Some(model.clone()), Some(manifest.clone()));
    let rt = common::runtime();
    let (mut asked, mut controlled) = (0, 0);
    for s in manifest.split(Split::Test) {
        let scene = manifest.scene(s.scene_id).expect("scene");
        let referent = scene.objects.iter().max_by(|a, b| s.bbox.iou(&a.bbox).total_cmp(&s.bbox.iou(&b.bbox)));
        if referent.is_some_and(|o| o.texture == Texture::Striped) {
            let body = json!({"scene_id": s.scene_id, "box": <[u32; 4]>::from(s.bbox), "control_words": ["striped"]});
            let (status, bytes) = rt.block_on(common::post_json(&router, "/v1/caption", &body));
            asked += 1;
            if status.is_success() {
                let r: CaptionResponse = serde_json::from_slice(&bytes).expect("response body");
                controlled += r.controlled as usize;
            }
        }
    }
    let striped = controlled as f64 / asked.max(1) as f64;
    vec![
        Check::new(
            "HTTP captions byte-identical to the offline harness",
            same == fx.len(),
            if diffs.is_empty() {
                format!("{same}/{} fixtures", fx.len())
            } else {
                format!("{same}/{}; {}", fx.len(), diffs.join("; "))
            },
        ),
        Check::new(
            "malformed requests return their status codes",
            failures.is_empty(),
            if failures.is_empty() {
                format!("{total}/{total} cases")
            } else {
                failures.join("; ")
            },
        ),
        Check::new(
            "control \"striped\" on striped referents is honoured in >= 80%",
            asked > 0 && striped >= 0.80,
            format!("{}% of {asked} regions", pct(striped)),
        ),
    ]
}

fn main() {
    let started = Instant::now();
    let mut results = vec![
        Criterion::run("metric oracle suite", "1 min", metric_checks),
        Criterion::run("numerical gradient checks", "5 min", gradient_checks),
        Criterion::run("structural identities", "1 min", identity_checks),
    ];

    let base = ExperimentConfig::default();
    let manifest = load_or_build_dataset(&base, Some(&cache_dir().join("data"))).expect("dataset");
    let model = full_model(&base, &manifest);
    results.push(Criterion::run("caption degeneration", "45 min", || degeneration(&base, &model, &manifest)));
    results.push(Criterion::run("ablation orderings", "3 h", || ablation(&base, &manifest)));
    results.push(Criterion::run("threshold sweep", "-", || sweep(&base, &model, &manifest)));
    results.push(Criterion::run("service contract", "-", || service(&model, &manifest)));

    let passed = results.iter().filter(|c| c.passed()).count();
    println!(
        "\nacceptance: {passed}/{} criteria passed in {:.0}s",
        results.len(),
        started.elapsed().as_secs_f64()
    );
    for c in results.iter().filter(|c| !c.passed()) {
        println!("FAILED: {}", c.name);
    }
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && passed < results.len() {
        std::process::exit(1);
    }
}
