use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use ctrlcap::harness::{
    self, ablate, evaluate, read_predictions, sweep_threshold, train, write_predictions, ControlMode, EpochRecord,
    ExperimentConfig, RunDir, CHECKPOINT_FILE,
};
use ctrlcap::metrics::{dense_caption_map, EvalReport, GroundTruth};
use ctrlcap::model::CaptionModel;
use ctrlcap::synthworld::{build_dataset, DatasetConfig, DatasetManifest, RegionSample, Split};
use ctrlcap_cli::serve::{self, AppState, ServeOptions};

#[derive(Parser)]
#[command(name = "ctrlcap", version, about = "Controllable region captioning on a synthetic shapes world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BoxMode {
    Gtbox,
    Proposals,
}

#[derive(Subcommand)]
enum Command {
    /// Build a dataset manifest (scene graphs and captions, no pixels).
    GenData {
        /// Dataset config (JSON); defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a run directory.
    Train {
        /// Experiment config (JSON); defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory; built from the config when missing.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Caption a split with a checkpoint, or score an existing prediction file.
    Eval {
        #[arg(long, conflicts_with = "pred")]
        checkpoint: Option<PathBuf>,
        /// Dataset directory used with --checkpoint.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Prediction JSON-Lines file to score.
        #[arg(long, requires = "gt")]
        pred: Option<PathBuf>,
        /// Manifest directory holding the ground truth.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "gtbox")]
        mode: BoxMode,
        #[arg(long, default_value = "self")]
        control: ControlMode,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 0.8)]
        threshold: f64,
        #[arg(long, default_value_t = 3)]
        beam: usize,
        #[arg(long)]
        max_samples: Option<usize>,
        /// Output directory for predictions.jsonl and report.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every ablation variant.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint cache shared across invocations.
        #[arg(long, default_value = "runs/cache")]
        cache: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Repeat with consecutive seeds and report mean and std.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Self-control evaluation across tagging thresholds.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, value_delimiter = ',', default_value = "0.5,0.6,0.7,0.8,0.9")]
        grid: Vec<f64>,
        #[arg(long, default_value_t = 3)]
        beam: usize,
        #[arg(long)]
        max_samples: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// HTTP inference service.
    Serve {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Leave object and region boxes out of scene metadata.
        #[arg(long)]
        no_hints: bool,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData { config, seed, out } => gen_data(config.as_deref(), seed, &out),
        Command::Train {
            config,
            data,
            out,
            epochs,
            seed,
        } => run_train(config.as_deref(), data.as_deref(), &out, epochs, seed),
        Command::Eval {
            checkpoint,
            data,
            pred,
            gt,
            mode,
            control,
            split,
            threshold,
            beam,
            max_samples,
            out,
        } => match (checkpoint, pred) {
            (Some(ckpt), None) => {
                let data = data.context("--data is required with --checkpoint")?;
                run_eval(&ckpt, &data, control, split, threshold, beam, max_samples, out.as_deref())
            }
            (None, Some(pred)) => score_predictions(&pred, &gt.expect("clap enforces --gt"), mode, split, out.as_deref()),
            _ => bail!("pass either --checkpoint (with --data) or --pred (with --gt)"),
        },
        Command::Ablate {
            config,
            data,
            cache,
            out,
            seeds,
        } => run_ablate(config.as_deref(), data.as_deref(), &cache, &out, seeds),
        Command::Sweep {
            checkpoint,
            data,
            split,
            grid,
            beam,
            max_samples,
            out,
        } => run_sweep(&checkpoint, &data, split, &grid, beam, max_samples, out.as_deref()),
        Command::Serve {
            checkpoint,
            data,
            port,
            host,
            workers,
            no_hints,
        } => run_serve(checkpoint.as_deref(), data.as_deref(), &host, port, workers, !no_hints),
    }
}

fn gen_data(config: Option<&Path>, seed: u64, out: &Path) -> Result<()> {
    let cfg: DatasetConfig = match config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => DatasetConfig::default(),
    };
    let m = build_dataset(&cfg, seed)?;
    m.write(out)?;
    eprintln!(
        "wrote {} / {} / {} samples over {} scenes to {}",
        m.train.len(),
        m.val.len(),
        m.test.len(),
        m.scene_ids().len(),
        out.display()
    );
    Ok(())
}

fn experiment(config: Option<&Path>) -> Result<ExperimentConfig> {
    Ok(match config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    })
}

fn print_epoch(tag: &str, e: &EpochRecord) {
    eprintln!(
        "[{tag}] epoch {:>3}  loss {:.4}  cap {:.4}  tag {}  token-acc {:.4}  ({:.0}s)",
        e.epoch + 1,
        e.loss,
        e.cap_loss,
        e.tag_loss.map_or("-".into(), |t| format!("{t:.4}")),
        e.token_accuracy,
        e.seconds
    );
}

fn run_train(config: Option<&Path>, data: Option<&Path>, out: &Path, epochs: Option<usize>, seed: Option<u64>) -> Result<()> {
    let mut cfg = experiment(config)?;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let manifest = harness::load_or_build_dataset(&cfg, data)?;
    let run = RunDir::create(out, &cfg)?;
    let name = cfg.name.clone();
    let outcome = train(&cfg, &manifest, Some(&run), &mut |e| print_epoch(&name, e))?;
    outcome.model.save(&run.file(CHECKPOINT_FILE))?;
    let last = outcome.log.epochs.last();
    run.write_json(
        "summary.json",
        &serde_json::json!({
            "parameters": outcome.model.store.num_scalars(),
            "epochs": outcome.log.epochs.len(),
            "final_loss": last.map(|e| e.loss),
            "final_token_accuracy": outcome.log.final_token_accuracy(),
        }),
    )?;
    eprintln!("checkpoint: {}", run.file(CHECKPOINT_FILE).display());
    Ok(())
}

fn print_report(label: &str, r: &EvalReport) {
    let d = &r.degeneration;
    eprintln!(
        "{label}: mAP {:.2}  METEOR {:.4}  CIDEr-D {:.3}  control-acc {:.3}  distinct {}/{}  rare recovery {:.3}  rare CIDEr-D {:.3}",
        r.dense_map * 100.0,
        r.meteor_mean,
        r.cider_mean,
        r.control_accuracy,
        d.distinct_predicted,
        d.distinct_ground_truth,
        d.rare.recovery,
        d.rare.cider
    );
}

#[allow(clippy::too_many_arguments)]
fn run_eval(
    checkpoint: &Path,
    data: &Path,
    control: ControlMode,
    split: Split,
    threshold: f64,
    beam: usize,
    max_samples: Option<usize>,
    out: Option<&Path>,
) -> Result<()> {
    let model = CaptionModel::load(checkpoint)?;
    let manifest = DatasetManifest::read(data)?;
    let mut opts = ctrlcap::model::InferenceOptions {
        tag_threshold: threshold,
        ..Default::default()
    };
    opts.beam.beam_size = beam.max(1);
    opts.beam.max_len = model.config.max_len;
    let outcome = evaluate(&model, &manifest, split, control, &opts, max_samples)?;
    print_report(&format!("{split:?}/{control}"), &outcome.report);
    if outcome.skipped > 0 {
        eprintln!("skipped {} samples without a derivable control", outcome.skipped);
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_predictions(&dir.join("predictions.jsonl"), &outcome.predictions)?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(&outcome)?)?;
    }
    Ok(())
}

fn score_predictions(pred: &Path, gt: &Path, mode: BoxMode, split: Split, out: Option<&Path>) -> Result<()> {
    let preds = read_predictions(pred)?;
    let manifest = DatasetManifest::read(gt)?;
    let samples = manifest.split(split);
    let value = match mode {
        BoxMode::Gtbox => {
            let mut by_key: HashMap<(u64, [u32; 4]), &RegionSample> = HashMap::new();
            for s in samples {
                by_key.insert((s.scene_id, s.bbox.into()), s);
            }
            let aligned: Vec<RegionSample> = preds
                .iter()
                .map(|p| {
                    by_key
                        .get(&(p.image_id, p.bbox.into()))
                        .map(|s| (*s).clone())
                        .with_context(|| format!("prediction for scene {} box {:?} has no ground truth", p.image_id, p.bbox))
                })
                .collect::<Result<_>>()?;
            let report = EvalReport::compute(&preds, &aligned)?;
            print_report("gtbox", &report);
            serde_json::to_value(&report)?
        }
        BoxMode::Proposals => {
            let gts: Vec<GroundTruth> = samples.iter().map(GroundTruth::from).collect();
            let grid = dense_caption_map(&preds, &gts);
            eprintln!("proposals: mAP {:.2}", grid.map * 100.0);
            serde_json::to_value(&grid)?
        }
    };
    match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("report.json"), serde_json::to_string_pretty(&value)?)?;
        }
        None => println!("{}", serde_json::to_string_pretty(&value)?),
    }
    Ok(())
}

fn run_ablate(config: Option<&Path>, data: Option<&Path>, cache: &Path, out: &Path, seeds: u64) -> Result<()> {
    let base = experiment(config)?;
    let manifest = harness::load_or_build_dataset(&base, data)?;
    fs::create_dir_all(out)?;
    let mut all: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for k in 0..seeds.max(1) {
        let mut cfg = base.clone();
        cfg.seed = base.seed + k;
        let report = ablate(&cfg, &manifest, cache, &mut |key, e| match e {
            Some(e) => print_epoch(key, e),
            None => eprintln!("[{key}] training or loading"),
        })?;
        let md = report.to_markdown();
        println!("seed {}\n\n{md}", cfg.seed);
        fs::write(out.join(format!("ablation-seed{}.md", cfg.seed)), &md)?;
        fs::write(
            out.join(format!("ablation-seed{}.json", cfg.seed)),
            serde_json::to_string_pretty(&report)?,
        )?;
        for (key, v) in report.scores {
            all.entry(key).or_default().push(v);
        }
    }
    if seeds > 1 {
        let stats: BTreeMap<String, serde_json::Value> = all
            .iter()
            .map(|(k, v)| {
                let n = v.len() as f64;
                let ms = |f: fn(&(f64, f64)) -> f64| {
                    let m = v.iter().map(f).sum::<f64>() / n;
                    let sd = (v.iter().map(|x| (f(x) - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
                    serde_json::json!({"mean": m, "std": sd})
                };
                (k.clone(), serde_json::json!({"self": ms(|x| x.0), "interactive": ms(|x| x.1)}))
            })
            .collect();
        fs::write(out.join("ablation-seeds.json"), serde_json::to_string_pretty(&stats)?)?;
    }
    Ok(())
}

fn run_sweep(
    checkpoint: &Path,
    data: &Path,
    split: Split,
    grid: &[f64],
    beam: usize,
    max_samples: Option<usize>,
    out: Option<&Path>,
) -> Result<()> {
    let model = CaptionModel::load(checkpoint)?;
    let manifest = DatasetManifest::read(data)?;
    let mut opts = ctrlcap::model::InferenceOptions::default();
    opts.beam.beam_size = beam.max(1);
    opts.beam.max_len = model.config.max_len;
    let curve = sweep_threshold(&model, &manifest, split, grid, &opts, max_samples)?;
    for p in &curve.points {
        println!("threshold {:.2}  mAP {:.2}  tags/region {:.3}", p.threshold, p.map * 100.0, p.mean_tags);
    }
    println!("best threshold {:.2}", curve.best_threshold);
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("sweep.json"), serde_json::to_string_pretty(&curve)?)?;
    }
    Ok(())
}

fn run_serve(checkpoint: Option<&Path>, data: Option<&Path>, host: &str, port: u16, workers: usize, hints: bool) -> Result<()> {
    let model = match checkpoint {
        Some(p) => {
            let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            Some((CaptionModel::load(p)?, serve::model_version(&bytes)))
        }
        None => None,
    };
    let manifest = data.map(DatasetManifest::read).transpose()?;
    let state = AppState::new(
        model,
        manifest,
        ServeOptions {
            workers,
            hints,
            ..Default::default()
        },
    );
    let addr: SocketAddr = format!("{host}:{port}").parse().context("bad host/port")?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        eprintln!("listening on http://{addr}");
        axum::serve(listener, serve::router(state)).await?;
        Ok(())
    })
}
