use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, RunDir};
use crate::controlparse::{make_control_sentence, parse_caption};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::regiontag::tag_targets;
use crate::model::{CaptionModel, TrainExample};
use crate::nn::{Adam, Graph, Tensor};
use crate::synthworld::{render, BBox, DatasetManifest, RegionSample, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub total: f64,
    pub tag: Option<f64>,
    pub cap: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub loss: f64,
    pub tag_loss: Option<f64>,
    pub cap_loss: f64,
    /// Teacher-forced next-token accuracy over caption positions.
    pub token_accuracy: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

impl TrainLog {
    pub fn final_token_accuracy(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.token_accuracy)
    }
}

pub struct TrainOutcome {
    pub model: CaptionModel,
    pub log: TrainLog,
}

/// What went into one training example, for diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub scene_id: u64,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub caption: Vec<String>,
    pub controls: Option<Vec<String>>,
}

fn random_oov_word(rng: &mut impl Rng) -> String {
    let n = rng.random_range(4..=8);
    (0..n).map(|_| rng.random_range(b'A'..=b'Z') as char).collect()
}

/// Renders, tokenizes and draws controls for a batch of samples. With
/// `controls` off the examples carry no control path at all.
pub fn make_batch(
    model: &CaptionModel,
    manifest: &DatasetManifest,
    samples: &[&RegionSample],
    controls: bool,
    keep_prob: f64,
    oov_prob: f64,
    rng: &mut impl Rng,
) -> Result<(Vec<TrainExample>, Vec<BatchRecord>)> {
    let mut canvases: HashMap<u64, Image> = HashMap::new();
    let mut examples = Vec::with_capacity(samples.len());
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        if s.caption.len() + 1 > model.config.max_len {
            return Err(Error::Dataset(format!(
                "caption of {} tokens exceeds max_len {}",
                s.caption.len(),
                model.config.max_len
            )));
        }
        if !canvases.contains_key(&s.scene_id) {
            canvases.insert(s.scene_id, render(&manifest.scene(s.scene_id)?));
        }
        let input = model.prepare(&canvases[&s.scene_id], s.bbox)?;
        let mut caption = s.caption.clone();
        let (control, tags, words) = if controls {
            let tags = parse_caption(&s.caption, &model.class_set, Some(s.template_id));
            let targets = tag_targets(&tags, &model.class_set);
            let mut sentence = make_control_sentence(&s.gold_tags_in_caption_order(), rng, keep_prob);
            let kept: Vec<String> = sentence.words().to_vec();
            if !kept.is_empty() && rng.random_bool(oov_prob.clamp(0.0, 1.0)) {
                let victim = kept[rng.random_range(0..kept.len())].clone();
                let word = random_oov_word(rng);
                for t in caption.iter_mut().chain(sentence.tokens.iter_mut()) {
                    if *t == victim {
                        *t = word.clone();
                    }
                }
            }
            let words = sentence.words().to_vec();
            (Some(model.vocab.encode(&sentence.tokens)), Some(targets), Some(words))
        } else {
            (None, None, None)
        };
        examples.push(TrainExample {
            input,
            caption: model.vocab.encode(&caption),
            control,
            tag_targets: tags,
        });
        records.push(BatchRecord {
            scene_id: s.scene_id,
            bbox: s.bbox,
            caption,
            controls: words,
        });
    }
    Ok((examples, records))
}

fn learning_rate(cfg: &ExperimentConfig, step: usize, total_steps: usize) -> f64 {
    let t = &cfg.train;
    if step < t.warmup_steps {
        return t.lr * (step + 1) as f64 / t.warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(t.warmup_steps).max(1);
    let progress = ((step - t.warmup_steps) as f64 / span as f64).min(1.0);
    let floor = t.lr * t.min_lr_ratio;
    floor + (t.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Correct and total argmax predictions over caption positions.
fn token_hits(logits: &Tensor, targets: &[Vec<u32>]) -> (usize, usize) {
    let l = logits.rows / targets.len().max(1);
    let mut hit = 0;
    let mut total = 0;
    for (k, tgt) in targets.iter().enumerate() {
        for (i, &t) in tgt.iter().enumerate() {
            let row = logits.row(k * l + i);
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
            hit += (best.0 as u32 == t) as usize;
            total += 1;
        }
    }
    (hit, total)
}

/// Trains a fresh model on the train split with `L = L_tag + L_cap`.
/// Step records go to `steps.jsonl` and epochs to `train_log.json` when a
/// run directory is given.
pub fn train(
    config: &ExperimentConfig,
    manifest: &DatasetManifest,
    run: Option<&RunDir>,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let mut model = CaptionModel::new(config.model.clone(), config.seed)?;
    let mut samples: Vec<&RegionSample> = manifest.split(Split::Train).iter().collect();
    if let Some(n) = config.train.max_samples {
        samples.truncate(n);
    }
    if samples.is_empty() {
        return Err(Error::Dataset("empty training split".into()));
    }
    let batch = config.train.batch_size.max(1);
    let steps_per_epoch = samples.len().div_ceil(batch);
    let total_steps = steps_per_epoch * config.train.epochs;
    let controls = config.trains_controls();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7a1_17a1);
    let mut adam = Adam::new(config.train.adam, model.store.len());
    let mut log = TrainLog::default();
    let mut step_file = match run {
        Some(r) => {
            let p = r.file("steps.jsonl");
            Some((fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
        }
        None => None,
    };

    let mut step = 0;
    for epoch in 0..config.train.epochs {
        let started = Instant::now();
        let mut order = samples.clone();
        order.shuffle(&mut rng);
        let (mut sum_total, mut sum_tag, mut sum_cap) = (0.0, 0.0, 0.0);
        let (mut hits, mut count) = (0, 0);
        let mut has_tag = false;
        for chunk in order.chunks(batch) {
            let (examples, records) = make_batch(
                &model,
                manifest,
                chunk,
                controls,
                config.train.keep_prob,
                config.train.oov_prob,
                &mut rng,
            )?;
            let lr = learning_rate(config, step, total_steps);
            let mut g = Graph::new();
            let parts = model.loss(&mut g, &model.store, &examples)?;
            let total = g.value(parts.total).item();
            let tag = parts.tag.map(|v| g.value(v).item());
            let cap = g.value(parts.cap).item();
            let mut grads = g.backward(parts.total, &model.store);
            let grad_norm = grads.global_norm();
            if !total.is_finite() || !grad_norm.is_finite() {
                if let Some(r) = run {
                    r.write_json("nonfinite_batch.json", &records)?;
                }
                return Err(Error::NonFinite(format!(
                    "step {step} (epoch {epoch}): loss {total}, gradient norm {grad_norm}; first scene {}",
                    records.first().map_or(0, |r| r.scene_id)
                )));
            }
            if config.train.clip_norm > 0.0 && grad_norm > config.train.clip_norm {
                grads.scale(config.train.clip_norm / grad_norm);
            }
            adam.step(&mut model.store, &grads, lr);

            let targets: Vec<Vec<u32>> = examples
                .iter()
                .map(|e| {
                    let mut t = e.caption.clone();
                    t.push(model.vocab.eos());
                    t
                })
                .collect();
            let (h, c) = token_hits(g.value(parts.logits), &targets);
            hits += h;
            count += c;
            sum_total += total;
            sum_cap += cap;
            if let Some(t) = tag {
                sum_tag += t;
                has_tag = true;
            }
            let rec = StepRecord {
                step,
                epoch,
                total,
                tag,
                cap,
                lr,
                grad_norm,
            };
            if let Some((f, p)) = step_file.as_mut() {
                let line = serde_json::to_string(&rec)?;
                writeln!(f, "{line}").map_err(|e| Error::io(p, e))?;
            }
            log.steps.push(rec);
            step += 1;
        }
        let n = steps_per_epoch as f64;
        let record = EpochRecord {
            epoch,
            steps: steps_per_epoch,
            loss: sum_total / n,
            tag_loss: has_tag.then_some(sum_tag / n),
            cap_loss: sum_cap / n,
            token_accuracy: hits as f64 / count.max(1) as f64,
            seconds: started.elapsed().as_secs_f64(),
        };
        progress(&record);
        log.epochs.push(record);
        if let Some(r) = run {
            r.write_json("train_log.json", &log.epochs)?;
        }
    }
    Ok(TrainOutcome { model, log })
}
