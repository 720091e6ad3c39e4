//! Caption and dense-captioning evaluation: IoU, an exact-match METEOR
//! variant, CIDEr-D, the IoU x METEOR mAP grid, control accuracy and
//! degeneration statistics.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthworld::{BBox, Color, Predicate, Rarity, RegionSample, Shape, TemplateId, Texture};

pub const IOU_THRESHOLDS: [f64; 5] = [0.3, 0.4, 0.5, 0.6, 0.7];
pub const METEOR_THRESHOLDS: [f64; 6] = [0.0, 0.05, 0.1, 0.15, 0.2, 0.25];

const METEOR_ALPHA: f64 = 0.9;
const METEOR_BETA: i32 = 3;
const METEOR_GAMMA: f64 = 0.5;
const CIDER_N: usize = 4;
const CIDER_SIGMA: f64 = 6.0;

// Absorbs rounding when an IoU lands exactly on a threshold (e.g. 0.7).
const THRESHOLD_EPS: f64 = 1e-12;

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(String::from).collect()
}

/// Matches and chunks of the greedy in-order alignment: each candidate
/// token, left to right, takes the leftmost unused identical reference
/// token.
pub fn meteor_alignment<S: AsRef<str>, R: AsRef<str>>(candidate: &[S], reference: &[R]) -> (usize, usize) {
    let mut used = vec![false; reference.len()];
    let mut matches = 0;
    let mut chunks = 0;
    let mut prev: Option<(usize, usize)> = None;
    for (i, c) in candidate.iter().enumerate() {
        let hit = reference
            .iter()
            .enumerate()
            .find(|&(j, r)| !used[j] && r.as_ref() == c.as_ref())
            .map(|(j, _)| j);
        if let Some(j) = hit {
            used[j] = true;
            matches += 1;
            let continues = matches!(prev, Some((pi, pj)) if pi + 1 == i && pj + 1 == j);
            if !continues {
                chunks += 1;
            }
            prev = Some((i, j));
        }
    }
    (matches, chunks)
}

fn meteor_single<S: AsRef<str>, R: AsRef<str>>(candidate: &[S], reference: &[R]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let (m, ch) = meteor_alignment(candidate, reference);
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let penalty = METEOR_GAMMA * (ch as f64 / m as f64).powi(METEOR_BETA);
    f * (1.0 - penalty)
}

/// Best score over the references; 0 for an empty candidate or no
/// references.
pub fn meteor_lite<S: AsRef<str>, R: AsRef<str>>(candidate: &[S], references: &[Vec<R>]) -> f64 {
    references
        .iter()
        .map(|r| meteor_single(candidate, r))
        .fold(0.0, f64::max)
}

type Ngram = Vec<String>;

fn ngram_counts<S: AsRef<str>>(tokens: &[S]) -> HashMap<Ngram, f64> {
    let mut counts = HashMap::new();
    for n in 1..=CIDER_N {
        for w in tokens.windows(n) {
            let key: Ngram = w.iter().map(|t| t.as_ref().to_string()).collect();
            *counts.entry(key).or_insert(0.0) += 1.0;
        }
    }
    counts
}

struct TfIdf {
    vec: [HashMap<Ngram, f64>; CIDER_N],
    norm: [f64; CIDER_N],
    len: usize,
}

/// CIDEr-D with document frequencies taken from a fixed reference corpus.
#[derive(Debug, Clone)]
pub struct CiderD {
    df: HashMap<Ngram, f64>,
    log_docs: f64,
}

impl CiderD {
    /// `corpus` holds one reference set per image.
    pub fn new<S: AsRef<str>>(corpus: &[Vec<Vec<S>>]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Metric("CIDEr-D needs a non-empty reference corpus".into()));
        }
        let mut df: HashMap<Ngram, f64> = HashMap::new();
        for refs in corpus {
            let grams: BTreeSet<Ngram> = refs.iter().flat_map(|r| ngram_counts(r).into_keys()).collect();
            for g in grams {
                *df.entry(g).or_insert(0.0) += 1.0;
            }
        }
        Ok(Self {
            df,
            log_docs: (corpus.len() as f64).ln(),
        })
    }

    fn tfidf<S: AsRef<str>>(&self, tokens: &[S]) -> TfIdf {
        let mut vec: [HashMap<Ngram, f64>; CIDER_N] = Default::default();
        let mut norm = [0.0; CIDER_N];
        for (g, tf) in ngram_counts(tokens) {
            let n = g.len() - 1;
            let df = self.df.get(&g).copied().unwrap_or(0.0).max(1.0);
            let v = tf * (self.log_docs - df.ln());
            norm[n] += v * v;
            vec[n].insert(g, v);
        }
        TfIdf {
            vec,
            norm: norm.map(f64::sqrt),
            len: tokens.len(),
        }
    }

    fn similarity(hyp: &TfIdf, reference: &TfIdf) -> f64 {
        let delta = hyp.len as f64 - reference.len as f64;
        let length_penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
        let mut total = 0.0;
        for n in 0..CIDER_N {
            let mut val = 0.0;
            for (g, &h) in &hyp.vec[n] {
                if let Some(&r) = reference.vec[n].get(g) {
                    val += h.min(r) * r;
                }
            }
            if hyp.norm[n] != 0.0 && reference.norm[n] != 0.0 {
                val /= hyp.norm[n] * reference.norm[n];
            }
            total += val * length_penalty;
        }
        total / CIDER_N as f64
    }

    pub fn score<S: AsRef<str>, R: AsRef<str>>(&self, candidate: &[S], references: &[Vec<R>]) -> f64 {
        if references.is_empty() {
            return 0.0;
        }
        let hyp = self.tfidf(candidate);
        let sum: f64 = references
            .iter()
            .map(|r| Self::similarity(&hyp, &self.tfidf(r)))
            .sum();
        sum / references.len() as f64 * 10.0
    }
}

/// Per-sample CIDEr-D using the references themselves as the IDF corpus.
pub fn cider_d<S: AsRef<str>, R: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<Vec<R>>]) -> Result<Vec<f64>> {
    if candidates.len() != references.len() {
        return Err(Error::Metric(format!(
            "{} candidates for {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    let scorer = CiderD::new(references)?;
    Ok(candidates
        .iter()
        .zip(references)
        .map(|(c, r)| scorer.score(c, r))
        .collect())
}

/// Prediction interchange record, one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image_id: u64,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub caption: String,
    pub confidence: f64,
    /// Control words the caption was generated under, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controls: Option<Vec<String>>,
}

impl Prediction {
    pub fn tokens(&self) -> Vec<String> {
        tokenize(&self.caption)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub image_id: u64,
    pub bbox: BBox,
    pub references: Vec<Vec<String>>,
}

impl From<&RegionSample> for GroundTruth {
    fn from(s: &RegionSample) -> Self {
        Self {
            image_id: s.scene_id,
            bbox: s.bbox,
            references: vec![s.caption.clone()],
        }
    }
}

/// AP for every (IoU, METEOR) threshold pair; rows follow
/// [`IOU_THRESHOLDS`], columns [`METEOR_THRESHOLDS`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapGrid {
    pub ap: Vec<Vec<f64>>,
    pub map: f64,
}

/// Area under the precision/recall curve with the precision envelope
/// taken over all points.
pub fn average_precision(is_tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut recall = vec![0.0];
    let mut precision = vec![0.0];
    let (mut tp, mut fp) = (0usize, 0usize);
    for &hit in is_tp {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    recall.push(1.0);
    precision.push(0.0);
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    (1..recall.len())
        .filter(|&i| recall[i] != recall[i - 1])
        .map(|i| (recall[i] - recall[i - 1]) * precision[i])
        .sum()
}

pub fn dense_caption_map(predictions: &[Prediction], ground_truths: &[GroundTruth]) -> MapGrid {
    let mut by_image: HashMap<u64, Vec<usize>> = HashMap::new();
    for (i, gt) in ground_truths.iter().enumerate() {
        by_image.entry(gt.image_id).or_default().push(i);
    }

    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&a, &b| predictions[b].confidence.total_cmp(&predictions[a].confidence));

    // Candidate GTs per prediction, best IoU first (ties by GT order).
    let candidates: Vec<Vec<(usize, f64, f64)>> = order
        .iter()
        .map(|&p| {
            let pred = &predictions[p];
            let tokens = pred.tokens();
            let mut c: Vec<(usize, f64, f64)> = by_image
                .get(&pred.image_id)
                .map(|ids| {
                    ids.iter()
                        .map(|&g| {
                            let gt = &ground_truths[g];
                            (g, iou(&pred.bbox, &gt.bbox), meteor_lite(&tokens, &gt.references))
                        })
                        .collect()
                })
                .unwrap_or_default();
            c.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            c
        })
        .collect();

    let mut ap = vec![vec![0.0; METEOR_THRESHOLDS.len()]; IOU_THRESHOLDS.len()];
    for (ti, &t_iou) in IOU_THRESHOLDS.iter().enumerate() {
        for (mi, &t_m) in METEOR_THRESHOLDS.iter().enumerate() {
            let mut matched = vec![false; ground_truths.len()];
            let hits: Vec<bool> = candidates
                .iter()
                .map(|cands| {
                    let hit = cands
                        .iter()
                        .find(|&&(g, ov, met)| !matched[g] && ov + THRESHOLD_EPS >= t_iou && met + THRESHOLD_EPS >= t_m);
                    match hit {
                        Some(&(g, _, _)) => {
                            matched[g] = true;
                            true
                        }
                        None => false,
                    }
                })
                .collect();
            ap[ti][mi] = average_precision(&hits, ground_truths.len());
        }
    }
    let cells = (IOU_THRESHOLDS.len() * METEOR_THRESHOLDS.len()) as f64;
    let map = ap.iter().flatten().sum::<f64>() / cells;
    MapGrid { ap, map }
}

/// Whether every control word occurs verbatim among the caption tokens.
pub fn is_controlled<S: AsRef<str>, C: AsRef<str>>(caption: &[S], controls: &[C]) -> bool {
    controls
        .iter()
        .all(|c| caption.iter().any(|t| t.as_ref() == c.as_ref()))
}

/// Fraction of captions containing all of their control words; 0 for no
/// samples.
pub fn control_accuracy<S: AsRef<str>, C: AsRef<str>>(captions: &[Vec<S>], controls: &[Vec<C>]) -> Result<f64> {
    if captions.len() != controls.len() {
        return Err(Error::Metric(format!(
            "{} captions for {} control lists",
            captions.len(),
            controls.len()
        )));
    }
    if captions.is_empty() {
        return Ok(0.0);
    }
    let ok = captions
        .iter()
        .zip(controls)
        .filter(|(cap, ctl)| is_controlled(cap, ctl))
        .count();
    Ok(ok as f64 / captions.len() as f64)
}

fn is_color_shape<S: AsRef<str>>(pair: &[S]) -> bool {
    pair.len() == 2 && Color::from_word(pair[0].as_ref()).is_some() && Shape::from_word(pair[1].as_ref()).is_some()
}

/// Template family of a caption by surface pattern, if it fits one.
pub fn template_of<S: AsRef<str>>(tokens: &[S]) -> Option<TemplateId> {
    let t: Vec<&str> = tokens.iter().map(|s| s.as_ref()).collect();
    if t.first() != Some(&"a") {
        return None;
    }
    match t.len() {
        3 if is_color_shape(&t[1..3]) => Some(TemplateId::T0),
        4 if Texture::from_word(t[1]).is_some() && is_color_shape(&t[2..4]) => Some(TemplateId::T1),
        n if n >= 7 && is_color_shape(&t[1..3]) && is_color_shape(&t[n - 2..]) && t[n - 3] == "a" => {
            let rel = &t[3..n - 3];
            Predicate::ALL
                .iter()
                .any(|p| p.tokens() == rel)
                .then_some(TemplateId::T2)
        }
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateRecovery {
    pub template: TemplateId,
    pub count: usize,
    pub recovered: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetStats {
    pub count: usize,
    pub cider: f64,
    /// Fraction of exact caption matches.
    pub recall: f64,
    /// Fraction whose prediction falls in the ground truth's template.
    pub recovery: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegenerationReport {
    pub samples: usize,
    pub distinct_predicted: usize,
    pub distinct_ground_truth: usize,
    pub templates: Vec<TemplateRecovery>,
    pub frequent: SubsetStats,
    pub rare: SubsetStats,
    /// Predicted caption length (tokens) to count.
    pub length_histogram: BTreeMap<usize, usize>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Degeneration statistics of predictions aligned with their ground-truth
/// samples. CIDEr-D uses every ground-truth caption as the IDF corpus.
pub fn degeneration_report<S: AsRef<str>>(predictions: &[Vec<S>], ground_truths: &[RegionSample]) -> Result<DegenerationReport> {
    if predictions.len() != ground_truths.len() {
        return Err(Error::Metric(format!(
            "{} predictions for {} ground truths",
            predictions.len(),
            ground_truths.len()
        )));
    }
    let refs: Vec<Vec<Vec<String>>> = ground_truths.iter().map(|g| vec![g.caption.clone()]).collect();
    let cider: Vec<f64> = if refs.is_empty() {
        Vec::new()
    } else {
        let scorer = CiderD::new(&refs)?;
        predictions.iter().zip(&refs).map(|(p, r)| scorer.score(p, r)).collect()
    };

    let as_text = |p: &[S]| p.iter().map(|t| t.as_ref()).collect::<Vec<_>>().join(" ");
    let distinct_predicted = predictions.iter().map(|p| as_text(p)).collect::<BTreeSet<_>>().len();
    let distinct_ground_truth = ground_truths.iter().map(|g| g.caption_text()).collect::<BTreeSet<_>>().len();

    let recovered: Vec<bool> = predictions
        .iter()
        .zip(ground_truths)
        .map(|(p, g)| template_of(p) == Some(g.template_id))
        .collect();
    let exact: Vec<bool> = predictions
        .iter()
        .zip(ground_truths)
        .map(|(p, g)| p.len() == g.caption.len() && p.iter().zip(&g.caption).all(|(a, b)| a.as_ref() == b))
        .collect();

    let templates = TemplateId::ALL
        .iter()
        .map(|&t| {
            let idx: Vec<usize> = (0..ground_truths.len()).filter(|&i| ground_truths[i].template_id == t).collect();
            let rec = idx.iter().filter(|&&i| recovered[i]).count();
            TemplateRecovery {
                template: t,
                count: idx.len(),
                recovered: rec,
                rate: ratio(rec, idx.len()),
            }
        })
        .collect();

    let subset = |rarity: Rarity| {
        let idx: Vec<usize> = (0..ground_truths.len()).filter(|&i| ground_truths[i].rarity == rarity).collect();
        let n = idx.len();
        SubsetStats {
            count: n,
            cider: if n == 0 { 0.0 } else { idx.iter().map(|&i| cider[i]).sum::<f64>() / n as f64 },
            recall: ratio(idx.iter().filter(|&&i| exact[i]).count(), n),
            recovery: ratio(idx.iter().filter(|&&i| recovered[i]).count(), n),
        }
    };

    let mut length_histogram = BTreeMap::new();
    for p in predictions {
        *length_histogram.entry(p.len()).or_insert(0) += 1;
    }

    Ok(DegenerationReport {
        samples: predictions.len(),
        distinct_predicted,
        distinct_ground_truth,
        templates,
        frequent: subset(Rarity::Frequent),
        rare: subset(Rarity::Rare),
        length_histogram,
    })
}

/// Full report over GT-box predictions aligned one-to-one with samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub dense_map: f64,
    pub map_grid: MapGrid,
    pub meteor_mean: f64,
    pub cider_mean: f64,
    pub control_accuracy: f64,
    pub degeneration: DegenerationReport,
}

impl EvalReport {
    /// `predictions[i]` must describe `samples[i]`. Predictions without
    /// controls count as controlled.
    pub fn compute(predictions: &[Prediction], samples: &[RegionSample]) -> Result<Self> {
        if predictions.len() != samples.len() {
            return Err(Error::Metric(format!(
                "{} predictions for {} samples",
                predictions.len(),
                samples.len()
            )));
        }
        let gts: Vec<GroundTruth> = samples.iter().map(GroundTruth::from).collect();
        let tokens: Vec<Vec<String>> = predictions.iter().map(Prediction::tokens).collect();
        let refs: Vec<Vec<Vec<String>>> = gts.iter().map(|g| g.references.clone()).collect();
        let controls: Vec<Vec<String>> = predictions.iter().map(|p| p.controls.clone().unwrap_or_default()).collect();

        let map_grid = dense_caption_map(predictions, &gts);
        let n = samples.len();
        let mean = |xs: &[f64]| if xs.is_empty() { 0.0 } else { xs.iter().sum::<f64>() / xs.len() as f64 };
        let meteor: Vec<f64> = tokens.iter().zip(&refs).map(|(c, r)| meteor_lite(c, r)).collect();
        let cider = if n == 0 { Vec::new() } else { cider_d(&tokens, &refs)? };
        let report = Self {
            samples: n,
            dense_map: map_grid.map,
            map_grid,
            meteor_mean: mean(&meteor),
            cider_mean: mean(&cider),
            control_accuracy: control_accuracy(&tokens, &controls)?,
            degeneration: degeneration_report(&tokens, samples)?,
        };
        if ![report.dense_map, report.meteor_mean, report.cider_mean, report.control_accuracy]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::NonFinite("evaluation report".into()));
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn meteor_closed_form() {
        let c = toks("a striped red circle left of");
        let s = meteor_lite(&c, &[c.clone()]);
        let expected = 1.0 - 0.5 * (1.0f64 / 6.0).powi(3);
        assert!((s - expected).abs() < 1e-12);
        assert_eq!(meteor_lite(&toks("x y"), &[toks("a b")]), 0.0);
        assert_eq!(meteor_lite::<String, String>(&[], &[toks("a b")]), 0.0);
    }

    #[test]
    fn meteor_alignment_counts_chunks() {
        // "x" jumps to the end of the reference, "a b" stays contiguous.
        assert_eq!(meteor_alignment(&toks("x a b"), &toks("a b x")), (3, 2));
        assert_eq!(meteor_alignment(&toks("a red circle"), &toks("a blue circle")), (2, 2));
    }

    #[test]
    fn cider_identity_and_disjoint() {
        let refs = vec![
            vec![toks("a striped red circle")],
            vec![toks("a blue square left of a red star")],
            vec![toks("a green hexagon")],
        ];
        let s = cider_d(&[toks("a striped red circle")], &refs[..1]).unwrap();
        // A single-document corpus has zero IDF everywhere.
        assert_eq!(s, vec![0.0]);
        let scorer = CiderD::new(&refs).unwrap();
        assert!((scorer.score(&refs[0][0], &refs[0]) - 10.0).abs() < 1e-9);
        assert_eq!(scorer.score(&toks("purple"), &refs[2]), 0.0);
        assert!(CiderD::new::<String>(&[]).is_err());
    }

    #[test]
    fn perfect_predictions_give_unit_map() {
        let gts: Vec<GroundTruth> = (0..4)
            .map(|i| GroundTruth {
                image_id: i / 2,
                bbox: BBox::new(10 * i as u32, 5, 20, 20),
                references: vec![toks("a red circle")],
            })
            .collect();
        let preds: Vec<Prediction> = gts
            .iter()
            .map(|g| Prediction {
                image_id: g.image_id,
                bbox: g.bbox,
                caption: g.references[0].join(" "),
                confidence: 1.0,
                controls: None,
            })
            .collect();
        let grid = dense_caption_map(&preds, &gts);
        assert!((grid.map - 1.0).abs() < 1e-12);

        let empty: Vec<Prediction> = preds.iter().map(|p| Prediction { caption: String::new(), ..p.clone() }).collect();
        let grid = dense_caption_map(&empty, &gts);
        assert!((grid.map - 5.0 / 30.0).abs() < 1e-12);
        assert_eq!(dense_caption_map(&preds, &[]).map, 0.0);
    }

    #[test]
    fn average_precision_examples() {
        assert_eq!(average_precision(&[true, true], 2), 1.0);
        assert_eq!(average_precision(&[false, true], 1), 0.5);
        assert_eq!(average_precision(&[true, false, true], 4), 0.25 + 0.25 * (2.0 / 3.0));
        assert_eq!(average_precision(&[], 3), 0.0);
    }

    #[test]
    fn control_accuracy_hand_count() {
        let caps: Vec<Vec<String>> = ["a red circle", "a blue square", "a FAFACHL star", "a green hexagon"]
            .iter()
            .map(|s| toks(s))
            .collect();
        let ctl = vec![toks("red"), toks("red"), toks("FAFACHL"), vec![]];
        assert_eq!(control_accuracy(&caps, &ctl).unwrap(), 0.75);
        assert!(control_accuracy(&caps, &ctl[..2]).is_err());
    }

    #[test]
    fn template_patterns() {
        assert_eq!(template_of(&toks("a red circle")), Some(TemplateId::T0));
        assert_eq!(template_of(&toks("a dotted red circle")), Some(TemplateId::T1));
        assert_eq!(template_of(&toks("a red circle left of a blue star")), Some(TemplateId::T2));
        assert_eq!(template_of(&toks("a red circle near a blue star")), Some(TemplateId::T2));
        assert_eq!(template_of(&toks("a red circle of a blue star")), None);
        assert_eq!(template_of(&toks("red circle")), None);
    }
}
