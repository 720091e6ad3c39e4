//! Query-based region tagger: `2K` learned queries (subject and object role
//! per class) cross-attend to the visual embedding; a per-query head gives
//! one logit each.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::controlparse::{ClassSet, TagSets};
use crate::error::Result;
use crate::nn::graph::{asl_term, sigmoid};
use crate::nn::layers::{dense_spec, CrossAttentionBlock, LayerNorm};
use crate::nn::{AslParams, Graph, Init, ParamId, ParamStore, RowRef, Var};

/// Which role probabilities self controls are read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TagRole {
    /// Max over the subject and object probability of a word.
    #[default]
    Both,
    Subject,
}

#[derive(Debug, Clone)]
pub struct RegionTagger {
    pub classes: usize,
    pub queries: ParamId,
    pub layers: Vec<CrossAttentionBlock>,
    pub norm: LayerNorm,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

impl RegionTagger {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        classes: usize,
        dim: usize,
        layers: usize,
        heads: usize,
        hidden: usize,
    ) -> Self {
        let q = 2 * classes;
        Self {
            classes,
            queries: store.add("tagger.queries", q, dim, Init::Normal(0.5), rng),
            layers: (0..layers)
                .map(|l| CrossAttentionBlock::new(store, rng, &format!("tagger.layer{l}"), dim, dim, heads, hidden))
                .collect(),
            norm: LayerNorm::new(store, rng, "tagger.norm", dim),
            head_w: store.add("tagger.head.w", q, dim, Init::Normal(1.0 / (dim as f64).sqrt()), rng),
            head_b: store.add("tagger.head.b", 1, q, Init::Zeros, rng),
        }
    }

    /// Logits `[B * 2K, 1]` for a visual embedding `[B * tokens, D]`.
    /// Row `k < K` is subject-class `k`, row `K + k` object-class `k`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, fv: Var, batch: usize, tokens: usize) -> Result<Var> {
        let q = 2 * self.classes;
        let queries = g.param(store, self.queries);
        let index: Vec<RowRef> = (0..batch).flat_map(|_| (0..q).map(|i| Some((0, i as u32)))).collect();
        let mut x = g.gather(&[queries], index);
        for layer in &self.layers {
            x = layer.forward(g, store, x, fv, dense_spec(batch, q, tokens))?;
        }
        let x = self.norm.forward(g, store, x);
        let w = g.param(store, self.head_w);
        let b = g.param(store, self.head_b);
        Ok(g.row_dot(x, w, b))
    }
}

/// Tagger logits for one region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggerOutput {
    pub logits: Vec<f64>,
}

impl TaggerOutput {
    pub fn probabilities(&self) -> Vec<f64> {
        self.logits.iter().map(|&z| sigmoid(z)).collect()
    }

    pub fn classes(&self) -> usize {
        self.logits.len() / 2
    }
}

/// 0/1 targets of length `2K` from gold tag sets.
pub fn tag_targets(tags: &TagSets, class_set: &ClassSet) -> Vec<f64> {
    let k = class_set.len();
    let mut t = vec![0.0; 2 * k];
    for w in &tags.subject {
        if let Some(i) = class_set.index_of(w) {
            t[i] = 1.0;
        }
    }
    for w in &tags.object {
        if let Some(i) = class_set.index_of(w) {
            t[k + i] = 1.0;
        }
    }
    t
}

/// Mean asymmetric loss over entries, from probabilities.
pub fn asymmetric_loss(probabilities: &[f64], targets: &[f64], params: &AslParams) -> f64 {
    assert_eq!(probabilities.len(), targets.len());
    if probabilities.is_empty() {
        return 0.0;
    }
    let total: f64 = probabilities
        .iter()
        .zip(targets)
        .map(|(&p, &t)| asl_term(p, t, params).0)
        .sum();
    total / probabilities.len() as f64
}

/// Words whose role probability reaches `threshold`, most probable first
/// (ties by class index), each word once.
pub fn predict_tags(output: &TaggerOutput, threshold: f64, class_set: &ClassSet, role: TagRole) -> Vec<(String, f64)> {
    let k = class_set.len();
    let p = output.probabilities();
    assert_eq!(p.len(), 2 * k, "tagger output does not match the class set");
    let mut picked: Vec<(usize, f64)> = (0..k)
        .map(|i| {
            let score = match role {
                TagRole::Both => p[i].max(p[k + i]),
                TagRole::Subject => p[i],
            };
            (i, score)
        })
        .filter(|&(_, s)| s >= threshold)
        .collect();
    picked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    picked.into_iter().map(|(i, s)| (class_set.word(i).to_string(), s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    fn output_with(k: usize, set: &[(usize, f64)]) -> TaggerOutput {
        let mut logits = vec![0.0; 2 * k];
        for &(i, p) in set {
            logits[i] = logit(p);
        }
        TaggerOutput { logits }
    }

    #[test]
    fn thresholding_examples() {
        let cs = ClassSet::synthetic();
        let k = cs.len();
        assert!(predict_tags(&output_with(k, &[]), 0.8, &cs, TagRole::Both).is_empty());
        let red = cs.index_of("red").unwrap();
        let out = output_with(k, &[(red, 0.9), (k + red, 0.2)]);
        let tags = predict_tags(&out, 0.8, &cs, TagRole::Both);
        assert_eq!(tags.len(), 1);
        assert_eq!(tags[0].0, "red");
        assert_eq!(predict_tags(&out, 0.0, &cs, TagRole::Both).len(), k);
        // Object-only evidence is ignored in subject mode.
        let obj = output_with(k, &[(k + red, 0.95)]);
        assert_eq!(predict_tags(&obj, 0.8, &cs, TagRole::Both).len(), 1);
        assert!(predict_tags(&obj, 0.8, &cs, TagRole::Subject).is_empty());
    }

    #[test]
    fn order_is_by_probability_then_index() {
        let cs = ClassSet::synthetic();
        let k = cs.len();
        let out = output_with(k, &[(3, 0.85), (1, 0.95), (7, 0.85)]);
        let words: Vec<usize> = predict_tags(&out, 0.8, &cs, TagRole::Both)
            .iter()
            .map(|(w, _)| cs.index_of(w).unwrap())
            .collect();
        assert_eq!(words, vec![1, 3, 7]);
    }

    #[test]
    fn asl_closed_forms() {
        let p = AslParams::default();
        assert!((asymmetric_loss(&[0.5], &[1.0], &p) - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(asymmetric_loss(&[0.03], &[0.0], &p), 0.0);
    }
}
