//! Learned-query aligner and a small prefix language model with beam
//! search decoding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::layers::{dense_spec, masked_spec, CrossAttentionBlock, LayerNorm, TransformerLayer};
use crate::nn::{Graph, Init, ParamId, ParamStore, RowRef, Tensor, Var};

/// Order of the two prefix blocks in the decoder input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrefixOrder {
    #[default]
    VisualFirst,
    ControlFirst,
}

/// `N_a` learned queries cross-attending to the (bridged) visual embedding.
#[derive(Debug, Clone)]
pub struct Aligner {
    pub queries: ParamId,
    pub layers: Vec<CrossAttentionBlock>,
    pub norm: LayerNorm,
}

impl Aligner {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        n_queries: usize,
        d_lm: usize,
        d_v: usize,
        layers: usize,
        heads: usize,
        hidden: usize,
    ) -> Self {
        Self {
            queries: store.add("aligner.queries", n_queries, d_lm, Init::Normal(0.5), rng),
            layers: (0..layers)
                .map(|l| CrossAttentionBlock::new(store, rng, &format!("aligner.layer{l}"), d_lm, d_v, heads, hidden))
                .collect(),
            norm: LayerNorm::new(store, rng, "aligner.norm", d_lm),
        }
    }

    pub fn n_queries(&self, store: &ParamStore) -> usize {
        store.get(self.queries).rows
    }

    /// `[B * N_a, D_lm]` from `fv [B * tokens, D_v]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, fv: Var, batch: usize, tokens: usize) -> Result<Var> {
        let na = self.n_queries(store);
        let q = g.param(store, self.queries);
        let index: Vec<RowRef> = (0..batch).flat_map(|_| (0..na).map(|i| Some((0, i as u32)))).collect();
        let mut x = g.gather(&[q], index);
        for layer in &self.layers {
            x = layer.forward(g, store, x, fv, dense_spec(batch, na, tokens))?;
        }
        Ok(self.norm.forward(g, store, x))
    }
}

/// Decoder prefix for a batch: `len` rows per item, some possibly padding.
#[derive(Debug, Clone)]
pub struct Prefix {
    pub rows: Var,
    pub len: usize,
    /// `[B * len]`.
    pub valid: Vec<bool>,
}

impl Prefix {
    /// Concatenates the visual prefix `[B * n_v]` and the control prefix
    /// `[B * n_c]` (with per-row validity) in the given order.
    pub fn assemble(
        g: &mut Graph,
        visual: Var,
        n_v: usize,
        control: Option<(Var, usize, Vec<bool>)>,
        order: PrefixOrder,
        batch: usize,
    ) -> Prefix {
        let Some((control, n_c, cvalid)) = control else {
            return Prefix {
                rows: visual,
                len: n_v,
                valid: vec![true; batch * n_v],
            };
        };
        let len = n_v + n_c;
        let mut index: Vec<RowRef> = Vec::with_capacity(batch * len);
        let mut valid = Vec::with_capacity(batch * len);
        for b in 0..batch {
            let vis = (0..n_v).map(|i| (Some((0u32, (b * n_v + i) as u32)), true));
            let ctl = (0..n_c).map(|i| (Some((1u32, (b * n_c + i) as u32)), cvalid[b * n_c + i]));
            let block: Vec<_> = match order {
                PrefixOrder::VisualFirst => vis.chain(ctl).collect(),
                PrefixOrder::ControlFirst => ctl.chain(vis).collect(),
            };
            for (r, v) in block {
                index.push(r);
                valid.push(v);
            }
        }
        Prefix {
            rows: g.gather(&[visual, control], index),
            len,
            valid,
        }
    }
}

/// Prefix LM: full attention over the prefix, causal over caption tokens,
/// with the input embedding tied to the output projection.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub embed: ParamId,
    pub pos: ParamId,
    pub layers: Vec<TransformerLayer>,
    pub norm: LayerNorm,
    pub max_len: usize,
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        vocab: usize,
        d_lm: usize,
        layers: usize,
        heads: usize,
        hidden: usize,
        max_len: usize,
    ) -> Self {
        Self {
            embed: store.add("decoder.embed", vocab, d_lm, Init::Normal(0.5), rng),
            pos: store.add("decoder.pos", max_len + 1, d_lm, Init::Normal(0.1), rng),
            layers: (0..layers)
                .map(|l| TransformerLayer::new(store, rng, &format!("decoder.layer{l}"), d_lm, heads, hidden))
                .collect(),
            norm: LayerNorm::new(store, rng, "decoder.norm", d_lm),
            max_len,
        }
    }

    /// Attention mask for one item: `prefix_valid` flags, then `caption_len`
    /// caption positions of which the first `n_tokens` are real.
    pub fn mask(prefix_valid: &[bool], caption_len: usize, n_tokens: usize) -> Vec<bool> {
        let p = prefix_valid.len();
        let t = p + caption_len;
        let mut m = vec![false; t * t];
        for i in 0..t {
            for j in 0..t {
                let key_ok = if j < p { prefix_valid[j] } else { j - p < n_tokens };
                let visible = if j < p {
                    true
                } else {
                    // Caption keys: causal, and never visible from the prefix.
                    i >= p && j <= i
                };
                m[i * t + j] = key_ok && visible;
            }
        }
        m
    }

    /// Next-token logits `[B * L, V]` for caption inputs (each starting with
    /// BOS), padded to the longest input `L`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, prefix: &Prefix, inputs: &[Vec<u32>]) -> Var {
        let b = inputs.len();
        let l = inputs.iter().map(Vec::len).max().unwrap_or(1).max(1);
        assert!(l <= self.max_len + 1, "caption input longer than the positional table");
        let table = g.param(store, self.embed);
        let tok_index: Vec<RowRef> = inputs
            .iter()
            .flat_map(|s| (0..l).map(move |i| s.get(i).map(|&t| (0, t))))
            .collect();
        let tok = g.gather(&[table], tok_index);
        let pos_all = g.param(store, self.pos);
        let pos = g.gather(&[pos_all], (0..l).map(|i| Some((0, i as u32))).collect());
        let cap = g.add_tiled(tok, pos);

        let p = prefix.len;
        let t = p + l;
        let mut index: Vec<RowRef> = Vec::with_capacity(b * t);
        let mut mask = Vec::with_capacity(b * t * t);
        for (k, s) in inputs.iter().enumerate() {
            index.extend((0..p).map(|i| Some((0, (k * p + i) as u32))));
            index.extend((0..l).map(|i| Some((1, (k * l + i) as u32))));
            mask.extend(Self::mask(&prefix.valid[k * p..(k + 1) * p], l, s.len()));
        }
        let mut x = g.gather(&[prefix.rows, cap], index);
        let spec = masked_spec(b, t, t, mask);
        for layer in &self.layers {
            x = layer.forward(g, store, x, spec.clone());
        }
        let out_index: Vec<RowRef> = (0..b)
            .flat_map(|k| (0..l).map(move |i| Some((0, (k * t + p + i) as u32))))
            .collect();
        let h = g.gather(&[x], out_index);
        let h = self.norm.forward(g, store, h);
        g.matmul_bt(h, table)
    }
}

/// Teacher-forcing pair for a caption: inputs `[BOS, y...]`, targets
/// `[y..., EOS]`.
pub fn teacher_forcing(caption: &[u32], bos: u32, eos: u32) -> (Vec<u32>, Vec<u32>) {
    let mut input = Vec::with_capacity(caption.len() + 1);
    input.push(bos);
    input.extend_from_slice(caption);
    let mut target = caption.to_vec();
    target.push(eos);
    (input, target)
}

/// Mean next-token cross-entropy over caption positions of a batch.
pub fn caption_loss(g: &mut Graph, logits: Var, targets: &[Vec<u32>]) -> Var {
    let l = g.value(logits).rows / targets.len().max(1);
    let flat: Vec<Option<u32>> = targets
        .iter()
        .flat_map(|t| (0..l).map(move |i| t.get(i).copied()))
        .collect();
    g.cross_entropy(logits, flat)
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lz = row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln() + mx;
    row.iter().map(|x| x - lz).collect()
}

/// Decoding settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub beam_size: usize,
    /// Maximum generated tokens including the final EOS.
    pub max_len: usize,
    pub length_alpha: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_size: 3,
            max_len: 24,
            length_alpha: 0.7,
        }
    }
}

/// A finished hypothesis (without BOS, with EOS).
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub logprob: f64,
    pub score: f64,
}

/// Next-token log-probabilities for a set of partial sequences sharing
/// one prefix.
pub trait StepModel {
    fn next_logprobs(&self, sequences: &[Vec<u32>]) -> Vec<Vec<f64>>;
}

/// Decoder step model over a fixed prefix value.
pub struct PrefixStep<'a> {
    pub decoder: &'a Decoder,
    pub store: &'a ParamStore,
    pub prefix: Tensor,
    pub valid: Vec<bool>,
}

impl StepModel for PrefixStep<'_> {
    fn next_logprobs(&self, sequences: &[Vec<u32>]) -> Vec<Vec<f64>> {
        let b = sequences.len();
        let p = self.prefix.rows;
        let mut g = Graph::new();
        let single = g.constant(self.prefix.clone());
        let rows = g.gather(&[single], (0..b).flat_map(|_| (0..p).map(|i| Some((0, i as u32)))).collect());
        let prefix = Prefix {
            rows,
            len: p,
            valid: (0..b).flat_map(|_| self.valid.iter().copied()).collect(),
        };
        let logits = self.decoder.forward(&mut g, self.store, &prefix, sequences);
        let lv = g.value(logits);
        let l = lv.rows / b;
        sequences
            .iter()
            .enumerate()
            .map(|(k, s)| log_softmax(lv.row(k * l + s.len() - 1)))
            .collect()
    }
}

/// Length-normalized beam search. `banned` tokens are never generated;
/// EOS is forced once `max_len` tokens exist. Ties break towards the lower
/// beam index, then the lower token id.
pub fn beam_search(model: &impl StepModel, bos: u32, eos: u32, banned: &[u32], cfg: &BeamConfig) -> Hypothesis {
    let k = cfg.beam_size.max(1);
    let norm = |logprob: f64, len: usize| logprob / (len as f64).powf(cfg.length_alpha);
    let mut live: Vec<(Vec<u32>, f64)> = vec![(vec![bos], 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for step in 0..cfg.max_len {
        let seqs: Vec<Vec<u32>> = live.iter().map(|(s, _)| s.clone()).collect();
        let lps = model.next_logprobs(&seqs);
        let last = step + 1 == cfg.max_len;
        let mut cands: Vec<(f64, usize, u32)> = Vec::new();
        for (bi, lp) in lps.iter().enumerate() {
            let base = live[bi].1;
            if last {
                cands.push((base + lp[eos as usize], bi, eos));
                continue;
            }
            for (t, &v) in lp.iter().enumerate() {
                if !banned.contains(&(t as u32)) {
                    cands.push((base + v, bi, t as u32));
                }
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(k);
        for (rank, &(lp, bi, t)) in cands.iter().enumerate() {
            if t == eos {
                // Only hypotheses ranked inside the beam may finish.
                if rank < k {
                    let mut tokens = live[bi].0[1..].to_vec();
                    tokens.push(eos);
                    let len = tokens.len();
                    finished.push(Hypothesis {
                        tokens,
                        logprob: lp,
                        score: norm(lp, len),
                    });
                }
            } else {
                let mut s = live[bi].0.clone();
                s.push(t);
                next.push((s, lp));
            }
            if next.len() == k {
                break;
            }
        }
        live = next;
        if finished.len() >= k || live.is_empty() {
            break;
        }
    }
    finished
        .into_iter()
        .min_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens)))
        .expect("EOS is forced at max_len, so a hypothesis always finishes")
}

/// Argmax decoding with the same banned set and tie-breaks.
pub fn greedy(model: &impl StepModel, bos: u32, eos: u32, banned: &[u32], max_len: usize) -> Hypothesis {
    let mut seq = vec![bos];
    let mut logprob = 0.0;
    for step in 0..max_len {
        let lp = &model.next_logprobs(std::slice::from_ref(&seq))[0];
        let t = if step + 1 == max_len {
            eos
        } else {
            let mut best = None::<(u32, f64)>;
            for (t, &v) in lp.iter().enumerate() {
                if banned.contains(&(t as u32)) {
                    continue;
                }
                if best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((t as u32, v));
                }
            }
            best.expect("vocabulary has allowed tokens").0
        };
        logprob += lp[t as usize];
        seq.push(t);
        if t == eos {
            break;
        }
    }
    let tokens = seq[1..].to_vec();
    let len = tokens.len();
    Hypothesis {
        tokens,
        logprob,
        score: logprob / (len as f64).powf(0.7),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed chain: after token `t` the most likely next token is `t + 1`,
    /// ending with EOS after `stop`.
    struct Chain {
        vocab: usize,
        eos: u32,
        stop: u32,
    }

    impl StepModel for Chain {
        fn next_logprobs(&self, seqs: &[Vec<u32>]) -> Vec<Vec<f64>> {
            seqs.iter()
                .map(|s| {
                    let last = *s.last().unwrap();
                    let want = if last >= self.stop { self.eos } else { last + 1 };
                    let mut row = vec![-5.0; self.vocab];
                    row[want as usize] = 0.0;
                    log_softmax(&row)
                })
                .collect()
        }
    }

    #[test]
    fn rigged_chain_decodes_exactly() {
        let m = Chain { vocab: 8, eos: 7, stop: 4 };
        let cfg = BeamConfig::default();
        let h = beam_search(&m, 0, 7, &[0], &cfg);
        assert_eq!(h.tokens, vec![1, 2, 3, 4, 7]);
        assert_eq!(greedy(&m, 0, 7, &[0], 24).tokens, h.tokens);
    }

    #[test]
    fn eos_is_forced_at_max_len() {
        let m = Chain { vocab: 40, eos: 39, stop: 38 };
        let cfg = BeamConfig {
            max_len: 5,
            ..BeamConfig::default()
        };
        let h = beam_search(&m, 0, 39, &[0], &cfg);
        assert_eq!(h.tokens.len(), 5);
        assert_eq!(*h.tokens.last().unwrap(), 39);
    }

    #[test]
    fn prefix_mask_structure() {
        let m = Decoder::mask(&[true, true, false], 3, 2);
        let t = 6;
        let at = |i: usize, j: usize| m[i * t + j];
        // Prefix rows see valid prefix keys only.
        assert!(at(0, 0) && at(0, 1) && !at(0, 2) && !at(0, 3));
        // Caption rows see the prefix and earlier caption tokens.
        assert!(at(4, 0) && at(4, 3) && at(4, 4) && !at(4, 5));
        assert!(!at(3, 4));
        // Padding caption keys are never visible.
        assert!(!at(5, 5));
    }
}
