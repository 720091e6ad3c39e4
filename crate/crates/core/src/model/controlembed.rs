//! Control embedding: control tokens looked up in the shared decoder
//! embedding table, each shifted by the learned memory unit `theta`.

use rand::Rng;

use crate::nn::{Graph, Init, ParamId, ParamStore, RowRef, Var};

#[derive(Debug, Clone)]
pub struct ControlEmbedder {
    pub theta: ParamId,
}

/// Batched control embedding, padded to a common length.
#[derive(Debug, Clone)]
pub struct ControlBatch {
    /// `[B * len, D]`.
    pub tokens: Var,
    pub len: usize,
    /// Valid rows per item (at least 1).
    pub lengths: Vec<usize>,
}

impl ControlBatch {
    /// `[B * len]` validity flags.
    pub fn valid(&self) -> Vec<bool> {
        self.lengths
            .iter()
            .flat_map(|&n| (0..self.len).map(move |i| i < n))
            .collect()
    }
}

impl ControlEmbedder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, dim: usize) -> Self {
        Self {
            theta: store.add("control.theta", 1, dim, Init::Normal(0.02), rng),
        }
    }

    /// Embeds token-id sentences. A non-empty sentence gives
    /// `E[token] + theta` per token; an empty one gives the single row
    /// `theta`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, table: Var, sentences: &[Vec<u32>]) -> ControlBatch {
        let lengths: Vec<usize> = sentences.iter().map(|s| s.len().max(1)).collect();
        let len = lengths.iter().copied().max().unwrap_or(1);
        let mut index: Vec<RowRef> = Vec::with_capacity(sentences.len() * len);
        for s in sentences {
            for i in 0..len {
                index.push(s.get(i).map(|&t| (0, t)));
            }
        }
        let rows = g.gather(&[table], index);
        let theta = g.param(store, self.theta);
        let tokens = g.add_tiled(rows, theta);
        ControlBatch { tokens, len, lengths }
    }
}
