//! Bidirectional bridging between the visual and control embeddings in a
//! shared low-dimensional latent space.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{dense_spec, masked_spec, CrossAttentionBlock, Linear};
use crate::nn::{Graph, Init, ParamStore, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BibMode {
    Off,
    /// Control information flows into the visual embedding only.
    C2v,
    Full,
}

impl std::str::FromStr for BibMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown BiB mode {s:?}")))
    }
}

#[derive(Debug, Clone)]
pub struct Bridge {
    pub down_v: Linear,
    pub down_c: Linear,
    pub c2v: CrossAttentionBlock,
    pub v2c: Option<CrossAttentionBlock>,
    pub up_v: Linear,
    pub up_c: Option<Linear>,
}

/// Shapes of the two sequences entering the bridge.
#[derive(Debug, Clone)]
pub struct BridgeShape {
    pub batch: usize,
    pub visual_len: usize,
    pub control_len: usize,
    /// Valid control rows per item (at least 1).
    pub control_lengths: Vec<usize>,
}

impl Bridge {
    /// `mode` must not be [`BibMode::Off`]. Up-adapters start at zero so
    /// the bridge is the identity at initialization.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        mode: BibMode,
        d_v: usize,
        d_c: usize,
        d_lat: usize,
        heads: usize,
        hidden: usize,
    ) -> Self {
        assert_ne!(mode, BibMode::Off);
        let full = mode == BibMode::Full;
        Self {
            down_v: Linear::new(store, rng, "bib.down_v", d_v, d_lat),
            down_c: Linear::new(store, rng, "bib.down_c", d_c, d_lat),
            c2v: CrossAttentionBlock::new(store, rng, "bib.c2v", d_lat, d_lat, heads, hidden),
            v2c: full.then(|| CrossAttentionBlock::new(store, rng, "bib.v2c", d_lat, d_lat, heads, hidden)),
            up_v: Linear::with_init(store, rng, "bib.up_v", d_lat, d_v, Init::Zeros, true),
            up_c: full.then(|| Linear::with_init(store, rng, "bib.up_c", d_lat, d_c, Init::Zeros, true)),
        }
    }

    /// Returns `(F_v', F_c')`. Both directions read the same pre-update
    /// latents.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, fv: Var, fc: Var, shape: &BridgeShape) -> Result<(Var, Var)> {
        let (b, tv, tc) = (shape.batch, shape.visual_len, shape.control_len);
        let lv = self.down_v.forward(g, store, fv);
        let lc = self.down_c.forward(g, store, fc);

        let mask: Vec<bool> = shape
            .control_lengths
            .iter()
            .flat_map(|&n| (0..tv).flat_map(move |_| (0..tc).map(move |j| j < n)))
            .collect();
        let hv = self.c2v.forward(g, store, lv, lc, masked_spec(b, tv, tc, mask))?;
        let dv = self.up_v.forward(g, store, hv);
        let fv2 = g.add(fv, dv);

        let fc2 = match (&self.v2c, &self.up_c) {
            (Some(block), Some(up)) => {
                let hc = block.forward(g, store, lc, lv, dense_spec(b, tc, tv))?;
                let dc = up.forward(g, store, hc);
                g.add(fc, dc)
            }
            _ => fc,
        };
        Ok((fv2, fc2))
    }
}
