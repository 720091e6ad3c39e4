//! Reusable blocks: linear maps, layer norm, pre-norm transformer layers,
//! cross-attention, the patch encoder and the RoI-align sampler.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{AttnSpec, Graph, RowRef, SparseEntry, Var};
use super::params::{Init, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::synthworld::BBox;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    /// Fan-in initialized weight with a zero bias.
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d_in: usize, d_out: usize) -> Self {
        Self::with_init(store, rng, name, d_in, d_out, Init::FanIn, true)
    }

    pub fn with_init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        init: Init,
        bias: bool,
    ) -> Self {
        let w = store.add(&format!("{name}.w"), d_in, d_out, init, rng);
        let b = bias.then(|| store.add(&format!("{name}.b"), 1, d_out, Init::Zeros, rng));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(&format!("{name}.gamma"), 1, d, Init::Ones, rng),
            beta: store.add(&format!("{name}.beta"), 1, d, Init::Zeros, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Pre-norm residual MLP: `x + W2 gelu(W1 norm(x))`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub norm: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize, hidden: usize) -> Self {
        Self {
            norm: LayerNorm::new(store, rng, &format!("{name}.norm"), d),
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), d, hidden),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, d),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.norm.forward(g, store, x);
        let h = self.fc1.forward(g, store, h);
        let h = g.gelu(h);
        let h = self.fc2.forward(g, store, h);
        g.add(x, h)
    }
}

/// Multi-head attention with separate query / key-value input widths.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize, d_kv: usize, heads: usize) -> Self {
        assert!(heads > 0 && d % heads == 0, "{name}: {heads} heads do not divide {d}");
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), d, d),
            k: Linear::new(store, rng, &format!("{name}.k"), d_kv, d),
            v: Linear::new(store, rng, &format!("{name}.v"), d_kv, d),
            o: Linear::new(store, rng, &format!("{name}.o"), d, d),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, xq: Var, xkv: Var, spec: AttnSpec) -> Var {
        let q = self.q.forward(g, store, xq);
        let k = self.k.forward(g, store, xkv);
        let v = self.v.forward(g, store, xkv);
        let spec = AttnSpec { heads: self.heads, ..spec };
        let a = g.attention(q, k, v, spec);
        self.o.forward(g, store, a)
    }
}

/// Pre-norm self-attention layer followed by a feed-forward layer.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ff: FeedForward,
}

impl TransformerLayer {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize, heads: usize, hidden: usize) -> Self {
        Self {
            norm: LayerNorm::new(store, rng, &format!("{name}.norm"), d),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), d, d, heads),
            ff: FeedForward::new(store, rng, &format!("{name}.ff"), d, hidden),
        }
    }

    /// `spec.nq` must equal `spec.nk`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, spec: AttnSpec) -> Var {
        debug_assert_eq!(spec.nq, spec.nk);
        let h = self.norm.forward(g, store, x);
        let a = self.attn.forward(g, store, h, h, spec);
        let x = g.add(x, a);
        self.ff.forward(g, store, x)
    }
}

/// Queries attend to a separate key/value sequence; both attention and
/// feed-forward are pre-norm residual. No positional information is added
/// inside the block, so the output is invariant to the order of kv rows.
#[derive(Debug, Clone)]
pub struct CrossAttentionBlock {
    pub norm_q: LayerNorm,
    pub norm_kv: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ff: FeedForward,
}

impl CrossAttentionBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d: usize,
        d_kv: usize,
        heads: usize,
        hidden: usize,
    ) -> Self {
        Self {
            norm_q: LayerNorm::new(store, rng, &format!("{name}.norm_q"), d),
            norm_kv: LayerNorm::new(store, rng, &format!("{name}.norm_kv"), d_kv),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), d, d_kv, heads),
            ff: FeedForward::new(store, rng, &format!("{name}.ff"), d, hidden),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, q: Var, kv: Var, spec: AttnSpec) -> Result<Var> {
        if spec.nk == 0 {
            return Err(Error::Shape("cross-attention needs at least one key".into()));
        }
        let hq = self.norm_q.forward(g, store, q);
        let hkv = self.norm_kv.forward(g, store, kv);
        let a = self.attn.forward(g, store, hq, hkv, spec);
        let x = g.add(q, a);
        Ok(self.ff.forward(g, store, x))
    }
}

/// Attention layout without masking.
pub fn dense_spec(batch: usize, nq: usize, nk: usize) -> AttnSpec {
    AttnSpec {
        batch,
        nq,
        nk,
        heads: 1,
        mask: None,
    }
}

pub fn masked_spec(batch: usize, nq: usize, nk: usize, mask: Vec<bool>) -> AttnSpec {
    debug_assert_eq!(mask.len(), batch * nq * nk);
    AttnSpec {
        batch,
        nq,
        nk,
        heads: 1,
        mask: Some(Rc::new(mask)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
}

impl EncoderConfig {
    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    /// Tokens per image: class token plus one per patch.
    pub fn tokens(&self) -> usize {
        1 + self.grid() * self.grid()
    }
}

/// ViT-style encoder: patch projection, learned positions, a prepended
/// class token and pre-norm transformer layers.
#[derive(Debug, Clone)]
pub struct PatchEncoder {
    pub config: EncoderConfig,
    pub proj: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    pub layers: Vec<TransformerLayer>,
    pub norm: LayerNorm,
}

/// Encoder outputs for a batch: `class [B, D]` and `spatial [B * S * S, D]`.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub class: Var,
    pub spatial: Var,
}

impl PatchEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, config: EncoderConfig) -> Result<Self> {
        if config.patch == 0 || config.image_size % config.patch != 0 {
            return Err(Error::Config(format!(
                "image size {} is not a multiple of patch {}",
                config.image_size, config.patch
            )));
        }
        let d = config.dim;
        let pdim = config.patch * config.patch * 3;
        Ok(Self {
            config,
            proj: Linear::new(store, rng, &format!("{name}.proj"), pdim, d),
            cls: store.add(&format!("{name}.cls"), 1, d, Init::Normal(0.02), rng),
            pos: store.add(&format!("{name}.pos"), config.tokens(), d, Init::Normal(0.02), rng),
            layers: (0..config.layers)
                .map(|l| TransformerLayer::new(store, rng, &format!("{name}.layer{l}"), d, config.heads, d * config.ff_mult))
                .collect(),
            norm: LayerNorm::new(store, rng, &format!("{name}.norm"), d),
        })
    }

    /// Flattens each image into `[S * S, P * P * 3]` patch rows, stacked
    /// over the batch.
    pub fn patchify(&self, images: &[&Image]) -> Result<Tensor> {
        let (n, p, s) = (self.config.image_size, self.config.patch, self.config.grid());
        let pdim = p * p * 3;
        let mut out = Tensor::zeros(images.len() * s * s, pdim);
        for (b, img) in images.iter().enumerate() {
            if img.width != n || img.height != n {
                return Err(Error::Shape(format!(
                    "encoder expects {n}x{n} input, got {}x{}",
                    img.width, img.height
                )));
            }
            for py in 0..s {
                for px in 0..s {
                    let row = out.row_mut((b * s + py) * s + px);
                    for y in 0..p {
                        for x in 0..p {
                            let i = ((py * p + y) * n + px * p + x) * 3;
                            for c in 0..3 {
                                row[(y * p + x) * 3 + c] = img.data[i + c] as f64;
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Patch projection alone (no positions, no mixing).
    pub fn embed_patches(&self, g: &mut Graph, store: &ParamStore, patches: Var) -> Var {
        self.proj.forward(g, store, patches)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, images: &[&Image]) -> Result<Encoded> {
        let patches = self.patchify(images)?;
        let patches = g.constant(patches);
        Ok(self.forward_patches(g, store, patches, images.len()))
    }

    pub fn forward_patches(&self, g: &mut Graph, store: &ParamStore, patches: Var, batch: usize) -> Encoded {
        let ss = self.config.grid() * self.config.grid();
        let t = ss + 1;
        let emb = self.embed_patches(g, store, patches);
        let cls = g.param(store, self.cls);
        let mut index: Vec<RowRef> = Vec::with_capacity(batch * t);
        for b in 0..batch {
            index.push(Some((1, 0)));
            index.extend((0..ss).map(|i| Some((0, (b * ss + i) as u32))));
        }
        let x = g.gather(&[emb, cls], index);
        let pos = g.param(store, self.pos);
        let mut x = g.add_tiled(x, pos);
        for layer in &self.layers {
            x = layer.forward(g, store, x, dense_spec(batch, t, t));
        }
        let x = self.norm.forward(g, store, x);
        let class = g.gather(&[x], (0..batch).map(|b| Some((0, (b * t) as u32))).collect());
        let spatial = g.gather(
            &[x],
            (0..batch)
                .flat_map(|b| (0..ss).map(move |i| Some((0, (b * t + 1 + i) as u32))))
                .collect(),
        );
        Encoded { class, spatial }
    }
}

/// Bilinear weights of the point `(gx, gy)` on an `s x s` grid, in cell
/// units with cell centres at integers. Coordinates are clamped to the grid.
fn bilinear(gx: f64, gy: f64, s: usize) -> [(usize, f64); 4] {
    let max = (s - 1) as f64;
    let (gx, gy) = (gx.clamp(0.0, max), gy.clamp(0.0, max));
    let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(s - 1), (y0 + 1).min(s - 1));
    let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
    [
        (y0 * s + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * s + x1, fx * (1.0 - fy)),
        (y1 * s + x0, (1.0 - fx) * fy),
        (y1 * s + x1, fx * fy),
    ]
}

/// RoI-align as a sparse linear map from the `grid x grid` cells of one
/// spatial map to `out x out` bins.
///
/// `cell` is the size of one grid cell in the box's pixel units. The box is
/// mapped continuously (no rounding); each bin averages `ratio x ratio`
/// bilinear samples placed uniformly inside it.
pub fn roi_align_map(grid: usize, cell: f64, bbox: &BBox, out: usize, ratio: usize) -> Result<Vec<SparseEntry>> {
    if bbox.w == 0 || bbox.h == 0 {
        return Err(Error::InvalidBox(format!("zero-area box {bbox:?}")));
    }
    if grid == 0 || out == 0 || ratio == 0 {
        return Err(Error::Shape("roi_align needs non-empty grid, output and sampling".into()));
    }
    let (x0, y0) = (bbox.x as f64 / cell, bbox.y as f64 / cell);
    let (bw, bh) = (bbox.w as f64 / cell / out as f64, bbox.h as f64 / cell / out as f64);
    let norm = 1.0 / (ratio * ratio) as f64;
    let mut acc = vec![0.0; out * out * grid * grid];
    for oy in 0..out {
        for ox in 0..out {
            let o = oy * out + ox;
            for sy in 0..ratio {
                let y = y0 + bh * (oy as f64 + (sy as f64 + 0.5) / ratio as f64) - 0.5;
                for sx in 0..ratio {
                    let x = x0 + bw * (ox as f64 + (sx as f64 + 0.5) / ratio as f64) - 0.5;
                    for (i, w) in bilinear(x, y, grid) {
                        acc[o * grid * grid + i] += w * norm;
                    }
                }
            }
        }
    }
    let cells = grid * grid;
    Ok(acc
        .iter()
        .enumerate()
        .filter(|(_, &w)| w != 0.0)
        .map(|(k, &w)| ((k / cells) as u32, (k % cells) as u32, w))
        .collect())
}

/// Applies per-item RoI maps to a batched spatial map `[B * grid^2, D]`.
pub fn roi_align(g: &mut Graph, spatial: Var, maps: &[Vec<SparseEntry>], grid: usize, out: usize) -> Var {
    let (cells, bins) = ((grid * grid) as u32, (out * out) as u32);
    let mut all = Vec::with_capacity(maps.iter().map(Vec::len).sum());
    for (b, m) in maps.iter().enumerate() {
        let b = b as u32;
        all.extend(m.iter().map(|&(o, i, w)| (b * bins + o, b * cells + i, w)));
    }
    g.sparse_map(spatial, maps.len() * out * out, Rc::new(all))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid_values(s: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(s * s, d, (0..s * s * d).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn apply(map: &[SparseEntry], x: &Tensor, out: usize) -> Tensor {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let y = g.sparse_map(v, out * out, Rc::new(map.to_vec()));
        g.value(y).clone()
    }

    #[test]
    fn full_box_at_cell_centres_is_identity() {
        let x = grid_values(6, 3, 1);
        let map = roi_align_map(6, 8.0, &BBox::new(0, 0, 48, 48), 6, 1).unwrap();
        assert!(apply(&map, &x, 6).max_abs_diff(&x) <= 1e-12);
    }

    #[test]
    fn constant_grid_gives_constant_bins() {
        let x = Tensor::full(36, 2, 0.7);
        for b in [BBox::new(3, 5, 20, 11), BBox::new(0, 0, 48, 48), BBox::new(40, 40, 8, 8)] {
            let map = roi_align_map(6, 8.0, &b, 6, 2).unwrap();
            let y = apply(&map, &x, 6);
            assert!(y.data.iter().all(|v| (v - 0.7).abs() < 1e-12));
        }
    }

    #[test]
    fn zero_area_box_is_rejected() {
        assert!(roi_align_map(6, 8.0, &BBox { x: 0, y: 0, w: 0, h: 4 }, 6, 2).is_err());
    }

    #[test]
    fn patch_projection_is_local() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cfg = EncoderConfig {
            image_size: 16,
            patch: 8,
            dim: 4,
            layers: 1,
            heads: 2,
            ff_mult: 2,
        };
        let enc = PatchEncoder::new(&mut store, &mut rng, "enc", cfg).unwrap();
        let a = Image::filled(16, 16, 0.2);
        let mut b = a.clone();
        b.set_pixel(12, 3, [1.0, 0.0, 0.0]); // patch (row 0, col 1)
        let mut g = Graph::new();
        let pa = g.constant(enc.patchify(&[&a]).unwrap());
        let pb = g.constant(enc.patchify(&[&b]).unwrap());
        let ea = enc.embed_patches(&mut g, &store, pa);
        let eb = enc.embed_patches(&mut g, &store, pb);
        let (ea, eb) = (g.value(ea).clone(), g.value(eb).clone());
        for p in 0..4 {
            let same = ea.row(p) == eb.row(p);
            assert_eq!(same, p != 1, "patch {p}");
        }
    }

    #[test]
    fn encoder_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cfg = EncoderConfig {
            image_size: 24,
            patch: 8,
            dim: 8,
            layers: 2,
            heads: 2,
            ff_mult: 2,
        };
        let enc = PatchEncoder::new(&mut store, &mut rng, "enc", cfg).unwrap();
        let img = Image::filled(24, 24, 0.5);
        let mut g = Graph::new();
        let e = enc.forward(&mut g, &store, &[&img, &img]).unwrap();
        assert_eq!((g.value(e.class).rows, g.value(e.class).cols), (2, 8));
        assert_eq!((g.value(e.spatial).rows, g.value(e.spatial).cols), (18, 8));
        let bad = Image::filled(20, 20, 0.5);
        assert!(enc.forward(&mut g, &store, &[&bad]).is_err());
    }
}
