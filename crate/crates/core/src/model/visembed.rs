//! Contextual visual embedding: a global pass over the whole (down-scaled)
//! image and a region pass over the crop, fused per token.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::layers::{roi_align, roi_align_map, EncoderConfig, Linear, PatchEncoder};
use crate::nn::{Graph, ParamStore, RowRef, Var};
use crate::synthworld::BBox;

/// Which branches feed the fused embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CveMode {
    /// Class token from `[G_c; R_c]`, spatial tokens from `[G_roi; R_s]`.
    Full,
    /// Spatial tokens from the region pass only.
    RegionOnly,
    /// Spatial tokens from the RoI-aligned global grid only.
    RoiOnly,
    /// Both spatial branches, no class token.
    NoCls,
}

impl std::str::FromStr for CveMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown CVE mode {s:?}")))
    }
}

/// Both encoder inputs for one referred box.
#[derive(Debug, Clone)]
pub struct VisualInput {
    pub global: Image,
    pub region: Image,
    pub bbox: BBox,
}

impl VisualInput {
    /// Validates the box against the canvas and builds the global and
    /// region views at the encoder resolution (same bilinear resampler for
    /// both, so a full-image box yields two identical views).
    pub fn prepare(canvas: &Image, bbox: BBox, input_size: usize, min_side: u32) -> Result<Self> {
        if !bbox.is_valid_in(canvas.width as u32, canvas.height as u32) {
            return Err(Error::InvalidBox(format!(
                "{:?} is not inside the {}x{} image",
                <[u32; 4]>::from(bbox),
                canvas.width,
                canvas.height
            )));
        }
        if bbox.w < min_side || bbox.h < min_side {
            return Err(Error::InvalidBox(format!(
                "{:?} is smaller than one patch ({min_side} px)",
                <[u32; 4]>::from(bbox)
            )));
        }
        let full = BBox::new(0, 0, canvas.width as u32, canvas.height as u32);
        Ok(Self {
            global: canvas.crop_resize(&full, input_size, input_size),
            region: canvas.crop_resize(&bbox, input_size, input_size),
            bbox,
        })
    }
}

/// Two-layer MLP with a GELU in between.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d_in: usize, hidden: usize, d_out: usize) -> Self {
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), d_in, hidden),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, d_out),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.fc1.forward(g, store, x);
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CveConfig {
    pub encoder: EncoderConfig,
    pub canvas: usize,
    pub mode: CveMode,
    pub roi_ratio: usize,
    pub fusion_hidden: usize,
}

impl CveConfig {
    /// Tokens per embedded region.
    pub fn tokens(&self) -> usize {
        let s = self.encoder.grid();
        s * s + usize::from(self.mode != CveMode::NoCls)
    }

    /// One encoder patch measured in canvas pixels.
    pub fn patch_in_canvas(&self) -> f64 {
        self.canvas as f64 / self.encoder.grid() as f64
    }
}

/// Intermediate and fused embeddings of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct CveParts {
    pub g_c: Var,
    pub g_s: Var,
    pub g_roi: Var,
    pub r_c: Var,
    pub r_s: Var,
    /// `[B * tokens, D]`: fused class token (if any) then the spatial tokens.
    pub fused: Var,
}

#[derive(Debug, Clone)]
pub struct VisualEmbedder {
    pub config: CveConfig,
    pub encoder: PatchEncoder,
    pub mlp_c: Option<Mlp>,
    pub mlp_s: Mlp,
}

impl VisualEmbedder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, config: CveConfig) -> Result<Self> {
        let encoder = PatchEncoder::new(store, rng, "cve.encoder", config.encoder)?;
        let d = config.encoder.dim;
        let h = config.fusion_hidden;
        let mlp_c = (config.mode != CveMode::NoCls).then(|| Mlp::new(store, rng, "cve.mlp_c", 2 * d, h, d));
        let s_in = match config.mode {
            CveMode::Full | CveMode::NoCls => 2 * d,
            CveMode::RegionOnly | CveMode::RoiOnly => d,
        };
        let mlp_s = Mlp::new(store, rng, "cve.mlp_s", s_in, h, d);
        Ok(Self {
            config,
            encoder,
            mlp_c,
            mlp_s,
        })
    }

    pub fn tokens(&self) -> usize {
        self.config.tokens()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, inputs: &[&VisualInput]) -> Result<CveParts> {
        let b = inputs.len();
        let s = self.config.encoder.grid();
        let ss = s * s;
        let images: Vec<&Image> = inputs.iter().map(|i| &i.global).chain(inputs.iter().map(|i| &i.region)).collect();
        let enc = self.encoder.forward(g, store, &images)?;

        // Split the joint pass back into its global and region halves.
        let rows = |n: usize, start: usize| -> Vec<RowRef> { (start..start + n).map(|r| Some((0, r as u32))).collect() };
        let g_c = g.gather(&[enc.class], rows(b, 0));
        let r_c = g.gather(&[enc.class], rows(b, b));
        let g_s = g.gather(&[enc.spatial], rows(b * ss, 0));
        let r_s = g.gather(&[enc.spatial], rows(b * ss, b * ss));

        let cell = self.config.patch_in_canvas();
        let maps = inputs
            .iter()
            .map(|i| roi_align_map(s, cell, &i.bbox, s, self.config.roi_ratio))
            .collect::<Result<Vec<_>>>()?;
        let g_roi = roi_align(g, g_s, &maps, s, s);

        let spatial_in = match self.config.mode {
            CveMode::Full | CveMode::NoCls => g.concat_cols(g_roi, r_s),
            CveMode::RegionOnly => r_s,
            CveMode::RoiOnly => g_roi,
        };
        let spatial = self.mlp_s.forward(g, store, spatial_in);
        let fused = match &self.mlp_c {
            Some(mlp) => {
                let cls_in = g.concat_cols(g_c, r_c);
                let cls = mlp.forward(g, store, cls_in);
                let mut index = Vec::with_capacity(b * (ss + 1));
                for i in 0..b {
                    index.push(Some((0, i as u32)));
                    index.extend((0..ss).map(|k| Some((1, (i * ss + k) as u32))));
                }
                g.gather(&[cls, spatial], index)
            }
            None => spatial,
        };
        Ok(CveParts {
            g_c,
            g_s,
            g_roi,
            r_c,
            r_s,
            fused,
        })
    }
}
