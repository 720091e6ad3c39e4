//! The captioning model and its parts.

pub mod bib;
pub mod captiondec;
pub mod controlembed;
pub mod regiontag;
pub mod visembed;
pub mod vocab;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controlparse::{ClassSet, ControlSentence, ControlSource};
use crate::error::{Error, Result};
use crate::nn::checkpoint;
use crate::nn::layers::EncoderConfig;
use crate::nn::{AslParams, Graph, ParamStore, Tensor, Var};

use bib::{BibMode, Bridge, BridgeShape};
use captiondec::{beam_search, caption_loss, Aligner, BeamConfig, Decoder, Prefix, PrefixOrder, PrefixStep};
use controlembed::ControlEmbedder;
use regiontag::{predict_tags, RegionTagger, TagRole, TaggerOutput};
use visembed::{CveConfig, CveMode, VisualEmbedder, VisualInput};
use vocab::Vocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub canvas: usize,
    pub image_size: usize,
    pub patch: usize,
    pub dim_v: usize,
    pub encoder_layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub cve: CveMode,
    pub roi_ratio: usize,
    pub fusion_hidden: usize,
    /// Region tagger on/off.
    pub tagger: bool,
    pub tagger_layers: usize,
    pub asl: AslParams,
    /// Control embedding on/off. Without it the decoder sees only the
    /// visual prefix.
    pub control: bool,
    pub bib: BibMode,
    pub dim_lat: usize,
    pub dim_lm: usize,
    pub aligner_queries: usize,
    pub aligner_layers: usize,
    pub decoder_layers: usize,
    pub max_len: usize,
    pub prefix_order: PrefixOrder,
    pub num_classes: usize,
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            canvas: 96,
            image_size: 56,
            patch: 8,
            dim_v: 32,
            encoder_layers: 2,
            heads: 4,
            ff_mult: 2,
            cve: CveMode::Full,
            roi_ratio: 2,
            fusion_hidden: 64,
            tagger: true,
            tagger_layers: 2,
            asl: AslParams::default(),
            control: true,
            bib: BibMode::Full,
            dim_lat: 16,
            dim_lm: 32,
            aligner_queries: 8,
            aligner_layers: 2,
            decoder_layers: 2,
            max_len: 24,
            prefix_order: PrefixOrder::VisualFirst,
            num_classes: ClassSet::synthetic().len(),
            vocab_size: Vocab::synthetic().len(),
        }
    }
}

impl ModelConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            image_size: self.image_size,
            patch: self.patch,
            dim: self.dim_v,
            layers: self.encoder_layers,
            heads: self.heads,
            ff_mult: self.ff_mult,
        }
    }

    pub fn cve_config(&self) -> CveConfig {
        CveConfig {
            encoder: self.encoder(),
            canvas: self.canvas,
            mode: self.cve,
            roi_ratio: self.roi_ratio,
            fusion_hidden: self.fusion_hidden,
        }
    }

    /// Smallest accepted box side in canvas pixels: one encoder patch.
    pub fn min_box_side(&self) -> u32 {
        self.cve_config().patch_in_canvas().ceil() as u32
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return bad("image_size must be a multiple of patch");
        }
        for (d, name) in [(self.dim_v, "dim_v"), (self.dim_lm, "dim_lm"), (self.dim_lat, "dim_lat")] {
            if d == 0 || d % self.heads != 0 {
                return Err(Error::Config(format!("{name}={d} must be a positive multiple of heads={}", self.heads)));
            }
        }
        if self.bib != BibMode::Off && !self.control {
            return bad("bridging requires the control embedding");
        }
        if self.tagger && !self.control {
            return bad("the region tagger only feeds controls; enable control");
        }
        if self.max_len == 0 || self.aligner_queries == 0 {
            return bad("max_len and aligner_queries must be positive");
        }
        Ok(())
    }
}

/// Controls requested for one inference call.
#[derive(Debug, Clone, PartialEq)]
pub enum Controls {
    /// Empty control sentence (only the memory unit).
    Empty,
    /// Thresholded tagger predictions.
    SelfTags,
    /// Caller-supplied words, used verbatim (not filtered by the class set).
    Words(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceOptions {
    pub beam: BeamConfig,
    pub tag_threshold: f64,
    pub tag_role: TagRole,
    pub tag_cap: usize,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self {
            beam: BeamConfig::default(),
            tag_threshold: 0.8,
            tag_role: TagRole::Both,
            tag_cap: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionOutput {
    pub tokens: Vec<String>,
    pub logprob: f64,
    /// Tagger words at or above the threshold (before the cap), with
    /// probabilities; empty without a tagger.
    pub self_tags: Vec<(String, f64)>,
    pub used_controls: Vec<String>,
}

impl CaptionOutput {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

/// One training example after tokenization.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub input: VisualInput,
    /// Caption token ids without BOS/EOS.
    pub caption: Vec<u32>,
    /// Control token ids (with SEP when non-empty); `None` skips the
    /// control path.
    pub control: Option<Vec<u32>>,
    pub tag_targets: Option<Vec<f64>>,
}

/// Loss nodes of one batch.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub tag: Option<Var>,
    pub cap: Var,
    pub total: Var,
    pub logits: Var,
}

/// Forward state shared by training and inference.
pub struct Forward {
    pub fv: Var,
    pub tag_logits: Option<Var>,
    pub prefix: Prefix,
}

#[derive(Debug, Clone)]
pub struct CaptionModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub vocab: Vocab,
    pub class_set: ClassSet,
    pub cve: VisualEmbedder,
    pub tagger: Option<RegionTagger>,
    pub control: Option<ControlEmbedder>,
    pub bridge: Option<Bridge>,
    pub aligner: Aligner,
    pub decoder: Decoder,
}

impl CaptionModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_vocab(config, seed, Vocab::synthetic(), ClassSet::synthetic())
    }

    pub fn with_vocab(config: ModelConfig, seed: u64, vocab: Vocab, class_set: ClassSet) -> Result<Self> {
        config.validate()?;
        if config.vocab_size != vocab.len() || config.num_classes != class_set.len() {
            return Err(Error::Config(format!(
                "config expects vocab {} / classes {}, got {} / {}",
                config.vocab_size,
                config.num_classes,
                vocab.len(),
                class_set.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let cve = VisualEmbedder::new(&mut store, &mut rng, c.cve_config())?;
        let tagger = c.tagger.then(|| {
            RegionTagger::new(&mut store, &mut rng, c.num_classes, c.dim_v, c.tagger_layers, c.heads, c.dim_v * c.ff_mult)
        });
        let control = c.control.then(|| ControlEmbedder::new(&mut store, &mut rng, c.dim_lm));
        let bridge = (c.bib != BibMode::Off).then(|| {
            Bridge::new(&mut store, &mut rng, c.bib, c.dim_v, c.dim_lm, c.dim_lat, c.heads, c.dim_lat * c.ff_mult)
        });
        let aligner = Aligner::new(
            &mut store,
            &mut rng,
            c.aligner_queries,
            c.dim_lm,
            c.dim_v,
            c.aligner_layers,
            c.heads,
            c.dim_lm * c.ff_mult,
        );
        let decoder = Decoder::new(
            &mut store,
            &mut rng,
            c.vocab_size,
            c.dim_lm,
            c.decoder_layers,
            c.heads,
            c.dim_lm * c.ff_mult,
            c.max_len,
        );
        Ok(Self {
            config,
            store,
            vocab,
            class_set,
            cve,
            tagger,
            control,
            bridge,
            aligner,
            decoder,
        })
    }

    /// Prepares the encoder views of `bbox` on a rendered canvas.
    pub fn prepare(&self, canvas: &crate::image::Image, bbox: crate::synthworld::BBox) -> Result<VisualInput> {
        VisualInput::prepare(canvas, bbox, self.config.image_size, self.config.min_box_side())
    }

    /// Shared forward pass up to the decoder prefix. `controls = None`
    /// drops the control path (and the tagger) for the whole batch.
    pub fn forward_prefix(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inputs: &[&VisualInput],
        controls: Option<&[Vec<u32>]>,
    ) -> Result<Forward> {
        let b = inputs.len();
        let fv = self.cve.forward(g, store, inputs)?.fused;
        let tag_logits = match &self.tagger {
            Some(t) if controls.is_some() => Some(t.forward(g, store, fv, b, self.cve.tokens())?),
            _ => None,
        };
        let prefix = self.prefix_from_visual(g, store, fv, b, controls)?;
        Ok(Forward { fv, tag_logits, prefix })
    }

    /// Control embedding, bridging and alignment on top of `fv`.
    pub fn prefix_from_visual(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        fv: Var,
        b: usize,
        controls: Option<&[Vec<u32>]>,
    ) -> Result<Prefix> {
        let tv = self.cve.tokens();
        let (fv2, control) = match (&self.control, controls) {
            (Some(ce), Some(sentences)) => {
                let table = g.param(store, self.decoder.embed);
                let cb = ce.forward(g, store, table, sentences);
                let (fv2, fc2) = match &self.bridge {
                    Some(bridge) => {
                        let shape = BridgeShape {
                            batch: b,
                            visual_len: tv,
                            control_len: cb.len,
                            control_lengths: cb.lengths.clone(),
                        };
                        bridge.forward(g, store, fv, cb.tokens, &shape)?
                    }
                    None => (fv, cb.tokens),
                };
                (fv2, Some((fc2, cb.len, cb.valid())))
            }
            _ => (fv, None),
        };
        let visual = self.aligner.forward(g, store, fv2, b, tv)?;
        Ok(Prefix::assemble(g, visual, self.config.aligner_queries, control, self.config.prefix_order, b))
    }

    /// `L = L_tag + L_cap` for a batch. The control path (and with it the
    /// tagging loss) is used only when every example carries controls.
    pub fn loss(&self, g: &mut Graph, store: &ParamStore, batch: &[TrainExample]) -> Result<LossParts> {
        let inputs: Vec<&VisualInput> = batch.iter().map(|e| &e.input).collect();
        let controls: Option<Vec<Vec<u32>>> = batch.iter().map(|e| e.control.clone()).collect();
        let fwd = self.forward_prefix(g, store, &inputs, controls.as_deref())?;
        let (bos, eos) = (self.vocab.bos(), self.vocab.eos());
        let (inputs_tf, targets): (Vec<_>, Vec<_>) = batch
            .iter()
            .map(|e| captiondec::teacher_forcing(&e.caption, bos, eos))
            .unzip();
        let logits = self.decoder.forward(g, store, &fwd.prefix, &inputs_tf);
        let cap = caption_loss(g, logits, &targets);
        let tag = match fwd.tag_logits {
            Some(z) => {
                let targets: Option<Vec<f64>> = batch
                    .iter()
                    .map(|e| e.tag_targets.clone())
                    .collect::<Option<Vec<_>>>()
                    .map(|v| v.concat());
                targets.map(|t| g.asymmetric_loss(z, t, &self.config.asl))
            }
            None => None,
        };
        let total = match tag {
            Some(t) => g.add(t, cap),
            None => cap,
        };
        Ok(LossParts { tag, cap, total, logits })
    }

    /// Tagger logits for one region.
    pub fn tag(&self, input: &VisualInput) -> Result<Option<TaggerOutput>> {
        let Some(tagger) = &self.tagger else { return Ok(None) };
        let mut g = Graph::new();
        let parts = self.cve.forward(&mut g, &self.store, &[input])?;
        let z = tagger.forward(&mut g, &self.store, parts.fused, 1, self.cve.tokens())?;
        Ok(Some(TaggerOutput {
            logits: g.value(z).data.clone(),
        }))
    }

    /// Tokens banned from generation.
    pub fn banned_tokens(&self) -> Vec<u32> {
        vec![self.vocab.bos(), self.vocab.pad(), self.vocab.sep()]
    }

    /// Captions one region under the requested controls.
    pub fn caption(&self, input: &VisualInput, controls: &Controls, opts: &InferenceOptions) -> Result<CaptionOutput> {
        let mut g = Graph::new();
        let fv = self.cve.forward(&mut g, &self.store, &[input])?.fused;
        let self_tags = match &self.tagger {
            Some(t) => {
                let z = t.forward(&mut g, &self.store, fv, 1, self.cve.tokens())?;
                let out = TaggerOutput {
                    logits: g.value(z).data.clone(),
                };
                predict_tags(&out, opts.tag_threshold, &self.class_set, opts.tag_role)
            }
            None => Vec::new(),
        };
        let words: Vec<String> = match controls {
            Controls::Empty => Vec::new(),
            Controls::SelfTags => self_tags.iter().take(opts.tag_cap).map(|(w, _)| w.clone()).collect(),
            Controls::Words(w) => w.clone(),
        };
        let (sentence, used_controls) = if self.control.is_some() {
            let s = ControlSentence::from_words(&words, ControlSource::Interactive);
            (Some(vec![self.vocab.encode(&s.tokens)]), words)
        } else {
            (None, Vec::new())
        };
        let prefix = self.prefix_from_visual(&mut g, &self.store, fv, 1, sentence.as_deref())?;
        let step = PrefixStep {
            decoder: &self.decoder,
            store: &self.store,
            prefix: g.value(prefix.rows).clone(),
            valid: prefix.valid.clone(),
        };
        // Never decode past the positional table.
        let beam = BeamConfig {
            max_len: opts.beam.max_len.min(self.config.max_len),
            ..opts.beam
        };
        let hyp = beam_search(&step, self.vocab.bos(), self.vocab.eos(), &self.banned_tokens(), &beam);
        let tokens = self.render_tokens(&hyp.tokens, &used_controls);
        Ok(CaptionOutput {
            tokens,
            logprob: hyp.logprob,
            self_tags,
            used_controls,
        })
    }

    /// Maps generated ids to words, dropping EOS. OOV buckets become the
    /// control word that produced them in this request (copy rule).
    pub fn render_tokens(&self, ids: &[u32], controls: &[String]) -> Vec<String> {
        let eos = self.vocab.eos();
        ids.iter()
            .filter(|&&t| t != eos)
            .map(|&t| match self.vocab.oov_bucket_of(t) {
                Some(bucket) => controls
                    .iter()
                    .find(|w| self.vocab.id(w).is_none() && vocab::oov_bucket(w) == bucket)
                    .cloned()
                    .unwrap_or_else(|| self.vocab.token(t).to_string()),
                None => self.vocab.token(t).to_string(),
            })
            .collect()
    }

    /// Config identity stored in checkpoints.
    pub fn config_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.config).expect("config serializes")
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        checkpoint::save(path, &self.config_json(), &self.store)
    }

    /// Rebuilds the model from the config stored in the checkpoint and
    /// loads its parameters.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let cfg_json = checkpoint::read_config(path)?;
        let config: ModelConfig = serde_json::from_value(cfg_json.clone())?;
        let mut model = Self::new(config, 0)?;
        checkpoint::load(path, &cfg_json, &mut model.store)?;
        Ok(model)
    }

    /// Names of parameters owned by each component, for ablation audits.
    pub fn component_params(&self) -> Vec<(&'static str, Vec<String>)> {
        let groups = [
            ("cve", "cve."),
            ("tagger", "tagger."),
            ("control", "control."),
            ("bib", "bib."),
            ("aligner", "aligner."),
            ("decoder", "decoder."),
        ];
        groups
            .iter()
            .map(|(g, prefix)| {
                (
                    *g,
                    self.store
                        .iter()
                        .filter(|(_, p)| p.name.starts_with(prefix))
                        .map(|(_, p)| p.name.clone())
                        .collect(),
                )
            })
            .collect()
    }

    /// Embedding of a control sentence given as words (for inspection).
    pub fn control_embedding(&self, words: &[String]) -> Option<Tensor> {
        let ce = self.control.as_ref()?;
        let mut g = Graph::new();
        let table = g.param(&self.store, self.decoder.embed);
        let ids = self.vocab.encode(&ControlSentence::from_words(words, ControlSource::Interactive).tokens);
        let cb = ce.forward(&mut g, &self.store, table, &[ids]);
        Some(g.value(cb.tokens).clone())
    }
}
