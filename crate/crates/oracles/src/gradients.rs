//! Finite-difference gradient scenarios on a micro configuration
//! (width 8, two heads, a 2x2 patch grid, two-token captions and controls).

use ctrlcap::controlparse::{ClassSet, ControlSentence, ControlSource};
use ctrlcap::image::Image;
use ctrlcap::model::bib::{BibMode, Bridge, BridgeShape};
use ctrlcap::model::captiondec::{caption_loss, teacher_forcing, Aligner, Decoder, Prefix, PrefixOrder};
use ctrlcap::model::controlembed::ControlEmbedder;
use ctrlcap::model::regiontag::RegionTagger;
use ctrlcap::model::visembed::CveMode;
use ctrlcap::model::{CaptionModel, ModelConfig, TrainExample};
use ctrlcap::nn::gradcheck::{check_gradients, randomize, GradCheckConfig, GradCheckReport};
use ctrlcap::nn::layers::{roi_align, roi_align_map, EncoderConfig, PatchEncoder};
use ctrlcap::nn::{AslParams, Graph, Init, ParamStore, Tensor, Var};
use ctrlcap::synthworld::BBox;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-3;

const D: usize = 8;
const HEADS: usize = 2;
const BATCH: usize = 2;
/// Entries probed per tensor.
const PROBES: usize = 48;

pub fn micro_config() -> ModelConfig {
    ModelConfig {
        canvas: 16,
        image_size: 8,
        patch: 4,
        dim_v: D,
        encoder_layers: 1,
        heads: HEADS,
        ff_mult: 1,
        cve: CveMode::Full,
        roi_ratio: 2,
        fusion_hidden: D,
        tagger: true,
        tagger_layers: 1,
        control: true,
        bib: BibMode::Full,
        dim_lat: 4,
        dim_lm: D,
        aligner_queries: 2,
        aligner_layers: 1,
        decoder_layers: 1,
        max_len: 4,
        ..ModelConfig::default()
    }
}

fn check(store: &mut ParamStore, rng: &mut ChaCha8Rng, loss: impl Fn(&mut Graph, &ParamStore) -> Var) -> GradCheckReport {
    let cfg = GradCheckConfig {
        step: STEP,
        max_entries: Some(PROBES),
    };
    check_gradients(store, cfg, rng, loss)
}

fn random_tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
}

/// Scalar readout `-log softmax(x w)[0]` over the rows of `x`, so every row
/// and column reaches the loss through a non-linearity.
struct Readout {
    w: Tensor,
}

impl Readout {
    fn new(rng: &mut impl Rng, cols: usize) -> Self {
        Self {
            w: random_tensor(rng, cols, 1),
        }
    }

    fn apply(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.constant(self.w.clone());
        let y = g.linear(x, w, None);
        let rows = g.value(y).rows;
        let y = g.reshape(y, 1, rows);
        g.cross_entropy(y, vec![Some(0)])
    }
}

fn random_image(rng: &mut impl Rng, size: usize) -> Image {
    let mut img = Image::filled(size, size, 0.0);
    for v in &mut img.data {
        *v = rng.random::<f32>();
    }
    img
}

/// One named scenario and its report.
pub struct Scenario {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl Scenario {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error() <= TOLERANCE && !self.report.tensors.is_empty()
    }
}

pub fn patch_encoder(seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = EncoderConfig {
        image_size: 8,
        patch: 4,
        dim: D,
        layers: 1,
        heads: HEADS,
        ff_mult: 1,
    };
    let enc = PatchEncoder::new(&mut store, &mut rng, "enc", cfg).expect("valid encoder");
    randomize(&mut store, 0.5, &mut rng);
    let images: Vec<Image> = (0..BATCH).map(|_| random_image(&mut rng, 8)).collect();
    let ro = Readout::new(&mut rng, D);
    let report = check(&mut store, &mut rng, |g, s| {
        let refs: Vec<&Image> = images.iter().collect();
        let out = enc.forward(g, s, &refs).expect("encoder forward");
        let both = g.gather(&[out.class, out.spatial], vec![Some((0, 0)), Some((1, 0)), Some((1, 5)), Some((0, 1))]);
        ro.apply(g, both)
    });
    Scenario { name: "patch encoder", report }
}

pub fn roi_align_grad(seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let grid = 3;
    let spatial = store.add("spatial", BATCH * grid * grid, D, Init::Normal(1.0), &mut rng);
    let maps: Vec<_> = [BBox::new(1, 2, 9, 7), BBox::new(0, 0, 12, 5)]
        .iter()
        .map(|b| roi_align_map(grid, 4.0, b, 2, 2).expect("valid box"))
        .collect();
    let ro = Readout::new(&mut rng, D);
    let report = check(&mut store, &mut rng, |g, s| {
        let x = g.param(s, spatial);
        let x = g.gelu(x);
        let pooled = roi_align(g, x, &maps, grid, 2);
        ro.apply(g, pooled)
    });
    Scenario { name: "roi-align", report }
}

pub fn tagger_asl(seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let classes = 3;
    let tokens = 5;
    let fv = store.add("fv", BATCH * tokens, D, Init::Normal(1.0), &mut rng);
    let tagger = RegionTagger::new(&mut store, &mut rng, classes, D, 1, HEADS, D);
    randomize(&mut store, 0.5, &mut rng);
    let targets: Vec<f64> = (0..BATCH * 2 * classes).map(|i| (i % 3 == 0) as u8 as f64).collect();
    let params = AslParams {
        gamma_pos: 1.0,
        gamma_neg: 4.0,
        margin: 0.05,
        eps: 1e-7,
    };
    let report = check(&mut store, &mut rng, |g, s| {
        let x = g.param(s, fv);
        let z = tagger.forward(g, s, x, BATCH, tokens).expect("tagger forward");
        g.asymmetric_loss(z, targets.clone(), &params)
    });
    Scenario {
        name: "tagger + asymmetric loss",
        report,
    }
}

pub fn control_embedding(seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let table = store.add("table", 6, D, Init::Normal(1.0), &mut rng);
    let ce = ControlEmbedder::new(&mut store, &mut rng, D);
    randomize(&mut store, 0.5, &mut rng);
    // A two-token sentence and an empty one (theta alone).
    let sentences = vec![vec![2, 5], vec![]];
    let ro = Readout::new(&mut rng, D);
    let report = check(&mut store, &mut rng, |g, s| {
        let t = g.param(s, table);
        let cb = ce.forward(g, s, t, &sentences);
        let x = g.gelu(cb.tokens);
        ro.apply(g, x)
    });
    Scenario {
        name: "control embedding",
        report,
    }
}

pub fn bridge(seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let (tv, tc) = (3, 2);
    let fv = store.add("fv", BATCH * tv, D, Init::Normal(1.0), &mut rng);
    let fc = store.add("fc", BATCH * tc, D, Init::Normal(1.0), &mut rng);
    let bridge = Bridge::new(&mut store, &mut rng, BibMode::Full, D, D, 4, HEADS, 4);
    // Non-zero up-adapters so both directions carry gradient.
    randomize(&mut store, 0.5, &mut rng);
    let shape = BridgeShape {
        batch: BATCH,
        visual_len: tv,
        control_len: tc,
        control_lengths: vec![2, 1],
    };
    let (rv, rc) = (Readout::new(&mut rng, D), Readout::new(&mut rng, D));
    let report = check(&mut store, &mut rng, |g, s| {
        let v = g.param(s, fv);
        let c = g.param(s, fc);
        let (v2, c2) = bridge.forward(g, s, v, c, &shape).expect("bridge forward");
        let a = rv.apply(g, v2);
        let b = rc.apply(g, c2);
        g.add(a, b)
    });
    Scenario {
        name: "bidirectional bridge",
        report,
    }
}

pub fn aligner_decoder(seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let (tokens, vocab, na) = (5, 7, 2);
    let fv = store.add("fv", BATCH * tokens, D, Init::Normal(1.0), &mut rng);
    let aligner = Aligner::new(&mut store, &mut rng, na, D, D, 1, HEADS, D);
    let decoder = Decoder::new(&mut store, &mut rng, vocab, D, 1, HEADS, D, 4);
    randomize(&mut store, 0.5, &mut rng);
    let captions = [vec![3u32, 4], vec![5, 6]];
    let (inputs, targets): (Vec<_>, Vec<_>) = captions.iter().map(|c| teacher_forcing(c, 0, 1)).unzip();
    let report = check(&mut store, &mut rng, |g, s| {
        let x = g.param(s, fv);
        let visual = aligner.forward(g, s, x, BATCH, tokens).expect("aligner forward");
        let prefix = Prefix::assemble(g, visual, na, None, PrefixOrder::VisualFirst, BATCH);
        let logits = decoder.forward(g, s, &prefix, &inputs);
        caption_loss(g, logits, &targets)
    });
    Scenario {
        name: "aligner + decoder + caption loss",
        report,
    }
}

/// Micro model and a two-example batch with two-token captions and
/// controls.
pub fn micro_model(seed: u64) -> (CaptionModel, Vec<TrainExample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = CaptionModel::new(micro_config(), seed).expect("micro config is valid");
    randomize(&mut model.store, 0.5, &mut rng);
    let classes = ClassSet::synthetic();
    let canvas = random_image(&mut rng, 16);
    let specs = [(BBox::new(0, 0, 10, 12), ["red", "circle"], "red"), (BBox::new(4, 6, 12, 8), ["blue", "star"], "star")];
    let examples = specs
        .iter()
        .map(|(b, cap, ctl)| {
            let words: Vec<String> = cap.iter().map(|w| w.to_string()).collect();
            let control = ControlSentence::from_words(&[*ctl], ControlSource::Interactive);
            let mut tags = vec![0.0; 2 * classes.len()];
            for w in &words {
                tags[classes.index_of(w).expect("class word")] = 1.0;
            }
            TrainExample {
                input: model.prepare(&canvas, *b).expect("box fits"),
                caption: model.vocab.encode(&words),
                control: Some(model.vocab.encode(&control.tokens)),
                tag_targets: Some(tags),
            }
        })
        .collect();
    (model, examples)
}

pub fn summed_loss(seed: u64) -> Scenario {
    let (mut model, batch) = micro_model(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut store = std::mem::take(&mut model.store);
    let report = check(&mut store, &mut rng, |g, s| model.loss(g, s, &batch).expect("loss").total);
    Scenario {
        name: "summed tagging + caption loss",
        report,
    }
}

pub fn all(seed: u64) -> Vec<Scenario> {
    vec![
        patch_encoder(seed),
        roi_align_grad(seed + 1),
        tagger_asl(seed + 2),
        control_embedding(seed + 3),
        bridge(seed + 4),
        aligner_decoder(seed + 5),
        summed_loss(seed + 6),
    ]
}
