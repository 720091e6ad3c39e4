//! Self-contained pass/fail checks shared by the integration tests and the
//! acceptance runner.

use std::fmt;

use ctrlcap::metrics::{self, GroundTruth, Prediction};
use ctrlcap::model::bib::{BibMode, Bridge, BridgeShape};
use ctrlcap::model::captiondec::{beam_search, greedy, BeamConfig, Decoder, PrefixStep};
use ctrlcap::model::controlembed::ControlEmbedder;
use ctrlcap::model::CaptionModel;
use ctrlcap::nn::gradcheck::randomize;
use ctrlcap::nn::{AslParams, Graph, Init, ParamStore, Tensor};
use ctrlcap::synthworld::BBox;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::gradients;
use crate::metrics as oracle;
use crate::sentences::{random_caption, random_pair};

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag}  {}: {}", self.name, self.detail)
    }
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

pub fn cider_identity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let refs: Vec<Vec<Vec<String>>> = (0..20)
        .map(|_| loop {
            let c = random_caption(&mut rng);
            if c.len() >= 4 {
                break vec![c];
            }
        })
        .collect();
    let cands: Vec<Vec<String>> = refs.iter().map(|r| r[0].clone()).collect();
    let scores = metrics::cider_d(&cands, &refs).expect("non-empty corpus");
    let worst = scores.iter().map(|s| (s - 10.0).abs()).fold(0.0, f64::max);
    Check::new(
        "CIDEr-D of a caption against itself",
        worst <= 1e-6,
        format!("max |score - 10| = {worst:.2e} over 20 captions (tol 1e-6)"),
    )
}

pub fn cider_direct() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (cands, refs): (Vec<_>, Vec<_>) = (0..20)
        .map(|_| {
            let (a, b) = random_pair(&mut rng);
            (b, vec![a])
        })
        .unzip();
    let fast = metrics::cider_d(&cands, &refs).expect("non-empty corpus");
    let slow = oracle::cider_d(&cands, &refs);
    let worst = fast.iter().zip(&slow).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Check::new(
        "CIDEr-D against the dense-vector oracle",
        worst <= 1e-9,
        format!("max |delta| = {worst:.2e} over 20 pairs (tol 1e-9)"),
    )
}

pub fn meteor_closed_form() -> Check {
    let s = words("a large red circle left of");
    let got = metrics::meteor_lite(&s, std::slice::from_ref(&s));
    // One chunk of six matches: 1 - 0.5 * (1/6)^3.
    let want = 1.0 - 0.5 / 216.0;
    Check::new(
        "METEOR of an identical 6-token pair",
        (got - want).abs() <= 1e-9,
        format!("{got:.12} vs {want:.12} (tol 1e-9)"),
    )
}

pub fn meteor_bruteforce() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut mismatches = Vec::new();
    for k in 0..20 {
        let (a, b) = random_pair(&mut rng);
        let fast = metrics::meteor_lite(&b, std::slice::from_ref(&a));
        let slow = oracle::meteor(&b, std::slice::from_ref(&a));
        let counts = (metrics::meteor_alignment(&b, &a), oracle::meteor_counts(&b, &a));
        if fast != slow || counts.0 != counts.1 {
            mismatches.push(format!("pair {k}: {fast} vs {slow}"));
        }
    }
    Check::new(
        "METEOR against the brute-force alignment",
        mismatches.is_empty(),
        if mismatches.is_empty() {
            "20/20 pairs identical (exact)".to_string()
        } else {
            mismatches.join("; ")
        },
    )
}

pub fn iou_raster() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let mut b = || {
            let (x, y) = (rng.random_range(0..48), rng.random_range(0..48));
            [x, y, rng.random_range(1..40), rng.random_range(1..40)]
        };
        let (p, q) = (b(), b());
        let fast = metrics::iou(&BBox::from(p), &BBox::from(q));
        worst = worst.max((fast - oracle::raster_iou(p, q)).abs());
    }
    Check::new(
        "IoU against pixel rasterization",
        worst <= 1e-2,
        format!("max |delta| = {worst:.2e} over 50 pairs (tol 1e-2)"),
    )
}

/// Five predictions and three ground truths over two images: a duplicate
/// with lower confidence, a partial caption, a confident false positive.
pub fn hand_instance() -> (Vec<oracle::Region>, Vec<oracle::Region>) {
    let r = |image, bbox, caption: &str, confidence| oracle::Region {
        image,
        bbox,
        caption: words(caption),
        confidence,
    };
    let gts = vec![
        r(1, [10, 10, 20, 20], "a red circle", 1.0),
        r(1, [40, 10, 20, 20], "a large blue square left of a green star", 1.0),
        r(2, [5, 5, 30, 30], "a dotted yellow triangle", 1.0),
    ];
    let preds = vec![
        r(1, [12, 11, 20, 20], "a red circle", 0.9),
        r(1, [10, 10, 18, 22], "a blue circle", 0.8),
        r(1, [44, 14, 20, 16], "a large blue square", 0.7),
        r(2, [0, 0, 30, 30], "a dotted yellow triangle", 0.6),
        r(2, [60, 60, 10, 10], "a red circle", 0.95),
    ];
    (preds, gts)
}

pub fn map_bruteforce() -> Check {
    let (preds, gts) = hand_instance();
    let p: Vec<Prediction> = preds
        .iter()
        .map(|r| Prediction {
            image_id: r.image,
            bbox: BBox::from(r.bbox),
            caption: r.caption.join(" "),
            confidence: r.confidence,
            controls: None,
        })
        .collect();
    let g: Vec<GroundTruth> = gts
        .iter()
        .map(|r| GroundTruth {
            image_id: r.image,
            bbox: BBox::from(r.bbox),
            references: vec![r.caption.clone()],
        })
        .collect();
    let fast = metrics::dense_caption_map(&p, &g);
    let (grid, map) = oracle::map_bruteforce(&preds, &gts);
    let cells = fast
        .ap
        .iter()
        .flatten()
        .zip(grid.iter().flatten())
        .filter(|(a, b)| (*a - *b).abs() <= 1e-12)
        .count();
    Check::new(
        "mAP grid against the brute-force matcher",
        cells == 30 && (fast.map - map).abs() <= 1e-12,
        format!("{cells}/30 cells equal, mAP {:.6} vs {map:.6}", fast.map),
    )
}

pub fn metric_checks() -> Vec<Check> {
    vec![
        cider_identity(),
        cider_direct(),
        meteor_closed_form(),
        meteor_bruteforce(),
        iou_raster(),
        map_bruteforce(),
    ]
}

pub fn gradient_checks() -> Vec<Check> {
    gradients::all(0)
        .into_iter()
        .map(|s| {
            let worst = s.report.worst().map_or("none".to_string(), |w| w.name.clone());
            Check::new(
                format!("gradient check: {}", s.name),
                s.passed(),
                format!(
                    "max rel err {:.2e} at {worst} over {} tensors (tol {:.0e}, step {:.0e})",
                    s.report.max_rel_error(),
                    s.report.tensors.len(),
                    gradients::TOLERANCE,
                    gradients::STEP
                ),
            )
        })
        .collect()
}

pub fn bridge_identity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut store = ParamStore::new();
    let bridge = Bridge::new(&mut store, &mut rng, BibMode::Full, 8, 8, 4, 2, 8);
    let fv = Tensor::from_vec(6, 8, (0..48).map(|_| rng.random::<f64>() - 0.5).collect());
    let fc = Tensor::from_vec(4, 8, (0..32).map(|_| rng.random::<f64>() - 0.5).collect());
    let mut g = Graph::new();
    let (v, c) = (g.constant(fv.clone()), g.constant(fc.clone()));
    let shape = BridgeShape {
        batch: 2,
        visual_len: 3,
        control_len: 2,
        control_lengths: vec![2, 1],
    };
    let (v2, c2) = bridge.forward(&mut g, &store, v, c, &shape).expect("bridge forward");
    let exact = g.value(v2).data == fv.data && g.value(c2).data == fc.data;
    Check::new(
        "zero-initialized bridge is the identity",
        exact,
        format!(
            "max |dF_v| = {:.1e}, max |dF_c| = {:.1e} (exact)",
            g.value(v2).max_abs_diff(&fv),
            g.value(c2).max_abs_diff(&fc)
        ),
    )
}

pub fn asl_is_bce() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let n = 64;
    let z: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect();
    let t: Vec<f64> = (0..n).map(|_| rng.random_bool(0.3) as u8 as f64).collect();
    let params = AslParams {
        gamma_pos: 0.0,
        gamma_neg: 0.0,
        margin: 0.0,
        eps: 1e-15,
    };
    let mut g = Graph::new();
    let zv = g.constant(Tensor::from_vec(n, 1, z.clone()));
    let l = g.asymmetric_loss(zv, t.clone(), &params);
    let got = g.value(l).item();
    // Softplus form: -log sigmoid(z) = ln(1 + e^-z).
    let softplus = |x: f64| x.max(0.0) + (-x.abs()).exp().ln_1p();
    let bce = z.iter().zip(&t).map(|(&z, &t)| t * softplus(-z) + (1.0 - t) * softplus(z)).sum::<f64>() / n as f64;
    Check::new(
        "asymmetric loss with no focusing or margin equals BCE",
        (got - bce).abs() <= 1e-9,
        format!("|delta| = {:.2e} on 64 logits (tol 1e-9)", (got - bce).abs()),
    )
}

pub fn beam_one_is_greedy() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut store = ParamStore::new();
    let (vocab, d, max_len) = (9, 8, 6);
    let decoder = Decoder::new(&mut store, &mut rng, vocab, d, 1, 2, 8, max_len);
    randomize(&mut store, 0.8, &mut rng);
    let cfg = BeamConfig {
        beam_size: 1,
        max_len,
        length_alpha: 0.7,
    };
    let mut differ = 0;
    for _ in 0..100 {
        let rows = rng.random_range(1..4);
        let prefix = Tensor::from_vec(rows, d, (0..rows * d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect());
        let step = PrefixStep {
            decoder: &decoder,
            store: &store,
            prefix,
            valid: vec![true; rows],
        };
        let b = beam_search(&step, 0, 1, &[0, 2], &cfg);
        let g = greedy(&step, 0, 1, &[0, 2], max_len);
        differ += (b.tokens != g.tokens) as usize;
    }
    Check::new(
        "beam size 1 equals greedy decoding",
        differ == 0,
        format!("{} of 100 random prefixes decode identically", 100 - differ),
    )
}

pub fn empty_control_is_theta() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let mut store = ParamStore::new();
    let table = store.add("table", 5, 8, Init::Normal(1.0), &mut rng);
    let ce = ControlEmbedder::new(&mut store, &mut rng, 8);
    let mut g = Graph::new();
    let t = g.param(&store, table);
    let cb = ce.forward(&mut g, &store, t, &[vec![]]);
    let theta = store.get(ce.theta);
    let out = g.value(cb.tokens);
    let empty_ok = out.rows == 1 && out.data == theta.data;

    let model = CaptionModel::new(gradients::micro_config(), 5).expect("micro config");
    let theta = model.store.get(model.control.as_ref().expect("control on").theta);
    let via_model = model.control_embedding(&[]).is_some_and(|e| e.rows == 1 && e.data == theta.data);
    Check::new(
        "empty control sentence embeds to theta",
        empty_ok && via_model,
        format!("embedder rows {}, exact match {empty_ok}; model path exact match {via_model}", out.rows),
    )
}

pub fn identity_checks() -> Vec<Check> {
    vec![bridge_identity(), asl_is_bce(), beam_one_is_greedy(), empty_control_is_theta()]
}
