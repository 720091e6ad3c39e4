use std::collections::HashMap;

use ctrlcap::metrics::{dense_caption_map, iou, meteor_lite, GroundTruth, Prediction};
use ctrlcap::synthworld::BBox;
use proptest::prelude::*;

fn bbox() -> impl Strategy<Value = BBox> {
    (0u32..60, 0u32..60, 1u32..40, 1u32..40).prop_map(|(x, y, w, h)| BBox::new(x, y, w, h))
}

fn sentence() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["a", "red", "blue", "circle", "star", "left", "of", "large"]), 1..9)
        .prop_map(|v| v.into_iter().map(String::from).collect())
}

fn gt(image_id: u64, bbox: BBox, caption: &[String]) -> GroundTruth {
    GroundTruth {
        image_id,
        bbox,
        references: vec![caption.to_vec()],
    }
}

fn pred(image_id: u64, bbox: BBox, caption: &[String], confidence: f64) -> Prediction {
    Prediction {
        image_id,
        bbox,
        caption: caption.join(" "),
        confidence,
        controls: None,
    }
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let (ab, ba) = (iou(&a, &b), iou(&b, &a));
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn meteor_ignores_word_identity(c in sentence(), r in sentence()) {
        // A bijective renaming of the vocabulary changes nothing.
        let rename: HashMap<&str, String> = ["a", "red", "blue", "circle", "star", "left", "of", "large"]
            .iter()
            .enumerate()
            .map(|(i, w)| (*w, format!("w{i}")))
            .collect();
        let map = |s: &[String]| s.iter().map(|w| rename[w.as_str()].clone()).collect::<Vec<_>>();
        let before = meteor_lite(&c, std::slice::from_ref(&r));
        let after = meteor_lite(&map(&c), &[map(&r)]);
        prop_assert_eq!(before, after);
        prop_assert!((0.0..=1.0).contains(&before));
    }

    #[test]
    fn exact_predictions_give_full_map(boxes in prop::collection::vec((bbox(), sentence()), 1..6)) {
        let gts: Vec<GroundTruth> = boxes.iter().enumerate().map(|(i, (b, s))| gt(i as u64, *b, s)).collect();
        let preds: Vec<Prediction> = boxes.iter().enumerate().map(|(i, (b, s))| pred(i as u64, *b, s, 0.5)).collect();
        prop_assert!((dense_caption_map(&preds, &gts).map - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lower_confidence_duplicate_is_a_false_positive(b in bbox(), s in sentence(), c in 0.1f64..0.9) {
        let gts = vec![gt(0, b, &s)];
        let preds = vec![pred(0, b, &s, c), pred(0, b, &s, c / 2.0)];
        let grid = dense_caption_map(&preds, &gts);
        // The first (higher confidence) copy takes the match, so recall 1 is
        // reached at precision 1 and the duplicate only adds a trailing miss.
        prop_assert!((grid.map - 1.0).abs() < 1e-12);
        let flipped = vec![pred(0, b, &s, c / 2.0), pred(0, b, &s, c)];
        prop_assert_eq!(dense_caption_map(&flipped, &gts), grid);
    }

    #[test]
    fn map_is_invariant_to_monotone_confidence_maps(
        items in prop::collection::vec((bbox(), bbox(), sentence(), sentence(), 0.0f64..1.0), 1..6)
    ) {
        let gts: Vec<GroundTruth> = items.iter().map(|(g, _, s, _, _)| gt(0, *g, s)).collect();
        let preds: Vec<Prediction> = items.iter().map(|(_, p, _, t, c)| pred(0, *p, t, *c)).collect();
        let squashed: Vec<Prediction> = preds.iter().map(|p| Prediction { confidence: p.confidence.powi(3) * 0.5, ..p.clone() }).collect();
        prop_assert_eq!(dense_caption_map(&preds, &gts), dense_caption_map(&squashed, &gts));
    }
}
