use ctrlcap::controlparse::{parse_caption, ClassSet};
use ctrlcap::synthworld::{build_dataset, DatasetConfig, Rarity, Split, TemplateId};

#[test]
fn template_frequencies_follow_the_skew() {
    let manifest = build_dataset(&DatasetConfig::default(), 0).unwrap();
    let train = manifest.split(Split::Train);
    assert_eq!(train.len(), 10_000);
    let mut counts = [0usize; 3];
    for s in train {
        counts[s.template_id.index()] += 1;
        assert_eq!(s.rarity == Rarity::Rare, s.template_id != TemplateId::T0);
    }
    let n = train.len() as f64;
    for (c, want) in counts.iter().zip([0.8, 0.1, 0.1]) {
        let f = *c as f64 / n;
        assert!((f - want).abs() <= 0.02, "template frequencies {counts:?}");
    }
}

#[test]
fn parsed_tags_equal_gold_tags() {
    let cfg = DatasetConfig {
        train_samples: 500,
        val_samples: 50,
        test_samples: 50,
        ..DatasetConfig::default()
    };
    let manifest = build_dataset(&cfg, 3).unwrap();
    let classes = ClassSet::synthetic();
    for split in [Split::Train, Split::Val, Split::Test] {
        for s in manifest.split(split) {
            let tags = parse_caption(&s.caption, &classes, Some(s.template_id));
            assert_eq!(tags.subject, s.gold_subject_tags, "{}", s.caption_text());
            assert_eq!(tags.object, s.gold_object_tags, "{}", s.caption_text());
            assert!(tags.subject.is_disjoint(&tags.object));
        }
    }
}
