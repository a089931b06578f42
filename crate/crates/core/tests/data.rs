use std::path::Path;

use kuda_core::data::{
    classify_sample, dominance_stats, load_jsonl, parse_jsonl, store_jsonl, synthesize, to_jsonl,
    GeneratorConfig, LabelRange, SampleRecord, Split,
};
use kuda_core::encoders::Modality;
use kuda_core::KudaError;
use proptest::prelude::*;

fn record(labels: [f64; 3], y: f64) -> SampleRecord {
    SampleRecord {
        id: "case".into(),
        split: Split::Test,
        text: vec![0, 1],
        vision: vec![vec![0.0; 2]],
        audio: vec![vec![0.0; 2]],
        y_t: Some(labels[0]),
        y_v: Some(labels[1]),
        y_a: Some(labels[2]),
        y,
    }
}

#[test]
fn store_then_load_is_identity() {
    let cfg = GeneratorConfig {
        n_samples: 100,
        ..Default::default()
    };
    let data = synthesize(&cfg, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dataset.jsonl");
    store_jsonl(&path, &data).unwrap();
    assert_eq!(load_jsonl(&path, LabelRange::UNIT).unwrap(), data);
}

#[test]
fn schema_errors_name_line_and_field() {
    let good = to_jsonl(&[record([0.1, 0.2, 0.3], 0.2)]).unwrap();
    let bad_type = good.replace("\"y\":0.2", "\"y\":\"high\"");
    let text = format!("{good}\n{bad_type}");
    match parse_jsonl(&text, Path::new("d.jsonl"), LabelRange::UNIT) {
        Err(KudaError::Record { line, .. }) => assert_eq!(line, 3),
        other => panic!("unexpected {other:?}"),
    }
    let out_of_range = good.replace("\"y_v\":0.2", "\"y_v\":1.5");
    match parse_jsonl(&out_of_range, Path::new("d.jsonl"), LabelRange::UNIT) {
        Err(KudaError::Record { line, field, .. }) => {
            assert_eq!(line, 1);
            assert_eq!(field, "y_v");
        }
        other => panic!("unexpected {other:?}"),
    }
    let missing = good.replace("\"split\":\"test\",", "");
    match parse_jsonl(&missing, Path::new("d.jsonl"), LabelRange::UNIT) {
        Err(KudaError::Record { field, .. }) => assert_eq!(field, "split"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn case_study_samples_have_one_dominant_modality_each() {
    // [text, vision, audio], multimodal label, expected dominant, expected noise set.
    let cases = [
        (
            [-0.8, 1.0, -0.8],
            0.6,
            Modality::Vision,
            [true, false, true],
        ),
        ([-1.0, 0.6, 0.6], -0.8, Modality::Text, [false, true, true]),
        ([-0.8, 0.8, 0.0], 0.0, Modality::Audio, [true, true, false]),
    ];
    for (labels, y, dominant, noise) in cases {
        let c = classify_sample(labels, y);
        assert_eq!(c.unique_dominant(), Some(dominant));
        assert_eq!(c.noise, noise);
    }
    let records: Vec<_> = cases.iter().map(|(l, y, _, _)| record(*l, *y)).collect();
    let stats = dominance_stats(&records).unwrap();
    assert_eq!(stats.dominant_counts, [1, 1, 1]);
    assert_eq!(stats.noise_samples, 3);
    assert_eq!(stats.tie_samples, 0);
}

#[test]
fn equal_labels_tie_without_noise() {
    let c = classify_sample([0.4; 3], 0.4);
    assert_eq!(c.dominant, [true; 3]);
    assert!(!c.has_noise());
}

#[test]
fn stats_require_unimodal_labels() {
    let mut r = record([0.0; 3], 0.0);
    r.y_a = None;
    assert!(matches!(
        dominance_stats([&r]),
        Err(KudaError::MissingLabel { .. })
    ));
}

#[test]
fn generator_matches_configured_dominance() {
    for dominance in [[0.5, 0.5, 0.5], [0.7, 0.2, 0.4], [0.34, 0.33, 0.33]] {
        let cfg = GeneratorConfig {
            n_samples: 2000,
            dominance,
            ..Default::default()
        };
        let stats = dominance_stats(&synthesize(&cfg, 11).unwrap()).unwrap();
        for m in 0..3 {
            assert!(
                (stats.dominant_proportion[m] - dominance[m]).abs() <= 0.05,
                "{dominance:?} -> {:?}",
                stats.dominant_proportion
            );
        }
    }
}

#[test]
fn generator_noise_rate_follows_flip_probability() {
    let cfg = GeneratorConfig {
        n_samples: 2000,
        ..Default::default()
    };
    let stats = dominance_stats(&synthesize(&cfg, 5).unwrap()).unwrap();
    assert!(
        (0.35..0.65).contains(&stats.noise_proportion),
        "{}",
        stats.noise_proportion
    );
}

#[test]
fn sentiment_tokens_carry_the_text_label() {
    let cfg = GeneratorConfig {
        n_samples: 300,
        ..Default::default()
    };
    let vocab = cfg.vocabulary();
    let half_bucket = 1.0 / cfg.sentiment_buckets as f64;
    for r in synthesize(&cfg, 2).unwrap() {
        let y_t = r.y_t.unwrap();
        for &id in &r.text {
            assert!(id < vocab.size());
            if let Some(v) = vocab.token_value(id) {
                assert!((v - y_t).abs() <= half_bucket + 1e-12, "{v} vs {y_t}");
            }
        }
    }
}

#[test]
fn generator_respects_label_range_and_splits() {
    let cfg = GeneratorConfig {
        n_samples: 500,
        label_range: LabelRange::TRIPLE,
        ..Default::default()
    };
    let data = synthesize(&cfg, 9).unwrap();
    assert!(data.iter().all(|r| LabelRange::TRIPLE.contains(r.y)));
    assert!(data.iter().any(|r| r.y.abs() > 1.0));
    let train = data.iter().filter(|r| r.split == Split::Train).count();
    assert_eq!(train, (cfg.splits[0] * 500.0).round() as usize);
    assert_eq!(data, synthesize(&cfg, 9).unwrap());
    assert_ne!(data, synthesize(&cfg, 10).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn dominance_follows_modality_permutations(
        labels in prop::array::uniform3(-1.0f64..1.0),
        y in -1.0f64..1.0,
    ) {
        let base = classify_sample(labels, y);
        let rotated = classify_sample([labels[2], labels[0], labels[1]], y);
        for i in 0..3 {
            prop_assert_eq!(rotated.dominant[(i + 1) % 3], base.dominant[i]);
            prop_assert_eq!(rotated.noise[(i + 1) % 3], base.noise[i]);
        }
        prop_assert!(base.dominant_count() >= 1);
    }

    #[test]
    fn jsonl_round_trips_arbitrary_records(
        labels in prop::array::uniform3(-1.0f64..=1.0),
        y in -1.0f64..=1.0,
        text in prop::collection::vec(0usize..50, 1..10),
        row in prop::collection::vec(-1e3f64..1e3, 1..5),
    ) {
        let mut r = record(labels, y);
        r.text = text;
        r.vision = vec![row.clone(); 2];
        r.audio = vec![row];
        let text = to_jsonl(std::slice::from_ref(&r)).unwrap();
        let back = parse_jsonl(&text, Path::new("x"), LabelRange::UNIT).unwrap();
        prop_assert_eq!(back, vec![r]);
    }
}
