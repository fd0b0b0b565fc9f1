mod common;

use std::collections::BTreeMap;

use approx::assert_abs_diff_eq;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use scanents::stats::{compute_stats, emit_report, entity_histogram};

fn check_golden(name: &str, corpus: &[scanents::annotation::GroundedUtterance], scenes_file: &str) {
    let scenes = common::load_scenes(scenes_file);
    let stats = compute_stats(corpus, &scenes).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit_report(&stats, dir.path()).unwrap();
    for file in ["stats.json", "stats.csv"] {
        let got = std::fs::read_to_string(dir.path().join(file)).unwrap();
        let want = std::fs::read_to_string(common::fixture(&format!("golden/{name}/{file}"))).unwrap();
        assert_eq!(got, want, "{name}/{file}");
    }
}

#[test]
fn golden_reports() {
    check_golden("fixture", &common::fixture_corpus().0, "fixture_scenes.jsonl");
    check_golden("mini", &common::mini_corpus().0, "mini_scenes.jsonl");
    check_golden(
        "target_only",
        &common::load_annotations("target_only_annotations.jsonl"),
        "fixture_scenes.jsonl",
    );
}

#[test]
fn fixture_matches_recount() {
    let (corpus, scenes) = common::fixture_corpus();
    let st = compute_stats(&corpus, &scenes).unwrap();
    let r = common::recount(&corpus, &scenes);
    assert_eq!(st.n_utterances, r.n_utterances);
    assert_eq!(st.n_entities, r.n_entities);
    assert_eq!(st.n_annotated_objects, r.n_annotated_objects);
    assert_eq!(st.entities_per_utterance_histogram, r.histogram);
    assert_eq!(st.anchor_class_frequency, r.anchor_classes);
    assert_eq!(
        st.avg_objects_per_entity,
        r.n_annotated_objects as f64 / r.n_entities as f64
    );
    assert_eq!(
        st.unique_anchor_fraction,
        r.unique_anchor_refs as f64 / r.anchor_refs as f64
    );
    assert_eq!(st.mean_tokens_per_utterance, r.n_tokens as f64 / r.n_utterances as f64);
}

#[test]
fn mini_corpus_by_hand() {
    // Entities per utterance 2,2,2,1,3,2,2,2,1,2 = 19 referencing
    // 2+2+3+1+3+3+2+2+1+3 = 22 objects. Anchor references: table, lamp,
    // chair x2, chair, table, table x2, sofa, box, table x2 = 12, of which
    // the m0 table (twice), the lamp, the sofa and the box are unique = 5.
    let (corpus, scenes) = common::mini_corpus();
    let st = compute_stats(&corpus, &scenes).unwrap();
    assert_eq!(st.n_entities, 19);
    assert_eq!(st.n_annotated_objects, 22);
    assert_abs_diff_eq!(st.avg_objects_per_entity, 22.0 / 19.0, epsilon = 1e-15);
    assert_abs_diff_eq!(st.unique_anchor_fraction, 5.0 / 12.0, epsilon = 1e-15);
    assert_eq!(
        st.entities_per_utterance_histogram,
        BTreeMap::from([(1, 2), (2, 7), (3, 1)])
    );
}

#[test]
fn permutation_invariant() {
    let (mut corpus, scenes) = common::fixture_corpus();
    let base = compute_stats(&corpus, &scenes).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        corpus.shuffle(&mut rng);
        let st = compute_stats(&corpus, &scenes).unwrap();
        assert_eq!(st.n_annotated_objects, base.n_annotated_objects);
        assert_eq!(st.anchor_class_frequency, base.anchor_class_frequency);
        assert_abs_diff_eq!(st.unique_anchor_fraction, base.unique_anchor_fraction, epsilon = 1e-15);
        assert_abs_diff_eq!(
            st.mean_tokens_per_utterance,
            base.mean_tokens_per_utterance,
            epsilon = 1e-12
        );
    }
}

#[test]
fn bounds_and_empty_corpus() {
    let (corpus, scenes) = common::fixture_corpus();
    let st = compute_stats(&corpus, &scenes).unwrap();
    assert!((0.0..=1.0).contains(&st.unique_anchor_fraction));
    assert!(st.avg_objects_per_entity >= 1.0);
    let empty = compute_stats(&[], &scenes).unwrap();
    assert_eq!(empty.unique_anchor_fraction, 0.0);
    assert!(entity_histogram(&[]).is_empty());
    let only_targets = common::load_annotations("target_only_annotations.jsonl");
    assert_eq!(
        compute_stats(&only_targets, &scenes).unwrap().unique_anchor_fraction,
        0.0
    );
}

#[test]
fn histogram_counts_entities() {
    let (corpus, _) = common::mini_corpus();
    let picked: Vec<_> = [0usize, 1, 4].iter().map(|&i| corpus[i].clone()).collect();
    assert_eq!(entity_histogram(&picked), BTreeMap::from([(2, 2), (3, 1)]));
}
