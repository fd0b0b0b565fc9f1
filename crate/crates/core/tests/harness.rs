use std::collections::{BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scanents::annotation::{serialize_annotations, GroundedUtterance, ScanEntity, TokenSpan};
use scanents::harness::eval::{evaluate_examples, evaluate_speaker, EvalReport, Referrer};
use scanents::harness::generate::{generate_corpus, lexicon, Corpus, GenConfig};
use scanents::harness::gradcheck::gradcheck_all;
use scanents::harness::train::{new_listener, train_listener, train_speaker, TrainConfig};
use scanents::harness::{evaluate, knockout, KnockoutMode};
use scanents::listener::{AuxFlags, Listener, ListenerConfig};
use scanents::relations::{classify_pair, RelationType, DEFAULT_VIEWPOINT};
use scanents::scene::{write_scenes_jsonl, Box3, Scene, SceneObject, Vec3};
use scanents::speaker::{SpeakerAux, SpeakerConfig};
use scanents::{Error, Result, Tape64};

fn small(seed: u64, n_scenes: usize) -> GenConfig {
    GenConfig {
        n_scenes,
        utterances_per_scene: 5,
        seed,
        ..GenConfig::default()
    }
}

fn bytes(c: &Corpus) -> (String, String) {
    (
        write_scenes_jsonl(&c.scenes).unwrap(),
        serialize_annotations(&c.utterances),
    )
}

#[test]
fn generation_is_deterministic() {
    let a = generate_corpus(&small(7, 15)).unwrap();
    let b = generate_corpus(&small(7, 15)).unwrap();
    assert_eq!(bytes(&a), bytes(&b));
    let c = generate_corpus(&small(8, 15)).unwrap();
    assert_ne!(bytes(&a), bytes(&c));
}

fn relation_of(tokens: &[String]) -> RelationType {
    use RelationType::*;
    let has = |w: &str| tokens.iter().any(|t| t == w);
    [
        ("closest", Closest),
        ("farthest", Farthest),
        ("next", NextTo),
        ("top", OnTopOf),
        ("under", Under),
        ("between", Between),
        ("left", LeftOf),
        ("right", RightOf),
        ("front", InFrontOf),
        ("behind", Behind),
    ]
    .into_iter()
    .find(|(w, _)| has(w))
    .map(|(_, r)| r)
    .expect("utterance names a relation")
}

/// Strictly-inside projection onto segment `a`-`b` within 0.3 m.
fn on_segment(p: Vec3, a: Vec3, b: Vec3) -> bool {
    let ab = b - a;
    let t = (p - a).dot(ab) / ab.dot(ab);
    t > 0.0 && t < 1.0 && (p - (a + ab * t)).norm() <= 0.3
}

/// Anchor objects per phrase under which `o` fits the description.
fn fits(s: &Scene, o: &SceneObject, rel: RelationType, anchors: &[&str]) -> Vec<BTreeSet<i64>> {
    let mut sets = vec![BTreeSet::new(); anchors.len()];
    for a in s.objects.iter().filter(|a| a.id != o.id && a.class_label == anchors[0]) {
        if !classify_pair(o, a, s, DEFAULT_VIEWPOINT).unwrap().contains(&rel) {
            continue;
        }
        if rel == RelationType::Between {
            for c in s
                .objects
                .iter()
                .filter(|c| c.id != o.id && c.id != a.id && c.class_label == anchors[1])
            {
                if on_segment(o.center(), a.center(), c.center()) {
                    sets[0].insert(a.id);
                    sets[1].insert(c.id);
                }
            }
        } else {
            sets[0].insert(a.id);
        }
    }
    sets
}

#[test]
fn every_utterance_resolves_uniquely() {
    let corpus = generate_corpus(&small(3, 40)).unwrap();
    let scenes = corpus.scene_map();
    assert_eq!(corpus.utterances.len(), 200);
    for u in &corpus.utterances {
        let s = &scenes[&u.scene_id];
        u.validate_against(s).unwrap();
        let t = u.target_entity().unwrap();
        let class = &u.tokens[t.span.end - 1];
        let anchors: Vec<&str> = u.anchor_entities().map(|e| u.tokens[e.span.end - 1].as_str()).collect();
        let rel = relation_of(&u.tokens);
        assert_eq!(rel.is_view_dependent(), u.view_dependent, "{}", u.id);
        let matching: Vec<&SceneObject> = s
            .objects
            .iter()
            .filter(|o| &o.class_label == class)
            .filter(|o| fits(s, o, rel, &anchors).iter().all(|set| !set.is_empty()))
            .collect();
        assert_eq!(matching.len(), 1, "{} resolves to {} objects", u.id, matching.len());
        assert_eq!(matching[0].id, u.target_object);
        let recorded: Vec<BTreeSet<i64>> = u
            .anchor_entities()
            .map(|e| e.object_ids.iter().copied().collect())
            .collect();
        assert_eq!(recorded, fits(s, matching[0], rel, &anchors), "{}", u.id);
    }
}

#[test]
fn no_view_dependent_utterances_when_disabled() {
    let cfg = GenConfig {
        view_dep_fraction: 0.0,
        ..small(4, 20)
    };
    let corpus = generate_corpus(&cfg).unwrap();
    assert!(corpus.utterances.iter().all(|u| !u.view_dependent));
}

#[test]
fn scenes_are_physically_plausible() {
    let corpus = generate_corpus(&small(5, 30)).unwrap();
    for s in &corpus.scenes {
        assert!(s.len() <= 12);
        for (i, a) in s.objects.iter().enumerate() {
            assert!(a.bbox.min().z >= -1e-9, "{} floats below the floor", s.scene_id);
            for b in &s.objects[i + 1..] {
                let (amin, amax, bmin, bmax) = (a.bbox.min(), a.bbox.max(), b.bbox.min(), b.bbox.max());
                let sep = |k: fn(Vec3) -> f64| k(amax) <= k(bmin) + 1e-9 || k(bmax) <= k(amin) + 1e-9;
                assert!(
                    sep(|v| v.x) || sep(|v| v.y) || sep(|v| v.z),
                    "{}: {} and {} overlap",
                    s.scene_id,
                    a.id,
                    b.id
                );
            }
        }
    }
}

#[test]
fn lexicon_is_small() {
    assert!(lexicon().len() <= 60);
}

#[test]
fn config_validation_and_exhaustion() {
    assert!(matches!(
        generate_corpus(&GenConfig {
            n_scenes: 0,
            ..GenConfig::default()
        }),
        Err(Error::Config(_))
    ));
    let hopeless = GenConfig {
        n_scenes: 1,
        utterances_per_scene: 10,
        min_objects: 3,
        max_objects: 3,
        n_classes: 3,
        retry_budget: 1,
        ..GenConfig::default()
    };
    assert!(matches!(generate_corpus(&hopeless), Err(Error::GenerationExhausted(_))));
}

struct ReadsLabel;

impl Referrer for ReadsLabel {
    fn choose(&self, scene: &Scene, u: &GroundedUtterance) -> Result<usize> {
        scene
            .index_of(u.target_object)
            .ok_or(Error::UnknownObject(u.target_object))
    }
    fn anchor_logits(&self, scene: &Scene, u: &GroundedUtterance) -> Result<Option<Vec<f64>>> {
        let a = u.anchor_ids();
        Ok(Some(
            scene
                .objects
                .iter()
                .map(|o| if a.contains(&o.id) { 5.0 } else { -5.0 })
                .collect(),
        ))
    }
}

/// Uniform choice, seeded per utterance so runs are reproducible.
struct Uniform;

impl Referrer for Uniform {
    fn choose(&self, scene: &Scene, u: &GroundedUtterance) -> Result<usize> {
        let seed = u.id.bytes().fold(1469598103934665603u64, |h, b| {
            (h ^ b as u64).wrapping_mul(1099511628211)
        });
        Ok(ChaCha8Rng::seed_from_u64(seed).gen_range(0..scene.len()))
    }
    fn anchor_logits(&self, _: &Scene, _: &GroundedUtterance) -> Result<Option<Vec<f64>>> {
        Ok(None)
    }
}

fn assert_split_identities(r: &EvalReport) {
    let t = |k: &str| r.counts[k];
    assert_eq!(t("easy").total + t("hard").total, t("overall").total);
    assert_eq!(t("easy").correct + t("hard").correct, t("overall").correct);
    assert_eq!(t("view_dep").total + t("view_indep").total, t("overall").total);
    assert_eq!(t("view_dep").correct + t("view_indep").correct, t("overall").correct);
    let n = r.n as f64;
    let weighted = (r.easy_acc * t("easy").total as f64 + r.hard_acc * t("hard").total as f64) / n;
    assert!((weighted - r.overall_acc).abs() < 1e-12);
}

#[test]
fn label_reader_scores_one_everywhere() {
    let corpus = generate_corpus(&small(6, 30)).unwrap();
    let r = evaluate(&ReadsLabel, &corpus).unwrap();
    assert_eq!(r.overall_acc, 1.0);
    assert_eq!(r.easy_acc, 1.0);
    assert_eq!(r.view_indep_acc, 1.0);
    assert_eq!(r.anchor_f1, 1.0);
    assert!(r.counts["hard"].total == 0 || r.hard_acc == 1.0);
    assert!(r.counts["view_dep"].total == 0 || r.view_dep_acc == 1.0);
    assert_split_identities(&r);
    for m in KnockoutMode::ALL {
        assert_eq!(knockout(&ReadsLabel, &corpus, m).unwrap(), 1.0);
    }
}

#[test]
fn uniform_predictor_hits_chance() {
    let corpus = generate_corpus(&small(9, 200)).unwrap();
    let scenes = corpus.scene_map();
    let p: Vec<f64> = corpus
        .utterances
        .iter()
        .map(|u| 1.0 / scenes[&u.scene_id].len() as f64)
        .collect();
    let mean: f64 = p.iter().sum::<f64>();
    let sd = p.iter().map(|q| q * (1.0 - q)).sum::<f64>().sqrt();
    let r = evaluate(&Uniform, &corpus).unwrap();
    let hits = r.overall_acc * r.n as f64;
    assert!(
        (hits - mean).abs() <= 3.0 * sd,
        "hits {hits} vs expected {mean} +- {sd}"
    );
    assert_split_identities(&r);
}

fn lonely_corpus() -> Corpus {
    let obj = |id: i64, class: &str, x: f64| {
        SceneObject::new(
            id,
            class,
            Box3::axis_aligned(Vec3::new(x, 0.0, 0.5), Vec3::new(0.8, 0.8, 1.0)).unwrap(),
        )
    };
    let scene = Scene::new(
        "solo",
        vec![obj(0, "chair", 0.0), obj(1, "table", 2.0), obj(2, "lamp", -2.0)],
    )
    .unwrap();
    let u = GroundedUtterance {
        id: "solo_u".into(),
        scene_id: "solo".into(),
        tokens: vec!["the".into(), "chair".into()],
        target_object: 0,
        view_dependent: false,
        entities: vec![ScanEntity {
            span: TokenSpan::new(0, 2),
            object_ids: vec![0],
            is_target: true,
        }],
    };
    Corpus {
        scenes: vec![scene],
        utterances: vec![u],
    }
}

fn tiny_listener(seed: u64) -> Listener<f64> {
    let cfg = ListenerConfig {
        d: 8,
        ..ListenerConfig::default()
    };
    new_listener(&cfg, 10, seed).unwrap()
}

#[test]
fn anchors_only_without_anchors_or_distractors_is_trivial() {
    let corpus = lonely_corpus();
    for seed in 0..5 {
        assert_eq!(
            knockout(&tiny_listener(seed), &corpus, KnockoutMode::AnchorsOnly).unwrap(),
            1.0
        );
    }
}

#[test]
fn word_lesion_leaves_anchorless_utterances_alone() {
    let corpus = lonely_corpus();
    let model = tiny_listener(3);
    let (plain, _) = evaluate_examples(&model, &corpus, None).unwrap();
    let (lesioned, _) = evaluate_examples(&model, &corpus, Some(KnockoutMode::LesionAnchorWords)).unwrap();
    assert_eq!(plain, lesioned);
}

#[test]
fn knockout_deltas_recompute() {
    let corpus = generate_corpus(&small(10, 10)).unwrap();
    let model = tiny_listener(1);
    let report = scanents::harness::evaluate_with_knockouts(&model, &corpus).unwrap();
    for m in KnockoutMode::ALL {
        let (results, _) = evaluate_examples(&model, &corpus, Some(m)).unwrap();
        let acc = results.iter().filter(|r| r.correct).count() as f64 / results.len() as f64;
        assert_eq!(report.knockout[m.name()], acc);
        let delta = acc - report.overall_acc;
        assert!(
            (delta - (knockout(&model, &corpus, m).unwrap() - evaluate(&model, &corpus).unwrap().overall_acc)).abs()
                < 1e-15
        );
    }
}

#[test]
fn evaluation_is_order_independent() {
    let corpus = generate_corpus(&small(11, 10)).unwrap();
    let model = tiny_listener(2);
    let a = evaluate(&model, &corpus).unwrap();
    let mut rev = corpus.clone();
    rev.utterances.reverse();
    let b = evaluate(&model, &rev).unwrap();
    assert_eq!(a.overall_acc, b.overall_acc);
    assert_eq!(a.counts, b.counts);
    assert_eq!(a.anchor_f1, b.anchor_f1);
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_reproducible() {
    let corpus = generate_corpus(&small(12, 6)).unwrap();
    let cfg = ListenerConfig {
        d: 8,
        ..ListenerConfig::default()
    };
    let flags = AuxFlags::parse("anc,attn,dis,rel").unwrap();
    let (a, ra) = train_listener::<f64>(&corpus, &cfg, 10, &quick(2), flags, 4).unwrap();
    let (b, rb) = train_listener::<f64>(&corpus, &cfg, 10, &quick(2), flags, 4).unwrap();
    assert_eq!(
        a.to_checkpoint().unwrap().to_json().unwrap(),
        b.to_checkpoint().unwrap().to_json().unwrap()
    );
    assert_eq!(ra, rb);
}

#[test]
fn loss_trend_is_downward() {
    let corpus = generate_corpus(&small(13, 20)).unwrap();
    let cfg = ListenerConfig {
        d: 16,
        ..ListenerConfig::default()
    };
    let (_, report) = train_listener::<f32>(&corpus, &cfg, 10, &quick(20), AuxFlags::all(), 0).unwrap();
    let losses: Vec<f64> = report.epochs.iter().map(|e| e.loss).collect();
    assert!(losses.iter().all(|l| l.is_finite()));
    let ma: Vec<f64> = losses.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    for w in ma.windows(2) {
        assert!(w[1] <= w[0], "moving average rose: {ma:?}");
    }
}

#[test]
fn empty_flags_train_the_original_loss() {
    let corpus = generate_corpus(&small(14, 4)).unwrap();
    let cfg = ListenerConfig {
        d: 8,
        ..ListenerConfig::default()
    };
    let (_, report) = train_listener::<f64>(&corpus, &cfg, 10, &quick(2), AuxFlags::NONE, 0).unwrap();
    for e in &report.epochs {
        assert!((e.loss - e.terms["org"]).abs() < 1e-12);
    }
}

#[test]
fn flags_never_change_the_forward_pass() {
    let corpus = generate_corpus(&small(15, 3)).unwrap();
    let scenes = corpus.scene_map();
    let u = &corpus.utterances[0];
    let s = &scenes[&u.scene_id];
    let cfg = ListenerConfig {
        d: 8,
        ..ListenerConfig::default()
    };
    let reference = new_listener::<f64>(&cfg, 10, 21)
        .unwrap()
        .predict(s, &u.tokens)
        .unwrap();
    for flags in ["", "anc", "attn,dis", "anc,attn,dis,rel"] {
        let flags = AuxFlags::parse(flags).unwrap();
        let (model, _) = train_listener::<f64>(&corpus, &cfg, 10, &quick(1), flags, 21).unwrap();
        let fresh = new_listener::<f64>(&cfg, 10, 21).unwrap();
        assert_eq!(
            fresh.predict(s, &u.tokens).unwrap().target_logits,
            reference.target_logits
        );
        let names = |m: &Listener<f64>| {
            m.params
                .iter()
                .map(|(_, p)| (p.name.clone(), p.tensor.shape().to_vec()))
                .collect::<Vec<_>>()
        };
        assert_eq!(names(&model), names(&fresh));
    }
}

#[test]
fn speaker_trains_from_listener_encoder() {
    let corpus = generate_corpus(&small(16, 6)).unwrap();
    let lcfg = ListenerConfig {
        d: 8,
        ..ListenerConfig::default()
    };
    let scfg = SpeakerConfig {
        d: 8,
        ..SpeakerConfig::default()
    };
    let listener = new_listener::<f64>(&lcfg, 10, 1).unwrap();
    let aux = SpeakerAux::parse("ent,men").unwrap();
    let (a, report) = train_speaker(&corpus, &scfg, 10, &quick(2), aux, 2, Some(&listener)).unwrap();
    assert!(report.epochs.iter().all(|e| e.loss.is_finite()));
    let (b, _) = train_speaker(&corpus, &scfg, 10, &quick(2), aux, 2, Some(&listener)).unwrap();
    let (ra, ca) = evaluate_speaker(&a, &corpus, 12).unwrap();
    let (rb, cb) = evaluate_speaker(&b, &corpus, 12).unwrap();
    assert_eq!(ca, cb);
    assert_eq!(ra, rb);
    assert!(ra.bleu4 >= 0.0 && ra.rouge_l >= 0.0 && ra.cider >= 0.0);
    let mismatched = SpeakerConfig { d: 16, ..scfg };
    assert!(train_speaker(&corpus, &mismatched, 10, &quick(1), aux, 2, Some(&listener)).is_err());
}

#[test]
fn gradcheck_passes_for_three_seeds() {
    for seed in [101, 202, 303] {
        let report = gradcheck_all(seed, 12).unwrap();
        assert!(report.passed, "seed {seed}: {:?}", report.checks);
    }
}

#[test]
fn split_is_by_scene() {
    let corpus = generate_corpus(&small(17, 10)).unwrap();
    let (train, test) = corpus.split();
    let a: BTreeSet<_> = train.scenes.iter().map(|s| &s.scene_id).collect();
    let b: BTreeSet<_> = test.scenes.iter().map(|s| &s.scene_id).collect();
    assert!(a.is_disjoint(&b));
    assert_eq!(train.utterances.len() + test.utterances.len(), corpus.utterances.len());
    assert_eq!(test.scenes.len(), 2);
    let by_scene: HashMap<_, _> = test.scene_map();
    assert!(test.utterances.iter().all(|u| by_scene.contains_key(&u.scene_id)));
}

#[test]
fn forward_shapes_follow_scene_and_sentence() {
    let corpus = generate_corpus(&small(18, 2)).unwrap();
    let scenes = corpus.scene_map();
    let model = tiny_listener(0);
    for u in &corpus.utterances {
        let s = &scenes[&u.scene_id];
        let mut tape = Tape64::new();
        let out = model.forward(&mut tape, s, &u.tokens).unwrap();
        assert_eq!(tape.shape(out.target_logits), &[s.len()]);
        assert_eq!(tape.shape(out.attn), &[s.len(), u.tokens.len()]);
    }
}
