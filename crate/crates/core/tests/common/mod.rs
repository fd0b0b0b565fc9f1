//! Fixture loaders and brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

use rand::Rng;
use serde::Deserialize;

use scanents::annotation::{parse_annotations, GroundedUtterance, SupervisionTargets};
use scanents::relations::RelationType;
use scanents::scene::{read_scenes, Box3, Scene, Vec3};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

pub fn load_scenes(name: &str) -> HashMap<String, Scene> {
    let f = File::open(fixture(name)).expect("scene fixture");
    read_scenes(BufReader::new(f))
        .expect("valid scenes")
        .into_iter()
        .map(|s| (s.scene_id.clone(), s))
        .collect()
}

pub fn load_annotations(name: &str) -> Vec<GroundedUtterance> {
    let f = File::open(fixture(name)).expect("annotation fixture");
    parse_annotations(BufReader::new(f)).expect("valid annotations")
}

/// The 50-utterance fixture corpus.
pub fn fixture_corpus() -> (Vec<GroundedUtterance>, HashMap<String, Scene>) {
    (
        load_annotations("fixture_annotations.jsonl"),
        load_scenes("fixture_scenes.jsonl"),
    )
}

/// The 10-utterance hand-checked corpus.
pub fn mini_corpus() -> (Vec<GroundedUtterance>, HashMap<String, Scene>) {
    (
        load_annotations("mini_annotations.jsonl"),
        load_scenes("mini_scenes.jsonl"),
    )
}

/// Supervision targets by scanning every (object, token) cell against every
/// entity's membership list.
pub fn targets_oracle(u: &GroundedUtterance, s: &Scene, nm: bool) -> SupervisionTargets {
    let target_class = &s.objects.iter().find(|o| o.id == u.target_object).unwrap().class_label;
    let off = usize::from(nm);
    let mut out = SupervisionTargets {
        target_index: s.objects.iter().position(|o| o.id == u.target_object).unwrap(),
        y_anc: Vec::new(),
        y_dis: Vec::new(),
        y_attn: Vec::new(),
        y_men: Vec::new(),
        nm_token: nm,
    };
    for o in &s.objects {
        let mentioned = u.entities.iter().any(|e| e.object_ids.contains(&o.id));
        let anchor = o.id != u.target_object && u.entities.iter().any(|e| !e.is_target && e.object_ids.contains(&o.id));
        out.y_anc.push(u8::from(anchor));
        out.y_dis
            .push(u8::from(o.id != u.target_object && &o.class_label == target_class));
        out.y_men.push(u8::from(mentioned));
        let mut row = vec![0u8; u.tokens.len() + off];
        if nm && !mentioned {
            row[0] = 1;
        }
        for (j, cell) in row.iter_mut().enumerate().skip(off) {
            let tok = j - off;
            if u.entities
                .iter()
                .any(|e| e.span.start <= tok && tok < e.span.end && e.object_ids.contains(&o.id))
            {
                *cell = 1;
            }
        }
        out.y_attn.push(row);
    }
    out
}

/// Per-field recount of corpus statistics.
pub struct Recount {
    pub n_utterances: usize,
    pub n_annotated_objects: usize,
    pub n_entities: usize,
    pub anchor_refs: usize,
    pub unique_anchor_refs: usize,
    pub histogram: BTreeMap<usize, usize>,
    pub anchor_classes: BTreeMap<String, usize>,
    pub n_tokens: usize,
}

pub fn recount(corpus: &[GroundedUtterance], scenes: &HashMap<String, Scene>) -> Recount {
    let mut r = Recount {
        n_utterances: corpus.len(),
        n_annotated_objects: 0,
        n_entities: 0,
        anchor_refs: 0,
        unique_anchor_refs: 0,
        histogram: BTreeMap::new(),
        anchor_classes: BTreeMap::new(),
        n_tokens: 0,
    };
    for u in corpus {
        let s = &scenes[&u.scene_id];
        r.n_tokens += u.tokens.len();
        *r.histogram.entry(u.entities.len()).or_default() += 1;
        for e in &u.entities {
            r.n_entities += 1;
            r.n_annotated_objects += e.object_ids.len();
            if e.is_target {
                continue;
            }
            for &id in &e.object_ids {
                if id == u.target_object {
                    continue;
                }
                let class = &s.objects.iter().find(|o| o.id == id).unwrap().class_label;
                let same = s.objects.iter().filter(|o| &o.class_label == class).count();
                r.anchor_refs += 1;
                r.unique_anchor_refs += usize::from(same == 1);
                *r.anchor_classes.entry(class.clone()).or_default() += 1;
            }
        }
    }
    r
}

fn overlap_1d(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

/// Axis-aligned IoU from corner coordinates.
pub fn iou_oracle(a: &Box3, b: &Box3) -> f64 {
    let lo = |x: &Box3| {
        [
            x.center.x - x.size.x / 2.0,
            x.center.y - x.size.y / 2.0,
            x.center.z - x.size.z / 2.0,
        ]
    };
    let hi = |x: &Box3| {
        [
            x.center.x + x.size.x / 2.0,
            x.center.y + x.size.y / 2.0,
            x.center.z + x.size.z / 2.0,
        ]
    };
    let (al, ah, bl, bh) = (lo(a), hi(a), lo(b), hi(b));
    let inter: f64 = (0..3).map(|k| overlap_1d(al[k], ah[k], bl[k], bh[k])).product();
    let vol = |x: &Box3| x.size.x * x.size.y * x.size.z;
    inter / (vol(a) + vol(b) - inter)
}

/// For each ground-truth box, mark the first proposal attaining the maximal
/// positive IoU.
pub fn labels_oracle(proposals: &[Box3], gts: &[Box3]) -> Vec<u8> {
    let mut labels = vec![0u8; proposals.len()];
    for g in gts {
        let ious: Vec<f64> = proposals.iter().map(|p| iou_oracle(p, g)).collect();
        let best = ious.iter().copied().fold(0.0, f64::max);
        if best > 0.0 {
            let j = ious.iter().position(|&x| x == best).unwrap();
            labels[j] = 1;
        }
    }
    labels
}

pub fn random_box(rng: &mut impl Rng, extent: f64) -> Box3 {
    let c = Vec3::new(
        rng.gen_range(-extent..extent),
        rng.gen_range(-extent..extent),
        rng.gen_range(0.0..extent),
    );
    let s = Vec3::new(
        rng.gen_range(0.2..1.5),
        rng.gen_range(0.2..1.5),
        rng.gen_range(0.2..1.5),
    );
    Box3::axis_aligned(c, s).unwrap()
}

/// A proposal/ground-truth configuration. Every few draws duplicates a
/// proposal (exact IoU ties) or places a ground truth far away (zero IoU).
pub fn random_assignment(rng: &mut impl Rng, k: usize) -> (Vec<Box3>, Vec<Box3>) {
    let mut proposals: Vec<Box3> = (0..rng.gen_range(1..=8)).map(|_| random_box(rng, 2.0)).collect();
    if k.is_multiple_of(3) {
        let j = rng.gen_range(0..proposals.len());
        let dup = proposals[j];
        proposals.insert(rng.gen_range(0..=proposals.len()), dup);
    }
    let mut gts: Vec<Box3> = (0..rng.gen_range(1..=3))
        .map(|_| {
            if rng.gen_bool(0.4) {
                let b = proposals[rng.gen_range(0..proposals.len())];
                let jitter = Vec3::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), 0.0);
                Box3::axis_aligned(b.center + jitter, b.size).unwrap()
            } else {
                random_box(rng, 2.0)
            }
        })
        .collect();
    if k % 4 == 1 {
        gts.push(Box3::axis_aligned(Vec3::new(100.0, 100.0, 100.0), Vec3::new(1.0, 1.0, 1.0)).unwrap());
    }
    (proposals, gts)
}

#[derive(Debug, Deserialize)]
pub struct RelationCase {
    pub name: String,
    pub subject: i64,
    pub object: i64,
    pub scene: Scene,
    pub expected: BTreeSet<RelationType>,
}

pub fn relation_cases() -> Vec<RelationCase> {
    let text = std::fs::read_to_string(fixture("relation_cases.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

#[derive(Debug, Deserialize)]
pub struct MetricCase {
    pub candidates: Vec<String>,
    pub references: Vec<Vec<String>>,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
}

impl MetricCase {
    pub fn tokens(&self) -> (Vec<Vec<String>>, Vec<Vec<Vec<String>>>) {
        let split = |s: &String| s.split_whitespace().map(String::from).collect::<Vec<_>>();
        (
            self.candidates.iter().map(split).collect(),
            self.references.iter().map(|r| r.iter().map(split).collect()).collect(),
        )
    }
}

pub fn metric_cases() -> BTreeMap<String, MetricCase> {
    let text = std::fs::read_to_string(fixture("metric_cases.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

/// Random two-to-five object scene for property checks.
pub fn random_scene(rng: &mut impl Rng, id: &str) -> Scene {
    const CLASSES: [&str; 3] = ["chair", "table", "box"];
    let n = rng.gen_range(2..=5);
    let objects = (0..n)
        .map(|i| {
            let b = random_box(rng, 3.0);
            scanents::scene::SceneObject::new(i as i64, CLASSES[rng.gen_range(0..CLASSES.len())], b)
        })
        .collect();
    Scene::new(id, objects).unwrap()
}
