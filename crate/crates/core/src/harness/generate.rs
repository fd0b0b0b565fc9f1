//! Synthetic scenes and template utterances that resolve to exactly one object.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::{parse_annotations, serialize_annotations, GroundedUtterance, ScanEntity, TokenSpan};
use crate::error::{Error, Result};
use crate::relations::{between_contexts, classify_pair, RelationType, DEFAULT_VIEWPOINT};
use crate::scene::{read_scenes, write_scenes_jsonl, Box3, Scene, SceneObject, Vec3};
use crate::vocab::{ClassVocab, Vocab};

struct ClassSpec {
    name: &'static str,
    size: [f64; 3],
    surface: bool,
    small: bool,
}

const CLASSES: [ClassSpec; 10] = [
    ClassSpec {
        name: "chair",
        size: [0.5, 0.5, 0.9],
        surface: false,
        small: false,
    },
    ClassSpec {
        name: "table",
        size: [1.2, 0.8, 0.75],
        surface: true,
        small: false,
    },
    ClassSpec {
        name: "lamp",
        size: [0.3, 0.3, 0.5],
        surface: false,
        small: true,
    },
    ClassSpec {
        name: "sofa",
        size: [1.8, 0.9, 0.8],
        surface: false,
        small: false,
    },
    ClassSpec {
        name: "desk",
        size: [1.4, 0.7, 0.75],
        surface: true,
        small: false,
    },
    ClassSpec {
        name: "box",
        size: [0.4, 0.4, 0.3],
        surface: false,
        small: true,
    },
    ClassSpec {
        name: "cabinet",
        size: [0.8, 0.5, 1.0],
        surface: true,
        small: false,
    },
    ClassSpec {
        name: "monitor",
        size: [0.5, 0.2, 0.4],
        surface: false,
        small: true,
    },
    ClassSpec {
        name: "bed",
        size: [2.0, 1.5, 0.6],
        surface: false,
        small: false,
    },
    ClassSpec {
        name: "shelf",
        size: [0.9, 0.35, 1.8],
        surface: false,
        small: false,
    },
];

const PREFIXES: [&[&str]; 4] = [&[], &["find"], &["select"], &["pick"]];
const CONNECTORS: [&[&str]; 3] = [&[], &["that", "is"], &["which", "is"]];
const ROOM_HALF: f64 = 3.0;
const FLOOR_GAP: f64 = 0.1;
const PLACEMENT_TRIES: usize = 200;

const VIEW_RELATIONS: [RelationType; 4] = [
    RelationType::LeftOf,
    RelationType::RightOf,
    RelationType::InFrontOf,
    RelationType::Behind,
];
const PLAIN_RELATIONS: [RelationType; 6] = [
    RelationType::Closest,
    RelationType::Farthest,
    RelationType::NextTo,
    RelationType::OnTopOf,
    RelationType::Under,
    RelationType::Between,
];

fn phrase(rel: RelationType) -> &'static [&'static str] {
    use RelationType::*;
    match rel {
        Closest => &["closest", "to"],
        Farthest => &["farthest", "from"],
        NextTo => &["next", "to"],
        OnTopOf => &["on", "top", "of"],
        Under => &["under"],
        Between => &["between"],
        LeftOf => &["on", "the", "left", "of"],
        RightOf => &["on", "the", "right", "of"],
        InFrontOf => &["in", "front", "of"],
        Behind => &["behind"],
        Above => &["above"],
        Below => &["below"],
        Inside => &["inside"],
    }
}

/// Every word a generated utterance can contain, class names included.
pub fn lexicon() -> Vocab {
    let mut words: Vec<&str> = vec!["the", "and", "facing"];
    for p in PREFIXES.iter().chain(CONNECTORS.iter()) {
        words.extend_from_slice(p);
    }
    for r in RelationType::ALL {
        words.extend_from_slice(phrase(r));
    }
    words.extend(CLASSES.iter().map(|c| c.name));
    Vocab::new(words)
}

/// Class labels the generator can emit for `n_classes`.
pub fn class_vocab(n_classes: usize) -> ClassVocab {
    ClassVocab::new(CLASSES.iter().take(n_classes).map(|c| c.name))
}

fn default_scenes() -> usize {
    200
}
fn default_utterances() -> usize {
    10
}
fn default_max_objects() -> usize {
    12
}
fn default_min_objects() -> usize {
    6
}
fn default_classes() -> usize {
    10
}
fn default_view_dep() -> f64 {
    0.3
}
fn default_distractor_rate() -> f64 {
    0.5
}
fn default_budget() -> usize {
    400
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    #[serde(default = "default_scenes")]
    pub n_scenes: usize,
    #[serde(default = "default_utterances")]
    pub utterances_per_scene: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_max_objects")]
    pub max_objects: usize,
    #[serde(default = "default_min_objects")]
    pub min_objects: usize,
    #[serde(default = "default_classes")]
    pub n_classes: usize,
    #[serde(default = "default_view_dep")]
    pub view_dep_fraction: f64,
    /// Chance of adding each further same-class instance beyond the second.
    #[serde(default = "default_distractor_rate")]
    pub distractor_rate: f64,
    /// Sampling attempts per utterance before the scene is redrawn.
    #[serde(default = "default_budget")]
    pub retry_budget: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_scenes: default_scenes(),
            utterances_per_scene: default_utterances(),
            seed: 0,
            max_objects: default_max_objects(),
            min_objects: default_min_objects(),
            n_classes: default_classes(),
            view_dep_fraction: default_view_dep(),
            distractor_rate: default_distractor_rate(),
            retry_budget: default_budget(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.n_scenes == 0 || self.utterances_per_scene == 0 || self.retry_budget == 0 {
            return bad("counts must be positive");
        }
        if self.n_classes < 3 || self.n_classes > CLASSES.len() {
            return bad("n_classes must lie in 3..=10");
        }
        if self.min_objects < 3 || self.min_objects > self.max_objects {
            return bad("need 3 <= min_objects <= max_objects");
        }
        if !(0.0..=1.0).contains(&self.view_dep_fraction) || !(0.0..=1.0).contains(&self.distractor_rate) {
            return bad("fractions must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub scenes: Vec<Scene>,
    pub utterances: Vec<GroundedUtterance>,
}

impl Corpus {
    pub fn scene_map(&self) -> std::collections::HashMap<String, Scene> {
        self.scenes.iter().map(|s| (s.scene_id.clone(), s.clone())).collect()
    }

    /// Deterministic scene-level split: every fifth scene goes to test.
    pub fn split(&self) -> (Corpus, Corpus) {
        let test_ids: HashSet<&str> = self
            .scenes
            .iter()
            .enumerate()
            .filter(|(i, _)| i % 5 == 4)
            .map(|(_, s)| s.scene_id.as_str())
            .collect();
        let pick = |test: bool| Corpus {
            scenes: self
                .scenes
                .iter()
                .filter(|s| test_ids.contains(s.scene_id.as_str()) == test)
                .cloned()
                .collect(),
            utterances: self
                .utterances
                .iter()
                .filter(|u| test_ids.contains(u.scene_id.as_str()) == test)
                .cloned()
                .collect(),
        };
        (pick(false), pick(true))
    }

    /// Reads a corpus written by [`Corpus::write`], checking that every
    /// utterance resolves against its scene.
    pub fn read(dir: &Path) -> Result<Corpus> {
        let open = |name: &str| -> Result<_> { Ok(std::io::BufReader::new(std::fs::File::open(dir.join(name))?)) };
        let corpus = Corpus {
            scenes: read_scenes(open("scenes.jsonl")?)?,
            utterances: parse_annotations(open("annotations.jsonl")?)?,
        };
        let scenes = corpus.scene_map();
        for u in &corpus.utterances {
            let s = scenes
                .get(&u.scene_id)
                .ok_or_else(|| Error::MissingScene(u.scene_id.clone()))?;
            u.validate_against(s)?;
        }
        Ok(corpus)
    }

    /// Writes `scenes.jsonl` and `annotations.jsonl` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("scenes.jsonl"), write_scenes_jsonl(&self.scenes)?)?;
        std::fs::write(dir.join("annotations.jsonl"), serialize_annotations(&self.utterances))?;
        Ok(())
    }
}

fn jitter(rng: &mut ChaCha8Rng, base: [f64; 3]) -> Vec3 {
    let mut f = || rng.gen_range(0.85..1.15);
    Vec3::new(base[0] * f(), base[1] * f(), base[2] * f())
}

fn footprints_clear(a: &Box3, b: &Box3) -> bool {
    let (amin, amax, bmin, bmax) = (a.min(), a.max(), b.min(), b.max());
    amax.x + FLOOR_GAP <= bmin.x
        || bmax.x + FLOOR_GAP <= amin.x
        || amax.y + FLOOR_GAP <= bmin.y
        || bmax.y + FLOOR_GAP <= amin.y
}

fn place_on_floor(rng: &mut ChaCha8Rng, size: Vec3, floor: &[Box3]) -> Option<Box3> {
    for _ in 0..PLACEMENT_TRIES {
        let hx = ROOM_HALF - size.x / 2.0;
        let hy = ROOM_HALF - size.y / 2.0;
        let c = Vec3::new(rng.gen_range(-hx..hx), rng.gen_range(-hy..hy), size.z / 2.0);
        let b = Box3::axis_aligned(c, size).ok()?;
        if floor.iter().all(|f| footprints_clear(&b, f)) {
            return Some(b);
        }
    }
    None
}

fn class_counts(rng: &mut ChaCha8Rng, cfg: &GenConfig) -> Vec<usize> {
    let m = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut labels = Vec::with_capacity(m);
    let repeated = rng.gen_range(0..cfg.n_classes);
    let mut k = 2;
    while k < 5 && rng.gen_bool(cfg.distractor_rate) {
        k += 1;
    }
    labels.extend(std::iter::repeat_n(repeated, k.min(m)));
    if m - labels.len() >= 4 && rng.gen_bool(0.5) {
        let second = rng.gen_range(0..cfg.n_classes);
        labels.extend([second, second]);
    }
    while labels.len() < m {
        labels.push(rng.gen_range(0..cfg.n_classes));
    }
    labels
}

fn generate_scene(rng: &mut ChaCha8Rng, cfg: &GenConfig, scene_id: String) -> Option<Scene> {
    let mut labels = class_counts(rng, cfg);
    labels.sort_by_key(|&c| CLASSES[c].small);
    let mut floor: Vec<Box3> = Vec::new();
    let mut surfaces: Vec<(usize, Box3)> = Vec::new();
    let mut placed: Vec<(usize, Box3)> = Vec::new();
    for c in labels {
        let spec = &CLASSES[c];
        let size = jitter(rng, spec.size);
        let free: Vec<usize> = (0..surfaces.len())
            .filter(|&i| {
                let s = surfaces[i].1;
                s.size.x > size.x + 0.1 && s.size.y > size.y + 0.1
            })
            .collect();
        let b = if spec.small && !free.is_empty() && rng.gen_bool(0.7) {
            let (_, s) = surfaces.remove(free[rng.gen_range(0..free.len())]);
            let mx = (s.size.x - size.x) / 2.0 - 0.02;
            let my = (s.size.y - size.y) / 2.0 - 0.02;
            let c = Vec3::new(
                s.center.x + rng.gen_range(-mx..mx),
                s.center.y + rng.gen_range(-my..my),
                s.max().z + size.z / 2.0,
            );
            Box3::axis_aligned(c, size).ok()?
        } else {
            let b = place_on_floor(rng, size, &floor)?;
            floor.push(b);
            if spec.surface {
                surfaces.push((c, b));
            }
            b
        };
        placed.push((c, b));
    }
    placed.shuffle(rng);
    let objects = placed
        .into_iter()
        .enumerate()
        .map(|(i, (c, b))| SceneObject::new(i as i64, CLASSES[c].name, b))
        .collect();
    Scene::new(scene_id, objects).ok()
}

/// Relation sets for every ordered object pair, indexed by scene position.
struct RelationTable {
    rels: Vec<Vec<BTreeSet<RelationType>>>,
}

impl RelationTable {
    fn new(s: &Scene) -> Result<Self> {
        let rels = s
            .objects
            .iter()
            .map(|a| {
                s.objects
                    .iter()
                    .map(|b| classify_pair(a, b, s, DEFAULT_VIEWPOINT))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        Ok(RelationTable { rels })
    }

    fn holds(&self, i: usize, j: usize, r: RelationType) -> bool {
        self.rels[i][j].contains(&r)
    }
}

/// Anchor groundings under which object `i` satisfies the description.
/// One inner list per anchor phrase.
fn groundings(
    s: &Scene,
    table: &RelationTable,
    i: usize,
    rel: RelationType,
    anchor_classes: &[&str],
) -> Vec<Vec<BTreeSet<i64>>> {
    let obj = &s.objects[i];
    let mut found = Vec::new();
    for (j, a) in s.objects.iter().enumerate() {
        if j == i || a.class_label != anchor_classes[0] || !table.holds(i, j, rel) {
            continue;
        }
        if rel == RelationType::Between {
            for c in between_contexts(obj, a, s) {
                let other = s.object(c).expect("context ids come from the scene");
                if other.class_label == anchor_classes[1] {
                    found.push(vec![BTreeSet::from([a.id]), BTreeSet::from([c])]);
                }
            }
        } else {
            found.push(vec![BTreeSet::from([a.id])]);
        }
    }
    found
}

/// Merges groundings into one object set per anchor phrase.
fn merge(groundings: &[Vec<BTreeSet<i64>>], n_anchors: usize) -> Vec<BTreeSet<i64>> {
    let mut out = vec![BTreeSet::new(); n_anchors];
    for g in groundings {
        for (k, ids) in g.iter().enumerate() {
            out[k].extend(ids);
        }
    }
    out
}

/// Number of objects of `class` that satisfy the description. The generator
/// only emits utterances where this is exactly one.
pub fn count_referents(s: &Scene, class: &str, rel: RelationType, anchor_classes: &[&str]) -> Result<usize> {
    let table = RelationTable::new(s)?;
    Ok((0..s.len())
        .filter(|&i| s.objects[i].class_label == class)
        .filter(|&i| !groundings(s, &table, i, rel, anchor_classes).is_empty())
        .count())
}

struct Draft {
    tokens: Vec<String>,
    target: i64,
    rel: RelationType,
    entities: Vec<ScanEntity>,
    key: (i64, RelationType, Vec<BTreeSet<i64>>),
}

fn try_utterance(rng: &mut ChaCha8Rng, s: &Scene, table: &RelationTable, view_dep: bool) -> Option<Draft> {
    let repeated: Vec<usize> = (0..s.len())
        .filter(|&i| s.class_count(&s.objects[i].class_label) >= 2)
        .collect();
    let ti = *repeated.choose(rng)?;
    let target = &s.objects[ti];
    let rel = if view_dep {
        *VIEW_RELATIONS.choose(rng)?
    } else {
        *PLAIN_RELATIONS.choose(rng)?
    };
    let others: Vec<&str> = s
        .objects
        .iter()
        .map(|o| o.class_label.as_str())
        .filter(|c| *c != target.class_label)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let n_anchors = if rel == RelationType::Between { 2 } else { 1 };
    if others.len() < n_anchors {
        return None;
    }
    let anchor_classes: Vec<&str> = others.choose_multiple(rng, n_anchors).copied().collect();

    let mine = groundings(s, table, ti, rel, &anchor_classes);
    if mine.is_empty() {
        return None;
    }
    let rivals = (0..s.len())
        .filter(|&j| j != ti && s.objects[j].class_label == target.class_label)
        .any(|j| !groundings(s, table, j, rel, &anchor_classes).is_empty());
    if rivals {
        return None;
    }
    let anchor_sets = merge(&mine, n_anchors);

    let mut tokens: Vec<String> = Vec::new();
    let push = |tokens: &mut Vec<String>, words: &[&str]| {
        let start = tokens.len();
        tokens.extend(words.iter().map(|w| w.to_string()));
        TokenSpan::new(start, tokens.len())
    };
    push(&mut tokens, PREFIXES.choose(rng)?);
    let target_span = push(&mut tokens, &["the", &target.class_label]);
    if !matches!(rel, RelationType::Closest | RelationType::Farthest) {
        push(&mut tokens, CONNECTORS.choose(rng)?);
    }
    push(&mut tokens, phrase(rel));
    let mut entities = vec![ScanEntity {
        span: target_span,
        object_ids: vec![target.id],
        is_target: true,
    }];
    for (k, (class, ids)) in anchor_classes.iter().zip(&anchor_sets).enumerate() {
        if k > 0 {
            push(&mut tokens, &["and"]);
        }
        let span = push(&mut tokens, &["the", class]);
        entities.push(ScanEntity {
            span,
            object_ids: ids.iter().copied().collect(),
            is_target: false,
        });
    }
    Some(Draft {
        tokens,
        target: target.id,
        rel,
        entities,
        key: (target.id, rel, anchor_sets),
    })
}

fn scene_utterances(rng: &mut ChaCha8Rng, cfg: &GenConfig, s: &Scene) -> Result<Option<Vec<GroundedUtterance>>> {
    let table = RelationTable::new(s)?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(cfg.utterances_per_scene);
    for k in 0..cfg.utterances_per_scene {
        let view_dep = rng.gen_bool(cfg.view_dep_fraction);
        let mut accepted = None;
        for attempt in 0..cfg.retry_budget {
            let Some(d) = try_utterance(rng, s, &table, view_dep) else {
                continue;
            };
            if seen.contains(&d.key) && attempt < cfg.retry_budget / 2 {
                continue;
            }
            accepted = Some(d);
            break;
        }
        let Some(d) = accepted else { return Ok(None) };
        seen.insert(d.key);
        out.push(GroundedUtterance {
            id: format!("{}_u{k:02}", s.scene_id),
            scene_id: s.scene_id.clone(),
            tokens: d.tokens,
            target_object: d.target,
            view_dependent: d.rel.is_view_dependent(),
            entities: d.entities,
        });
    }
    Ok(Some(out))
}

/// Scene redraws allowed per scene before giving up.
const SCENE_RETRIES: usize = 50;

/// Generates `n_scenes` scenes and their utterances; fully determined by `cfg`.
pub fn generate_corpus(cfg: &GenConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut corpus = Corpus::default();
    for n in 0..cfg.n_scenes {
        let scene_id = format!("scene{n:04}");
        let mut done = false;
        for _ in 0..SCENE_RETRIES {
            let Some(scene) = generate_scene(&mut rng, cfg, scene_id.clone()) else {
                continue;
            };
            if let Some(us) = scene_utterances(&mut rng, cfg, &scene)? {
                corpus.scenes.push(scene);
                corpus.utterances.extend(us);
                done = true;
                break;
            }
        }
        if !done {
            return Err(Error::GenerationExhausted(scene_id));
        }
    }
    Ok(corpus)
}
