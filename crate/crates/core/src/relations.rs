//! Rule-based pairwise spatial relations between scene objects.
//!
//! Predicates (subject `s`, object `o`):
//! - `OnTopOf`: |s.bottom - o.top| <= 0.05 m and footprint overlap >= 50% of
//!   the smaller footprint. `Under` is the converse.
//! - `Above`: footprints overlap, s.bottom - o.top > 0.05 m (no contact).
//!   `Below` is the converse.
//! - `NextTo`: center distance <= 1.5 * (sum of half diagonals) and the pair is
//!   not vertically stacked.
//! - `Inside`: s lies within o inflated by 5%.
//! - `Between`: s's center lies within 0.3 m of the open segment joining o and
//!   some third object.
//! - `LeftOf`/`RightOf`/`InFrontOf`/`Behind`: sign of the center offset in the
//!   observer frame, with |offset| > 0.1 m.
//! - `Closest`/`Farthest`: s is the unique nearest / farthest to o among the
//!   objects of s's class (at least two such candidates).

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::GroundedUtterance;
use crate::error::{Error, Result};
use crate::scene::{distance, same_class_distractors, Scene, SceneObject, Vec3};

pub const CONTACT_GAP: f64 = 0.05;
pub const SUPPORT_OVERLAP: f64 = 0.5;
pub const NEXT_TO_FACTOR: f64 = 1.5;
pub const INSIDE_INFLATION: f64 = 1.05;
pub const BETWEEN_RADIUS: f64 = 0.3;
pub const VIEW_MARGIN: f64 = 0.1;

/// Standing observer position used when no viewpoint is given.
pub const DEFAULT_VIEWPOINT: Vec3 = Vec3::new(0.0, -10.0, 1.6);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationType {
    Closest,
    Farthest,
    OnTopOf,
    Under,
    Above,
    Below,
    NextTo,
    Between,
    LeftOf,
    RightOf,
    InFrontOf,
    Behind,
    Inside,
}

impl RelationType {
    pub const ALL: [RelationType; 13] = [
        RelationType::Closest,
        RelationType::Farthest,
        RelationType::OnTopOf,
        RelationType::Under,
        RelationType::Above,
        RelationType::Below,
        RelationType::NextTo,
        RelationType::Between,
        RelationType::LeftOf,
        RelationType::RightOf,
        RelationType::InFrontOf,
        RelationType::Behind,
        RelationType::Inside,
    ];

    pub const COUNT: usize = Self::ALL.len();

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Whether the relation depends on where the observer stands.
    pub fn is_view_dependent(self) -> bool {
        matches!(
            self,
            RelationType::LeftOf | RelationType::RightOf | RelationType::InFrontOf | RelationType::Behind
        )
    }

    /// Relation that holds for (o, s) whenever this one holds for (s, o).
    pub fn converse(self) -> Option<Self> {
        use RelationType::*;
        match self {
            OnTopOf => Some(Under),
            Under => Some(OnTopOf),
            Above => Some(Below),
            Below => Some(Above),
            LeftOf => Some(RightOf),
            RightOf => Some(LeftOf),
            InFrontOf => Some(Behind),
            Behind => Some(InFrontOf),
            NextTo => Some(NextTo),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RelationInstance {
    pub subject_id: i64,
    pub object_id: i64,
    pub relation: RelationType,
    pub context_ids: Vec<i64>,
}

fn on_top_of(s: &SceneObject, o: &SceneObject) -> bool {
    let gap = s.bbox.min().z - o.bbox.max().z;
    let smaller = s.bbox.footprint_area().min(o.bbox.footprint_area());
    gap.abs() <= CONTACT_GAP && s.bbox.footprint_overlap(&o.bbox) >= SUPPORT_OVERLAP * smaller
}

fn above(s: &SceneObject, o: &SceneObject) -> bool {
    s.center().z - o.center().z > CONTACT_GAP
        && s.bbox.footprint_overlap(&o.bbox) > 0.0
        && s.bbox.min().z - o.bbox.max().z > CONTACT_GAP
}

fn stacked(s: &SceneObject, o: &SceneObject) -> bool {
    on_top_of(s, o) || on_top_of(o, s) || above(s, o) || above(o, s)
}

fn next_to(s: &SceneObject, o: &SceneObject) -> bool {
    distance(s, o) <= NEXT_TO_FACTOR * (s.bbox.half_diagonal() + o.bbox.half_diagonal()) && !stacked(s, o)
}

fn inside(s: &SceneObject, o: &SceneObject) -> bool {
    o.bbox.inflated(INSIDE_INFLATION).contains_box(&s.bbox)
}

/// Distance from `p` to the segment `a`-`b`, if its projection falls strictly
/// inside the segment.
fn segment_distance(p: Vec3, a: Vec3, b: Vec3) -> Option<f64> {
    let ab = b - a;
    let len2 = ab.dot(ab);
    if len2 == 0.0 {
        return None;
    }
    let t = (p - a).dot(ab) / len2;
    if t <= 0.0 || t >= 1.0 {
        return None;
    }
    Some((p - (a + ab * t)).norm())
}

/// Third objects `c` such that `s` lies between `o` and `c`, sorted by id.
pub fn between_contexts(s: &SceneObject, o: &SceneObject, scene: &Scene) -> Vec<i64> {
    let mut ids: Vec<i64> = scene
        .objects
        .iter()
        .filter(|c| c.id != s.id && c.id != o.id)
        .filter(|c| segment_distance(s.center(), o.center(), c.center()).is_some_and(|d| d <= BETWEEN_RADIUS))
        .map(|c| c.id)
        .collect();
    ids.sort_unstable();
    ids
}

/// Forward and right unit vectors of an observer looking at the scene centroid.
fn view_frame(scene: &Scene, viewpoint: Vec3) -> (Vec3, Vec3) {
    let d = scene.centroid() - viewpoint;
    let h = Vec3::new(d.x, d.y, 0.0);
    let n = h.norm();
    let fwd = if n > 1e-9 {
        h * (1.0 / n)
    } else {
        Vec3::new(0.0, 1.0, 0.0)
    };
    let right = Vec3::new(fwd.y, -fwd.x, 0.0);
    (fwd, right)
}

enum Extreme {
    Min,
    Max,
}

fn is_unique_extreme(s: &SceneObject, o: &SceneObject, scene: &Scene, which: Extreme) -> bool {
    let cands: Vec<&SceneObject> = scene
        .objects
        .iter()
        .filter(|c| c.id != o.id && c.class_label == s.class_label)
        .collect();
    if cands.len() < 2 {
        return false;
    }
    let ds = distance(s, o);
    cands.iter().filter(|c| c.id != s.id).all(|c| {
        let dc = distance(c, o);
        match which {
            Extreme::Min => ds < dc,
            Extreme::Max => ds > dc,
        }
    })
}

/// Every relation whose predicate holds for (subject, object).
pub fn classify_pair(
    subject: &SceneObject,
    object: &SceneObject,
    scene: &Scene,
    viewpoint: Vec3,
) -> Result<BTreeSet<RelationType>> {
    use RelationType::*;
    let s = scene.object(subject.id)?;
    let o = scene.object(object.id)?;
    let mut out = BTreeSet::new();
    if s.id == o.id {
        return Ok(out);
    }
    if is_unique_extreme(s, o, scene, Extreme::Min) {
        out.insert(Closest);
    }
    if is_unique_extreme(s, o, scene, Extreme::Max) {
        out.insert(Farthest);
    }
    if on_top_of(s, o) {
        out.insert(OnTopOf);
    }
    if on_top_of(o, s) {
        out.insert(Under);
    }
    if above(s, o) {
        out.insert(Above);
    }
    if above(o, s) {
        out.insert(Below);
    }
    if next_to(s, o) {
        out.insert(NextTo);
    }
    if !between_contexts(s, o, scene).is_empty() {
        out.insert(Between);
    }
    if inside(s, o) {
        out.insert(Inside);
    }
    let (fwd, right) = view_frame(scene, viewpoint);
    let off = s.center() - o.center();
    let lateral = off.dot(right);
    let depth = off.dot(fwd);
    if lateral < -VIEW_MARGIN {
        out.insert(LeftOf);
    }
    if lateral > VIEW_MARGIN {
        out.insert(RightOf);
    }
    if depth < -VIEW_MARGIN {
        out.insert(InFrontOf);
    }
    if depth > VIEW_MARGIN {
        out.insert(Behind);
    }
    Ok(out)
}

/// Relations between objects of distinct entities of one utterance.
pub fn extract_relations(u: &GroundedUtterance, s: &Scene, viewpoint: Vec3) -> Result<Vec<RelationInstance>> {
    let mut found = BTreeSet::new();
    for (i, ei) in u.entities.iter().enumerate() {
        for (j, ej) in u.entities.iter().enumerate() {
            if i == j {
                continue;
            }
            for &a in &ei.object_ids {
                for &b in &ej.object_ids {
                    if a == b {
                        continue;
                    }
                    let (oa, ob) = (s.object(a)?, s.object(b)?);
                    for rel in classify_pair(oa, ob, s, viewpoint)? {
                        let context_ids = if rel == RelationType::Between {
                            between_contexts(oa, ob, s).into_iter().take(1).collect()
                        } else {
                            Vec::new()
                        };
                        found.insert(RelationInstance {
                            subject_id: a,
                            object_id: b,
                            relation: rel,
                            context_ids,
                        });
                    }
                }
            }
        }
    }
    Ok(found.into_iter().collect())
}

/// Relation counts over a corpus, observed from the default viewpoint.
/// Every relation type appears as a key.
pub fn relation_breakdown(
    corpus: &[GroundedUtterance],
    scenes: &HashMap<String, Scene>,
) -> Result<BTreeMap<RelationType, usize>> {
    let mut counts: BTreeMap<RelationType, usize> = RelationType::ALL.iter().map(|&r| (r, 0)).collect();
    for u in corpus {
        let s = scenes
            .get(&u.scene_id)
            .ok_or_else(|| Error::MissingScene(u.scene_id.clone()))?;
        for inst in extract_relations(u, s, DEFAULT_VIEWPOINT)? {
            *counts.entry(inst.relation).or_insert(0) += 1;
        }
    }
    Ok(counts)
}

/// Every (relation, anchor) pair that holds for the target and for no
/// same-class distractor paired with the same anchor, in deterministic order.
pub fn contrastive_candidates(u: &GroundedUtterance, s: &Scene) -> Vec<(RelationType, i64)> {
    let Ok(target) = s.object(u.target_object) else {
        return Vec::new();
    };
    let distractors: Vec<&SceneObject> = same_class_distractors(s, target.id)
        .unwrap_or_default()
        .iter()
        .filter_map(|id| s.object(*id).ok())
        .collect();
    let mut out = Vec::new();
    for anchor_id in u.anchor_ids() {
        let Ok(anchor) = s.object(anchor_id) else { continue };
        let Ok(rels) = classify_pair(target, anchor, s, DEFAULT_VIEWPOINT) else {
            continue;
        };
        for rel in rels {
            let shared = distractors.iter().any(|d| {
                d.id != anchor_id && classify_pair(d, anchor, s, DEFAULT_VIEWPOINT).is_ok_and(|r| r.contains(&rel))
            });
            if !shared {
                out.push((rel, anchor_id));
            }
        }
    }
    out
}

/// Seeded uniform draw from [`contrastive_candidates`].
pub fn sample_contrastive_relation(u: &GroundedUtterance, s: &Scene, rng_seed: u64) -> Option<(RelationType, i64)> {
    let cands = contrastive_candidates(u, s);
    if cands.is_empty() {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    Some(cands[rng.gen_range(0..cands.len())])
}
