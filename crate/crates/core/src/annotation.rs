//! Scan entities: token spans of a referential utterance linked to the scene
//! objects they denote, and the supervision targets derived from them.

use std::collections::BTreeSet;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, RecordError, Result};
use crate::scene::{same_class_distractors, Scene};

/// Token placed in lesioned anchor positions.
pub const UNK: &str = "<unk>";

/// Half-open token range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
}

impl TokenSpan {
    pub fn new(start: usize, end: usize) -> Self {
        TokenSpan { start, end }
    }

    pub fn contains(&self, token: usize) -> bool {
        (self.start..self.end).contains(&token)
    }

    pub fn overlaps(&self, other: &TokenSpan) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

impl Serialize for TokenSpan {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        [self.start, self.end].serialize(s)
    }
}

impl<'de> Deserialize<'de> for TokenSpan {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [start, end] = <[usize; 2]>::deserialize(d)?;
        Ok(TokenSpan { start, end })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanEntity {
    pub span: TokenSpan,
    pub object_ids: Vec<i64>,
    pub is_target: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundedUtterance {
    pub id: String,
    pub scene_id: String,
    pub tokens: Vec<String>,
    pub target_object: i64,
    pub view_dependent: bool,
    pub entities: Vec<ScanEntity>,
}

impl GroundedUtterance {
    /// Checks the structural invariants that do not need the scene.
    pub fn validate(&self) -> Result<(), RecordError> {
        let n = self.tokens.len();
        if n == 0 {
            return Err(RecordError::EmptyTokens);
        }
        let mut n_targets = 0;
        for e in &self.entities {
            if e.span.start >= e.span.end || e.span.end > n {
                return Err(RecordError::SpanOutOfRange {
                    start: e.span.start,
                    end: e.span.end,
                    n_tokens: n,
                });
            }
            let distinct: BTreeSet<_> = e.object_ids.iter().collect();
            if e.object_ids.is_empty() || distinct.len() != e.object_ids.len() {
                return Err(RecordError::BadObjectList);
            }
            if e.is_target {
                n_targets += 1;
                if e.object_ids != [self.target_object] {
                    return Err(RecordError::TargetMismatch {
                        expected: self.target_object,
                    });
                }
            }
        }
        match n_targets {
            0 => return Err(RecordError::NoTarget),
            1 => {}
            _ => return Err(RecordError::MultipleTargets),
        }
        for (i, a) in self.entities.iter().enumerate() {
            for b in &self.entities[i + 1..] {
                if a.span.overlaps(&b.span) {
                    return Err(RecordError::OverlappingSpans(
                        a.span.start,
                        a.span.end,
                        b.span.start,
                        b.span.end,
                    ));
                }
            }
        }
        Ok(())
    }

    /// Structural validation plus existence of every referenced object.
    pub fn validate_against(&self, scene: &Scene) -> Result<()> {
        self.validate()?;
        if scene.scene_id != self.scene_id {
            return Err(Error::MissingScene(self.scene_id.clone()));
        }
        for id in self.entities.iter().flat_map(|e| &e.object_ids) {
            if !scene.contains(*id) {
                return Err(Error::UnknownObject(*id));
            }
        }
        Ok(())
    }

    pub fn target_entity(&self) -> Option<&ScanEntity> {
        self.entities.iter().find(|e| e.is_target)
    }

    pub fn anchor_entities(&self) -> impl Iterator<Item = &ScanEntity> {
        self.entities.iter().filter(|e| !e.is_target)
    }

    /// Objects referenced by non-target entities, never including the target.
    pub fn anchor_ids(&self) -> BTreeSet<i64> {
        self.anchor_entities()
            .flat_map(|e| e.object_ids.iter().copied())
            .filter(|&id| id != self.target_object)
            .collect()
    }

    pub fn has_anchors(&self) -> bool {
        !self.anchor_ids().is_empty()
    }

    /// Entity whose span covers token position `j`.
    pub fn entity_at(&self, j: usize) -> Option<&ScanEntity> {
        self.entities.iter().find(|e| e.span.contains(j))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupervisionTargets {
    pub target_index: usize,
    pub y_anc: Vec<u8>,
    pub y_dis: Vec<u8>,
    /// Row per object; `N` columns, or `N + 1` with column 0 reserved for `<NM>`.
    pub y_attn: Vec<Vec<u8>>,
    pub y_men: Vec<u8>,
    pub nm_token: bool,
}

impl SupervisionTargets {
    pub fn n_objects(&self) -> usize {
        self.y_anc.len()
    }

    pub fn n_columns(&self) -> usize {
        self.y_attn.first().map_or(0, Vec::len)
    }
}

/// Parses annotation JSONL. Blank lines are skipped; errors carry the
/// 1-based line number.
pub fn parse_annotations(reader: impl BufRead) -> Result<Vec<GroundedUtterance>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let u: GroundedUtterance = serde_json::from_str(&line).map_err(|e| Error::Record {
            line: line_no,
            source: RecordError::Malformed(e.to_string()),
        })?;
        u.validate().map_err(|source| Error::Record { line: line_no, source })?;
        out.push(u);
    }
    Ok(out)
}

/// One JSON object per line, fields in declaration order.
pub fn serialize_annotations(corpus: &[GroundedUtterance]) -> String {
    let mut out = String::new();
    for u in corpus {
        out.push_str(&serde_json::to_string(u).expect("annotations always serialize"));
        out.push('\n');
    }
    out
}

/// Builds every per-object supervision signal for one utterance.
pub fn build_targets(u: &GroundedUtterance, s: &Scene, nm_token: bool) -> Result<SupervisionTargets> {
    let m = s.len();
    let n = u.tokens.len();
    let target_index = s
        .index_of(u.target_object)
        .ok_or(Error::UnknownObject(u.target_object))?;

    let mut entity_of_object: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (k, e) in u.entities.iter().enumerate() {
        for &id in &e.object_ids {
            let i = s.index_of(id).ok_or(Error::UnknownObject(id))?;
            entity_of_object[i].push(k);
        }
    }

    let anchors = u.anchor_ids();
    let distractors = same_class_distractors(s, u.target_object)?;
    let offset = usize::from(nm_token);

    let mut y_anc = vec![0u8; m];
    let mut y_dis = vec![0u8; m];
    let mut y_men = vec![0u8; m];
    let mut y_attn = vec![vec![0u8; n + offset]; m];
    for (i, obj) in s.objects.iter().enumerate() {
        y_anc[i] = u8::from(anchors.contains(&obj.id));
        y_dis[i] = u8::from(distractors.contains(&obj.id));
        y_men[i] = u8::from(!entity_of_object[i].is_empty());
        for &k in &entity_of_object[i] {
            let span = u.entities[k].span;
            for cell in &mut y_attn[i][span.start + offset..span.end + offset] {
                *cell = 1;
            }
        }
        if nm_token && entity_of_object[i].is_empty() {
            y_attn[i][0] = 1;
        }
    }
    Ok(SupervisionTargets {
        target_index,
        y_anc,
        y_dis,
        y_attn,
        y_men,
        nm_token,
    })
}

/// Replaces every token inside a non-target entity span with `unk`.
pub fn lesion_anchor_words(u: &GroundedUtterance, unk: &str) -> GroundedUtterance {
    let mut out = u.clone();
    for e in u.anchor_entities() {
        for tok in &mut out.tokens[e.span.start..e.span.end] {
            *tok = unk.to_string();
        }
    }
    out
}

/// Scene without the anchor objects. The target is always kept.
pub fn lesion_anchor_objects(u: &GroundedUtterance, s: &Scene) -> Scene {
    let anchors = u.anchor_ids();
    s.retain_ids(|id| id == u.target_object || !anchors.contains(&id))
}

/// Scene restricted to the target, its anchors and its same-class distractors.
pub fn anchors_only_scene(u: &GroundedUtterance, s: &Scene) -> Scene {
    let anchors = u.anchor_ids();
    let distractors = same_class_distractors(s, u.target_object).unwrap_or_default();
    s.retain_ids(|id| id == u.target_object || anchors.contains(&id) || distractors.contains(&id))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Box3, SceneObject, Vec3};

    pub(crate) fn scene(classes: &[&str]) -> Scene {
        let objects = classes
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let b = Box3::axis_aligned(Vec3::new(i as f64 * 2.0, 0.0, 0.5), Vec3::new(1.0, 1.0, 1.0)).unwrap();
                SceneObject::new(i as i64, *c, b)
            })
            .collect();
        Scene::new("s0", objects).unwrap()
    }

    fn utt(tokens: &[&str], target: i64, entities: Vec<ScanEntity>) -> GroundedUtterance {
        GroundedUtterance {
            id: "u0".into(),
            scene_id: "s0".into(),
            tokens: tokens.iter().map(|t| t.to_string()).collect(),
            target_object: target,
            view_dependent: false,
            entities,
        }
    }

    fn ent(start: usize, end: usize, ids: &[i64], is_target: bool) -> ScanEntity {
        ScanEntity {
            span: TokenSpan::new(start, end),
            object_ids: ids.to_vec(),
            is_target,
        }
    }

    #[test]
    fn targets_match_hand_construction() {
        let s = scene(&["door", "chair", "chair", "door"]);
        let u = utt(
            &["the", "chair", "near", "the", "two", "doors"],
            2,
            vec![ent(1, 2, &[2], true), ent(4, 6, &[0, 3], false)],
        );
        let t = build_targets(&u, &s, false).unwrap();
        assert_eq!(t.y_anc, vec![1, 0, 0, 1]);
        assert_eq!(t.y_men, vec![1, 0, 1, 1]);
        assert_eq!(t.y_dis, vec![0, 1, 0, 0]);
        assert_eq!(t.target_index, 2);
        assert_eq!(t.y_attn[2], vec![0, 1, 0, 0, 0, 0]);
        assert_eq!(t.y_attn[0], vec![0, 0, 0, 0, 1, 1]);
        assert_eq!(t.y_attn[1], vec![0; 6]);
    }

    #[test]
    fn no_anchor_utterance_has_zero_anchor_targets() {
        let s = scene(&["chair", "table"]);
        let u = utt(&["the", "chair"], 0, vec![ent(0, 2, &[0], true)]);
        let t = build_targets(&u, &s, false).unwrap();
        assert_eq!(t.y_anc, vec![0, 0]);
    }

    #[test]
    fn nm_column_marks_unmentioned_objects() {
        let s = scene(&["chair", "table", "lamp"]);
        let u = utt(
            &["the", "chair", "by", "the", "table"],
            0,
            vec![ent(0, 2, &[0], true), ent(3, 5, &[1], false)],
        );
        let t = build_targets(&u, &s, true).unwrap();
        assert_eq!(t.n_columns(), 6);
        assert_eq!(t.y_attn[2], vec![1, 0, 0, 0, 0, 0]);
        assert_eq!(t.y_attn[0], vec![0, 1, 1, 0, 0, 0]);
        assert_eq!(t.y_attn[1], vec![0, 0, 0, 0, 1, 1]);
    }

    #[test]
    fn unknown_object_is_reported() {
        let s = scene(&["chair"]);
        let u = utt(&["the", "chair"], 5, vec![ent(0, 2, &[5], true)]);
        assert!(matches!(build_targets(&u, &s, false), Err(Error::UnknownObject(5))));
        assert!(matches!(u.validate_against(&s), Err(Error::UnknownObject(5))));
    }

    #[test]
    fn parse_reports_line_numbers() {
        let good = serialize_annotations(&[utt(&["the", "chair"], 0, vec![ent(0, 2, &[0], true)])]);
        let out_of_range = r#"{"id":"b","scene_id":"s0","tokens":["a"],"target_object":0,"view_dependent":false,"entities":[{"span":[0,3],"object_ids":[0],"is_target":true}]}"#;
        let two_targets = r#"{"id":"c","scene_id":"s0","tokens":["a","b"],"target_object":0,"view_dependent":false,"entities":[{"span":[0,1],"object_ids":[0],"is_target":true},{"span":[1,2],"object_ids":[0],"is_target":true}]}"#;
        let overlap = r#"{"id":"d","scene_id":"s0","tokens":["a","b","c"],"target_object":0,"view_dependent":false,"entities":[{"span":[0,2],"object_ids":[0],"is_target":true},{"span":[1,3],"object_ids":[1],"is_target":false}]}"#;

        let text = format!("{good}\n{out_of_range}\n");
        match parse_annotations(text.as_bytes()) {
            Err(Error::Record {
                line: 3,
                source: RecordError::SpanOutOfRange { end: 3, .. },
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
        match parse_annotations(format!("{good}{two_targets}\n").as_bytes()) {
            Err(Error::Record {
                line: 2,
                source: RecordError::MultipleTargets,
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
        match parse_annotations(overlap.as_bytes()) {
            Err(Error::Record {
                line: 1,
                source: RecordError::OverlappingSpans(..),
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
        match parse_annotations("{not json".as_bytes()) {
            Err(Error::Record {
                line: 1,
                source: RecordError::Malformed(_),
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn serialized_field_order_is_stable() {
        let u = utt(&["the", "chair"], 0, vec![ent(0, 2, &[0], true)]);
        assert_eq!(
            serialize_annotations(&[u]),
            "{\"id\":\"u0\",\"scene_id\":\"s0\",\"tokens\":[\"the\",\"chair\"],\"target_object\":0,\"view_dependent\":false,\"entities\":[{\"span\":[0,2],\"object_ids\":[0],\"is_target\":true}]}\n"
        );
    }

    #[test]
    fn word_lesioning() {
        let u = utt(
            &["the", "chair", "near", "the", "door"],
            0,
            vec![ent(0, 2, &[0], true), ent(3, 5, &[1], false)],
        );
        let l = lesion_anchor_words(&u, UNK);
        assert_eq!(l.tokens, ["the", "chair", "near", UNK, UNK]);
        assert_eq!(l.entities, u.entities);
        assert_eq!(lesion_anchor_words(&l, UNK), l);
        let plain = utt(&["the", "chair"], 0, vec![ent(0, 2, &[0], true)]);
        assert_eq!(lesion_anchor_words(&plain, UNK), plain);
    }

    #[test]
    fn object_lesioning() {
        let s = scene(&["door", "chair", "lamp", "door", "sofa"]);
        let u = utt(
            &["the", "chair", "between", "the", "doors"],
            1,
            vec![ent(0, 2, &[1], true), ent(3, 5, &[0, 3], false)],
        );
        let l = lesion_anchor_objects(&u, &s);
        assert_eq!(l.objects.iter().map(|o| o.id).collect::<Vec<_>>(), vec![1, 2, 4]);

        let plain = utt(&["the", "chair"], 1, vec![ent(0, 2, &[1], true)]);
        assert_eq!(lesion_anchor_objects(&plain, &s), s);

        // target also listed in an anchor entity survives
        let both = utt(
            &["the", "chair", "and", "the", "chair", "and", "door"],
            1,
            vec![ent(0, 2, &[1], true), ent(3, 7, &[1, 0], false)],
        );
        let l = lesion_anchor_objects(&both, &s);
        assert!(l.contains(1));
        assert!(!l.contains(0));
        assert_eq!(l.len(), 4);
    }
}
