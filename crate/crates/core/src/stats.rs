//! Corpus-level dataset statistics over annotated utterances.
//!
//! "Annotated objects" counts object references: an object referenced by two
//! entities of the same utterance counts twice.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annotation::GroundedUtterance;
use crate::error::{Error, Result};
use crate::scene::Scene;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_utterances: usize,
    pub n_annotated_objects: usize,
    pub n_entities: usize,
    pub avg_objects_per_entity: f64,
    pub unique_anchor_fraction: f64,
    pub entities_per_utterance_histogram: BTreeMap<usize, usize>,
    pub anchor_class_frequency: BTreeMap<String, usize>,
    pub mean_tokens_per_utterance: f64,
}

/// Key `k` maps to the number of utterances with exactly `k` entities.
pub fn entity_histogram(corpus: &[GroundedUtterance]) -> BTreeMap<usize, usize> {
    let mut h = BTreeMap::new();
    for u in corpus {
        *h.entry(u.entities.len()).or_insert(0) += 1;
    }
    h
}

pub fn compute_stats(corpus: &[GroundedUtterance], scenes: &HashMap<String, Scene>) -> Result<CorpusStats> {
    let mut st = CorpusStats {
        entities_per_utterance_histogram: entity_histogram(corpus),
        n_utterances: corpus.len(),
        ..Default::default()
    };
    let mut n_tokens = 0usize;
    let mut anchor_refs = 0usize;
    let mut unique_anchor_refs = 0usize;
    for u in corpus {
        let scene = scenes
            .get(&u.scene_id)
            .ok_or_else(|| Error::MissingScene(u.scene_id.clone()))?;
        u.validate_against(scene)?;
        n_tokens += u.tokens.len();
        st.n_entities += u.entities.len();
        for e in &u.entities {
            st.n_annotated_objects += e.object_ids.len();
        }
        for e in u.anchor_entities() {
            for &id in e.object_ids.iter().filter(|&&id| id != u.target_object) {
                let class = &scene.object(id)?.class_label;
                anchor_refs += 1;
                if scene.class_count(class) == 1 {
                    unique_anchor_refs += 1;
                }
                *st.anchor_class_frequency.entry(class.clone()).or_insert(0) += 1;
            }
        }
    }
    st.avg_objects_per_entity = ratio(st.n_annotated_objects, st.n_entities);
    st.unique_anchor_fraction = ratio(unique_anchor_refs, anchor_refs);
    st.mean_tokens_per_utterance = ratio(n_tokens, corpus.len());
    Ok(st)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Writes `stats.json` and `stats.csv` into `dir`.
pub fn emit_report(stats: &CorpusStats, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut json = serde_json::to_string_pretty(stats)?;
    json.push('\n');
    fs::write(dir.join("stats.json"), json)?;
    fs::write(dir.join("stats.csv"), render_csv(stats))?;
    Ok(())
}

/// `metric,value` rows; map entries are flattened as `field.key`.
pub fn render_csv(stats: &CorpusStats) -> String {
    let mut rows: Vec<(String, String)> = vec![
        ("n_utterances".into(), stats.n_utterances.to_string()),
        ("n_annotated_objects".into(), stats.n_annotated_objects.to_string()),
        ("n_entities".into(), stats.n_entities.to_string()),
        (
            "avg_objects_per_entity".into(),
            stats.avg_objects_per_entity.to_string(),
        ),
        (
            "unique_anchor_fraction".into(),
            stats.unique_anchor_fraction.to_string(),
        ),
        (
            "mean_tokens_per_utterance".into(),
            stats.mean_tokens_per_utterance.to_string(),
        ),
    ];
    for (k, v) in &stats.entities_per_utterance_histogram {
        rows.push((format!("entities_per_utterance_histogram.{k}"), v.to_string()));
    }
    for (k, v) in &stats.anchor_class_frequency {
        rows.push((format!("anchor_class_frequency.{k}"), v.to_string()));
    }
    let mut out = String::from("metric,value\n");
    for (k, v) in rows {
        out.push_str(&csv_field(&k));
        out.push(',');
        out.push_str(&v);
        out.push('\n');
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
