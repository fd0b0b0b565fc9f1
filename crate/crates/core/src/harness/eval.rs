//! Referential accuracy by split, anchor F1, and anchor knockouts.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::generate::Corpus;
use crate::annotation::{
    anchors_only_scene, build_targets, lesion_anchor_objects, lesion_anchor_words, GroundedUtterance, UNK,
};
use crate::error::{Error, Result};
use crate::listener::{F1Counts, Listener};
use crate::metrics::{bleu4, cider, rouge_l, DocumentFrequency};
use crate::scalar::Scalar;
use crate::scene::{same_class_distractors, Scene};
use crate::speaker::Speaker;

/// A target with more than this many same-class distractors is "hard".
pub const HARD_DISTRACTORS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KnockoutMode {
    LesionAnchorObjects,
    LesionAnchorWords,
    AnchorsOnly,
}

impl KnockoutMode {
    pub const ALL: [KnockoutMode; 3] = [
        KnockoutMode::LesionAnchorObjects,
        KnockoutMode::LesionAnchorWords,
        KnockoutMode::AnchorsOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KnockoutMode::LesionAnchorObjects => "lesion-anchor-objects",
            KnockoutMode::LesionAnchorWords => "lesion-anchor-words",
            KnockoutMode::AnchorsOnly => "anchors-only",
        }
    }

    /// The transformed (utterance, scene) pair this mode evaluates on.
    pub fn apply(self, u: &GroundedUtterance, s: &Scene) -> (GroundedUtterance, Scene) {
        match self {
            KnockoutMode::LesionAnchorObjects => (u.clone(), lesion_anchor_objects(u, s)),
            KnockoutMode::LesionAnchorWords => (lesion_anchor_words(u, UNK), s.clone()),
            KnockoutMode::AnchorsOnly => (u.clone(), anchors_only_scene(u, s)),
        }
    }
}

impl fmt::Display for KnockoutMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KnockoutMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        KnockoutMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown knockout mode {s:?}")))
    }
}

/// Outcome of one utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleResult {
    pub id: String,
    pub predicted: i64,
    pub target: i64,
    pub correct: bool,
    pub hard: bool,
    pub view_dependent: bool,
}

/// Correct and total counts of one split.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
}

impl Tally {
    fn add(&mut self, ok: bool) {
        self.correct += usize::from(ok);
        self.total += 1;
    }

    pub fn acc(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub overall_acc: f64,
    #[serde(default)]
    pub knockout: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub overall_acc: f64,
    pub easy_acc: f64,
    pub hard_acc: f64,
    pub view_dep_acc: f64,
    pub view_indep_acc: f64,
    pub anchor_f1: f64,
    pub counts: BTreeMap<String, Tally>,
    #[serde(default)]
    pub per_seed: Vec<SeedResult>,
    #[serde(default)]
    pub knockout: BTreeMap<String, f64>,
}

impl EvalReport {
    /// Rebuilds the report from per-example outcomes.
    pub fn from_results(results: &[ExampleResult], f1: F1Counts) -> Self {
        let mut t: BTreeMap<&str, Tally> = ["overall", "easy", "hard", "view_dep", "view_indep"]
            .into_iter()
            .map(|k| (k, Tally::default()))
            .collect();
        for r in results {
            t.get_mut("overall").unwrap().add(r.correct);
            t.get_mut(if r.hard { "hard" } else { "easy" }).unwrap().add(r.correct);
            t.get_mut(if r.view_dependent { "view_dep" } else { "view_indep" })
                .unwrap()
                .add(r.correct);
        }
        EvalReport {
            n: results.len(),
            overall_acc: t["overall"].acc(),
            easy_acc: t["easy"].acc(),
            hard_acc: t["hard"].acc(),
            view_dep_acc: t["view_dep"].acc(),
            view_indep_acc: t["view_indep"].acc(),
            anchor_f1: f1.f1(),
            counts: t.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            per_seed: Vec::new(),
            knockout: BTreeMap::new(),
        }
    }

    /// `metric,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        let mut row = |k: &str, v: f64| out.push_str(&format!("{k},{v}\n"));
        row("n", self.n as f64);
        row("overall_acc", self.overall_acc);
        row("easy_acc", self.easy_acc);
        row("hard_acc", self.hard_acc);
        row("view_dep_acc", self.view_dep_acc);
        row("view_indep_acc", self.view_indep_acc);
        row("anchor_f1", self.anchor_f1);
        for (k, v) in &self.knockout {
            row(&format!("knockout.{k}"), *v);
        }
        for s in &self.per_seed {
            row(&format!("seed{}.overall_acc", s.seed), s.overall_acc);
            for (k, v) in &s.knockout {
                row(&format!("seed{}.knockout.{k}", s.seed), *v);
            }
        }
        out
    }
}

/// Anything that picks one object index per (scene, utterance).
pub trait Referrer {
    fn choose(&self, scene: &Scene, u: &GroundedUtterance) -> Result<usize>;

    /// Anchor logits for F1, when the model has them.
    fn anchor_logits(&self, _scene: &Scene, _u: &GroundedUtterance) -> Result<Option<Vec<f64>>> {
        Ok(None)
    }
}

impl<F: Scalar> Referrer for Listener<F> {
    fn choose(&self, scene: &Scene, u: &GroundedUtterance) -> Result<usize> {
        Ok(self.predict(scene, &u.tokens)?.choice())
    }

    fn anchor_logits(&self, scene: &Scene, u: &GroundedUtterance) -> Result<Option<Vec<f64>>> {
        let p = self.predict(scene, &u.tokens)?;
        Ok(Some(p.anchor_logits.iter().map(|x| x.to_f64_lossy()).collect()))
    }
}

fn is_hard(s: &Scene, target: i64) -> Result<bool> {
    Ok(same_class_distractors(s, target)?.len() > HARD_DISTRACTORS)
}

fn score_one(
    model: &impl Referrer,
    u: &GroundedUtterance,
    s: &Scene,
    split_scene: &Scene,
    f1: Option<&mut F1Counts>,
) -> Result<ExampleResult> {
    let target_index = s
        .index_of(u.target_object)
        .ok_or(Error::UnknownObject(u.target_object))?;
    let chosen = model.choose(s, u)?;
    if let Some(c) = f1 {
        if let Some(logits) = model.anchor_logits(s, u)? {
            let t = build_targets(u, s, false)?;
            c.add(&logits, &t.y_anc, 0.5);
        }
    }
    Ok(ExampleResult {
        id: u.id.clone(),
        predicted: s.objects[chosen.min(s.len() - 1)].id,
        target: u.target_object,
        correct: chosen == target_index,
        hard: is_hard(split_scene, u.target_object)?,
        view_dependent: u.view_dependent,
    })
}

/// Per-example outcomes in corpus order. With a knockout mode, examples are
/// transformed first; splits always follow the untouched scene.
pub fn evaluate_examples(
    model: &impl Referrer,
    corpus: &Corpus,
    mode: Option<KnockoutMode>,
) -> Result<(Vec<ExampleResult>, F1Counts)> {
    let scenes = corpus.scene_map();
    let mut f1 = F1Counts::default();
    let mut out = Vec::with_capacity(corpus.utterances.len());
    for u in &corpus.utterances {
        let s = scenes
            .get(&u.scene_id)
            .ok_or_else(|| Error::MissingScene(u.scene_id.clone()))?;
        let r = match mode {
            None => score_one(model, u, s, s, Some(&mut f1))?,
            Some(m) => {
                let (u2, s2) = m.apply(u, s);
                score_one(model, &u2, &s2, s, None)?
            }
        };
        out.push(r);
    }
    Ok((out, f1))
}

pub fn evaluate(model: &impl Referrer, corpus: &Corpus) -> Result<EvalReport> {
    let (results, f1) = evaluate_examples(model, corpus, None)?;
    Ok(EvalReport::from_results(&results, f1))
}

/// Accuracy after applying `mode` to every example.
pub fn knockout(model: &impl Referrer, corpus: &Corpus, mode: KnockoutMode) -> Result<f64> {
    let (results, _) = evaluate_examples(model, corpus, Some(mode))?;
    let ok = results.iter().filter(|r| r.correct).count();
    Ok(if results.is_empty() {
        0.0
    } else {
        ok as f64 / results.len() as f64
    })
}

/// Plain evaluation plus every knockout mode.
pub fn evaluate_with_knockouts(model: &impl Referrer, corpus: &Corpus) -> Result<EvalReport> {
    let mut report = evaluate(model, corpus)?;
    for m in KnockoutMode::ALL {
        report.knockout.insert(m.name().into(), knockout(model, corpus, m)?);
    }
    Ok(report)
}

/// One generated caption.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub id: String,
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionReport {
    pub n: usize,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
}

impl CaptionReport {
    pub fn to_csv(&self) -> String {
        format!(
            "metric,value\nn,{}\nbleu4,{}\nrouge_l,{}\ncider,{}\n",
            self.n, self.bleu4, self.rouge_l, self.cider
        )
    }
}

/// First utterance id and every reference caption for one target.
type ReferenceGroup = (String, Vec<Vec<String>>);

/// Captions every distinct (scene, target) pair of `corpus` and scores them
/// against all utterances written for that pair.
pub fn evaluate_speaker<F: Scalar>(
    model: &Speaker<F>,
    corpus: &Corpus,
    max_len: usize,
) -> Result<(CaptionReport, Vec<Caption>)> {
    let scenes = corpus.scene_map();
    let mut groups: BTreeMap<(String, i64), ReferenceGroup> = BTreeMap::new();
    for u in &corpus.utterances {
        groups
            .entry((u.scene_id.clone(), u.target_object))
            .or_insert_with(|| (u.id.clone(), Vec::new()))
            .1
            .push(u.tokens.clone());
    }
    let mut captions = Vec::with_capacity(groups.len());
    let mut references = Vec::with_capacity(groups.len());
    for ((scene_id, target), (id, refs)) in groups {
        let s = scenes.get(&scene_id).ok_or(Error::MissingScene(scene_id))?;
        let ti = s.index_of(target).ok_or(Error::UnknownObject(target))?;
        captions.push(Caption {
            id,
            tokens: model.greedy_decode(s, ti, max_len)?,
        });
        references.push(refs);
    }
    let cands: Vec<Vec<String>> = captions.iter().map(|c| c.tokens.clone()).collect();
    let df = DocumentFrequency::from_references(&references);
    let report = CaptionReport {
        n: cands.len(),
        bleu4: bleu4(&cands, &references)?,
        rouge_l: rouge_l(&cands, &references)?,
        cider: cider(&cands, &references, &df)?,
    };
    Ok((report, captions))
}
