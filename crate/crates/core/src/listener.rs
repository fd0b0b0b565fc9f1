//! Cross-attention listener: picks the referred object given a scene and a
//! tokenized utterance, with the anchor, attention-map, distractor and
//! spatial-relation auxiliary objectives.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::{build_targets, GroundedUtterance, SupervisionTargets};
use crate::autodiff::{cosine_rows, Checkpoint, ParamId, ParamStore, Tape, Tensor, Var};
use crate::encoder::ObjectEncoder;
use crate::error::{Error, Result};
use crate::layers::{CrossLayer, Dense, Mlp, Norm};
use crate::relations::{extract_relations, sample_contrastive_relation, RelationType, DEFAULT_VIEWPOINT};
use crate::scalar::Scalar;
use crate::scene::{aabb_iou, same_class_distractors, Box3, Scene};
use crate::vocab::{ClassVocab, Vocab};

fn default_d() -> usize {
    64
}
fn one() -> usize {
    1
}
fn default_anc_weight() -> f64 {
    3.0
}
fn default_attn_weight() -> f64 {
    3.0
}
fn default_dis_weight() -> f64 {
    0.5
}
fn default_rel_weight() -> f64 {
    1.0
}
fn default_max_tokens() -> usize {
    32
}

/// Listener hyperparameters. Field names double as the training config keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ListenerConfig {
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "one")]
    pub n_self_layers: usize,
    #[serde(default = "one")]
    pub n_cross_layers: usize,
    #[serde(default)]
    pub vocab_size: usize,
    #[serde(default)]
    pub n_classes: usize,
    #[serde(default = "default_anc_weight")]
    pub alpha: f64,
    #[serde(default = "default_attn_weight")]
    pub beta: f64,
    #[serde(default = "default_dis_weight")]
    pub gamma: f64,
    /// Weight of the contrastive plus spatial relation terms.
    #[serde(default = "default_rel_weight")]
    pub rel_weight: f64,
    /// Weight of the per-object class cross-entropy inside the main loss.
    #[serde(default)]
    pub class_weight: f64,
    #[serde(default)]
    pub use_nm_token: bool,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
}

impl Default for ListenerConfig {
    fn default() -> Self {
        ListenerConfig {
            d: default_d(),
            n_self_layers: 1,
            n_cross_layers: 1,
            vocab_size: 0,
            n_classes: 0,
            alpha: default_anc_weight(),
            beta: default_attn_weight(),
            gamma: default_dis_weight(),
            rel_weight: default_rel_weight(),
            class_weight: 0.0,
            use_nm_token: false,
            max_tokens: default_max_tokens(),
        }
    }
}

impl ListenerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_cross_layers == 0 || self.max_tokens == 0 {
            return Err(Error::Config(
                "d, n_cross_layers and max_tokens must be positive".into(),
            ));
        }
        if self.vocab_size == 0 || self.n_classes == 0 {
            return Err(Error::Config("vocab_size and n_classes must be positive".into()));
        }
        let weights = [self.alpha, self.beta, self.gamma, self.rel_weight, self.class_weight];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Which auxiliary objectives join the main loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuxFlags {
    pub anc: bool,
    pub attn: bool,
    pub dis: bool,
    pub rel: bool,
}

impl AuxFlags {
    pub const NONE: AuxFlags = AuxFlags {
        anc: false,
        attn: false,
        dis: false,
        rel: false,
    };

    pub fn all() -> Self {
        AuxFlags {
            anc: true,
            attn: true,
            dis: true,
            rel: true,
        }
    }

    /// Parses a comma list such as `anc,attn,dis`; empty means none.
    pub fn parse(list: &str) -> Result<Self> {
        let mut f = AuxFlags::NONE;
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item {
                "anc" => f.anc = true,
                "attn" => f.attn = true,
                "dis" => f.dis = true,
                "rel" => f.rel = true,
                other => return Err(Error::Config(format!("unknown auxiliary loss {other:?}"))),
            }
        }
        Ok(f)
    }

    pub fn label(&self) -> String {
        let names: Vec<&str> = [
            (self.anc, "anc"),
            (self.attn, "attn"),
            (self.dis, "dis"),
            (self.rel, "rel"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        names.join(",")
    }
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ListenerOutputs {
    /// Context-aware object features `[M x d]`.
    pub f_o: Var,
    /// Pre-softmax object-to-word scores of the first cross layer `[M x N']`.
    pub attn: Var,
    pub target_logits: Var,
    pub anchor_logits: Var,
    pub distractor_logits: Var,
    /// Per-object class logits `[M x n_classes]`.
    pub class_logits: Var,
}

/// Detached forward results.
#[derive(Debug, Clone, PartialEq)]
pub struct ListenerPrediction<F> {
    pub target_logits: Vec<F>,
    pub anchor_logits: Vec<F>,
    pub distractor_logits: Vec<F>,
    pub attn: Tensor<F>,
}

impl<F: Scalar> ListenerPrediction<F> {
    /// Index of the chosen object; lowest index on ties.
    pub fn choice(&self) -> usize {
        Tensor::vector(self.target_logits.clone()).argmax().unwrap_or(0)
    }
}

/// The relation drawn for the contrastive objective, as scene indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContrastiveSample {
    pub relation: RelationType,
    pub anchor: usize,
    /// Target first, then the same-class distractors.
    pub candidates: Vec<usize>,
}

/// A ground-truth relation between two scene indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RelationPair {
    pub subject: usize,
    pub object: usize,
    pub relation: RelationType,
}

/// Everything the losses need for one utterance, computed once up front.
#[derive(Debug, Clone)]
pub struct ListenerExample {
    pub id: String,
    pub scene: Scene,
    pub tokens: Vec<String>,
    pub targets: SupervisionTargets,
    pub class_ids: Vec<usize>,
    pub contrastive: Option<ContrastiveSample>,
    pub pairs: Vec<RelationPair>,
}

impl ListenerExample {
    pub fn prepare(
        u: &GroundedUtterance,
        scene: &Scene,
        classes: &ClassVocab,
        nm_token: bool,
        seed: u64,
    ) -> Result<Self> {
        u.validate_against(scene)?;
        let targets = build_targets(u, scene, nm_token)?;
        let index = |id: i64| scene.index_of(id).ok_or(Error::UnknownObject(id));
        let contrastive = match sample_contrastive_relation(u, scene, seed) {
            Some((relation, anchor)) => {
                let mut candidates = vec![targets.target_index];
                for d in same_class_distractors(scene, u.target_object)? {
                    candidates.push(index(d)?);
                }
                Some(ContrastiveSample {
                    relation,
                    anchor: index(anchor)?,
                    candidates,
                })
            }
            None => None,
        };
        let pairs = extract_relations(u, scene, DEFAULT_VIEWPOINT)?
            .into_iter()
            .map(|r| {
                Ok(RelationPair {
                    subject: index(r.subject_id)?,
                    object: index(r.object_id)?,
                    relation: r.relation,
                })
            })
            .collect::<Result<_>>()?;
        Ok(ListenerExample {
            id: u.id.clone(),
            scene: scene.clone(),
            tokens: u.tokens.clone(),
            class_ids: scene.objects.iter().map(|o| classes.id(&o.class_label)).collect(),
            targets,
            contrastive,
            pairs,
        })
    }
}

/// Per-term values of one loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub org: Var,
    pub anc: Var,
    pub attn: Var,
    pub dis: Var,
    pub rel: Var,
}

#[derive(Debug, Clone)]
struct Heads {
    word_emb: ParamId,
    pos_emb: ParamId,
    nm_emb: ParamId,
    word_norm: Norm,
    cross: Vec<CrossLayer>,
    target: Mlp,
    anchor: Mlp,
    distractor: Mlp,
    class: Dense,
    rel_emb: ParamId,
    pair: Mlp,
    spatial: Mlp,
}

/// Listener parameters and the lexicons they were built for.
#[derive(Debug, Clone)]
pub struct Listener<F> {
    pub cfg: ListenerConfig,
    pub vocab: Vocab,
    pub classes: ClassVocab,
    pub params: ParamStore<F>,
    encoder: ObjectEncoder,
    heads: Heads,
}

fn vector_of<F: Scalar>(bits: &[u8]) -> Tensor<F> {
    Tensor::vector(bits.iter().map(|&b| F::of(f64::from(b))).collect())
}

fn to_vector<F: Scalar>(tape: &mut Tape<F>, col: Var) -> Result<Var> {
    let n = tape.shape(col)[0];
    tape.reshape(col, &[n])
}

impl<F: Scalar> Listener<F> {
    /// Fresh parameters drawn from `seed`. The set of parameters never
    /// depends on which auxiliary losses are later enabled.
    pub fn new(cfg: ListenerConfig, vocab: Vocab, classes: ClassVocab, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let d = cfg.d;
        let encoder = ObjectEncoder::new(&mut p, d, cfg.n_classes, cfg.n_self_layers, &mut rng)?;
        let heads = Heads {
            word_emb: p.add_normal("lst.word_emb", &[cfg.vocab_size, d], 0.5, &mut rng)?,
            pos_emb: p.add_normal("lst.pos_emb", &[cfg.max_tokens, d], 0.1, &mut rng)?,
            nm_emb: p.add_normal("lst.nm_emb", &[1, d], 0.5, &mut rng)?,
            word_norm: Norm::new(&mut p, "lst.word_ln", d)?,
            cross: (0..cfg.n_cross_layers)
                .map(|i| CrossLayer::new(&mut p, &format!("lst.cross{i}"), d, &mut rng))
                .collect::<Result<_>>()?,
            target: Mlp::new(&mut p, "lst.target", d, d, 1, &mut rng)?,
            anchor: Mlp::new(&mut p, "lst.anchor", d, d, 1, &mut rng)?,
            distractor: Mlp::new(&mut p, "lst.distractor", d, d, 1, &mut rng)?,
            class: Dense::new(&mut p, "lst.class", d, cfg.n_classes, &mut rng)?,
            rel_emb: p.add_normal("rel.emb", &[RelationType::COUNT, d], 0.5, &mut rng)?,
            pair: Mlp::new(&mut p, "rel.pair", 2 * d, d, d, &mut rng)?,
            spatial: Mlp::new(&mut p, "rel.spatial", 2 * d, d, RelationType::COUNT, &mut rng)?,
        };
        Ok(Listener {
            cfg,
            vocab,
            classes,
            params: p,
            encoder,
            heads,
        })
    }

    pub fn encoder(&self) -> &ObjectEncoder {
        &self.encoder
    }

    /// Builds the forward graph on `tape`.
    pub fn forward(&self, tape: &mut Tape<F>, scene: &Scene, tokens: &[String]) -> Result<ListenerOutputs> {
        let h = &self.heads;
        let p = &self.params;
        if tokens.is_empty() {
            return Err(Error::shape("listener", "utterance has no tokens"));
        }
        if tokens.len() > self.cfg.max_tokens {
            return Err(Error::shape(
                "listener",
                format!("{} tokens exceed max_tokens {}", tokens.len(), self.cfg.max_tokens),
            ));
        }
        let objects = self.encoder.forward(tape, p, scene, &self.classes)?;

        let ids = self.vocab.encode(tokens);
        let table = tape.param(p, h.word_emb);
        let words = tape.embedding_lookup(table, &ids)?;
        let pos_table = tape.param(p, h.pos_emb);
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let pos = tape.gather_rows(pos_table, &positions)?;
        let mut words = tape.add(words, pos)?;
        if self.cfg.use_nm_token {
            let nm = tape.param(p, h.nm_emb);
            words = tape.concat(&[nm, words], 0)?;
        }
        let words = h.word_norm.forward(tape, p, words)?;

        let mut x = objects;
        let mut attn = None;
        for layer in &h.cross {
            let (next, scores) = layer.forward(tape, p, x, words)?;
            attn.get_or_insert(scores);
            x = next;
        }
        let attn = attn.expect("at least one cross layer");

        let t = h.target.forward(tape, p, x)?;
        let a = h.anchor.forward(tape, p, x)?;
        let dsc = h.distractor.forward(tape, p, x)?;
        Ok(ListenerOutputs {
            f_o: x,
            attn,
            target_logits: to_vector(tape, t)?,
            anchor_logits: to_vector(tape, a)?,
            distractor_logits: to_vector(tape, dsc)?,
            class_logits: h.class.forward(tape, p, x)?,
        })
    }

    pub fn predict(&self, scene: &Scene, tokens: &[String]) -> Result<ListenerPrediction<F>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, scene, tokens)?;
        Ok(ListenerPrediction {
            target_logits: tape.value(out.target_logits).data().to_vec(),
            anchor_logits: tape.value(out.anchor_logits).data().to_vec(),
            distractor_logits: tape.value(out.distractor_logits).data().to_vec(),
            attn: tape.value(out.attn).clone(),
        })
    }

    /// Target cross-entropy, plus the class term when `class_weight > 0`.
    pub fn loss_org(&self, tape: &mut Tape<F>, out: &ListenerOutputs, ex: &ListenerExample) -> Result<Var> {
        let ce = loss_org(tape, out, ex.targets.target_index)?;
        if self.cfg.class_weight == 0.0 {
            return Ok(ce);
        }
        let cls = tape.cross_entropy(out.class_logits, &ex.class_ids)?;
        let cls = tape.scale(cls, F::of(self.cfg.class_weight));
        tape.add(ce, cls)
    }

    /// Cross-entropy over cosine scores between the relation embedding and
    /// each (anchor, candidate) pair feature; zero without a sample.
    pub fn loss_contrastive(
        &self,
        tape: &mut Tape<F>,
        out: &ListenerOutputs,
        sample: Option<&ContrastiveSample>,
    ) -> Result<Var> {
        let Some(sample) = sample else {
            return Ok(tape.scalar(F::zero()));
        };
        let h = &self.heads;
        let m = tape.shape(out.f_o)[0];
        if let Some(&bad) = sample.candidates.iter().chain([&sample.anchor]).find(|&&i| i >= m) {
            return Err(Error::shape("loss_contrastive", format!("index {bad} for {m} objects")));
        }
        let anchors = tape.gather_rows(out.f_o, &vec![sample.anchor; sample.candidates.len()])?;
        let cands = tape.gather_rows(out.f_o, &sample.candidates)?;
        let joint = tape.concat(&[anchors, cands], 1)?;
        let feats = h.pair.forward(tape, &self.params, joint)?;
        let table = tape.param(&self.params, h.rel_emb);
        let rel = tape.gather_rows(table, &[sample.relation.index()])?;
        let scores = cosine_rows(tape, feats, rel)?;
        tape.cross_entropy(scores, &[0])
    }

    /// Mean 13-way relation cross-entropy over known pairs; zero without pairs.
    pub fn loss_spatial(&self, tape: &mut Tape<F>, out: &ListenerOutputs, pairs: &[RelationPair]) -> Result<Var> {
        if pairs.is_empty() {
            return Ok(tape.scalar(F::zero()));
        }
        let subj: Vec<usize> = pairs.iter().map(|r| r.subject).collect();
        let obj: Vec<usize> = pairs.iter().map(|r| r.object).collect();
        let labels: Vec<usize> = pairs.iter().map(|r| r.relation.index()).collect();
        let s = tape.gather_rows(out.f_o, &subj)?;
        let o = tape.gather_rows(out.f_o, &obj)?;
        let joint = tape.concat(&[s, o], 1)?;
        let logits = self.heads.spatial.forward(tape, &self.params, joint)?;
        tape.cross_entropy(logits, &labels)
    }

    /// Main loss plus the enabled auxiliary terms. Disabled terms are still
    /// reported but do not reach the total.
    pub fn loss_total(
        &self,
        tape: &mut Tape<F>,
        out: &ListenerOutputs,
        ex: &ListenerExample,
        flags: AuxFlags,
    ) -> Result<LossTerms> {
        let org = self.loss_org(tape, out, ex)?;
        let anc = loss_anc(tape, out, &ex.targets)?;
        let attn = loss_attn(tape, out, &ex.targets)?;
        let dis = loss_dis(tape, out, &ex.targets)?;
        let rel = if flags.rel {
            let c = self.loss_contrastive(tape, out, ex.contrastive.as_ref())?;
            let s = self.loss_spatial(tape, out, &ex.pairs)?;
            tape.add(c, s)?
        } else {
            tape.scalar(F::zero())
        };
        let mut total = combine_losses(tape, [org, anc, attn, dis], &self.cfg, flags)?;
        if flags.rel {
            let r = tape.scale(rel, F::of(self.cfg.rel_weight));
            total = tape.add(total, r)?;
        }
        Ok(LossTerms {
            total,
            org,
            anc,
            attn,
            dis,
            rel,
        })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = serde_json::json!({
            "model": "listener",
            "config": self.cfg,
            "vocab": self.vocab,
            "classes": self.classes,
        });
        Ok(Checkpoint::from_store(&self.params, meta))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.get("model").and_then(|m| m.as_str()) != Some("listener") {
            return Err(Error::CheckpointMismatch("not a listener checkpoint".into()));
        }
        let field = |k: &str| {
            ck.meta
                .get(k)
                .cloned()
                .ok_or_else(|| Error::CheckpointMismatch(format!("missing {k}")))
        };
        let cfg: ListenerConfig = serde_json::from_value(field("config")?)?;
        let vocab: Vocab = serde_json::from_value(field("vocab")?)?;
        let classes: ClassVocab = serde_json::from_value(field("classes")?)?;
        let mut model = Listener::new(cfg, vocab, classes, 0)?;
        let loaded = ck.to_store::<F>()?;
        if loaded.len() != model.params.len() {
            return Err(Error::CheckpointMismatch(format!(
                "{} parameters, model expects {}",
                loaded.len(),
                model.params.len()
            )));
        }
        model.params.copy_prefix_from(&loaded, "")?;
        Ok(model)
    }
}

/// Anchor BCE over all objects.
pub fn loss_anc<F: Scalar>(tape: &mut Tape<F>, out: &ListenerOutputs, t: &SupervisionTargets) -> Result<Var> {
    tape.bce_with_logits(out.anchor_logits, &vector_of(&t.y_anc))
}

/// Distractor BCE over all objects.
pub fn loss_dis<F: Scalar>(tape: &mut Tape<F>, out: &ListenerOutputs, t: &SupervisionTargets) -> Result<Var> {
    tape.bce_with_logits(out.distractor_logits, &vector_of(&t.y_dis))
}

/// BCE between raw attention scores and the word-membership matrix. Every
/// row has the same width, so the mean over all cells is the mean of the
/// per-row means.
pub fn loss_attn<F: Scalar>(tape: &mut Tape<F>, out: &ListenerOutputs, t: &SupervisionTargets) -> Result<Var> {
    let rows = t.y_attn.len();
    let cols = t.n_columns();
    let data = t.y_attn.iter().flatten().map(|&b| F::of(f64::from(b))).collect();
    let y = Tensor::new(vec![rows, cols], data)?;
    tape.bce_with_logits(out.attn, &y)
}

/// Target-selection cross-entropy.
pub fn loss_org<F: Scalar>(tape: &mut Tape<F>, out: &ListenerOutputs, target_index: usize) -> Result<Var> {
    tape.cross_entropy(out.target_logits, &[target_index])
}

/// `org + alpha * anc + beta * attn + gamma * dis`, skipping disabled terms.
pub fn combine_losses<F: Scalar>(
    tape: &mut Tape<F>,
    [org, anc, attn, dis]: [Var; 4],
    cfg: &ListenerConfig,
    flags: AuxFlags,
) -> Result<Var> {
    let mut total = org;
    for (on, term, w) in [
        (flags.anc, anc, cfg.alpha),
        (flags.attn, attn, cfg.beta),
        (flags.dis, dis, cfg.gamma),
    ] {
        if on {
            let t = tape.scale(term, F::of(w));
            total = tape.add(total, t)?;
        }
    }
    Ok(total)
}

/// Labels the proposal with the highest IoU for each ground-truth box.
/// Ties go to the lowest index; a box that overlaps nothing labels nothing.
pub fn assign_anchor_labels(proposals: &[Box3], gt_anchor_boxes: &[Box3]) -> Result<Vec<u8>> {
    if proposals.is_empty() {
        return Err(Error::EmptyProposals);
    }
    let mut labels = vec![0u8; proposals.len()];
    for gt in gt_anchor_boxes {
        let mut best: Option<(usize, f64)> = None;
        for (j, p) in proposals.iter().enumerate() {
            let iou = aabb_iou(p, gt)?;
            if iou > 0.0 && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            labels[j] = 1;
        }
    }
    Ok(labels)
}

/// Pooled true/false positive counts for micro F1.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct F1Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl F1Counts {
    /// Adds one example; a slot is predicted positive when `sigmoid(logit) > threshold`.
    pub fn add<F: Scalar>(&mut self, logits: &[F], labels: &[u8], threshold: f64) {
        for (&x, &y) in logits.iter().zip(labels) {
            let pos = crate::scalar::sigmoid(x.to_f64_lossy()) > threshold;
            match (pos, y == 1) {
                (true, true) => self.tp += 1,
                (true, false) => self.fp += 1,
                (false, true) => self.fn_ += 1,
                (false, false) => {}
            }
        }
    }

    pub fn merge(&mut self, o: F1Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }

    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if self.tp == 0 || denom == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }
}

/// Micro F1 of thresholded anchor predictions against labels.
pub fn anchor_f1<F: Scalar>(pred_logits: &[F], y_anc: &[u8], threshold: f64) -> f64 {
    let mut c = F1Counts::default();
    c.add(pred_logits, y_anc, threshold);
    c.f1()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::{ScanEntity, TokenSpan};
    use crate::scene::{SceneObject, Vec3};

    fn toy() -> (Scene, GroundedUtterance) {
        let obj = |id: i64, c: &str, x: f64| {
            SceneObject::new(
                id,
                c,
                Box3::axis_aligned(Vec3::new(x, 0.0, 0.4), Vec3::new(0.6, 0.6, 0.8)).unwrap(),
            )
        };
        let s = Scene::new(
            "s0",
            vec![
                obj(0, "chair", 0.0),
                obj(1, "chair", 2.0),
                obj(2, "table", 0.9),
                obj(3, "lamp", -2.0),
            ],
        )
        .unwrap();
        let u = GroundedUtterance {
            id: "u0".into(),
            scene_id: "s0".into(),
            tokens: ["the", "chair", "closest", "to", "the", "table"]
                .map(String::from)
                .to_vec(),
            target_object: 0,
            view_dependent: false,
            entities: vec![
                ScanEntity {
                    span: TokenSpan::new(0, 2),
                    object_ids: vec![0],
                    is_target: true,
                },
                ScanEntity {
                    span: TokenSpan::new(4, 6),
                    object_ids: vec![2],
                    is_target: false,
                },
            ],
        };
        (s, u)
    }

    fn model(nm: bool) -> Listener<f64> {
        let vocab = Vocab::new(["the", "chair", "closest", "to", "table"]);
        let classes = ClassVocab::new(["chair", "table", "lamp"]);
        let cfg = ListenerConfig {
            d: 8,
            vocab_size: vocab.len(),
            n_classes: classes.len(),
            use_nm_token: nm,
            ..ListenerConfig::default()
        };
        Listener::new(cfg, vocab, classes, 7).unwrap()
    }

    #[test]
    fn output_shapes() {
        let (s, u) = toy();
        for nm in [false, true] {
            let m = model(nm);
            let mut tape = Tape::new();
            let out = m.forward(&mut tape, &s, &u.tokens).unwrap();
            assert_eq!(tape.shape(out.attn), &[4, 6 + usize::from(nm)]);
            assert_eq!(tape.shape(out.target_logits), &[4]);
            assert_eq!(tape.shape(out.f_o), &[4, 8]);
        }
    }

    #[test]
    fn unknown_token_ids_overflow_small_tables() {
        let (s, u) = toy();
        let mut m = model(false);
        m.vocab = Vocab::new(["the", "chair", "closest", "to", "table", "x", "y", "z"]);
        let mut toks = u.tokens.clone();
        toks[0] = "z".into();
        let mut tape = Tape::new();
        assert!(matches!(
            m.forward(&mut tape, &s, &toks),
            Err(Error::VocabOverflow { .. })
        ));
    }

    #[test]
    fn total_respects_flags() {
        let (s, u) = toy();
        let m = model(true);
        let ex = ListenerExample::prepare(&u, &s, &m.classes, true, 0).unwrap();
        let mut tape = Tape::new();
        let out = m.forward(&mut tape, &s, &u.tokens).unwrap();
        let none = m.loss_total(&mut tape, &out, &ex, AuxFlags::NONE).unwrap();
        assert_eq!(tape.item(none.total).unwrap(), tape.item(none.org).unwrap());
        let all = m.loss_total(&mut tape, &out, &ex, AuxFlags::all()).unwrap();
        let v = |x| tape.item(x).unwrap();
        let expect = v(all.org) + 3.0 * v(all.anc) + 3.0 * v(all.attn) + 0.5 * v(all.dis) + v(all.rel);
        assert!((v(all.total) - expect).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let (s, u) = toy();
        let m = model(false);
        let back = Listener::<f64>::from_checkpoint(&m.to_checkpoint().unwrap()).unwrap();
        assert_eq!(m.predict(&s, &u.tokens).unwrap(), back.predict(&s, &u.tokens).unwrap());
    }

    #[test]
    fn aux_flags_parse() {
        let f = AuxFlags::parse("anc, dis").unwrap();
        assert!(f.anc && f.dis && !f.attn && !f.rel);
        assert_eq!(f.label(), "anc,dis");
        assert!(AuxFlags::parse("ent").is_err());
        assert_eq!(AuxFlags::parse("").unwrap(), AuxFlags::NONE);
    }

    #[test]
    fn f1_counts() {
        let mut c = F1Counts::default();
        c.add(&[5.0, 5.0, 5.0, -5.0], &[1, 1, 0, 1], 0.5);
        assert_eq!(c, F1Counts { tp: 2, fp: 1, fn_: 1 });
        assert!((c.f1() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(anchor_f1(&[-1.0, -1.0], &[1, 0], 0.5), 0.0);
    }
}
