//! LSTM caption decoder with object attention, the entity-prediction loss
//! and the mention loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::{build_targets, GroundedUtterance};
use crate::autodiff::{lstm_cell, Checkpoint, LstmWeights, ParamId, ParamStore, Tape, Tensor, Var};
use crate::encoder::{ObjectEncoder, ENCODER_PREFIX};
use crate::error::{Error, Result};
use crate::layers::{Attention, Dense, Mlp, Norm};
use crate::listener::Listener;
use crate::scalar::Scalar;
use crate::scene::Scene;
use crate::vocab::{ClassVocab, Vocab, EOS};

fn default_d() -> usize {
    64
}
fn one() -> usize {
    1
}
fn default_max_len() -> usize {
    24
}
fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeakerConfig {
    #[serde(default = "default_d")]
    pub d: usize,
    /// Must match the listener when its encoder is reused.
    #[serde(default = "one")]
    pub n_self_layers: usize,
    #[serde(default)]
    pub vocab_size: usize,
    #[serde(default)]
    pub n_classes: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default = "unit")]
    pub entity_loss_weight: f64,
    #[serde(default = "unit")]
    pub mention_loss_weight: f64,
}

impl Default for SpeakerConfig {
    fn default() -> Self {
        SpeakerConfig {
            d: default_d(),
            n_self_layers: 1,
            vocab_size: 0,
            n_classes: 0,
            max_len: default_max_len(),
            entity_loss_weight: 1.0,
            mention_loss_weight: 1.0,
        }
    }
}

impl SpeakerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.vocab_size == 0 || self.n_classes == 0 {
            return Err(Error::Config("d, vocab_size and n_classes must be positive".into()));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be at least 2".into()));
        }
        let w = [self.entity_loss_weight, self.mention_loss_weight];
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Which speaker auxiliary objectives are active.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeakerAux {
    pub ent: bool,
    pub men: bool,
}

impl SpeakerAux {
    pub fn parse(list: &str) -> Result<Self> {
        let mut f = SpeakerAux::default();
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item {
                "ent" => f.ent = true,
                "men" => f.men = true,
                other => return Err(Error::Config(format!("unknown speaker auxiliary loss {other:?}"))),
            }
        }
        Ok(f)
    }

    pub fn label(&self) -> String {
        match (self.ent, self.men) {
            (true, true) => "ent,men".into(),
            (true, false) => "ent".into(),
            (false, true) => "men".into(),
            (false, false) => String::new(),
        }
    }
}

/// One teacher-forced step.
#[derive(Debug, Clone, Copy)]
pub struct DecodeStep {
    /// `[vocab]`
    pub word_logits: Var,
    /// `[M]`
    pub object_attention_logits: Var,
    /// Hidden state after the step, `[1 x d]`.
    pub hidden: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct SpeakerLosses {
    pub total: Var,
    pub caption: Var,
    pub ent: Var,
    pub men: Var,
}

#[derive(Debug, Clone)]
struct Decoder {
    target_flag: ParamId,
    word_emb: ParamId,
    init_h: Dense,
    init_c: Dense,
    attend: ParamId,
    lstm_ih: ParamId,
    lstm_hh: ParamId,
    lstm_b: ParamId,
    out: Dense,
    mention: Attention,
    mention_norm: Norm,
    mention_head: Mlp,
}

#[derive(Debug, Clone)]
pub struct Speaker<F> {
    pub cfg: SpeakerConfig,
    pub vocab: Vocab,
    pub classes: ClassVocab,
    pub params: ParamStore<F>,
    encoder: ObjectEncoder,
    dec: Decoder,
}

fn row_to_vector<F: Scalar>(tape: &mut Tape<F>, v: Var) -> Result<Var> {
    let n = tape.shape(v)[1];
    tape.reshape(v, &[n])
}

impl<F: Scalar> Speaker<F> {
    pub fn new(cfg: SpeakerConfig, vocab: Vocab, classes: ClassVocab, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let d = cfg.d;
        let encoder = ObjectEncoder::new(&mut p, d, cfg.n_classes, cfg.n_self_layers, &mut rng)?;
        let dec = Decoder {
            target_flag: p.add_normal("spk.target_flag", &[1, d], 0.5, &mut rng)?,
            word_emb: p.add_normal("spk.word_emb", &[cfg.vocab_size, d], 0.5, &mut rng)?,
            init_h: Dense::new(&mut p, "spk.init_h", d, d, &mut rng)?,
            init_c: Dense::new(&mut p, "spk.init_c", d, d, &mut rng)?,
            attend: p.add_xavier("spk.attend", d, d, &mut rng)?,
            lstm_ih: p.add_xavier("spk.lstm.ih", 2 * d, 4 * d, &mut rng)?,
            lstm_hh: p.add_xavier("spk.lstm.hh", d, 4 * d, &mut rng)?,
            lstm_b: p.add_zeros("spk.lstm.b", &[4 * d])?,
            out: Dense::new(&mut p, "spk.out", 2 * d, cfg.vocab_size, &mut rng)?,
            mention: Attention::new(&mut p, "spk.mention", d, &mut rng)?,
            mention_norm: Norm::new(&mut p, "spk.mention_ln", d)?,
            mention_head: Mlp::new(&mut p, "spk.mention_head", d, d, 1, &mut rng)?,
        };
        Ok(Speaker {
            cfg,
            vocab,
            classes,
            params: p,
            encoder,
            dec,
        })
    }

    /// Copies the object encoder of a trained listener.
    pub fn init_from_listener(&mut self, listener: &Listener<F>) -> Result<usize> {
        if listener.classes != self.classes {
            return Err(Error::CheckpointMismatch(
                "listener was trained on other classes".into(),
            ));
        }
        self.params.copy_prefix_from(&listener.params, ENCODER_PREFIX)
    }

    /// Object features `X_L` `[M x d]`.
    pub fn encode_objects(&self, tape: &mut Tape<F>, scene: &Scene) -> Result<Var> {
        self.encoder.forward(tape, &self.params, scene, &self.classes)
    }

    fn start(&self, tape: &mut Tape<F>, x_l: Var, target_index: usize) -> Result<(Var, Var, Var)> {
        let m = tape.shape(x_l)[0];
        if target_index >= m {
            return Err(Error::shape("speaker", format!("target {target_index} of {m} objects")));
        }
        let mut onehot = Tensor::zeros(&[m, 1]);
        onehot.data_mut()[target_index] = F::one();
        let onehot = tape.constant(onehot);
        let flag = tape.param(&self.params, self.dec.target_flag);
        let marked = tape.matmul(onehot, flag)?;
        let x = tape.add(x_l, marked)?;
        let t = tape.gather_rows(x, &[target_index])?;
        let h = self.dec.init_h.forward(tape, &self.params, t)?;
        let h = tape.tanh(h);
        let c = self.dec.init_c.forward(tape, &self.params, t)?;
        Ok((x, h, c))
    }

    fn step(&self, tape: &mut Tape<F>, x: Var, token: usize, h: Var, c: Var) -> Result<(DecodeStep, Var)> {
        let p = &self.params;
        let table = tape.param(p, self.dec.word_emb);
        let e = tape.embedding_lookup(table, &[token])?;
        let wa = tape.param(p, self.dec.attend);
        let q = tape.matmul(h, wa)?;
        let scores = tape.matmul_nt(q, x)?;
        let probs = tape.softmax(scores);
        let ctx = tape.matmul(probs, x)?;
        let input = tape.concat(&[e, ctx], 1)?;
        let w = LstmWeights {
            w_ih: tape.param(p, self.dec.lstm_ih),
            w_hh: tape.param(p, self.dec.lstm_hh),
            bias: tape.param(p, self.dec.lstm_b),
        };
        let (h2, c2) = lstm_cell(tape, input, h, c, &w)?;
        let joint = tape.concat(&[h2, ctx], 1)?;
        let logits = self.dec.out.forward(tape, p, joint)?;
        Ok((
            DecodeStep {
                word_logits: row_to_vector(tape, logits)?,
                object_attention_logits: row_to_vector(tape, scores)?,
                hidden: h2,
            },
            c2,
        ))
    }

    /// Token ids of `tokens`; every token must be in the vocabulary.
    pub fn token_ids(&self, tokens: &[String]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|t| self.vocab.get(t).ok_or_else(|| Error::TokenOutOfVocab(t.clone())))
            .collect()
    }

    /// One step per entry of `gt_tokens`, each fed the previous gold token.
    pub fn decode_teacher_forced(
        &self,
        tape: &mut Tape<F>,
        x_l: Var,
        target_index: usize,
        gt_tokens: &[String],
    ) -> Result<Vec<DecodeStep>> {
        let ids = self.token_ids(gt_tokens)?;
        let (x, mut h, mut c) = self.start(tape, x_l, target_index)?;
        let mut prev = Vocab::BOS_ID;
        let mut steps = Vec::with_capacity(ids.len());
        for id in ids {
            let (s, c2) = self.step(tape, x, prev, h, c)?;
            h = s.hidden;
            c = c2;
            steps.push(s);
            prev = id;
        }
        Ok(steps)
    }

    /// Mention logits `[M]` from objects attending to token features `[T x d]`.
    pub fn mention_head(&self, tape: &mut Tape<F>, x_l: Var, token_features: Var) -> Result<Var> {
        let p = &self.params;
        let (a, _) = self.dec.mention.forward(tape, p, x_l, token_features)?;
        let x = tape.add(x_l, a)?;
        let x = self.dec.mention_norm.forward(tape, p, x)?;
        let logits = self.dec.mention_head.forward(tape, p, x)?;
        let m = tape.shape(logits)[0];
        tape.reshape(logits, &[m])
    }

    /// Greedy decoding until EOS or `max_len` tokens; EOS is not returned.
    pub fn greedy_decode(&self, scene: &Scene, target_index: usize, max_len: usize) -> Result<Vec<String>> {
        let mut tape = Tape::new();
        let x_l = self.encode_objects(&mut tape, scene)?;
        let (x, mut h, mut c) = self.start(&mut tape, x_l, target_index)?;
        let mut prev = Vocab::BOS_ID;
        let mut out = Vec::new();
        for _ in 0..max_len {
            let (s, c2) = self.step(&mut tape, x, prev, h, c)?;
            h = s.hidden;
            c = c2;
            let next = tape.value(s.word_logits).argmax().unwrap_or(Vocab::EOS_ID);
            if next == Vocab::EOS_ID {
                break;
            }
            out.push(self.vocab.token(next).to_string());
            prev = next;
        }
        Ok(out)
    }

    /// Caption cross-entropy plus the enabled auxiliary terms.
    pub fn losses(
        &self,
        tape: &mut Tape<F>,
        u: &GroundedUtterance,
        scene: &Scene,
        flags: SpeakerAux,
    ) -> Result<SpeakerLosses> {
        let target_index = scene
            .index_of(u.target_object)
            .ok_or(Error::UnknownObject(u.target_object))?;
        let gt = caption_with_eos(u);
        let x_l = self.encode_objects(tape, scene)?;
        let steps = self.decode_teacher_forced(tape, x_l, target_index, &gt)?;
        let ids = self.token_ids(&gt)?;
        let rows: Vec<Var> = steps.iter().map(|s| s.word_logits).collect();
        let stacked = tape.concat(&rows, 0)?;
        let logits = tape.reshape(stacked, &[ids.len(), self.cfg.vocab_size])?;
        let caption = tape.cross_entropy(logits, &ids)?;
        let ent = loss_ent(tape, &steps, u, scene)?;
        let hidden: Vec<Var> = steps.iter().map(|s| s.hidden).collect();
        let feats = tape.concat(&hidden, 0)?;
        let mention = self.mention_head(tape, x_l, feats)?;
        let y_men = build_targets(u, scene, false)?.y_men;
        let men = loss_men(tape, mention, &y_men)?;
        let mut total = caption;
        if flags.ent {
            let t = tape.scale(ent, F::of(self.cfg.entity_loss_weight));
            total = tape.add(total, t)?;
        }
        if flags.men {
            let t = tape.scale(men, F::of(self.cfg.mention_loss_weight));
            total = tape.add(total, t)?;
        }
        Ok(SpeakerLosses {
            total,
            caption,
            ent,
            men,
        })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = serde_json::json!({
            "model": "speaker",
            "config": self.cfg,
            "vocab": self.vocab,
            "classes": self.classes,
        });
        Ok(Checkpoint::from_store(&self.params, meta))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.get("model").and_then(|m| m.as_str()) != Some("speaker") {
            return Err(Error::CheckpointMismatch("not a speaker checkpoint".into()));
        }
        let field = |k: &str| {
            ck.meta
                .get(k)
                .cloned()
                .ok_or_else(|| Error::CheckpointMismatch(format!("missing {k}")))
        };
        let mut model = Speaker::new(
            serde_json::from_value(field("config")?)?,
            serde_json::from_value(field("vocab")?)?,
            serde_json::from_value(field("classes")?)?,
            0,
        )?;
        let loaded = ck.to_store::<F>()?;
        if loaded.len() != model.params.len() {
            return Err(Error::CheckpointMismatch("parameter count differs".into()));
        }
        model.params.copy_prefix_from(&loaded, "")?;
        Ok(model)
    }
}

/// The utterance tokens followed by the end marker.
pub fn caption_with_eos(u: &GroundedUtterance) -> Vec<String> {
    let mut t = u.tokens.clone();
    t.push(EOS.to_string());
    t
}

/// Multi-hot BCE on object attention at every step whose gold token lies in
/// an entity span, averaged over those steps; zero when there are none.
pub fn loss_ent<F: Scalar>(
    tape: &mut Tape<F>,
    steps: &[DecodeStep],
    u: &GroundedUtterance,
    scene: &Scene,
) -> Result<Var> {
    let m = scene.len();
    let mut terms = Vec::new();
    for (t, step) in steps.iter().enumerate() {
        let Some(entity) = u.entities.iter().find(|e| e.span.contains(t)) else {
            continue;
        };
        let mut y = vec![F::zero(); m];
        for &id in &entity.object_ids {
            y[scene.index_of(id).ok_or(Error::UnknownObject(id))?] = F::one();
        }
        terms.push(tape.bce_with_logits(step.object_attention_logits, &Tensor::vector(y))?);
    }
    if terms.is_empty() {
        return Ok(tape.scalar(F::zero()));
    }
    let k = terms.len();
    let mut sum = terms[0];
    for &t in &terms[1..] {
        sum = tape.add(sum, t)?;
    }
    Ok(tape.scale(sum, F::one() / F::of(k as f64)))
}

/// BCE between mention logits and the mentioned-object indicator.
pub fn loss_men<F: Scalar>(tape: &mut Tape<F>, logits: Var, y_men: &[u8]) -> Result<Var> {
    let y = Tensor::vector(y_men.iter().map(|&b| F::of(f64::from(b))).collect());
    tape.bce_with_logits(logits, &y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::{ScanEntity, TokenSpan};
    use crate::scene::{Box3, SceneObject, Vec3};

    fn fixture() -> (Scene, GroundedUtterance, Speaker<f64>) {
        let obj = |id: i64, c: &str, x: f64| {
            SceneObject::new(
                id,
                c,
                Box3::axis_aligned(Vec3::new(x, 0.0, 0.4), Vec3::new(0.5, 0.5, 0.8)).unwrap(),
            )
        };
        let s = Scene::new(
            "s",
            vec![obj(0, "chair", 0.0), obj(1, "chair", 2.0), obj(2, "table", 0.8)],
        )
        .unwrap();
        let u = GroundedUtterance {
            id: "u".into(),
            scene_id: "s".into(),
            tokens: ["the", "chair", "next", "to", "the", "table"]
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
        let vocab = Vocab::new(["the", "chair", "next", "to", "table"]);
        let classes = ClassVocab::new(["chair", "table"]);
        let cfg = SpeakerConfig {
            d: 8,
            vocab_size: vocab.len(),
            n_classes: classes.len(),
            ..SpeakerConfig::default()
        };
        (s, u, Speaker::new(cfg, vocab, classes, 1).unwrap())
    }

    #[test]
    fn one_step_per_token() {
        let (s, u, m) = fixture();
        let mut tape = Tape::new();
        let x = m.encode_objects(&mut tape, &s).unwrap();
        assert_eq!(tape.shape(x), &[3, 8]);
        let gt = caption_with_eos(&u);
        let steps = m.decode_teacher_forced(&mut tape, x, 0, &gt).unwrap();
        assert_eq!(steps.len(), 7);
        assert_eq!(tape.shape(steps[0].word_logits), &[m.vocab.len()]);
        assert_eq!(tape.shape(steps[0].object_attention_logits), &[3]);
    }

    #[test]
    fn unknown_tokens_are_rejected() {
        let (s, _, m) = fixture();
        let mut tape = Tape::new();
        let x = m.encode_objects(&mut tape, &s).unwrap();
        let r = m.decode_teacher_forced(&mut tape, x, 0, &["sofa".to_string()]);
        assert!(matches!(r, Err(Error::TokenOutOfVocab(_))));
    }

    #[test]
    fn greedy_is_bounded_and_deterministic() {
        let (s, _, m) = fixture();
        let a = m.greedy_decode(&s, 0, 5).unwrap();
        assert!(a.len() <= 5);
        assert_eq!(a, m.greedy_decode(&s, 0, 5).unwrap());
    }

    #[test]
    fn losses_are_finite() {
        let (s, u, m) = fixture();
        let mut tape = Tape::new();
        let l = m
            .losses(&mut tape, &u, &s, SpeakerAux { ent: true, men: true })
            .unwrap();
        for v in [l.total, l.caption, l.ent, l.men] {
            let x = tape.item(v).unwrap();
            assert!(x.is_finite() && x >= 0.0);
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let (s, _, m) = fixture();
        let back = Speaker::<f64>::from_checkpoint(&m.to_checkpoint().unwrap()).unwrap();
        assert_eq!(
            back.greedy_decode(&s, 1, 6).unwrap(),
            m.greedy_decode(&s, 1, 6).unwrap()
        );
    }
}
