//! Central finite-difference checks of every training loss on tiny models.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::{build_targets, GroundedUtterance, ScanEntity, TokenSpan};
use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::Result;
use crate::listener::{
    combine_losses, loss_anc, loss_attn, loss_dis, AuxFlags, ContrastiveSample, Listener, ListenerConfig,
    ListenerExample, RelationPair,
};
use crate::relations::RelationType;
use crate::scene::{Box3, Scene, SceneObject, Vec3};
use crate::speaker::{caption_with_eos, loss_ent, loss_men, Speaker, SpeakerConfig};
use crate::vocab::{ClassVocab, Vocab};

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;

/// Loss names in report order.
pub const LOSSES: [&str; 8] = [
    "anchor",
    "attention",
    "distractor",
    "total",
    "entity",
    "mention",
    "contrastive",
    "spatial",
];

const WORDS: [&str; 6] = ["the", "chair", "table", "lamp", "near", "left"];
const CLASSES: [&str; 3] = ["chair", "table", "lamp"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCheck {
    pub loss: String,
    pub instances: usize,
    pub parameters: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub checks: Vec<LossCheck>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("loss,instances,parameters,max_rel_err,passed\n");
        for c in &self.checks {
            out.push_str(&format!(
                "{},{},{},{:e},{}\n",
                c.loss, c.instances, c.parameters, c.max_rel_err, c.passed
            ));
        }
        out
    }
}

/// Models whose parameters the checker can perturb in place.
pub trait Perturb {
    fn store_mut(&mut self) -> &mut ParamStore<f64>;
}

impl Perturb for Listener<f64> {
    fn store_mut(&mut self) -> &mut ParamStore<f64> {
        &mut self.params
    }
}

impl Perturb for Speaker<f64> {
    fn store_mut(&mut self) -> &mut ParamStore<f64> {
        &mut self.params
    }
}

/// For each loss returned by `losses`, the error
/// `||analytic - numeric|| / max(||analytic||, ||numeric||)` over every
/// scalar of every parameter; zero when both gradients vanish.
pub fn relative_errors<M: Perturb>(
    model: &mut M,
    losses: impl Fn(&M, &mut Tape<f64>) -> Result<Vec<Var>>,
    h: f64,
) -> Result<Vec<f64>> {
    let k = {
        let mut tape = Tape::new();
        losses(model, &mut tape)?.len()
    };
    let mut analytic = Vec::with_capacity(k);
    for i in 0..k {
        let mut tape = Tape::new();
        let l = losses(model, &mut tape)?[i];
        analytic.push(tape.backward(l)?);
    }
    let eval = |m: &M| -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let ls = losses(m, &mut tape)?;
        ls.into_iter().map(|l| tape.item(l)).collect()
    };
    let mut diff = vec![0.0f64; k];
    let mut na = vec![0.0f64; k];
    let mut nn = vec![0.0f64; k];
    let ids: Vec<_> = model.store_mut().ids().collect();
    for id in ids {
        let len = model.store_mut().tensor(id).len();
        for j in 0..len {
            let orig = model.store_mut().tensor(id).data()[j];
            model.store_mut().tensor_mut(id).data_mut()[j] = orig + h;
            let up = eval(model)?;
            model.store_mut().tensor_mut(id).data_mut()[j] = orig - h;
            let down = eval(model)?;
            model.store_mut().tensor_mut(id).data_mut()[j] = orig;
            for i in 0..k {
                let numeric = (up[i] - down[i]) / (2.0 * h);
                let a = analytic[i].param(id).map_or(0.0, |g| g.data()[j]);
                diff[i] += (a - numeric).powi(2);
                na[i] += a * a;
                nn[i] += numeric * numeric;
            }
        }
    }
    Ok((0..k)
        .map(|i| {
            let denom = na[i].sqrt().max(nn[i].sqrt());
            if denom == 0.0 {
                0.0
            } else {
                diff[i].sqrt() / denom
            }
        })
        .collect())
}

/// A random scene, utterance and supervision for models of width `d`.
struct Instance {
    scene: Scene,
    utterance: GroundedUtterance,
    example: ListenerExample,
}

fn random_instance(rng: &mut ChaCha8Rng, classes: &ClassVocab) -> Result<Instance> {
    let m = rng.gen_range(2..=4);
    let objects = (0..m)
        .map(|i| {
            let c = Vec3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(0.2..1.0),
            );
            let s = Vec3::new(
                rng.gen_range(0.3..1.0),
                rng.gen_range(0.3..1.0),
                rng.gen_range(0.3..1.0),
            );
            let label = if i < 2 {
                "chair"
            } else {
                CLASSES[rng.gen_range(0..CLASSES.len())]
            };
            Ok(SceneObject::new(i as i64, label, Box3::axis_aligned(c, s)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let scene = Scene::new("g", objects)?;
    let n_tokens = rng.gen_range(4..=6);
    let tokens: Vec<String> = (0..n_tokens)
        .map(|_| WORDS[rng.gen_range(0..WORDS.len())].to_string())
        .collect();
    let target = rng.gen_range(0..2i64);
    let mut anchors: Vec<i64> = (0..m as i64).filter(|&i| i != target).collect();
    anchors.shuffle(rng);
    anchors.truncate(rng.gen_range(1..=anchors.len()));
    let utterance = GroundedUtterance {
        id: "g".into(),
        scene_id: "g".into(),
        tokens,
        target_object: target,
        view_dependent: false,
        entities: vec![
            ScanEntity {
                span: TokenSpan::new(0, 2),
                object_ids: vec![target],
                is_target: true,
            },
            ScanEntity {
                span: TokenSpan::new(2, n_tokens.min(4)),
                object_ids: anchors.clone(),
                is_target: false,
            },
        ],
    };
    utterance.validate_against(&scene)?;
    let nm = rng.gen_bool(0.5);
    let mut example = ListenerExample::prepare(&utterance, &scene, classes, nm, 0)?;
    let target_index = example.targets.target_index;
    example.contrastive = Some(ContrastiveSample {
        relation: RelationType::ALL[rng.gen_range(0..RelationType::COUNT)],
        anchor: anchors[0] as usize,
        candidates: vec![target_index, 1 - target_index],
    });
    example.pairs = (0..rng.gen_range(1..=3))
        .map(|_| RelationPair {
            subject: target_index,
            object: anchors[rng.gen_range(0..anchors.len())] as usize,
            relation: RelationType::ALL[rng.gen_range(0..RelationType::COUNT)],
        })
        .collect();
    Ok(Instance {
        scene,
        utterance,
        example,
    })
}

fn tiny_listener(nm: bool, seed: u64) -> Result<Listener<f64>> {
    let vocab = Vocab::new(WORDS);
    let classes = ClassVocab::new(CLASSES);
    let cfg = ListenerConfig {
        d: 8,
        n_cross_layers: 2,
        vocab_size: vocab.len(),
        n_classes: classes.len(),
        max_tokens: 8,
        use_nm_token: nm,
        class_weight: 0.5,
        ..ListenerConfig::default()
    };
    Listener::new(cfg, vocab, classes, seed)
}

fn tiny_speaker(seed: u64) -> Result<Speaker<f64>> {
    let vocab = Vocab::new(WORDS);
    let classes = ClassVocab::new(CLASSES);
    let cfg = SpeakerConfig {
        d: 8,
        vocab_size: vocab.len(),
        n_classes: classes.len(),
        ..SpeakerConfig::default()
    };
    Speaker::new(cfg, vocab, classes, seed)
}

const LISTENER_LOSSES: [&str; 6] = ["anchor", "attention", "distractor", "total", "contrastive", "spatial"];
const SPEAKER_LOSSES: [&str; 2] = ["entity", "mention"];

fn listener_losses(m: &Listener<f64>, tape: &mut Tape<f64>, inst: &Instance) -> Result<Vec<Var>> {
    let ex = &inst.example;
    let out = m.forward(tape, &ex.scene, &ex.tokens)?;
    let org = m.loss_org(tape, &out, ex)?;
    let anc = loss_anc(tape, &out, &ex.targets)?;
    let attn = loss_attn(tape, &out, &ex.targets)?;
    let dis = loss_dis(tape, &out, &ex.targets)?;
    let flags = AuxFlags {
        rel: false,
        ..AuxFlags::all()
    };
    let total = combine_losses(tape, [org, anc, attn, dis], &m.cfg, flags)?;
    let contrastive = m.loss_contrastive(tape, &out, ex.contrastive.as_ref())?;
    let spatial = m.loss_spatial(tape, &out, &ex.pairs)?;
    Ok(vec![anc, attn, dis, total, contrastive, spatial])
}

fn speaker_losses(m: &Speaker<f64>, tape: &mut Tape<f64>, inst: &Instance) -> Result<Vec<Var>> {
    let (u, s) = (&inst.utterance, &inst.scene);
    let ti = s.index_of(u.target_object).unwrap_or(0);
    let x_l = m.encode_objects(tape, s)?;
    let steps = m.decode_teacher_forced(tape, x_l, ti, &caption_with_eos(u))?;
    let ent = loss_ent(tape, &steps, u, s)?;
    let hidden: Vec<Var> = steps.iter().map(|st| st.hidden).collect();
    let feats = tape.concat(&hidden, 0)?;
    let logits = m.mention_head(tape, x_l, feats)?;
    let men = loss_men(tape, logits, &build_targets(u, s, false)?.y_men)?;
    Ok(vec![ent, men])
}

/// Checks `instances` random cases of every loss.
pub fn gradcheck_all(seed: u64, instances: usize) -> Result<GradcheckReport> {
    gradcheck_with_step(seed, instances, STEP)
}

pub fn gradcheck_with_step(seed: u64, instances: usize, h: f64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = ClassVocab::new(CLASSES);
    let mut worst: BTreeMap<&str, (f64, usize)> = LOSSES.iter().map(|&l| (l, (0.0, 0))).collect();
    for k in 0..instances {
        let inst = random_instance(&mut rng, &classes)?;
        let model_seed = seed.wrapping_mul(7919).wrapping_add(k as u64);
        let mut listener = tiny_listener(inst.example.targets.nm_token, model_seed)?;
        let mut speaker = tiny_speaker(model_seed)?;
        let le = relative_errors(&mut listener, |m, t| listener_losses(m, t, &inst), h)?;
        let se = relative_errors(&mut speaker, |m, t| speaker_losses(m, t, &inst), h)?;
        let sizes = [listener.params.num_scalars(), speaker.params.num_scalars()];
        for (names, errs, n) in [
            (&LISTENER_LOSSES[..], le, sizes[0]),
            (&SPEAKER_LOSSES[..], se, sizes[1]),
        ] {
            for (&name, e) in names.iter().zip(errs) {
                let w = worst.get_mut(name).expect("known loss");
                w.0 = w.0.max(e);
                w.1 = n;
            }
        }
    }
    let checks: Vec<LossCheck> = LOSSES
        .iter()
        .map(|&l| {
            let (e, n) = worst[l];
            LossCheck {
                loss: l.to_string(),
                instances,
                parameters: n,
                max_rel_err: e,
                passed: e < TOLERANCE,
            }
        })
        .collect();
    Ok(GradcheckReport {
        seed,
        step: h,
        tolerance: TOLERANCE,
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}
