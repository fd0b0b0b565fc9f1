//! Minibatch Adam training loops.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::generate::{class_vocab, lexicon, Corpus};
use crate::autodiff::{adam_step, AdamConfig, AdamState, ParamId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::listener::{AuxFlags, Listener, ListenerConfig, ListenerExample};
use crate::scalar::Scalar;
use crate::speaker::{Speaker, SpeakerAux, SpeakerConfig};
use crate::vocab::ClassVocab;

fn default_epochs() -> usize {
    30
}
fn default_batch() -> usize {
    16
}
fn default_lr() -> f64 {
    5e-4
}

/// Optimizer schedule shared by both models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            batch_size: default_batch(),
            lr: default_lr(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("epochs, batch_size and lr must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// Mean loss terms over one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub terms: BTreeMap<String, f64>,
}

impl EpochLog {
    fn new(epoch: usize, names: &[&str], sums: &[f64], n: usize) -> Result<Self> {
        let mean: Vec<f64> = sums.iter().map(|s| s / n as f64).collect();
        if !mean[0].is_finite() {
            return Err(Error::Config(format!("loss diverged at epoch {epoch}")));
        }
        Ok(EpochLog {
            epoch,
            loss: mean[0],
            terms: names.iter().zip(&mean[1..]).map(|(k, v)| (k.to_string(), *v)).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub model: String,
    pub aux: String,
    pub seed: u64,
    pub n_examples: usize,
    pub n_parameters: usize,
    pub epochs: Vec<EpochLog>,
}

/// Precomputes supervision for every utterance of `corpus`.
pub fn prepare_examples(
    corpus: &Corpus,
    classes: &ClassVocab,
    nm_token: bool,
    seed: u64,
) -> Result<Vec<ListenerExample>> {
    let scenes = corpus.scene_map();
    corpus
        .utterances
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let s = scenes
                .get(&u.scene_id)
                .ok_or_else(|| Error::MissingScene(u.scene_id.clone()))?;
            ListenerExample::prepare(
                u,
                s,
                classes,
                nm_token,
                seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
            )
        })
        .collect()
}

/// Accumulates per-example gradients into a running sum.
pub(crate) fn accumulate<F: Scalar>(sum: &mut BTreeMap<ParamId, Tensor<F>>, g: BTreeMap<ParamId, Tensor<F>>) {
    for (id, t) in g {
        match sum.get_mut(&id) {
            Some(acc) => acc.add_assign(&t),
            None => {
                sum.insert(id, t);
            }
        }
    }
}

pub(crate) fn batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Listener for the generator lexicon with sizes filled in from it.
pub fn new_listener<F: Scalar>(cfg: &ListenerConfig, n_classes: usize, seed: u64) -> Result<Listener<F>> {
    let vocab = lexicon();
    let classes = class_vocab(n_classes);
    let cfg = ListenerConfig {
        vocab_size: if cfg.vocab_size == 0 {
            vocab.len()
        } else {
            cfg.vocab_size
        },
        n_classes: if cfg.n_classes == 0 {
            classes.len()
        } else {
            cfg.n_classes
        },
        ..cfg.clone()
    };
    Listener::new(cfg, vocab, classes, seed)
}

/// Trains `model` in place on prepared examples.
pub fn fit_listener<F: Scalar>(
    model: &mut Listener<F>,
    examples: &[ListenerExample],
    train: &TrainConfig,
    flags: AuxFlags,
    seed: u64,
) -> Result<TrainReport> {
    train.validate()?;
    if examples.is_empty() {
        return Err(Error::Config("no training examples".into()));
    }
    let adam = train.adam();
    let mut state = AdamState::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001);
    let mut logs = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        let mut sums = [0.0f64; 6];
        for batch in batches(examples.len(), train.batch_size, &mut rng) {
            let mut grads = BTreeMap::new();
            for &i in &batch {
                let ex = &examples[i];
                let mut tape = Tape::new();
                let out = model.forward(&mut tape, &ex.scene, &ex.tokens)?;
                let terms = model.loss_total(&mut tape, &out, ex, flags)?;
                for (acc, v) in
                    sums.iter_mut()
                        .zip([terms.total, terms.org, terms.anc, terms.attn, terms.dis, terms.rel])
                {
                    *acc += tape.item(v)?.to_f64_lossy();
                }
                accumulate(&mut grads, tape.backward(terms.total)?.into_params());
            }
            let k = F::one() / F::of(batch.len() as f64);
            for g in grads.values_mut() {
                g.scale_in_place(k);
            }
            adam_step(&mut model.params, &grads, &mut state, &adam);
        }
        logs.push(EpochLog::new(
            epoch,
            &["org", "anc", "attn", "dis", "rel"],
            &sums,
            examples.len(),
        )?);
    }
    Ok(TrainReport {
        model: "listener".into(),
        aux: flags.label(),
        seed,
        n_examples: examples.len(),
        n_parameters: model.params.num_scalars(),
        epochs: logs,
    })
}

/// Initializes a listener from `seed` and trains it on `corpus`.
pub fn train_listener<F: Scalar>(
    corpus: &Corpus,
    cfg: &ListenerConfig,
    n_classes: usize,
    train: &TrainConfig,
    flags: AuxFlags,
    seed: u64,
) -> Result<(Listener<F>, TrainReport)> {
    let mut model = new_listener::<F>(cfg, n_classes, seed)?;
    let examples = prepare_examples(corpus, &model.classes, model.cfg.use_nm_token, seed)?;
    let report = fit_listener(&mut model, &examples, train, flags, seed)?;
    Ok((model, report))
}

/// Speaker for the generator lexicon, optionally starting from a listener's
/// object encoder.
pub fn new_speaker<F: Scalar>(
    cfg: &SpeakerConfig,
    n_classes: usize,
    seed: u64,
    init: Option<&Listener<F>>,
) -> Result<Speaker<F>> {
    let vocab = lexicon();
    let classes = class_vocab(n_classes);
    let cfg = SpeakerConfig {
        vocab_size: if cfg.vocab_size == 0 {
            vocab.len()
        } else {
            cfg.vocab_size
        },
        n_classes: if cfg.n_classes == 0 {
            classes.len()
        } else {
            cfg.n_classes
        },
        ..cfg.clone()
    };
    let mut model = Speaker::new(cfg, vocab, classes, seed)?;
    if let Some(l) = init {
        model.init_from_listener(l)?;
    }
    Ok(model)
}

/// Teacher-forced training over every utterance of `corpus`.
pub fn fit_speaker<F: Scalar>(
    model: &mut Speaker<F>,
    corpus: &Corpus,
    train: &TrainConfig,
    flags: SpeakerAux,
    seed: u64,
) -> Result<TrainReport> {
    train.validate()?;
    if corpus.utterances.is_empty() {
        return Err(Error::Config("no training examples".into()));
    }
    let scenes = corpus.scene_map();
    let pairs: Vec<_> = corpus
        .utterances
        .iter()
        .map(|u| {
            scenes
                .get(&u.scene_id)
                .map(|s| (u, s))
                .ok_or_else(|| Error::MissingScene(u.scene_id.clone()))
        })
        .collect::<Result<_>>()?;
    let adam = train.adam();
    let mut state = AdamState::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0002);
    let mut logs = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        let mut sums = [0.0f64; 4];
        for batch in batches(pairs.len(), train.batch_size, &mut rng) {
            let mut grads = BTreeMap::new();
            for &i in &batch {
                let (u, s) = pairs[i];
                let mut tape = Tape::new();
                let l = model.losses(&mut tape, u, s, flags)?;
                for (acc, v) in sums.iter_mut().zip([l.total, l.caption, l.ent, l.men]) {
                    *acc += tape.item(v)?.to_f64_lossy();
                }
                accumulate(&mut grads, tape.backward(l.total)?.into_params());
            }
            let k = F::one() / F::of(batch.len() as f64);
            for g in grads.values_mut() {
                g.scale_in_place(k);
            }
            adam_step(&mut model.params, &grads, &mut state, &adam);
        }
        logs.push(EpochLog::new(epoch, &["caption", "ent", "men"], &sums, pairs.len())?);
    }
    Ok(TrainReport {
        model: "speaker".into(),
        aux: flags.label(),
        seed,
        n_examples: pairs.len(),
        n_parameters: model.params.num_scalars(),
        epochs: logs,
    })
}

pub fn train_speaker<F: Scalar>(
    corpus: &Corpus,
    cfg: &SpeakerConfig,
    n_classes: usize,
    train: &TrainConfig,
    flags: SpeakerAux,
    seed: u64,
    init: Option<&Listener<F>>,
) -> Result<(Speaker<F>, TrainReport)> {
    let mut model = new_speaker(cfg, n_classes, seed, init)?;
    let report = fit_speaker(&mut model, corpus, train, flags, seed)?;
    Ok((model, report))
}
