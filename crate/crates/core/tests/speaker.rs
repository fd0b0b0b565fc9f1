use scanents::annotation::{GroundedUtterance, ScanEntity, TokenSpan};
use scanents::autodiff::Tensor;
use scanents::harness::train::{new_listener, new_speaker};
use scanents::listener::ListenerConfig;
use scanents::scene::{Box3, Scene, SceneObject, Vec3};
use scanents::speaker::{caption_with_eos, loss_ent, loss_men, DecodeStep, SpeakerAux, SpeakerConfig};
use scanents::{Error, Tape64};

fn scene() -> Scene {
    let obj = |id: i64, c: &str, x: f64| {
        SceneObject::new(
            id,
            c,
            Box3::axis_aligned(Vec3::new(x, 0.0, 0.4), Vec3::new(0.5, 0.5, 0.8)).unwrap(),
        )
    };
    Scene::new(
        "s",
        vec![obj(0, "chair", 0.0), obj(1, "chair", 2.0), obj(2, "table", 0.8)],
    )
    .unwrap()
}

fn utterance() -> GroundedUtterance {
    GroundedUtterance {
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
    }
}

fn bce(x: f64, y: f64) -> f64 {
    let p = 1.0 / (1.0 + (-x).exp());
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

#[test]
fn entity_loss_by_hand() {
    let (s, u) = (scene(), utterance());
    let mut tape = Tape64::new();
    let logits: Vec<[f64; 3]> = (0..7).map(|t| [t as f64 * 0.3, -0.5, 1.0 - t as f64 * 0.2]).collect();
    let steps: Vec<DecodeStep> = logits
        .iter()
        .map(|l| {
            let v = tape.constant(Tensor::vector(l.to_vec()));
            DecodeStep {
                word_logits: v,
                object_attention_logits: v,
                hidden: v,
            }
        })
        .collect();
    let got = loss_ent(&mut tape, &steps, &u, &s).unwrap();
    let mut terms = Vec::new();
    for (t, l) in logits.iter().enumerate() {
        let y = match t {
            0 | 1 => [1.0, 0.0, 0.0],
            4 | 5 => [0.0, 0.0, 1.0],
            _ => continue,
        };
        terms.push((0..3).map(|i| bce(l[i], y[i])).sum::<f64>() / 3.0);
    }
    let want = terms.iter().sum::<f64>() / terms.len() as f64;
    assert!((tape.item(got).unwrap() - want).abs() < 1e-12);

    let mut bare = u.clone();
    bare.entities.clear();
    let zero = loss_ent(&mut tape, &steps, &bare, &s).unwrap();
    assert_eq!(tape.item(zero).unwrap(), 0.0);
}

#[test]
fn mention_loss_by_hand() {
    let mut tape = Tape64::new();
    let x = tape.constant(Tensor::vector(vec![2.0, -1.0, 0.0]));
    let got = loss_men(&mut tape, x, &[1, 0, 1]).unwrap();
    let want = (bce(2.0, 1.0) + bce(-1.0, 0.0) + bce(0.0, 1.0)) / 3.0;
    assert!((tape.item(got).unwrap() - want).abs() < 1e-12);
}

#[test]
fn caption_ends_with_marker() {
    let c = caption_with_eos(&utterance());
    assert_eq!(c.len(), 7);
    assert_ne!(c[6], "table");
}

fn cfg(d: usize) -> SpeakerConfig {
    SpeakerConfig {
        d,
        ..SpeakerConfig::default()
    }
}

#[test]
fn listener_encoder_is_copied() {
    let lcfg = ListenerConfig {
        d: 8,
        ..ListenerConfig::default()
    };
    let listener = new_listener::<f64>(&lcfg, 10, 5).unwrap();
    let fresh = new_speaker::<f64>(&cfg(8), 10, 6, None).unwrap();
    let warm = new_speaker::<f64>(&cfg(8), 10, 6, Some(&listener)).unwrap();
    let mut copied = 0;
    for (_, p) in warm.params.iter() {
        let cold = fresh.params.tensor(fresh.params.id(&p.name).unwrap());
        if p.name.starts_with("enc.") {
            let src = listener.params.tensor(listener.params.id(&p.name).unwrap());
            assert_eq!(&p.tensor, src, "{}", p.name);
            copied += 1;
        } else {
            assert_eq!(&p.tensor, cold, "{}", p.name);
        }
    }
    assert!(copied > 0);
    let mut other = new_speaker::<f64>(&cfg(8), 7, 6, None).unwrap();
    assert!(matches!(
        other.init_from_listener(&listener),
        Err(Error::CheckpointMismatch(_))
    ));
}

#[test]
fn speaker_is_deterministic() {
    let (s, u) = (scene(), utterance());
    let a = new_speaker::<f64>(&cfg(8), 10, 9, None).unwrap();
    let b = new_speaker::<f64>(&cfg(8), 10, 9, None).unwrap();
    assert_eq!(a.greedy_decode(&s, 0, 12).unwrap(), b.greedy_decode(&s, 0, 12).unwrap());
    assert!(a.greedy_decode(&s, 0, 12).unwrap().len() <= 12);
    let loss = |m: &scanents::speaker::Speaker<f64>, aux: &str| {
        let mut tape = Tape64::new();
        let l = m.losses(&mut tape, &u, &s, SpeakerAux::parse(aux).unwrap()).unwrap();
        [l.total, l.caption, l.ent, l.men].map(|v| tape.item(v).unwrap())
    };
    assert_eq!(loss(&a, "ent,men"), loss(&b, "ent,men"));
    let [total, caption, _, _] = loss(&a, "");
    assert_eq!(total, caption);
    let [total, caption, ent, men] = loss(&a, "ent,men");
    let w = (a.cfg.entity_loss_weight, a.cfg.mention_loss_weight);
    assert!((total - (caption + w.0 * ent + w.1 * men)).abs() < 1e-12);
}

#[test]
fn checkpoint_roundtrip() {
    let a = new_speaker::<f64>(&cfg(8), 10, 3, None).unwrap();
    let ck = a.to_checkpoint().unwrap();
    let b = scanents::speaker::Speaker::<f64>::from_checkpoint(&ck).unwrap();
    assert_eq!(
        a.greedy_decode(&scene(), 1, 10).unwrap(),
        b.greedy_decode(&scene(), 1, 10).unwrap()
    );
    assert_eq!(ck.to_json().unwrap(), b.to_checkpoint().unwrap().to_json().unwrap());
}
