//! Box-geometry object encoder used by both models.

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{EncoderLayer, Mlp};
use crate::scalar::Scalar;
use crate::scene::Scene;
use crate::vocab::ClassVocab;

/// Parameter-name prefix of the encoder; a speaker can load it from a listener.
pub const ENCODER_PREFIX: &str = "enc.";

const GEOMETRY_DIM: usize = 6;

#[derive(Debug, Clone)]
pub struct ObjectEncoder {
    class_emb: ParamId,
    embed: Mlp,
    layers: Vec<EncoderLayer>,
}

/// `[M x 6]` rows of box center and size.
pub fn geometry_features<F: Scalar>(s: &Scene) -> Tensor<F> {
    let data = s
        .objects
        .iter()
        .flat_map(|o| {
            let (c, z) = (o.bbox.center, o.bbox.size);
            [c.x, c.y, c.z, z.x, z.y, z.z]
        })
        .map(F::of)
        .collect();
    Tensor::from_parts(vec![s.objects.len(), GEOMETRY_DIM], data)
}

impl ObjectEncoder {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        d: usize,
        n_classes: usize,
        n_layers: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let class_emb = store.add_normal(&format!("{ENCODER_PREFIX}class_emb"), &[n_classes, d], 0.5, rng)?;
        let embed = Mlp::new(store, &format!("{ENCODER_PREFIX}embed"), GEOMETRY_DIM + d, d, d, rng)?;
        let layers = (0..n_layers)
            .map(|i| EncoderLayer::new(store, &format!("{ENCODER_PREFIX}self{i}"), d, rng))
            .collect::<Result<_>>()?;
        Ok(ObjectEncoder {
            class_emb,
            embed,
            layers,
        })
    }

    /// Object features `[M x d]`; equivariant under object reordering.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        scene: &Scene,
        classes: &ClassVocab,
    ) -> Result<Var> {
        if scene.objects.is_empty() {
            return Err(Error::shape("encode_objects", "scene has no objects"));
        }
        let ids: Vec<usize> = scene.objects.iter().map(|o| classes.id(&o.class_label)).collect();
        let table = tape.param(store, self.class_emb);
        let cls = tape.embedding_lookup(table, &ids)?;
        let geo = tape.constant(geometry_features(scene));
        let x = tape.concat(&[geo, cls], 1)?;
        let mut x = self.embed.forward(tape, store, x)?;
        for layer in &self.layers {
            x = layer.forward(tape, store, x)?;
        }
        Ok(x)
    }
}
