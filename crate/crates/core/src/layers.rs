//! Parameterized building blocks shared by the listener and the speaker.

use rand::Rng;

use crate::autodiff::{linear, scaled_dot_attention, ParamId, ParamStore, Tape, Var};
use crate::error::Result;
use crate::scalar::Scalar;

const NORM_EPS: f64 = 1e-5;

/// Affine map `x W + b`.
#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        inp: usize,
        out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Dense {
            w: store.add_xavier(&format!("{name}.w"), inp, out, rng)?,
            b: store.add_zeros(&format!("{name}.b"), &[out])?,
        })
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        linear(tape, x, w, b)
    }
}

/// Two affine layers with a GELU between them.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub hidden: Dense,
    pub out: Dense,
}

impl Mlp {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        inp: usize,
        hidden: usize,
        out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Mlp {
            hidden: Dense::new(store, &format!("{name}.0"), inp, hidden, rng)?,
            out: Dense::new(store, &format!("{name}.1"), hidden, out, rng)?,
        })
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, store, x)?;
        let h = tape.gelu(h);
        self.out.forward(tape, store, h)
    }
}

/// Row-wise layer normalization with learned gain and bias.
#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, d: usize) -> Result<Self> {
        Ok(Norm {
            gain: store.add_ones(&format!("{name}.g"), &[d])?,
            bias: store.add_zeros(&format!("{name}.b"), &[d])?,
        })
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x, F::of(NORM_EPS));
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        let scaled = tape.mul(n, g)?;
        tape.add(scaled, b)
    }
}

/// Single-head attention with query, key, value and output projections.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub q: ParamId,
    pub k: ParamId,
    pub v: ParamId,
    pub out: Dense,
}

impl Attention {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, d: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Attention {
            q: store.add_xavier(&format!("{name}.q"), d, d, rng)?,
            k: store.add_xavier(&format!("{name}.k"), d, d, rng)?,
            v: store.add_xavier(&format!("{name}.v"), d, d, rng)?,
            out: Dense::new(store, &format!("{name}.o"), d, d, rng)?,
        })
    }

    /// Returns the projected output `[M x d]` and pre-softmax scores `[M x N]`.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        queries: Var,
        memory: Var,
    ) -> Result<(Var, Var)> {
        let (wq, wk, wv) = (
            tape.param(store, self.q),
            tape.param(store, self.k),
            tape.param(store, self.v),
        );
        let q = tape.matmul(queries, wq)?;
        let k = tape.matmul(memory, wk)?;
        let v = tape.matmul(memory, wv)?;
        let (ctx, scores) = scaled_dot_attention(tape, q, k, v)?;
        Ok((self.out.forward(tape, store, ctx)?, scores))
    }
}

/// Post-norm self-attention block.
#[derive(Debug, Clone, Copy)]
pub struct EncoderLayer {
    pub attn: Attention,
    pub norm1: Norm,
    pub ffn: Mlp,
    pub norm2: Norm,
}

impl EncoderLayer {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, d: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(EncoderLayer {
            attn: Attention::new(store, &format!("{name}.attn"), d, rng)?,
            norm1: Norm::new(store, &format!("{name}.ln1"), d)?,
            ffn: Mlp::new(store, &format!("{name}.ffn"), d, 2 * d, d, rng)?,
            norm2: Norm::new(store, &format!("{name}.ln2"), d)?,
        })
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let (a, _) = self.attn.forward(tape, store, x, x)?;
        let x = tape.add(x, a)?;
        let x = self.norm1.forward(tape, store, x)?;
        let f = self.ffn.forward(tape, store, x)?;
        let x = tape.add(x, f)?;
        self.norm2.forward(tape, store, x)
    }
}

/// Self-attention, cross-attention to a memory, then a feed-forward block.
#[derive(Debug, Clone, Copy)]
pub struct CrossLayer {
    pub self_attn: Attention,
    pub norm1: Norm,
    pub cross: Attention,
    pub norm2: Norm,
    pub ffn: Mlp,
    pub norm3: Norm,
}

impl CrossLayer {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, d: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(CrossLayer {
            self_attn: Attention::new(store, &format!("{name}.self"), d, rng)?,
            norm1: Norm::new(store, &format!("{name}.ln1"), d)?,
            cross: Attention::new(store, &format!("{name}.cross"), d, rng)?,
            norm2: Norm::new(store, &format!("{name}.ln2"), d)?,
            ffn: Mlp::new(store, &format!("{name}.ffn"), d, 2 * d, d, rng)?,
            norm3: Norm::new(store, &format!("{name}.ln3"), d)?,
        })
    }

    /// Returns the updated queries and the pre-softmax cross-attention scores.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: Var,
        memory: Var,
    ) -> Result<(Var, Var)> {
        let (a, _) = self.self_attn.forward(tape, store, x, x)?;
        let x = tape.add(x, a)?;
        let x = self.norm1.forward(tape, store, x)?;
        let (c, scores) = self.cross.forward(tape, store, x, memory)?;
        let x = tape.add(x, c)?;
        let x = self.norm2.forward(tape, store, x)?;
        let f = self.ffn.forward(tape, store, x)?;
        let x = tape.add(x, f)?;
        Ok((self.norm3.forward(tape, store, x)?, scores))
    }
}
