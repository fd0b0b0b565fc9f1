//! Composite operations built from tape primitives.

use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `x * w + b` with `b` broadcast over rows.
pub fn linear<F: Scalar>(tape: &mut Tape<F>, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    tape.add(xw, b)
}

/// Single-head attention. Returns the attended values `[M x d]` and the raw
/// scores `Q K^T / sqrt(d)` as `[M x N]`, before the softmax.
pub fn scaled_dot_attention<F: Scalar>(tape: &mut Tape<F>, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let d = *tape
        .shape(q)
        .last()
        .ok_or_else(|| Error::shape("attention", "query must be a matrix"))?;
    if tape.shape(k).last() != Some(&d) {
        return Err(Error::shape(
            "attention",
            format!("query {:?} vs key {:?}", tape.shape(q), tape.shape(k)),
        ));
    }
    if tape.shape(k).first() != tape.shape(v).first() {
        return Err(Error::shape(
            "attention",
            format!("key {:?} vs value {:?}", tape.shape(k), tape.shape(v)),
        ));
    }
    let raw = tape.matmul_nt(q, k)?;
    let scores = tape.scale(raw, F::one() / F::of(d as f64).sqrt());
    let probs = tape.softmax(scores);
    let out = tape.matmul(probs, v)?;
    Ok((out, scores))
}

/// Weights of an LSTM cell with gate order input, forget, cell, output.
#[derive(Debug, Clone, Copy)]
pub struct LstmWeights {
    /// `[input x 4h]`
    pub w_ih: Var,
    /// `[h x 4h]`
    pub w_hh: Var,
    /// `[4h]`
    pub bias: Var,
}

/// One LSTM step on row vectors `x [1 x input]`, `h`, `c` `[1 x hidden]`.
pub fn lstm_cell<F: Scalar>(tape: &mut Tape<F>, x: Var, h: Var, c: Var, w: &LstmWeights) -> Result<(Var, Var)> {
    let hidden = tape.shape(h)[1];
    let xi = tape.matmul(x, w.w_ih)?;
    let hh = tape.matmul(h, w.w_hh)?;
    let pre = tape.add(xi, hh)?;
    let gates = tape.add(pre, w.bias)?;
    if tape.shape(gates)[1] != 4 * hidden {
        return Err(Error::shape(
            "lstm_cell",
            format!("gates {:?} for hidden {hidden}", tape.shape(gates)),
        ));
    }
    let gi = tape.slice_cols(gates, 0, hidden)?;
    let gf = tape.slice_cols(gates, hidden, 2 * hidden)?;
    let gg = tape.slice_cols(gates, 2 * hidden, 3 * hidden)?;
    let go = tape.slice_cols(gates, 3 * hidden, 4 * hidden)?;
    let i = tape.sigmoid(gi);
    let f = tape.sigmoid(gf);
    let g = tape.tanh(gg);
    let o = tape.sigmoid(go);
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_next = tape.add(fc, ig)?;
    let tc = tape.tanh(c_next);
    let h_next = tape.mul(o, tc)?;
    Ok((h_next, c_next))
}

/// Cosine similarity of each row of `a [n x d]` with the single row `r [1 x d]`,
/// returned as a vector of length `n`.
pub fn cosine_rows<F: Scalar>(tape: &mut Tape<F>, a: Var, r: Var) -> Result<Var> {
    let eps = F::of(1e-12);
    let an = tape.l2_normalize(a, eps);
    let rn = tape.l2_normalize(r, eps);
    let s = tape.matmul_nt(an, rn)?;
    let n = tape.shape(s)[0];
    tape.reshape(s, &[n])
}
