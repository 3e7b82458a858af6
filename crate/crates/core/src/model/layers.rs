//! Graph-level building blocks of the encoder stack and the classification head.
//!
//! Every function accepts either an unbatched `[T, D]` sequence or a batched
//! `[B, T, D]` one and returns the same layout it was given.

use crate::error::{shape_err, Result};
use crate::tensor::{Graph, Var};

/// Per-head query/key/value maps `[D, D_K]` and the output map `[h * D_V, D]`.
#[derive(Clone, Debug)]
pub struct AttentionVars {
    pub query: Vec<Var>,
    pub key: Vec<Var>,
    pub value: Vec<Var>,
    pub output: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormVars {
    pub gain: Var,
    pub bias: Var,
}

/// Two-layer perceptron `D -> 2D -> D` with GELU after the first layer.
#[derive(Clone, Copy, Debug)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub ln1: LayerNormVars,
    pub attention: AttentionVars,
    pub ln2: LayerNormVars,
    pub mlp: MlpVars,
}

/// Hidden layer `D -> D/2` with ReLU, output layer `D/2 -> δ` with sigmoid.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// How encoder inputs are formed from earlier outputs.
#[derive(Clone, Debug)]
pub enum Connectivity {
    /// Encoder ℓ reads a learned `[ℓ·D, D]` projection of `[z_0; out_1; ..; out_{ℓ-1}]`.
    Dense(Vec<Var>),
    /// Encoder ℓ reads the previous encoder's output unchanged.
    Sequential,
}

fn batched(g: &mut Graph, z: Var) -> Result<(Var, bool)> {
    match g.shape(z).to_vec()[..] {
        [t, d] => Ok((g.reshape(z, &[1, t, d])?, true)),
        [_, _, _] => Ok((z, false)),
        ref s => Err(shape_err!("expected [T, D] or [B, T, D], got {s:?}")),
    }
}

fn unbatch(g: &mut Graph, z: Var, was_unbatched: bool) -> Result<Var> {
    if was_unbatched {
        let s = g.shape(z).to_vec();
        g.reshape(z, &s[1..])
    } else {
        Ok(z)
    }
}

fn affine(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_broadcast(y, b)
}

/// Multi-head scaled dot-product self-attention.
///
/// Returns the `[.., T, D]` output and one `[B, T, T]` weight matrix per head.
pub fn multi_head_self_attention(g: &mut Graph, z: Var, p: &AttentionVars) -> Result<(Var, Vec<Var>)> {
    let (z3, unb) = batched(g, z)?;
    let d = g.shape(z3)[2];
    let h = p.query.len();
    if h == 0 || p.key.len() != h || p.value.len() != h {
        return Err(shape_err!("attention needs matching non-empty q/k/v head lists"));
    }
    let dk = g.shape(p.query[0])[1];
    for &w in p.query.iter().chain(&p.key).chain(&p.value) {
        if g.shape(w) != [d, dk] {
            return Err(shape_err!("head map {:?} does not match [D={d}, D_K={dk}]", g.shape(w)));
        }
    }
    if g.shape(p.output) != [h * dk, d] {
        return Err(shape_err!("output map {:?} does not match [{}, {d}]", g.shape(p.output), h * dk));
    }
    let scale = 1.0 / (dk as f64).sqrt();
    let mut heads = Vec::with_capacity(h);
    let mut weights = Vec::with_capacity(h);
    for i in 0..h {
        let q = g.matmul(z3, p.query[i])?;
        let k = g.matmul(z3, p.key[i])?;
        let v = g.matmul(z3, p.value[i])?;
        let kt = g.transpose_last2(k)?;
        let scores = g.bmm(q, kt)?;
        let scores = g.scale(scores, scale);
        let a = g.softmax_rows(scores)?;
        heads.push(g.bmm(a, v)?);
        weights.push(a);
    }
    let cat = if h == 1 { heads[0] } else { g.concat_last(&heads)? };
    let out = g.matmul(cat, p.output)?;
    Ok((unbatch(g, out, unb)?, weights))
}

/// `z' = MSA(LN(z)) + z`, then `MLP(LN(z')) + z'`.
pub fn encoder_block(g: &mut Graph, z: Var, p: &EncoderVars, eps: f64) -> Result<(Var, Vec<Var>)> {
    let n1 = g.layer_norm(z, p.ln1.gain, p.ln1.bias, eps)?;
    let (attn, weights) = multi_head_self_attention(g, n1, &p.attention)?;
    let z1 = g.add(attn, z)?;
    let n2 = g.layer_norm(z1, p.ln2.gain, p.ln2.bias, eps)?;
    let hidden = affine(g, n2, p.mlp.w1, p.mlp.b1)?;
    let hidden = g.gelu(hidden);
    let m = affine(g, hidden, p.mlp.w2, p.mlp.b2)?;
    Ok((g.add(m, z1)?, weights))
}

/// Runs the encoder stack on `z0` and returns `y' = LN(row 0 of the last output)`,
/// shaped `[B, D]` (or `[D]` for unbatched input), plus all attention weights.
pub fn dense_encoder_stack(
    g: &mut Graph,
    z0: Var,
    encoders: &[EncoderVars],
    connectivity: &Connectivity,
    final_ln: LayerNormVars,
    eps: f64,
) -> Result<(Var, Vec<Var>)> {
    if encoders.is_empty() {
        return Err(shape_err!("encoder stack needs at least one encoder"));
    }
    if let Connectivity::Dense(t) = connectivity {
        if t.len() != encoders.len() {
            return Err(shape_err!("{} transitions for {} encoders", t.len(), encoders.len()));
        }
    }
    let (z0, unb) = batched(g, z0)?;
    let mut outputs = vec![z0];
    let mut weights = Vec::new();
    for (l, enc) in encoders.iter().enumerate() {
        let input = match connectivity {
            Connectivity::Dense(t) => {
                let cat = if l == 0 { z0 } else { g.concat_last(&outputs)? };
                g.matmul(cat, t[l])?
            }
            Connectivity::Sequential => outputs[l],
        };
        let (out, w) = encoder_block(g, input, enc, eps)?;
        outputs.push(out);
        weights.extend(w);
    }
    let last = outputs[outputs.len() - 1];
    let s = g.shape(last).to_vec();
    let cls = g.narrow(last, 1, 0, 1)?;
    let cls = g.reshape(cls, &[s[0], s[2]])?;
    let y = g.layer_norm(cls, final_ln.gain, final_ln.bias, eps)?;
    Ok((unbatch(g, y, unb)?, weights))
}

/// `sigmoid(W2 relu(W1 y + b1) + b2)` on `[.., D]`.
pub fn classify_head(g: &mut Graph, y: Var, p: &HeadVars) -> Result<Var> {
    let hdn = affine(g, y, p.w1, p.b1)?;
    let hdn = g.relu(hdn);
    let out = affine(g, hdn, p.w2, p.b2)?;
    Ok(g.sigmoid(out))
}
