//! Layers. A layer owns [`ParamId`]s and a `forward` that extends a
//! [`Graph`]; it never stores tensors itself, so freezing/optimizing is
//! entirely the [`ParamSet`]'s business.

use super::graph::{Graph, NodeId};
use super::param::{ParamId, ParamSet};
use super::tensor::{Scalar, Tensor};
use crate::rng::Rng;

/// x W + b.
#[derive(Debug, Clone)]
pub struct Affine {
    pub w: ParamId,
    pub b: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Affine {
    pub fn new<E: Scalar>(
        ps: &mut ParamSet<E>,
        name: &str,
        din: usize,
        dout: usize,
        rng: &mut Rng,
    ) -> Self {
        let w = ps.add_xavier(&format!("{name}.w"), din, dout, rng);
        let b = ps.add_zeros(&format!("{name}.b"), 1, dout);
        Affine { w, b, din, dout }
    }

    pub fn forward<E: Scalar>(&self, g: &mut Graph<E>, x: NodeId) -> NodeId {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w);
        g.add_row_broadcast(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<E: Scalar>(ps: &mut ParamSet<E>, name: &str, d: usize) -> Self {
        let gain = ps.add(&format!("{name}.g"), Tensor::filled(1, d, E::one()));
        let bias = ps.add_zeros(&format!("{name}.b"), 1, d);
        LayerNorm { gain, bias }
    }

    pub fn forward<E: Scalar>(&self, g: &mut Graph<E>, x: NodeId) -> NodeId {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm_rows(x, gain, bias)
    }
}

/// Two-layer MLP with gelu: x -> W1 -> gelu -> W2.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Affine,
    pub fc2: Affine,
}

impl Mlp {
    pub fn new<E: Scalar>(
        ps: &mut ParamSet<E>,
        name: &str,
        din: usize,
        hidden: usize,
        dout: usize,
        rng: &mut Rng,
    ) -> Self {
        Mlp {
            fc1: Affine::new(ps, &format!("{name}.fc1"), din, hidden, rng),
            fc2: Affine::new(ps, &format!("{name}.fc2"), hidden, dout, rng),
        }
    }

    pub fn forward<E: Scalar>(&self, g: &mut Graph<E>, x: NodeId) -> NodeId {
        let h = self.fc1.forward(g, x);
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Bidirectional multi-head self-attention (no masking: all consumers are
/// encoders or full-sequence denoisers).
#[derive(Debug, Clone)]
pub struct MultiHeadSelfAttention {
    pub wq: Affine,
    pub wk: Affine,
    pub wv: Affine,
    pub wo: Affine,
    pub n_heads: usize,
    pub d_model: usize,
}

impl MultiHeadSelfAttention {
    pub fn new<E: Scalar>(
        ps: &mut ParamSet<E>,
        name: &str,
        d_model: usize,
        n_heads: usize,
        rng: &mut Rng,
    ) -> Self {
        assert_eq!(d_model % n_heads, 0, "d_model must divide into heads");
        MultiHeadSelfAttention {
            wq: Affine::new(ps, &format!("{name}.wq"), d_model, d_model, rng),
            wk: Affine::new(ps, &format!("{name}.wk"), d_model, d_model, rng),
            wv: Affine::new(ps, &format!("{name}.wv"), d_model, d_model, rng),
            wo: Affine::new(ps, &format!("{name}.wo"), d_model, d_model, rng),
            n_heads,
            d_model,
        }
    }

    pub fn forward<E: Scalar>(&self, g: &mut Graph<E>, x: NodeId) -> NodeId {
        self.forward_kv(g, x, x)
    }

    /// Queries from `xq`, keys/values from `xkv` (cross-attention reuse;
    /// self-attention passes the same node twice).
    pub fn forward_kv<E: Scalar>(&self, g: &mut Graph<E>, xq: NodeId, xkv: NodeId) -> NodeId {
        let dh = self.d_model / self.n_heads;
        let scale = E::from_f64(1.0 / (dh as f64).sqrt());
        let q = self.wq.forward(g, xq);
        let k = self.wk.forward(g, xkv);
        let v = self.wv.forward(g, xkv);
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let kt = g.transpose(kh);
            let logits = g.matmul(qh, kt);
            let logits = g.scale(logits, scale);
            let attn = g.softmax_rows(logits);
            heads.push(g.matmul(attn, vh));
        }
        let cat = g.concat_cols(&heads);
        self.wo.forward(g, cat)
    }
}

/// Pre-norm transformer block: x + attn(ln1(x)), then x + mlp(ln2(x)).
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadSelfAttention,
    pub ln2: LayerNorm,
    pub ffn: Mlp,
}

impl TransformerBlock {
    pub fn new<E: Scalar>(
        ps: &mut ParamSet<E>,
        name: &str,
        d_model: usize,
        n_heads: usize,
        ffn_mult: usize,
        rng: &mut Rng,
    ) -> Self {
        TransformerBlock {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), d_model),
            attn: MultiHeadSelfAttention::new(ps, &format!("{name}.attn"), d_model, n_heads, rng),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), d_model),
            ffn: Mlp::new(
                ps,
                &format!("{name}.ffn"),
                d_model,
                d_model * ffn_mult,
                d_model,
                rng,
            ),
        }
    }

    pub fn forward<E: Scalar>(&self, g: &mut Graph<E>, x: NodeId) -> NodeId {
        let n = self.ln1.forward(g, x);
        let a = self.attn.forward(g, n);
        let x = g.add(x, a);
        let n = self.ln2.forward(g, x);
        let f = self.ffn.forward(g, n);
        g.add(x, f)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<E: Scalar>(
        ps: &mut ParamSet<E>,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut Rng,
    ) -> Self {
        let table = ps.add_normal(&format!("{name}.table"), vocab, dim, 0.02, rng);
        Embedding { table, vocab, dim }
    }

    pub fn forward<E: Scalar>(&self, g: &mut Graph<E>, ids: &[usize]) -> NodeId {
        let t = g.param(self.table);
        g.embed_lookup(t, ids)
    }
}

/// Fixed sinusoidal positional encoding, n x d.
pub fn sinusoidal_positions<E: Scalar>(n: usize, d: usize) -> Tensor<E> {
    let mut t = Tensor::zeros(n, d);
    for pos in 0..n {
        for j in 0..d {
            let pair = (j / 2) as f64;
            let freq = 1.0 / 10_000f64.powf(2.0 * pair / d as f64);
            let angle = pos as f64 * freq;
            let v = if j % 2 == 0 { angle.sin() } else { angle.cos() };
            t.set(pos, j, E::from_f64(v));
        }
    }
    t
}
