//! Transformer building blocks recorded onto a [`Graph`].

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::matrix::Matrix;
use crate::params::{ParamId, ParamStore};

/// Affine map `x · W + b` applied row-wise.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), Matrix::uniform(in_dim, out_dim, bound, rng));
        let bias = store.add(format!("{name}.bias"), Matrix::zeros(1, out_dim));
        Self { weight, bias, in_dim, out_dim }
    }

    /// All-zero weights and bias.
    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Matrix::zeros(in_dim, out_dim));
        let bias = store.add(format!("{name}.bias"), Matrix::zeros(1, out_dim));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    pub fn duplicate(&self, store: &mut ParamStore, name: &str) -> Self {
        Self {
            weight: store.duplicate(self.weight, format!("{name}.weight")),
            bias: store.duplicate(self.bias, format!("{name}.bias")),
            in_dim: self.in_dim,
            out_dim: self.out_dim,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// Row-wise layer normalization with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Matrix::filled(1, dim, 1.0));
        let bias = store.add(format!("{name}.bias"), Matrix::zeros(1, dim));
        Self { gain, bias, eps: 1e-5 }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let n = g.layer_norm(x, self.eps);
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        let y = g.mul_row(n, gain);
        g.add_row(y, bias)
    }

    pub fn duplicate(&self, store: &mut ParamStore, name: &str) -> Self {
        Self {
            gain: store.duplicate(self.gain, format!("{name}.gain")),
            bias: store.duplicate(self.bias, format!("{name}.bias")),
            eps: self.eps,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gain, self.bias]
    }
}

/// Stack of linear layers with SiLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden..., out]`.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output dims");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h);
            if i != last {
                h = g.silu(h);
            }
        }
        h
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn duplicate(&self, store: &mut ParamStore, name: &str) -> Self {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| l.duplicate(store, &format!("{name}.{i}")))
            .collect();
        Self { layers }
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Linear::params).collect()
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Self {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            output: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
        }
    }

    /// Attends `query` rows over `context` rows.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, query: Var, context: Var) -> Var {
        self.forward_with_weights(g, store, query, context).0
    }

    /// Same as [`forward`](Self::forward), also returning the per-head
    /// attention probability nodes (`Lq x Lk`, rows sum to one).
    pub fn forward_with_weights(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query: Var,
        context: Var,
    ) -> (Var, Vec<Var>) {
        let q = self.query.forward(g, store, query);
        let k = self.key.forward(g, store, context);
        let v = self.value.forward(g, store, context);
        let dim = self.query.out_dim;
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, dh),
                    g.slice_cols(k, h * dh, dh),
                    g.slice_cols(v, h * dh, dh),
                )
            };
            let scores = g.matmul_nt(qh, kh);
            let scores = g.scale(scores, scale);
            let p = g.softmax(scores);
            probs.push(p);
            outs.push(g.matmul(p, vh));
        }
        let merged = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        (self.output.forward(g, store, merged), probs)
    }

    pub fn duplicate(&self, store: &mut ParamStore, name: &str) -> Self {
        Self {
            query: self.query.duplicate(store, &format!("{name}.q")),
            key: self.key.duplicate(store, &format!("{name}.k")),
            value: self.value.duplicate(store, &format!("{name}.v")),
            output: self.output.duplicate(store, &format!("{name}.o")),
            heads: self.heads,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.query, &self.key, &self.value, &self.output].iter().flat_map(|l| l.params()).collect()
    }
}

/// Pre-norm transformer encoder layer: self-attention then a position-wise
/// feed-forward network, each wrapped in a residual connection.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ff: Mlp,
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            ff: Mlp::new(store, &format!("{name}.ff"), &[dim, ff_dim, dim], rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let n = self.norm1.forward(g, store, x);
        let a = self.attn.forward(g, store, n, n);
        let x = g.add(x, a);
        let n = self.norm2.forward(g, store, x);
        let f = self.ff.forward(g, store, n);
        g.add(x, f)
    }

    pub fn duplicate(&self, store: &mut ParamStore, name: &str) -> Self {
        Self {
            norm1: self.norm1.duplicate(store, &format!("{name}.norm1")),
            attn: self.attn.duplicate(store, &format!("{name}.attn")),
            norm2: self.norm2.duplicate(store, &format!("{name}.norm2")),
            ff: self.ff.duplicate(store, &format!("{name}.ff")),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.norm1.params();
        p.extend(self.attn.params());
        p.extend(self.norm2.params());
        p.extend(self.ff.params());
        p
    }
}

/// Residual cross-attention: `query + Attn(LN(query), LN(context))`.
#[derive(Clone, Debug)]
pub struct CrossAttentionBlock {
    pub norm_query: LayerNorm,
    pub norm_context: LayerNorm,
    pub attn: MultiHeadAttention,
}

impl CrossAttentionBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            norm_query: LayerNorm::new(store, &format!("{name}.norm_q"), dim),
            norm_context: LayerNorm::new(store, &format!("{name}.norm_kv"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, query: Var, context: Var) -> Var {
        self.forward_with_weights(g, store, query, context).0
    }

    pub fn forward_with_weights(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query: Var,
        context: Var,
    ) -> (Var, Vec<Var>) {
        let q = self.norm_query.forward(g, store, query);
        let kv = self.norm_context.forward(g, store, context);
        let (a, probs) = self.attn.forward_with_weights(g, store, q, kv);
        (g.add(query, a), probs)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.norm_query.params();
        p.extend(self.norm_context.params());
        p.extend(self.attn.params());
        p
    }
}

/// Transformer-style sinusoidal embedding of a scalar position.
pub fn sinusoidal_embedding(position: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        out[i] = (position * freq).sin();
        out[half + i] = (position * freq).cos();
    }
    out
}

/// `len x dim` matrix of sinusoidal embeddings for positions `0..len`.
pub fn positional_encoding(len: usize, dim: usize) -> Matrix {
    let mut data = Vec::with_capacity(len * dim);
    for p in 0..len {
        data.extend(sinusoidal_embedding(p as f64, dim));
    }
    Matrix::from_vec(len, dim, data)
}
