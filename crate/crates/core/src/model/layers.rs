//! Shared building blocks: linear maps, layer norm, multi-head attention,
//! pre-norm Transformer blocks and the 3×3 convolution.

use rand::Rng;

use crate::error::{dim_err, Result};
use crate::math::{init_uniform, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let weight = store.register(format!("{name}.weight"), init_uniform(vec![in_dim, out_dim], in_dim, rng));
        let bias = store.register(format!("{name}.bias"), init_uniform(vec![out_dim], in_dim, rng));
        Self { weight, bias: Some(bias), in_dim, out_dim }
    }

    pub fn no_bias(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let weight = store.register(format!("{name}.weight"), init_uniform(vec![in_dim, out_dim], in_dim, rng));
        Self { weight, bias: None, in_dim, out_dim }
    }

    /// Applies the map to the last axis of `x`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.last() != Some(&self.in_dim) {
            return Err(dim_err(format!("linear expects last dim {}, got {shape:?}", self.in_dim)));
        }
        let rows = shape.iter().product::<usize>() / self.in_dim;
        let flat = if shape.len() == 2 { x } else { g.reshape(x, &[rows, self.in_dim])? };
        let w = g.param(self.weight);
        let mut y = g.matmul(flat, w)?;
        if let Some(b) = self.bias {
            let b = g.param(b);
            y = g.add_broadcast(y, b)?;
        }
        if shape.len() == 2 {
            return Ok(y);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        g.reshape(y, &out_shape)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.register(format!("{name}.gain"), Tensor::full(vec![dim], 1.0)),
            bias: store.register(format!("{name}.bias"), Tensor::zeros(vec![dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, gain, bias)
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

/// Attention output plus the `[B·H, Lq, Lk]` weight tensor.
pub struct Attended {
    pub output: Var,
    pub weights: Var,
}

/// Expands a `[B, Lk]` key-validity mask to `[B·H, Lq, Lk]` score entries.
pub fn expand_key_mask(key_valid: &[bool], batch: usize, heads: usize, lq: usize) -> Vec<bool> {
    let lk = key_valid.len() / batch;
    let mut out = Vec::with_capacity(batch * heads * lq * lk);
    for b in 0..batch {
        let row = &key_valid[b * lk..(b + 1) * lk];
        for _ in 0..heads * lq {
            out.extend_from_slice(row);
        }
    }
    out
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert_eq!(dim % heads, 0, "{dim} not divisible by {heads} heads");
        Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.key"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
            heads,
            dim,
        }
    }

    /// `queries` is `[B, Lq, D]`, `keys` is `[B, Lk, D]`; `key_valid` marks
    /// the `B·Lk` usable keys. `bias`, when given, is a `[B, Lq, Lk]` term
    /// added to the scaled scores of every head before the softmax.
    pub fn forward(
        &self,
        g: &mut Graph,
        queries: Var,
        keys: Var,
        key_valid: &[bool],
        bias: Option<Var>,
    ) -> Result<Attended> {
        let (sq, sk) = (g.shape(queries).to_vec(), g.shape(keys).to_vec());
        if sq.len() != 3 || sk.len() != 3 || sq[0] != sk[0] || sq[2] != self.dim || sk[2] != self.dim {
            return Err(dim_err(format!("attention over {sq:?} and {sk:?} with dim {}", self.dim)));
        }
        let (b, lq, lk) = (sq[0], sq[1], sk[1]);
        if key_valid.len() != b * lk {
            return Err(dim_err(format!("key mask has {} entries for [{b}, {lk}]", key_valid.len())));
        }
        let q = self.query.forward(g, queries)?;
        let k = self.key.forward(g, keys)?;
        let v = self.value.forward(g, keys)?;
        let q = g.split_heads(q, self.heads)?;
        let k = g.split_heads(k, self.heads)?;
        let v = g.split_heads(v, self.heads)?;
        let scores = g.bmm(q, k, true)?;
        let dh = (self.dim / self.heads) as f64;
        let mut scores = g.scale(scores, 1.0 / dh.sqrt());
        if let Some(bias) = bias {
            scores = g.add_head_bias(scores, bias, self.heads)?;
        }
        let mask = expand_key_mask(key_valid, b, self.heads, lq);
        let weights = g.softmax_last(scores, Some(&mask))?;
        let ctx = g.bmm(weights, v, false)?;
        let ctx = g.merge_heads(ctx, self.heads)?;
        let output = self.out.forward(g, ctx)?;
        Ok(Attended { output, weights })
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.relu(h);
        self.down.forward(g, h)
    }
}

/// Pre-norm block: `x + Attn(LN(x))`, then `x + FFN(LN(x))`.
///
/// Used both for self-attention (keys are the block input) and for
/// cross-attention (keys supplied by the caller).
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub dropout: f64,
}

pub struct BlockOutput {
    pub output: Var,
    pub weights: Var,
}

impl AttentionBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, 4 * dim, rng),
            dropout,
        }
    }

    /// Self-attention over `x` (`[B, L, D]`).
    pub fn forward(&self, g: &mut Graph, x: Var, valid: &[bool], bias: Option<Var>) -> Result<BlockOutput> {
        let n = self.norm1.forward(g, x)?;
        let att = self.attn.forward(g, n, n, valid, bias)?;
        self.finish(g, x, att)
    }

    /// Cross-attention from `x` to `memory`; `memory_valid` masks memory rows.
    pub fn forward_cross(&self, g: &mut Graph, x: Var, memory: Var, memory_valid: &[bool]) -> Result<BlockOutput> {
        let n = self.norm1.forward(g, x)?;
        let att = self.attn.forward(g, n, memory, memory_valid, None)?;
        self.finish(g, x, att)
    }

    fn finish(&self, g: &mut Graph, x: Var, att: Attended) -> Result<BlockOutput> {
        let a = g.dropout(att.output, self.dropout);
        let x = g.add(x, a)?;
        let n = self.norm2.forward(g, x)?;
        let f = self.ffn.forward(g, n)?;
        let f = g.dropout(f, self.dropout);
        let output = g.add(x, f)?;
        Ok(BlockOutput { output, weights: att.weights })
    }
}

/// Fixed sinusoidal position table `[len, dim]`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    Tensor::from_fn(vec![len, dim], |i| {
        let (pos, j) = ((i / dim) as f64, i % dim);
        let rate = 1.0 / 10_000f64.powf((2 * (j / 2)) as f64 / dim as f64);
        if j % 2 == 0 {
            (pos * rate).sin()
        } else {
            (pos * rate).cos()
        }
    })
}

/// Position rows for a sequence with a leading [CLS]: row 0 as `[dim]` and
/// rows `1..=len` as `[len, dim]`.
pub fn position_rows(len: usize, dim: usize) -> (Tensor, Tensor) {
    let pos = sinusoidal_positions(len + 1, dim);
    let data = pos.into_data();
    (
        Tensor::new(vec![dim], data[..dim].to_vec()).expect("row"),
        Tensor::new(vec![len, dim], data[dim..].to_vec()).expect("rows"),
    )
}

/// 3×3 convolution with zero padding 1: `[H, W, Cin]` with kernels
/// `[3, 3, Cin, Cout]` and bias `[Cout]` gives `[H, W, Cout]`.
pub fn conv2d_same(g: &mut Graph, image: Var, kernels: Var, bias: Var) -> Result<Var> {
    let (si, sk) = (g.shape(image).to_vec(), g.shape(kernels).to_vec());
    if si.len() != 3 || sk.len() != 4 || sk[0] != 3 || sk[1] != 3 {
        return Err(dim_err(format!("conv2d_same: image {si:?}, kernels {sk:?}")));
    }
    if sk[2] != si[2] {
        return Err(dim_err(format!("conv2d_same: image has {} channels, kernels expect {}", si[2], sk[2])));
    }
    let (h, w, cout) = (si[0], si[1], sk[3]);
    if g.shape(bias) != [cout] {
        return Err(dim_err(format!("conv2d_same: bias {:?} for {cout} channels", g.shape(bias))));
    }
    let cols = g.im2col3x3(image)?;
    let k = g.reshape(kernels, &[9 * sk[2], cout])?;
    let y = g.matmul(cols, k)?;
    let y = g.add_broadcast(y, bias)?;
    g.reshape(y, &[h, w, cout])
}
