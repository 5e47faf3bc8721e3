//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in creation
//! order, which is already a topological order. [`Graph::backward`] walks the
//! tape once in reverse. A graph is built for one forward pass and dropped
//! afterwards; training builds a fresh graph per step.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::tensor::gemm;
use super::Tensor;
use crate::error::{dim_err, Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Neighbourhood lists for [`Graph::graph_attention`]: `nbrs[i]` are the
/// nodes that node `i` attends over.
#[derive(Clone, Debug)]
pub struct Neighbourhoods {
    pub nbrs: Vec<Vec<usize>>,
}

#[derive(Clone)]
pub(crate) enum Op {
    Leaf,
    MatMul { a: usize, b: usize, tb: bool },
    BatchMatMul { a: usize, b: usize, tb: bool },
    Add(usize, usize),
    AddBroadcast(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    ScaleBy(usize, usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Elu(usize),
    Sin(usize),
    Exp(usize),
    Softmax(usize),
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Concat(Vec<usize>),
    Reshape(usize),
    GatherRows { table: usize, idx: Rc<[usize]> },
    SplitHeads { a: usize, heads: usize },
    MergeHeads { a: usize, heads: usize },
    Transpose(usize),
    Im2Col { a: usize, h: usize, w: usize, c: usize },
    CrossEntropy { logits: usize, targets: Rc<[usize]>, weights: Rc<[f64]>, probs: Vec<f64> },
    Sum(usize),
    AddHeadBias { scores: usize, bias: usize, heads: usize },
    PrependRow { x: usize, row: usize },
    SelectPosition { x: usize, pos: usize },
    ReplaceRows { x: usize, row: usize, rows: Rc<[usize]> },
    L2Normalize { a: usize, norms: Vec<f64> },
    GraphAttention(Box<GatSaved>),
    Dropout { a: usize, mask: Vec<f64> },
}

#[derive(Clone)]
pub(crate) struct GatSaved {
    pub z: usize,
    pub a_src: usize,
    pub a_dst: usize,
    pub heads: usize,
    pub slope: f64,
    pub graph: Rc<Neighbourhoods>,
    /// Attention weight per (node, neighbour slot, head).
    pub alpha: Vec<f64>,
    /// Pre-activation score per (node, neighbour slot, head).
    pub pre: Vec<f64>,
    /// Offset of each node's first neighbour slot.
    pub offsets: Vec<usize>,
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub requires_grad: bool,
}

/// Recorded computation. Parameters from a [`ParamStore`] are bound lazily
/// the first time [`Graph::param`] sees them.
pub struct Graph<'p> {
    pub(crate) nodes: Vec<Node>,
    store: Option<&'p ParamStore>,
    bound: Vec<Option<Var>>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), store: None, bound: Vec::new(), dropout_rng: None }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Self { nodes: Vec::new(), store: Some(store), bound: vec![None; store.len()], dropout_rng: None }
    }

    /// Enables dropout; without an rng every dropout call is the identity.
    pub fn enable_dropout(&mut self, rng: ChaCha8Rng) {
        self.dropout_rng = Some(rng);
    }

    pub fn dropout_enabled(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn store(&self) -> Option<&'p ParamStore> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite forward value");
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable input not owned by a parameter store.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.bound[id.0] = Some(v);
        v
    }

    pub(crate) fn bound_var(&self, id: ParamId) -> Option<Var> {
        self.bound.get(id.0).copied().flatten()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, true)
    }

    fn matmul_ex(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(dim_err(format!("matmul needs matrices, got {sa:?} and {sb:?}")));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(dim_err(format!(
                "matmul inner dimensions disagree: {sa:?} x {sb:?}{}",
                if tb { "ᵀ" } else { "" }
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(self.value(a).data(), self.value(b).data(), &mut out, m, k, n, false, tb, false);
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a: a.0, b: b.0, tb }, rg))
    }

    /// Batched product of `[G,m,k]` and `[G,k,n]` (or `[G,n,k]` when `tb`).
    pub fn bmm(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(dim_err(format!("bmm needs matching rank-3 operands, got {sa:?} and {sb:?}")));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return Err(dim_err(format!("bmm inner dimensions disagree: {sa:?} x {sb:?}")));
        }
        let mut out = vec![0.0; g * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for gi in 0..g {
            gemm(
                &da[gi * m * k..],
                &db[gi * k * n..],
                &mut out[gi * m * n..(gi + 1) * m * n],
                m,
                k,
                n,
                false,
                tb,
                false,
            );
        }
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(Tensor::new(vec![g, m, n], out)?, Op::BatchMatMul { a: a.0, b: b.0, tb }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(dim_err(format!("transpose needs a matrix, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let d = self.value(a).data();
        let out = Tensor::from_fn(vec![c, r], |i| d[(i % r) * c + i / r]);
        let rg = self.rg(a.0);
        Ok(self.push(out, Op::Transpose(a.0), rg))
    }

    // ---- elementwise ------------------------------------------------------

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(format!(
                "{what}: incompatible shapes {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = Tensor::new(
            self.shape(a).to_vec(),
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect(),
        )?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(out, Op::Add(a.0, b.0), rg))
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (bias rows, position tables).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(dim_err(format!("cannot broadcast {sb:?} onto {sa:?}")));
        }
        let bd = self.value(b).data();
        let n = bd.len();
        let out = Tensor::new(
            sa.to_vec(),
            self.value(a).data().iter().enumerate().map(|(i, x)| x + bd[i % n]).collect(),
        )?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(out, Op::AddBroadcast(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = Tensor::new(
            self.shape(a).to_vec(),
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect(),
        )?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(out, Op::Mul(a.0, b.0), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(a.0);
        self.push(out, Op::Scale(a.0, c), rg)
    }

    /// Multiplies every entry of `a` by the single-element `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(dim_err(format!("scale_by needs a scalar, got {:?}", self.shape(s))));
        }
        let c = self.value(s).item();
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(a.0) || self.rg(s.0);
        Ok(self.push(out, Op::ScaleBy(a.0, s.0), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(a.0);
        self.push(out, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a.0))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu(a.0, slope))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { x.exp_m1() }, Op::Elu(a.0))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, f64::sin, Op::Sin(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a.0))
    }

    pub fn dropout(&mut self, a: Var, rate: f64) -> Var {
        if rate <= 0.0 {
            return a;
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return a;
        };
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.nodes[a.0].value.len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let v = &self.nodes[a.0].value;
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().zip(&mask).map(|(x, m)| x * m).collect())
            .expect("shape preserved");
        let rg = self.rg(a.0);
        self.push(out, Op::Dropout { a: a.0, mask }, rg)
    }

    // ---- normalisation ----------------------------------------------------

    /// Row softmax over the last axis. `mask` (same length as `a`) marks the
    /// valid entries; masked entries come out exactly zero.
    pub fn softmax_last(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let v = self.value(a);
        let n = v.last_dim();
        if let Some(m) = mask {
            if m.len() != v.len() {
                return Err(dim_err(format!("softmax mask has {} entries for {:?}", m.len(), v.shape())));
            }
        }
        let mut out = vec![0.0; v.len()];
        for (r, (row, o)) in v.data().chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let valid = |j: usize| mask.is_none_or(|m| m[r * n + j]);
            let mx = (0..n).filter(|&j| valid(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                return Err(Error::Contract(format!("softmax row {r} has no valid position")));
            }
            let mut z = 0.0;
            for j in 0..n {
                if valid(j) {
                    o[j] = (row[j] - mx).exp();
                    z += o[j];
                }
            }
            for x in o.iter_mut() {
                *x /= z;
            }
        }
        let out = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(a.0);
        Ok(self.push(out, Op::Softmax(a.0), rg))
    }

    /// Layer normalisation over the last axis with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let v = self.value(x);
        let n = v.last_dim();
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(dim_err(format!("layer_norm params must be [{n}]")));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = v.len() / n;
        let mut xhat = vec![0.0; v.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; v.len()];
        for r in 0..rows {
            let row = &v.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(x.0) || self.rg(gain.0) || self.rg(bias.0);
        Ok(self.push(out, Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, xhat, inv_std }, rg))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let n = v.last_dim();
        let mut norms = Vec::with_capacity(v.len() / n);
        let mut out = v.data().to_vec();
        for (r, row) in out.chunks_mut(n).enumerate() {
            let nr = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if nr == 0.0 {
                return Err(Error::Contract(format!("row {r} is the zero vector")));
            }
            row.iter_mut().for_each(|x| *x /= nr);
            norms.push(nr);
        }
        let out = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(a.0);
        Ok(self.push(out, Op::L2Normalize { a: a.0, norms }, rg))
    }

    // ---- shape ------------------------------------------------------------

    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(dim_err(format!("concat: incompatible shapes {first:?} and {s:?}")));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let rg = parts.iter().any(|p| self.rg(p.0));
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(parts.iter().map(|p| p.0).collect()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(a.0);
        Ok(self.push(t, Op::Reshape(a.0), rg))
    }

    /// Row lookup `table[idx[i]]` for a `[N, D]` table.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(dim_err(format!("gather_rows needs a matrix, got {s:?}")));
        }
        let (n, d) = (s[0], s[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Index(format!("row {bad} out of range for table with {n} rows")));
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table.0);
        Ok(self.push(
            Tensor::new(vec![idx.len(), d], out)?,
            Op::GatherRows { table: table.0, idx: idx.into() },
            rg,
        ))
    }

    /// `[B, L, H·dh]` to `[B·H, L, dh]`.
    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || !s[2].is_multiple_of(heads) {
            return Err(dim_err(format!("cannot split {s:?} into {heads} heads")));
        }
        let (b, l, w) = (s[0], s[1], s[2]);
        let dh = w / heads;
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            for t in 0..l {
                for h in 0..heads {
                    let from = (bi * l + t) * w + h * dh;
                    let to = ((bi * heads + h) * l + t) * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let rg = self.rg(a.0);
        Ok(self.push(Tensor::new(vec![b * heads, l, dh], out)?, Op::SplitHeads { a: a.0, heads }, rg))
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || !s[0].is_multiple_of(heads) {
            return Err(dim_err(format!("cannot merge {s:?} from {heads} heads")));
        }
        let (b, l, dh) = (s[0] / heads, s[1], s[2]);
        let w = dh * heads;
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            for t in 0..l {
                for h in 0..heads {
                    let to = (bi * l + t) * w + h * dh;
                    let from = ((bi * heads + h) * l + t) * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let rg = self.rg(a.0);
        Ok(self.push(Tensor::new(vec![b, l, w], out)?, Op::MergeHeads { a: a.0, heads }, rg))
    }

    /// Adds a per-batch bias `[B, L, M]` to every head of `[B·H, L, M]` scores.
    pub fn add_head_bias(&mut self, scores: Var, bias: Var, heads: usize) -> Result<Var> {
        let (ss, sb) = (self.shape(scores).to_vec(), self.shape(bias).to_vec());
        if ss.len() != 3 || sb.len() != 3 || ss[0] != sb[0] * heads || ss[1..] != sb[1..] {
            return Err(dim_err(format!("head bias {sb:?} does not fit scores {ss:?}")));
        }
        let block = ss[1] * ss[2];
        let bd = self.value(bias).data();
        let out: Vec<f64> = self
            .value(scores)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let g = i / block;
                x + bd[(g / heads) * block + i % block]
            })
            .collect();
        let rg = self.rg(scores.0) || self.rg(bias.0);
        Ok(self.push(Tensor::new(ss, out)?, Op::AddHeadBias { scores: scores.0, bias: bias.0, heads }, rg))
    }

    /// `[B, L, D]` plus a `[D]` row placed at position 0 of every sequence.
    pub fn prepend_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || self.shape(row) != [s[2]] {
            return Err(dim_err(format!("cannot prepend {:?} to {s:?}", self.shape(row))));
        }
        let (b, l, d) = (s[0], s[1], s[2]);
        let (xd, rd) = (self.value(x).data(), self.value(row).data());
        let mut out = Vec::with_capacity(b * (l + 1) * d);
        for bi in 0..b {
            out.extend_from_slice(rd);
            out.extend_from_slice(&xd[bi * l * d..(bi + 1) * l * d]);
        }
        let rg = self.rg(x.0) || self.rg(row.0);
        Ok(self.push(Tensor::new(vec![b, l + 1, d], out)?, Op::PrependRow { x: x.0, row: row.0 }, rg))
    }

    /// Row `pos` of every sequence in `[B, L, D]`, giving `[B, D]`.
    pub fn select_position(&mut self, x: Var, pos: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || pos >= s[1] {
            return Err(dim_err(format!("cannot select position {pos} of {s:?}")));
        }
        let (b, l, d) = (s[0], s[1], s[2]);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(b * d);
        for bi in 0..b {
            let o = (bi * l + pos) * d;
            out.extend_from_slice(&xd[o..o + d]);
        }
        let rg = self.rg(x.0);
        Ok(self.push(Tensor::new(vec![b, d], out)?, Op::SelectPosition { x: x.0, pos }, rg))
    }

    /// Replaces the listed rows of `[N, D]` with `row`.
    pub fn replace_rows(&mut self, x: Var, row: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || self.shape(row) != [s[1]] {
            return Err(dim_err(format!("cannot replace rows of {s:?} with {:?}", self.shape(row))));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= s[0]) {
            return Err(Error::Index(format!("row {bad} out of range for {s:?}")));
        }
        let d = s[1];
        let mut out = self.value(x).data().to_vec();
        let rd = self.value(row).data().to_vec();
        for &r in rows {
            out[r * d..(r + 1) * d].copy_from_slice(&rd);
        }
        let rg = self.rg(x.0) || self.rg(row.0);
        Ok(self.push(Tensor::new(s, out)?, Op::ReplaceRows { x: x.0, row: row.0, rows: rows.into() }, rg))
    }

    /// Patch extraction for a 3×3 zero-padded convolution:
    /// `[H, W, C]` to `[H·W, 9·C]`, column `(ky·3 + kx)·C + c`.
    pub fn im2col3x3(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(dim_err(format!("im2col needs [H, W, C], got {s:?}")));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let src = self.value(a).data();
        let mut out = vec![0.0; h * w * 9 * c];
        for y in 0..h {
            for x in 0..w {
                let base = (y * w + x) * 9 * c;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = x as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let from = (sy as usize * w + sx as usize) * c;
                        let to = base + (ky * 3 + kx) * c;
                        out[to..to + c].copy_from_slice(&src[from..from + c]);
                    }
                }
            }
        }
        let rg = self.rg(a.0);
        Ok(self.push(Tensor::new(vec![h * w, 9 * c], out)?, Op::Im2Col { a: a.0, h, w, c }, rg))
    }

    // ---- reductions and losses ---------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a.0);
        self.push(Tensor::scalar(s), Op::Sum(a.0), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean cross-entropy of `[n, K]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let n = targets.len().max(1) as f64;
        let w = vec![1.0 / n; targets.len()];
        self.cross_entropy_weighted(logits, targets, &w)
    }

    /// `Σ_i w_i · (−log softmax(logits_i)[targets_i])`.
    pub fn cross_entropy_weighted(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let v = self.value(logits);
        if v.ndim() != 2 || v.shape()[0] != targets.len() || weights.len() != targets.len() {
            return Err(dim_err(format!(
                "cross_entropy: logits {:?} vs {} targets / {} weights",
                v.shape(),
                targets.len(),
                weights.len()
            )));
        }
        let k = v.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Index(format!("target class {bad} out of range for {k} classes")));
        }
        let mut probs = vec![0.0; v.len()];
        let mut loss = 0.0;
        for (i, (row, p)) in v.data().chunks(k).zip(probs.chunks_mut(k)).enumerate() {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (pj, &x) in p.iter_mut().zip(row) {
                *pj = (x - mx).exp();
                z += *pj;
            }
            p.iter_mut().for_each(|x| *x /= z);
            let lse = mx + z.ln();
            loss += weights[i] * (lse - row[targets[i]]);
        }
        let rg = self.rg(logits.0);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits: logits.0, targets: targets.into(), weights: weights.into(), probs },
            rg,
        ))
    }

    // ---- graph attention -------------------------------------------------

    /// Multi-head additive graph attention.
    ///
    /// `z` is `[N, H·dh]`; `a_src`, `a_dst` are `[H, dh]`. For node `i` and
    /// head `h` the score of neighbour `j` is
    /// `leaky_relu(a_src_h·z_ih + a_dst_h·z_jh)`, normalised by a softmax over
    /// `graph.nbrs[i]`; the output row is the weighted sum of `z_jh`.
    pub fn graph_attention(
        &mut self,
        z: Var,
        a_src: Var,
        a_dst: Var,
        graph: &Rc<Neighbourhoods>,
        heads: usize,
        slope: f64,
    ) -> Result<Var> {
        let sz = self.shape(z).to_vec();
        if sz.len() != 2 || !sz[1].is_multiple_of(heads) {
            return Err(dim_err(format!("graph_attention: z {sz:?} with {heads} heads")));
        }
        let (n, w) = (sz[0], sz[1]);
        let dh = w / heads;
        if self.shape(a_src) != [heads, dh] || self.shape(a_dst) != [heads, dh] {
            return Err(dim_err(format!("attention vectors must be [{heads}, {dh}]")));
        }
        if graph.nbrs.len() != n {
            return Err(Error::Graph(format!("{} neighbourhoods for {n} nodes", graph.nbrs.len())));
        }
        for (i, nb) in graph.nbrs.iter().enumerate() {
            if nb.is_empty() {
                return Err(Error::Graph(format!("node {i} has an empty neighbourhood")));
            }
            if let Some(&bad) = nb.iter().find(|&&j| j >= n) {
                return Err(Error::Graph(format!("node {i} references missing node {bad}")));
            }
        }
        let zd = self.value(z).data();
        let (asd, add) = (self.value(a_src).data(), self.value(a_dst).data());
        let mut src = vec![0.0; n * heads];
        let mut dst = vec![0.0; n * heads];
        for i in 0..n {
            for h in 0..heads {
                let zi = &zd[i * w + h * dh..i * w + (h + 1) * dh];
                src[i * heads + h] = zi.iter().zip(&asd[h * dh..(h + 1) * dh]).map(|(a, b)| a * b).sum();
                dst[i * heads + h] = zi.iter().zip(&add[h * dh..(h + 1) * dh]).map(|(a, b)| a * b).sum();
            }
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut acc = 0;
        for nb in &graph.nbrs {
            offsets.push(acc);
            acc += nb.len();
        }
        offsets.push(acc);
        let mut pre = vec![0.0; acc * heads];
        let mut alpha = vec![0.0; acc * heads];
        let mut out = vec![0.0; n * w];
        for i in 0..n {
            let nb = &graph.nbrs[i];
            for h in 0..heads {
                let mut mx = f64::NEG_INFINITY;
                for (s, &j) in nb.iter().enumerate() {
                    let u = src[i * heads + h] + dst[j * heads + h];
                    let slot = (offsets[i] + s) * heads + h;
                    pre[slot] = u;
                    let e = if u > 0.0 { u } else { slope * u };
                    alpha[slot] = e;
                    mx = mx.max(e);
                }
                let mut zsum = 0.0;
                for s in 0..nb.len() {
                    let slot = (offsets[i] + s) * heads + h;
                    alpha[slot] = (alpha[slot] - mx).exp();
                    zsum += alpha[slot];
                }
                for (s, &j) in nb.iter().enumerate() {
                    let slot = (offsets[i] + s) * heads + h;
                    alpha[slot] /= zsum;
                    let a = alpha[slot];
                    let o = &mut out[i * w + h * dh..i * w + (h + 1) * dh];
                    for (ok, zk) in o.iter_mut().zip(&zd[j * w + h * dh..j * w + (h + 1) * dh]) {
                        *ok += a * zk;
                    }
                }
            }
        }
        let rg = self.rg(z.0) || self.rg(a_src.0) || self.rg(a_dst.0);
        let saved = GatSaved {
            z: z.0,
            a_src: a_src.0,
            a_dst: a_dst.0,
            heads,
            slope,
            graph: Rc::clone(graph),
            alpha,
            pre,
            offsets,
        };
        Ok(self.push(Tensor::new(vec![n, w], out)?, Op::GraphAttention(Box::new(saved)), rg))
    }

    /// Attention weights of node `i` over its neighbourhood for one head,
    /// read back from a recorded [`Graph::graph_attention`] output.
    pub fn attention_weights(&self, out: Var, i: usize, head: usize) -> Option<Vec<f64>> {
        match &self.nodes[out.0].op {
            Op::GraphAttention(s) => {
                let (a, b) = (s.offsets[i], s.offsets[i + 1]);
                Some((a..b).map(|slot| s.alpha[slot * s.heads + head]).collect())
            }
            _ => None,
        }
    }
}
