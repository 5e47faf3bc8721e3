use super::graph::{Graph, Op, Var};
use super::params::ParamStore;
use super::tensor::gemm;
use super::Tensor;
use crate::error::{Error, Result};

/// Gradients produced by one [`Graph::backward`] call, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn zeros_like(t: &Tensor) -> Tensor {
    Tensor::zeros(t.shape().to_vec())
}

impl Graph<'_> {
    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0])?);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            for (p, g) in self.local_grads(i, &dy) {
                if !self.nodes[p].requires_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Gradient for every parameter in `store`; parameters the loss never
    /// touched get zeros.
    pub fn param_grads(&self, grads: &Gradients, store: &ParamStore) -> Vec<Tensor> {
        store
            .iter()
            .map(|(id, _, t)| {
                self.bound_var(id)
                    .and_then(|v| grads.wrt(v).cloned())
                    .unwrap_or_else(|| zeros_like(t))
            })
            .collect()
    }

    fn wants(&self, p: usize) -> bool {
        self.nodes[p].requires_grad
    }

    fn local_grads(&self, i: usize, dy: &Tensor) -> Vec<(usize, Tensor)> {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |p: usize| &self.nodes[p].value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, tb } => {
                let (av, bv) = (val(a), val(b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = y.shape()[1];
                if self.wants(a) {
                    // dA = dY·Bᵀ (or dY·B when B was used transposed)
                    let mut g = vec![0.0; m * k];
                    gemm(dy.data(), bv.data(), &mut g, m, n, k, false, !tb, false);
                    out.push((a, Tensor::new(vec![m, k], g).unwrap()));
                }
                if self.wants(b) {
                    let mut g = vec![0.0; k * n];
                    if tb {
                        // B is [n, k]: dB = dYᵀ·A
                        gemm(dy.data(), av.data(), &mut g, n, m, k, true, false, false);
                        out.push((b, Tensor::new(vec![n, k], g).unwrap()));
                    } else {
                        gemm(av.data(), dy.data(), &mut g, k, m, n, true, false, false);
                        out.push((b, Tensor::new(vec![k, n], g).unwrap()));
                    }
                }
            }
            &Op::BatchMatMul { a, b, tb } => {
                let (av, bv) = (val(a), val(b));
                let (g, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = y.shape()[2];
                if self.wants(a) {
                    let mut ga = vec![0.0; g * m * k];
                    for gi in 0..g {
                        gemm(
                            &dy.data()[gi * m * n..],
                            &bv.data()[gi * k * n..],
                            &mut ga[gi * m * k..(gi + 1) * m * k],
                            m,
                            n,
                            k,
                            false,
                            !tb,
                            false,
                        );
                    }
                    out.push((a, Tensor::new(av.shape().to_vec(), ga).unwrap()));
                }
                if self.wants(b) {
                    let mut gb = vec![0.0; g * k * n];
                    for gi in 0..g {
                        let dst = &mut gb[gi * k * n..(gi + 1) * k * n];
                        if tb {
                            gemm(&dy.data()[gi * m * n..], &av.data()[gi * m * k..], dst, n, m, k, true, false, false);
                        } else {
                            gemm(&av.data()[gi * m * k..], &dy.data()[gi * m * n..], dst, k, m, n, true, false, false);
                        }
                    }
                    out.push((b, Tensor::new(bv.shape().to_vec(), gb).unwrap()));
                }
            }
            &Op::Add(a, b) => {
                out.push((a, dy.clone()));
                out.push((b, dy.clone()));
            }
            &Op::AddBroadcast(a, b) => {
                out.push((a, dy.clone()));
                if self.wants(b) {
                    let mut g = zeros_like(val(b));
                    let n = g.len();
                    for (j, d) in dy.data().iter().enumerate() {
                        g.data_mut()[j % n] += d;
                    }
                    out.push((b, g));
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                if self.wants(a) {
                    out.push((a, zip_map(dy, bv, |d, x| d * x)));
                }
                if self.wants(b) {
                    out.push((b, zip_map(dy, av, |d, x| d * x)));
                }
            }
            &Op::Scale(a, c) => out.push((a, dy.map(|d| d * c))),
            &Op::ScaleBy(a, s) => {
                let c = val(s).item();
                if self.wants(a) {
                    out.push((a, dy.map(|d| d * c)));
                }
                if self.wants(s) {
                    let g: f64 = dy.data().iter().zip(val(a).data()).map(|(d, x)| d * x).sum();
                    out.push((s, Tensor::new(val(s).shape().to_vec(), vec![g]).unwrap()));
                }
            }
            &Op::Relu(a) => out.push((a, zip_map(dy, val(a), |d, x| if x > 0.0 { d } else { 0.0 }))),
            &Op::LeakyRelu(a, s) => out.push((a, zip_map(dy, val(a), |d, x| if x > 0.0 { d } else { s * d }))),
            &Op::Elu(a) => out.push((a, zip_map(dy, val(a), |d, x| if x > 0.0 { d } else { d * x.exp() }))),
            &Op::Sin(a) => out.push((a, zip_map(dy, val(a), |d, x| d * x.cos()))),
            &Op::Exp(a) => out.push((a, zip_map(dy, y, |d, e| d * e))),
            Op::Dropout { a, mask } => {
                let g = Tensor::new(dy.shape().to_vec(), dy.data().iter().zip(mask).map(|(d, m)| d * m).collect())
                    .unwrap();
                out.push((*a, g));
            }
            &Op::Softmax(a) => {
                let n = y.last_dim();
                let mut g = vec![0.0; y.len()];
                for ((yr, dr), gr) in y.data().chunks(n).zip(dy.data().chunks(n)).zip(g.chunks_mut(n)) {
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gr[j] = yr[j] * (dr[j] - dot);
                    }
                }
                out.push((a, Tensor::new(y.shape().to_vec(), g).unwrap()));
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let n = y.last_dim();
                let gv = val(*gain).data();
                let mut dx = vec![0.0; y.len()];
                let mut dg = vec![0.0; n];
                let mut db = vec![0.0; n];
                for (r, &is) in inv_std.iter().enumerate() {
                    let dr = &dy.data()[r * n..(r + 1) * n];
                    let hr = &xhat[r * n..(r + 1) * n];
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..n {
                        let dh = dr[j] * gv[j];
                        s1 += dh;
                        s2 += dh * hr[j];
                        dg[j] += dr[j] * hr[j];
                        db[j] += dr[j];
                    }
                    let nf = n as f64;
                    for j in 0..n {
                        let dh = dr[j] * gv[j];
                        dx[r * n + j] = is * (dh - s1 / nf - hr[j] * s2 / nf);
                    }
                }
                out.push((*x, Tensor::new(y.shape().to_vec(), dx).unwrap()));
                out.push((*gain, Tensor::new(vec![n], dg).unwrap()));
                out.push((*bias, Tensor::new(vec![n], db).unwrap()));
            }
            Op::Concat(parts) => {
                let total = y.last_dim();
                let rows = y.len() / total;
                let mut off = 0;
                for &p in parts {
                    let w = val(p).last_dim();
                    if self.wants(p) {
                        let mut g = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            g.extend_from_slice(&dy.data()[r * total + off..r * total + off + w]);
                        }
                        out.push((p, Tensor::new(val(p).shape().to_vec(), g).unwrap()));
                    }
                    off += w;
                }
            }
            &Op::Reshape(a) => out.push((a, dy.clone().reshape(val(a).shape().to_vec()).unwrap())),
            Op::GatherRows { table, idx } => {
                let mut g = zeros_like(val(*table));
                let d = g.last_dim();
                for (r, &t) in idx.iter().enumerate() {
                    let src = &dy.data()[r * d..(r + 1) * d];
                    for (a, b) in g.data_mut()[t * d..(t + 1) * d].iter_mut().zip(src) {
                        *a += b;
                    }
                }
                out.push((*table, g));
            }
            &Op::SplitHeads { a, heads } => {
                let s = val(a).shape();
                let (b, l, w) = (s[0], s[1], s[2]);
                let dh = w / heads;
                let mut g = vec![0.0; dy.len()];
                for bi in 0..b {
                    for t in 0..l {
                        for h in 0..heads {
                            let to = (bi * l + t) * w + h * dh;
                            let from = ((bi * heads + h) * l + t) * dh;
                            g[to..to + dh].copy_from_slice(&dy.data()[from..from + dh]);
                        }
                    }
                }
                out.push((a, Tensor::new(s.to_vec(), g).unwrap()));
            }
            &Op::MergeHeads { a, heads } => {
                let s = val(a).shape();
                let (b, l, dh) = (s[0] / heads, s[1], s[2]);
                let w = dh * heads;
                let mut g = vec![0.0; dy.len()];
                for bi in 0..b {
                    for t in 0..l {
                        for h in 0..heads {
                            let from = (bi * l + t) * w + h * dh;
                            let to = ((bi * heads + h) * l + t) * dh;
                            g[to..to + dh].copy_from_slice(&dy.data()[from..from + dh]);
                        }
                    }
                }
                out.push((a, Tensor::new(s.to_vec(), g).unwrap()));
            }
            &Op::Transpose(a) => {
                let (r, c) = (y.shape()[0], y.shape()[1]);
                let g = Tensor::from_fn(vec![c, r], |i| dy.data()[(i % r) * c + i / r]);
                out.push((a, g));
            }
            &Op::Im2Col { a, h, w, c } => {
                let mut g = vec![0.0; h * w * c];
                for yy in 0..h {
                    for xx in 0..w {
                        let base = (yy * w + xx) * 9 * c;
                        for ky in 0..3 {
                            let sy = yy as isize + ky as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let sx = xx as isize + kx as isize - 1;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                let to = (sy as usize * w + sx as usize) * c;
                                let from = base + (ky * 3 + kx) * c;
                                for ch in 0..c {
                                    g[to + ch] += dy.data()[from + ch];
                                }
                            }
                        }
                    }
                }
                out.push((a, Tensor::new(vec![h, w, c], g).unwrap()));
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let lv = val(*logits);
                let k = lv.shape()[1];
                let d0 = dy.item();
                let mut g = probs.clone();
                for (r, (&t, &wt)) in targets.iter().zip(weights.iter()).enumerate() {
                    let row = &mut g[r * k..(r + 1) * k];
                    row[t] -= 1.0;
                    row.iter_mut().for_each(|x| *x *= wt * d0);
                }
                out.push((*logits, Tensor::new(lv.shape().to_vec(), g).unwrap()));
            }
            &Op::Sum(a) => out.push((a, Tensor::full(val(a).shape().to_vec(), dy.item()))),
            &Op::AddHeadBias { scores, bias, heads } => {
                out.push((scores, dy.clone()));
                if self.wants(bias) {
                    let mut g = zeros_like(val(bias));
                    let s = y.shape();
                    let block = s[1] * s[2];
                    for (i, d) in dy.data().iter().enumerate() {
                        g.data_mut()[(i / block / heads) * block + i % block] += d;
                    }
                    out.push((bias, g));
                }
            }
            &Op::PrependRow { x, row } => {
                let s = y.shape();
                let (b, l1, d) = (s[0], s[1], s[2]);
                if self.wants(x) {
                    let mut g = Vec::with_capacity(b * (l1 - 1) * d);
                    for bi in 0..b {
                        g.extend_from_slice(&dy.data()[(bi * l1 + 1) * d..(bi + 1) * l1 * d]);
                    }
                    out.push((x, Tensor::new(vec![b, l1 - 1, d], g).unwrap()));
                }
                if self.wants(row) {
                    let mut g = vec![0.0; d];
                    for bi in 0..b {
                        for (a, v) in g.iter_mut().zip(&dy.data()[bi * l1 * d..(bi * l1 + 1) * d]) {
                            *a += v;
                        }
                    }
                    out.push((row, Tensor::new(vec![d], g).unwrap()));
                }
            }
            &Op::SelectPosition { x, pos } => {
                let s = val(x).shape();
                let (b, l, d) = (s[0], s[1], s[2]);
                let mut g = zeros_like(val(x));
                for bi in 0..b {
                    let o = (bi * l + pos) * d;
                    g.data_mut()[o..o + d].copy_from_slice(&dy.data()[bi * d..(bi + 1) * d]);
                }
                out.push((x, g));
            }
            Op::ReplaceRows { x, row, rows } => {
                let d = y.last_dim();
                if self.wants(*x) {
                    let mut g = dy.clone();
                    for &r in rows.iter() {
                        g.data_mut()[r * d..(r + 1) * d].iter_mut().for_each(|v| *v = 0.0);
                    }
                    out.push((*x, g));
                }
                if self.wants(*row) {
                    let mut g = vec![0.0; d];
                    for &r in rows.iter() {
                        for (a, v) in g.iter_mut().zip(&dy.data()[r * d..(r + 1) * d]) {
                            *a += v;
                        }
                    }
                    out.push((*row, Tensor::new(vec![d], g).unwrap()));
                }
            }
            Op::L2Normalize { a, norms } => {
                let n = y.last_dim();
                let mut g = vec![0.0; y.len()];
                for (r, &nr) in norms.iter().enumerate() {
                    let yr = &y.data()[r * n..(r + 1) * n];
                    let dr = &dy.data()[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        g[r * n + j] = (dr[j] - yr[j] * dot) / nr;
                    }
                }
                out.push((*a, Tensor::new(y.shape().to_vec(), g).unwrap()));
            }
            Op::GraphAttention(s) => {
                let zv = val(s.z);
                let (n, w) = (zv.shape()[0], zv.shape()[1]);
                let heads = s.heads;
                let dh = w / heads;
                let zd = zv.data();
                let (asd, add) = (val(s.a_src).data(), val(s.a_dst).data());
                let mut dz = vec![0.0; n * w];
                let mut das = vec![0.0; heads * dh];
                let mut dad = vec![0.0; heads * dh];
                let mut dsrc = vec![0.0; n * heads];
                let mut ddst = vec![0.0; n * heads];
                for i in 0..n {
                    let nb = &s.graph.nbrs[i];
                    for h in 0..heads {
                        let dout = &dy.data()[i * w + h * dh..i * w + (h + 1) * dh];
                        let mut dalpha = Vec::with_capacity(nb.len());
                        let mut weighted = 0.0;
                        for (k, &j) in nb.iter().enumerate() {
                            let slot = (s.offsets[i] + k) * heads + h;
                            let a = s.alpha[slot];
                            let zj = &zd[j * w + h * dh..j * w + (h + 1) * dh];
                            let da: f64 = dout.iter().zip(zj).map(|(x, y)| x * y).sum();
                            for (g, d) in dz[j * w + h * dh..j * w + (h + 1) * dh].iter_mut().zip(dout) {
                                *g += a * d;
                            }
                            weighted += a * da;
                            dalpha.push(da);
                        }
                        for (k, &j) in nb.iter().enumerate() {
                            let slot = (s.offsets[i] + k) * heads + h;
                            let de = s.alpha[slot] * (dalpha[k] - weighted);
                            let du = if s.pre[slot] > 0.0 { de } else { s.slope * de };
                            dsrc[i * heads + h] += du;
                            ddst[j * heads + h] += du;
                        }
                    }
                }
                for i in 0..n {
                    for h in 0..heads {
                        let (gs, gd) = (dsrc[i * heads + h], ddst[i * heads + h]);
                        for k in 0..dh {
                            let zi = zd[i * w + h * dh + k];
                            das[h * dh + k] += gs * zi;
                            dad[h * dh + k] += gd * zi;
                            dz[i * w + h * dh + k] += gs * asd[h * dh + k] + gd * add[h * dh + k];
                        }
                    }
                }
                out.push((s.z, Tensor::new(vec![n, w], dz).unwrap()));
                out.push((s.a_src, Tensor::new(vec![heads, dh], das).unwrap()));
                out.push((s.a_dst, Tensor::new(vec![heads, dh], dad).unwrap()));
            }
        }
        out
    }
}

fn zip_map(dy: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(dy.shape().to_vec(), dy.data().iter().zip(x.data()).map(|(&d, &v)| f(d, v)).collect()).unwrap()
}
