//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value,
//! and [`Graph::backward`] walks the tape in reverse. Parameters live in a
//! [`ParamStore`] outside the graph, so one store can back many graphs.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};

pub type NodeId = usize;

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Mask(NodeId, Tensor),
    Relu(NodeId),
    Softplus(NodeId),
    Tanh(NodeId),
    LayerNorm { input: NodeId, inv_std: Vec<f64> },
    Attention(Box<AttentionCache>),
    BlockMean { input: NodeId, block: usize },
    Unfold { input: NodeId, block: usize, kernel: usize },
    Gather { input: NodeId, index: Vec<usize> },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    Reshape(NodeId),
    Mse { pred: NodeId, target: Vec<f64> },
    Sum(NodeId),
}

#[derive(Debug, Clone)]
struct AttentionCache {
    q: NodeId,
    k: NodeId,
    v: NodeId,
    block: usize,
    heads: usize,
    /// Softmax probabilities laid out as `[block_index][head][query][key]`.
    probs: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes.get(id).and_then(|g| g.as_ref())
    }

    pub fn params(&self) -> &[(ParamId, Tensor)] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input)
    }

    /// Leaf for a trainable parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&node) = self.param_nodes.get(&id) {
            return node;
        }
        let node = self.push(store.value(id).clone(), Op::Param(id));
        self.param_nodes.insert(id, node);
        node
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        let mut out = Tensor::zeros(va.rows, vb.cols);
        gemm(va, false, vb, false, &mut out, 0.0);
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.nodes[a].value.clone();
        assert_eq!(out.shape(), self.nodes[b].value.shape(), "add shape mismatch");
        out.add_assign(&self.nodes[b].value);
        self.push(out, Op::Add(a, b))
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let r = &self.nodes[row].value;
        assert_eq!(r.rows, 1);
        let mut out = self.nodes[a].value.clone();
        assert_eq!(out.cols, r.cols, "add_row width mismatch");
        for chunk in out.data.chunks_mut(r.cols) {
            for (o, b) in chunk.iter_mut().zip(&r.data) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a `1 x cols` row.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let r = &self.nodes[row].value;
        assert_eq!(r.rows, 1);
        let mut out = self.nodes[a].value.clone();
        assert_eq!(out.cols, r.cols, "mul_row width mismatch");
        for chunk in out.data.chunks_mut(r.cols) {
            for (o, b) in chunk.iter_mut().zip(&r.data) {
                *o *= b;
            }
        }
        self.push(out, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let mut out = self.nodes[a].value.clone();
        out.data.iter_mut().for_each(|v| *v *= factor);
        self.push(out, Op::Scale(a, factor))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mask(&mut self, a: NodeId, mask: Tensor) -> NodeId {
        let mut out = self.nodes[a].value.clone();
        assert_eq!(out.shape(), mask.shape(), "mask shape");
        out.data.iter_mut().zip(&mask.data).for_each(|(v, m)| *v *= m);
        self.push(out, Op::Mask(a, mask))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let mut out = self.nodes[a].value.clone();
        out.data.iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let mut out = self.nodes[a].value.clone();
        out.data.iter_mut().for_each(|v| *v = softplus(*v));
        self.push(out, Op::Softplus(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let mut out = self.nodes[a].value.clone();
        out.data.iter_mut().for_each(|v| *v = v.tanh());
        self.push(out, Op::Tanh(a))
    }

    /// Row-wise normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a].value;
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows);
        let n = x.cols as f64;
        for r in 0..x.rows {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * s);
            inv_std.push(s);
        }
        self.push(out, Op::LayerNorm { input: a, inv_std })
    }

    /// Multi-head scaled dot-product attention restricted to consecutive
    /// blocks of `block` rows. Heads split the columns evenly.
    pub fn block_attention(&mut self, q: NodeId, k: NodeId, v: NodeId, block: usize, heads: usize) -> NodeId {
        let (qv, kv, vv) = (&self.nodes[q].value, &self.nodes[k].value, &self.nodes[v].value);
        assert_eq!(qv.shape(), kv.shape());
        assert_eq!(qv.shape(), vv.shape());
        assert!(block > 0 && qv.rows % block == 0, "rows not divisible by block");
        assert!(heads > 0 && qv.cols % heads == 0, "width not divisible by heads");
        let width = qv.cols;
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let blocks = qv.rows / block;
        let mut probs = vec![0.0; blocks * heads * block * block];
        let mut out = Tensor::zeros(qv.rows, width);
        let mut scores = vec![0.0; block];
        for b in 0..blocks {
            let base = b * block;
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..block {
                    let qi = &qv.row(base + i)[c0..c0 + dh];
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kj = &kv.row(base + j)[c0..c0 + dh];
                        *s = dot(qi, kj) * scale;
                        max = max.max(*s);
                    }
                    let mut total = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        total += *s;
                    }
                    let p_off = ((b * heads + h) * block + i) * block;
                    let orow = &mut out.data[(base + i) * width + c0..(base + i) * width + c0 + dh];
                    for (j, s) in scores.iter().enumerate() {
                        let p = s / total;
                        probs[p_off + j] = p;
                        let vj = &vv.row(base + j)[c0..c0 + dh];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let cache = AttentionCache {
            q,
            k,
            v,
            block,
            heads,
            probs,
        };
        self.push(out, Op::Attention(Box::new(cache)))
    }

    /// Head-averaged attention weights of an attention node, one
    /// `block x block` matrix per block.
    pub fn attention_weights(&self, id: NodeId) -> Option<Vec<Tensor>> {
        let Op::Attention(cache) = &self.nodes[id].op else {
            return None;
        };
        let n = cache.block;
        let blocks = self.nodes[id].value.rows / n;
        let mut out = Vec::with_capacity(blocks);
        for b in 0..blocks {
            let mut m = Tensor::zeros(n, n);
            for h in 0..cache.heads {
                let off = (b * cache.heads + h) * n * n;
                for (acc, p) in m.data.iter_mut().zip(&cache.probs[off..off + n * n]) {
                    *acc += p / cache.heads as f64;
                }
            }
            out.push(m);
        }
        Some(out)
    }

    /// Mean over consecutive blocks of `block` rows.
    pub fn block_mean(&mut self, a: NodeId, block: usize) -> NodeId {
        let x = &self.nodes[a].value;
        assert!(block > 0 && x.rows % block == 0);
        let blocks = x.rows / block;
        let mut out = Tensor::zeros(blocks, x.cols);
        let inv = 1.0 / block as f64;
        for r in 0..x.rows {
            let orow = &mut out.data[(r / block) * x.cols..(r / block + 1) * x.cols];
            for (o, v) in orow.iter_mut().zip(x.row(r)) {
                *o += v * inv;
            }
        }
        self.push(out, Op::BlockMean { input: a, block })
    }

    /// Sliding-window unfold along rows within each block, zero padded, for
    /// a same-length 1-D convolution with an odd `kernel` width.
    pub fn unfold(&mut self, a: NodeId, block: usize, kernel: usize) -> NodeId {
        let x = &self.nodes[a].value;
        assert!(kernel % 2 == 1, "kernel width must be odd");
        assert!(block > 0 && x.rows % block == 0);
        let c = x.cols;
        let pad = (kernel / 2) as isize;
        let mut out = Tensor::zeros(x.rows, kernel * c);
        for r in 0..x.rows {
            let b0 = (r / block) * block;
            let i = (r - b0) as isize;
            for j in 0..kernel {
                let src = i + j as isize - pad;
                if src < 0 || src >= block as isize {
                    continue;
                }
                let src_row = x.row(b0 + src as usize);
                out.row_mut(r)[j * c..(j + 1) * c].copy_from_slice(src_row);
            }
        }
        self.push(
            out,
            Op::Unfold {
                input: a,
                block,
                kernel,
            },
        )
    }

    pub fn gather_rows(&mut self, a: NodeId, index: Vec<usize>) -> NodeId {
        let x = &self.nodes[a].value;
        let mut out = Tensor::zeros(index.len(), x.cols);
        for (r, &src) in index.iter().enumerate() {
            out.row_mut(r).copy_from_slice(x.row(src));
        }
        self.push(out, Op::Gather { input: a, index })
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> NodeId {
        let rows = self.nodes[parts[0]].value.rows;
        let cols: usize = parts.iter().map(|&p| self.nodes[p].value.cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut c0 = 0;
        for &p in &parts {
            let v = &self.nodes[p].value;
            assert_eq!(v.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[c0..c0 + v.cols].copy_from_slice(v.row(r));
            }
            c0 += v.cols;
        }
        self.push(out, Op::ConcatCols(parts))
    }

    pub fn concat_rows(&mut self, parts: Vec<NodeId>) -> NodeId {
        let cols = self.nodes[parts[0]].value.cols;
        let mut data = Vec::new();
        for &p in &parts {
            let v = &self.nodes[p].value;
            assert_eq!(v.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&v.data);
        }
        let rows = data.len() / cols.max(1);
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts))
    }

    /// Row-major reshape (no data movement).
    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let v = self.nodes[a].value.data.clone();
        self.push(Tensor::from_vec(rows, cols, v), Op::Reshape(a))
    }

    /// Mean squared error against a constant target; returns a `1 x 1` node.
    pub fn mse(&mut self, pred: NodeId, target: Vec<f64>) -> NodeId {
        let p = &self.nodes[pred].value;
        assert_eq!(p.len(), target.len(), "mse length mismatch");
        let n = target.len().max(1) as f64;
        let loss = p.data.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        self.push(Tensor::filled(1, 1, loss), Op::Mse { pred, target })
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a].value.data.iter().sum();
        self.push(Tensor::filled(1, 1, s), Op::Sum(a))
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.nodes[loss].value.shape(), (1, 1), "loss must be scalar");
        self.backward_with(loss, Tensor::filled(1, 1, 1.0))
    }

    pub fn backward_with(&self, root: NodeId, seed: Tensor) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root] = Some(seed);
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let mut params = Vec::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Param(p) = node.op {
                let g = grads[id]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(node.value.rows, node.value.cols));
                params.push((p, g));
            }
        }
        Gradients { nodes: grads, params }
    }

    fn backprop_node(&self, id: NodeId, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let ga = slot(grads, *a, va);
                gemm(g, false, vb, true, ga, 1.0);
                let gb = slot(grads, *b, vb);
                gemm(va, true, g, false, gb, 1.0);
            }
            Op::Add(a, b) => {
                slot(grads, *a, g).add_assign(g);
                slot(grads, *b, g).add_assign(g);
            }
            Op::AddRow(a, row) => {
                slot(grads, *a, g).add_assign(g);
                let gr = slot(grads, *row, &self.nodes[*row].value);
                for chunk in g.data.chunks(g.cols) {
                    for (o, v) in gr.data.iter_mut().zip(chunk) {
                        *o += v;
                    }
                }
            }
            Op::MulRow(a, row) => {
                let va = &self.nodes[*a].value;
                let vr = &self.nodes[*row].value;
                {
                    let ga = slot(grads, *a, va);
                    for (r, chunk) in g.data.chunks(g.cols).enumerate() {
                        let dst = ga.row_mut(r);
                        for ((o, gv), s) in dst.iter_mut().zip(chunk).zip(&vr.data) {
                            *o += gv * s;
                        }
                    }
                }
                let gr = slot(grads, *row, vr);
                for (r, chunk) in g.data.chunks(g.cols).enumerate() {
                    for ((o, gv), x) in gr.data.iter_mut().zip(chunk).zip(va.row(r)) {
                        *o += gv * x;
                    }
                }
            }
            Op::Scale(a, f) => {
                let ga = slot(grads, *a, g);
                for (o, v) in ga.data.iter_mut().zip(&g.data) {
                    *o += v * f;
                }
            }
            Op::Mask(a, mask) => {
                let ga = slot(grads, *a, g);
                for ((o, v), m) in ga.data.iter_mut().zip(&g.data).zip(&mask.data) {
                    *o += v * m;
                }
            }
            Op::Relu(a) => {
                let x = &self.nodes[*a].value;
                let ga = slot(grads, *a, g);
                for ((o, v), xv) in ga.data.iter_mut().zip(&g.data).zip(&x.data) {
                    if *xv > 0.0 {
                        *o += v;
                    }
                }
            }
            Op::Softplus(a) => {
                let x = &self.nodes[*a].value;
                let ga = slot(grads, *a, g);
                for ((o, v), xv) in ga.data.iter_mut().zip(&g.data).zip(&x.data) {
                    *o += v * sigmoid(*xv);
                }
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let ga = slot(grads, *a, g);
                for ((o, v), yv) in ga.data.iter_mut().zip(&g.data).zip(&y.data) {
                    *o += v * (1.0 - yv * yv);
                }
            }
            Op::LayerNorm { input, inv_std } => {
                let y = &node.value;
                let n = y.cols as f64;
                let ga = slot(grads, *input, g);
                for r in 0..y.rows {
                    let (gy, yr) = (g.row(r), y.row(r));
                    let mean_g = gy.iter().sum::<f64>() / n;
                    let mean_gy = dot(gy, yr) / n;
                    let s = inv_std[r];
                    for ((o, gv), yv) in ga.row_mut(r).iter_mut().zip(gy).zip(yr) {
                        *o += s * (gv - mean_g - yv * mean_gy);
                    }
                }
            }
            Op::Attention(cache) => self.backprop_attention(cache, g, grads),
            Op::BlockMean { input, block } => {
                let ga = slot(grads, *input, &self.nodes[*input].value);
                let inv = 1.0 / *block as f64;
                for r in 0..ga.rows {
                    let src = g.row(r / block);
                    for (o, v) in ga.row_mut(r).iter_mut().zip(src) {
                        *o += v * inv;
                    }
                }
            }
            Op::Unfold { input, block, kernel } => {
                let ga = slot(grads, *input, &self.nodes[*input].value);
                let c = ga.cols;
                let pad = (kernel / 2) as isize;
                for r in 0..g.rows {
                    let b0 = (r / block) * block;
                    let i = (r - b0) as isize;
                    for j in 0..*kernel {
                        let src = i + j as isize - pad;
                        if src < 0 || src >= *block as isize {
                            continue;
                        }
                        let gsrc = &g.row(r)[j * c..(j + 1) * c];
                        for (o, v) in ga.row_mut(b0 + src as usize).iter_mut().zip(gsrc) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Gather { input, index } => {
                let ga = slot(grads, *input, &self.nodes[*input].value);
                for (r, &dst) in index.iter().enumerate() {
                    for (o, v) in ga.row_mut(dst).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let vp = &self.nodes[p].value;
                    let gp = slot(grads, p, vp);
                    for r in 0..g.rows {
                        for (o, v) in gp.row_mut(r).iter_mut().zip(&g.row(r)[c0..c0 + vp.cols]) {
                            *o += v;
                        }
                    }
                    c0 += vp.cols;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let vp = &self.nodes[p].value;
                    let n = vp.len();
                    let gp = slot(grads, p, vp);
                    for (o, v) in gp.data.iter_mut().zip(&g.data[off..off + n]) {
                        *o += v;
                    }
                    off += n;
                }
            }
            Op::Reshape(a) => {
                let ga = slot(grads, *a, &self.nodes[*a].value);
                for (o, v) in ga.data.iter_mut().zip(&g.data) {
                    *o += v;
                }
            }
            Op::Mse { pred, target } => {
                let p = &self.nodes[*pred].value;
                let scale = 2.0 * g.data[0] / target.len().max(1) as f64;
                let gp = slot(grads, *pred, p);
                for ((o, pv), t) in gp.data.iter_mut().zip(&p.data).zip(target) {
                    *o += scale * (pv - t);
                }
            }
            Op::Sum(a) => {
                let gv = g.data[0];
                let ga = slot(grads, *a, &self.nodes[*a].value);
                ga.data.iter_mut().for_each(|o| *o += gv);
            }
        }
    }

    fn backprop_attention(&self, c: &AttentionCache, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let qv = &self.nodes[c.q].value;
        let kv = &self.nodes[c.k].value;
        let vv = &self.nodes[c.v].value;
        let width = qv.cols;
        let dh = width / c.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let n = c.block;
        let blocks = qv.rows / n;
        let mut gq = Tensor::zeros(qv.rows, width);
        let mut gk = Tensor::zeros(qv.rows, width);
        let mut gvv = Tensor::zeros(qv.rows, width);
        let mut dp = vec![0.0; n];
        for b in 0..blocks {
            let base = b * n;
            for h in 0..c.heads {
                let c0 = h * dh;
                for i in 0..n {
                    let p_off = ((b * c.heads + h) * n + i) * n;
                    let probs = &c.probs[p_off..p_off + n];
                    let go = &g.row(base + i)[c0..c0 + dh];
                    let mut weighted = 0.0;
                    for j in 0..n {
                        let vj = &vv.row(base + j)[c0..c0 + dh];
                        dp[j] = dot(go, vj);
                        weighted += dp[j] * probs[j];
                        let dst = &mut gvv.data[(base + j) * width + c0..(base + j) * width + c0 + dh];
                        for (o, x) in dst.iter_mut().zip(go) {
                            *o += probs[j] * x;
                        }
                    }
                    for j in 0..n {
                        let ds = probs[j] * (dp[j] - weighted) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &kv.data[(base + j) * width + c0..(base + j) * width + c0 + dh];
                        let dq = &mut gq.data[(base + i) * width + c0..(base + i) * width + c0 + dh];
                        for (o, x) in dq.iter_mut().zip(kj) {
                            *o += ds * x;
                        }
                        let qi = &qv.data[(base + i) * width + c0..(base + i) * width + c0 + dh];
                        let dk = &mut gk.data[(base + j) * width + c0..(base + j) * width + c0 + dh];
                        for (o, x) in dk.iter_mut().zip(qi) {
                            *o += ds * x;
                        }
                    }
                }
            }
        }
        slot(grads, c.q, qv).add_assign(&gq);
        slot(grads, c.k, kv).add_assign(&gk);
        slot(grads, c.v, vv).add_assign(&gvv);
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], id: NodeId, like: &Tensor) -> &'a mut Tensor {
    grads[id].get_or_insert_with(|| Tensor::zeros(like.rows, like.cols))
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
