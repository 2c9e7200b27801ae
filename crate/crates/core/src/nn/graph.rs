//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters enter
//! the tape as leaves that borrow from a [`ParamStore`]; [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients only into parameters
//! flagged trainable. Frozen parameters receive no gradient at all, while
//! gradients still flow *through* the operations that use them.

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Operand, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Multi-sequence layout of an attention call.
#[derive(Clone, Copy, Debug)]
pub struct AttnLayout {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    GatherParam { param: ParamId, indices: Vec<usize> },
    Gather { input: NodeId, indices: Vec<usize> },
    MatMul { a: NodeId, b: NodeId },
    AddRow { a: NodeId, bias: NodeId },
    Add { a: NodeId, b: NodeId },
    Scale { a: NodeId, factor: f64 },
    Gelu { a: NodeId },
    Tanh { a: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Vec<f64>, rstd: Vec<f64> },
    ConcatCols { parts: Vec<NodeId> },
    ConcatRows { parts: Vec<NodeId> },
    Attention { q: NodeId, k: NodeId, v: NodeId, prefix: Option<(NodeId, NodeId)>, layout: AttnLayout, probs: Vec<f64> },
    EuclideanLoss { pred: NodeId, target: Vec<f64>, scale: [f64; 2], dist: Vec<f64> },
    MseLoss { pred: NodeId, target: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-parameter gradients produced by [`Graph::backward`]; frozen
/// parameters are always all-zero.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub grads: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store
                .entries()
                .iter()
                .map(|e| Tensor::zeros(e.value.rows(), e.value.cols()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.index()]
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Tensor::is_finite)
    }
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self { store, nodes: Vec::new() }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant, false)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        let value = self.store.value(id).clone();
        let rg = self.store.is_trainable(id);
        self.push(value, Op::Param(id), rg)
    }

    /// Row lookup into a parameter table without copying the whole table.
    pub fn gather_param(&mut self, param: ParamId, indices: &[usize]) -> NodeId {
        let table = self.store.value(param);
        let mut out = Tensor::zeros(indices.len(), table.cols());
        for (r, &i) in indices.iter().enumerate() {
            out.row_mut(r).copy_from_slice(table.row(i));
        }
        let rg = self.store.is_trainable(param);
        self.push(out, Op::GatherParam { param, indices: indices.to_vec() }, rg)
    }

    pub fn gather(&mut self, input: NodeId, indices: &[usize]) -> NodeId {
        let src = &self.nodes[input.0].value;
        let mut out = Tensor::zeros(indices.len(), src.cols());
        for (r, &i) in indices.iter().enumerate() {
            out.row_mut(r).copy_from_slice(src.row(i));
        }
        let rg = self.rg(input);
        self.push(out, Op::Gather { input, indices: indices.to_vec() }, rg)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul { a, b }, rg)
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let bv = self.value(bias);
        assert_eq!(bv.rows(), 1, "bias must be a single row");
        assert_eq!(bv.cols(), self.value(a).cols(), "bias width mismatch");
        let mut out = self.value(a).clone();
        let b = bv.row(0).to_vec();
        for r in 0..out.rows() {
            for (o, bb) in out.row_mut(r).iter_mut().zip(&b) {
                *o += bb;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        self.push(out, Op::AddRow { a, bias }, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add { a, b }, rg)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let mut out = self.value(a).clone();
        out.scale(factor);
        let rg = self.rg(a);
        self.push(out, Op::Scale { a, factor }, rg)
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let h = self.matmul(x, w);
        self.add_row(h, b)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            *v = gelu(*v);
        }
        let rg = self.rg(a);
        self.push(out, Op::Gelu { a }, rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            *v = v.tanh();
        }
        let rg = self.rg(a);
        self.push(out, Op::Tanh { a }, rg)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let g = self.value(gain).row(0).to_vec();
        let b = self.value(bias).row(0).to_vec();
        assert_eq!(g.len(), d, "layer norm gain width mismatch");
        let mut out = Tensor::zeros(n, d);
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            let o = out.row_mut(r);
            for c in 0..d {
                let xh = (row[c] - mean) * rs;
                xhat[r * d + c] = xh;
                o[c] = xh * g[c] + b[c];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let width: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, width);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + v.cols()].copy_from_slice(v.row(r));
            }
            off += v.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols { parts: parts.to_vec() }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows width mismatch");
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows { parts: parts.to_vec() }, rg)
    }

    /// Causal multi-head attention over `layout.batch` independent sequences
    /// of `layout.seq` rows each. When `prefix` holds `(keys, values)` of a
    /// shared prefix, every query additionally attends to all prefix rows,
    /// which sit before position 0 of each sequence.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        prefix: Option<(NodeId, NodeId)>,
        layout: AttnLayout,
    ) -> NodeId {
        let AttnLayout { batch, seq, heads } = layout;
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let d = qv.cols();
        assert_eq!(qv.rows(), batch * seq, "attention row count mismatch");
        assert_eq!(d % heads, 0, "width not divisible by heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (pk, pv, plen) = match prefix {
            Some((pk, pv)) => {
                let pkv = self.value(pk);
                (Some(pkv), Some(self.value(pv)), pkv.rows())
            }
            None => (None, None, 0),
        };
        let span = plen + seq;
        let mut probs = vec![0.0; batch * heads * seq * span];
        let mut out = Tensor::zeros(batch * seq, d);
        let mut scores = vec![0.0; span];
        for b in 0..batch {
            for h in 0..heads {
                let c0 = h * dh;
                for t in 0..seq {
                    let qrow = &qv.row(b * seq + t)[c0..c0 + dh];
                    let n_keys = plen + t + 1;
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..n_keys {
                        let krow = if j < plen {
                            &pk.unwrap().row(j)[c0..c0 + dh]
                        } else {
                            &kv.row(b * seq + j - plen)[c0..c0 + dh]
                        };
                        let s = dot(qrow, krow) * scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut().take(n_keys) {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let pbase = ((b * heads + h) * seq + t) * span;
                    let orow = &mut out.row_mut(b * seq + t)[c0..c0 + dh];
                    for j in 0..n_keys {
                        let p = scores[j] / z;
                        probs[pbase + j] = p;
                        let vrow = if j < plen {
                            &pv.unwrap().row(j)[c0..c0 + dh]
                        } else {
                            &vv.row(b * seq + j - plen)[c0..c0 + dh]
                        };
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let rg = self.rg(q)
            || self.rg(k)
            || self.rg(v)
            || prefix.is_some_and(|(a, b)| self.rg(a) || self.rg(b));
        self.push(out, Op::Attention { q, k, v, prefix, layout, probs }, rg)
    }

    /// Mean Euclidean distance between de-normalized predictions and targets.
    /// `pred` holds normalized `(x, y)` rows; the de-normalization is
    /// `x * scale[0] + offset[0]` per axis and `target` is in output units.
    pub fn euclidean_loss(&mut self, pred: NodeId, target: &[[f64; 2]], scale: [f64; 2], offset: [f64; 2]) -> NodeId {
        let pv = self.value(pred);
        assert_eq!(pv.cols(), 2, "prediction must have two columns");
        assert_eq!(pv.rows(), target.len(), "prediction/target count mismatch");
        let n = target.len();
        let mut dist = Vec::with_capacity(n);
        let mut flat = Vec::with_capacity(2 * n);
        let mut total = 0.0;
        for (r, t) in target.iter().enumerate() {
            let dx = pv.get(r, 0) * scale[0] + offset[0] - t[0];
            let dy = pv.get(r, 1) * scale[1] + offset[1] - t[1];
            let dd = (dx * dx + dy * dy).sqrt();
            total += dd;
            dist.push(dd);
            flat.extend_from_slice(&[dx, dy]);
        }
        let value = Tensor::from_vec(1, 1, vec![total / n.max(1) as f64]);
        let rg = self.rg(pred);
        // `target` is stored as the signed residuals; backward needs only those.
        self.push(value, Op::EuclideanLoss { pred, target: flat, scale, dist }, rg)
    }

    /// Mean over all entries of the squared difference.
    pub fn mse_loss(&mut self, pred: NodeId, target: Tensor) -> NodeId {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape(), "mse shape mismatch");
        let n = pv.len().max(1) as f64;
        let s: f64 = pv.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let rg = self.rg(pred);
        self.push(Tensor::from_vec(1, 1, vec![s / n]), Op::MseLoss { pred, target }, rg)
    }

    /// First node (by tape order) whose value holds a non-finite entry.
    pub fn first_non_finite(&self, from: usize) -> Option<usize> {
        (from..self.nodes.len()).find(|&i| !self.nodes[i].value.is_finite())
    }

    /// Back-propagates from a scalar node; gradients accumulate into `out`
    /// for trainable parameters only.
    pub fn backward_into(&self, loss: NodeId, out: &mut Gradients) {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(1, 1, 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    if self.store.is_trainable(*id) {
                        out.grads[id.index()].add_assign(&g);
                    }
                }
                Op::GatherParam { param, indices } => {
                    if self.store.is_trainable(*param) {
                        let dst = &mut out.grads[param.index()];
                        for (r, &i) in indices.iter().enumerate() {
                            for (a, b) in dst.row_mut(i).iter_mut().zip(g.row(r)) {
                                *a += b;
                            }
                        }
                    }
                }
                Op::Gather { input, indices } => {
                    if self.rg(*input) {
                        let src = self.value(*input);
                        let acc = slot(&mut grads, *input, src.rows(), src.cols());
                        for (r, &i) in indices.iter().enumerate() {
                            for (a, b) in acc.row_mut(i).iter_mut().zip(g.row(r)) {
                                *a += b;
                            }
                        }
                    }
                }
                Op::MatMul { a, b } => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    if self.rg(*a) {
                        let acc = slot(&mut grads, *a, av.rows(), av.cols());
                        gemm(Operand::plain(&g), Operand::transposed(bv), acc, true);
                    }
                    if self.rg(*b) {
                        let acc = slot(&mut grads, *b, bv.rows(), bv.cols());
                        gemm(Operand::transposed(av), Operand::plain(&g), acc, true);
                    }
                }
                Op::AddRow { a, bias } => {
                    if self.rg(*bias) {
                        let acc = slot(&mut grads, *bias, 1, g.cols());
                        let row = acc.row_mut(0);
                        for r in 0..g.rows() {
                            for (x, y) in row.iter_mut().zip(g.row(r)) {
                                *x += y;
                            }
                        }
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, &g);
                    }
                }
                Op::Add { a, b } => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, &g);
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, &g);
                    }
                }
                Op::Scale { a, factor } => {
                    if self.rg(*a) {
                        let mut s = g.clone();
                        s.scale(*factor);
                        accumulate(&mut grads, *a, &s);
                    }
                }
                Op::Gelu { a } => {
                    if self.rg(*a) {
                        let x = self.value(*a);
                        let mut s = g.clone();
                        for (gv, xv) in s.data_mut().iter_mut().zip(x.data()) {
                            *gv *= gelu_grad(*xv);
                        }
                        accumulate(&mut grads, *a, &s);
                    }
                }
                Op::Tanh { a } => {
                    if self.rg(*a) {
                        let y = &node.value;
                        let mut s = g.clone();
                        for (gv, yv) in s.data_mut().iter_mut().zip(y.data()) {
                            *gv *= 1.0 - yv * yv;
                        }
                        accumulate(&mut grads, *a, &s);
                    }
                }
                Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                    let (n, d) = g.shape();
                    if self.rg(*gain) || self.rg(*bias) {
                        let mut dg = Tensor::zeros(1, d);
                        let mut db = Tensor::zeros(1, d);
                        for r in 0..n {
                            let gr = g.row(r);
                            for c in 0..d {
                                dg.data_mut()[c] += gr[c] * xhat[r * d + c];
                                db.data_mut()[c] += gr[c];
                            }
                        }
                        if self.rg(*gain) {
                            accumulate(&mut grads, *gain, &dg);
                        }
                        if self.rg(*bias) {
                            accumulate(&mut grads, *bias, &db);
                        }
                    }
                    if self.rg(*x) {
                        let gain_v = self.value(*gain).row(0).to_vec();
                        let acc = slot(&mut grads, *x, n, d);
                        let mut dxhat = vec![0.0; d];
                        for r in 0..n {
                            let gr = g.row(r);
                            let xh = &xhat[r * d..(r + 1) * d];
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for c in 0..d {
                                dxhat[c] = gr[c] * gain_v[c];
                                m1 += dxhat[c];
                                m2 += dxhat[c] * xh[c];
                            }
                            m1 /= d as f64;
                            m2 /= d as f64;
                            let ar = acc.row_mut(r);
                            for c in 0..d {
                                ar[c] += rstd[r] * (dxhat[c] - m1 - xh[c] * m2);
                            }
                        }
                    }
                }
                Op::ConcatCols { parts } => {
                    let mut off = 0;
                    for &p in parts {
                        let (rows, cols) = self.value(p).shape();
                        if self.rg(p) {
                            let acc = slot(&mut grads, p, rows, cols);
                            for r in 0..rows {
                                for (a, b) in acc.row_mut(r).iter_mut().zip(&g.row(r)[off..off + cols]) {
                                    *a += b;
                                }
                            }
                        }
                        off += cols;
                    }
                }
                Op::ConcatRows { parts } => {
                    let mut off = 0;
                    for &p in parts {
                        let (rows, cols) = self.value(p).shape();
                        if self.rg(p) {
                            let acc = slot(&mut grads, p, rows, cols);
                            for (a, b) in acc.data_mut().iter_mut().zip(&g.data()[off * cols..(off + rows) * cols]) {
                                *a += b;
                            }
                        }
                        off += rows;
                    }
                }
                Op::Attention { q, k, v, prefix, layout, probs } => {
                    self.attention_backward(&g, *q, *k, *v, *prefix, *layout, probs, &mut grads);
                }
                Op::EuclideanLoss { pred, target: resid, scale, dist } => {
                    if self.rg(*pred) {
                        let n = dist.len();
                        let up = g.get(0, 0) / n.max(1) as f64;
                        let mut s = Tensor::zeros(n, 2);
                        for r in 0..n {
                            if dist[r] > 0.0 {
                                s.set(r, 0, up * resid[2 * r] / dist[r] * scale[0]);
                                s.set(r, 1, up * resid[2 * r + 1] / dist[r] * scale[1]);
                            }
                        }
                        accumulate(&mut grads, *pred, &s);
                    }
                }
                Op::MseLoss { pred, target } => {
                    if self.rg(*pred) {
                        let pv = self.value(*pred);
                        let up = g.get(0, 0) * 2.0 / pv.len().max(1) as f64;
                        let mut s = pv.clone();
                        for (a, b) in s.data_mut().iter_mut().zip(target.data()) {
                            *a = up * (*a - b);
                        }
                        accumulate(&mut grads, *pred, &s);
                    }
                }
            }
        }
    }

    pub fn backward(&self, loss: NodeId) -> Gradients {
        let mut out = Gradients::zeros_like(self.store);
        self.backward_into(loss, &mut out);
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Tensor,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        prefix: Option<(NodeId, NodeId)>,
        layout: AttnLayout,
        probs: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let AttnLayout { batch, seq, heads } = layout;
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let d = qv.cols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (pk, pv) = match prefix {
            Some((a, b)) => (Some(self.value(a)), Some(self.value(b))),
            None => (None, None),
        };
        let plen = pk.map_or(0, Tensor::rows);
        let span = plen + seq;
        let mut dq = Tensor::zeros(batch * seq, d);
        let mut dk = Tensor::zeros(batch * seq, d);
        let mut dv = Tensor::zeros(batch * seq, d);
        let mut dpk = Tensor::zeros(plen, d);
        let mut dpv = Tensor::zeros(plen, d);
        let mut dp = vec![0.0; span];
        for b in 0..batch {
            for h in 0..heads {
                let c0 = h * dh;
                for t in 0..seq {
                    let n_keys = plen + t + 1;
                    let pbase = ((b * heads + h) * seq + t) * span;
                    let p = &probs[pbase..pbase + n_keys];
                    let go = &g.row(b * seq + t)[c0..c0 + dh];
                    let mut inner = 0.0;
                    for j in 0..n_keys {
                        let vrow = if j < plen {
                            &pv.unwrap().row(j)[c0..c0 + dh]
                        } else {
                            &vv.row(b * seq + j - plen)[c0..c0 + dh]
                        };
                        dp[j] = dot(go, vrow);
                        inner += p[j] * dp[j];
                        let dvrow = if j < plen {
                            &mut dpv.row_mut(j)[c0..c0 + dh]
                        } else {
                            &mut dv.row_mut(b * seq + j - plen)[c0..c0 + dh]
                        };
                        for (a, x) in dvrow.iter_mut().zip(go) {
                            *a += p[j] * x;
                        }
                    }
                    let qrow = &qv.row(b * seq + t)[c0..c0 + dh];
                    let mut dqrow = vec![0.0; dh];
                    for j in 0..n_keys {
                        let ds = p[j] * (dp[j] - inner) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let krow = if j < plen {
                            &pk.unwrap().row(j)[c0..c0 + dh]
                        } else {
                            &kv.row(b * seq + j - plen)[c0..c0 + dh]
                        };
                        for (a, x) in dqrow.iter_mut().zip(krow) {
                            *a += ds * x;
                        }
                        let dkrow = if j < plen {
                            &mut dpk.row_mut(j)[c0..c0 + dh]
                        } else {
                            &mut dk.row_mut(b * seq + j - plen)[c0..c0 + dh]
                        };
                        for (a, x) in dkrow.iter_mut().zip(qrow) {
                            *a += ds * x;
                        }
                    }
                    for (a, x) in dq.row_mut(b * seq + t)[c0..c0 + dh].iter_mut().zip(&dqrow) {
                        *a += x;
                    }
                }
            }
        }
        if self.rg(q) {
            accumulate(grads, q, &dq);
        }
        if self.rg(k) {
            accumulate(grads, k, &dk);
        }
        if self.rg(v) {
            accumulate(grads, v, &dv);
        }
        if let Some((a, b)) = prefix {
            if self.rg(a) {
                accumulate(grads, a, &dpk);
            }
            if self.rg(b) {
                accumulate(grads, b, &dpv);
            }
        }
    }
}

fn slot(grads: &mut [Option<Tensor>], id: NodeId, rows: usize, cols: usize) -> &mut Tensor {
    grads[id.0].get_or_insert_with(|| Tensor::zeros(rows, cols))
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: &Tensor) {
    match &mut grads[id.0] {
        Some(acc) => acc.add_assign(g),
        slot @ None => *slot = Some(g.clone()),
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
