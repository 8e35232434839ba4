//! Reverse-mode tape. Forward values are computed eagerly as nodes are
//! pushed; `backward` walks the tape once in reverse.
//!
//! Only the operations the embedder and decoder actually use are provided.

use crate::nn::layers::{sigmoid, softplus};
use crate::nn::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// y = W x, W is a (rows x cols) leaf-or-derived matrix node.
    MatVec { w: NodeId, x: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Sigmoid { x: NodeId },
    Tanh { x: NodeId },
    Scale { x: NodeId, k: f64 },
    Neg { x: NodeId },
    Concat { parts: Vec<NodeId> },
    /// One row of an embedding matrix node.
    GatherRow { w: NodeId, row: usize },
    Dot { a: NodeId, b: NodeId },
    Softplus { x: NodeId },
    /// logsumexp(logits) - logits[target]; scalar output.
    SoftmaxCrossEntropy { logits: NodeId, target: usize },
    SumScalars { parts: Vec<NodeId> },
}

struct Node {
    op: Op,
    value: Vec<f64>,
    /// rows x cols; vectors are (n, 1).
    rows: usize,
    cols: usize,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].value.len(), 1);
        self.nodes[id.0].value[0]
    }

    fn push(&mut self, op: Op, value: Vec<f64>, rows: usize, cols: usize, grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value, rows, cols, requires_grad: grad });
        id
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: &Tensor) -> NodeId {
        self.push(Op::Leaf, t.data.clone(), t.rows(), t.cols(), true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, data: &[f64]) -> NodeId {
        self.push(Op::Leaf, data.to_vec(), data.len(), 1, false)
    }

    fn grad_of(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> NodeId {
        let (r, c) = (self.nodes[w.0].rows, self.nodes[w.0].cols);
        assert_eq!(self.nodes[x.0].value.len(), c, "matvec shape mismatch");
        let mut y = vec![0.0; r];
        for i in 0..r {
            let row = &self.nodes[w.0].value[i * c..(i + 1) * c];
            y[i] = row.iter().zip(&self.nodes[x.0].value).map(|(a, b)| a * b).sum();
        }
        let g = self.grad_of(&[w, x]);
        self.push(Op::MatVec { w, x }, y, r, 1, g)
    }

    fn zip2(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64, op: Op) -> NodeId {
        assert_eq!(self.nodes[a.0].value.len(), self.nodes[b.0].value.len());
        let v: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| f(*x, *y))
            .collect();
        let n = v.len();
        let g = self.grad_of(&[a, b]);
        self.push(op, v, n, 1, g)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip2(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip2(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip2(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    fn map1(&mut self, x: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let v: Vec<f64> = self.nodes[x.0].value.iter().map(|t| f(*t)).collect();
        let n = v.len();
        let g = self.nodes[x.0].requires_grad;
        self.push(op, v, n, 1, g)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.map1(x, sigmoid, Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.map1(x, f64::tanh, Op::Tanh { x })
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        self.map1(x, |t| t * k, Op::Scale { x, k })
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.map1(x, |t| -t, Op::Neg { x })
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.map1(x, softplus, Op::Softplus { x })
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let mut v = Vec::new();
        for p in parts {
            v.extend_from_slice(&self.nodes[p.0].value);
        }
        let n = v.len();
        let g = self.grad_of(parts);
        self.push(Op::Concat { parts: parts.to_vec() }, v, n, 1, g)
    }

    pub fn gather_row(&mut self, w: NodeId, row: usize) -> NodeId {
        let c = self.nodes[w.0].cols;
        let v = self.nodes[w.0].value[row * c..(row + 1) * c].to_vec();
        let g = self.nodes[w.0].requires_grad;
        self.push(Op::GatherRow { w, row }, v, c, 1, g)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a.0].value.len(), self.nodes[b.0].value.len());
        let v: f64 = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .sum();
        let g = self.grad_of(&[a, b]);
        self.push(Op::Dot { a, b }, vec![v], 1, 1, g)
    }

    /// Cross-entropy of a softmax over `logits` against the one-hot `target`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, target: usize) -> NodeId {
        let l = &self.nodes[logits.0].value;
        assert!(target < l.len());
        let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + l.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let v = lse - l[target];
        let g = self.nodes[logits.0].requires_grad;
        self.push(Op::SoftmaxCrossEntropy { logits, target }, vec![v], 1, 1, g)
    }

    pub fn sum_scalars(&mut self, parts: &[NodeId]) -> NodeId {
        let v: f64 = parts.iter().map(|p| self.scalar_value(*p)).sum();
        let g = self.grad_of(parts);
        self.push(Op::SumScalars { parts: parts.to_vec() }, vec![v], 1, 1, g)
    }

    /// 1 - x, elementwise.
    pub fn one_minus(&mut self, x: NodeId) -> NodeId {
        let ones = self.constant(&vec![1.0; self.nodes[x.0].value.len()]);
        self.sub(ones, x)
    }

    /// Backpropagates from a scalar loss node. Returns one gradient buffer per
    /// node; non-participating nodes get an empty buffer.
    pub fn backward(&self, loss: NodeId) -> Result<Vec<Vec<f64>>> {
        let lv = self.scalar_value(loss);
        if !lv.is_finite() {
            return Err(Error::Divergence(format!("loss is not finite: {}", lv)));
        }
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); self.nodes.len()];
        grads[loss.0] = vec![1.0];

        for idx in (0..=loss.0).rev() {
            if grads[idx].is_empty() || !self.nodes[idx].requires_grad {
                continue;
            }
            let gy = std::mem::take(&mut grads[idx]);
            let ensure = |g: &mut Vec<Vec<f64>>, id: NodeId, n: usize| {
                if g[id.0].is_empty() {
                    g[id.0] = vec![0.0; n];
                }
            };
            match &self.nodes[idx].op {
                Op::Leaf => {
                    grads[idx] = gy; // keep leaf grads for collection
                }
                Op::MatVec { w, x } => {
                    let (r, c) = (self.nodes[w.0].rows, self.nodes[w.0].cols);
                    let xv = &self.nodes[x.0].value;
                    let wv = &self.nodes[w.0].value;
                    if self.nodes[w.0].requires_grad {
                        ensure(&mut grads, *w, r * c);
                        for i in 0..r {
                            let gi = gy[i];
                            if gi != 0.0 {
                                let row = &mut grads[w.0][i * c..(i + 1) * c];
                                for (gw, xj) in row.iter_mut().zip(xv) {
                                    *gw += gi * xj;
                                }
                            }
                        }
                    }
                    if self.nodes[x.0].requires_grad {
                        ensure(&mut grads, *x, c);
                        for i in 0..r {
                            let gi = gy[i];
                            if gi != 0.0 {
                                let row = &wv[i * c..(i + 1) * c];
                                for (gx, wj) in grads[x.0].iter_mut().zip(row) {
                                    *gx += gi * wj;
                                }
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    for t in [a, b] {
                        if self.nodes[t.0].requires_grad {
                            ensure(&mut grads, *t, gy.len());
                            for (g, v) in grads[t.0].iter_mut().zip(&gy) {
                                *g += v;
                            }
                        }
                    }
                }
                Op::Sub { a, b } => {
                    if self.nodes[a.0].requires_grad {
                        ensure(&mut grads, *a, gy.len());
                        for (g, v) in grads[a.0].iter_mut().zip(&gy) {
                            *g += v;
                        }
                    }
                    if self.nodes[b.0].requires_grad {
                        ensure(&mut grads, *b, gy.len());
                        for (g, v) in grads[b.0].iter_mut().zip(&gy) {
                            *g -= v;
                        }
                    }
                }
                Op::Mul { a, b } => {
                    if self.nodes[a.0].requires_grad {
                        ensure(&mut grads, *a, gy.len());
                        for i in 0..gy.len() {
                            grads[a.0][i] += gy[i] * self.nodes[b.0].value[i];
                        }
                    }
                    if self.nodes[b.0].requires_grad {
                        ensure(&mut grads, *b, gy.len());
                        for i in 0..gy.len() {
                            grads[b.0][i] += gy[i] * self.nodes[a.0].value[i];
                        }
                    }
                }
                Op::Sigmoid { x } => {
                    ensure(&mut grads, *x, gy.len());
                    for i in 0..gy.len() {
                        let s = self.nodes[idx].value[i];
                        grads[x.0][i] += gy[i] * s * (1.0 - s);
                    }
                }
                Op::Tanh { x } => {
                    ensure(&mut grads, *x, gy.len());
                    for i in 0..gy.len() {
                        let t = self.nodes[idx].value[i];
                        grads[x.0][i] += gy[i] * (1.0 - t * t);
                    }
                }
                Op::Scale { x, k } => {
                    ensure(&mut grads, *x, gy.len());
                    for i in 0..gy.len() {
                        grads[x.0][i] += gy[i] * k;
                    }
                }
                Op::Neg { x } => {
                    ensure(&mut grads, *x, gy.len());
                    for i in 0..gy.len() {
                        grads[x.0][i] -= gy[i];
                    }
                }
                Op::Softplus { x } => {
                    ensure(&mut grads, *x, gy.len());
                    for i in 0..gy.len() {
                        grads[x.0][i] += gy[i] * sigmoid(self.nodes[x.0].value[i]);
                    }
                }
                Op::Concat { parts } => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.nodes[p.0].value.len();
                        if self.nodes[p.0].requires_grad {
                            ensure(&mut grads, *p, n);
                            for i in 0..n {
                                grads[p.0][i] += gy[off + i];
                            }
                        }
                        off += n;
                    }
                }
                Op::GatherRow { w, row } => {
                    let c = self.nodes[w.0].cols;
                    ensure(&mut grads, *w, self.nodes[w.0].value.len());
                    for i in 0..c {
                        grads[w.0][row * c + i] += gy[i];
                    }
                }
                Op::Dot { a, b } => {
                    let g0 = gy[0];
                    if self.nodes[a.0].requires_grad {
                        ensure(&mut grads, *a, self.nodes[a.0].value.len());
                        for i in 0..self.nodes[b.0].value.len() {
                            grads[a.0][i] += g0 * self.nodes[b.0].value[i];
                        }
                    }
                    if self.nodes[b.0].requires_grad {
                        ensure(&mut grads, *b, self.nodes[b.0].value.len());
                        for i in 0..self.nodes[a.0].value.len() {
                            grads[b.0][i] += g0 * self.nodes[a.0].value[i];
                        }
                    }
                }
                Op::SoftmaxCrossEntropy { logits, target } => {
                    let l = &self.nodes[logits.0].value;
                    let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = l.iter().map(|v| (v - max).exp()).sum();
                    ensure(&mut grads, *logits, l.len());
                    let g0 = gy[0];
                    for i in 0..l.len() {
                        let p = (l[i] - max).exp() / sum;
                        let onehot = if i == *target { 1.0 } else { 0.0 };
                        grads[logits.0][i] += g0 * (p - onehot);
                    }
                }
                Op::SumScalars { parts } => {
                    for p in parts {
                        if self.nodes[p.0].requires_grad {
                            ensure(&mut grads, *p, 1);
                            grads[p.0][0] += gy[0];
                        }
                    }
                }
            }
        }
        Ok(grads)
    }

    /// Collects leaf gradients into tensors shaped like the given params,
    /// in the order the params were registered.
    pub fn leaf_grads(&self, grads: &[Vec<f64>], ids: &[NodeId], like: &[Tensor]) -> Vec<Tensor> {
        ids.iter()
            .zip(like)
            .map(|(id, t)| {
                let g = &grads[id.0];
                let data = if g.is_empty() { vec![0.0; t.numel()] } else { g.clone() };
                Tensor { shape: t.shape.clone(), data }
            })
            .collect()
    }
}

/// Node ids of one GRU layer's parameters on a tape.
#[derive(Debug, Clone)]
pub struct GruNodeIds {
    pub w_z: NodeId,
    pub w_r: NodeId,
    pub w_h: NodeId,
    pub u_z: NodeId,
    pub u_r: NodeId,
    pub u_h: NodeId,
    pub b_z: NodeId,
    pub b_r: NodeId,
    pub b_h: NodeId,
}

impl GruNodeIds {
    pub fn register(tape: &mut Tape, p: &crate::nn::layers::GruLayerParams) -> Self {
        Self {
            w_z: tape.param(&p.w_z),
            w_r: tape.param(&p.w_r),
            w_h: tape.param(&p.w_h),
            u_z: tape.param(&p.u_z),
            u_r: tape.param(&p.u_r),
            u_h: tape.param(&p.u_h),
            b_z: tape.param(&p.b_z),
            b_r: tape.param(&p.b_r),
            b_h: tape.param(&p.b_h),
        }
    }

    pub fn ids(&self) -> Vec<NodeId> {
        vec![
            self.w_z, self.w_r, self.w_h, self.u_z, self.u_r, self.u_h, self.b_z, self.b_r,
            self.b_h,
        ]
    }
}

/// One GRU step on the tape; same gate convention as `layers::gru_step`.
pub fn gru_step_on_tape(tape: &mut Tape, x: NodeId, h_prev: NodeId, p: &GruNodeIds) -> NodeId {
    let wz = tape.matvec(p.w_z, x);
    let uz = tape.matvec(p.u_z, h_prev);
    let zs = tape.add(wz, uz);
    let zb = tape.add(zs, p.b_z);
    let z = tape.sigmoid(zb);

    let wr = tape.matvec(p.w_r, x);
    let ur = tape.matvec(p.u_r, h_prev);
    let rs = tape.add(wr, ur);
    let rb = tape.add(rs, p.b_r);
    let r = tape.sigmoid(rb);

    let rh = tape.mul(r, h_prev);
    let wh = tape.matvec(p.w_h, x);
    let uh = tape.matvec(p.u_h, rh);
    let hs = tape.add(wh, uh);
    let hb = tape.add(hs, p.b_h);
    let cand = tape.tanh(hb);

    let omz = tape.one_minus(z);
    let keep = tape.mul(omz, h_prev);
    let take = tape.mul(z, cand);
    tape.add(keep, take)
}
