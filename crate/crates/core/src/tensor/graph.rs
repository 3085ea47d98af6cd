//! Append-only tape for reverse-mode differentiation.
//!
//! Nodes are pushed in evaluation order, so the tape order is already a
//! topological order and `backward` is a single reverse sweep.

use super::{
    dot, matmul_at_acc, matmul_bt_into, matmul_into, row_stats, sigmoid, softmax_in_place,
    softplus, Tensor,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f32>,
        rstd: Vec<f64>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        shape: AttnShape,
        weights: Vec<f32>,
    },
    RepeatRows {
        x: NodeId,
        times: usize,
    },
    Sinusoid {
        x: NodeId,
        freqs: Vec<f32>,
    },
    BoxDecode {
        raw: NodeId,
        refs: NodeId,
    },
    FocalLoss {
        logits: NodeId,
        targets: Vec<f32>,
        row_weights: Vec<f32>,
        gamma: f64,
        alpha: f64,
    },
    L1Loss {
        x: NodeId,
        targets: Vec<f32>,
        row_weights: Vec<f32>,
    },
    Sum(NodeId),
    Scale(NodeId, f32),
}

#[derive(Debug, Clone, Copy)]
struct AttnShape {
    blocks: usize,
    q_rows: usize,
    k_rows: usize,
    heads: usize,
    dk: usize,
    dv: usize,
    scale: f64,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let needs_grad = match op {
            Op::Leaf => true,
            Op::Constant => false,
            _ => inputs.iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable input; receives a gradient on `backward`.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, &[])
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant, &[])
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` loss with respect to `id`.
    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    fn val(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.val(a).matmul(self.val(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.val(a), self.val(b));
        if x.shape() != y.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} + {:?}", x.shape(), y.shape()),
            ));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Adds a length-`n` bias to every row of an `m x n` matrix.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.val(x), self.val(bias));
        let n = xv.cols();
        if bv.len() != n {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", xv.shape(), bv.shape()),
            ));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(bv.data()).for_each(|(a, b)| *a += b);
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddBias(x, bias), &[x, bias]))
    }

    /// `x * w + b`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.val(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.val(x).map(|v| sigmoid(f64::from(v)) as f32);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let value = self.val(x).softmax_rows();
        self.push(value, Op::Softmax(x), &[x])
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, gv, bv) = (self.val(x), self.val(gain), self.val(bias));
        let n = xv.cols();
        if n < 2 || gv.len() != n || bv.len() != n {
            return Err(Error::shape(
                "layer_norm",
                format!("x {:?}, gain {:?}, bias {:?}", xv.shape(), gv.shape(), bv.shape()),
            ));
        }
        let mut out = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = Vec::with_capacity(xv.rows());
        for (r, src) in xv.data().chunks(n).enumerate() {
            let (mean, rs) = row_stats(src);
            rstd.push(rs);
            for j in 0..n {
                let h = (f64::from(src[j]) - mean) * rs;
                xhat[r * n + j] = h as f32;
                out[r * n + j] =
                    (h * f64::from(gv.data()[j]) + f64::from(bv.data()[j])) as f32;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Multi-head scaled dot-product attention over already projected
    /// inputs. Rows are grouped into `blocks` independent samples: each block
    /// of `q.rows / blocks` queries attends only to its own block of keys.
    /// Head `h` uses columns `h*E/H..(h+1)*E/H` of `q`/`k` and
    /// `h*Dv/H..(h+1)*Dv/H` of `v`; scores are scaled by `1/sqrt(Dv/H)`.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        blocks: usize,
    ) -> Result<NodeId> {
        let (qv, kv, vv) = (self.val(q), self.val(k), self.val(v));
        let e = qv.cols();
        let dv_total = vv.cols();
        if heads == 0
            || blocks == 0
            || kv.cols() != e
            || kv.rows() != vv.rows()
            || e % heads != 0
            || dv_total % heads != 0
            || qv.rows() % blocks != 0
            || kv.rows() % blocks != 0
            || qv.rows() == 0
            || kv.rows() == 0
        {
            return Err(Error::shape(
                "attention",
                format!(
                    "q {:?}, k {:?}, v {:?}, heads {heads}, blocks {blocks}",
                    qv.shape(),
                    kv.shape(),
                    vv.shape()
                ),
            ));
        }
        let shape = AttnShape {
            blocks,
            q_rows: qv.rows() / blocks,
            k_rows: kv.rows() / blocks,
            heads,
            dk: e / heads,
            dv: dv_total / heads,
            scale: 1.0 / ((dv_total / heads) as f64).sqrt(),
        };
        let (out, weights) = attention_forward(qv.data(), kv.data(), vv.data(), e, dv_total, shape);
        let value = Tensor::matrix(qv.rows(), dv_total, out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                shape,
                weights,
            },
            &[q, k, v],
        ))
    }

    /// Attention weights stored by an attention node, laid out as
    /// `[block][head][query][key]`.
    pub fn attention_weights(&self, id: NodeId) -> Option<&[f32]> {
        match &self.nodes[id.0].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    /// Stacks `times` copies of `x` vertically.
    pub fn repeat_rows(&mut self, x: NodeId, times: usize) -> Result<NodeId> {
        let xv = self.val(x);
        if times == 0 {
            return Err(Error::InvalidArgument("repeat_rows times must be >= 1".into()));
        }
        let mut data = Vec::with_capacity(xv.len() * times);
        for _ in 0..times {
            data.extend_from_slice(xv.data());
        }
        let value = Tensor::matrix(xv.rows() * times, xv.cols(), data)?;
        Ok(self.push(value, Op::RepeatRows { x, times }, &[x]))
    }

    /// Maps each row `(x, y)` to `[sin(w x).., cos(w x).., sin(w y).., cos(w y)..]`.
    pub fn sinusoid(&mut self, x: NodeId, freqs: &[f32]) -> Result<NodeId> {
        let xv = self.val(x);
        let d = xv.cols();
        let f = freqs.len();
        let mut out = vec![0.0; xv.rows() * d * 2 * f];
        for (r, row) in xv.data().chunks(d).enumerate() {
            for (c, &coord) in row.iter().enumerate() {
                let base = r * d * 2 * f + c * 2 * f;
                for (i, &w) in freqs.iter().enumerate() {
                    let a = f64::from(w) * f64::from(coord);
                    out[base + i] = a.sin() as f32;
                    out[base + f + i] = a.cos() as f32;
                }
            }
        }
        let value = Tensor::matrix(xv.rows(), d * 2 * f, out)?;
        Ok(self.push(
            value,
            Op::Sinusoid {
                x,
                freqs: freqs.to_vec(),
            },
            &[x],
        ))
    }

    /// Box decoding: `sigmoid(raw + [logit(ref_x), logit(ref_y), 0, 0])`.
    /// `raw` has `blocks * n` rows, `refs` has `n` rows and is reused per block.
    pub fn box_decode(&mut self, raw: NodeId, refs: NodeId) -> Result<NodeId> {
        let (rv, fv) = (self.val(raw), self.val(refs));
        let n = fv.rows();
        if rv.cols() != 4 || fv.cols() != 2 || n == 0 || rv.rows() % n != 0 {
            return Err(Error::shape(
                "box_decode",
                format!("raw {:?}, refs {:?}", rv.shape(), fv.shape()),
            ));
        }
        let mut out = vec![0.0; rv.len()];
        for r in 0..rv.rows() {
            for j in 0..4 {
                let mut z = f64::from(rv.at(r, j));
                if j < 2 {
                    z += logit(fv.at(r % n, j));
                }
                out[r * 4 + j] = sigmoid(z) as f32;
            }
        }
        let value = Tensor::matrix(rv.rows(), 4, out)?;
        Ok(self.push(value, Op::BoxDecode { raw, refs }, &[raw, refs]))
    }

    /// Sigmoid focal loss computed from logits:
    /// `sum_r w_r sum_c -a_t (1 - p_t)^gamma ln(p_t)`.
    pub fn focal_loss(
        &mut self,
        logits: NodeId,
        targets: Vec<f32>,
        row_weights: Vec<f32>,
        gamma: f64,
        alpha: f64,
    ) -> Result<NodeId> {
        let lv = self.val(logits);
        let c = lv.cols();
        if targets.len() != lv.len() || row_weights.len() != lv.rows() {
            return Err(Error::shape(
                "focal_loss",
                format!(
                    "logits {:?}, {} targets, {} row weights",
                    lv.shape(),
                    targets.len(),
                    row_weights.len()
                ),
            ));
        }
        let mut total = 0.0f64;
        for (i, (&z, &t)) in lv.data().iter().zip(&targets).enumerate() {
            let w = f64::from(row_weights[i / c]);
            if w != 0.0 {
                total += w * focal_term(f64::from(z), f64::from(t), gamma, alpha).0;
            }
        }
        let value = Tensor::scalar(total as f32);
        Ok(self.push(
            value,
            Op::FocalLoss {
                logits,
                targets,
                row_weights,
                gamma,
                alpha,
            },
            &[logits],
        ))
    }

    /// `sum_r w_r sum_c |x - t|`.
    pub fn l1_loss(&mut self, x: NodeId, targets: Vec<f32>, row_weights: Vec<f32>) -> Result<NodeId> {
        let xv = self.val(x);
        let c = xv.cols();
        if targets.len() != xv.len() || row_weights.len() != xv.rows() {
            return Err(Error::shape(
                "l1_loss",
                format!("x {:?}, {} targets", xv.shape(), targets.len()),
            ));
        }
        let mut total = 0.0f64;
        for (i, (&a, &t)) in xv.data().iter().zip(&targets).enumerate() {
            total += f64::from(row_weights[i / c]) * (f64::from(a) - f64::from(t)).abs();
        }
        let value = Tensor::scalar(total as f32);
        Ok(self.push(
            value,
            Op::L1Loss {
                x,
                targets,
                row_weights,
            },
            &[x],
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.val(x).data().iter().map(|&v| f64::from(v)).sum();
        self.push(Tensor::scalar(s as f32), Op::Sum(x), &[x])
    }

    pub fn scale(&mut self, x: NodeId, factor: f32) -> NodeId {
        let value = self.val(x).map(|v| v * factor);
        self.push(value, Op::Scale(x, factor), &[x])
    }

    /// Reverse sweep from a scalar `loss`. Gradients of earlier calls are
    /// discarded.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.val(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.val(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn backprop_node(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    matmul_bt_into(g, bv.data(), &mut da, m, n, k);
                    accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    matmul_at_acc(av.data(), g, &mut db, m, k, n);
                    accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::AddBias(x, b) => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
                if self.wants(*b) {
                    let n = self.val(*b).len();
                    let mut db = vec![0.0f64; n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += f64::from(v));
                    }
                    accumulate(grads, *b, db.into_iter().map(|v| v as f32).collect());
                }
            }
            Op::Relu(x) => {
                let dx = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gv, &y)| if y > 0.0 { gv } else { 0.0 })
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gv, &y)| gv * y * (1.0 - y))
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::Softmax(x) => {
                let n = node.value.cols();
                let mut dx = vec![0.0; g.len()];
                for ((gr, yr), dr) in g.chunks(n).zip(node.value.data().chunks(n)).zip(dx.chunks_mut(n)) {
                    let s = dot(gr, yr);
                    for j in 0..n {
                        dr[j] = (f64::from(yr[j]) * (f64::from(gr[j]) - s)) as f32;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.val(*gain);
                let n = gv.len();
                if self.wants(*gain) || self.wants(*bias) {
                    let mut dg = vec![0.0f64; n];
                    let mut db = vec![0.0f64; n];
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += f64::from(gr[j]) * f64::from(hr[j]);
                            db[j] += f64::from(gr[j]);
                        }
                    }
                    if self.wants(*gain) {
                        accumulate(grads, *gain, dg.into_iter().map(|v| v as f32).collect());
                    }
                    if self.wants(*bias) {
                        accumulate(grads, *bias, db.into_iter().map(|v| v as f32).collect());
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; g.len()];
                    let nf = n as f64;
                    for (r, (gr, hr)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..n {
                            let d = f64::from(gr[j]) * f64::from(gv.data()[j]);
                            mean_d += d;
                            mean_dh += d * f64::from(hr[j]);
                        }
                        mean_d /= nf;
                        mean_dh /= nf;
                        for j in 0..n {
                            let d = f64::from(gr[j]) * f64::from(gv.data()[j]);
                            dx[r * n + j] =
                                (rstd[r] * (d - mean_d - f64::from(hr[j]) * mean_dh)) as f32;
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                shape,
                weights,
            } => {
                let (qv, kv, vv) = (self.val(*q), self.val(*k), self.val(*v));
                let (dq, dk, dv) = attention_backward(
                    qv.data(),
                    kv.data(),
                    vv.data(),
                    weights,
                    g,
                    qv.cols(),
                    vv.cols(),
                    *shape,
                );
                if self.wants(*q) {
                    accumulate(grads, *q, dq);
                }
                if self.wants(*k) {
                    accumulate(grads, *k, dk);
                }
                if self.wants(*v) {
                    accumulate(grads, *v, dv);
                }
            }
            Op::RepeatRows { x, times } => {
                let len = self.val(*x).len();
                let mut dx = vec![0.0f64; len];
                for t in 0..*times {
                    for (d, &gv) in dx.iter_mut().zip(&g[t * len..(t + 1) * len]) {
                        *d += f64::from(gv);
                    }
                }
                accumulate(grads, *x, dx.into_iter().map(|v| v as f32).collect());
            }
            Op::Sinusoid { x, freqs } => {
                let xv = self.val(*x);
                let d = xv.cols();
                let f = freqs.len();
                let mut dx = vec![0.0; xv.len()];
                for r in 0..xv.rows() {
                    for c in 0..d {
                        let base = r * d * 2 * f + c * 2 * f;
                        let coord = f64::from(xv.at(r, c));
                        let mut acc = 0.0;
                        for (i, &w) in freqs.iter().enumerate() {
                            let w = f64::from(w);
                            let a = w * coord;
                            acc += f64::from(g[base + i]) * w * a.cos();
                            acc -= f64::from(g[base + f + i]) * w * a.sin();
                        }
                        dx[r * d + c] = acc as f32;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::BoxDecode { raw, refs } => {
                let fv = self.val(*refs);
                let n = fv.rows();
                let y = node.value.data();
                let ds: Vec<f32> = g
                    .iter()
                    .zip(y)
                    .map(|(&gv, &yv)| gv * yv * (1.0 - yv))
                    .collect();
                if self.wants(*refs) {
                    let mut dref = vec![0.0f64; fv.len()];
                    for r in 0..node.value.rows() {
                        for j in 0..2 {
                            let p = f64::from(fv.at(r % n, j)).clamp(LOGIT_EPS, 1.0 - LOGIT_EPS);
                            dref[(r % n) * 2 + j] += f64::from(ds[r * 4 + j]) / (p * (1.0 - p));
                        }
                    }
                    accumulate(grads, *refs, dref.into_iter().map(|v| v as f32).collect());
                }
                if self.wants(*raw) {
                    accumulate(grads, *raw, ds);
                }
            }
            Op::FocalLoss {
                logits,
                targets,
                row_weights,
                gamma,
                alpha,
            } => {
                let lv = self.val(*logits);
                let c = lv.cols();
                let scale = f64::from(g[0]);
                let dx = lv
                    .data()
                    .iter()
                    .zip(targets)
                    .enumerate()
                    .map(|(i, (&z, &t))| {
                        let w = f64::from(row_weights[i / c]);
                        if w == 0.0 {
                            0.0
                        } else {
                            (scale * w * focal_term(f64::from(z), f64::from(t), *gamma, *alpha).1)
                                as f32
                        }
                    })
                    .collect();
                accumulate(grads, *logits, dx);
            }
            Op::L1Loss {
                x,
                targets,
                row_weights,
            } => {
                let xv = self.val(*x);
                let c = xv.cols();
                let dx = xv
                    .data()
                    .iter()
                    .zip(targets)
                    .enumerate()
                    .map(|(i, (&a, &t))| {
                        let sign = if a > t {
                            1.0
                        } else if a < t {
                            -1.0
                        } else {
                            0.0
                        };
                        g[0] * row_weights[i / c] * sign
                    })
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::Sum(x) => {
                let n = self.val(*x).len();
                accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Scale(x, factor) => {
                accumulate(grads, *x, g.iter().map(|v| v * factor).collect());
            }
        }
    }
}

const LOGIT_EPS: f64 = 1e-6;

pub(crate) fn logit(p: f32) -> f64 {
    let p = f64::from(p).clamp(LOGIT_EPS, 1.0 - LOGIT_EPS);
    (p / (1.0 - p)).ln()
}

/// Focal loss value and its derivative with respect to the logit.
fn focal_term(z: f64, t: f64, gamma: f64, alpha: f64) -> (f64, f64) {
    let p = sigmoid(z);
    let log_p = -softplus(-z);
    let log_1mp = -softplus(z);
    // Soft targets are handled as a convex mix of the two branches.
    let pos_loss = -alpha * (1.0 - p).powf(gamma) * log_p;
    let neg_loss = -(1.0 - alpha) * p.powf(gamma) * log_1mp;
    let pos_grad = alpha * (1.0 - p).powf(gamma) * (gamma * p * log_p - (1.0 - p));
    let neg_grad = (1.0 - alpha) * p.powf(gamma) * (p - gamma * (1.0 - p) * log_1mp);
    (
        t * pos_loss + (1.0 - t) * neg_loss,
        t * pos_grad + (1.0 - t) * neg_grad,
    )
}

fn accumulate(grads: &mut [Option<Vec<f32>>], id: NodeId, g: Vec<f32>) {
    match &mut grads[id.0] {
        Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

/// Copies the `width` columns starting at `col` of rows `row0..row0 + rows`
/// of a row-major matrix with `stride` columns.
fn gather(src: &[f32], stride: usize, row0: usize, rows: usize, col: usize, width: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(rows * width);
    for r in row0..row0 + rows {
        out.extend_from_slice(&src[r * stride + col..r * stride + col + width]);
    }
    out
}

/// Transposed copy of the same block: `width x rows`.
fn gather_t(src: &[f32], stride: usize, row0: usize, rows: usize, col: usize, width: usize) -> Vec<f32> {
    let mut out = vec![0.0; rows * width];
    for r in 0..rows {
        let base = (row0 + r) * stride + col;
        for c in 0..width {
            out[c * rows + r] = src[base + c];
        }
    }
    out
}

fn scatter_add(dst: &mut [f32], stride: usize, row0: usize, col: usize, width: usize, block: &[f32]) {
    for (r, row) in block.chunks(width).enumerate() {
        let base = (row0 + r) * stride + col;
        for (d, &v) in dst[base..base + width].iter_mut().zip(row) {
            *d += v;
        }
    }
}

fn attention_forward(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    e: usize,
    dv_total: usize,
    s: AttnShape,
) -> (Vec<f32>, Vec<f32>) {
    let (nq, nk) = (s.q_rows, s.k_rows);
    let mut out = vec![0.0f32; s.blocks * nq * dv_total];
    let mut weights = vec![0.0f32; s.blocks * s.heads * nq * nk];
    let mut head_out = vec![0.0f32; nq * s.dv];
    for b in 0..s.blocks {
        for h in 0..s.heads {
            let qh = gather(q, e, b * nq, nq, h * s.dk, s.dk);
            let kt = gather_t(k, e, b * nk, nk, h * s.dk, s.dk);
            let vh = gather(v, dv_total, b * nk, nk, h * s.dv, s.dv);
            let w_base = (b * s.heads + h) * nq * nk;
            let w = &mut weights[w_base..w_base + nq * nk];
            matmul_into(&qh, &kt, w, nq, s.dk, nk);
            let scale = s.scale as f32;
            for row in w.chunks_mut(nk) {
                row.iter_mut().for_each(|x| *x *= scale);
                softmax_in_place(row);
            }
            matmul_into(w, &vh, &mut head_out, nq, nk, s.dv);
            for i in 0..nq {
                let oi = (b * nq + i) * dv_total + h * s.dv;
                out[oi..oi + s.dv].copy_from_slice(&head_out[i * s.dv..(i + 1) * s.dv]);
            }
        }
    }
    (out, weights)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    weights: &[f32],
    g: &[f32],
    e: usize,
    dv_total: usize,
    s: AttnShape,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let (nq, nk) = (s.q_rows, s.k_rows);
    let mut dq = vec![0.0f32; q.len()];
    let mut dk = vec![0.0f32; k.len()];
    let mut dv = vec![0.0f32; v.len()];
    let mut dp = vec![0.0f32; nq * nk];
    let mut dq_h = vec![0.0f32; nq * s.dk];
    for b in 0..s.blocks {
        for h in 0..s.heads {
            let w_base = (b * s.heads + h) * nq * nk;
            let p = &weights[w_base..w_base + nq * nk];
            let gh = gather(g, dv_total, b * nq, nq, h * s.dv, s.dv);
            let vt = gather_t(v, dv_total, b * nk, nk, h * s.dv, s.dv);
            let qh = gather(q, e, b * nq, nq, h * s.dk, s.dk);
            let kh = gather(k, e, b * nk, nk, h * s.dk, s.dk);

            let mut dv_h = vec![0.0f32; nk * s.dv];
            matmul_at_acc(p, &gh, &mut dv_h, nq, nk, s.dv);
            scatter_add(&mut dv, dv_total, b * nk, h * s.dv, s.dv, &dv_h);

            // dS = P * (dP - rowsum(dP * P)) * scale, written over dP.
            matmul_into(&gh, &vt, &mut dp, nq, s.dv, nk);
            for (dp_row, p_row) in dp.chunks_mut(nk).zip(p.chunks(nk)) {
                let weighted = dot(dp_row, p_row);
                for (d, &pj) in dp_row.iter_mut().zip(p_row) {
                    *d = (f64::from(pj) * (f64::from(*d) - weighted) * s.scale) as f32;
                }
            }
            matmul_into(&dp, &kh, &mut dq_h, nq, nk, s.dk);
            scatter_add(&mut dq, e, b * nq, h * s.dk, s.dk, &dq_h);
            let mut dk_h = vec![0.0f32; nk * s.dk];
            matmul_at_acc(&dp, &qh, &mut dk_h, nq, nk, s.dk);
            scatter_add(&mut dk, e, b * nk, h * s.dk, s.dk, &dk_h);
        }
    }
    (dq, dk, dv)
}
