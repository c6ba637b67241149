//! Op-recording graph with reverse-mode backward.
//!
//! Nodes are appended in construction order, which is therefore a valid
//! topological order; `backward` walks it in exact reverse. Saved values
//! needed by backward rules (pool argmax, softmax probabilities) live on
//! the node record.

use rayon::prelude::*;

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node inside one [`Graph`]. Ids are not portable across graphs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
pub(crate) enum OpRecord {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
        batch: usize,
    },
    Dense {
        x: usize,
        w: usize,
        b: Option<usize>,
        batch: usize,
        in_features: usize,
        out_features: usize,
    },
    Relu {
        x: usize,
    },
    MaxPool2x2 {
        x: usize,
        /// Per output element, the flat input index that won the window.
        argmax: Vec<u32>,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Sum {
        x: usize,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        /// Saved softmax probabilities, shape [batch, classes].
        probs: Vec<f32>,
    },
}

pub(crate) struct Node {
    pub value: Tensor,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
    pub op: OpRecord,
}

/// Reverse-mode differentiation graph over [`Tensor`] values.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    backward_done: bool,
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

    /// Insert a leaf value. Non-finite inputs are rejected up front so NaN
    /// can never enter the graph silently.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        Ok(self.push(value, requires_grad, OpRecord::Leaf))
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: OpRecord) -> NodeId {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn check_id(&self, id: NodeId) -> Result<usize> {
        if id.0 >= self.nodes.len() {
            return Err(Error::DetachedNode { id: id.0 });
        }
        Ok(id.0)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` root w.r.t. this node, if populated.
    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Clear all gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }

    fn finish_op(&mut self, op: &'static str, value: Tensor, requires: bool, rec: OpRecord) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op });
        }
        Ok(self.push(value, requires, rec))
    }

    // ── Primitives ──────────────────────────────────────────────────

    /// 2-D convolution over NCHW input with an [out_c, in_c, k, k] weight
    /// and optional [out_c] bias. Zero padding, square kernel.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let xi = self.check_id(x)?;
        let wi = self.check_id(w)?;
        let bi = b.map(|id| self.check_id(id)).transpose()?;
        let xs = self.nodes[xi].value.shape();
        let ws = self.nodes[wi].value.shape();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let (batch, out_c) = (xs[0], ws[0]);
        let geom = ConvGeom::new(xs[1], xs[2], xs[3], out_c, ws[2], stride, pad).ok_or(
            Error::ShapeMismatch {
                op: "conv2d",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            },
        )?;
        if let Some(bidx) = bi {
            let bs = self.nodes[bidx].value.shape();
            if bs != [out_c] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    lhs: bs.to_vec(),
                    rhs: vec![out_c],
                });
            }
        }

        let positions = geom.out_positions();
        let patch = geom.patch_len();
        let in_plane = geom.in_c * geom.in_h * geom.in_w;
        let xdata = self.nodes[xi].value.data();
        let wdata = self.nodes[wi].value.data();
        let bdata = bi.map(|i| self.nodes[i].value.data().to_vec());

        let mut out = vec![0.0f32; batch * out_c * positions];
        out.par_chunks_mut(out_c * positions)
            .enumerate()
            .for_each(|(n, dst)| {
                let mut cols = vec![0.0f32; patch * positions];
                kernels::im2col_t(&xdata[n * in_plane..(n + 1) * in_plane], &geom, &mut cols);
                kernels::matmul_serial_into(wdata, &cols, out_c, patch, positions, dst);
                if let Some(bias) = &bdata {
                    for (oc, row) in dst.chunks_mut(positions).enumerate() {
                        let bv = bias[oc];
                        for v in row {
                            *v += bv;
                        }
                    }
                }
            });

        let requires = self.nodes[xi].requires_grad
            || self.nodes[wi].requires_grad
            || bi.is_some_and(|i| self.nodes[i].requires_grad);
        let value = Tensor::new(vec![batch, out_c, geom.out_h, geom.out_w], out)?;
        self.finish_op(
            "conv2d",
            value,
            requires,
            OpRecord::Conv2d {
                x: xi,
                w: wi,
                b: bi,
                geom,
                batch,
            },
        )
    }

    /// Fully connected layer: flattens trailing dims of `x` to [batch, f],
    /// multiplies by a [f, out] weight, adds optional [out] bias.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let xi = self.check_id(x)?;
        let wi = self.check_id(w)?;
        let bi = b.map(|id| self.check_id(id)).transpose()?;
        let xs = self.nodes[xi].value.shape();
        let ws = self.nodes[wi].value.shape();
        if xs.is_empty() || ws.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "dense",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let batch = xs[0];
        let in_features: usize = xs[1..].iter().product();
        if in_features != ws[0] {
            return Err(Error::ShapeMismatch {
                op: "dense",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let out_features = ws[1];
        if let Some(bidx) = bi {
            let bs = self.nodes[bidx].value.shape();
            if bs != [out_features] {
                return Err(Error::ShapeMismatch {
                    op: "dense",
                    lhs: bs.to_vec(),
                    rhs: vec![out_features],
                });
            }
        }

        let xdata = self.nodes[xi].value.data();
        let wdata = self.nodes[wi].value.data();
        let mut out = kernels::matmul(xdata, wdata, batch, in_features, out_features);
        if let Some(bidx) = bi {
            let bias = self.nodes[bidx].value.data();
            for row in out.chunks_mut(out_features) {
                for (v, bv) in row.iter_mut().zip(bias) {
                    *v += bv;
                }
            }
        }

        let requires = self.nodes[xi].requires_grad
            || self.nodes[wi].requires_grad
            || bi.is_some_and(|i| self.nodes[i].requires_grad);
        let value = Tensor::new(vec![batch, out_features], out)?;
        self.finish_op(
            "dense",
            value,
            requires,
            OpRecord::Dense {
                x: xi,
                w: wi,
                b: bi,
                batch,
                in_features,
                out_features,
            },
        )
    }

    /// Elementwise max(0, x).
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let xi = self.check_id(x)?;
        let src = &self.nodes[xi].value;
        let data = src.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        let requires = self.nodes[xi].requires_grad;
        self.finish_op("relu", value, requires, OpRecord::Relu { x: xi })
    }

    /// 2x2 max pooling with stride 2 over NCHW input; H and W must be even.
    pub fn maxpool2x2(&mut self, x: NodeId) -> Result<NodeId> {
        let xi = self.check_id(x)?;
        let xs = self.nodes[xi].value.shape();
        if xs.len() != 4 || !xs[2].is_multiple_of(2) || !xs[3].is_multiple_of(2) {
            return Err(Error::ShapeMismatch {
                op: "maxpool2x2",
                lhs: xs.to_vec(),
                rhs: vec![xs.first().copied().unwrap_or(0), 0, 2, 2],
            });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / 2, w / 2);
        let data = self.nodes[xi].value.data();
        let mut out = vec![0.0f32; n * c * oh * ow];
        let mut argmax = vec![0u32; n * c * oh * ow];
        for img in 0..n * c {
            let plane = &data[img * h * w..(img + 1) * h * w];
            let base = img * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_ix = (2 * oy) * w + 2 * ox;
                    let mut best = plane[best_ix];
                    for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                        let ix = (2 * oy + dy) * w + 2 * ox + dx;
                        if plane[ix] > best {
                            best = plane[ix];
                            best_ix = ix;
                        }
                    }
                    out[base + oy * ow + ox] = best;
                    argmax[base + oy * ow + ox] = (img * h * w + best_ix) as u32;
                }
            }
        }
        let requires = self.nodes[xi].requires_grad;
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        self.finish_op(
            "maxpool2x2",
            value,
            requires,
            OpRecord::MaxPool2x2 { x: xi, argmax },
        )
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let ai = self.check_id(a)?;
        let bi = self.check_id(b)?;
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if av.shape() != bv.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let requires = self.nodes[ai].requires_grad || self.nodes[bi].requires_grad;
        self.finish_op("add", value, requires, OpRecord::Add { a: ai, b: bi })
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let ai = self.check_id(a)?;
        let bi = self.check_id(b)?;
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if av.shape() != bv.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let requires = self.nodes[ai].requires_grad || self.nodes[bi].requires_grad;
        self.finish_op("mul", value, requires, OpRecord::Mul { a: ai, b: bi })
    }

    /// Sum of all elements, producing a rank-0 scalar.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let xi = self.check_id(x)?;
        let total: f32 = self.nodes[xi].value.data().iter().sum();
        let requires = self.nodes[xi].requires_grad;
        self.finish_op("sum", Tensor::scalar(total), requires, OpRecord::Sum { x: xi })
    }

    /// Mean softmax cross-entropy over the batch. `logits` is [batch, k];
    /// labels are class indices in [0, k).
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let li = self.check_id(logits)?;
        let ls = self.nodes[li].value.shape();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: ls.to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let (batch, k) = (ls[0], ls[1]);
        if batch == 0 {
            return Err(Error::invalid("softmax_cross_entropy: empty batch"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::invalid(format!(
                "softmax_cross_entropy: label {bad} out of range [0, {k})"
            )));
        }
        let data = self.nodes[li].value.data();
        let mut probs = vec![0.0f32; batch * k];
        let mut loss_acc = 0.0f64;
        for (i, row) in data.chunks(k).enumerate() {
            let maxv = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut denom = 0.0f32;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - maxv).exp();
                probs[i * k + j] = e;
                denom += e;
            }
            for p in &mut probs[i * k..(i + 1) * k] {
                *p /= denom;
            }
            let lse = denom.ln() + maxv;
            loss_acc += (lse - row[labels[i]]) as f64;
        }
        let loss = (loss_acc / batch as f64) as f32;
        let requires = self.nodes[li].requires_grad;
        self.finish_op(
            "softmax_cross_entropy",
            Tensor::scalar(loss),
            requires,
            OpRecord::SoftmaxCrossEntropy {
                logits: li,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Populate gradients of `root` w.r.t. every reachable tensor that
    /// requires grad. `root` must be scalar; a second call without
    /// [`Graph::reset_grads`] is an error.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        let ri = self.check_id(root)?;
        if self.backward_done {
            return Err(Error::DoubleBackward);
        }
        if self.nodes[ri].value.numel() != 1 {
            return Err(Error::NonScalarRoot {
                shape: self.nodes[ri].value.shape().to_vec(),
            });
        }
        self.backward_done = true;
        self.nodes[ri].grad = Some(vec![1.0]);

        for idx in (0..self.nodes.len()).rev() {
            if self.nodes[idx].grad.is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            let op = self.nodes[idx].op.clone();
            let upstream = self.nodes[idx].grad.clone().unwrap();
            match op {
                OpRecord::Leaf => {}
                OpRecord::Conv2d { x, w, b, geom, batch } => {
                    self.backward_conv2d(x, w, b, &geom, batch, &upstream)
                }
                OpRecord::Dense {
                    x,
                    w,
                    b,
                    batch,
                    in_features,
                    out_features,
                } => self.backward_dense(x, w, b, batch, in_features, out_features, &upstream),
                OpRecord::Relu { x } => {
                    if self.needs(x) {
                        let g: Vec<f32> = self.nodes[x]
                            .value
                            .data()
                            .iter()
                            .zip(&upstream)
                            .map(|(&v, &u)| if v > 0.0 { u } else { 0.0 })
                            .collect();
                        self.accumulate(x, &g);
                    }
                }
                OpRecord::MaxPool2x2 { x, argmax } => {
                    if self.needs(x) {
                        let mut g = vec![0.0f32; self.nodes[x].value.numel()];
                        for (out_ix, &src) in argmax.iter().enumerate() {
                            g[src as usize] += upstream[out_ix];
                        }
                        self.accumulate(x, &g);
                    }
                }
                OpRecord::Add { a, b } => {
                    if self.needs(a) {
                        self.accumulate(a, &upstream);
                    }
                    if self.needs(b) {
                        self.accumulate(b, &upstream);
                    }
                }
                OpRecord::Mul { a, b } => {
                    if self.needs(a) {
                        let g: Vec<f32> = self.nodes[b]
                            .value
                            .data()
                            .iter()
                            .zip(&upstream)
                            .map(|(&v, &u)| v * u)
                            .collect();
                        self.accumulate(a, &g);
                    }
                    if self.needs(b) {
                        let g: Vec<f32> = self.nodes[a]
                            .value
                            .data()
                            .iter()
                            .zip(&upstream)
                            .map(|(&v, &u)| v * u)
                            .collect();
                        self.accumulate(b, &g);
                    }
                }
                OpRecord::Sum { x } => {
                    if self.needs(x) {
                        let g = vec![upstream[0]; self.nodes[x].value.numel()];
                        self.accumulate(x, &g);
                    }
                }
                OpRecord::SoftmaxCrossEntropy { logits, labels, probs } => {
                    if self.needs(logits) {
                        let batch = labels.len();
                        let k = probs.len() / batch;
                        let scale = upstream[0] / batch as f32;
                        let mut g = probs.clone();
                        for (i, &y) in labels.iter().enumerate() {
                            g[i * k + y] -= 1.0;
                        }
                        for v in &mut g {
                            *v *= scale;
                        }
                        self.accumulate(logits, &g);
                    }
                }
            }
        }
        Ok(())
    }

    fn needs(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    fn accumulate(&mut self, idx: usize, grad: &[f32]) {
        let slot = &mut self.nodes[idx].grad;
        match slot {
            Some(existing) => {
                for (e, g) in existing.iter_mut().zip(grad) {
                    *e += g;
                }
            }
            None => *slot = Some(grad.to_vec()),
        }
    }

    fn backward_conv2d(
        &mut self,
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: &ConvGeom,
        batch: usize,
        upstream: &[f32],
    ) {
        let positions = geom.out_positions();
        let patch = geom.patch_len();
        let in_plane = geom.in_c * geom.in_h * geom.in_w;
        let out_c = geom.out_c;
        let xdata = self.nodes[x].value.data();
        let wdata = self.nodes[w].value.data();
        let need_x = self.needs(x);
        let need_w = self.needs(w);
        let need_b = b.is_some_and(|bi| self.needs(bi));

        let dx = if need_x {
            let mut dx = vec![0.0f32; batch * in_plane];
            dx.par_chunks_mut(in_plane).enumerate().for_each(|(n, dst)| {
                let dy = &upstream[n * out_c * positions..(n + 1) * out_c * positions];
                let dcols = kernels::matmul_at_serial(wdata, dy, out_c, patch, positions);
                kernels::col2im_t(&dcols, geom, dst);
            });
            Some(dx)
        } else {
            None
        };

        let dw = if need_w {
            // Per-sample partials reduced in sample order: thread-count invariant.
            let partials: Vec<Vec<f32>> = (0..batch)
                .into_par_iter()
                .map(|n| {
                    let mut cols = vec![0.0f32; patch * positions];
                    kernels::im2col_t(&xdata[n * in_plane..(n + 1) * in_plane], geom, &mut cols);
                    let dy = &upstream[n * out_c * positions..(n + 1) * out_c * positions];
                    kernels::matmul_bt_serial(dy, &cols, out_c, positions, patch)
                })
                .collect();
            let mut dw = vec![0.0f32; out_c * patch];
            for p in &partials {
                for (d, v) in dw.iter_mut().zip(p) {
                    *d += v;
                }
            }
            Some(dw)
        } else {
            None
        };

        let db = if need_b {
            let mut db = vec![0.0f32; out_c];
            for n in 0..batch {
                for oc in 0..out_c {
                    let row = &upstream[(n * out_c + oc) * positions..(n * out_c + oc + 1) * positions];
                    let mut acc = 0.0f32;
                    for v in row {
                        acc += v;
                    }
                    db[oc] += acc;
                }
            }
            Some(db)
        } else {
            None
        };

        if let Some(g) = dx {
            self.accumulate(x, &g);
        }
        if let Some(g) = dw {
            self.accumulate(w, &g);
        }
        if let (Some(bi), Some(g)) = (b, db) {
            self.accumulate(bi, &g);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_dense(
        &mut self,
        x: usize,
        w: usize,
        b: Option<usize>,
        batch: usize,
        in_features: usize,
        out_features: usize,
        upstream: &[f32],
    ) {
        let xdata = self.nodes[x].value.data();
        let wdata = self.nodes[w].value.data();
        let need_x = self.needs(x);
        let need_w = self.needs(w);
        let need_b = b.is_some_and(|bi| self.needs(bi));

        let dx = need_x
            .then(|| kernels::matmul_bt(upstream, wdata, batch, out_features, in_features));
        let dw = need_w.then(|| kernels::matmul_at(xdata, upstream, batch, in_features, out_features));
        let db = need_b.then(|| {
            let mut db = vec![0.0f32; out_features];
            for row in upstream.chunks(out_features) {
                for (d, v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
            db
        });

        if let Some(g) = dx {
            self.accumulate(x, &g);
        }
        if let Some(g) = dw {
            self.accumulate(w, &g);
        }
        if let (Some(bi), Some(g)) = (b, db) {
            self.accumulate(bi, &g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[-1.0, 0.0, 2.5]), false).unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.5]);
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let mut g = Graph::new();
        let logits = g.leaf(t(&[1, 2], &[0.0, 0.0]), false).unwrap();
        let loss = g.softmax_cross_entropy(logits, &[0]).unwrap();
        assert!((g.value(loss).item() - std::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn conv2d_all_ones_window_sum() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::filled(vec![1, 1, 3, 3], 1.0), false).unwrap();
        let w = g.leaf(Tensor::filled(vec![1, 1, 2, 2], 1.0), false).unwrap();
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(g.value(y).data(), &[4.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![1, 3, 8, 8]), false).unwrap();
        let w = g.leaf(Tensor::zeros(vec![4, 2, 3, 3]), false).unwrap();
        let err = g.conv2d(x, w, None, 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("conv2d") && msg.contains("[1, 3, 8, 8]") && msg.contains("[4, 2, 3, 3]"));
    }

    #[test]
    fn square_loss_gradient_is_two_x() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1], &[3.0]), true).unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn cross_entropy_gradient_is_probs_minus_onehot() {
        let mut g = Graph::new();
        let logits = g.leaf(t(&[1, 2], &[0.0, 0.0]), true).unwrap();
        let loss = g.softmax_cross_entropy(logits, &[0]).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(logits).unwrap();
        assert!((grad[0] + 0.5).abs() < 1e-6);
        assert!((grad[1] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn backward_rejects_non_scalar_and_double_call() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]), true).unwrap();
        let y = g.relu(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::NonScalarRoot { .. })));
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::DoubleBackward)));
        g.reset_grads();
        assert!(g.backward(s).is_ok());
    }

    #[test]
    fn backward_rejects_foreign_node() {
        let mut g1 = Graph::new();
        let x = g1.leaf(t(&[1], &[1.0]), true).unwrap();
        let s = g1.sum(x).unwrap();
        let mut g2 = Graph::new();
        let _ = (x, s);
        assert!(matches!(g2.backward(NodeId(5)), Err(Error::DetachedNode { .. })));
    }

    #[test]
    fn leaf_rejects_non_finite() {
        let mut g = Graph::new();
        assert!(matches!(
            g.leaf(t(&[2], &[1.0, f32::NAN]), false),
            Err(Error::NonFinite { .. })
        ));
        assert!(matches!(
            g.leaf(t(&[1], &[f32::INFINITY]), false),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn sum_of_losses_backward_is_sum_of_gradients() {
        let xdata = t(&[4], &[0.3, -1.2, 2.0, 0.7]);
        let build = |with_l1: bool, with_l2: bool| {
            let mut g = Graph::new();
            let x = g.leaf(xdata.clone(), true).unwrap();
            let sq = g.mul(x, x).unwrap();
            let l1 = g.sum(sq).unwrap();
            let r = g.relu(x).unwrap();
            let l2 = g.sum(r).unwrap();
            let root = match (with_l1, with_l2) {
                (true, true) => g.add(l1, l2).unwrap(),
                (true, false) => l1,
                (false, true) => l2,
                _ => unreachable!(),
            };
            g.backward(root).unwrap();
            g.grad(x).unwrap().to_vec()
        };
        let g1 = build(true, false);
        let g2 = build(false, true);
        let gsum = build(true, true);
        for i in 0..4 {
            // Accumulation order differs between the runs, so allow the
            // one-ulp associativity wobble of f32 addition.
            let expect = g1[i] + g2[i];
            let tol = 2.0 * f32::EPSILON * expect.abs().max(1.0);
            assert!((gsum[i] - expect).abs() <= tol, "{} vs {}", gsum[i], expect);
        }
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let xd: Vec<f32> = (0..2 * 3 * 8 * 8).map(|i| ((i * 37 % 101) as f32) / 50.0 - 1.0).collect();
        let wd: Vec<f32> = (0..4 * 3 * 3 * 3).map(|i| ((i * 17 % 89) as f32) / 44.0 - 1.0).collect();
        let run = || {
            let mut g = Graph::new();
            let x = g.leaf(t(&[2, 3, 8, 8], &xd), false).unwrap();
            let w = g.leaf(t(&[4, 3, 3, 3], &wd), false).unwrap();
            let c = g.conv2d(x, w, None, 1, 1).unwrap();
            let r = g.relu(c).unwrap();
            let p = g.maxpool2x2(r).unwrap();
            g.value(p).data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let mut g = Graph::new();
        let x = g
            .leaf(t(&[1, 1, 2, 2], &[1.0, 5.0, 2.0, 3.0]), true)
            .unwrap();
        let p = g.maxpool2x2(x).unwrap();
        assert_eq!(g.value(p).data(), &[5.0]);
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn dense_bias_and_gradients() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1, 2], &[1.0, 2.0]), true).unwrap();
        let w = g.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), true).unwrap();
        let b = g.leaf(t(&[2], &[0.5, -0.5]), true).unwrap();
        let y = g.dense(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[1.5, 1.5]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
        assert_eq!(g.grad(w).unwrap(), &[1.0, 1.0, 2.0, 2.0]);
        assert_eq!(g.grad(b).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn labels_out_of_range_rejected() {
        let mut g = Graph::new();
        let logits = g.leaf(t(&[1, 3], &[0.0, 1.0, 2.0]), false).unwrap();
        assert!(g.softmax_cross_entropy(logits, &[3]).is_err());
    }
}
