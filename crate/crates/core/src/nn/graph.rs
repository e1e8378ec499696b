//! Tape-based reverse-mode autodiff.
//!
//! Nodes are appended in evaluation order, so a reverse sweep over the node
//! list is a valid topological order for backpropagation.

use super::kernels::{self, ConvGeom};
use super::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Add(NodeId, NodeId),
    Scale(NodeId, T),
    Relu(NodeId),
    LeakyRelu(NodeId, T),
    Sigmoid(NodeId),
    Norm {
        x: NodeId,
        gamma: Option<NodeId>,
        beta: Option<NodeId>,
        per_sample: bool,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    /// Per-channel `y = x * scale + shift` with constant coefficients
    /// (batch norm at inference time).
    ChannelAffine {
        x: NodeId,
        scale: Vec<T>,
    },
    MaxPool2 {
        x: NodeId,
        argmax: Vec<u32>,
    },
    Resize {
        x: NodeId,
    },
    ConcatChannels(NodeId, NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    L2NormalizeRows {
        x: NodeId,
        norms: Vec<T>,
    },
    GatherLocations {
        x: NodeId,
        locations: Vec<usize>,
    },
    PatchNce {
        q: NodeId,
        k: NodeId,
        groups: usize,
        tau: T,
        softmax: Vec<T>,
    },
    /// Mean binary cross-entropy on logits against a constant target.
    BceLogits {
        z: NodeId,
        target: Vec<T>,
        probs: Vec<T>,
        clamped: Vec<bool>,
    },
    /// Mean squared error against a constant target.
    Mse {
        z: NodeId,
        target: Vec<T>,
    },
    Mean(NodeId),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-channel statistics of one train-mode batch norm evaluation.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub tag: usize,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Elements averaged per channel.
    pub count: usize,
}

/// Probability clamp shared by every log-loss.
pub const PROB_EPS: f64 = 1e-7;

/// Computation graph for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    /// Batch statistics produced by train-mode batch norm, keyed by the
    /// caller's buffer tag.
    batch_stats: Vec<BatchStats<T>>,
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            batch_stats: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Hash of the branch taken by every piecewise op: ReLU signs, max-pool
    /// winners and clamped probabilities. Two evaluations with the same
    /// signature lie on the same smooth piece, so finite differences
    /// between them are meaningful.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu(x) | Op::LeakyRelu(x, _) => {
                    i.hash(&mut h);
                    for &v in self.value(*x).data() {
                        (v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool2 { argmax, .. } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                Op::BceLogits { clamped, .. } => {
                    i.hash(&mut h);
                    clamped.hash(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn variable(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Copy of `a` that blocks gradient flow.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.clone();
        self.input(v)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Gradient after [`Graph::backward`]; `None` when the node received none.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take_batch_stats(&mut self) -> Vec<BatchStats<T>> {
        std::mem::take(&mut self.batch_stats)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize) -> NodeId {
        let (n, cin, h, wd) = self.value(x).dims4();
        let ws = self.value(w).dims4();
        assert_eq!(ws.1, cin, "conv2d: weight expects {} input channels, got {cin}", ws.1);
        assert_eq!(ws.2, ws.3, "conv2d: square kernels only");
        let geom = ConvGeom { cin, h, w: wd, cout: ws.0, k: ws.2, stride, pad };
        let bias = b.map(|b| self.value(b).data().to_vec());
        let (out, cols) = kernels::conv2d_forward(
            self.value(x).data(),
            n,
            self.value(w).data(),
            bias.as_deref(),
            &geom,
        );
        let value = Tensor::from_vec(&[n, geom.cout, geom.out_h(), geom.out_w()], out);
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(value, Op::Conv2d { x, w, b, geom, cols }, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::from_vec(va.shape(), data);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        let value = self.value(a).map(|v| v * s);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: T) -> NodeId {
        let value = self.value(a).map(|v| if v > T::zero() { v } else { v * slope });
        let rg = self.rg(&[a]);
        self.push(value, Op::LeakyRelu(a, slope), rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(value, Op::Sigmoid(a), rg)
    }

    /// Instance (`per_sample`) or batch normalisation with batch statistics.
    /// When `stats_tag` is set the batch mean/variance are recorded for the
    /// caller to fold into running estimates.
    pub fn normalize(
        &mut self,
        x: NodeId,
        gamma: Option<NodeId>,
        beta: Option<NodeId>,
        per_sample: bool,
        eps: f64,
        stats_tag: Option<usize>,
    ) -> NodeId {
        let dims = self.value(x).dims4();
        let mut xhat = vec![T::zero(); self.value(x).len()];
        let stats = kernels::norm_forward(self.value(x).data(), dims, per_sample, eps, &mut xhat);
        let mut out = xhat.clone();
        let hw = dims.2 * dims.3;
        if gamma.is_some() || beta.is_some() {
            let g = gamma.map(|g| self.value(g).data().to_vec());
            let b = beta.map(|b| self.value(b).data().to_vec());
            for (i, v) in out.iter_mut().enumerate() {
                let c = (i / hw) % dims.1;
                if let Some(g) = &g {
                    *v *= g[c];
                }
                if let Some(b) = &b {
                    *v += b[c];
                }
            }
        }
        if let Some(tag) = stats_tag {
            self.batch_stats.push(BatchStats {
                tag,
                mean: stats.mean.clone(),
                var: stats.var.clone(),
                count: dims.0 * hw,
            });
        }
        let value = Tensor::from_vec(self.value(x).shape(), out);
        let mut deps = vec![x];
        deps.extend(gamma);
        deps.extend(beta);
        let rg = self.rg(&deps);
        self.push(
            value,
            Op::Norm { x, gamma, beta, per_sample, xhat, inv_std: stats.inv_std },
            rg,
        )
    }

    /// `y[:, c] = x[:, c] * scale[c] + shift[c]`.
    pub fn channel_affine(&mut self, x: NodeId, scale: Vec<T>, shift: &[T]) -> NodeId {
        let (_, c, h, w) = self.value(x).dims4();
        assert_eq!(scale.len(), c);
        let hw = h * w;
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / hw) % c;
                v * scale[ch] + shift[ch]
            })
            .collect();
        let value = Tensor::from_vec(self.value(x).shape(), data);
        let rg = self.rg(&[x]);
        self.push(value, Op::ChannelAffine { x, scale }, rg)
    }

    pub fn max_pool2(&mut self, x: NodeId) -> NodeId {
        let (n, c, h, w) = self.value(x).dims4();
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2: odd spatial size {h}x{w}");
        let (out, argmax) = kernels::maxpool2_forward(self.value(x).data(), n * c, h, w);
        let value = Tensor::from_vec(&[n, c, h / 2, w / 2], out);
        let rg = self.rg(&[x]);
        self.push(value, Op::MaxPool2 { x, argmax }, rg)
    }

    /// Bilinear resize to `(ho, wo)`.
    pub fn resize_bilinear(&mut self, x: NodeId, ho: usize, wo: usize) -> NodeId {
        let (n, c, h, w) = self.value(x).dims4();
        let out = kernels::bilinear_forward(self.value(x).data(), n * c, h, w, ho, wo);
        let value = Tensor::from_vec(&[n, c, ho, wo], out);
        let rg = self.rg(&[x]);
        self.push(value, Op::Resize { x }, rg)
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (na, ca, ha, wa) = self.value(a).dims4();
        let (nb, cb, hb, wb) = self.value(b).dims4();
        assert_eq!((na, ha, wa), (nb, hb, wb), "concat_channels: shape mismatch");
        let hw = ha * wa;
        let mut data = Vec::with_capacity(na * (ca + cb) * hw);
        for s in 0..na {
            data.extend_from_slice(&self.value(a).data()[s * ca * hw..(s + 1) * ca * hw]);
            data.extend_from_slice(&self.value(b).data()[s * cb * hw..(s + 1) * cb * hw]);
        }
        let value = Tensor::from_vec(&[na, ca + cb, ha, wa], data);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::ConcatChannels(a, b), rg)
    }

    /// `x [n, din] * w[dout, din]^T + b[dout]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let (n, din) = self.value(x).dims2();
        let (dout, wdin) = self.value(w).dims2();
        assert_eq!(din, wdin, "linear: input width {din} vs weight {wdin}");
        let mut out = Vec::with_capacity(n * dout);
        for _ in 0..n {
            out.extend_from_slice(self.value(b).data());
        }
        T::gemm(
            n,
            din,
            dout,
            T::one(),
            self.value(x).data(),
            din as isize,
            1,
            self.value(w).data(),
            1,
            din as isize,
            T::one(),
            &mut out,
            dout as isize,
            1,
        );
        let value = Tensor::from_vec(&[n, dout], out);
        let rg = self.rg(&[x, w, b]);
        self.push(value, Op::Linear { x, w, b }, rg)
    }

    pub fn l2_normalize_rows(&mut self, x: NodeId) -> NodeId {
        let (n, d) = self.value(x).dims2();
        let src = self.value(x).data();
        let mut norms = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * d);
        for r in 0..n {
            let row = &src[r * d..(r + 1) * d];
            // small floor keeps the zero vector finite
            let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(T::of(1e-12));
            out.extend(row.iter().map(|&v| v / nrm));
            norms.push(nrm);
        }
        let value = Tensor::from_vec(&[n, d], out);
        let rg = self.rg(&[x]);
        self.push(value, Op::L2NormalizeRows { x, norms }, rg)
    }

    /// Gather feature vectors at flat spatial `locations` from every sample:
    /// `[n, c, h, w] -> [n * p, c]`, sample-major.
    pub fn gather_locations(&mut self, x: NodeId, locations: &[usize]) -> NodeId {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * locations.len() * c);
        for s in 0..n {
            for &loc in locations {
                assert!(loc < hw, "gather_locations: location {loc} outside {h}x{w}");
                out.extend((0..c).map(|ch| src[(s * c + ch) * hw + loc]));
            }
        }
        let value = Tensor::from_vec(&[n * locations.len(), c], out);
        let rg = self.rg(&[x]);
        self.push(
            value,
            Op::GatherLocations { x, locations: locations.to_vec() },
            rg,
        )
    }

    /// Patch-wise InfoNCE. `q` and `k` are `[groups * p, d]`; within each
    /// group query `i` is positive with key `i` and negative with the other
    /// `p - 1` keys. Returns the mean cross-entropy over all queries.
    pub fn patch_nce(&mut self, q: NodeId, k: NodeId, groups: usize, tau: T) -> NodeId {
        let (rows, d) = self.value(q).dims2();
        assert_eq!(self.value(k).shape(), self.value(q).shape(), "patch_nce: q/k shape mismatch");
        assert!(groups > 0 && rows % groups == 0);
        let (loss, softmax) = patch_nce_forward(self.value(q).data(), self.value(k).data(), rows / groups, d, groups, tau);
        let rg = self.rg(&[q, k]);
        self.push(
            Tensor::scalar(loss),
            Op::PatchNce { q, k, groups, tau, softmax },
            rg,
        )
    }

    /// Mean binary cross-entropy of logits `z` against `target` (same length),
    /// with probabilities clamped to `[PROB_EPS, 1 - PROB_EPS]`.
    pub fn bce_logits(&mut self, z: NodeId, target: Vec<T>) -> NodeId {
        let zv = self.value(z).data();
        assert_eq!(zv.len(), target.len(), "bce_logits: target length mismatch");
        let (lo, hi) = (T::of(PROB_EPS), T::one() - T::of(PROB_EPS));
        let mut probs = Vec::with_capacity(zv.len());
        let mut clamped = Vec::with_capacity(zv.len());
        let mut total = T::zero();
        for (&zi, &t) in zv.iter().zip(&target) {
            let p = sigmoid(zi);
            let pc = p.max(lo).min(hi);
            clamped.push(pc != p);
            total -= t * pc.ln() + (T::one() - t) * (T::one() - pc).ln();
            probs.push(pc);
        }
        let loss = total / T::of(zv.len() as f64);
        let rg = self.rg(&[z]);
        self.push(Tensor::scalar(loss), Op::BceLogits { z, target, probs, clamped }, rg)
    }

    pub fn mse(&mut self, z: NodeId, target: Vec<T>) -> NodeId {
        let zv = self.value(z).data();
        assert_eq!(zv.len(), target.len());
        let loss = zv.iter().zip(&target).map(|(&a, &t)| (a - t) * (a - t)).sum::<T>() / T::of(zv.len() as f64);
        let rg = self.rg(&[z]);
        self.push(Tensor::scalar(loss), Op::Mse { z, target }, rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let m = v.data().iter().copied().sum::<T>() / T::of(v.len() as f64);
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// Backpropagate from scalar `loss`. Gradients of earlier calls are
    /// discarded.
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(self.value(loss).len(), 1, "backward: loss must be a scalar");
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return;
        }
        self.grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(gy) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &gy);
            self.grads[i] = Some(gy);
        }
    }

    fn acc(&mut self, id: NodeId, f: impl FnOnce(&mut [T], &Self)) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let mut g = self.grads[id.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.nodes[id.0].value.shape()));
        f(g.data_mut(), self);
        self.grads[id.0] = Some(g);
    }

    fn backprop_node(&mut self, i: usize, gy: &Tensor<T>) {
        let gy = gy.data();
        // Ops are borrowed from the node list while grads are updated, so
        // temporarily move the op out.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom, cols } => {
                let n = self.value(*x).shape()[0];
                let wv = self.value(*w).data().to_vec();
                if let Some(b) = b {
                    self.acc(*b, |db, _| kernels::conv2d_backward(gy, n, &wv, cols, geom, None, None, Some(db)));
                }
                self.acc(*w, |dw, _| kernels::conv2d_backward(gy, n, &wv, cols, geom, None, Some(dw), None));
                self.acc(*x, |dx, _| kernels::conv2d_backward(gy, n, &wv, cols, geom, Some(dx), None, None));
            }
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    self.acc(id, |d, _| d.iter_mut().zip(gy).for_each(|(d, &g)| *d += g));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.acc(*a, |d, _| d.iter_mut().zip(gy).for_each(|(d, &g)| *d += g * s));
            }
            Op::Relu(a) => {
                let a = *a;
                self.acc(a, |d, g| {
                    for ((d, &y), &x) in d.iter_mut().zip(gy).zip(g.value(a).data()) {
                        if x > T::zero() {
                            *d += y;
                        }
                    }
                });
            }
            Op::LeakyRelu(a, slope) => {
                let (a, slope) = (*a, *slope);
                self.acc(a, |d, g| {
                    for ((d, &y), &x) in d.iter_mut().zip(gy).zip(g.value(a).data()) {
                        *d += if x > T::zero() { y } else { y * slope };
                    }
                });
            }
            Op::Sigmoid(a) => {
                let out = self.nodes[i].value.data().to_vec();
                self.acc(*a, |d, _| {
                    for ((d, &y), &s) in d.iter_mut().zip(gy).zip(&out) {
                        *d += y * s * (T::one() - s);
                    }
                });
            }
            Op::Norm { x, gamma, beta, per_sample, xhat, inv_std } => {
                let dims = self.value(*x).dims4();
                let (c, hw) = (dims.1, dims.2 * dims.3);
                let ch = |idx: usize| (idx / hw) % c;
                if let Some(b) = beta {
                    self.acc(*b, |db, _| {
                        for (idx, &g) in gy.iter().enumerate() {
                            db[ch(idx)] += g;
                        }
                    });
                }
                if let Some(gm) = gamma {
                    self.acc(*gm, |dg, _| {
                        for (idx, (&g, &xh)) in gy.iter().zip(xhat).enumerate() {
                            dg[ch(idx)] += g * xh;
                        }
                    });
                }
                let gvals = gamma.map(|g| self.value(g).data().to_vec());
                let dxhat: Vec<T> = match &gvals {
                    Some(gv) => gy.iter().enumerate().map(|(idx, &g)| g * gv[ch(idx)]).collect(),
                    None => gy.to_vec(),
                };
                self.acc(*x, |dx, _| kernels::norm_backward(&dxhat, xhat, inv_std, dims, *per_sample, dx));
            }
            Op::ChannelAffine { x, scale } => {
                let (_, c, h, w) = self.value(*x).dims4();
                let hw = h * w;
                self.acc(*x, |dx, _| {
                    for (idx, (d, &g)) in dx.iter_mut().zip(gy).enumerate() {
                        *d += g * scale[(idx / hw) % c];
                    }
                });
            }
            Op::MaxPool2 { x, argmax } => {
                self.acc(*x, |dx, _| {
                    for (&g, &src) in gy.iter().zip(argmax) {
                        dx[src as usize] += g;
                    }
                });
            }
            Op::Resize { x } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let (_, _, ho, wo) = self.nodes[i].value.dims4();
                self.acc(*x, |dx, _| kernels::bilinear_backward(gy, n * c, h, w, ho, wo, dx));
            }
            Op::ConcatChannels(a, b) => {
                let (n, ca, h, w) = self.value(*a).dims4();
                let cb = self.value(*b).shape()[1];
                let hw = h * w;
                let ct = ca + cb;
                self.acc(*a, |d, _| {
                    for s in 0..n {
                        let src = &gy[s * ct * hw..s * ct * hw + ca * hw];
                        d[s * ca * hw..(s + 1) * ca * hw].iter_mut().zip(src).for_each(|(d, &g)| *d += g);
                    }
                });
                self.acc(*b, |d, _| {
                    for s in 0..n {
                        let src = &gy[s * ct * hw + ca * hw..(s + 1) * ct * hw];
                        d[s * cb * hw..(s + 1) * cb * hw].iter_mut().zip(src).for_each(|(d, &g)| *d += g);
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let (n, din) = self.value(*x).dims2();
                let dout = self.value(*w).shape()[0];
                self.acc(*b, |db, _| {
                    for r in 0..n {
                        db.iter_mut().zip(&gy[r * dout..(r + 1) * dout]).for_each(|(d, &g)| *d += g);
                    }
                });
                let xv = self.value(*x).data().to_vec();
                self.acc(*w, |dw, _| {
                    // dW[dout, din] += gy^T[dout, n] * x[n, din]
                    T::gemm(dout, n, din, T::one(), gy, 1, dout as isize, &xv, din as isize, 1, T::one(), dw, din as isize, 1);
                });
                let wv = self.value(*w).data().to_vec();
                self.acc(*x, |dx, _| {
                    // dX[n, din] += gy[n, dout] * W[dout, din]
                    T::gemm(n, dout, din, T::one(), gy, dout as isize, 1, &wv, din as isize, 1, T::one(), dx, din as isize, 1);
                });
            }
            Op::L2NormalizeRows { x, norms } => {
                let (n, d) = self.value(*x).dims2();
                let y = self.nodes[i].value.data().to_vec();
                self.acc(*x, |dx, _| {
                    for r in 0..n {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &gy[r * d..(r + 1) * d];
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            dx[r * d + j] += (gr[j] - yr[j] * dot) / norms[r];
                        }
                    }
                });
            }
            Op::GatherLocations { x, locations } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let p = locations.len();
                self.acc(*x, |dx, _| {
                    for s in 0..n {
                        for (pi, &loc) in locations.iter().enumerate() {
                            for ch in 0..c {
                                dx[(s * c + ch) * hw + loc] += gy[(s * p + pi) * c + ch];
                            }
                        }
                    }
                });
            }
            Op::PatchNce { q, k, groups, tau, softmax } => {
                let (rows, d) = self.value(*q).dims2();
                let p = rows / groups;
                let scale = gy[0] / (T::of(rows as f64) * *tau);
                // dS[i][j] = (softmax_ij - [i == j]) / rows, chained through S = q k^T / tau
                let mut ds = softmax.clone();
                for gidx in 0..*groups {
                    for r in 0..p {
                        ds[gidx * p * p + r * p + r] -= T::one();
                    }
                }
                let qv = self.value(*q).data().to_vec();
                let kv = self.value(*k).data().to_vec();
                self.acc(*q, |dq, _| {
                    for gidx in 0..*groups {
                        let off = gidx * p * d;
                        T::gemm(p, p, d, scale, &ds[gidx * p * p..], p as isize, 1, &kv[off..], d as isize, 1, T::one(), &mut dq[off..], d as isize, 1);
                    }
                });
                self.acc(*k, |dk, _| {
                    for gidx in 0..*groups {
                        let off = gidx * p * d;
                        T::gemm(p, p, d, scale, &ds[gidx * p * p..], 1, p as isize, &qv[off..], d as isize, 1, T::one(), &mut dk[off..], d as isize, 1);
                    }
                });
            }
            Op::BceLogits { z, target, probs, clamped } => {
                let scale = gy[0] / T::of(target.len() as f64);
                self.acc(*z, |dz, _| {
                    for (((d, &p), &t), &c) in dz.iter_mut().zip(probs).zip(target).zip(clamped) {
                        if !c {
                            *d += (p - t) * scale;
                        }
                    }
                });
            }
            Op::Mse { z, target } => {
                let scale = gy[0] * T::of(2.0 / target.len() as f64);
                let z = *z;
                self.acc(z, |dz, g| {
                    for ((d, &a), &t) in dz.iter_mut().zip(g.value(z).data()).zip(target) {
                        *d += (a - t) * scale;
                    }
                });
            }
            Op::Mean(a) => {
                let s = gy[0] / T::of(self.value(*a).len() as f64);
                self.acc(*a, |d, _| d.iter_mut().for_each(|d| *d += s));
            }
        }
        self.nodes[i].op = op;
    }
}

pub fn sigmoid<T: Float>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Forward pass of the grouped patch InfoNCE; returns the mean loss and the
/// row-wise softmax matrices (one `p x p` block per group).
pub fn patch_nce_forward<T: Float>(q: &[T], k: &[T], p: usize, d: usize, groups: usize, tau: T) -> (T, Vec<T>) {
    let mut softmax = vec![T::zero(); groups * p * p];
    let inv_tau = T::one() / tau;
    let mut total = T::zero();
    for gidx in 0..groups {
        let off = gidx * p * d;
        let block = &mut softmax[gidx * p * p..(gidx + 1) * p * p];
        T::gemm(p, d, p, inv_tau, &q[off..], d as isize, 1, &k[off..], 1, d as isize, T::zero(), block, p as isize, 1);
        for r in 0..p {
            let row = &mut block[r * p..(r + 1) * p];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            total += lse - row[r];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
    }
    (total / T::of((groups * p) as f64), softmax)
}
