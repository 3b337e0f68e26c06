//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only tape. Every operation evaluates eagerly and
//! records enough to replay its adjoint; [`Graph::backward`] walks the tape in
//! reverse. Graphs are cheap to build and are rebuilt every training step.

use crate::kernels::{self, ConvGeom};
use crate::physics;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    AvgPool(Var, usize),
    Resize(Var),
    Concat(Vec<Var>),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    BroadcastChannels(Var),
    ChannelMean(Var),
    Recover {
        hazy: Var,
        t: Var,
        a: Var,
        floor: f64,
    },
    DiffX(Var),
    DiffY(Var),
    Mse(Var, Var),
    Mae(Var, Var),
    NegMeanLog(Var, f64),
    NegMeanLog1m(Var, f64),
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that does not receive a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let value = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), geom);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(value, Op::Conv { x, w, b, geom }, rg)
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let value =
            kernels::conv_transpose2d(self.value(x), self.value(w), b.map(|b| self.value(b)), geom);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(value, Op::ConvTranspose { x, w, b, geom }, rg)
    }

    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (value, xhat, inv_std) =
            kernels::batch_norm(self.value(x), self.value(gamma), self.value(beta));
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.rg(x);
        self.push(value, Op::LeakyRelu(x, slope), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(logistic);
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn avg_pool(&mut self, x: Var, k: usize) -> Var {
        let value = kernels::avg_pool(self.value(x), k);
        let rg = self.rg(x);
        self.push(value, Op::AvgPool(x, k), rg)
    }

    /// Bilinear resize to `h × w`.
    pub fn resize(&mut self, x: Var, h: usize, w: usize) -> Var {
        let value = kernels::resize_bilinear(self.value(x), h, w);
        let rg = self.rg(x);
        self.push(value, Op::Resize(x), rg)
    }

    /// Concatenates along the channel axis.
    pub fn concat(&mut self, xs: &[Var]) -> Var {
        let [n, _, h, w] = self.shape(xs[0]);
        let c_total: usize = xs.iter().map(|&v| self.shape(v)[1]).sum();
        let mut out = Tensor::zeros([n, c_total, h, w]);
        let plane = h * w;
        for b in 0..n {
            let mut offset = 0;
            for &v in xs {
                let t = self.value(v);
                assert_eq!(
                    [t.batch(), t.height(), t.width()],
                    [n, h, w],
                    "concat spatial mismatch"
                );
                let c = t.channels();
                let src = &t.data()[b * c * plane..(b + 1) * c * plane];
                let dst_start = (b * c_total + offset) * plane;
                out.data_mut()[dst_start..dst_start + c * plane].copy_from_slice(src);
                offset += c;
            }
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        self.push(out, Op::Concat(xs.to_vec()), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y).expect("add shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y).expect("sub shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let value = self.value(x).map(|v| v * k);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, k), rg)
    }

    /// Repeats a single-channel tensor `c` times along the channel axis.
    pub fn broadcast_channels(&mut self, x: Var, c: usize) -> Var {
        let t = self.value(x);
        assert_eq!(t.channels(), 1, "broadcast expects one channel");
        let [n, _, h, w] = t.shape();
        let value = Tensor::from_fn([n, c, h, w], |b, _, y, xx| t.get(b, 0, y, xx));
        let rg = self.rg(x);
        self.push(value, Op::BroadcastChannels(x), rg)
    }

    /// Replaces every pixel with its channel's spatial mean.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mut value = Tensor::zeros(t.shape());
        for b in 0..t.batch() {
            for c in 0..t.channels() {
                let m = t.channel(b, c).iter().sum::<f64>() / t.plane() as f64;
                value.channel_mut(b, c).fill(m);
            }
        }
        let rg = self.rg(x);
        self.push(value, Op::ChannelMean(x), rg)
    }

    /// Differentiable radiance recovery; see [`physics::recover_raw`].
    pub fn recover(&mut self, hazy: Var, t: Var, a: Var, floor: f64) -> Var {
        let value = physics::recover_raw(self.value(hazy), self.value(t), self.value(a), floor);
        let rg = self.rg(hazy) || self.rg(t) || self.rg(a);
        self.push(value, Op::Recover { hazy, t, a, floor }, rg)
    }

    /// Forward horizontal difference, last column zero.
    pub fn diff_x(&mut self, x: Var) -> Var {
        let value = diff_x(self.value(x));
        let rg = self.rg(x);
        self.push(value, Op::DiffX(x), rg)
    }

    /// Forward vertical difference, last row zero.
    pub fn diff_y(&mut self, x: Var) -> Var {
        let value = diff_y(self.value(x));
        let rg = self.rg(x);
        self.push(value, Op::DiffY(x), rg)
    }

    /// Mean of squared differences, as a scalar node.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mse shape");
        let n = ta.numel() as f64;
        let v: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::scalar(v), Op::Mse(a, b), rg)
    }

    /// Mean of absolute differences, as a scalar node. Subgradient 0 at ties.
    pub fn mae(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mae shape");
        let n = ta.numel() as f64;
        let v: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n;
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::scalar(v), Op::Mae(a, b), rg)
    }

    /// `-mean(log(clamp(x, eps, 1 - eps)))`.
    pub fn neg_mean_log(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let v = -t.data().iter().map(|p| p.clamp(eps, 1.0 - eps).ln()).sum::<f64>() / t.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(v), Op::NegMeanLog(x, eps), rg)
    }

    /// `-mean(log(1 - clamp(x, eps, 1 - eps)))`.
    pub fn neg_mean_log1m(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let v = -t
            .data()
            .iter()
            .map(|p| (1.0 - p.clamp(eps, 1.0 - eps)).ln())
            .sum::<f64>()
            / t.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(v), Op::NegMeanLog1m(x, eps), rg)
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let v: f64 = terms.iter().map(|&(x, w)| w * self.scalar(x)).sum();
        let rg = terms.iter().any(|&(x, _)| self.rg(x));
        self.push(Tensor::scalar(v), Op::WeightedSum(terms.to_vec()), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *geom,
                    self.rg(*x),
                    self.rg(*w),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    let shape = self.shape(*b);
                    self.accumulate(grads, *b, db.reshape(shape).expect("bias shape"));
                }
            }
            Op::ConvTranspose { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv_transpose2d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *geom,
                    self.rg(*x),
                    self.rg(*w),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    let shape = self.shape(*b);
                    self.accumulate(grads, *b, db.reshape(shape).expect("bias shape"));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (dx, dg, db) = kernels::batch_norm_backward(g, xhat, inv_std, self.value(*gamma));
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dg);
                self.accumulate(grads, *beta, db);
            }
            Op::Relu(x) => {
                let dx = g.zip_map(&node.value, |gv, y| if y > 0.0 { gv } else { 0.0 }).unwrap();
                self.accumulate(grads, *x, dx);
            }
            Op::LeakyRelu(x, slope) => {
                let dx = g
                    .zip_map(self.value(*x), |gv, xv| if xv > 0.0 { gv } else { slope * gv })
                    .unwrap();
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y)).unwrap();
                self.accumulate(grads, *x, dx);
            }
            Op::AvgPool(x, k) => {
                let dx = kernels::avg_pool_backward(g, *k, self.shape(*x));
                self.accumulate(grads, *x, dx);
            }
            Op::Resize(x) => {
                let dx = kernels::resize_bilinear_backward(g, self.shape(*x));
                self.accumulate(grads, *x, dx);
            }
            Op::Concat(xs) => {
                let [n, c_total, h, w] = g.shape();
                let plane = h * w;
                let mut offset = 0;
                for &v in xs {
                    let c = self.shape(v)[1];
                    if self.rg(v) {
                        let mut part = Tensor::zeros([n, c, h, w]);
                        for b in 0..n {
                            let src_start = (b * c_total + offset) * plane;
                            part.data_mut()[b * c * plane..(b + 1) * c * plane]
                                .copy_from_slice(&g.data()[src_start..src_start + c * plane]);
                        }
                        self.accumulate(grads, v, part);
                    }
                    offset += c;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Scale(x, k) => {
                self.accumulate(grads, *x, g.map(|v| v * k));
            }
            Op::BroadcastChannels(x) => {
                let [n, c, h, w] = g.shape();
                let mut dx = Tensor::zeros([n, 1, h, w]);
                for b in 0..n {
                    for ch in 0..c {
                        let src = g.channel(b, ch).to_vec();
                        for (d, s) in dx.channel_mut(b, 0).iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ChannelMean(x) => {
                let mut dx = Tensor::zeros(g.shape());
                for b in 0..g.batch() {
                    for c in 0..g.channels() {
                        let m = g.channel(b, c).iter().sum::<f64>() / g.plane() as f64;
                        dx.channel_mut(b, c).fill(m);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Recover { hazy, t, a, floor } => {
                let (di, dt, da) = physics::recover_vjp(
                    self.value(*hazy),
                    self.value(*t),
                    self.value(*a),
                    *floor,
                    g,
                );
                self.accumulate(grads, *hazy, di);
                self.accumulate(grads, *t, dt);
                self.accumulate(grads, *a, da);
            }
            Op::DiffX(x) => self.accumulate(grads, *x, diff_x_adjoint(g)),
            Op::DiffY(x) => self.accumulate(grads, *x, diff_y_adjoint(g)),
            Op::Mse(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let k = 2.0 * g.data()[0] / ta.numel() as f64;
                let d = ta.zip_map(tb, |x, y| k * (x - y)).unwrap();
                self.accumulate(grads, *b, d.map(|v| -v));
                self.accumulate(grads, *a, d);
            }
            Op::Mae(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let k = g.data()[0] / ta.numel() as f64;
                let d = ta.zip_map(tb, |x, y| k * sign(x - y)).unwrap();
                self.accumulate(grads, *b, d.map(|v| -v));
                self.accumulate(grads, *a, d);
            }
            Op::NegMeanLog(x, eps) => {
                let t = self.value(*x);
                let k = -g.data()[0] / t.numel() as f64;
                let dx = t.map(|p| if p > *eps && p < 1.0 - eps { k / p } else { 0.0 });
                self.accumulate(grads, *x, dx);
            }
            Op::NegMeanLog1m(x, eps) => {
                let t = self.value(*x);
                let k = g.data()[0] / t.numel() as f64;
                let dx = t.map(|p| if p > *eps && p < 1.0 - eps { k / (1.0 - p) } else { 0.0 });
                self.accumulate(grads, *x, dx);
            }
            Op::WeightedSum(terms) => {
                for &(x, w) in terms {
                    self.accumulate(grads, x, Tensor::scalar(w * g.data()[0]));
                }
            }
        }
    }
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[inline]
pub fn logistic(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `Gx(i, j) = x(i, j+1) − x(i, j)`, zero in the last column.
pub fn diff_x(t: &Tensor) -> Tensor {
    let [n, c, h, w] = t.shape();
    let mut out = Tensor::zeros(t.shape());
    for b in 0..n {
        for ch in 0..c {
            let src = t.channel(b, ch).to_vec();
            let dst = out.channel_mut(b, ch);
            for y in 0..h {
                for x in 0..w.saturating_sub(1) {
                    dst[y * w + x] = src[y * w + x + 1] - src[y * w + x];
                }
            }
        }
    }
    out
}

/// `Gy(i, j) = x(i+1, j) − x(i, j)`, zero in the last row.
pub fn diff_y(t: &Tensor) -> Tensor {
    let [n, c, h, w] = t.shape();
    let mut out = Tensor::zeros(t.shape());
    for b in 0..n {
        for ch in 0..c {
            let src = t.channel(b, ch).to_vec();
            let dst = out.channel_mut(b, ch);
            for y in 0..h.saturating_sub(1) {
                for x in 0..w {
                    dst[y * w + x] = src[(y + 1) * w + x] - src[y * w + x];
                }
            }
        }
    }
    out
}

fn diff_x_adjoint(g: &Tensor) -> Tensor {
    let [n, c, h, w] = g.shape();
    let mut out = Tensor::zeros(g.shape());
    for b in 0..n {
        for ch in 0..c {
            let src = g.channel(b, ch).to_vec();
            let dst = out.channel_mut(b, ch);
            for y in 0..h {
                for x in 0..w.saturating_sub(1) {
                    let v = src[y * w + x];
                    dst[y * w + x + 1] += v;
                    dst[y * w + x] -= v;
                }
            }
        }
    }
    out
}

fn diff_y_adjoint(g: &Tensor) -> Tensor {
    let [n, c, h, w] = g.shape();
    let mut out = Tensor::zeros(g.shape());
    for b in 0..n {
        for ch in 0..c {
            let src = g.channel(b, ch).to_vec();
            let dst = out.channel_mut(b, ch);
            for y in 0..h.saturating_sub(1) {
                for x in 0..w {
                    let v = src[y * w + x];
                    dst[(y + 1) * w + x] += v;
                    dst[y * w + x] -= v;
                }
            }
        }
    }
    out
}
