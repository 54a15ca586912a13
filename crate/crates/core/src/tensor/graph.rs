//! Recording graph with reverse-mode differentiation.
//!
//! Every forward op evaluates eagerly and appends a node; [`Graph::backward`]
//! walks the nodes in reverse and accumulates gradients into every input that
//! requires them.

use super::kernels::{self, axis_split, LAYER_NORM_EPS};
use super::{ParamGrads, ParamId, ParamStore, RngState, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Transpose(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    SliceLast {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'p> {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: Option<&'p ParamStore>,
    param_vars: Vec<Option<Var>>,
    track_params: bool,
    dropout: Option<RngState>,
    tags: Vec<(&'static str, Var)>,
}

impl Default for Graph<'static> {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph<'static> {
    /// A free-standing graph with no parameter store.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: None,
            param_vars: Vec::new(),
            track_params: false,
            dropout: None,
            tags: Vec::new(),
        }
    }
}

impl<'p> Graph<'p> {
    fn bound(store: &'p ParamStore, track_params: bool, dropout: Option<RngState>) -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: Some(store),
            param_vars: vec![None; store.len()],
            track_params,
            dropout,
            tags: Vec::new(),
        }
    }

    /// Inference: parameters are constants and dropout is the identity.
    pub fn eval(store: &'p ParamStore) -> Self {
        Self::bound(store, false, None)
    }

    /// Deterministic forward that records parameter gradients (dropout off).
    pub fn with_grads(store: &'p ParamStore) -> Self {
        Self::bound(store, true, None)
    }

    /// Training forward: parameter gradients recorded, dropout active.
    pub fn train(store: &'p ParamStore, rng: RngState) -> Self {
        Self::bound(store, true, Some(rng))
    }

    pub fn is_training(&self) -> bool {
        self.dropout.is_some()
    }

    /// Hands back the dropout stream so a caller can continue it.
    pub fn take_rng(&mut self) -> Option<RngState> {
        self.dropout.take()
    }

    /// Labels an intermediate node so callers can inspect it after a forward.
    pub fn tag(&mut self, label: &'static str, v: Var) {
        self.tags.push((label, v));
    }

    pub fn tagged(&self, label: &str) -> Vec<Var> {
        self.tags.iter().filter(|(l, _)| *l == label).map(|(_, v)| *v).collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A leaf whose gradient is recorded by [`Graph::backward`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// The node for parameter `id`; repeated uses share one node.
    ///
    /// # Panics
    /// If the graph has no parameter store.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let store = self.params.expect("graph has no parameter store");
        let v = self.leaf(store.get(id).clone(), self.track_params);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape(name, x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |p, q| p + q)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |p, q| p - q)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |p, q| p * q)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds the vector `bias` to every slice along the last axis of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let d = bv.numel();
        if xv.cols() != d || bv.rank() != 1 {
            return Err(Error::shape("add_row", xv.shape(), bv.shape()));
        }
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv.data()[i % d])
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddRow(x, bias), &[x, bias]))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| scale * v + shift).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Affine(x, scale), &[x])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.affine(x, factor, 0.0)
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 1.0)
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let xv = self.value(x);
        Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| f(*v)).collect()).expect("same shape")
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.map(x, f64::tanh);
        self.push(out, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.map(x, kernels::sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| v.max(0.0));
        self.push(out, Op::Relu(x), &[x])
    }

    /// Which side of every piecewise-linear branch point the forward took:
    /// the sign of each ReLU input and the winner of each max-pool.
    pub fn branch_pattern(&self) -> Vec<u64> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    let data = self.nodes[x.0].value.data();
                    for chunk in data.chunks(64) {
                        out.push(chunk.iter().enumerate().fold(0u64, |w, (i, v)| w | (u64::from(*v > 0.0) << i)));
                    }
                }
                Op::MaxPool { argmax, .. } => out.extend(argmax.iter().map(|&i| i as u64)),
                _ => {}
            }
        }
        out
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = kernels::softmax(self.value(x), axis)?;
        Ok(self.push(out, Op::Softmax(x, axis), &[x]))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let axis = self.value(x).rank().saturating_sub(1);
        self.softmax(x, axis)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (out, cache) =
            kernels::layer_norm_raw(self.value(x), self.value(gain), self.value(bias), LAYER_NORM_EPS)?;
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat: cache.xhat,
            rstd: cache.rstd,
        };
        Ok(self.push(out, op, &[x, gain, bias]))
    }

    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = kernels::conv1d(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(out, Op::Conv1d { x, w, b }, &[x, w, b]))
    }

    pub fn maxpool_time(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = kernels::maxpool_raw(self.value(x))?;
        Ok(self.push(out, Op::MaxPool { x, argmax }, &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        Ok(self.push(out, Op::Transpose(x), &[x]))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or(Error::EmptyAxis("concat"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut total = 0;
        for p in parts {
            let s = self.value(*p).shape();
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = self.value(*p);
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// `x[..., start..start + len]`.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if xv.rank() == 0 || start + len > d {
            return Err(Error::shape("slice_last", xv.shape(), &[start, len]));
        }
        let rows = xv.numel() / d.max(1);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.data()[r * d + start..r * d + start + len]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = len;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::SliceLast { x, start }, &[x]))
    }

    /// Selects slices along the leading axis; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let rows = xv.rows();
        if xv.rank() == 0 || index.iter().any(|&i| i >= rows) {
            return Err(Error::shape("gather_rows", xv.shape(), &[index.len()]));
        }
        let width = xv.numel() / rows.max(1);
        let mut data = Vec::with_capacity(index.len() * width);
        for &i in index {
            data.extend_from_slice(&xv.data()[i * width..(i + 1) * width]);
        }
        let mut shape = xv.shape().to_vec();
        shape[0] = index.len();
        let out = Tensor::new(shape, data)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            &[x],
        ))
    }

    /// Row `i` of a 2-D tensor, kept as `1 × d`.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        self.gather_rows(x, &[i])
    }

    /// Inverted dropout: identity outside training, otherwise zeroes entries
    /// with probability `p` and rescales survivors by `1 / (1 - p)`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if p <= 0.0 {
            return x;
        }
        let Some(rng) = self.dropout.as_mut() else {
            return x;
        };
        let n = self.nodes[x.0].value.numel();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..n).map(|_| if rng.bernoulli(p) { 0.0 } else { keep }).collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Dropout { x, mask }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Mean squared error between two same-shape nodes.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Populates gradients of every node that depends on a gradient leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        let nodes = &self.nodes;
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            backprop(nodes, &mut grads, i, &g);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradients of every parameter used in this graph (zeros if unreached).
    pub fn into_param_grads(self) -> ParamGrads {
        let mut entries = Vec::new();
        for (pid, var) in self.param_vars.iter().enumerate() {
            let Some(v) = var else { continue };
            let g = self
                .grads
                .get(v.0)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.numel()]);
            entries.push((ParamId(pid), g));
        }
        ParamGrads { entries }
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]))
}

fn add_scaled(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64], factor: f64) {
    if let Some(buf) = slot(nodes, grads, v) {
        for (b, x) in buf.iter_mut().zip(g) {
            *b += factor * x;
        }
    }
}

fn backprop(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let node = &nodes[i];
    let y = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if let Some(ga) = slot(nodes, grads, *a) {
                for r in 0..m {
                    for p in 0..k {
                        let brow = &bv.data()[p * n..(p + 1) * n];
                        let grow = &g[r * n..(r + 1) * n];
                        ga[r * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for r in 0..m {
                    let grow = &g[r * n..(r + 1) * n];
                    for p in 0..k {
                        let av = av.data()[r * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for (dst, x) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *dst += av * x;
                        }
                    }
                }
            }
        }
        Op::Add(a, b) => {
            add_scaled(nodes, grads, *a, g, 1.0);
            add_scaled(nodes, grads, *b, g, 1.0);
        }
        Op::Sub(a, b) => {
            add_scaled(nodes, grads, *a, g, 1.0);
            add_scaled(nodes, grads, *b, g, -1.0);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            if let Some(ga) = slot(nodes, grads, *a) {
                for j in 0..g.len() {
                    ga[j] += g[j] * bv[j];
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for j in 0..g.len() {
                    gb[j] += g[j] * av[j];
                }
            }
        }
        Op::AddRow(x, bias) => {
            add_scaled(nodes, grads, *x, g, 1.0);
            if let Some(gb) = slot(nodes, grads, *bias) {
                let d = gb.len();
                for (j, v) in g.iter().enumerate() {
                    gb[j % d] += v;
                }
            }
        }
        Op::Affine(x, scale) => add_scaled(nodes, grads, *x, g, *scale),
        Op::Tanh(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for j in 0..g.len() {
                    gx[j] += g[j] * (1.0 - y[j] * y[j]);
                }
            }
        }
        Op::Sigmoid(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for j in 0..g.len() {
                    gx[j] += g[j] * y[j] * (1.0 - y[j]);
                }
            }
        }
        Op::Relu(x) => {
            let xv = nodes[x.0].value.data();
            if let Some(gx) = slot(nodes, grads, *x) {
                for j in 0..g.len() {
                    if xv[j] > 0.0 {
                        gx[j] += g[j];
                    }
                }
            }
        }
        Op::Softmax(x, axis) => {
            let (outer, len, inner) = axis_split(node.value.shape(), *axis);
            if let Some(gx) = slot(nodes, grads, *x) {
                for o in 0..outer {
                    for n in 0..inner {
                        let idx = |j: usize| o * len * inner + n + j * inner;
                        let dot: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..len {
                            gx[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let d = nodes[gain.0].value.numel();
            let gv = nodes[gain.0].value.data();
            let rows = rstd.len();
            if let Some(gx) = slot(nodes, grads, *x) {
                let mut gh = vec![0.0; d];
                for r in 0..rows {
                    let base = r * d;
                    for j in 0..d {
                        gh[j] = g[base + j] * gv[j];
                    }
                    let sum_gh: f64 = gh.iter().sum();
                    let sum_ghx: f64 = (0..d).map(|j| gh[j] * xhat[base + j]).sum();
                    let scale = rstd[r] / d as f64;
                    for j in 0..d {
                        gx[base + j] += scale * (d as f64 * gh[j] - sum_gh - xhat[base + j] * sum_ghx);
                    }
                }
            }
            if let Some(gg) = slot(nodes, grads, *gain) {
                for (j, v) in g.iter().enumerate() {
                    gg[j % d] += v * xhat[j];
                }
            }
            if let Some(gb) = slot(nodes, grads, *bias) {
                for (j, v) in g.iter().enumerate() {
                    gb[j % d] += v;
                }
            }
        }
        Op::Conv1d { x, w, b } => {
            let xv = &nodes[x.0].value;
            let wv = &nodes[w.0].value;
            let (d_out, d_in, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
            let n = xv.cols();
            let batch = xv.numel() / (d_in * n);
            let w_out = n - k + 1;
            if let Some(gw) = slot(nodes, grads, *w) {
                for bi in 0..batch {
                    for o in 0..d_out {
                        let grow = &g[(bi * d_out + o) * w_out..(bi * d_out + o + 1) * w_out];
                        for c in 0..d_in {
                            let xrow = &xv.data()[(bi * d_in + c) * n..(bi * d_in + c + 1) * n];
                            for s in 0..k {
                                gw[(o * d_in + c) * k + s] +=
                                    grow.iter().zip(&xrow[s..]).map(|(p, q)| p * q).sum::<f64>();
                            }
                        }
                    }
                }
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                for bi in 0..batch {
                    for o in 0..d_out {
                        let grow = &g[(bi * d_out + o) * w_out..(bi * d_out + o + 1) * w_out];
                        for c in 0..d_in {
                            let dst = &mut gx[(bi * d_in + c) * n..(bi * d_in + c + 1) * n];
                            for s in 0..k {
                                let wv = wv.data()[(o * d_in + c) * k + s];
                                for (t, gv) in grow.iter().enumerate() {
                                    dst[t + s] += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for bi in 0..batch {
                    for o in 0..d_out {
                        let grow = &g[(bi * d_out + o) * w_out..(bi * d_out + o + 1) * w_out];
                        gb[o] += grow.iter().sum::<f64>();
                    }
                }
            }
        }
        Op::MaxPool { x, argmax } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for (r, &pos) in argmax.iter().enumerate() {
                    gx[pos] += g[r];
                }
            }
        }
        Op::Transpose(x) => {
            let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
            if let Some(gx) = slot(nodes, grads, *x) {
                for r in 0..m {
                    for c in 0..n {
                        gx[c * m + r] += g[r * n + c];
                    }
                }
            }
        }
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = axis_split(node.value.shape(), *axis);
            let mut offset = 0;
            for p in parts {
                let len = nodes[p.0].value.shape()[*axis];
                if let Some(gp) = slot(nodes, grads, *p) {
                    let chunk = len * inner;
                    for o in 0..outer {
                        let src = &g[o * total * inner + offset * inner..][..chunk];
                        for (d, s) in gp[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                offset += len;
            }
        }
        Op::SliceLast { x, start } => {
            let len = node.value.cols();
            let d = nodes[x.0].value.cols();
            if let Some(gx) = slot(nodes, grads, *x) {
                let rows = g.len() / len.max(1);
                for r in 0..rows {
                    for j in 0..len {
                        gx[r * d + start + j] += g[r * len + j];
                    }
                }
            }
        }
        Op::GatherRows { x, index } => {
            let xv = &nodes[x.0].value;
            let width = xv.numel() / xv.rows().max(1);
            if let Some(gx) = slot(nodes, grads, *x) {
                for (r, &src) in index.iter().enumerate() {
                    for j in 0..width {
                        gx[src * width + j] += g[r * width + j];
                    }
                }
            }
        }
        Op::Dropout { x, mask } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for j in 0..g.len() {
                    gx[j] += g[j] * mask[j];
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().for_each(|v| *v += g[0]);
            }
        }
        Op::Mean(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let share = g[0] / gx.len().max(1) as f64;
                gx.iter_mut().for_each(|v| *v += share);
            }
        }
        Op::Reshape(x) => add_scaled(nodes, grads, *x, g, 1.0),
    }
}
