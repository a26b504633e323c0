//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only tape. Every method that produces a new value
//! pushes one node holding the forward result and enough saved state to run
//! its vector-Jacobian product later. Node ids are handed out in push order,
//! so the tape is topologically sorted by construction and [`Graph::backward`]
//! is a single reverse sweep.
//!
//! Graphs are rebuilt for every forward pass. Parameters enter through
//! [`Graph::param`], which loads each parameter at most once per graph so that
//! its gradient accumulates in one place.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::kernels;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the forward output.
    fn slope_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Lower clamp applied to probabilities before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Guard used when normalising a tensor with (near) zero norm.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    Act(Var, Activation),
    SoftmaxRows(Var),
    Conv2d {
        input: Var,
        kernels: Var,
        stride: usize,
        pad: usize,
    },
    WindowMax {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    BilinearShift {
        input: Var,
        offsets: Var,
        scale: f64,
    },
    NormalizeItems(Var),
    NegLogPick {
        input: Var,
        labels: Vec<usize>,
    },
    SelectBlocks {
        input: Var,
        labels: Vec<usize>,
        width: usize,
    },
    SmoothL1(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    per_node: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient with respect to a node, or `None` when the loss does not
    /// depend on it.
    pub fn wrt(&self, v: Var) -> Option<Tensor> {
        self.per_node[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    /// Gradient with respect to a node, zeros when unreached.
    pub fn wrt_or_zero(&self, v: Var) -> Tensor {
        self.wrt(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// One gradient per parameter loaded on the graph, sorted by id.
    /// Unreached parameters get an all-zero gradient.
    pub fn params(&self) -> Vec<(ParamId, Tensor)> {
        self.params
            .iter()
            .map(|&(id, v)| (id, self.wrt_or_zero(v)))
            .collect()
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Constant or input leaf.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Trainable leaf. Loading the same parameter twice returns the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose2()?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.push(out, Op::Scale(a, factor))
    }

    /// `x + b` with `b` broadcast over the rows of a matrix (or added to a
    /// vector of the same length).
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let out = kernels::add_row_bias(self.value(x), self.value(b))?;
        Ok(self.push(out, Op::AddRowBias(x, b)))
    }

    /// `x + b[c]` for every spatial cell of channel `c` in a `C×H×W` or
    /// `B×C×H×W` tensor.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let out = kernels::add_channel_bias(self.value(x), self.value(b))?;
        Ok(self.push(out, Op::AddChannelBias(x, b)))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let out = self.value(x).map(|v| kind.apply(v));
        self.push(out, Op::Act(x, kind))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    /// Softmax over the last axis of a vector or of each matrix row.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = kernels::softmax_rows(self.value(x))?;
        Ok(self.push(out, Op::SoftmaxRows(x)))
    }

    /// Cross-correlation of a `C_in×H×W` (or batched `B×C_in×H×W`) input with
    /// `C_out×C_in×kh×kw` kernels.
    pub fn conv2d(&mut self, input: Var, kernels: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = kernels::conv2d(self.value(input), self.value(kernels), stride, pad)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernels,
                stride,
                pad,
            },
        ))
    }

    /// Adaptive max pooling of `C×H×W` onto `C×out_h×out_w`.
    pub fn adaptive_max_pool(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (out, argmax) = kernels::adaptive_max_pool(self.value(input), out_h, out_w)?;
        Ok(self.push(out, Op::WindowMax { input, argmax }))
    }

    /// Max pooling over explicit windows `(row0, row1, col0, col1)` (half-open)
    /// of a `C×H×W` input. `windows` holds `items × grid_h × grid_w` entries
    /// and the output is `items×C×grid_h×grid_w`.
    pub fn window_max(
        &mut self,
        input: Var,
        windows: &[kernels::Window],
        items: usize,
        grid_h: usize,
        grid_w: usize,
    ) -> Result<Var> {
        let (out, argmax) = kernels::window_max(self.value(input), windows, items, grid_h, grid_w)?;
        Ok(self.push(out, Op::WindowMax { input, argmax }))
    }

    /// Per-channel spatial mean: `C×H×W → C`, `B×C×H×W → B×C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = kernels::global_avg_pool(self.value(x))?;
        Ok(self.push(out, Op::GlobalAvgPool(x)))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let parts: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat(&parts, axis)?;
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    pub fn narrow(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = self.value(input).narrow(axis, start, len)?;
        Ok(self.push(out, Op::Narrow { input, axis, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Bilinear resampling of each `D×S×S` item of `input` (`R×D×S×S`) on the
    /// lattice `scale·target + offset`, with one `(t_x, t_y)` row per item in
    /// `offsets` (`R×2`).
    pub fn bilinear_shift(&mut self, input: Var, offsets: Var, scale: f64) -> Result<Var> {
        let out = kernels::bilinear_shift(self.value(input), self.value(offsets), scale)?;
        Ok(self.push(
            out,
            Op::BilinearShift {
                input,
                offsets,
                scale,
            },
        ))
    }

    /// Scales every leading-axis item to unit L2 norm (`1/max(‖x‖, NORM_EPS)`).
    pub fn normalize_items(&mut self, x: Var) -> Result<Var> {
        let out = kernels::normalize_items(self.value(x))?;
        Ok(self.push(out, Op::NormalizeItems(x)))
    }

    /// `−ln max(p[r, labels[r]], PROB_FLOOR)` for each row of `R×K`.
    pub fn neg_log_pick(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let p = self.value(probs);
        if p.rank() != 2 || p.shape()[0] != labels.len() {
            return Err(Error::dim(format!(
                "neg_log_pick: {:?} with {} labels",
                p.shape(),
                labels.len()
            )));
        }
        let k = p.shape()[1];
        let mut out = Vec::with_capacity(labels.len());
        for (r, &u) in labels.iter().enumerate() {
            if u >= k {
                return Err(Error::dim(format!("label {} out of range for {} classes", u, k)));
            }
            let pu = p.data()[r * k + u];
            if pu < PROB_FLOOR {
                log::warn!("probability {:e} clamped to {:e} before log", pu, PROB_FLOOR);
            }
            out.push(-pu.max(PROB_FLOOR).ln());
        }
        let out = Tensor::from_parts(vec![labels.len()], out);
        Ok(self.push(
            out,
            Op::NegLogPick {
                input: probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Picks the `width`-wide block for class `labels[r]` (1-based; class
    /// `k` occupies columns `[(k−1)·width, k·width)`) from each row. Rows
    /// labelled 0 yield zeros and pass no gradient.
    pub fn select_blocks(&mut self, x: Var, labels: &[usize], width: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || xv.shape()[0] != labels.len() || xv.shape()[1] % width != 0 {
            return Err(Error::dim(format!(
                "select_blocks: {:?} with {} labels, width {}",
                xv.shape(),
                labels.len(),
                width
            )));
        }
        let cols = xv.shape()[1];
        let classes = cols / width;
        let mut out = vec![0.0; labels.len() * width];
        for (r, &u) in labels.iter().enumerate() {
            if u == 0 {
                continue;
            }
            if u > classes {
                return Err(Error::dim(format!("label {} exceeds {} blocks", u, classes)));
            }
            let src = r * cols + (u - 1) * width;
            out[r * width..(r + 1) * width].copy_from_slice(&xv.data()[src..src + width]);
        }
        let out = Tensor::from_parts(vec![labels.len(), width], out);
        Ok(self.push(
            out,
            Op::SelectBlocks {
                input: x,
                labels: labels.to_vec(),
                width,
            },
        ))
    }

    pub fn smooth_l1(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::smooth_l1);
        self.push(out, Op::SmoothL1(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    /// Hash of every data-dependent branch taken in the forward pass (relu
    /// signs, pooling argmaxes, sampler cells, smooth-L1 pieces, log clamps).
    /// Two evaluations with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Act(_, Activation::Relu) => {
                    for &y in node.value.data() {
                        (y > 0.0).hash(&mut h);
                    }
                }
                Op::WindowMax { argmax, .. } => argmax.hash(&mut h),
                Op::BilinearShift {
                    input,
                    offsets,
                    scale,
                } => {
                    let s = self.value(*input).shape()[2];
                    for cell in kernels::bilinear_cells(self.value(*offsets), *scale, s) {
                        cell.hash(&mut h);
                    }
                }
                Op::SmoothL1(x) => {
                    for &v in self.value(*x).data() {
                        (v.abs() < 1.0).hash(&mut h);
                        (v > 0.0).hash(&mut h);
                    }
                }
                Op::NegLogPick { input, labels } => {
                    let p = self.value(*input);
                    let k = p.shape()[1];
                    for (r, &u) in labels.iter().enumerate() {
                        (p.data()[r * k + u] < PROB_FLOOR).hash(&mut h);
                    }
                }
                Op::NormalizeItems(x) => {
                    let xv = self.value(*x);
                    let per = xv.len() / xv.shape()[0];
                    for item in xv.data().chunks(per) {
                        (item.iter().map(|v| v * v).sum::<f64>().sqrt() > NORM_EPS).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from a one-element `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &dy, &mut grads)?;
            grads[idx] = Some(dy);
        }
        let mut params: Vec<(ParamId, Var)> = self.params.iter().map(|(&k, &v)| (k, v)).collect();
        params.sort();
        Ok(Gradients {
            per_node: grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params,
        })
    }

    fn propagate(&self, idx: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                {
                    let da = self.slot(grads, *a);
                    kernels::matmul_nt_acc(dy, bv.data(), da, m, n, k);
                }
                let db = self.slot(grads, *b);
                kernels::matmul_tn_acc(av.data(), dy, db, m, k, n);
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                let (r, c) = (s[0], s[1]);
                let da = self.slot(grads, *a);
                for i in 0..r {
                    for j in 0..c {
                        da[j * r + i] += dy[i * c + j];
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(self.slot(grads, *a), dy);
                add_into(self.slot(grads, *b), dy);
            }
            Op::Sub(a, b) => {
                add_into(self.slot(grads, *a), dy);
                let db = self.slot(grads, *b);
                for (g, d) in db.iter_mut().zip(dy) {
                    *g -= d;
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                {
                    let da = self.slot(grads, *a);
                    for i in 0..dy.len() {
                        da[i] += dy[i] * bv[i];
                    }
                }
                let db = self.slot(grads, *b);
                for i in 0..dy.len() {
                    db[i] += dy[i] * av[i];
                }
            }
            Op::Scale(a, factor) => {
                let da = self.slot(grads, *a);
                for (g, d) in da.iter_mut().zip(dy) {
                    *g += d * factor;
                }
            }
            Op::AddRowBias(x, b) => {
                add_into(self.slot(grads, *x), dy);
                let n = self.value(*b).len();
                let db = self.slot(grads, *b);
                for row in dy.chunks(n) {
                    add_into(db, row);
                }
            }
            Op::AddChannelBias(x, b) => {
                add_into(self.slot(grads, *x), dy);
                let s = node.value.shape();
                let c = s[s.len() - 3];
                let plane = s[s.len() - 2] * s[s.len() - 1];
                let db = self.slot(grads, *b);
                for (i, block) in dy.chunks(plane).enumerate() {
                    db[i % c] += block.iter().sum::<f64>();
                }
            }
            Op::Act(x, kind) => {
                let dx = self.slot(grads, *x);
                for i in 0..dy.len() {
                    dx[i] += dy[i] * kind.slope_from_output(y[i]);
                }
            }
            Op::SoftmaxRows(x) => {
                let n = *node.value.shape().last().unwrap();
                let dx = self.slot(grads, *x);
                for (r, (yr, dyr)) in y.chunks(n).zip(dy.chunks(n)).enumerate() {
                    let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dx[r * n + j] += yr[j] * (dyr[j] - dot);
                    }
                }
            }
            Op::Conv2d {
                input,
                kernels: kv,
                stride,
                pad,
            } => {
                let (iv, wv) = (self.value(*input), self.value(*kv));
                {
                    let dx = self.slot(grads, *input);
                    kernels::conv2d_backward_input(dy, wv, iv.shape(), node.value.shape(), *stride, *pad, dx);
                }
                let dw = self.slot(grads, *kv);
                kernels::conv2d_backward_kernels(dy, iv, wv.shape(), node.value.shape(), *stride, *pad, dw);
            }
            Op::WindowMax { input, argmax } => {
                let dx = self.slot(grads, *input);
                for (k, &src) in argmax.iter().enumerate() {
                    dx[src] += dy[k];
                }
            }
            Op::GlobalAvgPool(x) => {
                let s = self.value(*x).shape();
                let plane = s[s.len() - 2] * s[s.len() - 1];
                let inv = 1.0 / plane as f64;
                let dx = self.slot(grads, *x);
                for (k, block) in dx.chunks_mut(plane).enumerate() {
                    let g = dy[k] * inv;
                    for v in block {
                        *v += g;
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let s = node.value.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let total = s[*axis];
                let mut start = 0;
                for &inp in inputs {
                    let extent = self.value(inp).shape()[*axis];
                    let chunk = extent * inner;
                    if chunk > 0 {
                        let dx = self.slot(grads, inp);
                        for o in 0..outer {
                            let src = o * total * inner + start * inner;
                            add_into(&mut dx[o * chunk..(o + 1) * chunk], &dy[src..src + chunk]);
                        }
                    }
                    start += extent;
                }
            }
            Op::Narrow { input, axis, start } => {
                let s = self.value(*input).shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let extent = s[*axis];
                let len = node.value.shape()[*axis];
                let dx = self.slot(grads, *input);
                for o in 0..outer {
                    let dst = o * extent * inner + start * inner;
                    add_into(&mut dx[dst..dst + len * inner], &dy[o * len * inner..(o + 1) * len * inner]);
                }
            }
            Op::Reshape(x) => add_into(self.slot(grads, *x), dy),
            Op::BilinearShift {
                input,
                offsets,
                scale,
            } => {
                let (uv, tv) = (self.value(*input), self.value(*offsets));
                let mut du = vec![0.0; uv.len()];
                let mut dt = vec![0.0; tv.len()];
                kernels::bilinear_shift_backward(uv, tv, *scale, dy, &mut du, &mut dt);
                add_into(self.slot(grads, *input), &du);
                add_into(self.slot(grads, *offsets), &dt);
            }
            Op::NormalizeItems(x) => {
                let xv = self.value(*x);
                let per = xv.len() / xv.shape()[0];
                let dx = self.slot(grads, *x);
                for (i, xi) in xv.data().chunks(per).enumerate() {
                    let norm = xi.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let range = i * per..(i + 1) * per;
                    let (yi, dyi) = (&y[range.clone()], &dy[range.clone()]);
                    let dxi = &mut dx[range];
                    if norm > NORM_EPS {
                        let dot: f64 = yi.iter().zip(dyi).map(|(a, b)| a * b).sum();
                        for j in 0..per {
                            dxi[j] += (dyi[j] - yi[j] * dot) / norm;
                        }
                    } else {
                        for j in 0..per {
                            dxi[j] += dyi[j] / NORM_EPS;
                        }
                    }
                }
            }
            Op::NegLogPick { input, labels } => {
                let p = self.value(*input);
                let k = p.shape()[1];
                let pd = p.data().to_vec();
                let dx = self.slot(grads, *input);
                for (r, &u) in labels.iter().enumerate() {
                    let pu = pd[r * k + u];
                    if pu >= PROB_FLOOR {
                        dx[r * k + u] -= dy[r] / pu;
                    }
                }
            }
            Op::SelectBlocks {
                input,
                labels,
                width,
            } => {
                let cols = self.value(*input).shape()[1];
                let dx = self.slot(grads, *input);
                for (r, &u) in labels.iter().enumerate() {
                    if u == 0 {
                        continue;
                    }
                    let dst = r * cols + (u - 1) * width;
                    add_into(&mut dx[dst..dst + width], &dy[r * width..(r + 1) * width]);
                }
            }
            Op::SmoothL1(x) => {
                let xv = self.value(*x).data();
                let dx = self.slot(grads, *x);
                for i in 0..dy.len() {
                    dx[i] += dy[i] * kernels::smooth_l1_slope(xv[i]);
                }
            }
            Op::Sum(x) => {
                let g = dy[0];
                for v in self.slot(grads, *x) {
                    *v += g;
                }
            }
        }
        Ok(())
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
        let len = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
