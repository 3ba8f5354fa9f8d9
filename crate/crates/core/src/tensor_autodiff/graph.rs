//! Computation record and reverse-mode gradient replay.
//!
//! A [`Graph`] owns every value produced during a forward pass. Operations
//! are appended in execution order, so the node list is already a
//! topological order and backward is a single reverse sweep.

use super::tensor::{numel, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a value stored in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this module.
///
/// `inputs` are the forward values of the operation's inputs in the order
/// they were registered; the returned vector must have one entry per input
/// (`None` when no gradient flows to that input).
pub trait CustomBackward {
    fn backward(&self, inputs: &[&[f64]], output: &[f64], grad_out: &[f64]) -> Vec<Option<Vec<f64>>>;
}

pub(crate) enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Softmax { x: Var, cols: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Relu { x: Var },
    Conv2d { x: Var, kernel: Var, stride: usize, padding: usize },
    Reshape { x: Var },
    Permute { x: Var, axes: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    AddScalar { x: Var },
    AddRowBias { x: Var, bias: Var },
    MeanAxis { x: Var, axis: usize },
    Sum { x: Var },
    Sqrt { x: Var },
    Ln { x: Var },
    Custom { inputs: Vec<Var>, rule: Box<dyn CustomBackward> },
}

pub(crate) struct Node {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Vec<f64>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op,
}

/// Ordered record of executed operations.
///
/// Built by a single writer; use one graph per thread. A recording graph
/// keeps enough state to replay gradients; an inference graph only keeps
/// values.
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    recording: bool,
    grads: Option<Vec<Option<Vec<f64>>>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), recording: true, grads: None }
    }

    /// Graph that never records operations; gradients are unavailable.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), recording: false, grads: None }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, inputs: &[Var], op: Op) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let requires_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { shape, value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    /// Inserts a tensor as a leaf; it tracks gradients if the tensor does.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let requires_grad = self.recording && t.requires_grad();
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: &[usize], value: Vec<f64>) -> Result<Var> {
        if numel(shape) != value.len() {
            return dim_err(format!("constant of shape {shape:?} given {} values", value.len()));
        }
        self.nodes.push(Node { shape: shape.to_vec(), value, requires_grad: false, op: Op::Leaf });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("graph node shape is consistent")
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Records a custom operation whose backward rule is supplied by the caller.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        shape: Vec<usize>,
        value: Vec<f64>,
        rule: Box<dyn CustomBackward>,
    ) -> Result<Var> {
        if numel(&shape) != value.len() {
            return dim_err(format!("custom op output {shape:?} given {} values", value.len()));
        }
        Ok(self.push(shape, value, inputs, Op::Custom { inputs: inputs.to_vec(), rule }))
    }

    /// Replays the record in reverse from a scalar `loss`.
    ///
    /// Fails on a non-scalar loss, on an inference graph, and when called a
    /// second time without [`Graph::reset_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::State("backward already ran on this graph; reset gradients first".into()));
        }
        if !self.recording {
            return Err(Error::State("inference graph keeps no computation record".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                for (input, contribution) in self.vjp(i, &g) {
                    if !self.nodes[input.0].requires_grad {
                        continue;
                    }
                    match &mut grads[input.0] {
                        Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                        slot @ None => *slot = Some(contribution),
                    }
                }
            }
            grads[i] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    pub fn reset_grads(&mut self) {
        self.grads = None;
    }

    /// Gradient of the last backward loss with respect to `v`, if reachable.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.as_ref().and_then(|g| g[v.0].as_deref())
    }

    fn vjp(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.as_slice();
        let shape = |v: Var| self.nodes[v.0].shape.as_slice();
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (val(*a), val(*b));
                let mut da = vec![0.0; m * k];
                let mut db = vec![0.0; k * n];
                for r in 0..m {
                    for c in 0..n {
                        let gv = g[r * n + c];
                        if gv == 0.0 {
                            continue;
                        }
                        for t in 0..k {
                            da[r * k + t] += gv * bv[t * n + c];
                            db[t * n + c] += av[r * k + t] * gv;
                        }
                    }
                }
                vec![(*a, da), (*b, db)]
            }
            Op::Softmax { x, cols } => {
                let y = &node.value;
                let mut dx = vec![0.0; y.len()];
                for (row, (ys, gs)) in y.chunks(*cols).zip(g.chunks(*cols)).enumerate() {
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..*cols {
                        dx[row * cols + j] = ys[j] * (gs[j] - dot);
                    }
                }
                vec![(*x, dx)]
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gam = val(*gamma);
                let d = gam.len();
                let mut dx = vec![0.0; xhat.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for (row, rs) in rstd.iter().enumerate() {
                    let base = row * d;
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..d {
                        let gv = g[base + j];
                        dgamma[j] += gv * xhat[base + j];
                        dbeta[j] += gv;
                        let dxh = gv * gam[j];
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xhat[base + j];
                    }
                    let df = d as f64;
                    for j in 0..d {
                        let dxh = g[base + j] * gam[j];
                        dx[base + j] = rs / df * (df * dxh - sum_dxhat - xhat[base + j] * sum_dxhat_xhat);
                    }
                }
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::Relu { x } => {
                let xv = val(*x);
                let dx = xv.iter().zip(g).map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 }).collect();
                vec![(*x, dx)]
            }
            Op::Conv2d { x, kernel, stride, padding } => {
                let (dx, dk) = conv2d_backward(val(*x), shape(*x), val(*kernel), shape(*kernel), &node.shape, *stride, *padding, g);
                vec![(*x, dx), (*kernel, dk)]
            }
            Op::Reshape { x } => vec![(*x, g.to_vec())],
            Op::Permute { x, axes } => {
                let inverse = invert_axes(axes);
                vec![(*x, permute_data(g, &node.shape, &inverse))]
            }
            Op::Concat { inputs, axis } => {
                let outer: usize = node.shape[..*axis].iter().product();
                let inner: usize = node.shape[axis + 1..].iter().product();
                let total = node.shape[*axis] * inner;
                let mut out = Vec::with_capacity(inputs.len());
                let mut start = 0;
                for v in inputs {
                    let width = shape(*v)[*axis] * inner;
                    let mut d = Vec::with_capacity(outer * width);
                    for o in 0..outer {
                        d.extend_from_slice(&g[o * total + start..o * total + start + width]);
                    }
                    start += width;
                    out.push((*v, d));
                }
                out
            }
            Op::Add { a, b } => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub { a, b } => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let da = g.iter().zip(bv).map(|(gv, b)| gv * b).collect();
                let db = g.iter().zip(av).map(|(gv, a)| gv * a).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::Scale { x, factor } => vec![(*x, g.iter().map(|v| v * factor).collect())],
            Op::AddScalar { x } => vec![(*x, g.to_vec())],
            Op::AddRowBias { x, bias } => {
                let d = shape(*bias)[0];
                let mut db = vec![0.0; d];
                for row in g.chunks(d) {
                    db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                vec![(*x, g.to_vec()), (*bias, db)]
            }
            Op::MeanAxis { x, axis } => {
                let xs = shape(*x);
                let outer: usize = xs[..*axis].iter().product();
                let len = xs[*axis];
                let inner: usize = xs[axis + 1..].iter().product();
                let scale = 1.0 / len as f64;
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for a in 0..len {
                        for i in 0..inner {
                            dx[(o * len + a) * inner + i] = g[o * inner + i] * scale;
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::Sum { x } => vec![(*x, vec![g[0]; val(*x).len()])],
            Op::Sqrt { x } => {
                // subgradient 0 at the origin
                let dx = node.value.iter().zip(g).map(|(y, gv)| if *y > 0.0 { gv * 0.5 / y } else { 0.0 }).collect();
                vec![(*x, dx)]
            }
            Op::Ln { x } => {
                let dx = val(*x).iter().zip(g).map(|(v, gv)| gv / v).collect();
                vec![(*x, dx)]
            }
            Op::Custom { inputs, rule } => {
                let ins: Vec<&[f64]> = inputs.iter().map(|v| val(*v)).collect();
                rule.backward(&ins, &node.value, g)
                    .into_iter()
                    .zip(inputs)
                    .filter_map(|(d, v)| d.map(|d| (*v, d)))
                    .collect()
            }
        }
    }
}

pub(crate) fn invert_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Permutes row-major `data` of `shape` so output axis `i` is input axis `axes[i]`.
pub(crate) fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let src: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_forward(
    x: &[f64],
    xs: &[usize],
    k: &[f64],
    ks: &[usize],
    stride: usize,
    padding: usize,
) -> (Vec<usize>, Vec<f64>) {
    let (ci, h, w) = (xs[0], xs[1], xs[2]);
    let (co, kh, kw) = (ks[0], ks[2], ks[3]);
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (w + 2 * padding - kw) / stride + 1;
    let mut out = vec![0.0; co * ho * wo];
    for o in 0..co {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for c in 0..ci {
                    for dy in 0..kh {
                        let iy = (oy * stride + dy) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for dx in 0..kw {
                            let ix = (ox * stride + dx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += k[((o * ci + c) * kh + dy) * kw + dx] * x[(c * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(o * ho + oy) * wo + ox] = acc;
            }
        }
    }
    (vec![co, ho, wo], out)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    x: &[f64],
    xs: &[usize],
    k: &[f64],
    ks: &[usize],
    os: &[usize],
    stride: usize,
    padding: usize,
    g: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (ci, h, w) = (xs[0], xs[1], xs[2]);
    let (co, kh, kw) = (ks[0], ks[2], ks[3]);
    let (ho, wo) = (os[1], os[2]);
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; k.len()];
    for o in 0..co {
        for oy in 0..ho {
            for ox in 0..wo {
                let gv = g[(o * ho + oy) * wo + ox];
                if gv == 0.0 {
                    continue;
                }
                for c in 0..ci {
                    for dy in 0..kh {
                        let iy = (oy * stride + dy) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ddx in 0..kw {
                            let ix = (ox * stride + ddx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let xi = (c * h + iy as usize) * w + ix as usize;
                            let ki = ((o * ci + c) * kh + dy) * kw + ddx;
                            dk[ki] += gv * x[xi];
                            dx[xi] += gv * k[ki];
                        }
                    }
                }
            }
        }
    }
    (dx, dk)
}
