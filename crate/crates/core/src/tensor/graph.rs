use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::{broadcast_shapes, Result, Tensor, TensorError, STABILITY_EPS};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Powf(usize, f64),
    LeakyRelu(usize, f64),
    MatMul(usize, usize),
    Sum { a: usize, axes: Vec<usize> },
    Mean { a: usize, axes: Vec<usize> },
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Concat { parts: Vec<usize>, axis: usize },
    SelectRows(usize, Rc<Vec<usize>>),
    Conv3d { x: usize, w: usize, geom: ConvGeom },
    ConvTranspose3d { x: usize, w: usize, geom: ConvGeom },
    InstanceNorm { x: usize, inv_std: Rc<Vec<f64>> },
    LogSoftmax(usize, usize),
    MaskedLogSumExp { a: usize, mask: Rc<Vec<bool>> },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Operation graph for one forward/backward pass.
///
/// Nodes are appended in evaluation order, which is already a topological
/// order; a fresh graph is built for every step.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Accumulated gradients of the gradient-tracked leaves.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<usize, Tensor>,
    shapes: HashMap<usize, Vec<usize>>,
    visited: usize,
}

impl Gradients {
    /// Gradient of a leaf. Leaves the loss does not depend on get zeros.
    pub fn get(&self, v: Var<'_>) -> Tensor {
        match self.grads.get(&v.id) {
            Some(t) => t.clone(),
            None => Tensor::zeros(self.shapes.get(&v.id).map_or(&v.shape()[..], |s| s)),
        }
    }

    /// Number of graph nodes the backward pass propagated through.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Gradient-tracked leaf.
    pub fn param(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&self, t: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(t, Op::Leaf, requires_grad)
    }

    fn push(&self, t: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(t),
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse-mode pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let shape = loss.shape();
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::full(&shape, 1.0));
        let mut out = Gradients::default();
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            out.visited += 1;
            if let Op::Leaf = node.op {
                out.shapes.insert(id, node.value.shape().to_vec());
                out.grads.insert(id, g);
                continue;
            }
            for (pid, pg) in local_grads(&nodes, id, &g) {
                if !nodes[pid].requires_grad {
                    continue;
                }
                match &mut grads[pid] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(out)
    }
}

fn unary(a: &Tensor, g: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(g.data()).map(|(&x, &gv)| f(x, gv)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

/// Vector-Jacobian products of node `id` for each of its parents.
fn local_grads(nodes: &[Node], id: usize, g: &Tensor) -> Vec<(usize, Tensor)> {
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    let out = val(id);
    match &nodes[id].op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![
            (*a, kernels::reduce_to_shape(g, val(*a).shape())),
            (*b, kernels::reduce_to_shape(g, val(*b).shape())),
        ],
        Op::Sub(a, b) => {
            let gb = kernels::reduce_to_shape(g, val(*b).shape()).map(|v| -v);
            vec![(*a, kernels::reduce_to_shape(g, val(*a).shape())), (*b, gb)]
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let ga = kernels::broadcast_binary(g, bv, g.shape(), |x, y| x * y);
            let gb = kernels::broadcast_binary(g, av, g.shape(), |x, y| x * y);
            vec![
                (*a, kernels::reduce_to_shape(&ga, av.shape())),
                (*b, kernels::reduce_to_shape(&gb, bv.shape())),
            ]
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let ga = kernels::broadcast_binary(g, bv, g.shape(), |x, y| x / y);
            // d(a/b)/db = -out / b
            let q = kernels::broadcast_binary(out, bv, g.shape(), |o, y| -o / y);
            let gb = kernels::broadcast_binary(g, &q, g.shape(), |x, y| x * y);
            vec![
                (*a, kernels::reduce_to_shape(&ga, av.shape())),
                (*b, kernels::reduce_to_shape(&gb, bv.shape())),
            ]
        }
        Op::Neg(a) => vec![(*a, g.map(|v| -v))],
        Op::AddScalar(a) => vec![(*a, g.clone())],
        Op::MulScalar(a, s) => vec![(*a, g.map(|v| v * s))],
        Op::Exp(a) => vec![(*a, unary(out, g, |y, gv| y * gv))],
        Op::Log(a) => vec![(*a, unary(val(*a), g, |x, gv| gv / x))],
        Op::Sqrt(a) => vec![(*a, unary(out, g, |y, gv| if y == 0.0 { 0.0 } else { gv / (2.0 * y) }))],
        Op::Powf(a, p) => vec![(*a, unary(val(*a), g, |x, gv| gv * p * x.powf(p - 1.0)))],
        Op::LeakyRelu(a, s) => vec![(*a, unary(val(*a), g, |x, gv| if x > 0.0 { gv } else { gv * s }))],
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            vec![
                (*a, kernels::matmul(g, &kernels::transpose2(bv))),
                (*b, kernels::matmul(&kernels::transpose2(av), g)),
            ]
        }
        Op::Sum { a, axes } => {
            let shape = val(*a).shape();
            let keep: Vec<usize> = shape
                .iter()
                .enumerate()
                .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
                .collect();
            let gk = g.reshape(&keep).expect("sum grad reshape");
            let ones = Tensor::ones(shape);
            vec![(*a, kernels::broadcast_binary(&ones, &gk, shape, |_, y| y))]
        }
        Op::Mean { a, axes } => {
            let shape = val(*a).shape();
            let n = (val(*a).numel() / g.numel()) as f64;
            let keep: Vec<usize> = shape
                .iter()
                .enumerate()
                .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
                .collect();
            let gk = g.reshape(&keep).expect("mean grad reshape");
            let ones = Tensor::ones(shape);
            vec![(*a, kernels::broadcast_binary(&ones, &gk, shape, |_, y| y / n))]
        }
        Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape()).expect("reshape grad"))],
        Op::Permute(a, perm) => vec![(*a, kernels::permute(g, &kernels::inverse_permutation(perm)))],
        Op::Concat { parts, axis } => {
            let shape = g.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis];
            let mut start = 0;
            parts
                .iter()
                .map(|&p| {
                    let ps = val(p).shape();
                    let len = ps[*axis];
                    let mut d = Vec::with_capacity(val(p).numel());
                    for o in 0..outer {
                        let base = (o * total + start) * inner;
                        d.extend_from_slice(&g.data()[base..base + len * inner]);
                    }
                    start += len;
                    (p, Tensor::from_parts(ps.to_vec(), d))
                })
                .collect()
        }
        Op::SelectRows(a, rows) => {
            let shape = val(*a).shape();
            let width: usize = shape[1..].iter().product();
            let mut d = vec![0.0; val(*a).numel()];
            for (k, &r) in rows.iter().enumerate() {
                for j in 0..width {
                    d[r * width + j] += g.data()[k * width + j];
                }
            }
            vec![(*a, Tensor::from_parts(shape.to_vec(), d))]
        }
        Op::Conv3d { x, w, geom } => {
            let (gx, gw) = kernels::conv3d_backward(val(*x).data(), val(*w).data(), g.data(), geom);
            vec![
                (*x, Tensor::from_parts(val(*x).shape().to_vec(), gx)),
                (*w, Tensor::from_parts(val(*w).shape().to_vec(), gw)),
            ]
        }
        Op::ConvTranspose3d { x, w, geom } => {
            let (gx, gw) = kernels::conv_transpose3d_backward(val(*x).data(), val(*w).data(), g.data(), geom);
            vec![
                (*x, Tensor::from_parts(val(*x).shape().to_vec(), gx)),
                (*w, Tensor::from_parts(val(*w).shape().to_vec(), gw)),
            ]
        }
        Op::InstanceNorm { x, inv_std } => {
            let gx = kernels::instance_norm_backward(out.data(), inv_std, g.data());
            vec![(*x, Tensor::from_parts(out.shape().to_vec(), gx))]
        }
        Op::LogSoftmax(a, axis) => vec![(*a, kernels::log_softmax_backward(out, g, *axis))],
        Op::MaskedLogSumExp { a, mask } => {
            let av = val(*a);
            let lse = out.item();
            let gv = g.item();
            let d = av
                .data()
                .iter()
                .zip(mask.iter())
                .map(|(&x, &m)| if m { gv * (x - lse).exp() } else { 0.0 })
                .collect();
            vec![(*a, Tensor::from_parts(av.shape().to_vec(), d))]
        }
    }
}

impl<'g> Var<'g> {
    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.rg(self.id)
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    fn emit(&self, t: Tensor, op: Op, parents: &[usize]) -> Var<'g> {
        let rg = parents.iter().any(|&p| self.graph.rg(p));
        self.graph.push(t, op, rg)
    }

    fn binary(
        &self,
        other: Var<'g>,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        mk: impl Fn(usize, usize) -> Op,
    ) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shapes(a.shape(), b.shape()).ok_or_else(|| TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })?;
        let t = kernels::broadcast_binary(&a, &b, &shape, f);
        Ok(self.emit(t, mk(self.id, other.id), &[self.id, other.id]))
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul)
    }

    /// Elementwise division. The caller keeps divisors away from zero.
    pub fn div(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "div", |x, y| x / y, Op::Div)
    }

    pub fn neg(self) -> Var<'g> {
        let t = self.value().map(|v| -v);
        self.emit(t, Op::Neg(self.id), &[self.id])
    }

    pub fn add_scalar(self, s: f64) -> Var<'g> {
        let t = self.value().map(|v| v + s);
        self.emit(t, Op::AddScalar(self.id), &[self.id])
    }

    pub fn mul_scalar(self, s: f64) -> Var<'g> {
        let t = self.value().map(|v| v * s);
        self.emit(t, Op::MulScalar(self.id, s), &[self.id])
    }

    pub fn square(self) -> Var<'g> {
        self.mul(self).expect("same-shape product")
    }

    pub fn exp(self) -> Var<'g> {
        let t = self.value().map(f64::exp);
        self.emit(t, Op::Exp(self.id), &[self.id])
    }

    /// Natural log; errors on non-positive arguments.
    pub fn log(self) -> Result<Var<'g>> {
        let v = self.value();
        if let Some(&bad) = v.data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(TensorError::Domain { op: "log", value: bad });
        }
        let t = v.map(f64::ln);
        Ok(self.emit(t, Op::Log(self.id), &[self.id]))
    }

    /// Square root; errors on negative arguments. The gradient at exactly
    /// zero is taken as zero.
    pub fn sqrt(self) -> Result<Var<'g>> {
        let v = self.value();
        if let Some(&bad) = v.data().iter().find(|&&x| x < 0.0 || x.is_nan()) {
            return Err(TensorError::Domain { op: "sqrt", value: bad });
        }
        let t = v.map(f64::sqrt);
        Ok(self.emit(t, Op::Sqrt(self.id), &[self.id]))
    }

    /// `x^p`; non-integer exponents require non-negative bases.
    pub fn powf(self, p: f64) -> Result<Var<'g>> {
        let v = self.value();
        if p.fract() != 0.0 {
            if let Some(&bad) = v.data().iter().find(|&&x| x < 0.0) {
                return Err(TensorError::Domain { op: "powf", value: bad });
            }
        }
        let t = v.map(|x| x.powf(p));
        Ok(self.emit(t, Op::Powf(self.id, p), &[self.id]))
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'g> {
        let t = self.value().map(|x| if x > 0.0 { x } else { slope * x });
        self.emit(t, Op::LeakyRelu(self.id, slope), &[self.id])
    }

    /// 2-D matrix product.
    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let t = kernels::matmul(&a, &b);
        Ok(self.emit(t, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    /// Sum over `axes`. Reduced axes are dropped unless `keepdim`.
    pub fn sum_axes(self, axes: &[usize], keepdim: bool) -> Result<Var<'g>> {
        self.reduce(axes, keepdim, false)
    }

    /// Mean over `axes`; exact for constant inputs.
    pub fn mean_axes(self, axes: &[usize], keepdim: bool) -> Result<Var<'g>> {
        self.reduce(axes, keepdim, true)
    }

    fn reduce(self, axes: &[usize], keepdim: bool, mean: bool) -> Result<Var<'g>> {
        let v = self.value();
        if let Some(&bad) = axes.iter().find(|&&a| a >= v.ndim()) {
            return Err(TensorError::Invalid {
                op: if mean { "mean" } else { "sum" },
                msg: format!("axis {bad} out of range for shape {:?}", v.shape()),
            });
        }
        let kept = if mean {
            kernels::mean_keepdim(&v, axes)
        } else {
            kernels::sum_keepdim(&v, axes)
        };
        let t = if keepdim {
            kept
        } else {
            let shape: Vec<usize> = v
                .shape()
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect();
            Tensor::from_parts(shape, kept.into_data())
        };
        let (a, axes) = (self.id, axes.to_vec());
        let op = if mean { Op::Mean { a, axes } } else { Op::Sum { a, axes } };
        Ok(self.emit(t, op, &[self.id]))
    }

    pub fn sum(self) -> Var<'g> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.sum_axes(&axes, false).expect("all axes valid")
    }

    pub fn mean(self) -> Var<'g> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.mean_axes(&axes, false).expect("all axes valid")
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let t = self.value().reshape(shape)?;
        Ok(self.emit(t, Op::Reshape(self.id), &[self.id]))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'g>> {
        let v = self.value();
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..v.ndim()).collect::<Vec<_>>() {
            return Err(TensorError::Invalid {
                op: "permute",
                msg: format!("{perm:?} is not a permutation of the axes of {:?}", v.shape()),
            });
        }
        let t = kernels::permute(&v, perm);
        Ok(self.emit(t, Op::Permute(self.id, perm.to_vec()), &[self.id]))
    }

    /// Transpose of a 2-D tensor.
    pub fn t(self) -> Result<Var<'g>> {
        self.permute(&[1, 0])
    }

    pub fn concat(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let base = first.shape();
        let mut total = 0;
        for p in parts {
            let s = p.shape();
            let ok = s.len() == base.len()
                && axis < s.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s,
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in &vals {
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(first.emit(
            Tensor::from_parts(shape, data),
            Op::Concat {
                parts: ids.clone(),
                axis,
            },
            &ids,
        ))
    }

    /// Gathers rows (indices along axis 0).
    pub fn select_rows(self, rows: &[usize]) -> Result<Var<'g>> {
        let v = self.value();
        let n = v.shape().first().copied().unwrap_or(0);
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(TensorError::Invalid {
                op: "select_rows",
                msg: format!("row {bad} out of range for shape {:?}", v.shape()),
            });
        }
        let width: usize = v.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            data.extend_from_slice(&v.data()[r * width..(r + 1) * width]);
        }
        let mut shape = v.shape().to_vec();
        shape[0] = rows.len();
        if rows.is_empty() {
            return Err(TensorError::Invalid {
                op: "select_rows",
                msg: "empty row selection".into(),
            });
        }
        Ok(self.emit(
            Tensor::from_parts(shape, data),
            Op::SelectRows(self.id, Rc::new(rows.to_vec())),
            &[self.id],
        ))
    }

    /// Euclidean norm along `axis` (kept as extent 1).
    pub fn l2_norm(self, axis: usize) -> Result<Var<'g>> {
        self.square().sum_axes(&[axis], true)?.sqrt()
    }

    /// Cosine similarity along `axis`, `a·b / (‖a‖‖b‖ + δ)`.
    pub fn cosine_similarity(self, other: Var<'g>, axis: usize) -> Result<Var<'g>> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "cosine_similarity",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let dot = self.mul(other)?.sum_axes(&[axis], true)?;
        let den = self.l2_norm(axis)?.mul(other.l2_norm(axis)?)?.add_scalar(STABILITY_EPS);
        dot.div(den)
    }

    /// 3-D convolution of `[B, C, X, Y, Z]` by `[Co, C, k, k, k]`.
    ///
    /// Stride 1 pads by `(k-1)/2` ("same"); stride 2 uses no padding.
    pub fn conv3d(self, kernel: Var<'g>, stride: usize) -> Result<Var<'g>> {
        let k = kernel.shape().get(2).copied().unwrap_or(1);
        let pad = if stride == 1 { (k - 1) / 2 } else { 0 };
        self.conv3d_padded(kernel, stride, pad)
    }

    pub fn conv3d_padded(self, kernel: Var<'g>, stride: usize, pad: usize) -> Result<Var<'g>> {
        let (x, w) = (self.value(), kernel.value());
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 5 || ws.len() != 5 || ws[2] != ws[3] || ws[3] != ws[4] {
            return Err(TensorError::ShapeMismatch {
                op: "conv3d",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        if xs[1] != ws[1] {
            return Err(TensorError::ChannelMismatch {
                input: xs[1],
                kernel: ws[1],
            });
        }
        let k = ws[2];
        if k % 2 == 0 || !(1..=2).contains(&stride) {
            return Err(TensorError::Invalid {
                op: "conv3d",
                msg: format!("kernel extent {k} must be odd and stride {stride} in {{1, 2}}"),
            });
        }
        let mut out = [0; 3];
        for i in 0..3 {
            let ext = xs[2 + i] + 2 * pad;
            if ext < k {
                return Err(TensorError::Invalid {
                    op: "conv3d",
                    msg: format!("spatial extent {:?} smaller than kernel {k}", &xs[2..]),
                });
            }
            out[i] = (ext - k) / stride + 1;
        }
        let geom = ConvGeom {
            batch: xs[0],
            cin: xs[1],
            cout: ws[0],
            k,
            stride,
            pad,
            inp: [xs[2], xs[3], xs[4]],
            out,
        };
        let data = kernels::conv3d_forward(x.data(), w.data(), &geom);
        let t = Tensor::from_parts(vec![geom.batch, geom.cout, out[0], out[1], out[2]], data);
        Ok(self.emit(
            t,
            Op::Conv3d {
                x: self.id,
                w: kernel.id,
                geom,
            },
            &[self.id, kernel.id],
        ))
    }

    /// Transposed convolution with kernel `[C, Co, k, k, k]` and stride `k`;
    /// each spatial extent is multiplied by `k`.
    pub fn conv_transpose3d(self, kernel: Var<'g>) -> Result<Var<'g>> {
        let (x, w) = (self.value(), kernel.value());
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 5 || ws.len() != 5 || ws[2] != ws[3] || ws[3] != ws[4] {
            return Err(TensorError::ShapeMismatch {
                op: "conv_transpose3d",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        if xs[1] != ws[0] {
            return Err(TensorError::ChannelMismatch {
                input: xs[1],
                kernel: ws[0],
            });
        }
        let k = ws[2];
        let geom = ConvGeom {
            batch: xs[0],
            cin: xs[1],
            cout: ws[1],
            k,
            stride: k,
            pad: 0,
            inp: [xs[2], xs[3], xs[4]],
            out: [xs[2] * k, xs[3] * k, xs[4] * k],
        };
        let data = kernels::conv_transpose3d_forward(x.data(), w.data(), &geom);
        let o = geom.out;
        let t = Tensor::from_parts(vec![geom.batch, geom.cout, o[0], o[1], o[2]], data);
        Ok(self.emit(
            t,
            Op::ConvTranspose3d {
                x: self.id,
                w: kernel.id,
                geom,
            },
            &[self.id, kernel.id],
        ))
    }

    /// Normalizes each `(item, channel)` slice of a `[B, C, ...]` tensor to
    /// zero mean and unit variance.
    pub fn instance_norm(self, eps: f64) -> Result<Var<'g>> {
        let v = self.value();
        if v.ndim() < 3 {
            return Err(TensorError::Invalid {
                op: "instance_norm",
                msg: format!("expected [B, C, ...], got {:?}", v.shape()),
            });
        }
        let groups = v.shape()[0] * v.shape()[1];
        let (data, inv_std) = kernels::instance_norm_forward(v.data(), groups, eps);
        Ok(self.emit(
            Tensor::from_parts(v.shape().to_vec(), data),
            Op::InstanceNorm {
                x: self.id,
                inv_std: Rc::new(inv_std),
            },
            &[self.id],
        ))
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'g>> {
        let v = self.value();
        if axis >= v.ndim() {
            return Err(TensorError::Invalid {
                op: "log_softmax",
                msg: format!("axis {axis} out of range for {:?}", v.shape()),
            });
        }
        let t = kernels::log_softmax(&v, axis);
        Ok(self.emit(t, Op::LogSoftmax(self.id, axis), &[self.id]))
    }

    /// `log Σ exp(x)` over the elements where `mask` is set, computed with
    /// max-subtraction. Errors when the mask selects nothing.
    pub fn masked_logsumexp(self, mask: &[bool]) -> Result<Var<'g>> {
        let v = self.value();
        if mask.len() != v.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "masked_logsumexp",
                lhs: v.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let mx = v
            .data()
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&x, _)| x)
            .fold(f64::NEG_INFINITY, f64::max);
        if mx == f64::NEG_INFINITY {
            return Err(TensorError::Invalid {
                op: "masked_logsumexp",
                msg: "mask selects no element".into(),
            });
        }
        let s: f64 = v
            .data()
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&x, _)| (x - mx).exp())
            .sum();
        Ok(self.emit(
            Tensor::scalar(mx + s.ln()),
            Op::MaskedLogSumExp {
                a: self.id,
                mask: Rc::new(mask.to_vec()),
            },
            &[self.id],
        ))
    }
}
