//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Nodes are
//! appended after their parents, so the insertion order is a topological
//! order and [`Graph::backward`] is a single reverse sweep. Gradients are
//! returned in a separate [`Gradients`] table and never stored on the graph,
//! which makes repeated backward calls independent and bit-identical.
//!
//! A graph is single-threaded (`Var` borrows it through a `RefCell`); build
//! one graph per thread to run forwards concurrently.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{AhanError, Result};
use crate::tensor::Tensor;
use crate::trace::AttnSite;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Abs(usize),
    Relu(usize),
    Gelu(usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Softmax(usize, usize),
    MeanAxis(usize, usize),
    SumAll(usize),
    Concat(Vec<usize>, usize),
    GatherRows(usize, Vec<usize>),
    Pick(usize, Vec<usize>),
    LayerNorm(usize, f64),
    L2NormalizeRows(usize),
    ArcMargin(usize, Vec<usize>, f64),
    CrossEntropy(usize, Vec<usize>),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

/// Recording tape for one forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    trace: RefCell<Option<Vec<(AttnSite, usize)>>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Same as [`Graph::new`], with attention-weight tracing switched on.
    pub fn with_trace() -> Self {
        let g = Self::new();
        *g.trace.borrow_mut() = Some(Vec::new());
        g
    }

    /// Adds an input tensor. Gradients are available for every leaf.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_tracing(&self) -> bool {
        self.trace.borrow().is_some()
    }

    /// Records attention weights under `site` when tracing is enabled.
    pub fn record_attention(&self, site: AttnSite, weights: Var<'_>) {
        if let Some(trace) = self.trace.borrow_mut().as_mut() {
            trace.push((site, weights.id));
        }
    }

    /// All traced attention matrices in recording order.
    pub fn attention_trace(&self) -> Vec<(AttnSite, Tensor)> {
        let trace = self.trace.borrow();
        let nodes = self.nodes.borrow();
        trace
            .iter()
            .flatten()
            .map(|(site, id)| (site.clone(), Tensor::clone(&nodes[*id].value)))
            .collect()
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(AhanError::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", root.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::ones(root.value.shape()));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of a scalar with respect to every node it depends on.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when `var` does not influence the loss.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, zeros if it does not influence the loss.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape().as_slice()))
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut grads[id] {
        Some(acc) => acc.add_assign_scaled(&g, 1.0),
        slot @ None => *slot = Some(g),
    }
}

fn backprop_node(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |i: usize| &nodes[i].value;
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, *a, g.clone());
            accumulate(grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, *a, g.clone());
            accumulate(grads, *b, g.map(|x| -x));
        }
        Op::Mul(a, b) => {
            accumulate(grads, *a, zip_map(g, val(*b), |g, y| g * y));
            accumulate(grads, *b, zip_map(g, val(*a), |g, x| g * x));
        }
        Op::Scale(a, c) => accumulate(grads, *a, g.map(|x| c * x)),
        Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
        Op::Abs(a) => accumulate(grads, *a, zip_map(g, val(*a), |g, x| g * sign(x))),
        Op::Relu(a) => accumulate(
            grads,
            *a,
            zip_map(g, val(*a), |g, x| if x > 0.0 { g } else { 0.0 }),
        ),
        Op::Gelu(a) => accumulate(grads, *a, zip_map(g, val(*a), |g, x| g * gelu_grad(x))),
        Op::AddRow(a, b) => {
            accumulate(grads, *a, g.clone());
            accumulate(grads, *b, column_sums(g).reshape(val(*b).shape()).unwrap());
        }
        Op::MulRow(a, b) => {
            let x = val(*a);
            let row = val(*b);
            let n = x.cols();
            let ga: Vec<f64> = g
                .data()
                .iter()
                .enumerate()
                .map(|(i, gv)| gv * row.data()[i % n])
                .collect();
            let gb = column_sums(&zip_map(g, x, |g, x| g * x));
            accumulate(grads, *a, Tensor::new(x.shape().to_vec(), ga).unwrap());
            accumulate(grads, *b, gb.reshape(row.shape()).unwrap());
        }
        Op::MatMul(a, b) => {
            let (x, w) = (val(*a), val(*b));
            accumulate(grads, *a, matmul_nt(g, w));
            accumulate(grads, *b, matmul_tn(x, g));
        }
        Op::Transpose(a) => accumulate(grads, *a, transpose(g)),
        Op::Reshape(a) => accumulate(grads, *a, g.reshape(val(*a).shape()).unwrap()),
        Op::Softmax(a, axis) => {
            let (outer, len, inner) = Tensor::axis_split(out.shape(), *axis);
            let y = out.data();
            let gd = g.data();
            let mut dx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| o * len * inner + k * inner + i;
                    let dot: f64 = (0..len).map(|k| gd[at(k)] * y[at(k)]).sum();
                    for k in 0..len {
                        dx[at(k)] = y[at(k)] * (gd[at(k)] - dot);
                    }
                }
            }
            accumulate(grads, *a, Tensor::new(out.shape().to_vec(), dx).unwrap());
        }
        Op::MeanAxis(a, axis) => {
            let shape = val(*a).shape().to_vec();
            let (outer, len, inner) = Tensor::axis_split(&shape, *axis);
            let gd = g.data();
            let mut dx = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for k in 0..len {
                    for i in 0..inner {
                        dx[o * len * inner + k * inner + i] = gd[o * inner + i] / len as f64;
                    }
                }
            }
            accumulate(grads, *a, Tensor::new(shape, dx).unwrap());
        }
        Op::SumAll(a) => {
            let s = g.data()[0];
            accumulate(grads, *a, Tensor::full(val(*a).shape(), s));
        }
        Op::Concat(parts, axis) => {
            let (outer, _, inner) = Tensor::axis_split(out.shape(), *axis);
            let total = out.shape()[*axis];
            let mut offset = 0;
            for &p in parts {
                let pshape = val(p).shape().to_vec();
                let plen = pshape[*axis];
                let mut dp = Vec::with_capacity(outer * plen * inner);
                for o in 0..outer {
                    let start = o * total * inner + offset * inner;
                    dp.extend_from_slice(&g.data()[start..start + plen * inner]);
                }
                accumulate(grads, p, Tensor::new(pshape, dp).unwrap());
                offset += plen;
            }
        }
        Op::GatherRows(a, idx) => {
            let x = val(*a);
            let c = x.cols();
            let mut dx = Tensor::zeros(x.shape());
            for (r, &src) in idx.iter().enumerate() {
                let d = dx.data_mut();
                for j in 0..c {
                    d[src * c + j] += g.data()[r * c + j];
                }
            }
            accumulate(grads, *a, dx);
        }
        Op::Pick(a, idx) => {
            let mut dx = Tensor::zeros(val(*a).shape());
            for (k, &flat) in idx.iter().enumerate() {
                dx.data_mut()[flat] += g.data()[k];
            }
            accumulate(grads, *a, dx);
        }
        Op::LayerNorm(a, eps) => {
            let x = val(*a);
            let n = x.cols();
            let mut dx = Vec::with_capacity(x.numel());
            for r in 0..x.rows() {
                let row = x.row(r);
                let (mean, inv) = row_moments(row, *eps);
                let gr = &g.data()[r * n..(r + 1) * n];
                let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                let sum_g: f64 = gr.iter().sum();
                let sum_gx: f64 = gr.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    dx.push(inv / n as f64 * (n as f64 * gr[j] - sum_g - xhat[j] * sum_gx));
                }
            }
            accumulate(grads, *a, Tensor::new(x.shape().to_vec(), dx).unwrap());
        }
        Op::L2NormalizeRows(a) => {
            let x = val(*a);
            let n = x.cols();
            let mut dx = Vec::with_capacity(x.numel());
            for r in 0..x.rows() {
                let norm = l2(x.row(r));
                let y = out.row(r);
                let gr = &g.data()[r * n..(r + 1) * n];
                let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    dx.push((gr[j] - y[j] * dot) / norm);
                }
            }
            accumulate(grads, *a, Tensor::new(x.shape().to_vec(), dx).unwrap());
        }
        Op::ArcMargin(a, labels, margin) => {
            let x = val(*a);
            let c = x.cols();
            let mut dx = g.clone();
            for (r, &label) in labels.iter().enumerate() {
                let cos = clamp_cos(x.at(r, label));
                let theta = cos.acos();
                let d = (theta + margin).sin() / theta.sin();
                dx.data_mut()[r * c + label] *= d;
            }
            accumulate(grads, *a, dx);
        }
        Op::CrossEntropy(a, labels) => {
            let x = val(*a);
            let c = x.cols();
            let b = x.rows() as f64;
            let scale = g.data()[0] / b;
            let mut dx = Vec::with_capacity(x.numel());
            for (r, &label) in labels.iter().enumerate() {
                let p = softmax_slice(x.row(r));
                for (j, pj) in p.into_iter().enumerate() {
                    let target = if j == label { 1.0 } else { 0.0 };
                    dx.push(scale * (pj - target));
                }
            }
            let _ = c;
            accumulate(grads, *a, Tensor::new(x.shape().to_vec(), dx).unwrap());
        }
    }
}

// ---------------------------------------------------------------------------
// Differentiable operations
// ---------------------------------------------------------------------------

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    /// Shared handle to the forward value; holding it never blocks the tape.
    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Rows of a matrix-valued node.
    pub fn rows(&self) -> usize {
        self.value().rows()
    }

    /// Columns of a matrix-valued node.
    pub fn cols(&self) -> usize {
        self.value().cols()
    }

    fn same_graph(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "vars belong to different graphs"
        );
    }

    fn unary(&self, op: Op, f: impl FnOnce(&Tensor) -> Tensor) -> Var<'g> {
        let out = f(&self.value());
        self.graph.push(out, op)
    }

    fn binary_same_shape(
        &self,
        other: Var<'g>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'g>> {
        self.same_graph(&other);
        let out = {
            let (a, b) = (self.value(), other.value());
            if a.shape() != b.shape() {
                return Err(AhanError::shape(
                    name,
                    format!("{:?} vs {:?}", a.shape(), b.shape()),
                ));
            }
            zip_map(&a, &b, f)
        };
        Ok(self.graph.push(out, op))
    }

    pub fn add(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary_same_shape(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary_same_shape(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary_same_shape(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Var<'g> {
        self.unary(Op::Scale(self.id, c), |x| x.map(|v| c * v))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'g> {
        self.unary(Op::AddScalar(self.id), |x| x.map(|v| v + c))
    }

    /// Elementwise absolute value; the subgradient at 0 is 0.
    pub fn abs(&self) -> Var<'g> {
        self.unary(Op::Abs(self.id), |x| x.map(f64::abs))
    }

    pub fn relu(&self) -> Var<'g> {
        self.unary(Op::Relu(self.id), |x| x.map(|v| v.max(0.0)))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var<'g> {
        self.unary(Op::Gelu(self.id), |x| x.map(gelu))
    }

    /// `[m×n] + [1×n]`, the row broadcast over every row.
    pub fn add_row(&self, row: Var<'g>) -> Result<Var<'g>> {
        self.row_broadcast(row, "add_row", Op::AddRow(self.id, row.id), |a, b| a + b)
    }

    /// `[m×n] ⊙ [1×n]`, the row broadcast over every row.
    pub fn mul_row(&self, row: Var<'g>) -> Result<Var<'g>> {
        self.row_broadcast(row, "mul_row", Op::MulRow(self.id, row.id), |a, b| a * b)
    }

    fn row_broadcast(
        &self,
        row: Var<'g>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'g>> {
        self.same_graph(&row);
        let out = {
            let (x, r) = (self.value(), row.value());
            if !x.is_matrix() || r.numel() != x.cols() {
                return Err(AhanError::shape(
                    name,
                    format!("{:?} with row {:?}", x.shape(), r.shape()),
                ));
            }
            let n = x.cols();
            let data = x
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| f(v, r.data()[i % n]))
                .collect();
            Tensor::new(x.shape().to_vec(), data)?
        };
        Ok(self.graph.push(out, op))
    }

    pub fn matmul(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&other);
        let out = {
            let (a, b) = (self.value(), other.value());
            if !a.is_matrix() || !b.is_matrix() || a.cols() != b.rows() {
                return Err(AhanError::shape(
                    "matmul",
                    format!("cannot multiply {:?} by {:?}", a.shape(), b.shape()),
                ));
            }
            matmul(&a, &b)
        };
        Ok(self.graph.push(out, Op::MatMul(self.id, other.id)))
    }

    pub fn transpose(&self) -> Result<Var<'g>> {
        if !self.value().is_matrix() {
            return Err(AhanError::shape(
                "transpose",
                format!("expected a matrix, got {:?}", self.shape()),
            ));
        }
        Ok(self.unary(Op::Transpose(self.id), transpose))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let out = self.value().reshape(shape)?;
        Ok(self.graph.push(out, Op::Reshape(self.id)))
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&self, axis: usize) -> Result<Var<'g>> {
        let out = {
            let x = self.value();
            x.check_axis("softmax", axis)?;
            let (outer, len, inner) = Tensor::axis_split(x.shape(), axis);
            let d = x.data();
            let mut y = vec![0.0; d.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| o * len * inner + k * inner + i;
                    let max = (0..len).map(|k| d[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for k in 0..len {
                        let e = (d[at(k)] - max).exp();
                        y[at(k)] = e;
                        total += e;
                    }
                    for k in 0..len {
                        y[at(k)] /= total;
                    }
                }
            }
            Tensor::new(x.shape().to_vec(), y)?
        };
        Ok(self.graph.push(out, Op::Softmax(self.id, axis)))
    }

    /// Arithmetic mean along `axis`; the axis is kept with length 1.
    pub fn mean_pool(&self, axis: usize) -> Result<Var<'g>> {
        let out = {
            let x = self.value();
            x.check_axis("mean_pool", axis)?;
            let (outer, len, inner) = Tensor::axis_split(x.shape(), axis);
            let d = x.data();
            let mut y = vec![0.0; outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let s: f64 = (0..len).map(|k| d[o * len * inner + k * inner + i]).sum();
                    y[o * inner + i] = s / len as f64;
                }
            }
            let mut shape = x.shape().to_vec();
            shape[axis] = 1;
            Tensor::new(shape, y)?
        };
        Ok(self.graph.push(out, Op::MeanAxis(self.id, axis)))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&self) -> Var<'g> {
        self.unary(Op::SumAll(self.id), |x| Tensor::scalar(x.data().iter().sum()))
    }

    /// Mean of all elements, as a one-element tensor.
    pub fn mean(&self) -> Var<'g> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Rows `indices` of a matrix, in the given order; repeats allowed.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Var<'g>> {
        let out = {
            let x = self.value();
            if !x.is_matrix() || indices.is_empty() {
                return Err(AhanError::shape(
                    "gather_rows",
                    format!("{:?} with {} indices", x.shape(), indices.len()),
                ));
            }
            if let Some(&bad) = indices.iter().find(|&&i| i >= x.rows()) {
                return Err(AhanError::invalid(
                    "gather_rows",
                    format!("row {bad} out of range for {} rows", x.rows()),
                ));
            }
            let mut data = Vec::with_capacity(indices.len() * x.cols());
            for &i in indices {
                data.extend_from_slice(x.row(i));
            }
            Tensor::new(vec![indices.len(), x.cols()], data)?
        };
        Ok(self
            .graph
            .push(out, Op::GatherRows(self.id, indices.to_vec())))
    }

    /// Elements at flat row-major positions, as a 1-D tensor.
    pub fn pick(&self, flat: &[usize]) -> Result<Var<'g>> {
        let out = {
            let x = self.value();
            if flat.is_empty() {
                return Err(AhanError::invalid("pick", "no indices"));
            }
            if let Some(&bad) = flat.iter().find(|&&i| i >= x.numel()) {
                return Err(AhanError::invalid(
                    "pick",
                    format!("index {bad} out of range for {} elements", x.numel()),
                ));
            }
            Tensor::new(vec![flat.len()], flat.iter().map(|&i| x.data()[i]).collect())?
        };
        Ok(self.graph.push(out, Op::Pick(self.id, flat.to_vec())))
    }

    /// Per-row normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&self, eps: f64) -> Result<Var<'g>> {
        let out = {
            let x = self.value();
            if !x.is_matrix() {
                return Err(AhanError::shape(
                    "layer_norm",
                    format!("expected a matrix, got {:?}", x.shape()),
                ));
            }
            let mut y = Vec::with_capacity(x.numel());
            for r in 0..x.rows() {
                let (mean, inv) = row_moments(x.row(r), eps);
                y.extend(x.row(r).iter().map(|v| (v - mean) * inv));
            }
            Tensor::new(x.shape().to_vec(), y)?
        };
        Ok(self.graph.push(out, Op::LayerNorm(self.id, eps)))
    }

    /// Scales each row to unit L2 norm. Zero rows are an error.
    pub fn l2_normalize_rows(&self) -> Result<Var<'g>> {
        let out = {
            let x = self.value();
            if !x.is_matrix() {
                return Err(AhanError::shape(
                    "l2_normalize_rows",
                    format!("expected a matrix, got {:?}", x.shape()),
                ));
            }
            let mut y = Vec::with_capacity(x.numel());
            for r in 0..x.rows() {
                let norm = l2(x.row(r));
                if norm == 0.0 || !norm.is_finite() {
                    return Err(AhanError::invalid(
                        "l2_normalize_rows",
                        format!("row {r} has norm {norm}"),
                    ));
                }
                y.extend(x.row(r).iter().map(|v| v / norm));
            }
            Tensor::new(x.shape().to_vec(), y)?
        };
        Ok(self.graph.push(out, Op::L2NormalizeRows(self.id)))
    }

    /// Replaces the target-class cosine `cos θ` of each row with
    /// `cos(θ + margin)`; other entries pass through.
    pub fn arc_margin(&self, labels: &[usize], margin: f64) -> Result<Var<'g>> {
        let out = {
            let x = self.value();
            check_labels("arc_margin", &x, labels)?;
            let mut y = Tensor::clone(&x);
            let c = x.cols();
            for (r, &label) in labels.iter().enumerate() {
                let theta = clamp_cos(x.at(r, label)).acos();
                y.data_mut()[r * c + label] = (theta + margin).cos();
            }
            y
        };
        Ok(self
            .graph
            .push(out, Op::ArcMargin(self.id, labels.to_vec(), margin)))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'g>> {
        let out = {
            let x = self.value();
            check_labels("cross_entropy", &x, labels)?;
            let total: f64 = labels
                .iter()
                .enumerate()
                .map(|(r, &label)| {
                    let row = x.row(r);
                    log_sum_exp(row) - row[label]
                })
                .sum();
            Tensor::scalar(total / labels.len() as f64)
        };
        Ok(self
            .graph
            .push(out, Op::CrossEntropy(self.id, labels.to_vec())))
    }
}

/// Joins `parts` along `axis`; all other dimensions must agree.
pub fn concat<'g>(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
    let first = parts
        .first()
        .ok_or_else(|| AhanError::invalid("concat", "no parts"))?;
    let graph = first.graph;
    let out = {
        let values: Vec<Rc<Tensor>> = parts
            .iter()
            .map(|p| {
                first.same_graph(p);
                p.value()
            })
            .collect();
        values[0].check_axis("concat", axis)?;
        let base = values[0].shape().to_vec();
        for v in &values[1..] {
            let s = v.shape();
            let agrees = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(k, (a, b))| k == axis || a == b);
            if !agrees {
                return Err(AhanError::shape(
                    "concat",
                    format!("{:?} vs {:?} along axis {axis}", base, s),
                ));
            }
        }
        let (outer, _, inner) = Tensor::axis_split(&base, axis);
        let total: usize = values.iter().map(|v| v.shape()[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let len = v.shape()[axis];
                let start = o * len * inner;
                data.extend_from_slice(&v.data()[start..start + len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Tensor::new(shape, data)?
    };
    let ids = parts.iter().map(|p| p.id).collect();
    Ok(graph.push(out, Op::Concat(ids, axis)))
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes checked by caller")
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn column_sums(g: &Tensor) -> Tensor {
    let n = g.cols();
    let mut s = vec![0.0; n];
    for (i, v) in g.data().iter().enumerate() {
        s[i % n] += v;
    }
    Tensor::new(vec![1, n], s).unwrap()
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

/// `a · bᵀ`
fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            out[i * n + j] = arow.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    let _ = k;
    Tensor::new(vec![m, n], out).unwrap()
}

/// `aᵀ · b`
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, m, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = a.row(p);
        let brow = b.row(p);
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, bv) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

pub(crate) fn transpose(x: &Tensor) -> Tensor {
    let (m, n) = (x.rows(), x.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x.data()[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out).unwrap()
}

fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn l2(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

const COS_CLAMP: f64 = 1e-7;

fn clamp_cos(c: f64) -> f64 {
    c.clamp(-1.0 + COS_CLAMP, 1.0 - COS_CLAMP)
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn softmax_slice(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|v| (v - lse).exp()).collect()
}

fn check_labels(op: &'static str, x: &Tensor, labels: &[usize]) -> Result<()> {
    if !x.is_matrix() || x.rows() != labels.len() {
        return Err(AhanError::shape(
            op,
            format!("{:?} with {} labels", x.shape(), labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= x.cols()) {
        return Err(AhanError::invalid(
            op,
            format!("label {bad} out of range for {} classes", x.cols()),
        ));
    }
    Ok(())
}
