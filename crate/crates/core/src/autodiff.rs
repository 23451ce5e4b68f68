//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The graph supports exactly the node kinds the conditioned network needs:
//! leaves (inputs and parameters), affine maps, element-wise sigmoid,
//! element-wise addition, batched contraction over the last two axes and a
//! plan-weighted squared-distance reduction. Nodes are appended in evaluation
//! order, so a graph is acyclic by construction.
//!
//! ```
//! use deepparticle::autodiff::{Bindings, Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.input("x");
//! let w = g.parameter("w");
//! let y = g.affine(w, x, None);
//! g.set_output(y);
//!
//! let mut b = Bindings::new();
//! b.insert("x", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
//! b.insert("w", Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap());
//! assert_eq!(g.forward(&b).unwrap().data(), &[11.0]);
//!
//! let grads = g.backward(&Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
//! assert_eq!(grads["w"].data(), &[1.0, 2.0]);
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("tensor shape {shape:?} holds {expected} values but {actual} were given")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("tensor contains a non-finite value at flat index {index}")]
    NonFiniteValue { index: usize },
    #[error("shape mismatch at node `{node}`: {detail}")]
    Shape { node: String, detail: String },
    #[error("node `{node}` produced a non-finite value")]
    NonFinite { node: String },
    #[error("no tensor bound for leaf `{0}`")]
    Unbound(String),
    #[error("backward called before forward")]
    BackwardBeforeForward,
    #[error("graph has no nodes")]
    EmptyGraph,
}

/// Dense row-major tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, AutodiffError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(AutodiffError::LengthMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    /// Like [`Tensor::new`] but also rejects NaN and infinities.
    pub fn checked(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, AutodiffError> {
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(AutodiffError::NonFiniteValue { index });
        }
        Self::new(shape, data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sum of element-wise products with another tensor of the same length.
    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    fn same_shape_zeros(&self) -> Tensor {
        Tensor::zeros(self.shape.clone())
    }
}

/// Leaf bindings keyed by input or parameter name.
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    map: HashMap<String, Tensor>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.map.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
pub enum Op {
    Input(String),
    Parameter(String),
    /// `weight (m×n) · input (…×n) + bias (m)`; trailing unit axes of the
    /// weight and bias are ignored.
    Affine {
        weight: NodeId,
        input: NodeId,
        bias: Option<NodeId>,
    },
    Sigmoid(NodeId),
    Add(NodeId, NodeId),
    /// Matrix product over the last two axes, broadcasting leading axes.
    BatchedContract(NodeId, NodeId),
    /// `Σ_ij weights_ij · |points_i − targets_j|²`, a scalar.
    WeightedSqDist {
        points: NodeId,
        targets: NodeId,
        weights: NodeId,
    },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Parameter(_) => "parameter",
            Op::Affine { .. } => "affine",
            Op::Sigmoid(_) => "sigmoid",
            Op::Add(..) => "add",
            Op::BatchedContract(..) => "batched-contract",
            Op::WeightedSqDist { .. } => "weighted-sqdist",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    label: String,
    needs_grad: bool,
    value: Option<Tensor>,
    adjoint: Option<Tensor>,
}

/// A computation graph. Build it once, then run `forward`/`backward` any
/// number of times with different bindings.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    output: Option<NodeId>,
    checked: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Enables the per-node finiteness assertion.
    pub fn set_checked(&mut self, checked: bool) {
        self.checked = checked;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        let needs_grad = match &op {
            Op::Input(_) => false,
            Op::Parameter(_) => true,
            Op::Affine { weight, input, bias } => {
                self.needs(*weight) || self.needs(*input) || bias.is_some_and(|b| self.needs(b))
            }
            Op::Sigmoid(a) => self.needs(*a),
            Op::Add(a, b) | Op::BatchedContract(a, b) => self.needs(*a) || self.needs(*b),
            Op::WeightedSqDist {
                points,
                targets,
                weights,
            } => self.needs(*points) || self.needs(*targets) || self.needs(*weights),
        };
        let label = match &op {
            Op::Input(name) | Op::Parameter(name) => name.clone(),
            other => format!("{}#{}", other.kind(), id.0),
        };
        self.nodes.push(Node {
            op,
            label,
            needs_grad,
            value: None,
            adjoint: None,
        });
        self.output = Some(id);
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn input(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Input(name.into()))
    }

    pub fn parameter(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Parameter(name.into()))
    }

    pub fn affine(&mut self, weight: NodeId, input: NodeId, bias: Option<NodeId>) -> NodeId {
        self.push(Op::Affine {
            weight,
            input,
            bias,
        })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sigmoid(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn batched_contract(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::BatchedContract(a, b))
    }

    pub fn weighted_sqdist(&mut self, points: NodeId, targets: NodeId, weights: NodeId) -> NodeId {
        self.push(Op::WeightedSqDist {
            points,
            targets,
            weights,
        })
    }

    /// Renames a node; the label shows up in shape and finiteness errors.
    pub fn label(&mut self, id: NodeId, label: impl Into<String>) {
        self.nodes[id.0].label = label.into();
    }

    pub fn set_output(&mut self, id: NodeId) {
        self.output = Some(id);
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].value.as_ref()
    }

    pub fn adjoint(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].adjoint.as_ref()
    }

    /// Names of all parameter leaves, in insertion order.
    pub fn parameter_names(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Parameter(name) => Some(name.as_str()),
                _ => None,
            })
            .collect()
    }

    /// Evaluates every node and returns the output value.
    pub fn forward(&mut self, bindings: &Bindings) -> Result<&Tensor, AutodiffError> {
        let out = self.output.ok_or(AutodiffError::EmptyGraph)?;
        for idx in 0..self.nodes.len() {
            self.nodes[idx].adjoint = None;
            let value = self.eval_node(idx, bindings)?;
            if self.checked && !value.is_finite() {
                return Err(AutodiffError::NonFinite {
                    node: self.nodes[idx].label.clone(),
                });
            }
            self.nodes[idx].value = Some(value);
        }
        Ok(self.nodes[out.0].value.as_ref().expect("evaluated"))
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.nodes[id.0]
            .value
            .as_ref()
            .expect("parents are evaluated before children")
    }

    fn shape_err(&self, idx: usize, detail: String) -> AutodiffError {
        AutodiffError::Shape {
            node: self.nodes[idx].label.clone(),
            detail,
        }
    }

    fn eval_node(&self, idx: usize, bindings: &Bindings) -> Result<Tensor, AutodiffError> {
        match &self.nodes[idx].op {
            Op::Input(name) | Op::Parameter(name) => bindings
                .get(name)
                .cloned()
                .ok_or_else(|| AutodiffError::Unbound(name.clone())),
            Op::Affine {
                weight,
                input,
                bias,
            } => {
                let w = self.val(*weight);
                let x = self.val(*input);
                let (m, n) = matrix_dims(w.shape())
                    .ok_or_else(|| self.shape_err(idx, format!("weight shape {:?} is not a matrix", w.shape())))?;
                let rows = affine_rows(x.shape(), n).ok_or_else(|| {
                    self.shape_err(idx, format!("input shape {:?} does not end in {n}", x.shape()))
                })?;
                if let Some(b) = bias {
                    let bv = self.val(*b);
                    if vector_len(bv.shape()) != Some(m) {
                        return Err(self.shape_err(
                            idx,
                            format!("bias shape {:?} does not match {m} outputs", bv.shape()),
                        ));
                    }
                }
                let mut out_shape = x.shape().to_vec();
                *out_shape.last_mut().expect("non-empty") = m;
                let mut out = vec![0.0; rows * m];
                gemm(
                    rows, n, m, 1.0, x.data(), (n as isize, 1), w.data(), (1, n as isize), 0.0,
                    &mut out, (m as isize, 1),
                );
                if let Some(b) = bias {
                    let bv = self.val(*b).data();
                    for row in out.chunks_exact_mut(m) {
                        for (o, bb) in row.iter_mut().zip(bv) {
                            *o += bb;
                        }
                    }
                }
                Ok(Tensor {
                    shape: out_shape,
                    data: out,
                })
            }
            Op::Sigmoid(a) => {
                let a = self.val(*a);
                Ok(Tensor {
                    shape: a.shape.clone(),
                    data: a.data.iter().map(|&v| sigmoid(v)).collect(),
                })
            }
            Op::Add(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                if a.shape != b.shape {
                    return Err(self.shape_err(
                        idx,
                        format!("cannot add {:?} and {:?}", a.shape, b.shape),
                    ));
                }
                Ok(Tensor {
                    shape: a.shape.clone(),
                    data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
                })
            }
            Op::BatchedContract(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                let plan = ContractPlan::new(a.shape(), b.shape())
                    .map_err(|detail| self.shape_err(idx, detail))?;
                let mut out = vec![0.0; plan.out_len()];
                for (ai, bi, oi) in plan.batches() {
                    let (p, q, r) = (plan.p, plan.q, plan.r);
                    gemm(
                        p, q, r, 1.0,
                        &a.data[ai * p * q..], (q as isize, 1),
                        &b.data[bi * q * r..], (r as isize, 1),
                        0.0, &mut out[oi * p * r..], (r as isize, 1),
                    );
                }
                Ok(Tensor {
                    shape: plan.out_shape.clone(),
                    data: out,
                })
            }
            Op::WeightedSqDist {
                points,
                targets,
                weights,
            } => {
                let (p, t, w) = (self.val(*points), self.val(*targets), self.val(*weights));
                let dims = sqdist_dims(p.shape(), t.shape(), w.shape())
                    .map_err(|detail| self.shape_err(idx, detail))?;
                let (n, m, d) = dims;
                let mut total = 0.0;
                for i in 0..n {
                    let pi = &p.data[i * d..(i + 1) * d];
                    let wi = &w.data[i * m..(i + 1) * m];
                    let mut row = 0.0;
                    for (j, &wij) in wi.iter().enumerate() {
                        if wij != 0.0 {
                            row += wij * sq_dist(pi, &t.data[j * d..(j + 1) * d]);
                        }
                    }
                    total += row;
                }
                Ok(Tensor::scalar(total))
            }
        }
    }

    /// Propagates `output_adjoint` back through the graph and returns the
    /// gradient of `⟨output_adjoint, output⟩` for every parameter leaf.
    pub fn backward(
        &mut self,
        output_adjoint: &Tensor,
    ) -> Result<BTreeMap<String, Tensor>, AutodiffError> {
        let out = self.output.ok_or(AutodiffError::EmptyGraph)?;
        if self.nodes.iter().any(|n| n.value.is_none()) {
            return Err(AutodiffError::BackwardBeforeForward);
        }
        let out_shape = self.val(out).shape.clone();
        if output_adjoint.shape != out_shape {
            return Err(self.shape_err(
                out.0,
                format!(
                    "output adjoint shape {:?} differs from output shape {:?}",
                    output_adjoint.shape, out_shape
                ),
            ));
        }
        for node in &mut self.nodes {
            node.adjoint = Some(node.value.as_ref().expect("checked").same_shape_zeros());
        }
        self.nodes[out.0]
            .adjoint
            .as_mut()
            .expect("allocated")
            .data
            .copy_from_slice(&output_adjoint.data);

        for idx in (0..=out.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let adj = self.nodes[idx].adjoint.take().expect("allocated");
            self.backprop_node(idx, &adj);
            self.nodes[idx].adjoint = Some(adj);
        }

        let mut grads = BTreeMap::new();
        for node in &self.nodes {
            if let Op::Parameter(name) = &node.op {
                let g = node.adjoint.as_ref().expect("allocated");
                grads
                    .entry(name.clone())
                    .and_modify(|acc: &mut Tensor| {
                        for (a, b) in acc.data.iter_mut().zip(&g.data) {
                            *a += b;
                        }
                    })
                    .or_insert_with(|| g.clone());
            }
        }
        Ok(grads)
    }

    fn adj_mut(&mut self, id: NodeId) -> Option<&mut Tensor> {
        if self.nodes[id.0].needs_grad {
            self.nodes[id.0].adjoint.as_mut()
        } else {
            None
        }
    }

    fn backprop_node(&mut self, idx: usize, adj: &Tensor) {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Input(_) | Op::Parameter(_) => {}
            Op::Affine {
                weight,
                input,
                bias,
            } => {
                let w = self.val(weight).clone();
                let x = self.val(input).clone();
                let (m, n) = matrix_dims(w.shape()).expect("validated in forward");
                let rows = x.len() / n;
                if let Some(gx) = self.adj_mut(input) {
                    // dX += dY · W
                    gemm(
                        rows, m, n, 1.0, &adj.data, (m as isize, 1), &w.data, (n as isize, 1),
                        1.0, &mut gx.data, (n as isize, 1),
                    );
                }
                if let Some(gw) = self.adj_mut(weight) {
                    // dW += dYᵀ · X
                    gemm(
                        m, rows, n, 1.0, &adj.data, (1, m as isize), &x.data, (n as isize, 1),
                        1.0, &mut gw.data, (n as isize, 1),
                    );
                }
                if let Some(b) = bias {
                    if let Some(gb) = self.adj_mut(b) {
                        for row in adj.data.chunks_exact(m) {
                            for (g, a) in gb.data.iter_mut().zip(row) {
                                *g += a;
                            }
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[idx].value.as_ref().expect("evaluated").data.clone();
                if let Some(ga) = self.adj_mut(a) {
                    for ((g, &yy), &dy) in ga.data.iter_mut().zip(&y).zip(&adj.data) {
                        *g += dy * yy * (1.0 - yy);
                    }
                }
            }
            Op::Add(a, b) => {
                for id in [a, b] {
                    if let Some(g) = self.adj_mut(id) {
                        for (gg, dy) in g.data.iter_mut().zip(&adj.data) {
                            *gg += dy;
                        }
                    }
                }
            }
            Op::BatchedContract(a, b) => {
                let av = self.val(a).clone();
                let bv = self.val(b).clone();
                let plan = ContractPlan::new(av.shape(), bv.shape()).expect("validated in forward");
                let (p, q, r) = (plan.p, plan.q, plan.r);
                if self.nodes[a.0].needs_grad {
                    let ga = self.adj_mut(a).expect("needs grad");
                    for (ai, bi, oi) in plan.batches() {
                        // dA += dC · Bᵀ
                        gemm(
                            p, r, q, 1.0,
                            &adj.data[oi * p * r..], (r as isize, 1),
                            &bv.data[bi * q * r..], (1, r as isize),
                            1.0, &mut ga.data[ai * p * q..], (q as isize, 1),
                        );
                    }
                }
                if self.nodes[b.0].needs_grad {
                    let gb = self.adj_mut(b).expect("needs grad");
                    for (ai, bi, oi) in plan.batches() {
                        // dB += Aᵀ · dC
                        gemm(
                            q, p, r, 1.0,
                            &av.data[ai * p * q..], (1, q as isize),
                            &adj.data[oi * p * r..], (r as isize, 1),
                            1.0, &mut gb.data[bi * q * r..], (r as isize, 1),
                        );
                    }
                }
            }
            Op::WeightedSqDist {
                points,
                targets,
                weights,
            } => {
                let scale = adj.data[0];
                let pv = self.val(points).clone();
                let tv = self.val(targets).clone();
                let wv = self.val(weights).clone();
                let (n, m, d) = sqdist_dims(pv.shape(), tv.shape(), wv.shape()).expect("validated");
                if let Some(gp) = self.adj_mut(points) {
                    for i in 0..n {
                        let pi = &pv.data[i * d..(i + 1) * d];
                        let gi = &mut gp.data[i * d..(i + 1) * d];
                        for j in 0..m {
                            let wij = wv.data[i * m + j];
                            if wij == 0.0 {
                                continue;
                            }
                            let tj = &tv.data[j * d..(j + 1) * d];
                            for k in 0..d {
                                gi[k] += 2.0 * scale * wij * (pi[k] - tj[k]);
                            }
                        }
                    }
                }
                if let Some(gt) = self.adj_mut(targets) {
                    for i in 0..n {
                        let pi = &pv.data[i * d..(i + 1) * d];
                        for j in 0..m {
                            let wij = wv.data[i * m + j];
                            if wij == 0.0 {
                                continue;
                            }
                            let tj = &tv.data[j * d..(j + 1) * d];
                            let gj = &mut gt.data[j * d..(j + 1) * d];
                            for k in 0..d {
                                gj[k] += 2.0 * scale * wij * (tj[k] - pi[k]);
                            }
                        }
                    }
                }
                if let Some(gw) = self.adj_mut(weights) {
                    for i in 0..n {
                        let pi = &pv.data[i * d..(i + 1) * d];
                        for j in 0..m {
                            gw.data[i * m + j] += scale * sq_dist(pi, &tv.data[j * d..(j + 1) * d]);
                        }
                    }
                }
            }
        }
    }
}

/// Central-difference check of a graph's parameter gradients.
///
/// The scalar being differentiated is the sum of all output entries. Returns
/// the maximum over parameter entries of `|analytic − fd| / (|analytic| + step)`;
/// a graph without parameters yields 0.
pub fn finite_diff_check(
    graph: &mut Graph,
    bindings: &Bindings,
    step: f64,
) -> Result<f64, AutodiffError> {
    assert!(step > 0.0, "finite-difference step must be positive");
    let out_shape = graph.forward(bindings)?.shape().to_vec();
    let grads = graph.backward(&Tensor::filled(out_shape, 1.0))?;
    let mut work = bindings.clone();
    let mut worst = 0.0_f64;
    for (name, analytic) in &grads {
        for k in 0..analytic.len() {
            let orig = work.get(name).expect("bound").data[k];
            work.get_mut(name).expect("bound").data[k] = orig + step;
            let plus: f64 = graph.forward(&work)?.data().iter().sum();
            work.get_mut(name).expect("bound").data[k] = orig - step;
            let minus: f64 = graph.forward(&work)?.data().iter().sum();
            work.get_mut(name).expect("bound").data[k] = orig;
            let fd = (plus - minus) / (2.0 * step);
            let a = analytic.data[k];
            worst = worst.max((a - fd).abs() / (a.abs() + step));
        }
    }
    Ok(worst)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `c = alpha·a·b + beta·c` for row/column strided operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() >= span(m, k, rsa, csa));
    debug_assert!(b.len() >= span(k, n, rsb, csb));
    debug_assert!(c.len() >= span(m, n, rsc, csc));
    // SAFETY: the debug assertions above describe the contract every call
    // site upholds: each operand slice covers the strided extent it is read
    // or written through, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
    }
}

/// Matrix dimensions of a weight tensor, ignoring trailing unit axes.
fn matrix_dims(shape: &[usize]) -> Option<(usize, usize)> {
    let mut s = shape;
    while s.len() > 2 && s[s.len() - 1] == 1 {
        s = &s[..s.len() - 1];
    }
    (s.len() == 2).then(|| (s[0], s[1]))
}

fn vector_len(shape: &[usize]) -> Option<usize> {
    let mut s = shape;
    while s.len() > 1 && s[s.len() - 1] == 1 {
        s = &s[..s.len() - 1];
    }
    (s.len() == 1).then(|| s[0])
}

fn affine_rows(shape: &[usize], n: usize) -> Option<usize> {
    match shape.last() {
        Some(&last) if last == n => Some(shape[..shape.len() - 1].iter().product()),
        _ => None,
    }
}

fn sqdist_dims(p: &[usize], t: &[usize], w: &[usize]) -> Result<(usize, usize, usize), String> {
    match (p, t, w) {
        ([n, d], [m, d2], [wn, wm]) if d == d2 && n == wn && m == wm => Ok((*n, *m, *d)),
        _ => Err(format!(
            "points {p:?}, targets {t:?} and weights {w:?} are incompatible"
        )),
    }
}

/// Index bookkeeping for a broadcast batched contraction.
struct ContractPlan {
    p: usize,
    q: usize,
    r: usize,
    lead: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
    out_shape: Vec<usize>,
}

impl ContractPlan {
    fn new(a: &[usize], b: &[usize]) -> Result<Self, String> {
        if a.len() < 2 || b.len() < 2 {
            return Err(format!("operands {a:?} and {b:?} need at least two axes"));
        }
        let (p, q) = (a[a.len() - 2], a[a.len() - 1]);
        let (q2, r) = (b[b.len() - 2], b[b.len() - 1]);
        if q != q2 {
            return Err(format!("inner dimensions differ: {a:?} · {b:?}"));
        }
        let a_lead = &a[..a.len() - 2];
        let b_lead = &b[..b.len() - 2];
        let rank = a_lead.len().max(b_lead.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(a_lead), pad(b_lead));
        let mut lead = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x != y && x != 1 && y != 1 {
                return Err(format!("leading axes of {a:?} and {b:?} do not broadcast"));
            }
            lead.push(x.max(y));
        }
        let strides = |s: &[usize]| {
            let mut st = vec![0; rank];
            let mut acc = 1;
            for k in (0..rank).rev() {
                st[k] = if s[k] == 1 { 0 } else { acc };
                acc *= s[k];
            }
            st
        };
        let mut out_shape = lead.clone();
        out_shape.extend([p, r]);
        Ok(Self {
            p,
            q,
            r,
            a_strides: strides(&pa),
            b_strides: strides(&pb),
            lead,
            out_shape,
        })
    }

    fn out_len(&self) -> usize {
        self.out_shape.iter().product()
    }

    /// `(a batch, b batch, output batch)` triples in output order.
    fn batches(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let count: usize = self.lead.iter().product();
        (0..count).map(move |o| {
            let mut rem = o;
            let (mut ai, mut bi) = (0, 0);
            for k in (0..self.lead.len()).rev() {
                let idx = rem % self.lead[k];
                rem /= self.lead[k];
                ai += idx * self.a_strides[k];
                bi += idx * self.b_strides[k];
            }
            (ai, bi, o)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let len = shape.iter().product();
        t(shape, &(0..len).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
    }

    #[test]
    fn tensor_length_must_match_shape() {
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(AutodiffError::LengthMismatch { expected: 6, .. })
        ));
        assert!(matches!(
            Tensor::checked(vec![2], vec![1.0, f64::NAN]),
            Err(AutodiffError::NonFiniteValue { index: 1 })
        ));
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut g = Graph::new();
        let x = g.input("x");
        g.sigmoid(x);
        let mut b = Bindings::new();
        b.insert("x", Tensor::scalar(0.0));
        assert_eq!(g.forward(&b).unwrap().data(), &[0.5]);
    }

    #[test]
    fn zero_weight_affine_returns_bias() {
        let mut g = Graph::new();
        let x = g.input("x");
        let w = g.parameter("w");
        let bias = g.parameter("b");
        g.affine(w, x, Some(bias));
        let mut b = Bindings::new();
        b.insert("x", t(&[3], &[4.0, -2.0, 7.0]));
        b.insert("w", Tensor::zeros(vec![2, 3]));
        b.insert("b", t(&[2], &[0.25, -1.5]));
        assert_eq!(g.forward(&b).unwrap().data(), &[0.25, -1.5]);
    }

    #[test]
    fn batched_contract_broadcasts_tile_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let a = g.input("tile");
        let w = g.parameter("w");
        g.batched_contract(a, w);
        let mut b = Bindings::new();
        b.insert("tile", random(&[2, 20, 20, 1], &mut rng));
        b.insert("w", random(&[20, 1, 10], &mut rng));
        let out = g.forward(&b).unwrap();
        assert_eq!(out.shape(), &[2, 20, 20, 10]);

        // Entry-by-entry reference.
        let tile = b.get("tile").unwrap().data();
        let wv = b.get("w").unwrap().data();
        for s in 0..2 {
            for l in 0..20 {
                for i in 0..20 {
                    for k in 0..10 {
                        let expect = tile[(s * 20 + l) * 20 + i] * wv[l * 10 + k];
                        let got = out.data()[((s * 20 + l) * 20 + i) * 10 + k];
                        assert!((got - expect).abs() < 1e-15);
                    }
                }
            }
        }
    }

    #[test]
    fn shape_mismatch_names_node() {
        let mut g = Graph::new();
        let x = g.input("x");
        let w = g.parameter("w");
        let y = g.affine(w, x, None);
        g.label(y, "layer1");
        let mut b = Bindings::new();
        b.insert("x", Tensor::zeros(vec![4]));
        b.insert("w", Tensor::zeros(vec![2, 3]));
        match g.forward(&b) {
            Err(AutodiffError::Shape { node, .. }) => assert_eq!(node, "layer1"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn checked_mode_rejects_overflow() {
        let mut g = Graph::new();
        let x = g.input("x");
        let w = g.parameter("w");
        g.affine(w, x, None);
        g.set_checked(true);
        let mut b = Bindings::new();
        b.insert("x", t(&[1], &[1e308]));
        b.insert("w", t(&[1, 1], &[1e308]));
        assert!(matches!(g.forward(&b), Err(AutodiffError::NonFinite { .. })));
        g.set_checked(false);
        assert!(g.forward(&b).is_ok());
    }

    #[test]
    fn backward_before_forward_fails() {
        let mut g = Graph::new();
        let w = g.parameter("w");
        g.sigmoid(w);
        assert_eq!(
            g.backward(&Tensor::scalar(1.0)).unwrap_err(),
            AutodiffError::BackwardBeforeForward
        );
    }

    #[test]
    fn affine_weight_gradient_is_outer_product() {
        let mut g = Graph::new();
        let x = g.input("x");
        let w = g.parameter("w");
        g.affine(w, x, None);
        let mut b = Bindings::new();
        b.insert("x", t(&[3], &[1.0, 2.0, 3.0]));
        b.insert("w", t(&[2, 3], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]));
        g.forward(&b).unwrap();
        let grads = g.backward(&t(&[2], &[-1.0, 2.0])).unwrap();
        assert_eq!(grads["w"].data(), &[-1.0, -2.0, -3.0, 2.0, 4.0, 6.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero_is_quarter() {
        let mut g = Graph::new();
        let w = g.parameter("w");
        g.sigmoid(w);
        let mut b = Bindings::new();
        b.insert("w", Tensor::scalar(0.0));
        g.forward(&b).unwrap();
        let grads = g.backward(&Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads["w"].data(), &[0.25]);
    }

    #[test]
    fn fan_out_accumulates() {
        // y = w + w  =>  dy/dw = 2
        let mut g = Graph::new();
        let w = g.parameter("w");
        g.add(w, w);
        let mut b = Bindings::new();
        b.insert("w", Tensor::scalar(3.0));
        g.forward(&b).unwrap();
        let grads = g.backward(&Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads["w"].data(), &[2.0]);
        // Adjoints are reset between calls.
        let grads = g.backward(&Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads["w"].data(), &[2.0]);
    }

    #[test]
    fn adjoint_shapes_match_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let x = g.input("x");
        let w = g.parameter("w");
        let h = g.affine(w, x, None);
        let s = g.sigmoid(h);
        g.set_output(s);
        let mut b = Bindings::new();
        b.insert("x", random(&[5, 3], &mut rng));
        b.insert("w", random(&[4, 3], &mut rng));
        g.forward(&b).unwrap();
        g.backward(&Tensor::filled(vec![5, 4], 1.0)).unwrap();
        for id in [x, w, h, s] {
            assert_eq!(g.adjoint(id).unwrap().shape(), g.value(id).unwrap().shape());
        }
    }

    fn mlp(width: usize, depth: usize, rng: &mut ChaCha8Rng) -> (Graph, Bindings) {
        let mut g = Graph::new();
        let mut b = Bindings::new();
        let mut h = g.input("x");
        b.insert("x", random(&[6, width], rng));
        for l in 0..depth {
            let w = g.parameter(format!("w{l}"));
            let bias = g.parameter(format!("b{l}"));
            b.insert(format!("w{l}"), random(&[width, width], rng));
            b.insert(format!("b{l}"), random(&[width], rng));
            let a = g.affine(w, h, Some(bias));
            h = g.sigmoid(a);
        }
        (g, b)
    }

    #[test]
    fn random_three_layer_net_matches_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (mut g, b) = mlp(4, 3, &mut rng);
            let err = finite_diff_check(&mut g, &b, 1e-5).unwrap();
            assert!(err <= 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn pure_affine_graph_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let x = g.input("x");
        let w = g.parameter("w");
        let bias = g.parameter("b");
        g.affine(w, x, Some(bias));
        let mut b = Bindings::new();
        b.insert("x", random(&[7, 3], &mut rng));
        b.insert("w", random(&[2, 3], &mut rng));
        b.insert("b", random(&[2], &mut rng));
        for step in [1e-3, 1e-1, 1.0] {
            assert!(finite_diff_check(&mut g, &b, step).unwrap() <= 1e-10);
        }
    }

    #[test]
    fn parameterless_graph_has_zero_error() {
        let mut g = Graph::new();
        let x = g.input("x");
        g.sigmoid(x);
        let mut b = Bindings::new();
        b.insert("x", t(&[2], &[0.3, -0.2]));
        assert_eq!(finite_diff_check(&mut g, &b, 1e-5).unwrap(), 0.0);
    }

    #[test]
    fn contract_and_sqdist_gradients() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mut g = Graph::new();
            let tile = g.input("tile");
            let w1 = g.parameter("w1");
            let b1 = g.parameter("b1");
            let c1 = g.batched_contract(tile, w1);
            let a1 = g.add(c1, b1);
            let h = g.sigmoid(a1);
            let w2 = g.parameter("w2");
            let c2 = g.batched_contract(h, w2);
            // c2: (3, 4, 1) used as the weight of an affine map
            let x = g.input("x");
            let f = g.affine(c2, x, None);
            let y = g.input("y");
            let gamma = g.input("gamma");
            g.weighted_sqdist(f, y, gamma);
            let mut b = Bindings::new();
            b.insert("tile", random(&[3, 4, 2], &mut rng));
            b.insert("w1", random(&[3, 2, 5], &mut rng));
            b.insert("b1", random(&[3, 4, 5], &mut rng));
            b.insert("w2", random(&[3, 5, 1], &mut rng));
            b.insert("x", random(&[6, 4], &mut rng));
            b.insert("y", random(&[6, 3], &mut rng));
            let gam: Vec<f64> = (0..36).map(|_| rng.random_range(0.0..1.0)).collect();
            b.insert("gamma", t(&[6, 6], &gam));
            let err = finite_diff_check(&mut g, &b, 1e-5).unwrap();
            assert!(err <= 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut g, b) = mlp(5, 3, &mut rng);
        let first = g.forward(&b).unwrap().clone();
        let second = g.forward(&b).unwrap().clone();
        assert_eq!(first.data(), second.data());
    }

    #[test]
    fn add_and_contract_are_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(&[2, 3, 4], &mut rng);
        let x = random(&[3, 4, 5], &mut rng);
        let y = random(&[3, 4, 5], &mut rng);
        let (alpha, beta) = (0.7, -1.3);
        let combo = t(
            &[3, 4, 5],
            &x.data().iter().zip(y.data()).map(|(p, q)| alpha * p + beta * q).collect::<Vec<_>>(),
        );
        let eval = |rhs: &Tensor| {
            let mut g = Graph::new();
            let l = g.input("a");
            let r = g.input("r");
            g.batched_contract(l, r);
            let mut b = Bindings::new();
            b.insert("a", Tensor::new(vec![1, 3, 4], a.data()[..12].to_vec()).unwrap());
            b.insert("r", rhs.clone());
            g.forward(&b).unwrap().clone()
        };
        let (fx, fy, fc) = (eval(&x), eval(&y), eval(&combo));
        for k in 0..fc.len() {
            let lin = alpha * fx.data()[k] + beta * fy.data()[k];
            assert!((fc.data()[k] - lin).abs() < 1e-12);
        }
    }
}
