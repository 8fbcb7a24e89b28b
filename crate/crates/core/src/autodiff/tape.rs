use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use alloc::collections::BTreeMap;

use super::activation::{relu_indicator, sigmoid, silu_prime_with, silu_second_with};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The operation that produced a node.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// Input value; trainable or constant.
    Leaf,
    MatMul,
    Add,
    Sub,
    Hadamard,
    Scale(f64),
    /// Stack any number of inputs with equal column counts.
    ConcatRows,
    /// Rows `start..end`.
    Slice { start: usize, end: usize },
    Transpose,
    Sum,
    Dot,
    SqNorm,
    /// `a b^T` for column vectors `a`, `b`.
    Outer,
    Reciprocal,
    Sqrt,
    Relu,
    Silu,
    SiluPrime,
    ReluIndicator,
    DiagFromVector,
    IdentityMinus,
}

impl Primitive {
    pub fn tag(&self) -> &'static str {
        match self {
            Primitive::Leaf => "leaf",
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Hadamard => "hadamard",
            Primitive::Scale(_) => "scale",
            Primitive::ConcatRows => "concat_rows",
            Primitive::Slice { .. } => "slice",
            Primitive::Transpose => "transpose",
            Primitive::Sum => "sum",
            Primitive::Dot => "dot",
            Primitive::SqNorm => "sqnorm",
            Primitive::Outer => "outer",
            Primitive::Reciprocal => "reciprocal",
            Primitive::Sqrt => "sqrt",
            Primitive::Relu => "relu",
            Primitive::Silu => "silu",
            Primitive::SiluPrime => "silu_prime",
            Primitive::ReluIndicator => "relu_indicator",
            Primitive::DiagFromVector => "diag_from_vector",
            Primitive::IdentityMinus => "identity_minus",
        }
    }

    /// Parses a primitive tag. `scale` reads its factor from `attrs[0]`;
    /// `slice` reads `start, end` from `attrs[0..2]`.
    pub fn from_tag(tag: &str, attrs: &[f64]) -> Result<Self> {
        let op = match tag {
            "matmul" => Primitive::MatMul,
            "add" => Primitive::Add,
            "sub" => Primitive::Sub,
            "hadamard" => Primitive::Hadamard,
            "scale" => Primitive::Scale(
                *attrs.first().ok_or(Error::MissingAttribute { op: "scale", attr: "factor" })?,
            ),
            "concat_rows" => Primitive::ConcatRows,
            "slice" => {
                if attrs.len() < 2 {
                    return Err(Error::MissingAttribute { op: "slice", attr: "start, end" });
                }
                Primitive::Slice { start: attrs[0] as usize, end: attrs[1] as usize }
            }
            "transpose" => Primitive::Transpose,
            "sum" => Primitive::Sum,
            "dot" => Primitive::Dot,
            "sqnorm" => Primitive::SqNorm,
            "outer" => Primitive::Outer,
            "reciprocal" => Primitive::Reciprocal,
            "sqrt" => Primitive::Sqrt,
            "relu" => Primitive::Relu,
            "silu" => Primitive::Silu,
            "silu_prime" => Primitive::SiluPrime,
            "relu_indicator" => Primitive::ReluIndicator,
            "diag_from_vector" => Primitive::DiagFromVector,
            "identity_minus" => Primitive::IdentityMinus,
            other => return Err(Error::UnknownPrimitive(other.to_string())),
        };
        Ok(op)
    }
}

#[derive(Clone, Debug)]
pub struct TapeNode {
    pub op: Primitive,
    pub inputs: Vec<NodeId>,
    pub value: Tensor,
    requires_grad: bool,
}

impl TapeNode {
    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

/// Append-only record of a forward computation.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<TapeNode>,
    /// `sigmoid(x)` for every node `x` fed to a silu-family primitive.
    sigmoid: BTreeMap<usize, Tensor>,
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
#[derive(Clone, Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
}

impl Gradients {
    /// The adjoint of `id`, or `None` when no gradient reached it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.adjoints.get(id.0).and_then(Option::as_ref)
    }

    /// The adjoint of `id`, zero-filled to `like`'s shape if nothing reached it.
    pub fn get_or_zeros(&self, id: NodeId, like: &Tensor) -> Tensor {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(like.rows(), like.cols()))
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.adjoints.get_mut(id.0).and_then(Option::take)
    }
}

fn mismatch(op: &Primitive, shapes: &[[usize; 2]]) -> Error {
    let detail = shapes
        .iter()
        .map(|s| format!("{}x{}", s[0], s[1]))
        .collect::<Vec<_>>()
        .join(", ");
    Error::Shape { op: op.tag(), detail }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &TapeNode {
        &self.nodes[id.0]
    }

    pub fn nodes(&self) -> &[TapeNode] {
        &self.nodes
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// A differentiable input.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Primitive::Leaf, Vec::new(), value, true)
    }

    /// A constant input; backward never computes its adjoint.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Primitive::Leaf, Vec::new(), value, false)
    }

    fn push(&mut self, op: Primitive, inputs: Vec<NodeId>, value: Tensor, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(TapeNode { op, inputs, value, requires_grad });
        id
    }

    /// Appends `op` applied to `inputs` and returns the new node.
    pub fn apply(&mut self, op: Primitive, inputs: &[NodeId]) -> Result<NodeId> {
        for id in inputs {
            if id.0 >= self.nodes.len() {
                return Err(Error::Shape { op: op.tag(), detail: format!("node {} does not exist", id.0) });
            }
        }
        if matches!(op, Primitive::Silu | Primitive::SiluPrime) && inputs.len() == 1 {
            let x = inputs[0].0;
            if !self.sigmoid.contains_key(&x) {
                let s = self.nodes[x].value.map(sigmoid);
                self.sigmoid.insert(x, s);
            }
        }
        let value = self.forward_value(&op, inputs)?;
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        Ok(self.push(op, inputs.to_vec(), value, requires_grad))
    }

    fn forward_value(&self, op: &Primitive, inputs: &[NodeId]) -> Result<Tensor> {
        let arity = match op {
            Primitive::Leaf => return Err(mismatch(op, &[])),
            Primitive::ConcatRows => {
                if inputs.is_empty() {
                    return Err(mismatch(op, &[]));
                }
                None
            }
            Primitive::MatMul
            | Primitive::Add
            | Primitive::Sub
            | Primitive::Hadamard
            | Primitive::Dot
            | Primitive::Outer => Some(2),
            _ => Some(1),
        };
        let vals: Vec<&Tensor> = inputs.iter().map(|i| &self.nodes[i.0].value).collect();
        if let Some(n) = arity {
            if vals.len() != n {
                return Err(Error::Shape {
                    op: op.tag(),
                    detail: format!("expected {n} inputs, got {}", vals.len()),
                });
            }
        }
        let shapes: Vec<[usize; 2]> = vals.iter().map(|v| v.shape()).collect();
        let out = match op {
            Primitive::Leaf => unreachable!(),
            Primitive::MatMul => {
                if vals[0].cols() != vals[1].rows() {
                    return Err(mismatch(op, &shapes));
                }
                vals[0].matmul(vals[1])
            }
            Primitive::Add | Primitive::Sub | Primitive::Hadamard | Primitive::Dot => {
                if shapes[0] != shapes[1] {
                    return Err(mismatch(op, &shapes));
                }
                match op {
                    Primitive::Add => vals[0].zip_map(vals[1], |a, b| a + b),
                    Primitive::Sub => vals[0].zip_map(vals[1], |a, b| a - b),
                    Primitive::Hadamard => vals[0].zip_map(vals[1], |a, b| a * b),
                    _ => Tensor::scalar(vals[0].data().iter().zip(vals[1].data()).map(|(a, b)| a * b).sum()),
                }
            }
            Primitive::Scale(c) => vals[0].scale(*c),
            Primitive::ConcatRows => {
                let cols = vals[0].cols();
                if vals.iter().any(|v| v.cols() != cols) {
                    return Err(mismatch(op, &shapes));
                }
                let rows = vals.iter().map(|v| v.rows()).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for v in &vals {
                    data.extend_from_slice(v.data());
                }
                Tensor::new(rows, cols, data)?
            }
            Primitive::Slice { start, end } => {
                let v = vals[0];
                if start > end || *end > v.rows() {
                    return Err(Error::Shape {
                        op: op.tag(),
                        detail: format!("rows {start}..{end} of {}x{}", v.rows(), v.cols()),
                    });
                }
                let c = v.cols();
                Tensor::new(end - start, c, v.data()[start * c..end * c].to_vec())?
            }
            Primitive::Transpose => vals[0].transpose(),
            Primitive::Sum => Tensor::scalar(vals[0].data().iter().sum()),
            Primitive::SqNorm => Tensor::scalar(vals[0].data().iter().map(|x| x * x).sum()),
            Primitive::Outer => {
                if vals[0].cols() != 1 || vals[1].cols() != 1 {
                    return Err(mismatch(op, &shapes));
                }
                vals[0].matmul_t(vals[1])
            }
            Primitive::Reciprocal => vals[0].map(|x| 1.0 / x),
            Primitive::Sqrt => vals[0].map(libm::sqrt),
            Primitive::Relu => vals[0].map(|x| if x > 0.0 { x } else { 0.0 }),
            Primitive::Silu => vals[0].zip_map(&self.sigmoid[&inputs[0].0], |x, s| x * s),
            Primitive::SiluPrime => vals[0].zip_map(&self.sigmoid[&inputs[0].0], silu_prime_with),
            Primitive::ReluIndicator => vals[0].map(relu_indicator),
            Primitive::DiagFromVector => {
                let v = vals[0];
                if v.cols() != 1 {
                    return Err(mismatch(op, &shapes));
                }
                let n = v.rows();
                Tensor::from_fn(n, n, |i, j| if i == j { v.get(i, 0) } else { 0.0 })
            }
            Primitive::IdentityMinus => {
                let v = vals[0];
                if v.rows() != v.cols() {
                    return Err(mismatch(op, &shapes));
                }
                Tensor::from_fn(v.rows(), v.cols(), |i, j| if i == j { 1.0 } else { 0.0 } - v.get(i, j))
            }
        };
        Ok(out)
    }

    /// Reverse sweep from a scalar `root`. Forward values are left untouched.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let root_value = &self.nodes[root.0].value;
        if root_value.len() != 1 {
            return Err(Error::NonScalarRoot { rows: root_value.rows(), cols: root_value.cols() });
        }
        let mut adjoints: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        adjoints[root.0] = Some(Tensor::filled(root_value.rows(), root_value.cols(), 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if node.inputs.is_empty() || !node.requires_grad {
                continue;
            }
            let Some(g) = adjoints[idx].take() else { continue };
            self.propagate(node, &g, &mut adjoints);
            adjoints[idx] = Some(g);
        }
        Ok(Gradients { adjoints })
    }

    fn propagate(&self, node: &TapeNode, g: &Tensor, adjoints: &mut [Option<Tensor>]) {
        let wants = |i: usize| self.nodes[node.inputs[i].0].requires_grad;
        let input = |i: usize| &self.nodes[node.inputs[i].0].value;
        let mut acc = |i: usize, contrib: Tensor| {
            let slot = &mut adjoints[node.inputs[i].0];
            match slot {
                Some(existing) => existing.add_assign(&contrib),
                None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Primitive::Leaf => {}
            Primitive::MatMul => {
                if wants(0) {
                    acc(0, g.matmul_t(input(1)));
                }
                if wants(1) {
                    acc(1, input(0).t_matmul(g));
                }
            }
            Primitive::Add => {
                if wants(0) {
                    acc(0, g.clone());
                }
                if wants(1) {
                    acc(1, g.clone());
                }
            }
            Primitive::Sub => {
                if wants(0) {
                    acc(0, g.clone());
                }
                if wants(1) {
                    acc(1, g.scale(-1.0));
                }
            }
            Primitive::Hadamard => {
                if wants(0) {
                    acc(0, g.zip_map(input(1), |a, b| a * b));
                }
                if wants(1) {
                    acc(1, g.zip_map(input(0), |a, b| a * b));
                }
            }
            Primitive::Scale(c) => acc(0, g.scale(*c)),
            Primitive::ConcatRows => {
                let cols = g.cols();
                let mut offset = 0;
                for i in 0..node.inputs.len() {
                    let rows = input(i).rows();
                    if wants(i) {
                        let part = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                        acc(i, Tensor::new(rows, cols, part).expect("concat slice"));
                    }
                    offset += rows;
                }
            }
            Primitive::Slice { start, end } => {
                let x = input(0);
                let c = x.cols();
                let mut full = Tensor::zeros(x.rows(), c);
                full.data_mut()[start * c..end * c].copy_from_slice(g.data());
                acc(0, full);
            }
            Primitive::Transpose => acc(0, g.transpose()),
            Primitive::Sum => {
                let x = input(0);
                acc(0, Tensor::filled(x.rows(), x.cols(), g.item()));
            }
            Primitive::Dot => {
                let s = g.item();
                if wants(0) {
                    acc(0, input(1).scale(s));
                }
                if wants(1) {
                    acc(1, input(0).scale(s));
                }
            }
            Primitive::SqNorm => acc(0, input(0).scale(2.0 * g.item())),
            Primitive::Outer => {
                if wants(0) {
                    acc(0, g.matmul(input(1)));
                }
                if wants(1) {
                    acc(1, g.t_matmul(input(0)));
                }
            }
            Primitive::Reciprocal => acc(0, g.zip_map(&node.value, |gi, y| -gi * y * y)),
            Primitive::Sqrt => acc(0, g.zip_map(&node.value, |gi, y| gi / (2.0 * y))),
            Primitive::Relu => acc(0, g.zip_map(input(0), |gi, x| gi * relu_indicator(x))),
            Primitive::Silu | Primitive::SiluPrime => {
                let x = input(0);
                let s = &self.sigmoid[&node.inputs[0].0];
                let d: fn(f64, f64) -> f64 =
                    if node.op == Primitive::Silu { silu_prime_with } else { silu_second_with };
                let mut out = g.clone();
                for ((o, &xv), &sv) in out.data_mut().iter_mut().zip(x.data()).zip(s.data()) {
                    *o *= d(xv, sv);
                }
                acc(0, out);
            }
            Primitive::ReluIndicator => {
                let x = input(0);
                acc(0, Tensor::zeros(x.rows(), x.cols()));
            }
            Primitive::DiagFromVector => {
                let n = g.rows();
                acc(0, Tensor::from_fn(n, 1, |i, _| g.get(i, i)));
            }
            Primitive::IdentityMinus => acc(0, g.scale(-1.0)),
        }
    }
}

macro_rules! unary {
    ($($name:ident => $op:expr),* $(,)?) => {
        impl Tape {
            $(
                pub fn $name(&mut self, x: NodeId) -> Result<NodeId> {
                    self.apply($op, &[x])
                }
            )*
        }
    };
}

macro_rules! binary {
    ($($name:ident => $op:expr),* $(,)?) => {
        impl Tape {
            $(
                pub fn $name(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
                    self.apply($op, &[a, b])
                }
            )*
        }
    };
}

unary! {
    transpose => Primitive::Transpose,
    sum => Primitive::Sum,
    sqnorm => Primitive::SqNorm,
    reciprocal => Primitive::Reciprocal,
    sqrt => Primitive::Sqrt,
    relu => Primitive::Relu,
    silu => Primitive::Silu,
    silu_prime => Primitive::SiluPrime,
    relu_indicator => Primitive::ReluIndicator,
    diag_from_vector => Primitive::DiagFromVector,
    identity_minus => Primitive::IdentityMinus,
}

binary! {
    matmul => Primitive::MatMul,
    add => Primitive::Add,
    sub => Primitive::Sub,
    hadamard => Primitive::Hadamard,
    dot => Primitive::Dot,
    outer => Primitive::Outer,
}

impl Tape {
    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        self.apply(Primitive::Scale(factor), &[x])
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.apply(Primitive::Slice { start, end }, &[x])
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.apply(Primitive::ConcatRows, parts)
    }

    /// Constant `rows x cols` tensor of ones.
    pub fn ones(&mut self, rows: usize, cols: usize) -> NodeId {
        self.constant(Tensor::filled(rows, cols, 1.0))
    }

    /// Per-column sums of `x` as a `1 x cols` row.
    pub fn column_sums(&mut self, x: NodeId) -> Result<NodeId> {
        let rows = self.value(x).rows();
        let ones = self.ones(1, rows);
        self.matmul(ones, x)
    }

    /// Repeats a `1 x cols` row `rows` times.
    pub fn broadcast_row(&mut self, row: NodeId, rows: usize) -> Result<NodeId> {
        let ones = self.ones(rows, 1);
        self.matmul(ones, row)
    }

    /// Repeats an `n x 1` column `cols` times.
    pub fn broadcast_column(&mut self, column: NodeId, cols: usize) -> Result<NodeId> {
        let ones = self.ones(1, cols);
        self.matmul(column, ones)
    }

    /// `x + b 1^T` for a bias column `b`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let cols = self.value(x).cols();
        let b = self.broadcast_column(bias, cols)?;
        self.add(x, b)
    }
}
