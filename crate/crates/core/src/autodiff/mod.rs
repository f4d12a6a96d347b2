//! Reverse-mode automatic differentiation over [`DenseTensor`]s.
//!
//! A [`CompGraph`] is built once per batch as a flat list of primitive ops.
//! Node inputs always refer to earlier nodes, so insertion order is a valid
//! topological order. [`forward_eval`] evaluates the graph and keeps every
//! intermediate around; [`Evaluation::backward`] then replays the list in
//! reverse to produce one gradient per named parameter and input.
//!
//! Broadcasting is limited to [`CompGraph::add_bias`]. Everything else wants
//! exact shapes.

mod eval;
mod optim;
mod params;

pub use eval::{forward_eval, forward_eval_ordered, Bindings, Evaluation, ForwardOptions, Gradients};
pub use optim::{Adam, AdamState};
pub use params::ParamStore;

use std::collections::HashMap;

use crate::tensor::DenseTensor;

/// Index of a node inside its [`CompGraph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operations.
#[derive(Debug, Clone)]
pub enum Op {
    /// Value bound at evaluation time by name.
    Input(String),
    /// Trainable tensor looked up in a [`ParamStore`] by name.
    Param(String),
    Constant(DenseTensor),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `[m, n] + [1, n]` (or `[n]`), the bias row added to every row.
    AddBias(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    /// Elementwise `max(x, floor)`. `floor = 0` is a ReLU.
    Maximum(NodeId, f64),
    ConcatCols(NodeId, NodeId),
    Reshape(NodeId, Vec<usize>),
    ReduceSum(NodeId),
    ReduceMean(NodeId),
    /// `[m, n] -> [m, 1]`.
    RowSum(NodeId),
    /// Row-wise log-softmax.
    LogSoftmax(NodeId),
    /// Inverted dropout. Nodes sharing a `key` share a mask.
    Dropout {
        input: NodeId,
        rate: f64,
        key: u64,
    },
    /// Mean of the selected table rows, one output row per bag.
    EmbeddingBag {
        table: NodeId,
        bags: Vec<Vec<usize>>,
    },
    /// Each row repeated `times` times consecutively: row `i * times + j` is row `i`.
    RepeatRows {
        input: NodeId,
        times: usize,
    },
    /// The whole matrix stacked `times` times: row `j * rows + i` is row `i`.
    TileRows {
        input: NodeId,
        times: usize,
    },
    /// Picks flat elements, producing a `[indices.len()]` vector.
    Gather {
        input: NodeId,
        indices: Vec<usize>,
    },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Constant(_) => "constant",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Maximum(..) => "maximum",
            Op::ConcatCols(..) => "concat",
            Op::Reshape(..) => "reshape",
            Op::ReduceSum(_) => "reduce_sum",
            Op::ReduceMean(_) => "reduce_mean",
            Op::RowSum(_) => "row_sum",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Dropout { .. } => "dropout",
            Op::EmbeddingBag { .. } => "embedding_bag",
            Op::RepeatRows { .. } => "repeat_rows",
            Op::TileRows { .. } => "tile_rows",
            Op::Gather { .. } => "gather",
        }
    }

    pub fn operands(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) | Op::Param(_) | Op::Constant(_) => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBias(a, b)
            | Op::ConcatCols(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Maximum(a, _)
            | Op::Reshape(a, _)
            | Op::ReduceSum(a)
            | Op::ReduceMean(a)
            | Op::RowSum(a)
            | Op::LogSoftmax(a) => vec![*a],
            Op::Dropout { input, .. }
            | Op::RepeatRows { input, .. }
            | Op::TileRows { input, .. }
            | Op::Gather { input, .. } => vec![*input],
            Op::EmbeddingBag { table, .. } => vec![*table],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    label: Option<String>,
}

/// A differentiable computation, stored in topological order.
#[derive(Debug, Clone, Default)]
pub struct CompGraph {
    nodes: Vec<Node>,
    leaves: HashMap<String, NodeId>,
}

impl CompGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn label_of(&self, id: NodeId) -> Option<&str> {
        self.nodes[id.0].label.as_deref()
    }

    /// Attaches a human-readable label, used in numeric error messages.
    pub fn set_label(&mut self, id: NodeId, label: impl Into<String>) {
        self.nodes[id.0].label = Some(label.into());
    }

    /// Names of every parameter leaf, in insertion order.
    pub fn param_names(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Param(name) => Some(name.as_str()),
                _ => None,
            })
            .collect()
    }

    /// Description used when reporting errors about `id`.
    pub(crate) fn describe(&self, id: NodeId) -> String {
        let node = &self.nodes[id.0];
        match (&node.label, &node.op) {
            (Some(label), op) => format!("#{} {} ({label})", id.0, op.name()),
            (None, Op::Input(name) | Op::Param(name)) => {
                format!("#{} {} ({name})", id.0, node.op.name())
            }
            (None, op) => format!("#{} {}", id.0, op.name()),
        }
    }

    fn push(&mut self, op: Op) -> NodeId {
        debug_assert!(op.operands().iter().all(|o| o.0 < self.nodes.len()));
        self.nodes.push(Node { op, label: None });
        NodeId(self.nodes.len() - 1)
    }

    fn leaf(&mut self, name: &str, make: fn(String) -> Op) -> NodeId {
        if let Some(&id) = self.leaves.get(name) {
            let same_kind =
                std::mem::discriminant(&self.nodes[id.0].op) == std::mem::discriminant(&make(String::new()));
            assert!(same_kind, "leaf name `{name}` used for both an input and a parameter");
            return id;
        }
        let id = self.push(make(name.to_string()));
        self.leaves.insert(name.to_string(), id);
        id
    }

    /// Input leaf bound at evaluation time. Repeated names return the same node.
    pub fn input(&mut self, name: &str) -> NodeId {
        self.leaf(name, Op::Input)
    }

    /// Parameter leaf. Repeated names return the same node.
    pub fn param(&mut self, name: &str) -> NodeId {
        self.leaf(name, Op::Param)
    }

    pub fn constant(&mut self, value: DenseTensor) -> NodeId {
        self.push(Op::Constant(value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::AddBias(a, bias))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::AddScalar(a, c))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Log(a))
    }

    pub fn maximum(&mut self, a: NodeId, floor: f64) -> NodeId {
        self.push(Op::Maximum(a, floor))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.maximum(a, 0.0)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::ConcatCols(a, b))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        self.push(Op::Reshape(a, shape))
    }

    pub fn reduce_sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::ReduceSum(a))
    }

    pub fn reduce_mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::ReduceMean(a))
    }

    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::RowSum(a))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::LogSoftmax(a))
    }

    pub fn dropout(&mut self, input: NodeId, rate: f64, key: u64) -> NodeId {
        self.push(Op::Dropout { input, rate, key })
    }

    pub fn embedding_bag(&mut self, table: NodeId, bags: Vec<Vec<usize>>) -> NodeId {
        self.push(Op::EmbeddingBag { table, bags })
    }

    pub fn repeat_rows(&mut self, input: NodeId, times: usize) -> NodeId {
        self.push(Op::RepeatRows { input, times })
    }

    pub fn tile_rows(&mut self, input: NodeId, times: usize) -> NodeId {
        self.push(Op::TileRows { input, times })
    }

    pub fn gather(&mut self, input: NodeId, indices: Vec<usize>) -> NodeId {
        self.push(Op::Gather { input, indices })
    }
}

#[cfg(test)]
mod tests;
