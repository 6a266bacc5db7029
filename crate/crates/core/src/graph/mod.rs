//! Computational-graph IR.
//!
//! A graph is a topologically ordered sequence of single-output operators.
//! Node ids are dense positions in that sequence, which lets both planning
//! passes address contiguous operator ranges by index.
//!
//! Backward operators, when present, carry a `colocate_with` tag naming the
//! forward operator (or parameter) they belong to. Untagged nodes form the
//! forward sequence that gets sliced into pipeline stages.

mod builders;
mod json;

pub use builders::{
    append_backward, build_mlp, build_mlp_with, build_transformer_blocks, build_transformer_with,
    random_graph, MlpConfig, TransformerConfig,
};
pub use json::{parse, serialize, GRAPH_FORMAT_VERSION};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("invalid tensor shape: {0}")]
    InvalidShape(String),
    #[error("node {node}: unknown producer {producer}")]
    UnknownProducer { node: NodeId, producer: NodeId },
    #[error("node {node} consumes node {producer}, which does not precede it (cycle or non-topological order)")]
    NotTopological { node: NodeId, producer: NodeId },
    #[error("node ids must be dense and in order: position {position} holds id {id}")]
    NonDenseIds { position: usize, id: NodeId },
    #[error("node {node}: {reason}")]
    InvalidNode { node: NodeId, reason: String },
    #[error("unknown output node {0}")]
    UnknownOutput(NodeId),
    #[error("invalid builder arguments: {0}")]
    InvalidArguments(String),
    #[error("malformed graph document: {0}")]
    Malformed(String),
}

impl GraphError {
    fn node(node: NodeId, reason: impl Into<String>) -> Self {
        GraphError::InvalidNode { node, reason: reason.into() }
    }
}

/// Dense tensor shape plus element width.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawShape", into = "RawShape")]
pub struct TensorShape {
    dims: Vec<u64>,
    elem_bytes: u32,
    bytes: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawShape {
    dims: Vec<u64>,
    elem_bytes: u32,
}

impl TryFrom<RawShape> for TensorShape {
    type Error = GraphError;
    fn try_from(raw: RawShape) -> Result<Self, GraphError> {
        TensorShape::new(raw.dims, raw.elem_bytes)
    }
}

impl From<TensorShape> for RawShape {
    fn from(s: TensorShape) -> Self {
        RawShape { dims: s.dims, elem_bytes: s.elem_bytes }
    }
}

impl TensorShape {
    pub fn new(dims: Vec<u64>, elem_bytes: u32) -> Result<Self, GraphError> {
        if !matches!(elem_bytes, 1 | 2 | 4 | 8) {
            return Err(GraphError::InvalidShape(format!("elem_bytes {elem_bytes} not in {{1,2,4,8}}")));
        }
        if let Some(pos) = dims.iter().position(|&d| d == 0) {
            return Err(GraphError::InvalidShape(format!("extent of dim {pos} is zero")));
        }
        let bytes = dims
            .iter()
            .try_fold(elem_bytes as u64, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| GraphError::InvalidShape(format!("byte size of {dims:?} overflows")))?;
        Ok(TensorShape { dims, elem_bytes, bytes })
    }

    pub fn f32(dims: &[u64]) -> Result<Self, GraphError> {
        Self::new(dims.to_vec(), 4)
    }

    pub fn dims(&self) -> &[u64] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn elem_bytes(&self) -> u32 {
        self.elem_bytes
    }

    pub fn num_elements(&self) -> u64 {
        self.bytes / self.elem_bytes as u64
    }

    pub fn byte_size(&self) -> u64 {
        self.bytes
    }

    /// Product of extents of the dims before `dim`.
    pub fn prefix_product(&self, dim: usize) -> u64 {
        self.dims[..dim].iter().product()
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dims: Vec<String> = self.dims.iter().map(u64::to_string).collect();
        write!(f, "[{}]x{}B", dims.join(","), self.elem_bytes)
    }
}

/// Operator kinds understood by the planner.
///
/// Contraction convention: `Matmul` computes `[m,k] x [k,n] -> [m,n]` and
/// `BatchedMatmul` computes `[b,m,k] x [b,k,n] -> [b,m,n]`; the contraction
/// axis is the last lhs dim and the second-to-last rhs dim.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Input,
    Parameter,
    Matmul,
    BatchedMatmul,
    Elementwise { arity: usize },
    Reduction { axis: usize },
    Reshape,
}

impl OpKind {
    pub fn is_source(self) -> bool {
        matches!(self, OpKind::Input | OpKind::Parameter)
    }

    /// Computationally trivial operators get folded into an operand before
    /// the sharding ILP runs.
    pub fn is_trivial(self) -> bool {
        matches!(self, OpKind::Elementwise { .. } | OpKind::Reduction { .. } | OpKind::Reshape)
    }

    pub fn is_matmul_family(self) -> bool {
        matches!(self, OpKind::Matmul | OpKind::BatchedMatmul)
    }

    /// Index of the contracted axis on the lhs operand, for matmul-family ops.
    pub fn contraction_axis(self) -> Option<usize> {
        match self {
            OpKind::Matmul => Some(1),
            OpKind::BatchedMatmul => Some(2),
            _ => None,
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OpKind::Input => f.write_str("input"),
            OpKind::Parameter => f.write_str("parameter"),
            OpKind::Matmul => f.write_str("matmul"),
            OpKind::BatchedMatmul => f.write_str("batched_matmul"),
            OpKind::Elementwise { arity } => write!(f, "elementwise:{arity}"),
            OpKind::Reduction { axis } => write!(f, "reduction:{axis}"),
            OpKind::Reshape => f.write_str("reshape"),
        }
    }
}

impl FromStr for OpKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let (head, arg) = match s.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (s, None),
        };
        let num = |a: Option<&str>| -> Result<usize, String> {
            a.ok_or_else(|| format!("kind `{head}` needs a numeric argument"))?
                .parse::<usize>()
                .map_err(|e| format!("kind `{s}`: {e}"))
        };
        match (head, arg) {
            ("input", None) => Ok(OpKind::Input),
            ("parameter", None) => Ok(OpKind::Parameter),
            ("matmul", None) => Ok(OpKind::Matmul),
            ("batched_matmul", None) => Ok(OpKind::BatchedMatmul),
            ("reshape", None) => Ok(OpKind::Reshape),
            ("elementwise", a) => Ok(OpKind::Elementwise { arity: num(a)? }),
            ("reduction", a) => Ok(OpKind::Reduction { axis: num(a)? }),
            _ => Err(format!("unknown op kind `{s}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OpNode {
    pub id: NodeId,
    pub kind: OpKind,
    /// `(producer id, output index)`; every operator has exactly one output.
    pub inputs: Vec<(NodeId, usize)>,
    pub out_shape: TensorShape,
    pub flop: u64,
    /// Forward node this (backward) node must share a pipeline stage with.
    pub colocate_with: Option<NodeId>,
}

impl OpNode {
    pub fn is_forward(&self) -> bool {
        self.colocate_with.is_none()
    }

    pub fn producers(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.inputs.iter().map(|&(p, _)| p)
    }
}

/// Validated, immutable operator graph.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OpGraph {
    nodes: Vec<OpNode>,
    outputs: Vec<NodeId>,
    consumers: Vec<Vec<NodeId>>,
}

impl OpGraph {
    /// Validates every structural invariant and returns the graph.
    pub fn new(nodes: Vec<OpNode>, outputs: Vec<NodeId>) -> Result<Self, GraphError> {
        validate(&nodes, &outputs)?;
        let mut consumers = vec![Vec::new(); nodes.len()];
        for n in &nodes {
            for p in n.producers() {
                if consumers[p].last() != Some(&n.id) {
                    consumers[p].push(n.id);
                }
            }
        }
        Ok(OpGraph { nodes, outputs, consumers })
    }

    pub fn nodes(&self) -> &[OpNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &OpNode {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn outputs(&self) -> &[NodeId] {
        &self.outputs
    }

    /// Distinct consumers of `id`, in id order.
    pub fn consumers(&self, id: NodeId) -> &[NodeId] {
        &self.consumers[id]
    }

    pub fn total_flop(&self) -> u64 {
        self.nodes.iter().map(|n| n.flop).sum()
    }

    pub fn has_backward(&self) -> bool {
        self.nodes.iter().any(|n| !n.is_forward())
    }

    /// Forward operators in topological order: the sequence the pipeline
    /// passes slice.
    pub fn forward_sequence(&self) -> Vec<NodeId> {
        self.nodes.iter().filter(|n| n.is_forward()).map(|n| n.id).collect()
    }

    /// Forward node a backward node is attached to (itself for forward nodes).
    pub fn anchor(&self, id: NodeId) -> NodeId {
        self.nodes[id].colocate_with.unwrap_or(id)
    }

    /// True when `id` produces the gradient of a parameter, i.e. it is tagged
    /// to live with a `Parameter` node.
    pub fn is_parameter_gradient(&self, id: NodeId) -> bool {
        self.nodes[id]
            .colocate_with
            .is_some_and(|c| self.nodes[c].kind == OpKind::Parameter)
    }
}

/// Output shape and FLOP count implied by `kind` applied to `inputs`.
pub fn infer_op(kind: OpKind, inputs: &[&TensorShape]) -> Result<(Vec<u64>, u64), String> {
    let need = |n: usize| -> Result<(), String> {
        if inputs.len() == n {
            Ok(())
        } else {
            Err(format!("{kind} expects {n} input(s), got {}", inputs.len()))
        }
    };
    let mul = |xs: &[u64]| -> Result<u64, String> {
        xs.iter().try_fold(1u64, |a, &x| a.checked_mul(x)).ok_or_else(|| "flop count overflows".to_string())
    };
    match kind {
        OpKind::Input | OpKind::Parameter => Err("source nodes have no inferred shape".into()),
        OpKind::Matmul => {
            need(2)?;
            let (a, b) = (inputs[0].dims(), inputs[1].dims());
            if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
                return Err(format!("matmul operand shapes {a:?} x {b:?} do not contract"));
            }
            Ok((vec![a[0], b[1]], mul(&[2, a[0], b[1], a[1]])?))
        }
        OpKind::BatchedMatmul => {
            need(2)?;
            let (a, b) = (inputs[0].dims(), inputs[1].dims());
            if a.len() != 3 || b.len() != 3 || a[0] != b[0] || a[2] != b[1] {
                return Err(format!("batched matmul operand shapes {a:?} x {b:?} do not contract"));
            }
            Ok((vec![a[0], a[1], b[2]], mul(&[2, a[0], a[1], b[2], a[2]])?))
        }
        OpKind::Elementwise { arity } => {
            if arity == 0 {
                return Err("elementwise arity must be positive".into());
            }
            need(arity)?;
            let dims = inputs[0].dims();
            if inputs.iter().any(|s| s.dims() != dims) {
                return Err("elementwise operands must share one shape".into());
            }
            Ok((dims.to_vec(), inputs[0].num_elements()))
        }
        OpKind::Reduction { axis } => {
            need(1)?;
            let dims = inputs[0].dims();
            if axis >= dims.len() {
                return Err(format!("reduction axis {axis} out of range for rank {}", dims.len()));
            }
            let mut out = dims.to_vec();
            out.remove(axis);
            Ok((out, inputs[0].num_elements()))
        }
        OpKind::Reshape => Err("reshape output shape must be given explicitly".into()),
    }
}

fn validate(nodes: &[OpNode], outputs: &[NodeId]) -> Result<(), GraphError> {
    for (pos, n) in nodes.iter().enumerate() {
        if n.id != pos {
            return Err(GraphError::NonDenseIds { position: pos, id: n.id });
        }
        for &(p, idx) in &n.inputs {
            if p >= nodes.len() {
                return Err(GraphError::UnknownProducer { node: n.id, producer: p });
            }
            if p >= n.id {
                return Err(GraphError::NotTopological { node: n.id, producer: p });
            }
            if idx != 0 {
                return Err(GraphError::node(n.id, format!("output index {idx} of node {p} does not exist")));
            }
        }
        if n.kind.is_source() {
            if !n.inputs.is_empty() {
                return Err(GraphError::node(n.id, format!("{} nodes take no inputs", n.kind)));
            }
            if n.flop != 0 {
                return Err(GraphError::node(n.id, "source nodes have zero flop"));
            }
        } else if n.inputs.is_empty() {
            return Err(GraphError::node(n.id, "non-source node has no input edge"));
        }
        let in_shapes: Vec<&TensorShape> = n.inputs.iter().map(|&(p, _)| &nodes[p].out_shape).collect();
        match n.kind {
            OpKind::Input | OpKind::Parameter => {}
            OpKind::Reshape => {
                if in_shapes.len() != 1 {
                    return Err(GraphError::node(n.id, "reshape expects 1 input"));
                }
                if in_shapes[0].num_elements() != n.out_shape.num_elements() {
                    return Err(GraphError::node(n.id, "reshape changes the element count"));
                }
                if n.flop != 0 {
                    return Err(GraphError::node(n.id, "reshape has zero flop"));
                }
            }
            kind => {
                let (dims, flop) = infer_op(kind, &in_shapes).map_err(|e| GraphError::node(n.id, e))?;
                if dims != n.out_shape.dims() {
                    return Err(GraphError::node(
                        n.id,
                        format!("declared shape {:?} but operands imply {dims:?}", n.out_shape.dims()),
                    ));
                }
                if flop != n.flop {
                    return Err(GraphError::node(n.id, format!("declared flop {} but shapes imply {flop}", n.flop)));
                }
            }
        }
        if let Some(c) = n.colocate_with {
            if c >= nodes.len() || c == n.id {
                return Err(GraphError::node(n.id, format!("colocate_with references invalid node {c}")));
            }
            if nodes[c].colocate_with.is_some() {
                return Err(GraphError::node(n.id, format!("colocate_with target {c} is itself a backward node")));
            }
        }
    }
    for &o in outputs {
        if o >= nodes.len() {
            return Err(GraphError::UnknownOutput(o));
        }
    }
    Ok(())
}

/// Incremental constructor that infers shapes and FLOPs.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<OpNode>,
    colocate: Option<NodeId>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &TensorShape {
        &self.nodes[id].out_shape
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id].kind
    }

    /// Tags every node added until the next call with `colocate_with = anchor`.
    pub fn set_colocation(&mut self, anchor: Option<NodeId>) {
        self.colocate = anchor;
    }

    fn push(&mut self, kind: OpKind, inputs: Vec<NodeId>, out_shape: TensorShape, flop: u64) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(OpNode {
            id,
            kind,
            inputs: inputs.into_iter().map(|p| (p, 0)).collect(),
            out_shape,
            flop,
            colocate_with: self.colocate,
        });
        id
    }

    pub fn input(&mut self, shape: TensorShape) -> NodeId {
        self.push(OpKind::Input, vec![], shape, 0)
    }

    pub fn parameter(&mut self, shape: TensorShape) -> NodeId {
        self.push(OpKind::Parameter, vec![], shape, 0)
    }

    pub fn op(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId, GraphError> {
        let id = self.nodes.len();
        let shapes: Vec<&TensorShape> = inputs.iter().map(|&p| &self.nodes[p].out_shape).collect();
        let (dims, flop) = infer_op(kind, &shapes).map_err(|e| GraphError::node(id, e))?;
        let elem = shapes[0].elem_bytes();
        let shape = TensorShape::new(dims, elem)?;
        Ok(self.push(kind, inputs.to_vec(), shape, flop))
    }

    pub fn reshape(&mut self, input: NodeId, dims: Vec<u64>) -> Result<NodeId, GraphError> {
        let elem = self.nodes[input].out_shape.elem_bytes();
        let shape = TensorShape::new(dims, elem)?;
        Ok(self.push(OpKind::Reshape, vec![input], shape, 0))
    }

    pub fn finish(self, outputs: Vec<NodeId>) -> Result<OpGraph, GraphError> {
        OpGraph::new(self.nodes, outputs)
    }
}
