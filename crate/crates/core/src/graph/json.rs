//! JSON graph document (format version 1).
//!
//! ```json
//! {"version":1,
//!  "nodes":[{"id":0,"kind":"input","inputs":[],"shape":{"dims":[8,4],"elem_bytes":4},"flop":0}],
//!  "outputs":[0]}
//! ```
//!
//! Kind tokens: `input`, `parameter`, `matmul`, `batched_matmul`, `reshape`,
//! `elementwise:<arity>`, `reduction:<axis>`. Unknown fields are rejected.

use serde::{Deserialize, Serialize};

use super::{GraphError, NodeId, OpGraph, OpKind, OpNode, TensorShape};

pub const GRAPH_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    version: u32,
    nodes: Vec<NodeDoc>,
    outputs: Vec<NodeId>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeDoc {
    id: NodeId,
    kind: String,
    inputs: Vec<(NodeId, usize)>,
    shape: ShapeDoc,
    flop: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    colocate_with: Option<NodeId>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ShapeDoc {
    dims: Vec<u64>,
    elem_bytes: u32,
}

pub fn serialize(graph: &OpGraph) -> Vec<u8> {
    let doc = Document {
        version: GRAPH_FORMAT_VERSION,
        nodes: graph
            .nodes()
            .iter()
            .map(|n| NodeDoc {
                id: n.id,
                kind: n.kind.to_string(),
                inputs: n.inputs.clone(),
                shape: ShapeDoc { dims: n.out_shape.dims().to_vec(), elem_bytes: n.out_shape.elem_bytes() },
                flop: n.flop,
                colocate_with: n.colocate_with,
            })
            .collect(),
        outputs: graph.outputs().to_vec(),
    };
    serde_json::to_vec_pretty(&doc).expect("graph documents always serialize")
}

pub fn parse(bytes: &[u8]) -> Result<OpGraph, GraphError> {
    let doc: Document = serde_json::from_slice(bytes).map_err(|e| GraphError::Malformed(e.to_string()))?;
    if doc.version != GRAPH_FORMAT_VERSION {
        return Err(GraphError::Malformed(format!("unsupported version {}", doc.version)));
    }
    let mut nodes = Vec::with_capacity(doc.nodes.len());
    for n in doc.nodes {
        let kind: OpKind = n.kind.parse().map_err(|e: String| GraphError::InvalidNode { node: n.id, reason: e })?;
        let out_shape = TensorShape::new(n.shape.dims, n.shape.elem_bytes).map_err(|e| GraphError::InvalidNode {
            node: n.id,
            reason: e.to_string(),
        })?;
        nodes.push(OpNode { id: n.id, kind, inputs: n.inputs, out_shape, flop: n.flop, colocate_with: n.colocate_with });
    }
    OpGraph::new(nodes, doc.outputs)
}
