//! Synthetic model builders.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{GraphBuilder, GraphError, NodeId, OpGraph, OpKind, TensorShape};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MlpConfig {
    pub layers: u64,
    pub batch: u64,
    pub hidden: u64,
    pub elem_bytes: u32,
    pub backward: bool,
}

impl MlpConfig {
    pub fn new(layers: u64, batch: u64, hidden: u64) -> Self {
        MlpConfig { layers, batch, hidden, elem_bytes: 4, backward: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransformerConfig {
    pub blocks: u64,
    pub batch: u64,
    pub seq: u64,
    pub hidden: u64,
    pub heads: u64,
    pub elem_bytes: u32,
    pub backward: bool,
}

impl TransformerConfig {
    pub fn new(blocks: u64, batch: u64, seq: u64, hidden: u64, heads: u64) -> Self {
        TransformerConfig { blocks, batch, seq, hidden, heads, elem_bytes: 4, backward: false }
    }
}

fn positive(args: &[(&str, u64)]) -> Result<(), GraphError> {
    for (name, v) in args {
        if *v == 0 {
            return Err(GraphError::InvalidArguments(format!("{name} must be >= 1")));
        }
    }
    Ok(())
}

/// `layers` x (weight, matmul, activation) on a `[batch, hidden]` input:
/// `3 * layers + 1` nodes.
pub fn build_mlp(num_layers: u64, batch: u64, hidden: u64) -> Result<OpGraph, GraphError> {
    build_mlp_with(MlpConfig::new(num_layers, batch, hidden))
}

pub fn build_mlp_with(cfg: MlpConfig) -> Result<OpGraph, GraphError> {
    positive(&[("num_layers", cfg.layers), ("batch", cfg.batch), ("hidden", cfg.hidden)])?;
    let mut b = GraphBuilder::new();
    let mut x = b.input(TensorShape::new(vec![cfg.batch, cfg.hidden], cfg.elem_bytes)?);
    for _ in 0..cfg.layers {
        let w = b.parameter(TensorShape::new(vec![cfg.hidden, cfg.hidden], cfg.elem_bytes)?);
        let h = b.op(OpKind::Matmul, &[x, w])?;
        x = b.op(OpKind::Elementwise { arity: 1 }, &[h])?;
    }
    let g = b.finish(vec![x])?;
    if cfg.backward {
        append_backward(&g)
    } else {
        Ok(g)
    }
}

pub fn build_transformer_blocks(
    num_blocks: u64,
    batch: u64,
    seq: u64,
    hidden: u64,
    heads: u64,
) -> Result<OpGraph, GraphError> {
    build_transformer_with(TransformerConfig::new(num_blocks, batch, seq, hidden, heads))
}

/// Stack of attention + MLP blocks over a `[batch*seq, hidden]` activation.
///
/// Per block (22 nodes): Q/K/V projections, head-split reshapes, two
/// attention batched matmuls with a softmax between them, head-merge reshape,
/// output projection, residual add, 4x MLP with activation, residual add.
pub fn build_transformer_with(cfg: TransformerConfig) -> Result<OpGraph, GraphError> {
    positive(&[
        ("num_blocks", cfg.blocks),
        ("batch", cfg.batch),
        ("seq", cfg.seq),
        ("hidden", cfg.hidden),
        ("heads", cfg.heads),
    ])?;
    if !cfg.hidden.is_multiple_of(cfg.heads) {
        return Err(GraphError::InvalidArguments(format!(
            "hidden {} is not divisible by heads {}",
            cfg.hidden, cfg.heads
        )));
    }
    let e = cfg.elem_bytes;
    let tokens = checked(cfg.batch, cfg.seq)?;
    let bh = checked(cfg.batch, cfg.heads)?;
    let (h, s) = (cfg.hidden, cfg.seq);
    let dh = h / cfg.heads;
    let ffn = checked(4, h)?;

    let mut b = GraphBuilder::new();
    let mut x = b.input(TensorShape::new(vec![tokens, h], e)?);
    for _ in 0..cfg.blocks {
        let proj = |b: &mut GraphBuilder, src: NodeId, out: u64| -> Result<NodeId, GraphError> {
            let in_dim = b.shape(src).dims()[1];
            let w = b.parameter(TensorShape::new(vec![in_dim, out], e)?);
            b.op(OpKind::Matmul, &[src, w])
        };
        let q = proj(&mut b, x, h)?;
        let k = proj(&mut b, x, h)?;
        let v = proj(&mut b, x, h)?;
        let qr = b.reshape(q, vec![bh, s, dh])?;
        let kr = b.reshape(k, vec![bh, dh, s])?;
        let vr = b.reshape(v, vec![bh, s, dh])?;
        let scores = b.op(OpKind::BatchedMatmul, &[qr, kr])?;
        let probs = b.op(OpKind::Elementwise { arity: 1 }, &[scores])?;
        let ctx = b.op(OpKind::BatchedMatmul, &[probs, vr])?;
        let merged = b.reshape(ctx, vec![tokens, h])?;
        let out = proj(&mut b, merged, h)?;
        let res1 = b.op(OpKind::Elementwise { arity: 2 }, &[x, out])?;
        let up = proj(&mut b, res1, ffn)?;
        let act = b.op(OpKind::Elementwise { arity: 1 }, &[up])?;
        let down = proj(&mut b, act, h)?;
        x = b.op(OpKind::Elementwise { arity: 2 }, &[res1, down])?;
    }
    let g = b.finish(vec![x])?;
    if cfg.backward {
        append_backward(&g)
    } else {
        Ok(g)
    }
}

fn checked(a: u64, b: u64) -> Result<u64, GraphError> {
    a.checked_mul(b).ok_or_else(|| GraphError::InvalidArguments(format!("{a} * {b} overflows")))
}

/// Appends a mirrored backward pass to a forward-only graph.
///
/// Each backward operator is tagged with the forward operator it differentiates;
/// operators producing (or accumulating) a parameter's gradient are tagged with
/// the parameter itself. Transposes are modelled as reshapes. One gradient seed
/// `Input` is added per graph output. The returned graph's outputs are the
/// forward outputs followed by every parameter gradient.
pub fn append_backward(forward: &OpGraph) -> Result<OpGraph, GraphError> {
    if forward.has_backward() {
        return Err(GraphError::InvalidArguments("graph already has backward nodes".into()));
    }
    let mut b = GraphBuilder::new();
    for n in forward.nodes() {
        let id = match n.kind {
            OpKind::Input => b.input(n.out_shape.clone()),
            OpKind::Parameter => b.parameter(n.out_shape.clone()),
            OpKind::Reshape => b.reshape(n.inputs[0].0, n.out_shape.dims().to_vec())?,
            kind => b.op(kind, &n.producers().collect::<Vec<_>>())?,
        };
        debug_assert_eq!(id, n.id);
    }

    let mut grads: Vec<Option<NodeId>> = vec![None; forward.len()];
    for &o in forward.outputs() {
        if grads[o].is_none() {
            b.set_colocation(Some(o));
            grads[o] = Some(b.input(forward.node(o).out_shape.clone()));
        }
    }

    fn accumulate(
        b: &mut GraphBuilder,
        grads: &mut [Option<NodeId>],
        target: NodeId,
        g: NodeId,
    ) -> Result<(), GraphError> {
        grads[target] = Some(match grads[target] {
            None => g,
            Some(prev) => {
                b.set_colocation(Some(target));
                b.op(OpKind::Elementwise { arity: 2 }, &[prev, g])?
            }
        });
        Ok(())
    }

    for n in forward.nodes().iter().rev() {
        if n.kind.is_source() {
            continue;
        }
        let Some(dout) = grads[n.id] else { continue };
        let needs = |p: NodeId| forward.node(p).kind != OpKind::Input;
        let anchor_for = |p: NodeId| {
            if forward.node(p).kind == OpKind::Parameter {
                p
            } else {
                n.id
            }
        };
        match n.kind {
            OpKind::Matmul | OpKind::BatchedMatmul => {
                let (a, w) = (n.inputs[0].0, n.inputs[1].0);
                let transposed = |b: &GraphBuilder, t: NodeId| -> Vec<u64> {
                    let mut d = b.shape(t).dims().to_vec();
                    let r = d.len();
                    d.swap(r - 1, r - 2);
                    d
                };
                if needs(a) {
                    b.set_colocation(Some(anchor_for(a)));
                    let wt_dims = transposed(&b, w);
                    let wt = b.reshape(w, wt_dims)?;
                    let da = b.op(n.kind, &[dout, wt])?;
                    accumulate(&mut b, &mut grads, a, da)?;
                }
                if needs(w) {
                    b.set_colocation(Some(anchor_for(w)));
                    let at_dims = transposed(&b, a);
                    let at = b.reshape(a, at_dims)?;
                    let dw = b.op(n.kind, &[at, dout])?;
                    accumulate(&mut b, &mut grads, w, dw)?;
                }
            }
            OpKind::Elementwise { .. } => {
                let mut seen = Vec::new();
                for p in n.producers() {
                    if !needs(p) || seen.contains(&p) {
                        continue;
                    }
                    seen.push(p);
                    b.set_colocation(Some(anchor_for(p)));
                    let dp = b.op(OpKind::Elementwise { arity: 2 }, &[dout, p])?;
                    accumulate(&mut b, &mut grads, p, dp)?;
                }
            }
            OpKind::Reshape => {
                let p = n.inputs[0].0;
                if needs(p) {
                    b.set_colocation(Some(anchor_for(p)));
                    let dp = b.reshape(dout, forward.node(p).out_shape.dims().to_vec())?;
                    accumulate(&mut b, &mut grads, p, dp)?;
                }
            }
            OpKind::Reduction { .. } => {
                return Err(GraphError::InvalidArguments(format!(
                    "node {}: backward of a reduction is not supported",
                    n.id
                )));
            }
            OpKind::Input | OpKind::Parameter => unreachable!(),
        }
    }

    let mut outputs = forward.outputs().to_vec();
    outputs.extend(
        forward
            .nodes()
            .iter()
            .filter(|n| n.kind == OpKind::Parameter)
            .filter_map(|n| grads[n.id]),
    );
    b.finish(outputs)
}

/// Small random forward DAG of matmuls and elementwise ops over `[4, w]`
/// activations. Deterministic in `seed`.
pub fn random_graph(seed: u64, num_ops: usize) -> Result<OpGraph, GraphError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let widths = [2u64, 4, 8];
    let batch = 4;
    let mut b = GraphBuilder::new();
    let first = widths[rng.gen_range(0..widths.len())];
    let x = b.input(TensorShape::f32(&[batch, first])?);
    let mut live = vec![x];
    for _ in 0..num_ops {
        let window = &live[live.len().saturating_sub(3)..];
        let src = window[rng.gen_range(0..window.len())];
        let roll = rng.gen_range(0..10);
        let id = if roll < 5 {
            let out = widths[rng.gen_range(0..widths.len())];
            let in_dim = b.shape(src).dims()[1];
            let w = b.parameter(TensorShape::f32(&[in_dim, out])?);
            b.op(OpKind::Matmul, &[src, w])?
        } else {
            let partner = live
                .iter()
                .rev()
                .copied()
                .find(|&p| p != src && b.shape(p) == b.shape(src) && b.kind(p) != OpKind::Parameter);
            match (roll >= 8, partner) {
                (true, Some(p)) => b.op(OpKind::Elementwise { arity: 2 }, &[p, src])?,
                _ => b.op(OpKind::Elementwise { arity: 1 }, &[src])?,
            }
        };
        live.push(id);
    }
    let last = *live.last().expect("live is never empty");
    b.finish(vec![last])
}
