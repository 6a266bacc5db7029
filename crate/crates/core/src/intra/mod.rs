//! Intra-operator pass: per-stage sharding selection.
//!
//! A stage is extracted into its own graph, computationally trivial
//! operators are folded into an operand, the remaining operators get a
//! strategy table built from their parallel algorithms and the resharding
//! costs between them, and the table is solved exactly. Compute cost stays
//! out of the objective (every strategy divides work evenly); stage latency
//! adds it afterwards.

mod solver;

pub use solver::{solve, EdgeMatrix, Solution, StrategyTable, DEFAULT_BUDGET};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{memory_fits, memory_required, stage_memory, CostError, CostModel, StageCostReport};
use crate::graph::{GraphError, NodeId, OpGraph, OpKind, OpNode};
use crate::mesh::{logical_views, LogicalMesh, SubmeshShape};
use crate::sharding::{
    enumerate_algorithms, propagate_reshape, reduce_spec, resharding_cost, Collective, CollectiveKind, ParallelAlgorithm,
    ShardingError, ShardingSpec,
};
use crate::time::Time;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IntraError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Sharding(#[from] ShardingError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error("no parallel algorithm for node(s) {0:?}")]
    NoAlgorithms(Vec<NodeId>),
}

/// A stage's operators as a standalone graph. Values produced outside the
/// stage enter through placeholder `Input` nodes placed first.
#[derive(Clone, Debug, PartialEq)]
pub struct StageGraph {
    pub graph: OpGraph,
    /// Global id of every local node (for placeholders, the external producer).
    pub global: Vec<NodeId>,
    pub placeholder: Vec<bool>,
}

impl StageGraph {
    /// Extracts `members` (any order) from `full`.
    pub fn extract(full: &OpGraph, members: &[NodeId]) -> Result<Self, IntraError> {
        let mut members = members.to_vec();
        members.sort_unstable();
        members.dedup();
        let mut local: Vec<Option<usize>> = vec![None; full.len()];
        let mut in_stage = vec![false; full.len()];
        for &m in &members {
            in_stage[m] = true;
        }
        let mut externals = Vec::new();
        for &m in &members {
            for p in full.node(m).producers() {
                if !in_stage[p] && local[p].is_none() {
                    local[p] = Some(externals.len());
                    externals.push(p);
                }
            }
        }
        let offset = externals.len();
        for (i, &m) in members.iter().enumerate() {
            local[m] = Some(offset + i);
        }
        let mut nodes = Vec::with_capacity(offset + members.len());
        for (i, &p) in externals.iter().enumerate() {
            nodes.push(OpNode {
                id: i,
                kind: OpKind::Input,
                inputs: vec![],
                out_shape: full.node(p).out_shape.clone(),
                flop: 0,
                colocate_with: None,
            });
        }
        for (i, &m) in members.iter().enumerate() {
            let n = full.node(m);
            nodes.push(OpNode {
                id: offset + i,
                kind: n.kind,
                inputs: n.inputs.iter().map(|&(p, o)| (local[p].expect("mapped"), o)).collect(),
                out_shape: n.out_shape.clone(),
                flop: n.flop,
                colocate_with: n.colocate_with.filter(|&c| in_stage[c]).map(|c| local[c].expect("mapped")),
            });
        }
        let outputs: Vec<NodeId> = members
            .iter()
            .filter(|&&m| full.outputs().contains(&m) || full.consumers(m).iter().any(|&c| !in_stage[c]))
            .map(|&m| local[m].expect("mapped"))
            .collect();
        let graph = OpGraph::new(nodes, outputs)?;
        let mut global = externals;
        global.extend(&members);
        let placeholder = (0..global.len()).map(|i| i < offset).collect();
        Ok(StageGraph { graph, global, placeholder })
    }

    /// The whole graph as one stage.
    pub fn whole(full: &OpGraph) -> Self {
        StageGraph { graph: full.clone(), global: (0..full.len()).collect(), placeholder: vec![false; full.len()] }
    }

    pub fn members(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.global.len()).filter(|&v| !self.placeholder[v])
    }

    pub fn flop(&self, forward: bool) -> u64 {
        self.members().map(|v| self.graph.node(v)).filter(|n| n.is_forward() == forward).map(|n| n.flop).sum()
    }
}

/// Which node each trivial operator was folded into.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MergeMap {
    /// Representative of every node (itself for non-trivial nodes).
    pub rep: Vec<NodeId>,
    /// Representatives in id order; these are the program's variables.
    pub reps: Vec<NodeId>,
    /// For merged nodes, the operand position whose layout they inherit.
    pub operand: Vec<Option<usize>>,
    /// Longest-path depth from the sources.
    pub depth: Vec<usize>,
}

impl MergeMap {
    pub fn rep_index(&self, v: NodeId) -> usize {
        self.reps.binary_search(&self.rep[v]).expect("rep is listed")
    }
}

/// Folds each elementwise, reduction and reshape operator into its deepest
/// operand (first operand on ties), depth being the longest distance from a
/// source.
pub fn merge_trivial(graph: &OpGraph) -> MergeMap {
    let n = graph.len();
    let mut depth = vec![0usize; n];
    let mut rep: Vec<NodeId> = (0..n).collect();
    let mut operand = vec![None; n];
    for node in graph.nodes() {
        depth[node.id] = node.producers().map(|p| depth[p] + 1).max().unwrap_or(0);
        if node.kind.is_trivial() {
            let mut best = 0;
            for (j, (p, _)) in node.inputs.iter().enumerate() {
                if depth[*p] > depth[node.inputs[best].0] {
                    best = j;
                }
            }
            operand[node.id] = Some(best);
            rep[node.id] = rep[node.inputs[best].0];
        }
    }
    let reps = (0..n).filter(|&v| rep[v] == v).collect();
    MergeMap { rep, reps, operand, depth }
}

/// Every node is its own representative.
pub fn no_merge(graph: &OpGraph) -> MergeMap {
    let n = graph.len();
    let mut depth = vec![0usize; n];
    for node in graph.nodes() {
        depth[node.id] = node.producers().map(|p| depth[p] + 1).max().unwrap_or(0);
    }
    MergeMap { rep: (0..n).collect(), reps: (0..n).collect(), operand: vec![None; n], depth }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntraOptions {
    pub merge: bool,
    pub rewrite: bool,
    pub budget: u64,
}

impl Default for IntraOptions {
    fn default() -> Self {
        IntraOptions { merge: true, rewrite: true, budget: DEFAULT_BUDGET }
    }
}

/// The program for one stage on one logical mesh, with everything needed to
/// turn a solution back into per-node layouts.
#[derive(Clone, Debug)]
pub struct StageIlp {
    pub merge: MergeMap,
    pub algorithms: Vec<Vec<ParallelAlgorithm>>,
    /// `node_specs[v][i]`: output layout of node `v` when its representative
    /// runs strategy `i`.
    pub node_specs: Vec<Vec<ShardingSpec>>,
    /// `node_comm[v][i]`: collectives node `v` itself issues under strategy `i`.
    pub node_comm: Vec<Vec<Vec<Collective>>>,
    pub table: StrategyTable,
    /// Edges between different representatives: `(producer, consumer, operand)`.
    pub cross_edges: Vec<(NodeId, NodeId, usize)>,
}

/// Builds the strategy table of `graph` on `mesh`.
pub fn build_ilp(graph: &OpGraph, mesh: &LogicalMesh, cm: &CostModel, merge: MergeMap) -> Result<StageIlp, IntraError> {
    let n = graph.len();
    let shapes = |v: NodeId| &graph.node(v).out_shape;
    let mut algorithms = Vec::with_capacity(merge.reps.len());
    let mut missing = Vec::new();
    for &r in &merge.reps {
        let node = graph.node(r);
        let operands: Vec<_> = node.producers().map(shapes).collect();
        let algos = enumerate_algorithms(node, &operands, mesh)?;
        if algos.is_empty() {
            missing.push(r);
        }
        algorithms.push(algos);
    }
    if !missing.is_empty() {
        return Err(IntraError::NoAlgorithms(missing));
    }
    let k: Vec<usize> = algorithms.iter().map(Vec::len).collect();

    let mut node_specs: Vec<Vec<ShardingSpec>> = vec![Vec::new(); n];
    let mut node_comm: Vec<Vec<Vec<Collective>>> = vec![Vec::new(); n];
    let mut node_costs: Vec<Vec<Time>> = k.iter().map(|&kv| vec![Time::ZERO; kv]).collect();
    for node in graph.nodes() {
        let v = node.id;
        let r = merge.rep_index(v);
        for i in 0..k[r] {
            let (spec, comm) = if merge.rep[v] == v {
                let a = &algorithms[r][i];
                (a.output_spec.clone(), a.comm.clone())
            } else {
                let j = merge.operand[v].expect("merged node has an operand");
                let src = node_specs[node.inputs[j].0][i].clone();
                let in_shape = shapes(node.inputs[j].0);
                match node.kind {
                    OpKind::Elementwise { .. } => (src, vec![]),
                    OpKind::Reduction { axis } => reduce_spec(&src, axis, &node.out_shape, mesh),
                    OpKind::Reshape => match propagate_reshape(in_shape, &node.out_shape, &src, mesh) {
                        Some(s) => (s, vec![]),
                        None => {
                            let rr = ShardingSpec::replicated(in_shape.rank());
                            (ShardingSpec::replicated(node.out_shape.rank()), resharding_cost(&src, &rr, in_shape, mesh)?)
                        }
                    },
                    _ => unreachable!("only trivial nodes merge"),
                }
            };
            node_costs[r][i] += cm.collectives(&comm, mesh);
            node_specs[v].push(spec);
            node_comm[v].push(comm);
        }
    }

    let required = |c: NodeId, j: usize, i: usize, node_specs: &Vec<Vec<ShardingSpec>>| -> ShardingSpec {
        if merge.rep[c] == c {
            algorithms[merge.rep_index(c)][i].input_specs[j].clone()
        } else {
            node_specs[c][i].clone()
        }
    };
    let mut table = StrategyTable {
        compute_costs: k.iter().map(|&kv| vec![Time::ZERO; kv]).collect(),
        node_costs,
        edges: vec![],
    };
    let mut cross_edges = Vec::new();
    for node in graph.nodes() {
        let c = node.id;
        let rc = merge.rep_index(c);
        for (j, &(p, _)) in node.inputs.iter().enumerate() {
            let rp = merge.rep_index(p);
            if rp == rc {
                if merge.operand[c] == Some(j) {
                    continue;
                }
                for i in 0..k[rc] {
                    let need = required(c, j, i, &node_specs);
                    table.node_costs[rc][i] += cm.resharding_time(&node_specs[p][i], &need, shapes(p), mesh)?;
                }
            } else {
                let mut m = Vec::with_capacity(k[rp] * k[rc]);
                for a in 0..k[rp] {
                    for b in 0..k[rc] {
                        let need = required(c, j, b, &node_specs);
                        m.push(cm.resharding_time(&node_specs[p][a], &need, shapes(p), mesh)?);
                    }
                }
                table.add_edge(rp, rc, m);
                cross_edges.push((p, c, j));
            }
        }
    }
    Ok(StageIlp { merge, algorithms, node_specs, node_comm, table, cross_edges })
}

/// Layout decision for one stage node.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodePlan {
    /// Global node id.
    pub node: NodeId,
    pub spec: ShardingSpec,
    /// Algorithm label for representatives.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub algorithm: Option<String>,
    /// Global id of the representative this node was folded into.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub merged_into: Option<NodeId>,
    /// True for values produced by an earlier stage.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub external: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub comm: Vec<Collective>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReshardPlan {
    pub producer: NodeId,
    pub consumer: NodeId,
    pub from: ShardingSpec,
    pub to: ShardingSpec,
    pub collectives: Vec<Collective>,
}

/// An all-reduce split into reduce-scatter plus all-gather.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rewrite {
    pub node: NodeId,
    pub all_reduce: Collective,
    pub reduce_scatter: Collective,
    pub all_gather: Collective,
    /// Per-device bytes kept after the reduce-scatter.
    pub sharded_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntraPlan {
    pub view: [u32; 2],
    /// Chosen strategy per representative, in representative order.
    pub choice: Vec<usize>,
    pub objective: Time,
    pub certified: bool,
    pub explored: u64,
    pub nodes: Vec<NodePlan>,
    pub resharding: Vec<ReshardPlan>,
    #[serde(default)]
    pub rewrites: Vec<Rewrite>,
}

impl IntraPlan {
    pub fn spec_of(&self, global: NodeId) -> Option<&ShardingSpec> {
        self.nodes.iter().find(|n| n.node == global && !n.external).map(|n| &n.spec)
    }

    /// Layout the stage expects for a value produced elsewhere.
    pub fn external_spec(&self, global: NodeId) -> Option<&ShardingSpec> {
        self.nodes.iter().find(|n| n.node == global && n.external).map(|n| &n.spec)
    }

    /// Per-device bytes of tensors left replicated by all-reduces.
    pub fn replicated_bytes(&self) -> u64 {
        let all: u64 = self
            .nodes
            .iter()
            .flat_map(|n| &n.comm)
            .filter(|c| c.kind == CollectiveKind::AllReduce)
            .map(|c| c.bytes)
            .sum();
        let saved: u64 = self.rewrites.iter().map(|r| r.all_reduce.bytes - r.sharded_bytes).sum();
        all - saved
    }
}

/// Solves a built program and expands the solution to every stage node.
pub fn solve_ilp(stage: &StageGraph, ilp: &StageIlp, mesh: &LogicalMesh, budget: u64) -> IntraPlan {
    let sol = solve(&ilp.table, budget);
    let g = &stage.graph;
    let strategy = |v: NodeId| sol.choice[ilp.merge.rep_index(v)];
    let nodes = g
        .nodes()
        .iter()
        .map(|n| {
            let v = n.id;
            let i = strategy(v);
            let is_rep = ilp.merge.rep[v] == v;
            NodePlan {
                node: stage.global[v],
                spec: ilp.node_specs[v][i].clone(),
                algorithm: is_rep.then(|| ilp.algorithms[ilp.merge.rep_index(v)][i].name.clone()),
                merged_into: (!is_rep).then(|| stage.global[ilp.merge.rep[v]]),
                external: stage.placeholder[v],
                comm: ilp.node_comm[v][i].clone(),
            }
        })
        .collect();
    let mut resharding = Vec::new();
    for &(p, c, j) in &ilp.cross_edges {
        let from = ilp.node_specs[p][strategy(p)].clone();
        let to = if ilp.merge.rep[c] == c {
            ilp.algorithms[ilp.merge.rep_index(c)][strategy(c)].input_specs[j].clone()
        } else {
            ilp.node_specs[c][strategy(c)].clone()
        };
        if from != to {
            let collectives =
                resharding_cost(&from, &to, &g.node(p).out_shape, mesh).expect("specs were validated when building");
            resharding.push(ReshardPlan { producer: stage.global[p], consumer: stage.global[c], from, to, collectives });
        }
    }
    IntraPlan {
        view: mesh.shape,
        choice: sol.choice,
        objective: sol.objective,
        certified: sol.certified,
        explored: sol.explored,
        nodes,
        resharding,
        rewrites: vec![],
    }
}

/// Splits every all-reduce issued by a parameter-gradient node into a
/// reduce-scatter and an all-gather. The modelled time and the objective are
/// left unchanged: the pair moves the same ring volume.
pub fn post_ilp_rewrite(mut plan: IntraPlan, stage: &StageGraph, mesh: &LogicalMesh) -> IntraPlan {
    let mut rewrites = Vec::new();
    for (v, np) in plan.nodes.iter().enumerate() {
        if np.external || !stage.graph.is_parameter_gradient(v) {
            continue;
        }
        for c in np.comm.iter().filter(|c| c.kind == CollectiveKind::AllReduce) {
            let d: u64 = c.axes.iter().map(|&a| mesh.extent(a) as u64).product();
            let with = |kind| Collective { kind, ..c.clone() };
            rewrites.push(Rewrite {
                node: np.node,
                all_reduce: c.clone(),
                reduce_scatter: with(CollectiveKind::ReduceScatter),
                all_gather: with(CollectiveKind::AllGather),
                sharded_bytes: c.bytes / d.max(1),
            });
        }
    }
    plan.rewrites = rewrites;
    plan
}

/// One logical view of a stage, solved and costed.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewEval {
    pub view: LogicalMesh,
    pub plan: IntraPlan,
    /// Cost fields; memory is independent of the in-flight count.
    pub report: StageCostReport,
}

/// Solves the stage on `view` and fills in the cost report.
pub fn evaluate_view(
    stage: &StageGraph,
    view: &LogicalMesh,
    cm: &CostModel,
    opts: &IntraOptions,
) -> Result<ViewEval, IntraError> {
    let g = &stage.graph;
    let merge = if opts.merge { merge_trivial(g) } else { no_merge(g) };
    let ilp = build_ilp(g, view, cm, merge)?;
    let mut plan = solve_ilp(stage, &ilp, view, opts.budget);
    if opts.rewrite {
        plan = post_ilp_rewrite(plan, stage, view);
    }
    // Communication is attributed to the pass of the representative that
    // issues it; pair terms go to the later representative.
    let (mut comm_fwd, mut comm_bwd) = (Time::ZERO, Time::ZERO);
    let fwd_rep = |r: usize| g.node(ilp.merge.reps[r]).is_forward();
    for r in 0..ilp.table.num_nodes() {
        let c = ilp.table.node_costs[r][plan.choice[r]];
        if fwd_rep(r) {
            comm_fwd += c;
        } else {
            comm_bwd += c;
        }
    }
    for e in &ilp.table.edges {
        let c = e.costs[plan.choice[e.u] * ilp.table.k(e.v) + plan.choice[e.v]];
        if fwd_rep(e.v) {
            comm_fwd += c;
        } else {
            comm_bwd += c;
        }
    }
    debug_assert_eq!(comm_fwd + comm_bwd, plan.objective);
    let devices = view.num_devices();
    let comp_fwd = cm.compute_time(stage.flop(true), devices);
    let comp_bwd = cm.compute_time(stage.flop(false), devices);
    let members: Vec<NodeId> = stage.members().collect();
    let specs: Vec<ShardingSpec> = plan.nodes.iter().map(|n| n.spec.clone()).collect();
    let mem = stage_memory(g, &members, &|v| specs[v].clone(), view, 1, u64::MAX);
    let report = StageCostReport {
        t_compute: comp_fwd + comp_bwd,
        t_comm: plan.objective,
        t_total: comp_fwd + comp_bwd + plan.objective,
        t_fwd: comp_fwd + comm_fwd,
        t_bwd: comp_bwd + comm_bwd,
        mem_stage: mem.mem_stage,
        mem_act: mem.mem_act,
    };
    Ok(ViewEval { view: view.clone(), plan, report })
}

/// Solves the stage on every logical view of `shape`.
pub fn profile_views(
    stage: &StageGraph,
    shape: SubmeshShape,
    cm: &CostModel,
    opts: &IntraOptions,
) -> Result<Vec<ViewEval>, IntraError> {
    logical_views(shape, &cm.cluster).iter().map(|v| evaluate_view(stage, v, cm, opts)).collect()
}

/// How far the least demanding view misses the memory budget.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryViolation {
    pub required: u64,
    pub available: u64,
    pub view: [u32; 2],
    pub s: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TIntra {
    Feasible(ViewEval),
    Infeasible(MemoryViolation),
}

impl TIntra {
    pub fn time(&self) -> Option<Time> {
        match self {
            TIntra::Feasible(e) => Some(e.report.t_total),
            TIntra::Infeasible(_) => None,
        }
    }
}

/// Fastest view that fits `s` in-flight microbatches; the earliest view wins
/// ties.
pub fn pick_view(evals: &[ViewEval], s: u64, device_memory: u64) -> TIntra {
    let mut best: Option<&ViewEval> = None;
    let mut tightest: Option<MemoryViolation> = None;
    for e in evals {
        if memory_fits(e.report.mem_stage, e.report.mem_act, s, device_memory) {
            if best.is_none_or(|b| e.report.t_total < b.report.t_total) {
                best = Some(e);
            }
        } else {
            let required = memory_required(e.report.mem_stage, e.report.mem_act, s);
            if tightest.is_none_or(|t| required < t.required) {
                tightest = Some(MemoryViolation { required, available: device_memory, view: e.view.shape, s });
            }
        }
    }
    match (best, tightest) {
        (Some(b), _) => TIntra::Feasible(b.clone()),
        (None, Some(t)) => TIntra::Infeasible(t),
        (None, None) => TIntra::Infeasible(MemoryViolation { required: 0, available: device_memory, view: [0, 0], s }),
    }
}

/// Lowest latency of the stage on a submesh of `shape` with `s` microbatches
/// in flight, or the tightest memory violation.
pub fn t_intra(
    stage: &StageGraph,
    shape: SubmeshShape,
    s: u64,
    cm: &CostModel,
    opts: &IntraOptions,
) -> Result<TIntra, IntraError> {
    let evals = profile_views(stage, shape, cm, opts)?;
    Ok(pick_view(&evals, s, cm.cluster.device_memory))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_mlp, GraphBuilder, MlpConfig, TensorShape};
    use crate::mesh::ClusterMesh;

    fn cm(n: u32, m: u32) -> CostModel {
        let mut c = ClusterMesh::new(n, m, 1e9, 1e8).unwrap();
        c.device_flops = 1e9;
        CostModel::new(c)
    }

    #[test]
    fn chain_merges_into_matmul() {
        let mut b = GraphBuilder::new();
        let x = b.input(TensorShape::f32(&[4, 4]).unwrap());
        let w = b.parameter(TensorShape::f32(&[4, 4]).unwrap());
        let y = b.op(OpKind::Matmul, &[x, w]).unwrap();
        let z = b.op(OpKind::Elementwise { arity: 1 }, &[y]).unwrap();
        let g = b.finish(vec![z]).unwrap();
        let m = merge_trivial(&g);
        assert_eq!(m.rep[z], y);
        assert_eq!(m.reps, vec![x, w, y]);
    }

    #[test]
    fn diamond_merges_into_deepest_operand() {
        let mut b = GraphBuilder::new();
        let s = TensorShape::f32(&[4, 4]).unwrap();
        let x = b.input(s.clone());
        let w1 = b.parameter(s.clone());
        let a = b.op(OpKind::Matmul, &[x, w1]).unwrap(); // depth 1
        let w2 = b.parameter(s.clone());
        let c = b.op(OpKind::Matmul, &[a, w2]).unwrap(); // depth 2
        let w3 = b.parameter(s);
        let d = b.op(OpKind::Matmul, &[c, w3]).unwrap(); // depth 3
        let e = b.op(OpKind::Elementwise { arity: 2 }, &[c, d]).unwrap();
        let g = b.finish(vec![e]).unwrap();
        let m = merge_trivial(&g);
        assert_eq!(m.depth[c], 2);
        assert_eq!(m.depth[d], 3);
        assert_eq!(m.rep[e], d);
    }

    #[test]
    fn no_trivial_ops_is_identity() {
        let mut b = GraphBuilder::new();
        let x = b.input(TensorShape::f32(&[4, 4]).unwrap());
        let w = b.parameter(TensorShape::f32(&[4, 4]).unwrap());
        let y = b.op(OpKind::Matmul, &[x, w]).unwrap();
        let g = b.finish(vec![y]).unwrap();
        assert_eq!(merge_trivial(&g), no_merge(&g));
    }

    #[test]
    fn extraction_adds_placeholders_first() {
        let g = build_mlp(2, 8, 4).unwrap();
        let st = StageGraph::extract(&g, &[4, 5, 6]).unwrap();
        assert_eq!(st.global, vec![3, 4, 5, 6]);
        assert_eq!(st.placeholder, vec![true, false, false, false]);
        assert_eq!(st.graph.node(0).kind, OpKind::Input);
        assert_eq!(st.graph.outputs(), &[3]);
    }

    #[test]
    fn objective_is_self_consistent_and_single_device_is_sequential() {
        let g = build_mlp(2, 8, 4).unwrap();
        let st = StageGraph::whole(&g);
        let c = cm(1, 1);
        let eval = evaluate_view(&st, &LogicalMesh::uniform(1, 1, 1e9), &c, &IntraOptions::default()).unwrap();
        assert_eq!(eval.report.t_comm, Time::ZERO);
        assert_eq!(eval.report.t_total, c.compute_time(g.total_flop(), 1));
    }

    #[test]
    fn two_matmul_mlp_on_two_devices_pays_one_all_reduce() {
        // Column split then row split: the second matmul contracts over the
        // split dimension and all-reduces its output once.
        let g = build_mlp(2, 8, 8).unwrap();
        let st = StageGraph::whole(&g);
        let mut c = cm(1, 2);
        c.cluster.alpha_latency = 1e-6;
        let view = LogicalMesh::uniform(1, 2, 1e9);
        let eval = evaluate_view(&st, &view, &c, &IntraOptions::default()).unwrap();
        let all_reduces: Vec<_> = eval
            .plan
            .nodes
            .iter()
            .flat_map(|n| n.comm.iter())
            .filter(|c| c.kind == CollectiveKind::AllReduce)
            .collect();
        assert!(all_reduces.len() <= 1, "{:?}", eval.plan);
    }

    #[test]
    fn rewrite_keeps_objective_and_shrinks_replicated_bytes() {
        let cfg = MlpConfig { backward: true, ..MlpConfig::new(1, 8, 8) };
        let g = crate::graph::build_mlp_with(cfg).unwrap();
        let st = StageGraph::whole(&g);
        let c = cm(1, 2);
        let view = LogicalMesh::uniform(1, 2, 1e9);
        let base = evaluate_view(&st, &view, &c, &IntraOptions { rewrite: false, ..Default::default() }).unwrap();
        let rewritten = post_ilp_rewrite(base.plan.clone(), &st, &view);
        assert_eq!(rewritten.objective, base.plan.objective);
        assert!(rewritten.replicated_bytes() <= base.plan.replicated_bytes());
        for r in &rewritten.rewrites {
            assert!(r.sharded_bytes < r.all_reduce.bytes);
        }
    }

    #[test]
    fn memory_too_small_is_infeasible() {
        let g = build_mlp(2, 8, 4).unwrap();
        let st = StageGraph::whole(&g);
        let mut c = cm(1, 2);
        c.cluster.device_memory = 16;
        match t_intra(&st, SubmeshShape::new(1, 2), 1, &c, &IntraOptions::default()).unwrap() {
            TIntra::Infeasible(v) => assert!(v.required > 16),
            other => panic!("expected infeasible, got {other:?}"),
        }
    }
}
