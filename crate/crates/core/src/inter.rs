//! Inter-operator pass: operator clustering, stage slicing and submesh choice.
//!
//! The forward operator sequence is first clustered into `L` contiguous
//! layers. For every layer range and admissible submesh shape the
//! intra-operator pass reports a stage latency per in-flight count `s`.
//! A dynamic program then picks the slicing and shapes minimising
//! `sum t_i + (B - 1) max t_i`, enumerating the bound `t_max` on the slowest
//! stage in increasing order.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{CostModel, StageCostReport};
use crate::graph::{NodeId, OpGraph};
use crate::intra::{pick_view, profile_views, IntraError, IntraOptions, IntraPlan, MemoryViolation, StageGraph, TIntra, ViewEval};
use crate::mesh::{admissible_shapes, cover, ClusterMesh, DeviceId, LogicalMesh, MeshError, SubmeshAssignment, SubmeshShape};
use crate::sharding::ShardingSpec;
use crate::time::Time;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InterError {
    #[error("invalid planner arguments: {0}")]
    InvalidArguments(String),
    #[error("no clustering into {layers} layers keeps every layer within (1 + {delta}) x the average FLOP; try a larger delta or fewer layers")]
    Clustering { layers: usize, delta: f64 },
    #[error("{}", infeasible_message(.violation))]
    Infeasible { violation: Option<MemoryViolation> },
    #[error(transparent)]
    Intra(#[from] IntraError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

fn infeasible_message(v: &Option<MemoryViolation>) -> String {
    match v {
        Some(v) => format!(
            "no feasible pipeline plan: device memory check mem_stage + s*mem_act <= mem_device fails; tightest case needs {} bytes per device but {} are available (logical mesh {}x{}, s = {})",
            v.required, v.available, v.view[0], v.view[1], v.s
        ),
        None => "no feasible pipeline plan covers every layer with the cluster's devices".to_string(),
    }
}

/// Contiguous layers over the forward operator sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerClustering {
    /// Forward operators in order.
    pub forward: Vec<NodeId>,
    /// Half-open position ranges into `forward`.
    pub layers: Vec<(usize, usize)>,
    /// FLOP per layer, including attached backward operators.
    pub flop: Vec<u64>,
    /// Bytes entering each layer.
    pub inbound: Vec<u64>,
    /// Largest inbound volume, the minimised quantity.
    pub cost: u64,
}

/// Per-position FLOP weights and the inbound-bytes matrix `C(i, k)`.
pub struct ClusteringInputs {
    pub forward: Vec<NodeId>,
    pub weight: Vec<u64>,
    inbound: Vec<u64>,
}

impl ClusteringInputs {
    pub fn new(graph: &OpGraph) -> Self {
        let forward = graph.forward_sequence();
        let k = forward.len();
        let mut pos = vec![usize::MAX; graph.len()];
        for (p, &v) in forward.iter().enumerate() {
            pos[v] = p;
        }
        let mut weight: Vec<u64> = forward.iter().map(|&v| graph.node(v).flop).collect();
        for n in graph.nodes().iter().filter(|n| !n.is_forward()) {
            let a = pos[graph.anchor(n.id)];
            weight[a] += n.flop;
        }
        let mut inbound = vec![0u64; k * k];
        let mut seen = vec![usize::MAX; graph.len()];
        for i in 0..k {
            let mut acc = 0u64;
            for kk in i..k {
                let node = graph.node(forward[kk]);
                if node.kind == crate::graph::OpKind::Input {
                    acc += node.out_shape.byte_size();
                }
                for p in node.producers() {
                    if pos[p] < i && seen[p] != i {
                        seen[p] = i;
                        acc += graph.node(p).out_shape.byte_size();
                    }
                }
                inbound[i * k + kk] = acc;
            }
        }
        ClusteringInputs { forward, weight, inbound }
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    /// Bytes received by positions `i..=k` from positions before `i`, plus
    /// graph inputs among them.
    pub fn c(&self, i: usize, k: usize) -> u64 {
        self.inbound[i * self.len() + k]
    }

    pub fn flop(&self, i: usize, k: usize) -> u64 {
        self.weight[i..=k].iter().sum()
    }

    pub fn total_flop(&self) -> u64 {
        self.weight.iter().sum()
    }
}

/// The FLOP cap of one layer: `flop <= (1 + delta) * total / L`.
pub fn within_flop_cap(flop: u64, total: u64, layers: usize, delta: f64) -> bool {
    flop as f64 * layers as f64 <= (1.0 + delta) * total as f64
}

/// Optimal clustering into `layers` layers: minimum largest inbound volume,
/// then minimum sum of squared layer FLOP (equivalently, variance).
pub fn cluster_operators(graph: &OpGraph, layers: usize, delta: f64) -> Result<LayerClustering, InterError> {
    let inputs = ClusteringInputs::new(graph);
    cluster_inputs(&inputs, layers, delta)
}

pub fn cluster_inputs(inputs: &ClusteringInputs, layers: usize, delta: f64) -> Result<LayerClustering, InterError> {
    let k = inputs.len();
    if layers == 0 || layers > k {
        return Err(InterError::InvalidArguments(format!("layer count {layers} must be in 1..={k}")));
    }
    if !(delta >= 0.0) {
        return Err(InterError::InvalidArguments(format!("delta {delta} must be >= 0")));
    }
    let total = inputs.total_flop();
    let ok = |i: usize, e: usize| within_flop_cap(inputs.flop(i, e), total, layers, delta);
    const INF: u64 = u64::MAX;
    // g[r][e]: best max-inbound for the first e positions in r layers.
    let mut g = vec![vec![INF; k + 1]; layers + 1];
    g[0][0] = 0;
    for r in 1..=layers {
        for e in r..=k {
            for i in r - 1..e {
                if g[r - 1][i] == INF || !ok(i, e - 1) {
                    continue;
                }
                g[r][e] = g[r][e].min(g[r - 1][i].max(inputs.c(i, e - 1)));
            }
        }
    }
    let best = g[layers][k];
    if best == INF {
        return Err(InterError::Clustering { layers, delta });
    }
    // Second pass: least sum of squares among clusterings reaching `best`.
    let mut h = vec![vec![u128::MAX; k + 1]; layers + 1];
    let mut from = vec![vec![usize::MAX; k + 1]; layers + 1];
    h[0][0] = 0;
    for r in 1..=layers {
        for e in r..=k {
            for i in r - 1..e {
                if h[r - 1][i] == u128::MAX || !ok(i, e - 1) || inputs.c(i, e - 1) > best {
                    continue;
                }
                let f = inputs.flop(i, e - 1) as u128;
                let cand = h[r - 1][i] + f * f;
                if cand < h[r][e] {
                    h[r][e] = cand;
                    from[r][e] = i;
                }
            }
        }
    }
    let mut bounds = Vec::with_capacity(layers);
    let mut e = k;
    for r in (1..=layers).rev() {
        let i = from[r][e];
        bounds.push((i, e));
        e = i;
    }
    bounds.reverse();
    Ok(LayerClustering {
        forward: inputs.forward.clone(),
        flop: bounds.iter().map(|&(i, e)| inputs.flop(i, e - 1)).collect(),
        inbound: bounds.iter().map(|&(i, e)| inputs.c(i, e - 1)).collect(),
        layers: bounds,
        cost: best,
    })
}

impl LayerClustering {
    /// Layer index of every node; backward nodes follow their anchor.
    pub fn layer_of(&self, graph: &OpGraph) -> Vec<usize> {
        let mut pos_layer = vec![0usize; graph.len()];
        for (l, &(i, e)) in self.layers.iter().enumerate() {
            for p in i..e {
                pos_layer[self.forward[p]] = l;
            }
        }
        (0..graph.len()).map(|v| pos_layer[graph.anchor(v)]).collect()
    }

    /// Nodes of layers `first..=last`.
    pub fn members(&self, graph: &OpGraph, first: usize, last: usize) -> Vec<NodeId> {
        let layer_of = self.layer_of(graph);
        (0..graph.len()).filter(|&v| (first..=last).contains(&layer_of[v])).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanOptions {
    /// Microbatch count `B`.
    pub b: u64,
    /// Layer count; defaults to `min(K, 2 N M)`.
    pub layers: Option<usize>,
    pub delta: f64,
    pub epsilon: Time,
    /// Stop the `t_max` enumeration once `B * t_max` reaches the best plan.
    pub prune: bool,
    pub intra: IntraOptions,
    /// Worker threads for the stage profiling; 0 uses all cores. Not
    /// serialized: it never changes the result.
    #[serde(skip)]
    pub workers: usize,
}

impl Default for PlanOptions {
    fn default() -> Self {
        PlanOptions {
            b: 1,
            layers: None,
            delta: 0.1,
            epsilon: Time::from_secs_f64(1e-6),
            prune: true,
            intra: IntraOptions::default(),
            workers: 0,
        }
    }
}

pub fn default_layers(num_forward_ops: usize, cluster: &ClusterMesh) -> usize {
    num_forward_ops.min(2 * cluster.num_devices() as usize).max(1)
}

/// Clustering with the largest layer count up to [`default_layers`] that
/// satisfies the FLOP cap. Graphs with many FLOP-free operators often cannot
/// be split that finely.
pub fn default_clustering(graph: &OpGraph, cluster: &ClusterMesh, delta: f64) -> Result<LayerClustering, InterError> {
    let inputs = ClusteringInputs::new(graph);
    let mut l = default_layers(inputs.len(), cluster);
    loop {
        match cluster_inputs(&inputs, l, delta) {
            Err(InterError::Clustering { .. }) if l > 1 => l -= 1,
            r => return r,
        }
    }
}

/// A value crossing a stage boundary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundaryTensor {
    pub node: NodeId,
    pub from_stage: usize,
    /// Produced by a forward operator (sent after the forward pass).
    pub forward_value: bool,
    /// Needed by a forward operator of the receiving stage.
    pub needed_forward: bool,
    pub dims: Vec<u64>,
    pub elem_bytes: u32,
    pub src_spec: ShardingSpec,
    pub dst_spec: ShardingSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    /// First and last layer, inclusive.
    pub layers: (usize, usize),
    pub nodes: Vec<NodeId>,
    pub shape: SubmeshShape,
    pub assignment: SubmeshAssignment,
    pub devices: Vec<DeviceId>,
    pub view: LogicalMesh,
    pub intra: IntraPlan,
    pub report: StageCostReport,
    /// Microbatches in flight under 1F1B: stages from this one to the end.
    pub inflight: u64,
    pub latency: Time,
    pub inputs: Vec<BoundaryTensor>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanStats {
    pub layers: usize,
    pub profiled_tuples: usize,
    pub tmax_candidates: usize,
    pub tmax_evaluated: usize,
    pub uncertified_solves: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelinePlan {
    pub b: u64,
    pub t_star: Time,
    pub t_max: Time,
    /// The graph has backward operators; each microbatch then runs a
    /// forward and a backward pass per stage.
    pub has_backward: bool,
    pub cluster: ClusterMesh,
    pub clustering: LayerClustering,
    pub stages: Vec<Stage>,
    pub stats: PlanStats,
}

impl PipelinePlan {
    /// `sum t_i + (B - 1) max t_i` over the stage latencies.
    pub fn pipeline_latency(&self) -> Time {
        pipeline_latency(&self.stages.iter().map(|s| s.latency).collect::<Vec<_>>(), self.b)
    }
}

/// Pipeline latency of stage times `t` with `b` microbatches.
pub fn pipeline_latency(t: &[Time], b: u64) -> Time {
    let sum: Time = t.iter().sum();
    let max = t.iter().copied().max().unwrap_or(Time::ZERO);
    sum + max * b.saturating_sub(1)
}

/// Profiled views of every `(first, last, shape)` stage candidate.
pub struct StageTable {
    pub layers: usize,
    pub shapes: Vec<SubmeshShape>,
    /// Indexed by `(first * layers + last) * shapes.len() + shape`.
    pub evals: Vec<Vec<ViewEval>>,
    /// `t[idx][s - 1]`, `s` in `1..=layers`.
    pub t: Vec<Vec<TIntra>>,
}

impl StageTable {
    pub fn index(&self, first: usize, last: usize, shape: usize) -> usize {
        (first * self.layers + last) * self.shapes.len() + shape
    }

    pub fn time(&self, first: usize, last: usize, shape: usize, s: usize) -> Option<Time> {
        self.t[self.index(first, last, shape)][s - 1].time()
    }

    /// Profiles every stage candidate. Work is spread over `workers` threads
    /// (0: all cores); the result does not depend on the thread count.
    pub fn build(
        graph: &OpGraph,
        clustering: &LayerClustering,
        cm: &CostModel,
        opts: &IntraOptions,
        workers: usize,
    ) -> Result<StageTable, InterError> {
        let layers = clustering.layers.len();
        let shapes = admissible_shapes(&cm.cluster);
        let layer_of = clustering.layer_of(graph);
        let mut jobs = Vec::new();
        for first in 0..layers {
            for last in 0..layers {
                for (si, &shape) in shapes.iter().enumerate() {
                    jobs.push((first, last, si, shape));
                }
            }
        }
        let run = |&(first, last, _si, shape): &(usize, usize, usize, SubmeshShape)| -> Result<Vec<ViewEval>, InterError> {
            if last < first {
                return Ok(vec![]);
            }
            let members: Vec<NodeId> = (0..graph.len()).filter(|&v| (first..=last).contains(&layer_of[v])).collect();
            let stage = StageGraph::extract(graph, &members)?;
            Ok(profile_views(&stage, shape, cm, opts)?)
        };
        let evals: Result<Vec<Vec<ViewEval>>, InterError> = if workers == 1 {
            jobs.iter().map(run).collect()
        } else {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .map_err(|e| InterError::InvalidArguments(format!("thread pool: {e}")))?;
            pool.install(|| jobs.par_iter().map(run).collect())
        };
        let evals = evals?;
        let mem = cm.cluster.device_memory;
        let t = evals
            .iter()
            .map(|e| (1..=layers as u64).map(|s| pick_view(e, s, mem)).collect())
            .collect();
        Ok(StageTable { layers, shapes, evals, t })
    }
}

/// One stage of a slicing: layer range, shape index, in-flight count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slice {
    pub first: usize,
    pub last: usize,
    pub shape: usize,
    pub s: usize,
}

/// Minimum-sum slicing with every stage at most `limit`, using exactly all
/// devices. Ties prefer fewer stages, then earlier cut points and larger
/// shapes.
pub fn slice_dp(table: &StageTable, devices: usize, limit: Time) -> Option<(Time, Vec<Slice>)> {
    let l = table.layers;
    let dev: Vec<usize> = table.shapes.iter().map(|s| s.num_devices() as usize).collect();
    const INF: u64 = u64::MAX;
    // f[s][layer][d]
    let idx = |s: usize, layer: usize, d: usize| (s * (l + 1) + layer) * (devices + 1) + d;
    let mut f = vec![INF; (l + 1) * (l + 1) * (devices + 1)];
    let mut arg = vec![(usize::MAX, usize::MAX); f.len()];
    f[idx(0, l, 0)] = 0;
    for s in 1..=l {
        for k in (0..l).rev() {
            for d in 1..=devices {
                let mut best = INF;
                let mut choice = (usize::MAX, usize::MAX);
                for i in k..l {
                    for (si, &nd) in dev.iter().enumerate() {
                        if nd > d {
                            continue;
                        }
                        let rest = f[idx(s - 1, i + 1, d - nd)];
                        if rest == INF {
                            continue;
                        }
                        let Some(t) = table.time(k, i, si, s) else { continue };
                        if t > limit {
                            continue;
                        }
                        let cand = t.ticks().saturating_add(rest);
                        if cand < best {
                            best = cand;
                            choice = (i, si);
                        }
                    }
                }
                f[idx(s, k, d)] = best;
                arg[idx(s, k, d)] = choice;
            }
        }
    }
    let mut best: Option<(u64, usize)> = None;
    for s in 1..=l {
        let v = f[idx(s, 0, devices)];
        if v != INF && best.is_none_or(|(b, _)| v < b) {
            best = Some((v, s));
        }
    }
    let (total, stages) = best?;
    let mut slices = Vec::with_capacity(stages);
    let (mut k, mut d) = (0, devices);
    for s in (1..=stages).rev() {
        let (i, si) = arg[idx(s, k, d)];
        slices.push(Slice { first: k, last: i, shape: si, s });
        k = i + 1;
        d -= dev[si];
    }
    Some((Time::from_ticks(total), slices))
}

/// Full inter-operator search on a prebuilt stage table. Returns the best
/// slicing, its `T`, and the number of `t_max` values evaluated.
pub fn search(table: &StageTable, devices: usize, b: u64, epsilon: Time, prune: bool) -> Option<(Time, Vec<Slice>, usize, usize)> {
    let candidates: BTreeSet<Time> = table.t.iter().flatten().filter_map(TIntra::time).collect();
    let n_candidates = candidates.len();
    let mut best: Option<(Time, Vec<Slice>)> = None;
    let mut covered: Option<Time> = None;
    let mut evaluated = 0;
    for v in candidates {
        if covered.is_some_and(|c| v <= c) {
            continue;
        }
        if prune && best.as_ref().is_some_and(|(t, _)| v * b >= *t) {
            break;
        }
        // Evaluating at `v + epsilon` also covers the skipped candidates,
        // which bounds the loss by `(B - 1) * epsilon`.
        let limit = v + epsilon;
        covered = Some(limit);
        evaluated += 1;
        let Some((_, slices)) = slice_dp(table, devices, limit) else { continue };
        let times: Vec<Time> = slices.iter().map(|sl| table.time(sl.first, sl.last, sl.shape, sl.s).expect("feasible")).collect();
        let t = pipeline_latency(&times, b);
        if best.as_ref().is_none_or(|(bt, _)| t < *bt) {
            best = Some((t, slices));
        }
    }
    best.map(|(t, s)| (t, s, n_candidates, evaluated))
}

/// Plans `graph` on the cost model's cluster.
pub fn plan(graph: &OpGraph, cm: &CostModel, opts: &PlanOptions) -> Result<PipelinePlan, InterError> {
    if opts.b == 0 {
        return Err(InterError::InvalidArguments("B must be >= 1".into()));
    }
    let clustering = match opts.layers {
        Some(l) => cluster_operators(graph, l, opts.delta)?,
        None => default_clustering(graph, &cm.cluster, opts.delta)?,
    };
    let table = StageTable::build(graph, &clustering, cm, &opts.intra, opts.workers)?;
    plan_with_table(graph, cm, opts, clustering, &table)
}

/// Second half of [`plan`], reusable across microbatch counts.
pub fn plan_with_table(
    graph: &OpGraph,
    cm: &CostModel,
    opts: &PlanOptions,
    clustering: LayerClustering,
    table: &StageTable,
) -> Result<PipelinePlan, InterError> {
    let devices = cm.cluster.num_devices() as usize;
    let Some((t_star, slices, n_candidates, evaluated)) = search(table, devices, opts.b, opts.epsilon, opts.prune) else {
        let violation = table
            .t
            .iter()
            .flatten()
            .filter_map(|t| match t {
                TIntra::Infeasible(v) if v.required > 0 => Some(*v),
                _ => None,
            })
            .min_by_key(|v| (v.required, v.s));
        return Err(InterError::Infeasible { violation });
    };
    let shapes: Vec<SubmeshShape> = slices.iter().map(|sl| table.shapes[sl.shape]).collect();
    let assignments = cover(&cm.cluster, &shapes)?;
    let layer_of = clustering.layer_of(graph);
    let mut stage_of = vec![usize::MAX; graph.len()];
    for (si, sl) in slices.iter().enumerate() {
        for v in 0..graph.len() {
            if (sl.first..=sl.last).contains(&layer_of[v]) {
                stage_of[v] = si;
            }
        }
    }
    let mut stages: Vec<Stage> = Vec::with_capacity(slices.len());
    for (si, (sl, assignment)) in slices.iter().zip(assignments).enumerate() {
        let eval = match &table.t[table.index(sl.first, sl.last, sl.shape)][sl.s - 1] {
            TIntra::Feasible(e) => e.clone(),
            TIntra::Infeasible(_) => unreachable!("search only returns feasible stages"),
        };
        let nodes: Vec<NodeId> = (0..graph.len()).filter(|&v| stage_of[v] == si).collect();
        stages.push(Stage {
            layers: (sl.first, sl.last),
            shape: table.shapes[sl.shape],
            devices: assignment.device_ids(&cm.cluster),
            assignment,
            view: eval.view.clone(),
            latency: eval.report.t_total,
            report: eval.report,
            intra: eval.plan,
            inflight: sl.s as u64,
            nodes,
            inputs: vec![],
        });
    }
    for si in 0..stages.len() {
        let members = stages[si].nodes.clone();
        let mut inputs = Vec::new();
        let mut seen = BTreeSet::new();
        for &v in &members {
            for p in graph.node(v).producers() {
                let from = stage_of[p];
                if from == si || !seen.insert(p) {
                    continue;
                }
                let needed_forward = members
                    .iter()
                    .any(|&c| graph.node(c).is_forward() && graph.node(c).producers().any(|q| q == p));
                let shape = &graph.node(p).out_shape;
                inputs.push(BoundaryTensor {
                    node: p,
                    from_stage: from,
                    forward_value: graph.node(p).is_forward(),
                    needed_forward,
                    dims: shape.dims().to_vec(),
                    elem_bytes: shape.elem_bytes(),
                    src_spec: stages[from].intra.spec_of(p).cloned().expect("producer is planned"),
                    dst_spec: stages[si].intra.external_spec(p).cloned().expect("placeholder is planned"),
                });
            }
        }
        stages[si].inputs = inputs;
    }
    let t_max = stages.iter().map(|s| s.latency).max().unwrap_or(Time::ZERO);
    let uncertified = stages.iter().filter(|s| !s.intra.certified).count();
    let plan = PipelinePlan {
        b: opts.b,
        t_star,
        t_max,
        has_backward: graph.has_backward(),
        cluster: cm.cluster.clone(),
        stats: PlanStats {
            layers: clustering.layers.len(),
            profiled_tuples: table.evals.iter().filter(|e| !e.is_empty()).count(),
            tmax_candidates: n_candidates,
            tmax_evaluated: evaluated,
            uncertified_solves: uncertified,
        },
        clustering,
        stages,
    };
    debug_assert_eq!(plan.pipeline_latency(), plan.t_star);
    Ok(plan)
}

/// Plans once per microbatch count. The clustering and stage table do not
/// depend on B, so they are built once and shared by every entry.
pub fn sweep_b(graph: &OpGraph, cm: &CostModel, b_list: &[u64], opts: &PlanOptions) -> Vec<(u64, Result<PipelinePlan, InterError>)> {
    let shared = match opts.layers {
        Some(l) => cluster_operators(graph, l, opts.delta),
        None => default_clustering(graph, &cm.cluster, opts.delta),
    }
    .and_then(|c| StageTable::build(graph, &c, cm, &opts.intra, opts.workers).map(|t| (c, t)));
    b_list
        .iter()
        .map(|&b| {
            let o = PlanOptions { b, ..*opts };
            let r = match &shared {
                _ if b == 0 => plan(graph, cm, &o),
                Ok((c, t)) => plan_with_table(graph, cm, &o, c.clone(), t),
                Err(e) => Err(e.clone()),
            };
            (b, r)
        })
        .collect()
}
