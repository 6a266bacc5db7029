//! Independent oracles and instance generators shared by the integration
//! tests and the acceptance suite.
#![allow(dead_code)]

use meshplan::cost::CostModel;
use meshplan::graph::{append_backward, build_mlp_with, build_transformer_with, random_graph, GraphBuilder, MlpConfig, NodeId, OpGraph, OpKind, TensorShape, TransformerConfig};
use meshplan::inter::StageTable;
use meshplan::intra::{EdgeMatrix, StrategyTable};
use meshplan::mesh::{ClusterMesh, LogicalMesh, SubmeshAssignment, SubmeshShape};
use meshplan::sharding::{enumerate_algorithms, ParallelAlgorithm, ShardingSpec};
use meshplan::Time;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type TestRng = ChaCha8Rng;

pub fn rng(seed: u64) -> TestRng {
    rand::SeedableRng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- ILP

/// Random table: up to `max_nodes` nodes, 1..=`max_k` strategies each, every
/// pair connected with probability `density`, costs in `0..=max_cost` ps.
pub fn random_table(r: &mut TestRng, max_nodes: usize, max_k: usize, density: f64, max_cost: u64) -> StrategyTable {
    let n = r.gen_range(1..=max_nodes);
    let ks: Vec<usize> = (0..n).map(|_| r.gen_range(1..=max_k)).collect();
    let mut t = StrategyTable {
        node_costs: ks.iter().map(|&k| (0..k).map(|_| Time::from_ticks(r.gen_range(0..=max_cost))).collect()).collect(),
        compute_costs: ks.iter().map(|&k| (0..k).map(|_| Time::from_ticks(r.gen_range(0..=max_cost / 4))).collect()).collect(),
        edges: vec![],
    };
    for u in 0..n {
        for v in u + 1..n {
            if r.gen_bool(density) {
                let costs = (0..ks[u] * ks[v]).map(|_| Time::from_ticks(r.gen_range(0..=max_cost))).collect();
                t.edges.push(EdgeMatrix { u, v, costs });
            }
        }
    }
    t
}

/// Minimum over every assignment, by plain enumeration.
pub fn brute_force_table(t: &StrategyTable) -> Time {
    let n = t.node_costs.len();
    let ks: Vec<usize> = t.node_costs.iter().map(|c| c.len()).collect();
    let mut choice = vec![0usize; n];
    let mut best = u64::MAX;
    loop {
        let mut cost = 0u64;
        for v in 0..n {
            cost += t.node_costs[v][choice[v]].ticks() + t.compute_costs[v][choice[v]].ticks();
        }
        for e in &t.edges {
            cost += e.costs[choice[e.u] * ks[e.v] + choice[e.v]].ticks();
        }
        best = best.min(cost);
        let mut i = 0;
        loop {
            if i == n {
                return Time::from_ticks(best);
            }
            choice[i] += 1;
            if choice[i] < ks[i] {
                break;
            }
            choice[i] = 0;
            i += 1;
        }
    }
}

// ---------------------------------------------------------------- cover

/// A cluster and shape multiset satisfying the covering hypotheses:
/// `M` a power of two, shapes `(1, 2^p)` or `(n, M)`, total `N * M`.
pub fn random_cover_instance(r: &mut TestRng) -> (ClusterMesh, Vec<SubmeshShape>) {
    let nn = r.gen_range(1..=8u32);
    let mm = 1u32 << r.gen_range(0..=4);
    let cluster = ClusterMesh::new(nn, mm, 1.0, 1.0).unwrap();
    let mut shapes = Vec::new();
    let mut rows_left = nn;
    while rows_left >= 2 && r.gen_bool(0.4) {
        let n = r.gen_range(2..=rows_left);
        shapes.push(SubmeshShape::new(n, mm));
        rows_left -= n;
    }
    let mut cells = rows_left * mm;
    while cells > 0 {
        let max_p = (cells.min(mm)).ilog2();
        let w = 1u32 << r.gen_range(0..=max_p);
        shapes.push(SubmeshShape::new(1, w));
        cells -= w;
    }
    shapes.shuffle(r);
    (cluster, shapes)
}

/// Exact-tiling check written against the grid directly.
pub fn tiles_exactly(cluster: &ClusterMesh, shapes: &[SubmeshShape], placed: &[SubmeshAssignment]) -> bool {
    if shapes.len() != placed.len() {
        return false;
    }
    let (nn, mm) = (cluster.num_hosts() as usize, cluster.devices_per_host() as usize);
    let mut owner = vec![vec![usize::MAX; mm]; nn];
    for (i, (s, a)) in shapes.iter().zip(placed).enumerate() {
        if a.shape != *s || (a.hosts.1 - a.hosts.0, a.devices.1 - a.devices.0) != (s.n, s.m) {
            return false;
        }
        for h in a.hosts.0..a.hosts.1 {
            for d in a.devices.0..a.devices.1 {
                let Some(cell) = owner.get_mut(h as usize).and_then(|row| row.get_mut(d as usize)) else { return false };
                if *cell != usize::MAX {
                    return false;
                }
                *cell = i;
            }
        }
    }
    owner.iter().flatten().all(|&o| o != usize::MAX)
}

// ---------------------------------------------------------------- clustering

/// Random chain of elementwise and (parameter, matmul) pairs whose forward
/// sequence has exactly `k` operators.
pub fn random_chain(r: &mut TestRng, k: usize) -> OpGraph {
    let widths = [2u64, 4, 8, 16];
    let mut b = GraphBuilder::new();
    let mut w = widths[r.gen_range(0..widths.len())];
    let mut x = b.input(TensorShape::f32(&[4, w]).unwrap());
    let mut len = 1;
    while len < k {
        if k - len >= 2 && r.gen_bool(0.5) {
            let w2 = widths[r.gen_range(0..widths.len())];
            let p = b.parameter(TensorShape::f32(&[w, w2]).unwrap());
            x = b.op(OpKind::Matmul, &[x, p]).unwrap();
            w = w2;
            len += 2;
        } else {
            x = b.op(OpKind::Elementwise { arity: 1 }, &[x]).unwrap();
            len += 1;
        }
    }
    b.finish(vec![x]).unwrap()
}

/// Per-position FLOP weight (own plus anchored backward operators).
pub fn layer_weights(g: &OpGraph) -> Vec<u64> {
    let fwd = g.forward_sequence();
    fwd.iter()
        .map(|&v| g.node(v).flop + g.nodes().iter().filter(|n| !n.is_forward() && g.anchor(n.id) == v).map(|n| n.flop).sum::<u64>())
        .collect()
}

/// Bytes entering forward positions `i..=k`.
pub fn inbound_bytes(g: &OpGraph, i: usize, k: usize) -> u64 {
    let fwd = g.forward_sequence();
    let range = &fwd[i..=k];
    let before = &fwd[..i];
    let mut producers: Vec<NodeId> = range.iter().flat_map(|&v| g.node(v).producers().collect::<Vec<_>>()).filter(|p| before.contains(p)).collect();
    producers.sort_unstable();
    producers.dedup();
    let inputs: u64 = range.iter().filter(|&&v| g.node(v).kind == OpKind::Input).map(|&v| g.node(v).out_shape.byte_size()).sum();
    producers.iter().map(|&p| g.node(p).out_shape.byte_size()).sum::<u64>() + inputs
}

/// Lexicographic optimum `(max inbound, sum of squared FLOP)` over every
/// contiguous split into `l` parts within the FLOP cap.
pub fn exhaustive_clustering(g: &OpGraph, l: usize, delta: f64) -> Option<(u64, u128)> {
    let k = g.forward_sequence().len();
    let w = layer_weights(g);
    let total: u64 = w.iter().sum();
    let mut best: Option<(u64, u128)> = None;
    // choose l - 1 cut points among k - 1 gaps
    let mut cuts: Vec<usize> = (1..l).collect();
    if l > k {
        return None;
    }
    loop {
        let bounds: Vec<(usize, usize)> =
            std::iter::once(0).chain(cuts.iter().copied()).zip(cuts.iter().copied().chain(std::iter::once(k))).collect();
        let flops: Vec<u64> = bounds.iter().map(|&(a, b)| w[a..b].iter().sum()).collect();
        if flops.iter().all(|&f| (f as f64) * (l as f64) <= (1.0 + delta) * total as f64) {
            let c = bounds.iter().map(|&(a, b)| inbound_bytes(g, a, b - 1)).max().unwrap();
            let sq: u128 = flops.iter().map(|&f| (f as u128) * (f as u128)).sum();
            if best.is_none_or(|b| (c, sq) < b) {
                best = Some((c, sq));
            }
        }
        // next combination of cut points in 1..k
        let m = cuts.len();
        let mut i = m;
        loop {
            if i == 0 {
                return best;
            }
            i -= 1;
            if cuts[i] < k - (m - i) {
                cuts[i] += 1;
                for j in i + 1..m {
                    cuts[j] = cuts[j - 1] + 1;
                }
                break;
            }
        }
    }
}

// ---------------------------------------------------------------- tables

pub fn spec(s: &str) -> ShardingSpec {
    s.parse().unwrap()
}

pub fn batched_matmul_algorithms(mesh: &LogicalMesh) -> Vec<ParallelAlgorithm> {
    let mut b = GraphBuilder::new();
    let x = b.input(TensorShape::f32(&[8, 8, 8]).unwrap());
    let y = b.input(TensorShape::f32(&[8, 8, 8]).unwrap());
    let z = b.op(OpKind::BatchedMatmul, &[x, y]).unwrap();
    let g = b.finish(vec![z]).unwrap();
    let shapes = [&g.node(x).out_shape, &g.node(y).out_shape];
    enumerate_algorithms(g.node(z), &shapes, mesh).unwrap()
}

/// (mapping, output, inputs, cost) as printed.
pub const BATCHED_MATMUL_ROWS: [(&[(char, &[usize])], &str, [&str; 2], &str); 7] = [
    (&[('i', &[0]), ('j', &[1])], "RS^0S^1", ["RS^0R", "RRS^1"], "0"),
    (&[('i', &[0]), ('k', &[1])], "RS^0R", ["RS^0S^1", "RS^1R"], "all-reduce(M/n_0, 1)"),
    (&[('j', &[0]), ('k', &[1])], "RRS^0", ["RRS^1", "RS^1S^0"], "all-reduce(M/n_0, 1)"),
    (&[('b', &[0]), ('i', &[1])], "S^0S^1R", ["S^0S^1R", "S^0RR"], "0"),
    (&[('b', &[0]), ('k', &[1])], "S^0RR", ["S^0RS^1", "S^0S^1R"], "all-reduce(M/n_0, 1)"),
    (&[('i', &[0, 1])], "RS^{01}R", ["RS^{01}R", "RRR"], "0"),
    (&[('k', &[0, 1])], "RRR", ["RRS^{01}", "RS^{01}R"], "all-reduce(M, {0,1})"),
];

/// (source, destination, cost) resharding rows as printed.
pub const RESHARDING_ROWS: [(&str, &str, &str); 5] = [
    ("RR", "S^0S^1", "0"),
    ("S^0R", "RR", "all-gather(M, 0)"),
    ("S^0S^1", "S^0R", "all-gather(M/n_0, 1)"),
    ("S^0R", "RS^0", "all-to-all(M/n_0, 0)"),
    ("S^0S^1", "S^{01}R", "all-to-all(M/(n_0·n_1), 1)"),
];

// ---------------------------------------------------------------- inter-op

/// Minimum pipeline latency over every contiguous slicing of the layers,
/// every submesh shape per stage with all devices used, and every logical
/// view whose memory fits at the stage's in-flight count.
pub fn brute_force_pipeline(table: &StageTable, devices: u32, b: u64, device_memory: u64) -> Option<Time> {
    let l = table.layers;
    let mut best: Option<u64> = None;
    for mask in 0..(1u32 << (l - 1)) {
        let mut ranges = Vec::new();
        let mut start = 0;
        for i in 0..l {
            if i == l - 1 || mask & (1 << i) != 0 {
                ranges.push((start, i));
                start = i + 1;
            }
        }
        let stages = ranges.len();
        // options[stage] = (devices, t_total) for each (shape, view) that fits
        let options: Vec<Vec<(u32, u64)>> = ranges
            .iter()
            .enumerate()
            .map(|(i, &(a, z))| {
                let s = (stages - i) as u128;
                let mut o = Vec::new();
                for (si, shape) in table.shapes.iter().enumerate() {
                    for e in &table.evals[table.index(a, z, si)] {
                        let need = e.report.mem_stage as u128 + s * e.report.mem_act as u128;
                        if need <= device_memory as u128 {
                            o.push((shape.num_devices(), e.report.t_total.ticks()));
                        }
                    }
                }
                o
            })
            .collect();
        fn walk(options: &[Vec<(u32, u64)>], i: usize, left: u32, sum: u64, max: u64, b: u64, best: &mut Option<u64>) {
            if i == options.len() {
                if left == 0 {
                    let t = sum + (b - 1) * max;
                    if best.is_none_or(|x| t < x) {
                        *best = Some(t);
                    }
                }
                return;
            }
            for &(d, t) in &options[i] {
                if d <= left {
                    walk(options, i + 1, left - d, sum + t, max.max(t), b, best);
                }
            }
        }
        walk(&options, 0, devices, 0, 0, b, &mut best);
    }
    best.map(Time::from_ticks)
}

pub struct InterInstance {
    pub name: String,
    pub graph: OpGraph,
    pub cluster: ClusterMesh,
    pub layers: usize,
    pub b: u64,
}

pub fn test_cluster(n: u32, m: u32) -> ClusterMesh {
    let mut c = ClusterMesh::new(n, m, 4e9, 1e9).unwrap();
    c.alpha_latency = 1e-6;
    c.device_flops = 2e9;
    c
}

/// Graphs with `L <= 6` layers on the four small clusters, forward-only and
/// with backward passes, at two microbatch counts.
pub fn inter_instances() -> Vec<InterInstance> {
    let mut graphs: Vec<(String, OpGraph, usize)> = vec![
        ("mlp3".into(), build_mlp_with(MlpConfig::new(3, 16, 16)).unwrap(), 6),
        ("mlp2-bwd".into(), build_mlp_with(MlpConfig { backward: true, ..MlpConfig::new(2, 16, 16) }).unwrap(), 4),
        ("transformer1".into(), build_transformer_with(TransformerConfig::new(1, 4, 8, 16, 2)).unwrap(), 5),
    ];
    for seed in [11, 12] {
        let g = random_graph(seed, 8).unwrap();
        graphs.push((format!("random{seed}"), g, 4));
    }
    graphs.push(("random13-bwd".into(), append_backward(&random_graph(13, 5).unwrap()).unwrap(), 3));
    let mut out = Vec::new();
    for (name, g, layers) in &graphs {
        for (n, m) in [(1, 2), (1, 4), (2, 2), (2, 4)] {
            for b in [1, 4] {
                out.push(InterInstance {
                    name: format!("{name} on {n}x{m}, L={layers}, B={b}"),
                    graph: g.clone(),
                    cluster: test_cluster(n, m),
                    layers: *layers,
                    b,
                });
            }
        }
    }
    out
}

pub fn cost_model(c: &ClusterMesh) -> CostModel {
    CostModel::new(c.clone())
}

// ---------------------------------------------------------------- pipeline

/// Two-phase closed form of a linear GPipe schedule with zero transfer
/// cost: every forward, then every backward, each a flow shop.
pub fn gpipe_closed_form(t_fwd: &[Time], t_bwd: &[Time], b: u64) -> Time {
    let phase = |t: &[Time]| -> u64 {
        let sum: u64 = t.iter().map(|x| x.ticks()).sum();
        let max = t.iter().map(|x| x.ticks()).max().unwrap_or(0);
        sum + (b - 1) * max
    };
    let bwd = if t_bwd.iter().all(|t| *t == Time::ZERO) { 0 } else { phase(t_bwd) };
    Time::from_ticks(phase(t_fwd) + bwd)
}
