//! Analytic cost model: collectives, compute and stage memory.
//!
//! Collective volumes follow the ring convention: an all-reduce over `d`
//! devices moves `2(d-1)/d` of its payload per device, the other collectives
//! `(d-1)/d`. A collective costs `alpha + volume / bandwidth`, where the
//! bandwidth is the slowest axis it spans; a one-device group costs nothing.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{NodeId, OpGraph, OpKind, TensorShape};
use crate::mesh::{ClusterMesh, LogicalMesh};
use crate::sharding::{resharding_cost, Collective, CollectiveKind, ShardingError, ShardingSpec};
use crate::time::Time;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CostError {
    #[error("mesh axis {0} does not exist")]
    UnknownAxis(usize),
    #[error(transparent)]
    Sharding(#[from] ShardingError),
}

/// Multipliers on the ring byte volume, per collective kind.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VolumeFactors {
    pub all_reduce: f64,
    pub all_gather: f64,
    pub all_to_all: f64,
    pub reduce_scatter: f64,
}

impl Default for VolumeFactors {
    fn default() -> Self {
        VolumeFactors { all_reduce: 2.0, all_gather: 1.0, all_to_all: 1.0, reduce_scatter: 1.0 }
    }
}

impl VolumeFactors {
    pub fn factor(&self, kind: CollectiveKind) -> f64 {
        match kind {
            CollectiveKind::AllReduce => self.all_reduce,
            CollectiveKind::AllGather => self.all_gather,
            CollectiveKind::AllToAll => self.all_to_all,
            CollectiveKind::ReduceScatter => self.reduce_scatter,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub cluster: ClusterMesh,
    pub factors: VolumeFactors,
}

impl CostModel {
    pub fn new(cluster: ClusterMesh) -> Self {
        CostModel { cluster, factors: VolumeFactors::default() }
    }

    pub fn alpha(&self) -> f64 {
        self.cluster.alpha_latency
    }

    pub fn collective_time(&self, kind: CollectiveKind, bytes: u64, axes: &[usize], mesh: &LogicalMesh) -> Result<Time, CostError> {
        if let Some(&a) = axes.iter().find(|&&a| a > 1) {
            return Err(CostError::UnknownAxis(a));
        }
        let d: u64 = axes.iter().map(|&a| mesh.extent(a) as u64).product();
        if d <= 1 {
            return Ok(Time::ZERO);
        }
        let bw = axes.iter().map(|&a| mesh.axis_bandwidth[a]).fold(f64::INFINITY, f64::min);
        let volume = self.factors.factor(kind) * (d - 1) as f64 / d as f64 * bytes as f64;
        Ok(Time::from_secs_f64(self.alpha() + volume / bw))
    }

    /// Time of one collective descriptor. Descriptors produced by the
    /// sharding module only name axes 0 and 1.
    pub fn collective(&self, c: &Collective, mesh: &LogicalMesh) -> Time {
        self.collective_time(c.kind, c.bytes, &c.axes, mesh).expect("collective names a valid axis")
    }

    pub fn collectives(&self, cs: &[Collective], mesh: &LogicalMesh) -> Time {
        cs.iter().map(|c| self.collective(c, mesh)).sum()
    }

    pub fn resharding_time(
        &self,
        src: &ShardingSpec,
        dst: &ShardingSpec,
        shape: &TensorShape,
        mesh: &LogicalMesh,
    ) -> Result<Time, CostError> {
        Ok(self.collectives(&resharding_cost(src, dst, shape, mesh)?, mesh))
    }

    /// Evenly divided compute: `flop / (devices * device_flops)`.
    pub fn compute_time(&self, flop: u64, device_count: u32) -> Time {
        Time::from_secs_f64(flop as f64 / (device_count.max(1) as f64 * self.cluster.device_flops))
    }

    /// Point-to-point transfer between meshes, over the inter-host links.
    pub fn transfer_time(&self, bytes: u64) -> Time {
        if bytes == 0 {
            return Time::ZERO;
        }
        Time::from_secs_f64(self.alpha() + bytes as f64 / self.cluster.inter_host_bandwidth)
    }
}

/// Per-stage cost summary. `t_fwd + t_bwd == t_total == t_compute + t_comm`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCostReport {
    pub t_compute: Time,
    pub t_comm: Time,
    pub t_total: Time,
    pub t_fwd: Time,
    pub t_bwd: Time,
    pub mem_stage: u64,
    pub mem_act: u64,
}

/// `mem_stage + s * mem_act <= device_memory`, without overflow.
pub fn memory_fits(mem_stage: u64, mem_act: u64, s: u64, device_memory: u64) -> bool {
    mem_act
        .checked_mul(s)
        .and_then(|a| a.checked_add(mem_stage))
        .is_some_and(|need| need <= device_memory)
}

/// Bytes required by a stage that keeps `s` microbatches in flight.
pub fn memory_required(mem_stage: u64, mem_act: u64, s: u64) -> u64 {
    mem_act.saturating_mul(s).saturating_add(mem_stage)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageMemory {
    pub mem_stage: u64,
    pub mem_act: u64,
    pub feasible: bool,
}

/// Memory estimate of a stage laid out by `spec_of`.
///
/// `mem_stage` is the sharded parameter bytes plus the largest single
/// operator's per-device input and output bytes. `mem_act` is one
/// microbatch's per-device bytes of the stage's activations that must stay
/// alive: values consumed outside the stage, graph outputs, and forward
/// values read by backward operators of the stage. `spec_of` must cover
/// every member and every producer feeding one.
pub fn stage_memory(
    graph: &OpGraph,
    members: &[NodeId],
    spec_of: &dyn Fn(NodeId) -> ShardingSpec,
    mesh: &LogicalMesh,
    s: u64,
    device_memory: u64,
) -> StageMemory {
    let mut in_stage = vec![false; graph.len()];
    for &v in members {
        in_stage[v] = true;
    }
    let bytes = |v: NodeId| spec_of(v).shard_bytes(&graph.node(v).out_shape, mesh);
    let params: u64 = members.iter().filter(|&&v| graph.node(v).kind == OpKind::Parameter).map(|&v| bytes(v)).sum();
    let working = members
        .iter()
        .map(|&v| {
            let n = graph.node(v);
            let mut seen = Vec::new();
            let mut total = bytes(v);
            for p in n.producers() {
                if !seen.contains(&p) {
                    seen.push(p);
                    total += bytes(p);
                }
            }
            total
        })
        .max()
        .unwrap_or(0);
    let act: u64 = members
        .iter()
        .filter(|&&v| {
            let n = graph.node(v);
            if n.kind == OpKind::Parameter {
                return false;
            }
            graph.outputs().contains(&v)
                || graph.consumers(v).iter().any(|&c| !in_stage[c] || (n.is_forward() && !graph.node(c).is_forward()))
        })
        .map(|&v| bytes(v))
        .sum();
    let mem_stage = params + working;
    StageMemory { mem_stage, mem_act: act, feasible: memory_fits(mem_stage, act, s, device_memory) }
}
