//! Cross-mesh resharding and static per-mesh instruction lists.
//!
//! A value produced on one submesh and consumed on another is moved tile by
//! tile. The naive plan sends every destination device its whole tile over
//! the slow inter-mesh links. The local all-gather plan sends each distinct
//! destination tile once per replica group, split into slices across the
//! group, and finishes with an all-gather over the destination mesh's fast
//! links.
//!
//! Instruction opcodes, one list per stage mesh:
//!
//! | opcode      | meaning                                                      |
//! |-------------|--------------------------------------------------------------|
//! | `alloc`     | reserve per-device bytes for a buffer                        |
//! | `recv`      | block until the matching `send` has arrived                  |
//! | `compute`   | run one stage pass on one microbatch                         |
//! | `send`      | post a buffered transfer to another mesh; does not block     |
//! | `all_gather`| intra-mesh collective completing a received value            |
//! | `free`      | release a buffer                                             |
//! | `sync`      | barrier across all meshes                                    |

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::CostModel;
use crate::graph::{NodeId, TensorShape};
use crate::inter::PipelinePlan;
use crate::mesh::{DeviceId, LogicalMesh};
use crate::sharding::{CollectiveKind, ShardingError, ShardingSpec};
use crate::time::Time;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OrchestrateError {
    #[error("source and destination meshes share device {0}")]
    OverlappingDevices(DeviceId),
    #[error("mesh {mesh} has {got} devices listed but its logical shape needs {want}")]
    DeviceCount { mesh: &'static str, got: usize, want: usize },
    #[error(transparent)]
    Sharding(#[from] ShardingError),
}

/// Half-open index range per tensor dimension.
pub type Region = Vec<(u64, u64)>;

pub fn region_volume(r: &[(u64, u64)]) -> u64 {
    r.iter().map(|&(a, b)| b.saturating_sub(a)).product()
}

pub fn intersect(a: &[(u64, u64)], b: &[(u64, u64)]) -> Option<Region> {
    let r: Region = a.iter().zip(b).map(|(&(a0, a1), &(b0, b1))| (a0.max(b0), a1.min(b1))).collect();
    r.iter().all(|&(lo, hi)| lo < hi).then_some(r)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossMeshStrategy {
    Naive,
    LocalAllGather,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileTransfer {
    pub src: DeviceId,
    pub dst: DeviceId,
    pub region: Region,
    pub bytes: u64,
}

/// All-gather among destination devices holding the same tile.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalAllGather {
    pub devices: Vec<DeviceId>,
    /// Destination mesh axes the group spans.
    pub axes: Vec<usize>,
    pub region: Region,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossMeshPlan {
    pub strategy: CrossMeshStrategy,
    pub transfers: Vec<TileTransfer>,
    pub all_gathers: Vec<LocalAllGather>,
    pub inter_mesh_bytes: u64,
}

impl CrossMeshPlan {
    /// Largest inbound or outbound byte count of any single device.
    pub fn max_device_bytes(&self) -> u64 {
        let mut per: std::collections::BTreeMap<(bool, DeviceId), u64> = Default::default();
        for t in &self.transfers {
            *per.entry((false, t.src)).or_default() += t.bytes;
            *per.entry((true, t.dst)).or_default() += t.bytes;
        }
        per.values().copied().max().unwrap_or(0)
    }

    /// Transfers proceed concurrently on distinct device pairs, so the
    /// busiest device link bounds the inter-mesh time.
    pub fn transfer_time(&self, cm: &CostModel) -> Time {
        cm.transfer_time(self.max_device_bytes())
    }

    /// Replica groups gather concurrently; the slowest one bounds the time.
    pub fn all_gather_time(&self, cm: &CostModel, dst_mesh: &LogicalMesh) -> Time {
        self.all_gathers
            .iter()
            .map(|g| cm.collective_time(CollectiveKind::AllGather, g.bytes, &g.axes, dst_mesh).expect("axes 0 and 1"))
            .max()
            .unwrap_or(Time::ZERO)
    }
}

/// One side of a cross-mesh move.
#[derive(Clone, Copy, Debug)]
pub struct MeshSide<'a> {
    pub spec: &'a ShardingSpec,
    pub mesh: &'a LogicalMesh,
    /// Physical device of each logical device, in row-major order.
    pub devices: &'a [DeviceId],
}

impl MeshSide<'_> {
    fn check(&self, name: &'static str, shape: &TensorShape) -> Result<(), OrchestrateError> {
        let want = self.mesh.num_devices() as usize;
        if self.devices.len() != want {
            return Err(OrchestrateError::DeviceCount { mesh: name, got: self.devices.len(), want });
        }
        self.spec.validate(shape, self.mesh)?;
        Ok(())
    }

    fn tile(&self, shape: &TensorShape, k: usize) -> Region {
        self.spec.tile(shape, self.mesh, self.mesh.coords(k as u32))
    }
}

/// Pieces of `want` held by the source mesh, each from its lowest-id holder.
fn fetch(shape: &TensorShape, src: &MeshSide, want: &[(u64, u64)]) -> Vec<(DeviceId, Region)> {
    let mut seen: BTreeSet<Region> = BTreeSet::new();
    let mut holders: Vec<(DeviceId, Region)> = (0..src.devices.len()).map(|k| (src.devices[k], src.tile(shape, k))).collect();
    holders.sort_by_key(|(d, _)| *d);
    let mut out = Vec::new();
    for (d, tile) in holders {
        if !seen.insert(tile.clone()) {
            continue;
        }
        if let Some(r) = intersect(&tile, want) {
            out.push((d, r));
        }
    }
    out
}

/// Plans moving a `shape` value from `src` to `dst`.
pub fn cross_mesh_plan(
    shape: &TensorShape,
    src: MeshSide,
    dst: MeshSide,
    strategy: CrossMeshStrategy,
) -> Result<CrossMeshPlan, OrchestrateError> {
    src.check("source", shape)?;
    dst.check("destination", shape)?;
    let src_set: BTreeSet<DeviceId> = src.devices.iter().copied().collect();
    if let Some(&d) = dst.devices.iter().find(|d| src_set.contains(d)) {
        return Err(OrchestrateError::OverlappingDevices(d));
    }
    let eb = shape.elem_bytes() as u64;
    let mut transfers = Vec::new();
    let mut all_gathers = Vec::new();
    match strategy {
        CrossMeshStrategy::Naive => {
            for k in 0..dst.devices.len() {
                let want = dst.tile(shape, k);
                for (s, r) in fetch(shape, &src, &want) {
                    transfers.push(TileTransfer { src: s, dst: dst.devices[k], bytes: region_volume(&r) * eb, region: r });
                }
            }
        }
        CrossMeshStrategy::LocalAllGather => {
            let axes: Vec<usize> = dst.spec.replication_mesh_axes().into_iter().filter(|&a| dst.mesh.extent(a) > 1).collect();
            // Group destination devices by tile; row-major device order
            // makes each group axis-0-major.
            let mut groups: Vec<(Region, Vec<usize>)> = Vec::new();
            for k in 0..dst.devices.len() {
                let t = dst.tile(shape, k);
                match groups.iter_mut().find(|(r, _)| *r == t) {
                    Some((_, g)) => g.push(k),
                    None => groups.push((t, vec![k])),
                }
            }
            for (tile, members) in groups {
                let g = members.len() as u64;
                let dim = (0..tile.len()).max_by_key(|&i| (tile[i].1 - tile[i].0, std::cmp::Reverse(i))).unwrap_or(0);
                let (lo, hi) = tile.get(dim).copied().unwrap_or((0, 1));
                for (j, &k) in members.iter().enumerate() {
                    let mut slice = tile.clone();
                    if !slice.is_empty() {
                        let len = hi - lo;
                        slice[dim] = (lo + len * j as u64 / g, lo + len * (j as u64 + 1) / g);
                        if slice[dim].0 == slice[dim].1 {
                            continue;
                        }
                    }
                    for (s, r) in fetch(shape, &src, &slice) {
                        transfers.push(TileTransfer { src: s, dst: dst.devices[k], bytes: region_volume(&r) * eb, region: r });
                    }
                }
                if g > 1 {
                    all_gathers.push(LocalAllGather {
                        devices: members.iter().map(|&k| dst.devices[k]).collect(),
                        axes: axes.clone(),
                        bytes: region_volume(&tile) * eb,
                        region: tile,
                    });
                }
            }
        }
    }
    let inter_mesh_bytes = transfers.iter().map(|t| t.bytes).sum();
    Ok(CrossMeshPlan { strategy, transfers, all_gathers, inter_mesh_bytes })
}

fn cells(r: &[(u64, u64)]) -> Vec<Vec<u64>> {
    let mut out = vec![vec![]];
    for &(lo, hi) in r {
        out = out.into_iter().flat_map(|p| (lo..hi).map(move |i| [p.clone(), vec![i]].concat())).collect();
    }
    out
}

/// Replays the plan cell by cell: every transfer must come from a device
/// holding that data, and afterwards every destination device must hold
/// exactly its tile. Intended for small tensors.
pub fn verify_materialization(plan: &CrossMeshPlan, shape: &TensorShape, src: MeshSide, dst: MeshSide) -> bool {
    let src_tiles: Vec<(DeviceId, Region)> = (0..src.devices.len()).map(|k| (src.devices[k], src.tile(shape, k))).collect();
    let mut held: std::collections::BTreeMap<DeviceId, BTreeSet<Vec<u64>>> =
        dst.devices.iter().map(|&d| (d, BTreeSet::new())).collect();
    for t in &plan.transfers {
        let Some((_, st)) = src_tiles.iter().find(|(d, _)| *d == t.src) else { return false };
        if intersect(st, &t.region).as_ref() != Some(&t.region) || region_volume(&t.region) * shape.elem_bytes() as u64 != t.bytes {
            return false;
        }
        let Some(h) = held.get_mut(&t.dst) else { return false };
        h.extend(cells(&t.region));
    }
    for g in &plan.all_gathers {
        let mut union = BTreeSet::new();
        for d in &g.devices {
            let Some(h) = held.get(d) else { return false };
            union.extend(h.iter().filter(|c| c.iter().zip(&g.region).all(|(&i, &(lo, hi))| lo <= i && i < hi)).cloned());
        }
        for d in &g.devices {
            held.get_mut(d).expect("checked above").extend(union.iter().cloned());
        }
    }
    (0..dst.devices.len()).all(|k| {
        let want: BTreeSet<Vec<u64>> = cells(&dst.tile(shape, k)).into_iter().collect();
        held[&dst.devices[k]] == want
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pass {
    Fwd,
    Bwd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[serde(rename = "gpipe")]
    GPipe,
    #[serde(rename = "1f1b")]
    OneFOneB,
}

impl std::str::FromStr for Schedule {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "gpipe" => Ok(Schedule::GPipe),
            "1f1b" => Ok(Schedule::OneFOneB),
            _ => Err(format!("unknown schedule {s:?}; expected gpipe or 1f1b")),
        }
    }
}

impl std::fmt::Display for Schedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Schedule::GPipe => "gpipe",
            Schedule::OneFOneB => "1f1b",
        })
    }
}

/// A value one stage receives from another.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkeletonInput {
    pub tensor: NodeId,
    pub from_stage: usize,
    /// Sent after the producer's forward pass (otherwise after backward).
    pub forward_value: bool,
    /// Received before the consumer's forward pass (otherwise backward).
    pub needed_forward: bool,
    pub bytes: u64,
    pub transfer: Time,
    pub all_gather: Time,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkeletonStage {
    pub devices: Vec<DeviceId>,
    pub t_fwd: Time,
    pub t_bwd: Time,
    pub mem_stage: u64,
    pub mem_act: u64,
    pub inputs: Vec<SkeletonInput>,
}

/// What instruction emission needs to know about a pipeline plan.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineSkeleton {
    pub b: u64,
    pub has_backward: bool,
    pub device_memory: u64,
    pub stages: Vec<SkeletonStage>,
}

impl PipelineSkeleton {
    /// Forward-only linear chain with the given stage times and no
    /// transfer cost; one device per stage.
    pub fn linear(times: &[Time], b: u64) -> Self {
        let stages = times
            .iter()
            .enumerate()
            .map(|(i, &t)| SkeletonStage {
                devices: vec![i as DeviceId],
                t_fwd: t,
                t_bwd: Time::ZERO,
                mem_stage: 0,
                mem_act: 0,
                inputs: if i == 0 {
                    vec![]
                } else {
                    vec![SkeletonInput {
                        tensor: i - 1,
                        from_stage: i - 1,
                        forward_value: true,
                        needed_forward: true,
                        bytes: 0,
                        transfer: Time::ZERO,
                        all_gather: Time::ZERO,
                    }]
                },
            })
            .collect();
        PipelineSkeleton { b, has_backward: false, device_memory: u64::MAX, stages }
    }
}

impl PipelinePlan {
    /// Stage timings plus cross-mesh plans for every boundary value.
    pub fn skeleton(&self, cm: &CostModel, strategy: CrossMeshStrategy) -> Result<PipelineSkeleton, OrchestrateError> {
        let has_backward = self.has_backward;
        let mut stages = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            let mut inputs = Vec::new();
            for bt in &st.inputs {
                let from = &self.stages[bt.from_stage];
                let shape = TensorShape::new(bt.dims.clone(), bt.elem_bytes).expect("planned tensor shape is valid");
                let plan = cross_mesh_plan(
                    &shape,
                    MeshSide { spec: &bt.src_spec, mesh: &from.view, devices: &from.devices },
                    MeshSide { spec: &bt.dst_spec, mesh: &st.view, devices: &st.devices },
                    strategy,
                )?;
                inputs.push(SkeletonInput {
                    tensor: bt.node,
                    from_stage: bt.from_stage,
                    forward_value: bt.forward_value,
                    needed_forward: bt.needed_forward,
                    bytes: plan.inter_mesh_bytes,
                    transfer: plan.transfer_time(cm),
                    all_gather: plan.all_gather_time(cm, &st.view),
                });
            }
            stages.push(SkeletonStage {
                devices: st.devices.clone(),
                t_fwd: st.report.t_fwd,
                t_bwd: st.report.t_bwd,
                mem_stage: st.report.mem_stage,
                mem_act: st.report.mem_act,
                inputs,
            });
        }
        add_control_tokens(&mut stages, has_backward);
        Ok(PipelineSkeleton { b: self.b, has_backward, device_memory: self.cluster.device_memory, stages })
    }
}

/// Tensor id of a zero-byte control message.
pub const CONTROL_TOKEN: NodeId = NodeId::MAX;

/// Stages run as a linear pipeline: a stage that gets no data from its
/// predecessor still waits for it, through a zero-byte token. Backward
/// passes chain the same way in reverse.
pub fn add_control_tokens(stages: &mut [SkeletonStage], has_backward: bool) {
    let token = |from_stage, forward| SkeletonInput {
        tensor: CONTROL_TOKEN,
        from_stage,
        forward_value: forward,
        needed_forward: forward,
        bytes: 0,
        transfer: Time::ZERO,
        all_gather: Time::ZERO,
    };
    let n = stages.len();
    for k in 0..n {
        let ins = &stages[k].inputs;
        if k > 0 && !ins.iter().any(|i| i.from_stage == k - 1 && i.forward_value && i.needed_forward) {
            stages[k].inputs.push(token(k - 1, true));
        }
        let ins = &stages[k].inputs;
        if has_backward && k + 1 < n && !ins.iter().any(|i| i.from_stage == k + 1 && !i.forward_value && !i.needed_forward) {
            stages[k].inputs.push(token(k + 1, false));
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Buffer {
    Weights,
    Activation(u64),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Instruction {
    Alloc { buffer: Buffer, bytes: u64 },
    Recv { tensor: NodeId, microbatch: u64, from: usize },
    Compute { stage: usize, microbatch: u64, pass: Pass, duration: Time },
    Send { tensor: NodeId, microbatch: u64, to: usize, bytes: u64, transfer: Time },
    AllGather { tensor: NodeId, microbatch: u64, duration: Time },
    Free { buffer: Buffer },
    Sync,
}

impl Instruction {
    pub fn label(&self) -> String {
        match self {
            Instruction::Alloc { buffer, bytes } => format!("alloc {buffer:?} {bytes}B"),
            Instruction::Recv { tensor: CONTROL_TOKEN, microbatch, from } => format!("recv ctrl mb{microbatch} <- s{from}"),
            Instruction::Recv { tensor, microbatch, from } => format!("recv t{tensor} mb{microbatch} <- s{from}"),
            Instruction::Send { tensor: CONTROL_TOKEN, microbatch, to, .. } => format!("send ctrl mb{microbatch} -> s{to}"),
            Instruction::Compute { stage, microbatch, pass, .. } => format!("{pass:?} s{stage} mb{microbatch}").to_lowercase(),
            Instruction::Send { tensor, microbatch, to, .. } => format!("send t{tensor} mb{microbatch} -> s{to}"),
            Instruction::AllGather { tensor, microbatch, .. } => format!("all_gather t{tensor} mb{microbatch}"),
            Instruction::Free { buffer } => format!("free {buffer:?}"),
            Instruction::Sync => "sync".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeshProgram {
    pub stage: usize,
    pub devices: Vec<DeviceId>,
    pub instructions: Vec<Instruction>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Program {
    pub schedule: Schedule,
    pub b: u64,
    pub device_memory: u64,
    pub meshes: Vec<MeshProgram>,
}

/// Per-stage order of `(microbatch, pass)` computations.
pub fn schedule_order(schedule: Schedule, stage: usize, stages: usize, b: u64, backward: bool) -> Vec<(u64, Pass)> {
    let fwd = |m| (m, Pass::Fwd);
    let bwd = |m| (m, Pass::Bwd);
    if !backward {
        return (0..b).map(fwd).collect();
    }
    match schedule {
        Schedule::GPipe => (0..b).map(fwd).chain((0..b).map(bwd)).collect(),
        Schedule::OneFOneB => {
            let warmup = ((stages - stage - 1) as u64).min(b);
            let mut order: Vec<(u64, Pass)> = (0..warmup).map(fwd).collect();
            for i in 0..b - warmup {
                order.push(fwd(warmup + i));
                order.push(bwd(i));
            }
            order.extend((b - warmup..b).map(bwd));
            order
        }
    }
}

/// Static instruction lists realising `schedule` for the skeleton's `B`.
pub fn emit_instructions(sk: &PipelineSkeleton, schedule: Schedule) -> Program {
    let n = sk.stages.len();
    let mut meshes = Vec::with_capacity(n);
    for (p, st) in sk.stages.iter().enumerate() {
        let mut ins = vec![Instruction::Alloc { buffer: Buffer::Weights, bytes: st.mem_stage }];
        for (mb, pass) in schedule_order(schedule, p, n, sk.b, sk.has_backward) {
            let forward = pass == Pass::Fwd;
            if forward {
                ins.push(Instruction::Alloc { buffer: Buffer::Activation(mb), bytes: st.mem_act });
            }
            for i in st.inputs.iter().filter(|i| i.needed_forward == forward) {
                ins.push(Instruction::Recv { tensor: i.tensor, microbatch: mb, from: i.from_stage });
                if i.all_gather > Time::ZERO {
                    ins.push(Instruction::AllGather { tensor: i.tensor, microbatch: mb, duration: i.all_gather });
                }
            }
            let duration = if forward { st.t_fwd } else { st.t_bwd };
            ins.push(Instruction::Compute { stage: p, microbatch: mb, pass, duration });
            for (q, other) in sk.stages.iter().enumerate() {
                for i in other.inputs.iter().filter(|i| i.from_stage == p && i.forward_value == forward) {
                    ins.push(Instruction::Send { tensor: i.tensor, microbatch: mb, to: q, bytes: i.bytes, transfer: i.transfer });
                }
            }
            if !forward || !sk.has_backward {
                ins.push(Instruction::Free { buffer: Buffer::Activation(mb) });
            }
        }
        ins.push(Instruction::Free { buffer: Buffer::Weights });
        ins.push(Instruction::Sync);
        meshes.push(MeshProgram { stage: p, devices: st.devices.clone(), instructions: ins });
    }
    Program { schedule, b: sk.b, device_memory: sk.device_memory, meshes }
}
