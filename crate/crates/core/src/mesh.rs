//! Physical cluster mesh, submesh shapes, logical views and exact covering.
//!
//! The cluster is an `N x M` grid: `N` hosts with `M = 2^m` devices each.
//! Pipeline stages receive rectangular submeshes drawn from a restricted
//! shape set (single-host power-of-two rows, or full-width row bands), which
//! can always tile the whole grid when the device counts add up.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type DeviceId = u32;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MeshError {
    #[error("invalid cluster: {0}")]
    InvalidCluster(String),
    #[error("submesh shape {0} is not admissible on this cluster")]
    Inadmissible(SubmeshShape),
    #[error("covering precondition violated: {0}")]
    Precondition(String),
}

/// The physical device grid and its performance constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ClusterDoc", into = "ClusterDoc")]
pub struct ClusterMesh {
    num_hosts: u32,
    devices_per_host: u32,
    /// bytes/s between devices of one host
    pub intra_host_bandwidth: f64,
    /// bytes/s between hosts
    pub inter_host_bandwidth: f64,
    /// seconds per collective launch
    pub alpha_latency: f64,
    /// FLOP/s per device
    pub device_flops: f64,
    /// bytes per device
    pub device_memory: u64,
}

/// Config-file spelling of a cluster.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterDoc {
    pub hosts: u32,
    pub devices_per_host: u32,
    pub intra_bw: f64,
    pub inter_bw: f64,
    #[serde(default)]
    pub alpha: f64,
    #[serde(default = "unit_flops")]
    pub device_flops: f64,
    /// Omitted means unbounded.
    #[serde(default = "unbounded", skip_serializing_if = "is_unbounded")]
    pub device_memory: u64,
}

fn unit_flops() -> f64 {
    1.0
}

fn unbounded() -> u64 {
    u64::MAX
}

fn is_unbounded(v: &u64) -> bool {
    *v == u64::MAX
}

impl TryFrom<ClusterDoc> for ClusterMesh {
    type Error = MeshError;
    fn try_from(d: ClusterDoc) -> Result<Self, MeshError> {
        let mut c = ClusterMesh::new(d.hosts, d.devices_per_host, d.intra_bw, d.inter_bw)?;
        c.alpha_latency = d.alpha;
        c.device_flops = d.device_flops;
        c.device_memory = d.device_memory;
        c.validate()?;
        Ok(c)
    }
}

impl From<ClusterMesh> for ClusterDoc {
    fn from(c: ClusterMesh) -> Self {
        ClusterDoc {
            hosts: c.num_hosts,
            devices_per_host: c.devices_per_host,
            intra_bw: c.intra_host_bandwidth,
            inter_bw: c.inter_host_bandwidth,
            alpha: c.alpha_latency,
            device_flops: c.device_flops,
            device_memory: c.device_memory,
        }
    }
}

impl ClusterMesh {
    /// A cluster with zero launch latency, 1 FLOP/s devices and unbounded
    /// memory; adjust the public fields afterwards.
    pub fn new(num_hosts: u32, devices_per_host: u32, intra_bw: f64, inter_bw: f64) -> Result<Self, MeshError> {
        let c = ClusterMesh {
            num_hosts,
            devices_per_host,
            intra_host_bandwidth: intra_bw,
            inter_host_bandwidth: inter_bw,
            alpha_latency: 0.0,
            device_flops: 1.0,
            device_memory: u64::MAX,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), MeshError> {
        let bad = |m: String| Err(MeshError::InvalidCluster(m));
        if self.num_hosts == 0 {
            return bad("hosts must be >= 1".into());
        }
        if !self.devices_per_host.is_power_of_two() {
            return bad(format!("devices_per_host {} is not a power of two", self.devices_per_host));
        }
        if !(self.inter_host_bandwidth > 0.0 && self.inter_host_bandwidth.is_finite()) {
            return bad("inter-host bandwidth must be positive".into());
        }
        if !(self.intra_host_bandwidth >= self.inter_host_bandwidth && self.intra_host_bandwidth.is_finite()) {
            return bad("intra-host bandwidth must be >= inter-host bandwidth".into());
        }
        if !(self.alpha_latency >= 0.0 && self.alpha_latency.is_finite()) {
            return bad("alpha must be finite and >= 0".into());
        }
        if !(self.device_flops > 0.0 && self.device_flops.is_finite()) {
            return bad("device_flops must be positive".into());
        }
        Ok(())
    }

    pub fn num_hosts(&self) -> u32 {
        self.num_hosts
    }

    pub fn devices_per_host(&self) -> u32 {
        self.devices_per_host
    }

    pub fn num_devices(&self) -> u32 {
        self.num_hosts * self.devices_per_host
    }

    pub fn device_id(&self, host: u32, device: u32) -> DeviceId {
        host * self.devices_per_host + device
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[u32; 2]", into = "[u32; 2]")]
pub struct SubmeshShape {
    pub n: u32,
    pub m: u32,
}

impl From<[u32; 2]> for SubmeshShape {
    fn from([n, m]: [u32; 2]) -> Self {
        SubmeshShape { n, m }
    }
}

impl From<SubmeshShape> for [u32; 2] {
    fn from(s: SubmeshShape) -> Self {
        [s.n, s.m]
    }
}

impl fmt::Display for SubmeshShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.n, self.m)
    }
}

impl SubmeshShape {
    pub const fn new(n: u32, m: u32) -> Self {
        SubmeshShape { n, m }
    }

    pub fn num_devices(self) -> u32 {
        self.n * self.m
    }

    pub fn is_admissible(self, cluster: &ClusterMesh) -> bool {
        let (nn, mm) = (cluster.num_hosts, cluster.devices_per_host);
        (self.n == 1 && self.m.is_power_of_two() && self.m <= mm) || (self.n >= 2 && self.n <= nn && self.m == mm)
    }
}

/// `{(1,1), (1,2), ..., (1,M)} ∪ {(2,M), ..., (N,M)}`, largest first, then by
/// descending `n`.
pub fn admissible_shapes(cluster: &ClusterMesh) -> Vec<SubmeshShape> {
    let mm = cluster.devices_per_host;
    let mut shapes: Vec<SubmeshShape> = std::iter::successors(Some(1u32), |&m| (m < mm).then_some(m * 2))
        .map(|m| SubmeshShape::new(1, m))
        .chain((2..=cluster.num_hosts).map(|n| SubmeshShape::new(n, mm)))
        .collect();
    shapes.sort_by(|a, b| b.num_devices().cmp(&a.num_devices()).then(b.n.cmp(&a.n)));
    shapes
}

/// A placed rectangle of the cluster grid: hosts `[host_start, host_end)` x
/// devices `[device_start, device_end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmeshAssignment {
    pub shape: SubmeshShape,
    pub hosts: (u32, u32),
    pub devices: (u32, u32),
}

impl SubmeshAssignment {
    /// Physical device ids, row-major (host-major).
    pub fn device_ids(&self, cluster: &ClusterMesh) -> Vec<DeviceId> {
        (self.hosts.0..self.hosts.1)
            .flat_map(|h| (self.devices.0..self.devices.1).map(move |d| cluster.device_id(h, d)))
            .collect()
    }
}

/// Tiles the cluster with `shapes`; the result is index-aligned with the input.
///
/// Full-width pieces (`m = M`) become row bands, top-down by descending `n`.
/// Narrower pieces are merged bottom-up: at each power `p < log2 M`, pieces
/// of width `2^p` are paired in order into width-`2^(p+1)` blocks, until every
/// block spans a whole row. Blocks then take the remaining rows in order,
/// with each pair laid out left half then right half.
pub fn cover(cluster: &ClusterMesh, shapes: &[SubmeshShape]) -> Result<Vec<SubmeshAssignment>, MeshError> {
    for &s in shapes {
        if !s.is_admissible(cluster) {
            return Err(MeshError::Inadmissible(s));
        }
    }
    let total: u64 = shapes.iter().map(|s| s.num_devices() as u64).sum();
    if total != cluster.num_devices() as u64 {
        return Err(MeshError::Precondition(format!(
            "shapes hold {total} devices but the cluster has {}",
            cluster.num_devices()
        )));
    }
    let mm = cluster.devices_per_host;
    let mut out: Vec<Option<SubmeshAssignment>> = vec![None; shapes.len()];

    let mut wide: Vec<usize> = (0..shapes.len()).filter(|&i| shapes[i].m == mm).collect();
    wide.sort_by(|&a, &b| shapes[b].n.cmp(&shapes[a].n));
    let mut row = 0u32;
    for i in wide {
        let n = shapes[i].n;
        out[i] = Some(SubmeshAssignment { shape: shapes[i], hosts: (row, row + n), devices: (0, mm) });
        row += n;
    }

    enum Block {
        Leaf(usize),
        Pair(Box<Block>, Box<Block>),
    }
    let levels = mm.trailing_zeros();
    let mut by_level: BTreeMap<u32, Vec<Block>> = BTreeMap::new();
    for (i, s) in shapes.iter().enumerate() {
        if s.m < mm {
            by_level.entry(s.m.trailing_zeros()).or_default().push(Block::Leaf(i));
        }
    }
    for p in 0..levels {
        let items = by_level.remove(&p).unwrap_or_default();
        if !items.len().is_multiple_of(2) {
            return Err(MeshError::Precondition(format!("odd number ({}) of width-{} pieces", items.len(), 1 << p)));
        }
        let mut it = items.into_iter();
        let next = by_level.entry(p + 1).or_default();
        while let (Some(a), Some(b)) = (it.next(), it.next()) {
            next.push(Block::Pair(Box::new(a), Box::new(b)));
        }
    }
    fn place(block: Block, host: u32, start: u32, width: u32, shapes: &[SubmeshShape], out: &mut [Option<SubmeshAssignment>]) {
        match block {
            Block::Leaf(i) => {
                out[i] = Some(SubmeshAssignment { shape: shapes[i], hosts: (host, host + 1), devices: (start, start + width) })
            }
            Block::Pair(a, b) => {
                place(*a, host, start, width / 2, shapes, out);
                place(*b, host, start + width / 2, width / 2, shapes, out);
            }
        }
    }
    for block in by_level.remove(&levels).unwrap_or_default() {
        // Full-width leaves were placed above; only merged pairs reach here.
        if let Block::Leaf(_) = block {
            continue;
        }
        place(block, row, 0, mm, shapes, &mut out);
        row += 1;
    }
    debug_assert_eq!(row, cluster.num_hosts);
    Ok(out.into_iter().map(|a| a.expect("every piece is placed")).collect())
}

/// True iff the rectangles are in bounds, match their shapes, are pairwise
/// disjoint and cover every cell.
pub fn verify_cover(cluster: &ClusterMesh, assignments: &[SubmeshAssignment]) -> bool {
    let (nn, mm) = (cluster.num_hosts, cluster.devices_per_host);
    let mut grid = vec![false; (nn * mm) as usize];
    for a in assignments {
        let (h0, h1) = a.hosts;
        let (d0, d1) = a.devices;
        if h0 >= h1 || d0 >= d1 || h1 > nn || d1 > mm {
            return false;
        }
        if h1 - h0 != a.shape.n || d1 - d0 != a.shape.m {
            return false;
        }
        for h in h0..h1 {
            for d in d0..d1 {
                let cell = &mut grid[(h * mm + d) as usize];
                if *cell {
                    return false;
                }
                *cell = true;
            }
        }
    }
    grid.into_iter().all(|c| c)
}

/// A 2-D logical view of a physical submesh.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogicalMesh {
    pub shape: [u32; 2],
    pub axis_bandwidth: [f64; 2],
}

impl LogicalMesh {
    pub fn new(n: u32, m: u32, axis_bandwidth: [f64; 2]) -> Self {
        LogicalMesh { shape: [n, m], axis_bandwidth }
    }

    /// Uniform-bandwidth mesh, mostly for tests.
    pub fn uniform(n: u32, m: u32, bandwidth: f64) -> Self {
        Self::new(n, m, [bandwidth, bandwidth])
    }

    pub fn extent(&self, axis: usize) -> u32 {
        self.shape[axis]
    }

    pub fn num_devices(&self) -> u32 {
        self.shape[0] * self.shape[1]
    }

    /// Logical `(row, col)` of the `k`-th device in row-major order.
    pub fn coords(&self, k: u32) -> [u32; 2] {
        [k / self.shape[1], k % self.shape[1]]
    }
}

impl fmt::Display for LogicalMesh {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.shape[0], self.shape[1])
    }
}

/// Every `(n_l, m_l)` with `n_l * m_l = n * m`, ascending `n_l`.
///
/// Logical device `(i, j)` maps to the submesh's `(i * m_l + j)`-th device in
/// host-major order. An axis whose device groups all stay on one host gets
/// the intra-host bandwidth; if any group crosses hosts it gets the
/// inter-host bandwidth.
pub fn logical_views(shape: SubmeshShape, cluster: &ClusterMesh) -> Vec<LogicalMesh> {
    let total = shape.num_devices();
    let width = shape.m;
    (1..=total)
        .filter(|nl| total.is_multiple_of(*nl))
        .map(|nl| {
            let ml = total / nl;
            let host_of = |i: u32, j: u32| (i * ml + j) / width;
            let axis0_local = (0..ml).all(|j| (0..nl).all(|i| host_of(i, j) == host_of(0, j)));
            let axis1_local = (0..nl).all(|i| (0..ml).all(|j| host_of(i, j) == host_of(i, 0)));
            let bw = |local: bool| if local { cluster.intra_host_bandwidth } else { cluster.inter_host_bandwidth };
            LogicalMesh::new(nl, ml, [bw(axis0_local), bw(axis1_local)])
        })
        .collect()
}
