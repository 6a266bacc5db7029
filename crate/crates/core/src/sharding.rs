//! Sharding specs, per-operator parallel algorithms and resharding.
//!
//! A spec assigns each tensor dimension either `R` (replicated) or `S^{..}`
//! (split along one or both logical mesh axes). When a dimension is split
//! along two axes, the first listed axis is the major one: on a 2x2 mesh
//! `S^{01}R` gives device `(a0, a1)` row block `a0 * 2 + a1`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{OpKind, OpNode, TensorShape};
use crate::mesh::LogicalMesh;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ShardingError {
    #[error("cannot parse sharding spec `{0}`")]
    Parse(String),
    #[error("spec {spec} has rank {spec_rank} but the tensor has rank {rank}")]
    RankMismatch { spec: String, spec_rank: usize, rank: usize },
    #[error("spec {0} uses a mesh axis more than once")]
    DuplicateAxis(String),
    #[error("spec {spec}: mesh axis {axis} does not exist")]
    UnknownAxis { spec: String, axis: usize },
    #[error("spec {spec}: dim {dim} of extent {extent} is not divisible into {parts} parts")]
    Indivisible { spec: String, dim: usize, extent: u64, parts: u64 },
    #[error("node {node}: operator kind {kind} has no parallel algorithms")]
    Unsupported { node: usize, kind: String },
    #[error("node {node}: {reason}")]
    BadOperands { node: usize, reason: String },
}

/// Sharding of one tensor dimension.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DimSharding {
    Replicated,
    /// Mesh axes, major first.
    Split(Vec<usize>),
}

impl DimSharding {
    pub fn axes(&self) -> &[usize] {
        match self {
            DimSharding::Replicated => &[],
            DimSharding::Split(a) => a,
        }
    }
}

/// Per-dimension layout of a tensor on a 2-D logical mesh.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ShardingSpec(Vec<DimSharding>);

impl ShardingSpec {
    pub fn new(dims: Vec<DimSharding>) -> Result<Self, ShardingError> {
        let spec = ShardingSpec(dims);
        let mut seen = [false; 2];
        for d in &spec.0 {
            if let DimSharding::Split(axes) = d {
                if axes.is_empty() {
                    return Err(ShardingError::Parse(spec.to_string()));
                }
                for &a in axes {
                    if a > 1 {
                        return Err(ShardingError::UnknownAxis { spec: spec.to_string(), axis: a });
                    }
                    if seen[a] {
                        return Err(ShardingError::DuplicateAxis(spec.to_string()));
                    }
                    seen[a] = true;
                }
            }
        }
        Ok(spec)
    }

    pub fn replicated(rank: usize) -> Self {
        ShardingSpec(vec![DimSharding::Replicated; rank])
    }

    pub fn dims(&self) -> &[DimSharding] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    /// Tensor dimension split along `axis`, if any.
    pub fn dim_of_axis(&self, axis: usize) -> Option<usize> {
        self.0.iter().position(|d| d.axes().contains(&axis))
    }

    pub fn is_fully_replicated(&self) -> bool {
        self.0.iter().all(|d| *d == DimSharding::Replicated)
    }

    /// Mesh axes not used by any split.
    pub fn replication_mesh_axes(&self) -> Vec<usize> {
        (0..2).filter(|&a| self.dim_of_axis(a).is_none()).collect()
    }

    /// Number of pieces dimension `dim` is cut into on `mesh`.
    pub fn parts(&self, dim: usize, mesh: &LogicalMesh) -> u64 {
        self.0[dim].axes().iter().map(|&a| mesh.extent(a) as u64).product()
    }

    /// Total number of distinct tiles.
    pub fn num_tiles(&self, mesh: &LogicalMesh) -> u64 {
        (0..self.rank()).map(|d| self.parts(d, mesh)).product()
    }

    /// Bytes of one device's tile.
    pub fn shard_bytes(&self, shape: &TensorShape, mesh: &LogicalMesh) -> u64 {
        shape.byte_size() / self.num_tiles(mesh)
    }

    /// Checks rank and even divisibility of every split dimension.
    pub fn validate(&self, shape: &TensorShape, mesh: &LogicalMesh) -> Result<(), ShardingError> {
        if self.rank() != shape.rank() {
            return Err(ShardingError::RankMismatch { spec: self.to_string(), spec_rank: self.rank(), rank: shape.rank() });
        }
        for (dim, &extent) in shape.dims().iter().enumerate() {
            let parts = self.parts(dim, mesh);
            if extent % parts != 0 {
                return Err(ShardingError::Indivisible { spec: self.to_string(), dim, extent, parts });
            }
        }
        Ok(())
    }

    /// Half-open index range per dimension held by the device at logical
    /// coordinates `coords`.
    pub fn tile(&self, shape: &TensorShape, mesh: &LogicalMesh, coords: [u32; 2]) -> Vec<(u64, u64)> {
        shape
            .dims()
            .iter()
            .zip(&self.0)
            .map(|(&extent, d)| {
                let mut block = 0u64;
                let mut parts = 1u64;
                for &a in d.axes() {
                    block = block * mesh.extent(a) as u64 + coords[a] as u64;
                    parts *= mesh.extent(a) as u64;
                }
                let len = extent / parts;
                (block * len, (block + 1) * len)
            })
            .collect()
    }
}

impl fmt::Display for ShardingSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in &self.0 {
            match d {
                DimSharding::Replicated => f.write_str("R")?,
                DimSharding::Split(axes) if axes.len() == 1 => write!(f, "S^{}", axes[0])?,
                DimSharding::Split(axes) => {
                    f.write_str("S^{")?;
                    for a in axes {
                        write!(f, "{a}")?;
                    }
                    f.write_str("}")?;
                }
            }
        }
        Ok(())
    }
}

impl FromStr for ShardingSpec {
    type Err = ShardingError;

    /// Grammar: one token per dim, `R` or `S^<digit>` or `S^{<digits>}`.
    fn from_str(s: &str) -> Result<Self, ShardingError> {
        let err = || ShardingError::Parse(s.to_string());
        let mut dims = Vec::new();
        let mut chars = s.chars().peekable();
        while let Some(c) = chars.next() {
            match c {
                'R' => dims.push(DimSharding::Replicated),
                'S' => {
                    if chars.next() != Some('^') {
                        return Err(err());
                    }
                    let mut axes = Vec::new();
                    match chars.next() {
                        Some('{') => loop {
                            match chars.next() {
                                Some('}') => break,
                                Some(d) => axes.push(d.to_digit(10).ok_or_else(err)? as usize),
                                None => return Err(err()),
                            }
                        },
                        Some(d) => axes.push(d.to_digit(10).ok_or_else(err)? as usize),
                        None => return Err(err()),
                    }
                    if axes.is_empty() {
                        return Err(err());
                    }
                    dims.push(DimSharding::Split(axes));
                }
                _ => return Err(err()),
            }
        }
        ShardingSpec::new(dims)
    }
}

impl TryFrom<String> for ShardingSpec {
    type Error = ShardingError;
    fn try_from(s: String) -> Result<Self, ShardingError> {
        s.parse()
    }
}

impl From<ShardingSpec> for String {
    fn from(s: ShardingSpec) -> String {
        s.to_string()
    }
}

pub fn spec_equal(a: &ShardingSpec, b: &ShardingSpec) -> bool {
    a == b
}

pub fn spec_is_fully_replicated(spec: &ShardingSpec) -> bool {
    spec.is_fully_replicated()
}

pub fn replication_mesh_axes(spec: &ShardingSpec) -> Vec<usize> {
    spec.replication_mesh_axes()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectiveKind {
    AllReduce,
    AllGather,
    AllToAll,
    ReduceScatter,
}

impl fmt::Display for CollectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CollectiveKind::AllReduce => "all-reduce",
            CollectiveKind::AllGather => "all-gather",
            CollectiveKind::AllToAll => "all-to-all",
            CollectiveKind::ReduceScatter => "reduce-scatter",
        })
    }
}

/// One collective over a group of mesh axes.
///
/// `bytes` is the concrete per-device payload; symbolically it equals the
/// full tensor size `M` divided by the extents of `divisor_axes`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Collective {
    pub kind: CollectiveKind,
    pub bytes: u64,
    pub divisor_axes: Vec<usize>,
    pub axes: Vec<usize>,
}

impl Collective {
    fn new(kind: CollectiveKind, tensor_bytes: u64, divisor_axes: Vec<usize>, axes: Vec<usize>, mesh: &LogicalMesh) -> Self {
        let div: u64 = divisor_axes.iter().map(|&a| mesh.extent(a) as u64).product();
        Collective { kind, bytes: tensor_bytes / div, divisor_axes, axes }
    }
}

impl fmt::Display for Collective {
    /// Symbolic form, e.g. `all-reduce(M/n_0, 1)` or `all-to-all(M/(n_0·n_1), 1)`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let size = match self.divisor_axes.as_slice() {
            [] => "M".to_string(),
            [a] => format!("M/n_{a}"),
            many => {
                let parts: Vec<String> = many.iter().map(|a| format!("n_{a}")).collect();
                format!("M/({})", parts.join("·"))
            }
        };
        let axes = match self.axes.as_slice() {
            [a] => a.to_string(),
            many => {
                let parts: Vec<String> = many.iter().map(usize::to_string).collect();
                format!("{{{}}}", parts.join(","))
            }
        };
        write!(f, "{}({size}, {axes})", self.kind)
    }
}

/// Symbolic cost of a collective list: `0` when empty.
pub fn format_cost(collectives: &[Collective]) -> String {
    if collectives.is_empty() {
        "0".to_string()
    } else {
        collectives.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" + ")
    }
}

/// One way to run an operator on a logical mesh.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelAlgorithm {
    pub op: usize,
    /// Human-readable label: the loop mapping for matmul-family operators,
    /// the output spec otherwise.
    pub name: String,
    /// Loop index to mesh axes, matmul-family only.
    pub loop_mapping: Vec<(char, Vec<usize>)>,
    pub output_spec: ShardingSpec,
    pub input_specs: Vec<ShardingSpec>,
    pub comm: Vec<Collective>,
}

/// Mesh axes with more than one device; axes of extent 1 never split.
fn effective_axes(mesh: &LogicalMesh) -> Vec<usize> {
    (0..2).filter(|&a| mesh.extent(a) > 1).collect()
}

/// Every valid spec of `shape` on `mesh`, most sharded first (ties keep
/// generation order). Only effective axes split; a dim split on both axes
/// lists them ascending.
pub fn legal_specs(shape: &TensorShape, mesh: &LogicalMesh) -> Vec<ShardingSpec> {
    let eff = effective_axes(mesh);
    let rank = shape.rank();
    // choice per effective axis: None or Some(dim)
    let mut choices: Vec<Vec<Option<usize>>> = vec![vec![]];
    for _ in &eff {
        choices = choices
            .into_iter()
            .flat_map(|prefix| {
                std::iter::once(None).chain((0..rank).map(Some)).map(move |c| {
                    let mut p = prefix.clone();
                    p.push(c);
                    p
                })
            })
            .collect();
    }
    let mut specs: Vec<ShardingSpec> = choices
        .into_iter()
        .filter_map(|choice| {
            let mut dims = vec![DimSharding::Replicated; rank];
            for (&axis, c) in eff.iter().zip(choice) {
                if let Some(d) = c {
                    match &mut dims[d] {
                        DimSharding::Replicated => dims[d] = DimSharding::Split(vec![axis]),
                        DimSharding::Split(v) => v.push(axis),
                    }
                }
            }
            let spec = ShardingSpec(dims);
            spec.validate(shape, mesh).ok().map(|_| spec)
        })
        .collect();
    specs.sort_by_key(|s| std::cmp::Reverse(s.num_tiles(mesh)));
    specs
}

/// Loop structure of a matmul-family op: index names, and for lhs, rhs and
/// output the index carried by each tensor dimension.
fn loop_structure(kind: OpKind) -> (&'static [char], [&'static [char]; 3]) {
    match kind {
        OpKind::Matmul => (&['i', 'j', 'k'], [&['i', 'k'], &['k', 'j'], &['i', 'j']]),
        _ => (&['b', 'i', 'j', 'k'], [&['b', 'i', 'k'], &['b', 'k', 'j'], &['b', 'i', 'j']]),
    }
}

fn matmul_algorithms(node: &OpNode, operands: &[&TensorShape], mesh: &LogicalMesh) -> Vec<ParallelAlgorithm> {
    let (indices, layouts) = loop_structure(node.kind);
    let extent_of = |idx: char| -> u64 {
        let pos = layouts[2].iter().position(|&c| c == idx);
        match pos {
            Some(p) => node.out_shape.dims()[p],
            None => operands[0].dims()[layouts[0].iter().position(|&c| c == idx).expect("k is on the lhs")],
        }
    };
    let eff = effective_axes(mesh);
    let build = |assign: &[Option<char>]| -> Option<ParallelAlgorithm> {
        let mut mapping: Vec<(char, Vec<usize>)> = Vec::new();
        for &idx in indices {
            let axes: Vec<usize> = eff.iter().zip(assign).filter(|(_, c)| **c == Some(idx)).map(|(&a, _)| a).collect();
            if !axes.is_empty() {
                let parts: u64 = axes.iter().map(|&a| mesh.extent(a) as u64).product();
                if extent_of(idx) % parts != 0 {
                    return None;
                }
                mapping.push((idx, axes));
            }
        }
        let spec_for = |layout: &[char]| {
            ShardingSpec(
                layout
                    .iter()
                    .map(|c| match mapping.iter().find(|(i, _)| i == c) {
                        Some((_, axes)) => DimSharding::Split(axes.clone()),
                        None => DimSharding::Replicated,
                    })
                    .collect(),
            )
        };
        let output_spec = spec_for(layouts[2]);
        let input_specs = vec![spec_for(layouts[0]), spec_for(layouts[1])];
        let comm = match mapping.iter().find(|(i, _)| *i == 'k') {
            None => vec![],
            Some((_, k_axes)) => {
                let divisor: Vec<usize> =
                    mapping.iter().filter(|(i, _)| *i != 'k').flat_map(|(_, a)| a.iter().copied()).collect();
                let mut divisor = divisor;
                divisor.sort_unstable();
                vec![Collective::new(CollectiveKind::AllReduce, node.out_shape.byte_size(), divisor, k_axes.clone(), mesh)]
            }
        };
        let name = if mapping.is_empty() {
            "replicated".to_string()
        } else {
            mapping
                .iter()
                .map(|(i, axes)| match axes.as_slice() {
                    [a] => format!("{i}->{a}"),
                    _ => format!("{i}->{{{}}}", axes.iter().map(usize::to_string).collect::<String>()),
                })
                .collect::<Vec<_>>()
                .join(", ")
        };
        Some(ParallelAlgorithm { op: node.id, name, loop_mapping: mapping, output_spec, input_specs, comm })
    };

    let mut assignments: Vec<Vec<Option<char>>> = vec![vec![]];
    for _ in &eff {
        assignments = assignments
            .into_iter()
            .flat_map(|prefix| {
                indices.iter().map(move |&i| {
                    let mut p = prefix.clone();
                    p.push(Some(i));
                    p
                })
            })
            .collect();
    }
    let algos: Vec<ParallelAlgorithm> = assignments.iter().filter_map(|a| build(a)).collect();
    if !algos.is_empty() {
        return algos;
    }
    // No way to use every device without replicated compute; fall back to
    // leaving axes idle.
    let mut relaxed: Vec<Vec<Option<char>>> = vec![vec![]];
    for _ in &eff {
        relaxed = relaxed
            .into_iter()
            .flat_map(|prefix| {
                std::iter::once(None).chain(indices.iter().map(|&i| Some(i))).map(move |c| {
                    let mut p = prefix.clone();
                    p.push(c);
                    p
                })
            })
            .collect();
    }
    relaxed.iter().filter_map(|a| build(a)).collect()
}

/// Maps a split of input dim `d` onto the output dims of a reshape when the
/// partition of the flattened index space is identical.
fn reshape_spec(input: &TensorShape, output: &TensorShape, spec: &ShardingSpec, mesh: &LogicalMesh) -> Option<ShardingSpec> {
    let mut dims = vec![DimSharding::Replicated; output.rank()];
    for (d, ds) in spec.dims().iter().enumerate() {
        if let DimSharding::Split(axes) = ds {
            let parts = spec.parts(d, mesh);
            let prefix = input.prefix_product(d);
            let e = (0..output.rank()).find(|&e| {
                output.prefix_product(e) == prefix
                    && output.dims()[e].is_multiple_of(parts)
                    && dims[e] == DimSharding::Replicated
            })?;
            dims[e] = DimSharding::Split(axes.clone());
        }
    }
    Some(ShardingSpec(dims))
}

/// Parallel algorithms of `node` on `mesh`. `operands` are the operand shapes
/// in input order.
pub fn enumerate_algorithms(
    node: &OpNode,
    operands: &[&TensorShape],
    mesh: &LogicalMesh,
) -> Result<Vec<ParallelAlgorithm>, ShardingError> {
    let simple = |spec: ShardingSpec, inputs: Vec<ShardingSpec>, comm: Vec<Collective>| ParallelAlgorithm {
        op: node.id,
        name: spec.to_string(),
        loop_mapping: vec![],
        output_spec: spec,
        input_specs: inputs,
        comm,
    };
    let bad = |reason: &str| ShardingError::BadOperands { node: node.id, reason: reason.to_string() };
    match node.kind {
        OpKind::Input | OpKind::Parameter => {
            Ok(legal_specs(&node.out_shape, mesh).into_iter().map(|s| simple(s, vec![], vec![])).collect())
        }
        OpKind::Matmul | OpKind::BatchedMatmul => {
            if operands.len() != 2 {
                return Err(bad("matmul-family ops take two operands"));
            }
            Ok(matmul_algorithms(node, operands, mesh))
        }
        OpKind::Elementwise { .. } => Ok(legal_specs(&node.out_shape, mesh)
            .into_iter()
            .map(|s| simple(s.clone(), vec![s; operands.len()], vec![]))
            .collect()),
        OpKind::Reduction { axis } => {
            let input = operands.first().ok_or_else(|| bad("reduction takes one operand"))?;
            Ok(legal_specs(input, mesh)
                .into_iter()
                .map(|s| {
                    let (out, comm) = reduce_spec(&s, axis, &node.out_shape, mesh);
                    simple(out, vec![s], comm)
                })
                .collect())
        }
        OpKind::Reshape => {
            let input = operands.first().ok_or_else(|| bad("reshape takes one operand"))?;
            Ok(legal_specs(input, mesh)
                .into_iter()
                .filter_map(|s| reshape_spec(input, &node.out_shape, &s, mesh).map(|out| simple(out, vec![s], vec![])))
                .collect())
        }
    }
}

/// Output spec of a reduction over `axis` of an input laid out as `spec`, and
/// the all-reduce needed when the reduced dim was split.
pub fn reduce_spec(spec: &ShardingSpec, axis: usize, out_shape: &TensorShape, mesh: &LogicalMesh) -> (ShardingSpec, Vec<Collective>) {
    let mut dims = spec.dims().to_vec();
    let reduced = dims.remove(axis);
    let out = ShardingSpec(dims);
    let comm = match reduced {
        DimSharding::Replicated => vec![],
        DimSharding::Split(axes) => {
            let mut divisor: Vec<usize> = out.dims().iter().flat_map(|d| d.axes().iter().copied()).collect();
            divisor.sort_unstable();
            vec![Collective::new(CollectiveKind::AllReduce, out_shape.byte_size(), divisor, axes, mesh)]
        }
    };
    (out, comm)
}

/// Propagates a spec through a reshape, if the layout maps exactly.
pub fn propagate_reshape(input: &TensorShape, output: &TensorShape, spec: &ShardingSpec, mesh: &LogicalMesh) -> Option<ShardingSpec> {
    reshape_spec(input, output, spec, mesh)
}

/// Collectives converting `src` into `dst`, applied axis by axis (axis 0,
/// then axis 1):
///
/// * axis split in `src` only: all-gather of the shard as it is after the gather;
/// * axis split on different dims: all-to-all of the current shard;
/// * axis split in `dst` only: local slice, free.
pub fn resharding_cost(
    src: &ShardingSpec,
    dst: &ShardingSpec,
    shape: &TensorShape,
    mesh: &LogicalMesh,
) -> Result<Vec<Collective>, ShardingError> {
    src.validate(shape, mesh)?;
    dst.validate(shape, mesh)?;
    let mut out = Vec::new();
    if src == dst {
        return Ok(out);
    }
    // Axes currently splitting the tensor (they divide the shard size).
    let mut active: Vec<usize> = (0..2).filter(|&a| src.dim_of_axis(a).is_some()).collect();
    for axis in 0..2 {
        if mesh.extent(axis) == 1 {
            continue;
        }
        match (src.dim_of_axis(axis), dst.dim_of_axis(axis)) {
            (Some(_), None) => {
                active.retain(|&a| a != axis);
                out.push(Collective::new(CollectiveKind::AllGather, shape.byte_size(), active.clone(), vec![axis], mesh));
            }
            (Some(s), Some(d)) if s != d => {
                out.push(Collective::new(CollectiveKind::AllToAll, shape.byte_size(), active.clone(), vec![axis], mesh));
            }
            _ => {}
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(s: &str) -> ShardingSpec {
        s.parse().unwrap()
    }

    fn mesh22() -> LogicalMesh {
        LogicalMesh::uniform(2, 2, 1.0)
    }

    #[test]
    fn parse_and_print() {
        for s in ["RS^0S^1", "S^{01}R", "RR", "S^0R", "RS^1"] {
            assert_eq!(spec(s).to_string(), s);
        }
        assert_eq!(spec("S^{0}R").to_string(), "S^0R");
        assert!("SR".parse::<ShardingSpec>().is_err());
        assert!("S^0S^0".parse::<ShardingSpec>().is_err());
        assert!("S^2R".parse::<ShardingSpec>().is_err());
        assert!("XR".parse::<ShardingSpec>().is_err());
    }

    #[test]
    fn replication_axes() {
        assert_eq!(spec("RS^0").replication_mesh_axes(), vec![1]);
        assert!(spec("S^0S^1").replication_mesh_axes().is_empty());
        assert_eq!(spec("RR").replication_mesh_axes(), vec![0, 1]);
        assert!(spec_is_fully_replicated(&spec("RR")));
        assert!(spec_equal(&spec("S^0R"), &spec("S^{0}R")));
    }

    #[test]
    fn all_specs_of_a_matrix_on_2x2() {
        let shape = TensorShape::f32(&[4, 4]).unwrap();
        let specs: Vec<String> = legal_specs(&shape, &mesh22()).iter().map(|s| s.to_string()).collect();
        // Table of all layouts of a matrix on a 2x2 mesh.
        for s in ["RR", "S^0R", "S^1R", "RS^0", "RS^1", "S^0S^1", "S^1S^0", "S^{01}R", "RS^{01}"] {
            assert!(specs.contains(&s.to_string()), "{s} missing from {specs:?}");
        }
        assert_eq!(specs.len(), 9);
        assert_eq!(specs.last().unwrap(), "RR");
    }

    #[test]
    fn tiles_follow_major_axis_order() {
        let shape = TensorShape::f32(&[8, 4]).unwrap();
        let m = mesh22();
        let s = spec("S^{01}R");
        let rows: Vec<(u64, u64)> = (0..4).map(|k| s.tile(&shape, &m, m.coords(k))[0]).collect();
        assert_eq!(rows, vec![(0, 2), (2, 4), (4, 6), (6, 8)]);
    }

    #[test]
    fn divisibility_filters_specs() {
        let shape = TensorShape::f32(&[3, 4]).unwrap();
        let specs = legal_specs(&shape, &mesh22());
        assert!(specs.iter().all(|s| s.dims()[0] == DimSharding::Replicated));
    }

    #[test]
    fn extent_one_axes_never_split() {
        let shape = TensorShape::f32(&[4, 4]).unwrap();
        let m = LogicalMesh::uniform(1, 2, 1.0);
        let specs: Vec<String> = legal_specs(&shape, &m).iter().map(|s| s.to_string()).collect();
        assert_eq!(specs, vec!["S^1R", "RS^1", "RR"]);
    }

    #[test]
    fn reshape_propagation_is_exact_or_absent() {
        let m = LogicalMesh::uniform(1, 2, 1.0);
        let a = TensorShape::f32(&[8, 4]).unwrap();
        let b = TensorShape::f32(&[2, 4, 4]).unwrap();
        assert_eq!(reshape_spec(&a, &b, &spec("S^1R"), &m), Some(spec("S^1RR")));
        assert_eq!(reshape_spec(&a, &b, &spec("RS^1"), &m), Some(spec("RRS^1")));
        let c = TensorShape::f32(&[4, 8]).unwrap();
        assert_eq!(reshape_spec(&a, &c, &spec("RS^1"), &m), None);
    }

    #[test]
    fn reduction_of_split_dim_all_reduces() {
        let m = mesh22();
        let out = TensorShape::f32(&[4]).unwrap();
        let (s, comm) = reduce_spec(&spec("S^0S^1"), 1, &out, &m);
        assert_eq!(s, spec("S^0"));
        assert_eq!(format_cost(&comm), "all-reduce(M/n_0, 1)");
        assert_eq!(comm[0].bytes, 8);
    }

    #[test]
    fn resharding_identity_and_replicated_source_are_free() {
        let shape = TensorShape::f32(&[4, 4]).unwrap();
        let m = mesh22();
        for dst in legal_specs(&shape, &m) {
            assert!(resharding_cost(&dst, &dst, &shape, &m).unwrap().is_empty());
            assert!(resharding_cost(&spec("RR"), &dst, &shape, &m).unwrap().is_empty());
        }
    }

    #[test]
    fn resharding_rejects_invalid_specs() {
        let shape = TensorShape::f32(&[3, 4]).unwrap();
        assert!(resharding_cost(&spec("S^0R"), &spec("RR"), &shape, &mesh22()).is_err());
        assert!(resharding_cost(&spec("S^0"), &spec("RR"), &shape, &mesh22()).is_err());
    }

    #[test]
    fn collective_display() {
        let m = mesh22();
        let c = Collective::new(CollectiveKind::AllToAll, 64, vec![0, 1], vec![1], &m);
        assert_eq!(c.to_string(), "all-to-all(M/(n_0·n_1), 1)");
        assert_eq!(c.bytes, 16);
        let c = Collective::new(CollectiveKind::AllReduce, 64, vec![], vec![0, 1], &m);
        assert_eq!(c.to_string(), "all-reduce(M, {0,1})");
    }

    #[test]
    fn spec_serde_as_string() {
        let s = spec("S^{01}R");
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(json, "\"S^{01}R\"");
        assert_eq!(serde_json::from_str::<ShardingSpec>(&json).unwrap(), s);
    }
}
