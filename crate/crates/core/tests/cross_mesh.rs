//! Cross-mesh resharding: both strategies materialize every destination
//! tile, and the local all-gather variant never moves more data between
//! meshes than the naive one.

mod support;

use meshplan::graph::TensorShape;
use meshplan::mesh::{DeviceId, LogicalMesh};
use meshplan::orchestrate::{cross_mesh_plan, verify_materialization, CrossMeshStrategy, MeshSide};
use meshplan::sharding::{legal_specs, ShardingSpec};
use proptest::prelude::*;
use support::*;

#[derive(Debug)]
struct Case {
    shape: TensorShape,
    src_mesh: LogicalMesh,
    dst_mesh: LogicalMesh,
    src_spec: ShardingSpec,
    dst_spec: ShardingSpec,
    src_dev: Vec<DeviceId>,
    dst_dev: Vec<DeviceId>,
}

impl Case {
    fn sides(&self) -> (MeshSide<'_>, MeshSide<'_>) {
        (
            MeshSide { spec: &self.src_spec, mesh: &self.src_mesh, devices: &self.src_dev },
            MeshSide { spec: &self.dst_spec, mesh: &self.dst_mesh, devices: &self.dst_dev },
        )
    }

    /// Devices per destination tile, the factor by which naive sending
    /// duplicates data.
    fn dst_replication(&self) -> u64 {
        self.dst_mesh.num_devices() as u64 / self.dst_spec.num_tiles(&self.dst_mesh)
    }
}

fn case() -> impl Strategy<Value = Case> {
    (
        prop::collection::vec(1u64..=8, 1..=2),
        (1u32..=4, 1u32..=4),
        (1u32..=4, 1u32..=4),
        any::<prop::sample::Index>(),
        any::<prop::sample::Index>(),
        any::<bool>(),
    )
        .prop_map(|(dims, (sn, sm), (dn, dm), si, di, shuffle)| {
            let shape = TensorShape::f32(&dims).unwrap();
            let src_mesh = LogicalMesh::uniform(sn, sm, 1e9);
            let dst_mesh = LogicalMesh::uniform(dn, dm, 1e9);
            let src_specs = legal_specs(&shape, &src_mesh);
            let dst_specs = legal_specs(&shape, &dst_mesh);
            let src_spec = src_specs[si.index(src_specs.len())].clone();
            let dst_spec = dst_specs[di.index(dst_specs.len())].clone();
            let n_src = src_mesh.num_devices();
            let mut src_dev: Vec<DeviceId> = (0..n_src).map(|d| d as DeviceId).collect();
            if shuffle {
                src_dev.reverse();
            }
            let dst_dev = (n_src..n_src + dst_mesh.num_devices()).map(|d| d as DeviceId).collect();
            Case { shape, src_mesh, dst_mesh, src_spec, dst_spec, src_dev, dst_dev }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn both_strategies_materialize_every_tile(c in case()) {
        let (src, dst) = c.sides();
        for strategy in [CrossMeshStrategy::Naive, CrossMeshStrategy::LocalAllGather] {
            let plan = cross_mesh_plan(&c.shape, src, dst, strategy).unwrap();
            prop_assert!(verify_materialization(&plan, &c.shape, src, dst), "{:?} {} -> {}", strategy, c.src_spec, c.dst_spec);
        }
    }

    #[test]
    fn local_all_gather_never_sends_more(c in case()) {
        let (src, dst) = c.sides();
        let naive = cross_mesh_plan(&c.shape, src, dst, CrossMeshStrategy::Naive).unwrap();
        let opt = cross_mesh_plan(&c.shape, src, dst, CrossMeshStrategy::LocalAllGather).unwrap();
        let bytes = c.shape.byte_size();
        prop_assert_eq!(opt.inter_mesh_bytes, bytes);
        prop_assert_eq!(naive.inter_mesh_bytes, bytes * c.dst_replication());
        prop_assert!(opt.max_device_bytes() <= naive.max_device_bytes());
        let cm = cost_model(&test_cluster(2, 4));
        prop_assert!(opt.transfer_time(&cm) <= naive.transfer_time(&cm));
        let strictly_less = opt.inter_mesh_bytes < naive.inter_mesh_bytes;
        let replicated_axis = c.dst_spec.replication_mesh_axes().iter().any(|&a| c.dst_mesh.extent(a) > 1);
        prop_assert_eq!(strictly_less, replicated_axis);
        prop_assert_eq!(!opt.all_gathers.is_empty(), replicated_axis);
    }
}

#[test]
fn replicated_destination_fetches_each_slice_once() {
    let shape = TensorShape::f32(&[4, 8]).unwrap();
    let mesh = LogicalMesh::uniform(1, 4, 1e9);
    let spec = ShardingSpec::replicated(2);
    let c = Case {
        shape,
        src_mesh: mesh.clone(),
        dst_mesh: mesh,
        src_spec: spec.clone(),
        dst_spec: spec,
        src_dev: vec![0, 1, 2, 3],
        dst_dev: vec![4, 5, 6, 7],
    };
    let (src, dst) = c.sides();
    let naive = cross_mesh_plan(&c.shape, src, dst, CrossMeshStrategy::Naive).unwrap();
    let opt = cross_mesh_plan(&c.shape, src, dst, CrossMeshStrategy::LocalAllGather).unwrap();
    assert_eq!(naive.inter_mesh_bytes, 4 * 128);
    assert_eq!(opt.inter_mesh_bytes, 128);
    assert_eq!(opt.transfers.len(), 4);
    assert!(opt.transfers.iter().all(|t| t.bytes == 32));
    assert_eq!(opt.all_gathers.len(), 1);
    assert_eq!(opt.all_gathers[0].devices, vec![4, 5, 6, 7]);
}
