//! Structural invariants over randomly drawn layouts, meshes and times.

use std::collections::BTreeMap;

use meshplan::graph::TensorShape;
use meshplan::mesh::LogicalMesh;
use meshplan::sharding::{legal_specs, resharding_cost, ShardingSpec};
use meshplan::Time;
use proptest::prelude::*;

fn layout() -> impl Strategy<Value = (TensorShape, LogicalMesh, ShardingSpec, ShardingSpec)> {
    (prop::collection::vec(1u64..=8, 1..=3), 1u32..=4, 1u32..=4, any::<prop::sample::Index>(), any::<prop::sample::Index>()).prop_map(
        |(dims, n, m, a, b)| {
            let shape = TensorShape::f32(&dims).unwrap();
            let mesh = LogicalMesh::uniform(n, m, 1e9);
            let specs = legal_specs(&shape, &mesh);
            let (x, y) = (specs[a.index(specs.len())].clone(), specs[b.index(specs.len())].clone());
            (shape, mesh, x, y)
        },
    )
}

fn cells(r: &[(u64, u64)]) -> Vec<Vec<u64>> {
    let mut out = vec![vec![]];
    for &(lo, hi) in r {
        out = out.into_iter().flat_map(|p| (lo..hi).map(move |i| [p.clone(), vec![i]].concat())).collect();
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    /// Distinct tiles are disjoint, cover the tensor, and each is held by
    /// the same number of devices.
    #[test]
    fn tiles_partition_the_tensor((shape, mesh, spec, _) in layout()) {
        let mut holders: BTreeMap<Vec<(u64, u64)>, u32> = BTreeMap::new();
        for k in 0..mesh.num_devices() {
            *holders.entry(spec.tile(&shape, &mesh, mesh.coords(k))).or_default() += 1;
        }
        prop_assert_eq!(holders.len() as u64, spec.num_tiles(&mesh));
        let copies: Vec<u32> = holders.values().copied().collect();
        prop_assert!(copies.iter().all(|&c| c == copies[0]));
        let mut seen = std::collections::BTreeSet::new();
        for tile in holders.keys() {
            prop_assert_eq!(cells(tile).len() as u64 * 4, spec.shard_bytes(&shape, &mesh));
            for c in cells(tile) {
                prop_assert!(seen.insert(c));
            }
        }
        prop_assert_eq!(seen.len() as u64, shape.byte_size() / 4);
    }

    /// Resharding is free exactly when no mesh axis has to un-split or
    /// move to another dimension.
    #[test]
    fn resharding_is_free_iff_only_slicing((shape, mesh, src, dst) in layout()) {
        let ops = resharding_cost(&src, &dst, &shape, &mesh).unwrap();
        let slicing_only = (0..2).all(|a| mesh.extent(a) == 1 || src.dim_of_axis(a).is_none() || src.dim_of_axis(a) == dst.dim_of_axis(a));
        prop_assert_eq!(ops.is_empty(), slicing_only);
        prop_assert!(resharding_cost(&src, &src, &shape, &mesh).unwrap().is_empty());
    }

    #[test]
    fn time_arithmetic_is_exact(a in 0u64..1 << 40, b in 0u64..1 << 40, k in 0u64..1 << 20) {
        let (x, y) = (Time::from_ticks(a), Time::from_ticks(b));
        prop_assert_eq!((x + y) - y, x);
        prop_assert_eq!((x + y).ticks(), a + b);
        prop_assert_eq!((x * k).ticks(), a * k);
        prop_assert_eq!(x.saturating_sub(y).ticks(), a.saturating_sub(b));
        prop_assert_eq!([x, y, x].iter().sum::<Time>(), x + x + y);
    }

    #[test]
    fn time_saturates(a in any::<u64>(), b in any::<u64>()) {
        prop_assert_eq!((Time::from_ticks(a) + Time::from_ticks(b)).ticks(), a.saturating_add(b));
        prop_assert_eq!((Time::from_ticks(a) * b).ticks(), a.saturating_mul(b));
    }

    #[test]
    fn seconds_round_to_the_nearest_tick(t in 0u64..1 << 50) {
        let x = Time::from_ticks(t);
        prop_assert_eq!(Time::from_secs_f64(x.as_secs_f64()), x);
    }
}
