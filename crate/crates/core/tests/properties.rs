use gmalign::bounds::{pairwise_lower, pairwise_upper};
use gmalign::harness::normalize_pair;
use gmalign::{AngleAxis, PointCloud, RigidTransform, TransformCube};
use nalgebra::Vector3;
use proptest::prelude::*;

fn vec3(range: f64) -> impl Strategy<Value = Vector3<f64>> {
    (-range..range, -range..range, -range..range).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

fn transform() -> impl Strategy<Value = RigidTransform> {
    (vec3(1.8), vec3(2.0)).prop_map(|(r, t)| RigidTransform::new(AngleAxis(r), t))
}

fn unit() -> impl Strategy<Value = f64> {
    -1.0..1.0f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn angle_axis_round_trips(r in vec3(1.8)) {
        prop_assume!(r.norm() < 3.1);
        let back = AngleAxis::from_matrix(&AngleAxis(r).to_matrix());
        prop_assert!((back.0 - r).norm() < 1e-9, "{r:?} -> {:?}", back.0);
    }

    #[test]
    fn compose_with_inverse_is_identity(t in transform(), p in vec3(5.0)) {
        let q = t.compose(&t.inverse()).apply(&p);
        prop_assert!((q - p).norm() < 1e-9);
        let q = t.inverse().compose(&t).apply(&p);
        prop_assert!((q - p).norm() < 1e-9);
    }

    #[test]
    fn compose_matches_sequential_application(a in transform(), b in transform(), p in vec3(5.0)) {
        let direct = a.apply(&b.apply(&p));
        prop_assert!((a.compose(&b).apply(&p) - direct).norm() < 1e-9);
    }

    #[test]
    fn pair_frames_round_trip(
        pts in prop::collection::vec(vec3(10.0), 4..20),
        t in transform(),
        shift in vec3(20.0),
    ) {
        let source = PointCloud::new(pts.clone()).unwrap();
        let moved: Vec<_> = pts.iter().map(|p| p * 0.5 + shift).collect();
        let target = PointCloud::new(moved).unwrap();
        prop_assume!(source.points().iter().any(|p| (p - source.centroid()).norm() > 1e-6));
        let (_, _, norm) = normalize_pair(&source, &target).unwrap();
        let back = norm.to_source_frame(&norm.to_normalized_frame(&t));
        prop_assert!((back.translation - t.translation).norm() < 1e-9);
        prop_assert!((back.rotation.0 - t.rotation.0).norm() < 1e-12);
    }

    #[test]
    fn children_cover_the_parent(
        centre in transform(),
        rw in 0.01..1.0f64,
        tw in 0.01..1.0f64,
        u in prop::array::uniform6(unit()),
        split in 2usize..4,
    ) {
        let cube = TransformCube::around(&centre, rw, tw);
        let children = cube.subdivide(split).unwrap();
        prop_assert_eq!(children.len(), split.pow(6));
        let total: f64 = children.iter().map(TransformCube::volume).sum();
        prop_assert!((total - cube.volume()).abs() <= 1e-9 * cube.volume());

        let r = cube.rotation_center + Vector3::new(u[0], u[1], u[2]) * rw;
        let t = cube.translation_center + Vector3::new(u[3], u[4], u[5]) * tw;
        let hits = children.iter().filter(|c| c.contains(&r, &t)).count();
        prop_assert!(hits >= 1);
    }

    #[test]
    fn residual_bounds_hold_inside_a_cube(
        x in vec3(1.0),
        y in vec3(1.5),
        centre in transform(),
        rw in 0.0..1.5f64,
        tw in 0.0..0.5f64,
        u in prop::array::uniform6(unit()),
    ) {
        let cube = TransformCube::around(&centre, rw, tw);
        let r = cube.rotation_center + Vector3::new(u[0], u[1], u[2]) * rw;
        let t = cube.translation_center + Vector3::new(u[3], u[4], u[5]) * tw;
        let inside = RigidTransform::new(AngleAxis(r), t);
        let residual = (inside.apply(&x) - y).norm();
        prop_assert!(pairwise_lower(&x, &y, &cube) <= residual + 1e-9);
        prop_assert!(pairwise_lower(&x, &y, &cube) <= pairwise_upper(&x, &y, &centre) + 1e-9);
    }
}
