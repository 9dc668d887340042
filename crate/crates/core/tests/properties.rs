//! Randomized properties of the group, camera and format layers.

use std::collections::BTreeMap;

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use proptest::prelude::*;

use trajmap::features::Match;
use trajmap::geometry::{Projection, Tangent};
use trajmap::io::{self, TrajectoryRecord};
use trajmap::{CameraModel, Pose};

fn pose_strategy() -> impl Strategy<Value = Pose> {
    (prop::array::uniform3(-3.0..3.0f64), prop::array::uniform3(-20.0..20.0f64)).prop_map(|(r, t)| {
        Pose::new(UnitQuaternion::from_scaled_axis(Vector3::from(r)), Vector3::from(t))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn exp_inverts_log(p in pose_strategy()) {
        let q = Pose::exp(&p.log());
        prop_assert!(q.distance_log(&p) < 1e-9);
    }

    #[test]
    fn inverse_reverses_point_transform(p in pose_strategy(), x in prop::array::uniform3(-50.0..50.0f64)) {
        let x = Vector3::from(x);
        prop_assert!((p.inverse().transform_point(&p.transform_point(&x)) - x).norm() < 1e-9);
    }

    #[test]
    fn small_tangent_log_is_exact(v in prop::array::uniform6(-1.0..1.0f64)) {
        let v = Tangent::from_column_slice(&v);
        prop_assert!((Pose::exp(&v).log() - v).norm() < 1e-10);
    }

    #[test]
    fn fisheye_pixels_round_trip(u in 0.0..640.0f64, v in 0.0..480.0f64, depth in 0.3..30.0f64) {
        let cam = CameraModel::fisheye(280.0, 285.0, 321.0, 239.0, 640, 480, [0.03, -0.004, 0.001, 0.0]);
        let px = Vector2::new(u, v);
        let ray = cam.unproject(&px).unwrap();
        let back = cam.project(&Pose::identity(), &(ray.normalize() * depth)).unwrap();
        prop_assert!((back - px).norm() < 1e-6);
    }

    #[test]
    fn match_tables_round_trip(
        table in prop::collection::btree_map(
            (0u32..50, 50u32..100),
            prop::collection::vec((0usize..1000, 0usize..1000, 0.0..2.0f64), 0..20),
            0..10,
        )
    ) {
        let table: BTreeMap<_, Vec<Match>> = table
            .into_iter()
            .map(|(k, v)| (k, v.into_iter().map(|(a, b, d)| Match { index_a: a, index_b: b, distance: d }).collect()))
            .collect();
        let bytes = io::encode_matches(&table);
        prop_assert_eq!(io::decode_matches(&bytes).unwrap(), table);
    }

    #[test]
    fn tum_round_trip_holds_printed_precision(poses in prop::collection::vec(pose_strategy(), 1..20)) {
        let traj: Vec<TrajectoryRecord> = poses
            .into_iter()
            .enumerate()
            .map(|(k, pose)| TrajectoryRecord { timestamp: 10.0 + 0.1 * k as f64, pose })
            .collect();
        let once = io::tum_from_str(&io::tum_to_string(&traj)).unwrap();
        let twice = io::tum_from_str(&io::tum_to_string(&once)).unwrap();
        for (first, reference) in [(&once, &traj), (&twice, &once)] {
            for (a, b) in first.iter().zip(reference.iter()) {
                prop_assert_eq!(a.timestamp, b.timestamp);
                let (ca, cb) = (a.pose.center(), b.pose.center());
                for i in 0..3 {
                    prop_assert!((ca[i] - cb[i]).abs() <= 5.0001e-9 * cb[i].abs() + 1e-300, "{} vs {}", ca[i], cb[i]);
                }
                prop_assert!(a.pose.rotation().angle_to(b.pose.rotation()) < 3e-8);
            }
        }
    }
}
