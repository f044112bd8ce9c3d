use monobev::bevmodel::BevGridSpec;
use monobev::camgeom::{box_azimuth, pillar_reference_points, CameraRig, PillarSpec, RigLayout};
use nalgebra::{Matrix3, Matrix3x4, Matrix4, Vector3, Vector4};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rig() -> CameraRig<f64> {
    CameraRig::surround((128, 224), &RigLayout::default()).unwrap()
}

fn m3(m: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| m[i][j])
}

/// Homogeneous chain: ego->camera 4x4, then [I|0] perspective, then K.
fn oracle_project(cam: &monobev::camgeom::CameraSpec<f64>, p: [f64; 3]) -> Option<[f64; 2]> {
    let r = m3(cam.rotation());
    let t = Vector3::from(*cam.translation());
    let mut ego_to_cam = Matrix4::identity();
    ego_to_cam.fixed_view_mut::<3, 3>(0, 0).copy_from(&r.transpose());
    ego_to_cam.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-r.transpose() * t));
    let pc = ego_to_cam * Vector4::new(p[0], p[1], p[2], 1.0);
    if pc.z <= 1e-6 {
        return None;
    }
    let mut proj = Matrix3x4::zeros();
    proj.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    let q = m3(cam.intrinsics()) * (proj * pc);
    Some([q.x / q.z, q.y / q.z])
}

#[test]
fn projection_matches_homogeneous_oracle() {
    let rig = rig();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut valid = 0;
    for _ in 0..100 {
        let p = [rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0), rng.random_range(-2.0..4.0)];
        for cam in rig.cameras() {
            let got = cam.project_unbounded(&p);
            let want = oracle_project(cam, p);
            match (got, want) {
                (Some(a), Some(b)) => {
                    assert!((a[0] - b[0]).abs() < 1e-6 && (a[1] - b[1]).abs() < 1e-6, "{a:?} vs {b:?}");
                    valid += 1;
                }
                (None, None) => {}
                other => panic!("validity disagrees at {p:?}: {other:?}"),
            }
        }
    }
    assert!(valid > 100);
}

#[test]
fn back_projection_recovers_direction() {
    let rig = rig();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0;
    while checked < 200 {
        let p = [rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0), rng.random_range(-1.0..3.0)];
        for cam in rig.cameras() {
            if let Some([u, v]) = cam.project_point(&p) {
                let ray = cam.pixel_ray(u, v);
                let t = cam.translation();
                let d = [p[0] - t[0], p[1] - t[1], p[2] - t[2]];
                let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                for k in 0..3 {
                    assert!((ray[k] - d[k] / n).abs() < 1e-6);
                }
                checked += 1;
            }
        }
    }
}

#[test]
fn pillars_within_twenty_meters_are_seen() {
    let rig = rig();
    let grid = BevGridSpec::new(50, 50, 50.0, 32);
    let pillar = PillarSpec::default();
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let [x, y] = grid.cell_center(r, c);
            let radius = x.hypot(y);
            if !(2.0..20.0).contains(&radius) {
                continue;
            }
            let pts = pillar_reference_points::<f64>((r, c), &grid, &pillar).unwrap();
            let seen = pts.iter().any(|p| rig.cameras().iter().any(|cam| cam.project_point(p).is_some()));
            assert!(seen, "cell ({r}, {c}) at {radius:.1} m unseen");
        }
    }
}

#[test]
fn pillar_height_examples() {
    let grid = BevGridSpec::new(51, 51, 51.0, 8);
    let one = PillarSpec { num_heights: 1, ..PillarSpec::default() };
    let p = pillar_reference_points::<f64>((25, 25), &grid, &one).unwrap();
    assert_eq!(p, vec![[0.0, 0.0, 1.0]]);
    let four = pillar_reference_points::<f64>((25, 25), &grid, &PillarSpec::default()).unwrap();
    let zs: Vec<f64> = four.iter().map(|q| q[2]).collect();
    for (z, want) in zs.iter().zip([-1.0, 1.0 / 3.0, 5.0 / 3.0, 3.0]) {
        assert!((z - want).abs() < 1e-12);
    }
    assert!(pillar_reference_points::<f64>((51, 0), &grid, &one).is_err());
}

fn normalize(mut d: f64) -> f64 {
    while d > 180.0 {
        d -= 360.0;
    }
    while d <= -180.0 {
        d += 360.0;
    }
    d
}

proptest! {
    #[test]
    fn azimuth_matches_atan2(x in -100.0f64..100.0, y in -100.0f64..100.0) {
        prop_assume!(x != 0.0 || y != 0.0);
        let want = normalize(y.atan2(x) * 180.0 / std::f64::consts::PI);
        prop_assert!((box_azimuth([x, y]) - want).abs() < 1e-12);
    }

    #[test]
    fn azimuth_is_rotation_equivariant(x in -50.0f64..50.0, y in -50.0f64..50.0, theta in -3.14f64..3.14) {
        prop_assume!(x.hypot(y) > 1e-3);
        let (s, c) = theta.sin_cos();
        let rotated = [c * x - s * y, s * x + c * y];
        let want = normalize(box_azimuth([x, y]) + theta.to_degrees());
        let got = box_azimuth(rotated);
        let diff = normalize(got - want).abs();
        prop_assert!(diff < 1e-9, "{} vs {}", got, want);
    }

    #[test]
    fn azimuth_range(x in -10.0f64..10.0, y in -10.0f64..10.0) {
        let a = box_azimuth([x, y]);
        prop_assert!(a > -180.0 && a <= 180.0);
    }
}

#[test]
fn azimuth_axes() {
    assert_eq!(box_azimuth([10.0, 0.0]), 0.0);
    assert_eq!(box_azimuth([0.0, 10.0]), 90.0);
    assert_eq!(box_azimuth([-10.0, 0.0]), 180.0);
    assert_eq!(box_azimuth([0.0, 0.0]), 0.0);
}
