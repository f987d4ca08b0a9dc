//! Projection round trips and explicit homogeneous-matrix oracles for lifting,
//! projection and depth transfer.

mod common;

use mvinpaint::geometry::{
    camera_depth_to_ray_distance, pixel_to_world, ray_distance_to_camera_depth, reproject_depth,
    world_to_pixel,
};
use mvinpaint::{Intrinsics, PixelCoord, Pose};
use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3, Vector4};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn random_pose(r: &mut ChaCha8Rng) -> Pose {
    let axis = Vector3::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0));
    let rot = Rotation3::from_scaled_axis(axis * r.gen_range(0.0..3.0));
    let t = Vector3::new(r.gen_range(-5.0..5.0), r.gen_range(-5.0..5.0), r.gen_range(-5.0..5.0));
    Pose::new(*rot.matrix(), t).unwrap()
}

fn random_intrinsics(r: &mut ChaCha8Rng) -> Intrinsics {
    let w = r.gen_range(16..640u32);
    let h = r.gen_range(16..480u32);
    Intrinsics::new(
        r.gen_range(20.0..800.0),
        r.gen_range(20.0..800.0),
        w as f64 * r.gen_range(0.3..0.7),
        h as f64 * r.gen_range(0.3..0.7),
        w,
        h,
    )
    .unwrap()
}

fn k_matrix(i: &Intrinsics) -> Matrix3<f64> {
    Matrix3::new(i.fx, 0.0, i.cx, 0.0, i.fy, i.cy, 0.0, 0.0, 1.0)
}

fn homogeneous(p: &Pose) -> Matrix4<f64> {
    let m = p.to_row_major();
    Matrix4::from_row_slice(&m)
}

fn lift_oracle(p: &Pose, i: &Intrinsics, u: f64, v: f64, t: f64) -> Vector3<f64> {
    let cam = k_matrix(i).try_inverse().unwrap() * Vector3::new(u, v, 1.0) * t;
    let x = homogeneous(p) * Vector4::new(cam.x, cam.y, cam.z, 1.0);
    x.xyz() / x.w
}

fn project_oracle(p: &Pose, i: &Intrinsics, x: &Vector3<f64>) -> (f64, f64, f64) {
    let inv = homogeneous(p).try_inverse().unwrap();
    let c = inv * Vector4::new(x.x, x.y, x.z, 1.0);
    let h = k_matrix(i) * c.xyz();
    (h.x / h.z, h.y / h.z, c.z)
}

#[test]
fn round_trip_ten_thousand_cases() {
    let mut r = common::rng(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let pose = random_pose(&mut r);
        let intr = random_intrinsics(&mut r);
        let u = r.gen_range(0.0..intr.width as f64);
        let v = r.gen_range(0.0..intr.height as f64);
        let t = r.gen_range(0.05..50.0);
        let x = pixel_to_world(&pose, &intr, t, &PixelCoord::new(u, v, 0)).unwrap();
        let (px, z) = world_to_pixel(&pose, &intr, &x).unwrap();
        worst = worst.max((px.u - u).abs()).max((px.v - v).abs());
        assert!((z - t).abs() < 1e-9 * t.max(1.0));
    }
    assert!(worst < 1e-6, "worst round-trip error {worst} px");
}

#[test]
fn lift_and_projection_match_matrix_oracles() {
    let mut r = common::rng(7);
    for _ in 0..2000 {
        let pose = random_pose(&mut r);
        let intr = random_intrinsics(&mut r);
        let u = r.gen_range(-50.0..700.0);
        let v = r.gen_range(-50.0..500.0);
        let t = r.gen_range(0.1..20.0);
        let x = pixel_to_world(&pose, &intr, t, &PixelCoord::new(u, v, 0)).unwrap();
        let o = lift_oracle(&pose, &intr, u, v, t);
        assert!((x - o).norm() < 1e-9 * (1.0 + o.norm()), "{x} vs {o}");

        let y = Vector3::new(r.gen_range(-10.0..10.0), r.gen_range(-10.0..10.0), r.gen_range(-10.0..10.0));
        let (ou, ov, oz) = project_oracle(&pose, &intr, &y);
        match world_to_pixel(&pose, &intr, &y) {
            Ok((px, z)) => {
                assert!((z - oz).abs() < 1e-9 * (1.0 + oz.abs()));
                let scale = 1.0 + ou.abs().max(ov.abs());
                assert!((px.u - ou).abs() < 1e-9 * scale && (px.v - ov).abs() < 1e-9 * scale);
            }
            Err(_) => assert!(oz <= 1e-9, "rejected a point in front: z {oz}"),
        }
    }
}

#[test]
fn depth_transfer_matches_matrix_oracle() {
    let mut r = common::rng(99);
    for _ in 0..2000 {
        let target = random_pose(&mut r);
        let source = random_pose(&mut r);
        let intr = random_intrinsics(&mut r);
        let px = PixelCoord::new(r.gen_range(0.0..intr.width as f64), r.gen_range(0.0..intr.height as f64), 0);
        let dist = r.gen_range(0.1..30.0);
        let got = reproject_depth(&target, &intr, &px, dist, &source).unwrap();

        let dir = k_matrix(&intr).try_inverse().unwrap() * Vector3::new(px.u, px.v, 1.0);
        let cam = dir / dir.norm() * dist;
        let x = homogeneous(&target) * Vector4::new(cam.x, cam.y, cam.z, 1.0);
        let c = homogeneous(&source) * Vector4::new(0.0, 0.0, 0.0, 1.0);
        let want = (x.xyz() - c.xyz()).norm();
        assert!((got - want).abs() < 1e-9 * (1.0 + want), "{got} vs {want}");
    }
}

proptest! {
    #[test]
    fn depth_conventions_invert(u in 0.0f64..64.0, v in 0.0f64..48.0, d in 0.01f64..100.0) {
        let intr = Intrinsics::new(50.0, 55.0, 31.0, 23.0, 64, 48).unwrap();
        let px = PixelCoord::new(u, v, 0);
        let z = ray_distance_to_camera_depth(&intr, &px, d);
        prop_assert!(z <= d + 1e-12);
        prop_assert!((camera_depth_to_ray_distance(&intr, &px, z) - d).abs() < 1e-9 * d.max(1.0));
    }

    #[test]
    fn reprojecting_into_own_view_returns_distance(seed in any::<u64>(), d in 0.1f64..50.0) {
        let mut r = common::rng(seed);
        let pose = random_pose(&mut r);
        let intr = random_intrinsics(&mut r);
        let px = PixelCoord::new(intr.cx + 3.0, intr.cy - 2.0, 0);
        let got = reproject_depth(&pose, &intr, &px, d, &pose).unwrap();
        prop_assert!((got - d).abs() < 1e-9 * d.max(1.0));
    }

    #[test]
    fn composing_with_inverse_is_identity(seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let p = random_pose(&mut r);
        let id = homogeneous(&p.compose(&p.inverse()));
        prop_assert!((id - Matrix4::identity()).abs().max() < 1e-12);
    }
}

/// Every check above, for the acceptance runner.
#[allow(dead_code)]
pub const CHECKS: &[(&str, fn())] = &[
    ("round_trip_ten_thousand_cases", round_trip_ten_thousand_cases),
    ("lift_and_projection_match_matrix_oracles", lift_and_projection_match_matrix_oracles),
    ("depth_transfer_matches_matrix_oracle", depth_transfer_matches_matrix_oracle),
    ("depth_conventions_invert", depth_conventions_invert),
    ("reprojecting_into_own_view_returns_distance", reprojecting_into_own_view_returns_distance),
    ("composing_with_inverse_is_identity", composing_with_inverse_is_identity),
];
