mod support;

use nalgebra::{Matrix3, Vector3, Vector4};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use servotrack::camera::{
    image_jacobian, project_homogeneous, project_point, projection_matrix, stereo_feature, triangulate, Intrinsics,
    ProjectionMatrix,
};
use servotrack::kinematics::{forward_kinematics, relative_motion, HomogeneousTransform};
use support::{fk_matrix_oracle, random_chain, random_q};

/// A stereo pair looking down +z of a randomly placed rig, and a point in
/// front of both cameras.
fn random_rig(rng: &mut impl Rng) -> (ProjectionMatrix, ProjectionMatrix, Vector3<f64>) {
    let k = Intrinsics {
        fx: rng.random_range(200.0..600.0),
        fy: rng.random_range(200.0..600.0),
        cx: rng.random_range(100.0..200.0),
        cy: rng.random_range(80.0..160.0),
        width: 320,
        height: 240,
    };
    let axis = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    )
    .normalize();
    let mut cam_to_world = HomogeneousTransform::from_axis_angle(&axis, rng.random_range(0.0..3.0));
    cam_to_world.translation = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    let baseline = rng.random_range(0.03..0.15);
    let right_to_world = cam_to_world * HomogeneousTransform::from_translation(Vector3::new(baseline, 0.0, 0.0));
    let left = projection_matrix(&k, &cam_to_world.inverse());
    let right = projection_matrix(&k, &right_to_world.inverse());
    let in_cam = Vector3::new(
        rng.random_range(-0.2..0.2),
        rng.random_range(-0.2..0.2),
        rng.random_range(0.3..1.5),
    );
    (left, right, cam_to_world.transform_point(&in_cam))
}

#[test]
fn image_jacobian_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (l, r, p) = random_rig(&mut rng);
        let j = image_jacobian(&p, &l, &r).unwrap();
        let h = 1e-6;
        let mut fd = Matrix3::zeros();
        for c in 0..3 {
            let mut dp = Vector3::zeros();
            dp[c] = h;
            let plus = stereo_feature(&(p + dp), &l, &r).unwrap().to_vector();
            let minus = stereo_feature(&(p - dp), &l, &r).unwrap().to_vector();
            fd.set_column(c, &((plus - minus) / (2.0 * h)));
        }
        worst = worst.max((j - fd).norm() / j.norm());
    }
    assert!(worst < 1e-6, "worst relative error {worst:e}");
}

#[test]
fn forward_kinematics_matches_matrix_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for dof in 1..=7 {
        for _ in 0..20 {
            let chain = random_chain(&mut rng, dof);
            let q = random_q(&mut rng, dof);
            let fk = forward_kinematics(&chain, &q).unwrap().to_matrix();
            let oracle = fk_matrix_oracle(&chain, q.as_slice());
            assert!((fk - oracle).amax() < 1e-12, "dof {dof}: {:e}", (fk - oracle).amax());
        }
    }
}

#[test]
fn relative_motion_maps_previous_to_current() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..50 {
        let chain = random_chain(&mut rng, 4);
        let (a, b) = (random_q(&mut rng, 4), random_q(&mut rng, 4));
        let delta = relative_motion(&chain, &a, &b).unwrap();
        let moved = (delta * forward_kinematics(&chain, &a).unwrap()).to_matrix();
        assert!((moved - fk_matrix_oracle(&chain, b.as_slice())).amax() < 1e-12);
    }
}

#[test]
fn projection_ignores_homogeneous_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..100 {
        let (l, _, p) = random_rig(&mut rng);
        let direct = project_point(&l, &p).unwrap();
        for lambda in [1e-3, 0.5, 2.0, 7.5, 1e3, -1.0, -3.2] {
            let ph = Vector4::new(p.x, p.y, p.z, 1.0) * lambda;
            let scaled = project_homogeneous(&l, &ph).unwrap();
            assert!((scaled.u - direct.u).abs() < 1e-12 * direct.u.abs().max(1.0));
            assert!((scaled.v - direct.v).abs() < 1e-12 * direct.v.abs().max(1.0));
        }
    }
}

#[test]
fn triangulation_inverts_the_stereo_feature() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..100 {
        let (l, r, p) = random_rig(&mut rng);
        let f = stereo_feature(&p, &l, &r).unwrap();
        let back = triangulate(&f, &l, &r).unwrap();
        assert!((back - p).norm() < 1e-9, "{:e}", (back - p).norm());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fk_composes_with_inverse(seed in any::<u64>(), dof in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chain = random_chain(&mut rng, dof);
        let q = random_q(&mut rng, dof);
        let t = forward_kinematics(&chain, &q).unwrap();
        prop_assert!(t.is_rigid());
        let id = (t * t.inverse()).to_matrix();
        prop_assert!((id - nalgebra::Matrix4::identity()).amax() < 1e-12);
    }

    #[test]
    fn jacobian_times_small_step_predicts_motion(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (l, r, p) = random_rig(&mut rng);
        let j = image_jacobian(&p, &l, &r).unwrap();
        let dp = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * 1e-5;
        let moved = stereo_feature(&(p + dp), &l, &r).unwrap().to_vector() - stereo_feature(&p, &l, &r).unwrap().to_vector();
        prop_assert!((moved - j * dp).norm() <= 1e-3 * (j * dp).norm() + 1e-9);
    }
}
