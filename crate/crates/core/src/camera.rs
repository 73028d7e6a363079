//! Pinhole cameras, stereo features and the position image Jacobian.
//!
//! Pixel coordinates have the origin at the top-left corner with `u` to the
//! right and `v` downward. Camera frames look along their `+z` axis.

use nalgebra::{Matrix3, Matrix3x4, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{forward_kinematics, DhChain, HomogeneousTransform, JointConfig, KinematicsError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CameraError {
    #[error("point has non-positive depth {0} in the camera frame")]
    NonPositiveDepth(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for Intrinsics {
    fn default() -> Self {
        Self {
            fx: 320.0,
            fy: 320.0,
            cx: 160.0,
            cy: 120.0,
            width: 320,
            height: 240,
        }
    }
}

impl Intrinsics {
    pub fn validate(&self) -> Result<(), CameraError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(CameraError::InvalidIntrinsics("focal lengths must be positive".into()));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) || !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(CameraError::InvalidIntrinsics(
                "principal point outside the image".into(),
            ));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Projects a point already expressed in the camera frame.
    #[inline]
    pub fn project_camera_point(&self, p: &Vector3<f64>) -> Result<PixelPoint, CameraError> {
        if !(p.z > 0.0) {
            return Err(CameraError::NonPositiveDepth(p.z));
        }
        Ok(PixelPoint {
            u: self.fx * p.x / p.z + self.cx,
            v: self.fy * p.y / p.z + self.cy,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
}

/// `[u_l, u_r, v_l]`: the feature vector driven by the stereo servo.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StereoFeature {
    pub u_l: f64,
    pub u_r: f64,
    pub v_l: f64,
}

impl StereoFeature {
    pub fn new(u_l: f64, u_r: f64, v_l: f64) -> Self {
        Self { u_l, u_r, v_l }
    }

    pub fn to_vector(&self) -> Vector3<f64> {
        Vector3::new(self.u_l, self.u_r, self.v_l)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }
}

/// The 3x4 matrix `K [R | t]` mapping homogeneous world points to pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionMatrix(pub Matrix3x4<f64>);

impl ProjectionMatrix {
    /// `(f1, f2, f3)` of the homogeneous point; `f3` is the depth.
    #[inline]
    fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.0 * Vector4::new(p.x, p.y, p.z, 1.0)
    }
}

/// `extrinsic` maps world coordinates into the camera frame.
pub fn projection_matrix(k: &Intrinsics, extrinsic: &HomogeneousTransform) -> ProjectionMatrix {
    let mut rt = Matrix3x4::zeros();
    rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&extrinsic.rotation);
    rt.fixed_view_mut::<3, 1>(0, 3).copy_from(&extrinsic.translation);
    ProjectionMatrix(k.matrix() * rt)
}

pub fn project_point(pi: &ProjectionMatrix, p: &Vector3<f64>) -> Result<PixelPoint, CameraError> {
    project_homogeneous(pi, &Vector4::new(p.x, p.y, p.z, 1.0))
}

/// Projects a homogeneous world point `[x, y, z, w]`.
pub fn project_homogeneous(pi: &ProjectionMatrix, p: &Vector4<f64>) -> Result<PixelPoint, CameraError> {
    let f = pi.0 * p;
    // Depth sign is that of the Euclidean point, independent of the scale w.
    let depth = f.z * p.w.signum();
    if !(depth > 0.0) {
        return Err(CameraError::NonPositiveDepth(f.z / p.w));
    }
    Ok(PixelPoint {
        u: f.x / f.z,
        v: f.y / f.z,
    })
}

pub fn stereo_feature(
    p: &Vector3<f64>,
    left: &ProjectionMatrix,
    right: &ProjectionMatrix,
) -> Result<StereoFeature, CameraError> {
    let l = project_point(left, p)?;
    let r = project_point(right, p)?;
    Ok(StereoFeature::new(l.u, r.u, l.v))
}

/// Analytic `d(u_l, u_r, v_l) / d(x, y, z)`.
pub fn image_jacobian(
    p: &Vector3<f64>,
    left: &ProjectionMatrix,
    right: &ProjectionMatrix,
) -> Result<Matrix3<f64>, CameraError> {
    let fl = left.apply(p);
    let fr = right.apply(p);
    for depth in [fl.z, fr.z] {
        if !(depth > 0.0) {
            return Err(CameraError::NonPositiveDepth(depth));
        }
    }
    // d(a/c)/dx_j = (P[a][j] c - a P[c][j]) / c^2
    let row = |m: &Matrix3x4<f64>, f: &Vector3<f64>, num: usize| -> [f64; 3] {
        let c2 = f.z * f.z;
        [0, 1, 2].map(|j| (m[(num, j)] * f.z - f[num] * m[(2, j)]) / c2)
    };
    let ul = row(&left.0, &fl, 0);
    let ur = row(&right.0, &fr, 0);
    let vl = row(&left.0, &fl, 1);
    Ok(Matrix3::new(
        ul[0], ul[1], ul[2], ur[0], ur[1], ur[2], vl[0], vl[1], vl[2],
    ))
}

/// Inverts [`stereo_feature`]: the world point whose left projection is
/// `(u_l, v_l)` and whose right projection has column `u_r`.
///
/// Each coordinate gives one linear equation `P[a] X - c P[2] X = 0`.
pub fn triangulate(feature: &StereoFeature, left: &ProjectionMatrix, right: &ProjectionMatrix) -> Option<Vector3<f64>> {
    let rows = [
        (&left.0, 0, feature.u_l),
        (&right.0, 0, feature.u_r),
        (&left.0, 1, feature.v_l),
    ];
    let mut a = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for (i, (m, r, c)) in rows.iter().enumerate() {
        for j in 0..3 {
            a[(i, j)] = m[(*r, j)] - c * m[(2, j)];
        }
        b[i] = -(m[(*r, 3)] - c * m[(2, 3)]);
    }
    a.lu().solve(&b)
}

/// Where a camera sits: a fixed world pose or the tip of a (head) chain.
#[derive(Debug, Clone, PartialEq)]
pub enum CameraMount {
    /// Pose of the camera frame in the world.
    Fixed(HomogeneousTransform),
    /// Camera frame = `FK(chain, joints) * eye_offset`.
    Chain {
        chain: DhChain,
        joints: JointConfig,
        eye_offset: HomogeneousTransform,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub intrinsics: Intrinsics,
    pub mount: CameraMount,
}

impl CameraModel {
    /// Camera pose in the world.
    pub fn camera_to_world(&self) -> Result<HomogeneousTransform, CameraError> {
        Ok(match &self.mount {
            CameraMount::Fixed(t) => *t,
            CameraMount::Chain {
                chain,
                joints,
                eye_offset,
            } => &forward_kinematics(chain, joints)? * eye_offset,
        })
    }

    /// The world -> camera transform `H(q^c)`.
    pub fn extrinsic(&self) -> Result<HomogeneousTransform, CameraError> {
        Ok(self.camera_to_world()?.inverse())
    }

    pub fn projection(&self) -> Result<ProjectionMatrix, CameraError> {
        Ok(projection_matrix(&self.intrinsics, &self.extrinsic()?))
    }
}

/// Resolved per-frame view of a camera: intrinsics plus world -> camera transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraView {
    pub intrinsics: Intrinsics,
    pub extrinsic: HomogeneousTransform,
}

impl CameraView {
    pub fn from_model(model: &CameraModel) -> Result<Self, CameraError> {
        Ok(Self {
            intrinsics: model.intrinsics,
            extrinsic: model.extrinsic()?,
        })
    }

    pub fn projection(&self) -> ProjectionMatrix {
        projection_matrix(&self.intrinsics, &self.extrinsic)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{transform_from_pose, Pose};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_k() -> Intrinsics {
        Intrinsics {
            fx: 1.0,
            fy: 1.0,
            cx: 0.0,
            cy: 0.0,
            width: 2,
            height: 2,
        }
    }

    fn random_view(rng: &mut impl Rng) -> (Intrinsics, HomogeneousTransform) {
        let k = Intrinsics {
            fx: rng.random_range(200.0..600.0),
            fy: rng.random_range(200.0..600.0),
            cx: rng.random_range(100.0..200.0),
            cy: rng.random_range(80.0..160.0),
            width: 320,
            height: 240,
        };
        let pose = Pose::new(
            Vector3::new(
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
            ),
            Vector3::new(
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
            ),
        );
        (k, transform_from_pose(&pose))
    }

    #[test]
    fn identity_projection() {
        let pi = projection_matrix(&unit_k(), &HomogeneousTransform::identity());
        let mut expected = Matrix3x4::zeros();
        expected.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
        assert_eq!(pi.0, expected);
    }

    #[test]
    fn translation_column_is_k_t() {
        let k = Intrinsics::default();
        let t = Vector3::new(0.1, -0.2, 0.5);
        let pi = projection_matrix(&k, &HomogeneousTransform::from_translation(t));
        let col = pi.0.column(3).into_owned();
        assert!((col - k.matrix() * t).amax() < 1e-12);
    }

    #[test]
    fn projection_matches_two_step_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (k, h) = random_view(&mut rng);
        let pi = projection_matrix(&k, &h);
        for _ in 0..10 {
            let p = Vector3::new(
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
                rng.random_range(0.5..1.5),
            );
            let c = h.rotation * p + h.translation;
            let img = k.matrix() * c;
            let px = project_point(&pi, &p).unwrap();
            assert!((px.u - img.x / img.z).abs() < 1e-9);
            assert!((px.v - img.y / img.z).abs() < 1e-9);
        }
    }

    #[test]
    fn principal_point_on_axis() {
        let k = Intrinsics::default();
        let pi = projection_matrix(&k, &HomogeneousTransform::identity());
        let px = project_point(&pi, &Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!((px.u, px.v), (k.cx, k.cy));
    }

    #[test]
    fn homogeneous_scale_invariance() {
        let pi = projection_matrix(&Intrinsics::default(), &HomogeneousTransform::identity());
        let p = Vector4::new(0.05, -0.03, 0.7, 1.0);
        let a = project_homogeneous(&pi, &p).unwrap();
        let b = project_homogeneous(&pi, &(p * 2.0)).unwrap();
        assert!((a.u - b.u).abs() < 1e-12 && (a.v - b.v).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_is_rejected() {
        let pi = projection_matrix(&Intrinsics::default(), &HomogeneousTransform::identity());
        assert!(matches!(
            project_point(&pi, &Vector3::new(0.0, 0.0, -1.0)),
            Err(CameraError::NonPositiveDepth(_))
        ));
        assert!(matches!(
            image_jacobian(&Vector3::new(0.0, 0.0, 0.0), &pi, &pi),
            Err(CameraError::NonPositiveDepth(_))
        ));
    }

    #[test]
    fn stereo_examples() {
        let k = Intrinsics::default();
        let left = projection_matrix(&k, &HomogeneousTransform::identity());
        let p = Vector3::new(0.02, 0.01, 0.6);
        let same = stereo_feature(&p, &left, &left).unwrap();
        assert_eq!(same.u_l, same.u_r);

        // Right camera sits 6.8 cm along +x of the left one.
        let right_pose = HomogeneousTransform::from_translation(Vector3::new(0.068, 0.0, 0.0));
        let right = projection_matrix(&k, &right_pose.inverse());
        let f = stereo_feature(&p, &left, &right).unwrap();
        assert!(f.u_r < f.u_l);
        let mut last = f64::INFINITY;
        for z in [0.3, 0.5, 0.8, 1.2, 2.0] {
            let f = stereo_feature(&Vector3::new(0.02, 0.01, z), &left, &right).unwrap();
            let disparity = (f.u_l - f.u_r).abs();
            assert!(disparity < last);
            last = disparity;
        }
    }

    #[test]
    fn triangulation_round_trip() {
        let k = Intrinsics::default();
        let left = projection_matrix(&k, &HomogeneousTransform::identity());
        let right_pose = HomogeneousTransform::from_translation(Vector3::new(0.068, 0.0, 0.0));
        let right = projection_matrix(&k, &right_pose.inverse());
        let p = Vector3::new(-0.04, 0.03, 0.55);
        let f = stereo_feature(&p, &left, &right).unwrap();
        let back = triangulate(&f, &left, &right).unwrap();
        assert!((back - p).norm() < 1e-12);
    }

    #[test]
    fn jacobian_on_axis() {
        let k = unit_k();
        let pi = projection_matrix(&k, &HomogeneousTransform::identity());
        let j = image_jacobian(&Vector3::new(0.0, 0.0, 1.0), &pi, &pi).unwrap();
        assert_eq!(j[(0, 0)], k.fx);
        assert_eq!(j[(0, 2)], 0.0);
    }

    #[test]
    fn jacobian_position_block_scales_with_inverse_depth() {
        let k = Intrinsics::default();
        let pi = projection_matrix(&k, &HomogeneousTransform::identity());
        let j1 = image_jacobian(&Vector3::new(0.0, 0.0, 1.0), &pi, &pi).unwrap();
        let j2 = image_jacobian(&Vector3::new(0.0, 0.0, 2.0), &pi, &pi).unwrap();
        for (r, c) in [(0, 0), (0, 1), (1, 0), (2, 1)] {
            assert!((j2[(r, c)] - 0.5 * j1[(r, c)]).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_intrinsics() {
        let k = Intrinsics {
            fx: 0.0,
            ..Intrinsics::default()
        };
        assert!(k.validate().is_err());
        let k = Intrinsics {
            cx: 320.0,
            ..Intrinsics::default()
        };
        assert!(k.validate().is_err());
        assert!(Intrinsics::default().validate().is_ok());
    }
}
