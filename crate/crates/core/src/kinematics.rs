//! Rigid transforms, scaled axis-angle poses and Denavit-Hartenberg chains.
//!
//! Chains use the standard (distal) DH convention: the link transform is
//! `Rz(theta) * Tz(d) * Tx(a) * Rx(alpha)` with `theta = q + theta_offset`
//! for revolute links and `theta = theta_offset` for fixed ones.

use std::f64::consts::PI;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance used by [`HomogeneousTransform::is_rigid`].
pub const RIGIDITY_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error("joint configuration has {got} angles, chain has {expected} revolute links")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("rotation is not orthonormal with determinant +1")]
    NotRigid,
    #[error("chain has no links")]
    EmptyChain,
    #[error("non-finite DH parameter in link {0}")]
    NonFiniteLink(usize),
}

/// A rigid transform `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomogeneousTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for HomogeneousTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl HomogeneousTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a transform, rejecting rotations that are not proper orthonormal.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, KinematicsError> {
        let t = Self { rotation, translation };
        if t.is_rigid() && translation.iter().all(|v| v.is_finite()) {
            Ok(t)
        } else {
            Err(KinematicsError::NotRigid)
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    pub fn from_rotation(rotation: Matrix3<f64>) -> Self {
        Self {
            rotation,
            translation: Vector3::zeros(),
        }
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        Self::from_rotation(exp_so3(&(axis.normalize() * angle)))
    }

    pub fn is_rigid(&self) -> bool {
        let r = &self.rotation;
        if !r.iter().all(|v| v.is_finite()) {
            return false;
        }
        let gram = r.transpose() * r - Matrix3::identity();
        gram.amax() <= RIGIDITY_TOL && (r.determinant() - 1.0).abs() <= RIGIDITY_TOL
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Largest absolute elementwise difference between the two 4x4 forms.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        (self.to_matrix() - other.to_matrix()).amax()
    }
}

impl Mul for HomogeneousTransform {
    type Output = HomogeneousTransform;

    #[allow(clippy::op_ref)]
    fn mul(self, rhs: HomogeneousTransform) -> HomogeneousTransform {
        &self * &rhs
    }
}

impl<'a> Mul<&'a HomogeneousTransform> for &'a HomogeneousTransform {
    type Output = HomogeneousTransform;

    fn mul(self, rhs: &HomogeneousTransform) -> HomogeneousTransform {
        HomogeneousTransform {
            rotation: self.rotation * rhs.rotation,
            translation: self.rotation * rhs.translation + self.translation,
        }
    }
}

/// Position plus scaled axis-angle orientation.
///
/// The rotation vector is kept canonical: its norm lies in `[0, pi]`, and at
/// exactly `pi` the first non-zero axis component is positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub orientation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self {
            position: Vector3::zeros(),
            orientation: Vector3::zeros(),
        }
    }
}

impl Pose {
    pub fn new(position: Vector3<f64>, orientation: Vector3<f64>) -> Self {
        Self {
            position,
            orientation: canonical_rotation_vector(&orientation),
        }
    }

    pub fn from_array(x: [f64; 6]) -> Self {
        Self::new(Vector3::new(x[0], x[1], x[2]), Vector3::new(x[3], x[4], x[5]))
    }

    pub fn to_array(&self) -> [f64; 6] {
        let (p, o) = (&self.position, &self.orientation);
        [p.x, p.y, p.z, o.x, o.y, o.z]
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        exp_so3(&self.orientation)
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_scaled_axis(self.orientation)
    }
}

/// Wraps a rotation vector into the canonical range.
pub fn canonical_rotation_vector(o: &Vector3<f64>) -> Vector3<f64> {
    let theta = o.norm();
    if !theta.is_finite() || theta == 0.0 {
        return if theta.is_finite() { *o } else { Vector3::zeros() };
    }
    if theta < PI {
        return *o;
    }
    let mut axis = o / theta;
    let mut wrapped = theta.rem_euclid(2.0 * PI);
    if wrapped > PI {
        wrapped = 2.0 * PI - wrapped;
        axis = -axis;
    }
    if wrapped == PI {
        axis = fix_axis_sign(axis);
    }
    axis * wrapped
}

fn fix_axis_sign(axis: Vector3<f64>) -> Vector3<f64> {
    match axis.iter().find(|c| **c != 0.0) {
        Some(c) if *c < 0.0 => -axis,
        _ => axis,
    }
}

/// Rodrigues' formula.
pub fn exp_so3(o: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = o.norm_squared();
    let k = skew(o);
    let (a, b) = if theta2 < 1e-8 {
        // Taylor expansions of sin(t)/t and (1-cos t)/t^2.
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Canonical scaled axis-angle of a rotation matrix.
///
/// Goes through Shepperd's quaternion extraction so the angle stays accurate
/// near both 0 and pi.
pub fn log_so3(r: &Matrix3<f64>) -> Vector3<f64> {
    let q = quaternion_from_matrix(r);
    rotation_vector_from_quaternion(&q)
}

pub(crate) fn rotation_vector_from_quaternion(q: &Quaternion<f64>) -> Vector3<f64> {
    let (mut w, mut v) = (q.w, q.imag());
    if w < 0.0 {
        w = -w;
        v = -v;
    }
    let s = v.norm();
    if s < 1e-300 {
        return Vector3::zeros();
    }
    let theta = 2.0 * s.atan2(w);
    let axis = v / s;
    // At (numerically) half a turn both axis signs describe the same rotation.
    let axis = if w < 1e-12 { fix_axis_sign(axis) } else { axis };
    axis * theta
}

fn quaternion_from_matrix(r: &Matrix3<f64>) -> Quaternion<f64> {
    let tr = r.trace();
    let q = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        Quaternion::new(
            0.25 * s,
            (r[(2, 1)] - r[(1, 2)]) / s,
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(1, 0)] - r[(0, 1)]) / s,
        )
    } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
        let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
        Quaternion::new(
            (r[(2, 1)] - r[(1, 2)]) / s,
            0.25 * s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
        )
    } else if r[(1, 1)] > r[(2, 2)] {
        let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
        Quaternion::new(
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            0.25 * s,
            (r[(1, 2)] + r[(2, 1)]) / s,
        )
    } else {
        let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
        Quaternion::new(
            (r[(1, 0)] - r[(0, 1)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
            (r[(1, 2)] + r[(2, 1)]) / s,
            0.25 * s,
        )
    };
    q.normalize()
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn pose_from_transform(t: &HomogeneousTransform) -> Pose {
    Pose {
        position: t.translation,
        orientation: log_so3(&t.rotation),
    }
}

pub fn transform_from_pose(x: &Pose) -> HomogeneousTransform {
    HomogeneousTransform {
        rotation: x.rotation(),
        translation: x.position,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointKind {
    Revolute,
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DhLink {
    pub a: f64,
    pub alpha: f64,
    pub d: f64,
    #[serde(default)]
    pub theta_offset: f64,
    #[serde(default = "default_joint_kind")]
    pub joint_kind: JointKind,
}

fn default_joint_kind() -> JointKind {
    JointKind::Revolute
}

impl DhLink {
    pub fn revolute(a: f64, alpha: f64, d: f64, theta_offset: f64) -> Self {
        Self {
            a,
            alpha,
            d,
            theta_offset,
            joint_kind: JointKind::Revolute,
        }
    }

    pub fn fixed(a: f64, alpha: f64, d: f64, theta_offset: f64) -> Self {
        Self {
            a,
            alpha,
            d,
            theta_offset,
            joint_kind: JointKind::Fixed,
        }
    }

    /// Link transform for joint input `q` (ignored by fixed links).
    pub fn transform(&self, q: f64) -> HomogeneousTransform {
        let theta = match self.joint_kind {
            JointKind::Revolute => q + self.theta_offset,
            JointKind::Fixed => self.theta_offset,
        };
        let (st, ct) = theta.sin_cos();
        let (sa, ca) = self.alpha.sin_cos();
        HomogeneousTransform {
            rotation: Matrix3::new(ct, -st * ca, st * sa, st, ct * ca, -ct * sa, 0.0, sa, ca),
            translation: Vector3::new(self.a * ct, self.a * st, self.d),
        }
    }

    fn is_finite(&self) -> bool {
        [self.a, self.alpha, self.d, self.theta_offset]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Joint angles in radians, one per revolute link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JointConfig(pub Vec<f64>);

impl JointConfig {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for JointConfig {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DhChain {
    base: HomogeneousTransform,
    links: Vec<DhLink>,
}

impl DhChain {
    pub fn new(base: HomogeneousTransform, links: Vec<DhLink>) -> Result<Self, KinematicsError> {
        if links.is_empty() {
            return Err(KinematicsError::EmptyChain);
        }
        if !base.is_rigid() {
            return Err(KinematicsError::NotRigid);
        }
        if let Some(i) = links.iter().position(|l| !l.is_finite()) {
            return Err(KinematicsError::NonFiniteLink(i));
        }
        Ok(Self { base, links })
    }

    pub fn base(&self) -> &HomogeneousTransform {
        &self.base
    }

    pub fn links(&self) -> &[DhLink] {
        &self.links
    }

    pub fn dof(&self) -> usize {
        self.links
            .iter()
            .filter(|l| l.joint_kind == JointKind::Revolute)
            .count()
    }

    fn check(&self, q: &JointConfig) -> Result<(), KinematicsError> {
        if q.len() != self.dof() {
            return Err(KinematicsError::DimensionMismatch {
                expected: self.dof(),
                got: q.len(),
            });
        }
        Ok(())
    }

    /// Per-link frames `base * A_1 * ... * A_i` for `i = 0..=links`.
    pub fn frames(&self, q: &JointConfig) -> Result<Vec<HomogeneousTransform>, KinematicsError> {
        self.check(q)?;
        let mut frames = Vec::with_capacity(self.links.len() + 1);
        let mut acc = self.base;
        frames.push(acc);
        let mut angles = q.0.iter();
        for link in &self.links {
            let qi = match link.joint_kind {
                JointKind::Revolute => *angles.next().expect("checked length"),
                JointKind::Fixed => 0.0,
            };
            acc = acc * link.transform(qi);
            frames.push(acc);
        }
        Ok(frames)
    }

    /// Geometric position Jacobian (3 x dof) of the chain tip.
    pub fn position_jacobian(&self, q: &JointConfig) -> Result<nalgebra::DMatrix<f64>, KinematicsError> {
        let frames = self.frames(q)?;
        let tip = frames.last().expect("at least one frame").translation;
        let mut jac = nalgebra::DMatrix::zeros(3, self.dof());
        let mut col = 0;
        for (i, link) in self.links.iter().enumerate() {
            if link.joint_kind == JointKind::Fixed {
                continue;
            }
            // Joint i rotates about the z axis of the frame preceding link i.
            let z = frames[i].rotation.column(2).into_owned();
            let c = z.cross(&(tip - frames[i].translation));
            jac.fixed_view_mut::<3, 1>(0, col).copy_from(&c);
            col += 1;
        }
        Ok(jac)
    }
}

pub fn forward_kinematics(chain: &DhChain, q: &JointConfig) -> Result<HomogeneousTransform, KinematicsError> {
    Ok(*chain.frames(q)?.last().expect("at least one frame"))
}

/// World-frame motion `FK(q_curr) * FK(q_prev)^-1` of the chain tip.
pub fn relative_motion(
    chain: &DhChain,
    q_prev: &JointConfig,
    q_curr: &JointConfig,
) -> Result<HomogeneousTransform, KinematicsError> {
    let prev = forward_kinematics(chain, q_prev)?;
    let curr = forward_kinematics(chain, q_curr)?;
    Ok(curr * prev.inverse())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn random_rotation_vector(rng: &mut impl Rng, max_angle: f64) -> Vector3<f64> {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .normalize();
        axis * rng.random_range(0.0..max_angle)
    }

    #[test]
    fn single_zero_link_is_identity() {
        let chain = DhChain::new(
            HomogeneousTransform::identity(),
            vec![DhLink::revolute(0.0, 0.0, 0.0, 0.0)],
        )
        .unwrap();
        let t = forward_kinematics(&chain, &JointConfig(vec![0.0])).unwrap();
        assert!(t.max_abs_diff(&HomogeneousTransform::identity()) < 1e-15);
    }

    #[test]
    fn single_link_quarter_turn() {
        let chain = DhChain::new(
            HomogeneousTransform::identity(),
            vec![DhLink::revolute(0.1, 0.0, 0.0, 0.0)],
        )
        .unwrap();
        let t = forward_kinematics(&chain, &JointConfig(vec![FRAC_PI_2])).unwrap();
        // Rz(pi/2) with the link length carried along the rotated x axis.
        let expected = HomogeneousTransform {
            rotation: Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0),
            translation: Vector3::new(0.0, 0.1, 0.0),
        };
        assert!(t.max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn fixed_links_ignore_input_and_dimension_is_checked() {
        let chain = DhChain::new(
            HomogeneousTransform::identity(),
            vec![DhLink::revolute(0.1, 0.0, 0.0, 0.0), DhLink::fixed(0.05, 0.0, 0.0, 0.3)],
        )
        .unwrap();
        assert_eq!(chain.dof(), 1);
        assert_eq!(
            forward_kinematics(&chain, &JointConfig(vec![0.0, 0.0])),
            Err(KinematicsError::DimensionMismatch { expected: 1, got: 2 })
        );
    }

    #[test]
    fn empty_chain_rejected() {
        assert_eq!(
            DhChain::new(HomogeneousTransform::identity(), vec![]),
            Err(KinematicsError::EmptyChain)
        );
    }

    #[test]
    fn pose_conversions_basic() {
        let p = pose_from_transform(&HomogeneousTransform::identity());
        assert_eq!(p.position, Vector3::zeros());
        assert_eq!(p.orientation, Vector3::zeros());

        let t = HomogeneousTransform {
            rotation: Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0),
            translation: Vector3::new(1.0, 0.0, 0.0),
        };
        let p = pose_from_transform(&t);
        assert_relative_eq!(p.position, Vector3::new(1.0, 0.0, 0.0));
        assert_relative_eq!(p.orientation, Vector3::new(0.0, 0.0, FRAC_PI_2), epsilon = 1e-15);
        assert!(transform_from_pose(&p).max_abs_diff(&t) < 1e-15);
    }

    #[test]
    fn pose_round_trip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let o = random_rotation_vector(&mut rng, PI - 1e-6);
            let pos = Vector3::new(rng.random(), rng.random(), rng.random());
            let t = transform_from_pose(&Pose::new(pos, o));
            assert!(t.is_rigid());
            let back = transform_from_pose(&pose_from_transform(&t));
            assert!(back.max_abs_diff(&t) < 1e-9);
            assert!((pose_from_transform(&t).orientation - o).amax() < 1e-9);
        }
    }

    #[test]
    fn near_pi_round_trip() {
        for axis in [Vector3::x(), Vector3::new(1.0, -2.0, 0.5).normalize()] {
            let o = axis * (PI - 1e-6);
            let t = transform_from_pose(&Pose::new(Vector3::zeros(), o));
            let back = pose_from_transform(&t);
            assert!((back.orientation - o).amax() < 1e-9);
        }
    }

    #[test]
    fn canonicalization_wraps_and_fixes_sign_at_pi() {
        let o = canonical_rotation_vector(&Vector3::new(0.0, 0.0, 1.5 * PI));
        assert_relative_eq!(o, Vector3::new(0.0, 0.0, -0.5 * PI), epsilon = 1e-12);
        let o = canonical_rotation_vector(&Vector3::new(0.0, -PI, 0.0));
        assert_eq!(o, Vector3::new(0.0, PI, 0.0));
        let r = exp_so3(&Vector3::new(0.0, 0.0, -PI));
        let back = log_so3(&r);
        assert_relative_eq!(back.norm(), PI, epsilon = 1e-12);
        assert!(back.z > 0.0);
    }

    #[test]
    fn relative_motion_examples() {
        let chain = test_chain();
        let q0 = JointConfig(vec![0.1, -0.2, 0.3]);
        let id = relative_motion(&chain, &q0, &q0).unwrap();
        assert!(id.max_abs_diff(&HomogeneousTransform::identity()) < 1e-12);

        let zero = JointConfig::zeros(3);
        let moved = JointConfig(vec![0.0, 0.4, 0.0]);
        let d = relative_motion(&chain, &zero, &moved).unwrap();
        let fk1 = forward_kinematics(&chain, &moved).unwrap();
        let fk0 = forward_kinematics(&chain, &zero).unwrap();
        let direct = fk1.to_matrix() * fk0.to_matrix().try_inverse().unwrap();
        assert!((d.to_matrix() - direct).amax() < 1e-12);
    }

    #[test]
    fn relative_motion_composes() {
        let chain = test_chain();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let qs: Vec<JointConfig> = (0..3)
                .map(|_| JointConfig((0..3).map(|_| rng.random_range(-PI..PI)).collect()))
                .collect();
            let d01 = relative_motion(&chain, &qs[0], &qs[1]).unwrap();
            let d12 = relative_motion(&chain, &qs[1], &qs[2]).unwrap();
            let d02 = relative_motion(&chain, &qs[0], &qs[2]).unwrap();
            assert!((d12 * d01).max_abs_diff(&d02) < 1e-9);
        }
    }

    #[test]
    fn position_jacobian_matches_finite_differences() {
        let chain = test_chain();
        let q = JointConfig(vec![0.3, -0.7, 1.1]);
        let jac = chain.position_jacobian(&q).unwrap();
        let h = 1e-6;
        for j in 0..3 {
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp.0[j] += h;
            qm.0[j] -= h;
            let fd = (forward_kinematics(&chain, &qp).unwrap().translation
                - forward_kinematics(&chain, &qm).unwrap().translation)
                / (2.0 * h);
            assert!((jac.column(j) - fd).amax() < 1e-8);
        }
    }

    fn test_chain() -> DhChain {
        DhChain::new(
            HomogeneousTransform::from_translation(Vector3::new(0.0, 0.0, 0.2)),
            vec![
                DhLink::revolute(0.0, FRAC_PI_2, 0.1, 0.0),
                DhLink::revolute(0.25, 0.0, 0.0, 0.2),
                DhLink::revolute(0.2, -FRAC_PI_2, 0.0, 0.0),
            ],
        )
        .unwrap()
    }
}
