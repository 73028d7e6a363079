//! Simulated test bench: a 4-DoF arm whose encoders report biased angles, a
//! stereo pair on a pan/tilt head, optional clutter, and the servo scenarios
//! run on top of them.

use std::f64::consts::FRAC_PI_2;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::camera::{triangulate, CameraError, CameraModel, CameraMount, CameraView, Intrinsics, StereoFeature};
use crate::config::{load_chain, load_scene, CameraSection, Config, ConfigError, FeedbackMode};
use crate::filter::{stream_rng, FilterError};
use crate::kinematics::{
    forward_kinematics, pose_from_transform, DhChain, DhLink, HomogeneousTransform, JointConfig, KinematicsError, Pose,
};
use crate::renderer::{render_placed, Image, Placed, Scene, TriangleMesh};
use crate::servo::{servo_loop, Feedback, GroundTruth, Plant, ServoConfig, ServoError, TraceRow};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error("inverse kinematics did not reach the target (residual {0:.4} m)")]
    Unreachable(f64),
    #[error("goal feature does not triangulate to a point in front of the cameras")]
    BadGoal,
}

const PURPOSE_TRIAL: u64 = 0x51;
const PURPOSE_NOISE: u64 = 0x52;
const PURPOSE_CLUTTER: u64 = 0x53;

/// Joint configuration the approach IK starts from; puts the default hand
/// roughly horizontal in front of the cameras.
pub const ARM_HOME: [f64; 4] = [1.37, 0.9, -1.8, 0.9];

/// Constant per-joint encoder offsets plus an optional linear drift.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBias {
    pub offsets: Vec<f64>,
    /// rad/s of simulated time.
    pub drift: Vec<f64>,
}

impl EncoderBias {
    pub fn zero(n: usize) -> Self {
        Self {
            offsets: vec![0.0; n],
            drift: vec![0.0; n],
        }
    }

    pub fn constant(offsets: Vec<f64>) -> Self {
        let n = offsets.len();
        Self {
            offsets,
            drift: vec![0.0; n],
        }
    }

    pub fn at(&self, time: f64) -> Vec<f64> {
        self.offsets
            .iter()
            .zip(&self.drift)
            .map(|(o, d)| o + d * time)
            .collect()
    }

    /// What the encoders read when the joints are at `q_true`.
    pub fn reported(&self, q_true: &JointConfig, time: f64) -> JointConfig {
        JointConfig(
            q_true
                .as_slice()
                .iter()
                .zip(self.at(time))
                .map(|(q, b)| q + b)
                .collect(),
        )
    }
}

/// A rigid distractor placed in the world.
#[derive(Debug, Clone)]
pub struct ClutterObject {
    pub scene: Scene,
    pub pose: Pose,
}

impl ClutterObject {
    pub fn new(mesh: TriangleMesh, pose: Pose, albedo: f64) -> Self {
        let mut scene = Scene::default();
        scene.push("clutter", Arc::new(mesh), HomogeneousTransform::identity(), albedo);
        Self { scene, pose }
    }
}

/// Ground truth of the bench. The servo side only sees it through [`Plant`].
#[derive(Debug, Clone)]
pub struct World {
    pub arm: DhChain,
    q_true: JointConfig,
    pub bias: EncoderBias,
    pub cameras: Vec<CameraModel>,
    views: Vec<CameraView>,
    pub scene: Scene,
    pub clutter: Vec<ClutterObject>,
    /// Per-camera background images (black when absent).
    pub backgrounds: Option<Vec<Image>>,
    pub pixel_noise: f64,
    pub target_point: Vector3<f64>,
    pub rng_seed: u64,
    /// Row of joint weights whose weighted sum is held fixed by Cartesian
    /// moves (the hand's pitch on the default arm).
    pub attitude_row: Option<Vec<f64>>,
    time: f64,
    frame: u64,
}

impl World {
    pub fn new(
        arm: DhChain,
        q_true: JointConfig,
        bias: EncoderBias,
        cameras: Vec<CameraModel>,
        scene: Scene,
    ) -> Result<Self, SimError> {
        if q_true.len() != arm.dof() {
            return Err(KinematicsError::DimensionMismatch {
                expected: arm.dof(),
                got: q_true.len(),
            }
            .into());
        }
        if bias.offsets.len() != arm.dof() || bias.drift.len() != arm.dof() {
            return Err(KinematicsError::DimensionMismatch {
                expected: arm.dof(),
                got: bias.offsets.len(),
            }
            .into());
        }
        let views = cameras
            .iter()
            .map(CameraView::from_model)
            .collect::<Result<Vec<_>, _>>()?;
        let attitude_row = default_attitude_row(arm.dof());
        Ok(Self {
            target_point: forward_kinematics(&arm, &q_true)?.translation,
            arm,
            q_true,
            bias,
            cameras,
            views,
            scene,
            clutter: Vec::new(),
            backgrounds: None,
            pixel_noise: 0.0,
            rng_seed: 0,
            attitude_row,
            time: 0.0,
            frame: 0,
        })
    }

    pub fn true_joints(&self) -> &JointConfig {
        &self.q_true
    }

    pub fn reported_joints(&self) -> JointConfig {
        self.bias.reported(&self.q_true, self.time)
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn views(&self) -> &[CameraView] {
        &self.views
    }

    pub fn true_ee_pose(&self) -> Pose {
        pose_from_transform(&forward_kinematics(&self.arm, &self.q_true).expect("validated at construction"))
    }

    /// Noise-free images of the current state, one per camera.
    pub fn render_clean(&self) -> Vec<Image> {
        let hand = self.true_ee_pose();
        let mut items = vec![Placed {
            scene: &self.scene,
            pose: &hand,
        }];
        items.extend(self.clutter.iter().map(|c| Placed {
            scene: &c.scene,
            pose: &c.pose,
        }));
        self.views
            .iter()
            .enumerate()
            .map(|(i, view)| {
                let bg = self.backgrounds.as_ref().map(|b| &b[i]);
                render_placed(&items, view, bg)
            })
            .collect()
    }

    /// Camera images of the true state (with pixel noise) and the reported joints.
    pub fn observe(&mut self) -> (Vec<Image>, JointConfig) {
        let mut images = self.render_clean();
        if self.pixel_noise > 0.0 {
            for (c, img) in images.iter_mut().enumerate() {
                let mut rng = stream_rng(self.rng_seed, self.frame, c as u64, PURPOSE_NOISE);
                let noisy = img
                    .pixels()
                    .iter()
                    .map(|&p| {
                        let n: f64 = StandardNormal.sample(&mut rng);
                        p + (n * self.pixel_noise) as f32
                    })
                    .collect();
                *img = Image::from_pixels(img.width(), img.height(), noisy);
            }
        }
        self.frame += 1;
        (images, self.reported_joints())
    }

    /// Applies a joint increment to the real arm and advances time by `dt`.
    pub fn move_joints(&mut self, dq: &[f64], dt: f64) {
        for (q, d) in self.q_true.0.iter_mut().zip(dq) {
            *q += d;
        }
        self.time += dt;
    }

    /// Sets the true joints directly (bench setup only).
    pub fn set_true_joints(&mut self, q: JointConfig) -> Result<(), SimError> {
        if q.len() != self.arm.dof() {
            return Err(KinematicsError::DimensionMismatch {
                expected: self.arm.dof(),
                got: q.len(),
            }
            .into());
        }
        self.q_true = q;
        Ok(())
    }
}

impl Plant for World {
    fn chain(&self) -> &DhChain {
        &self.arm
    }

    fn scene(&self) -> &Scene {
        &self.scene
    }

    fn cameras(&self) -> Vec<CameraView> {
        self.views.clone()
    }

    fn observe(&mut self) -> (Vec<Image>, JointConfig) {
        World::observe(self)
    }

    /// Resolved on the reported kinematics, as a joint-level Cartesian
    /// controller on the robot would do; the joints then move by exactly the
    /// commanded increment.
    fn move_cartesian(&mut self, velocity: &Vector3<f64>, dt: f64) -> Result<(), ServoError> {
        let q = self.reported_joints();
        let dx = velocity * dt;
        let dq = dls_step(&self.arm, &q, &dx, self.attitude_row.as_deref(), 0.0, 1e-3)
            .map_err(|e| ServoError::Plant(e.to_string()))?;
        self.move_joints(dq.as_slice(), dt);
        Ok(())
    }
}

impl GroundTruth for World {
    fn true_pose(&self) -> Pose {
        self.true_ee_pose()
    }
}

fn default_attitude_row(dof: usize) -> Option<Vec<f64>> {
    (dof >= 4).then(|| (0..dof).map(|i| if i == 0 { 0.0 } else { 1.0 }).collect())
}

/// One damped least-squares step towards position increment `dx`, optionally
/// also asking the weighted joint sum `row . dq` to equal `d_attitude`.
pub fn dls_step(
    chain: &DhChain,
    q: &JointConfig,
    dx: &Vector3<f64>,
    row: Option<&[f64]>,
    d_attitude: f64,
    damping: f64,
) -> Result<DVector<f64>, KinematicsError> {
    let jp = chain.position_jacobian(q)?;
    let n = chain.dof();
    let (j, rhs) = match row {
        Some(r) if r.len() == n => {
            let mut j = DMatrix::zeros(4, n);
            j.view_mut((0, 0), (3, n)).copy_from(&jp);
            for (c, w) in r.iter().enumerate() {
                j[(3, c)] = *w;
            }
            (j, DVector::from_vec(vec![dx.x, dx.y, dx.z, d_attitude]))
        }
        _ => (jp, DVector::from_vec(vec![dx.x, dx.y, dx.z])),
    };
    let m = j.nrows();
    let jjt = &j * j.transpose() + DMatrix::identity(m, m) * (damping * damping);
    let y = jjt.lu().solve(&rhs).ok_or(KinematicsError::NotRigid)?;
    Ok(j.transpose() * y)
}

/// Iterative position IK from `q0`, holding `row . q = attitude` when a row is
/// given.
pub fn solve_ik(
    chain: &DhChain,
    q0: &JointConfig,
    target: &Vector3<f64>,
    row: Option<&[f64]>,
    attitude: f64,
) -> Result<JointConfig, SimError> {
    let mut q = q0.clone();
    let row = row.filter(|r| r.len() == chain.dof());
    let attitude_of =
        |q: &JointConfig| -> f64 { row.map_or(0.0, |r| r.iter().zip(q.as_slice()).map(|(a, b)| a * b).sum()) };
    for _ in 0..200 {
        let p = forward_kinematics(chain, &q)?.translation;
        let err = target - p;
        let d_att = attitude - attitude_of(&q);
        if err.norm() < 1e-10 && d_att.abs() < 1e-10 {
            return Ok(q);
        }
        // Limit the step so the linearization stays valid far from the target.
        let scale = (0.05 / err.norm()).min(1.0);
        let dq = dls_step(chain, &q, &(err * scale), row, d_att * scale, 1e-4)?;
        for (qi, d) in q.0.iter_mut().zip(dq.iter()) {
            *qi += d;
        }
    }
    let residual = (target - forward_kinematics(chain, &q)?.translation).norm();
    if residual < 1e-6 {
        Ok(q)
    } else {
        Err(SimError::Unreachable(residual))
    }
}

/// The built-in arm: yaw, three parallel pitch joints and a 9 cm hand link
/// whose distal frame sits at the fingertip.
pub fn default_arm() -> DhChain {
    let base = HomogeneousTransform::from_translation(Vector3::new(0.35, -0.45, 0.05));
    DhChain::new(
        base,
        vec![
            DhLink::revolute(0.0, FRAC_PI_2, 0.0, 0.0),
            DhLink::revolute(0.30, 0.0, 0.0, 0.0),
            DhLink::revolute(0.25, 0.0, 0.0, 0.0),
            DhLink::revolute(0.09, 0.0, 0.0, 0.0),
        ],
    )
    .expect("built-in arm is valid")
}

/// Pan/tilt head carrying the stereo pair.
pub fn default_head() -> DhChain {
    let base = HomogeneousTransform::from_translation(Vector3::new(-0.05, 0.0, 0.40));
    DhChain::new(
        base,
        vec![
            DhLink::revolute(0.0, -FRAC_PI_2, 0.0, 0.0),
            DhLink::revolute(0.03, 0.0, 0.0, 0.0),
        ],
    )
    .expect("built-in head is valid")
}

/// A blocky hand in the fingertip frame: fingers along `+x` ending at the
/// origin, palm behind them, a thumb off to the side and a wrist stub.
pub fn default_hand() -> Scene {
    let mut scene = Scene::default();
    let part = |scene: &mut Scene, name: &str, size: [f64; 3], at: [f64; 3], yaw: f64, albedo: f64| {
        let offset = HomogeneousTransform {
            rotation: *nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), yaw).matrix(),
            translation: Vector3::from(at),
        };
        scene.push(
            name,
            Arc::new(TriangleMesh::cuboid(Vector3::from(size))),
            offset,
            albedo,
        );
    };
    part(
        &mut scene,
        "middle",
        [0.055, 0.016, 0.016],
        [-0.0275, 0.0, 0.0],
        0.0,
        0.9,
    );
    part(
        &mut scene,
        "index",
        [0.05, 0.016, 0.016],
        [-0.03, 0.019, 0.0],
        0.0,
        0.75,
    );
    part(
        &mut scene,
        "ring",
        [0.046, 0.016, 0.016],
        [-0.032, -0.019, 0.0],
        0.0,
        0.85,
    );
    part(&mut scene, "palm", [0.07, 0.065, 0.022], [-0.09, 0.0, 0.0], 0.0, 0.7);
    part(
        &mut scene,
        "thumb",
        [0.045, 0.015, 0.016],
        [-0.07, 0.042, 0.006],
        0.6,
        0.95,
    );
    part(&mut scene, "wrist", [0.05, 0.045, 0.035], [-0.15, 0.0, 0.0], 0.0, 0.5);
    scene
}

/// Camera frame (camera -> world) at `position` looking at `target`, with
/// image `y` pointing as close to world `-z` as possible.
pub fn look_at(position: &Vector3<f64>, target: &Vector3<f64>) -> HomogeneousTransform {
    let z = (target - position).normalize();
    let x = z.cross(&Vector3::z()).normalize();
    let y = z.cross(&x);
    HomogeneousTransform {
        rotation: Matrix3::from_columns(&[x, y, z]),
        translation: *position,
    }
}

/// Left/right cameras mounted on the head so that at `head_joints` they sit
/// where the section places them.
pub fn stereo_rig(section: &CameraSection) -> Result<Vec<CameraModel>, SimError> {
    let head = match &section.head_chain {
        Some(path) => load_chain(path)?,
        None => default_head(),
    };
    let joints = JointConfig(section.head_joints.clone());
    let head_pose = forward_kinematics(&head, &joints)?;
    let left = look_at(&Vector3::from(section.position), &Vector3::from(section.look_at));
    let right = left * HomogeneousTransform::from_translation(Vector3::new(section.baseline, 0.0, 0.0));
    let inv = head_pose.inverse();
    Ok([left, right]
        .into_iter()
        .map(|cam| CameraModel {
            intrinsics: section.intrinsics,
            mount: CameraMount::Chain {
                chain: head.clone(),
                joints: joints.clone(),
                eye_offset: inv * cam,
            },
        })
        .collect())
}

/// World point whose stereo projection is the goal feature.
pub fn goal_point(goal: &StereoFeature, views: &[CameraView]) -> Result<Vector3<f64>, SimError> {
    let p = triangulate(goal, &views[0].projection(), &views[1].projection()).ok_or(SimError::BadGoal)?;
    for v in views {
        if !(v.extrinsic.transform_point(&p).z > 0.0) {
            return Err(SimError::BadGoal);
        }
    }
    Ok(p)
}

/// Smooth intensity pattern standing in for a textured table and wall.
pub fn background_pattern(k: &Intrinsics, level: f64, amplitude: f64, rng: &mut impl Rng) -> Image {
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let wavelength = rng.random_range(60.0..160.0);
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (angle.cos() / wavelength, angle.sin() / wavelength, phase)
        })
        .collect();
    Image::from_fn(k.width, k.height, |x, y| {
        let s: f64 = waves
            .iter()
            .map(|(fx, fy, ph)| (std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) + ph).sin())
            .sum();
        (level + amplitude * s / 3.0) as f32
    })
}

/// Random boxes and octahedra resting on the table, away from the target.
pub fn random_clutter(
    cfg: &crate::config::ClutterSection,
    target: &Vector3<f64>,
    rng: &mut impl Rng,
) -> Vec<ClutterObject> {
    let count = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count && attempts < 1000 {
        attempts += 1;
        let size = Vector3::new(
            rng.random_range(0.025..0.07),
            rng.random_range(0.025..0.07),
            rng.random_range(0.025..0.07),
        );
        let centre = Vector3::new(
            rng.random_range(0.15..0.75),
            rng.random_range(-0.35..0.3),
            cfg.table_height + size.z / 2.0,
        );
        let reach = size.x.max(size.y) / 2.0;
        let horizontal = ((centre.x - target.x).powi(2) + (centre.y - target.y).powi(2)).sqrt();
        if horizontal < cfg.keep_out + reach {
            continue;
        }
        let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let mesh = if rng.random_bool(0.5) {
            TriangleMesh::cuboid(size)
        } else {
            TriangleMesh::octahedron(size / 2.0)
        };
        let albedo = rng.random_range(0.2..0.95);
        out.push(ClutterObject::new(mesh, Pose::new(centre, Vector3::z() * yaw), albedo));
    }
    out
}

/// A box between the cameras and `point` large enough to hide the hand in
/// both views.
pub fn occluder(views: &[CameraView], point: &Vector3<f64>) -> ClutterObject {
    let centres: Vec<Vector3<f64>> = views.iter().map(|v| v.extrinsic.inverse().translation).collect();
    let eye = centres.iter().sum::<Vector3<f64>>() / centres.len() as f64;
    let at = eye + (point - eye) * 0.6;
    ClutterObject::new(
        TriangleMesh::cuboid(Vector3::new(0.16, 0.16, 0.16)),
        Pose::new(at, Vector3::zeros()),
        0.6,
    )
}

/// Which scenario a trial belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// Reaching with a biased arm on a plain background.
    Reach,
    /// Reaching with clutter, a textured background and pixel noise.
    Clutter,
}

impl Task {
    pub fn number(&self) -> u8 {
        match self {
            Task::Reach => 1,
            Task::Clutter => 2,
        }
    }
}

/// Everything needed to replay one trial.
#[derive(Debug, Clone)]
pub struct TrialSetup {
    pub world: World,
    pub goal: StereoFeature,
    pub coarse_target: Vector3<f64>,
    pub start: Vector3<f64>,
    pub filter_seed: u64,
}

/// Builds the world of trial `index`. The starting point, bias and seeds
/// depend only on the index, so both tasks and all speed caps share them;
/// clutter comes from a separate stream.
pub fn prepare_trial(cfg: &Config, task: Task, index: usize) -> Result<TrialSetup, SimError> {
    let mut rng: ChaCha8Rng = stream_rng(cfg.seed, 1, index as u64, PURPOSE_TRIAL);
    let mut clutter_rng: ChaCha8Rng = stream_rng(cfg.seed, 1, index as u64, PURPOSE_CLUTTER);
    let arm = match &cfg.world.arm_chain {
        Some(p) => load_chain(p)?,
        None => default_arm(),
    };
    let scene = match &cfg.world.scene {
        Some(p) => load_scene(p)?,
        None => default_hand(),
    };
    let cameras = stereo_rig(&cfg.cameras)?;
    let views = cameras
        .iter()
        .map(CameraView::from_model)
        .collect::<Result<Vec<_>, _>>()?;
    let goal = StereoFeature::new(cfg.scenario.goal[0], cfg.scenario.goal[1], cfg.scenario.goal[2]);
    let target = goal_point(&goal, &views)?;

    let bias_mag = cfg.world.bias_deg.to_radians();
    let drift_mag = cfg.world.bias_drift_deg_per_s.to_radians();
    let mut offsets = Vec::with_capacity(arm.dof());
    let mut drift = Vec::with_capacity(arm.dof());
    for _ in 0..arm.dof() {
        let sign = if cfg.world.random_bias_sign && rng.random_bool(0.5) {
            -1.0
        } else {
            1.0
        };
        offsets.push(sign * bias_mag);
        drift.push(sign * drift_mag);
    }
    let bias = EncoderBias { offsets, drift };

    let gauss = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let coarse = target + Vector3::new(gauss(&mut rng), gauss(&mut rng), gauss(&mut rng)) * cfg.world.target_sigma;
    let dir = Vector3::new(gauss(&mut rng), gauss(&mut rng), gauss(&mut rng)).normalize();
    let start = coarse + dir * cfg.world.start_spread;

    // Open-loop approach: the controller believes the encoders, so it solves
    // on the reported angles and the real joints end up offset by the bias.
    let home = if arm.dof() == ARM_HOME.len() {
        JointConfig(ARM_HOME.to_vec())
    } else {
        JointConfig::zeros(arm.dof())
    };
    let row = default_attitude_row(arm.dof());
    let q_reported = solve_ik(&arm, &home, &start, row.as_deref(), cfg.world.approach_pitch)?;
    let q_true = JointConfig(
        q_reported
            .as_slice()
            .iter()
            .zip(&bias.offsets)
            .map(|(q, b)| q - b)
            .collect(),
    );

    let mut world = World::new(arm, q_true, bias, cameras, scene)?;
    world.target_point = target;
    world.rng_seed = rng.random();
    let filter_seed = rng.random();
    let clutter = &cfg.world.clutter;
    let with_clutter = match task {
        Task::Reach => clutter.enabled,
        Task::Clutter => cfg.scenario.task2_clutter,
    };
    if with_clutter {
        world.clutter = random_clutter(clutter, &target, &mut clutter_rng);
        world.backgrounds = Some(
            views
                .iter()
                .map(|v| {
                    background_pattern(
                        &v.intrinsics,
                        clutter.background_level,
                        clutter.background_amplitude,
                        &mut clutter_rng,
                    )
                })
                .collect(),
        );
    }
    world.pixel_noise = match task {
        Task::Reach => cfg.world.pixel_noise,
        Task::Clutter => cfg.scenario.task2_pixel_noise,
    };
    Ok(TrialSetup {
        world,
        goal,
        coarse_target: coarse,
        start,
        filter_seed,
    })
}

/// How a trial ended when it did not converge.
#[derive(Debug, Clone, PartialEq)]
pub enum Failure {
    NotConverged,
    AllWeightsZero,
    SingularJacobian,
    Other(String),
}

impl Failure {
    pub fn label(&self) -> String {
        match self {
            Failure::NotConverged => "NotConverged".into(),
            Failure::AllWeightsZero => "AllWeightsZero".into(),
            Failure::SingularJacobian => "SingularJacobian".into(),
            Failure::Other(m) => format!("Error: {m}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub task: u8,
    /// Index of the trial within the scenario (all speeds).
    pub id: usize,
    /// Index of the starting point.
    pub start_index: usize,
    pub speed: f64,
    pub seed: u64,
    pub converged: bool,
    pub failure: Option<Failure>,
    pub final_error: f64,
    pub iterations: usize,
    pub reinitializations: usize,
    /// Distance of the final 3D estimate from the true end-effector position (m).
    pub eap_error: f64,
    /// Distance of the reported-kinematics position from the truth (m).
    pub kinematic_error: f64,
    pub trace: Vec<TraceRow>,
    /// Not part of any deterministic output.
    pub wall_clock: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub task: u8,
    pub speed: f64,
    pub successes: usize,
    pub trials: usize,
    /// Mean and sample standard deviation of the final error of converged trials.
    pub mean_error: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioResult {
    pub trials: Vec<TrialResult>,
}

impl ScenarioResult {
    /// One aggregate per (task, speed) group, in order of first appearance.
    pub fn aggregates(&self) -> Vec<Aggregate> {
        let mut keys: Vec<(u8, f64)> = Vec::new();
        for t in &self.trials {
            if !keys.iter().any(|k| k.0 == t.task && k.1 == t.speed) {
                keys.push((t.task, t.speed));
            }
        }
        keys.into_iter()
            .map(|(task, speed)| {
                let group: Vec<&TrialResult> = self
                    .trials
                    .iter()
                    .filter(|t| t.task == task && t.speed == speed)
                    .collect();
                let errors: Vec<f64> = group.iter().filter(|t| t.converged).map(|t| t.final_error).collect();
                let (mean_error, std_error) = mean_std(&errors);
                Aggregate {
                    task,
                    speed,
                    successes: errors.len(),
                    trials: group.len(),
                    mean_error,
                    std_error,
                }
            })
            .collect()
    }

    pub fn wall_clock(&self) -> Duration {
        self.trials.iter().map(|t| t.wall_clock).sum()
    }
}

/// Mean and sample standard deviation; `(NaN, NaN)` for no values and a zero
/// deviation for one.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn feedback_for(cfg: &Config, seed: u64) -> Feedback {
    match cfg.scenario.feedback {
        FeedbackMode::Filter => Feedback::Filter {
            config: cfg.filter.clone(),
            seed,
        },
        FeedbackMode::Oracle => Feedback::Oracle,
    }
}

/// Runs one servo trial on a prepared world.
pub fn run_trial(
    setup: TrialSetup,
    feedback: &Feedback,
    servo: &ServoConfig,
    task: Task,
    id: usize,
    start_index: usize,
) -> TrialResult {
    let TrialSetup { mut world, goal, .. } = setup;
    let t0 = Instant::now();
    let outcome = servo_loop(&mut world, feedback, &goal, servo);
    let wall_clock = t0.elapsed();
    let seed = match feedback {
        Feedback::Filter { seed, .. } => *seed,
        Feedback::Oracle => 0,
    };
    let (result, failure) = match outcome {
        Ok(r) => (Some(r), None),
        Err(ServoError::NotConverged(r)) => (Some(*r), Some(Failure::NotConverged)),
        Err(ServoError::Filter(FilterError::AllWeightsZero)) => (None, Some(Failure::AllWeightsZero)),
        Err(ServoError::SingularJacobian(_)) => (None, Some(Failure::SingularJacobian)),
        Err(e) => (None, Some(Failure::Other(e.to_string()))),
    };
    let truth = world.true_ee_pose().position;
    let kinematic = forward_kinematics(&world.arm, &world.reported_joints())
        .map(|t| t.translation)
        .unwrap_or(Vector3::repeat(f64::NAN));
    match result {
        Some(r) => {
            let last = r.trace.last();
            let eap_error = last.map_or(f64::NAN, |row| {
                (row.estimate - row.true_position.unwrap_or(truth)).norm()
            });
            let kinematic_error = last.map_or(f64::NAN, |row| {
                (row.kinematic_position - row.true_position.unwrap_or(truth)).norm()
            });
            TrialResult {
                task: task.number(),
                id,
                start_index,
                speed: servo.max_speed,
                seed,
                converged: r.converged,
                failure,
                final_error: r.final_error,
                iterations: r.iterations,
                reinitializations: r.reinitializations,
                eap_error,
                kinematic_error,
                trace: r.trace,
                wall_clock,
            }
        }
        None => TrialResult {
            task: task.number(),
            id,
            start_index,
            speed: servo.max_speed,
            seed,
            converged: false,
            failure,
            final_error: f64::NAN,
            iterations: 0,
            reinitializations: 0,
            eap_error: f64::NAN,
            kinematic_error: (kinematic - truth).norm(),
            trace: Vec::new(),
            wall_clock,
        },
    }
}

/// Runs `cfg.scenario.trials` starting points at every speed cap. Trials run
/// in parallel; each owns its world and seeds, so the result does not depend
/// on the thread count.
pub fn run_scenario(cfg: &Config, task: Task, speeds: &[f64]) -> Result<ScenarioResult, SimError> {
    let n = cfg.scenario.trials;
    let jobs: Vec<(usize, usize, f64)> = speeds
        .iter()
        .enumerate()
        .flat_map(|(s, &speed)| (0..n).map(move |i| (s * n + i, i, speed)))
        .collect();
    let setups = (0..n)
        .map(|i| prepare_trial(cfg, task, i))
        .collect::<Result<Vec<_>, _>>()?;
    let trials = jobs
        .par_iter()
        .map(|&(id, start_index, speed)| {
            let setup = setups[start_index].clone();
            let servo = ServoConfig {
                max_speed: speed,
                ..cfg.servo
            };
            let feedback = feedback_for(cfg, setup.filter_seed);
            run_trial(setup, &feedback, &servo, task, id, start_index)
        })
        .collect();
    Ok(ScenarioResult { trials })
}

/// Reaching with the biased arm at each configured speed cap.
pub fn run_task1(cfg: &Config) -> Result<ScenarioResult, SimError> {
    run_scenario(cfg, Task::Reach, &cfg.scenario.task1_speeds)
}

/// Reaching in clutter, over a textured background, with pixel noise.
pub fn run_task2(cfg: &Config) -> Result<ScenarioResult, SimError> {
    run_scenario(cfg, Task::Clutter, &[cfg.scenario.task2_speed])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::stereo_feature;

    #[test]
    fn zero_bias_reports_truth() {
        let arm = default_arm();
        let q = JointConfig(ARM_HOME.to_vec());
        let cams = stereo_rig(&CameraSection::default()).unwrap();
        let mut world = World::new(arm, q.clone(), EncoderBias::zero(4), cams, default_hand()).unwrap();
        let (_, reported) = world.observe();
        assert_eq!(reported, q);
    }

    #[test]
    fn bias_changes_kinematics() {
        let arm = default_arm();
        let q = JointConfig(ARM_HOME.to_vec());
        let bias = EncoderBias::constant(vec![0.0, 0.05, 0.0, 0.0]);
        let reported = bias.reported(&q, 0.0);
        let t_true = forward_kinematics(&arm, &q).unwrap();
        let t_rep = forward_kinematics(&arm, &reported).unwrap();
        // Rotating joint 2 by 0.05 rad swings everything beyond it about its axis.
        let frames = arm.frames(&q).unwrap();
        let axis_frame = frames[1];
        let rot = HomogeneousTransform::from_axis_angle(&axis_frame.rotation.column(2).into_owned(), 0.05);
        let about = HomogeneousTransform::from_translation(axis_frame.translation)
            * rot
            * HomogeneousTransform::from_translation(-axis_frame.translation);
        let predicted = about * t_true;
        assert!(predicted.max_abs_diff(&t_rep) < 1e-12);
        assert!((t_rep.translation - t_true.translation).norm() > 1e-3);
    }

    #[test]
    fn clean_observation_is_the_rendering() {
        let arm = default_arm();
        let q = JointConfig(ARM_HOME.to_vec());
        let cams = stereo_rig(&CameraSection::default()).unwrap();
        let mut world = World::new(arm, q, EncoderBias::zero(4), cams, default_hand()).unwrap();
        let (images, _) = world.observe();
        let pose = world.true_ee_pose();
        for (img, view) in images.iter().zip(world.views()) {
            let direct = crate::renderer::render(&world.scene, &pose, view);
            assert_eq!(img.to_bytes(), direct.to_bytes());
            assert!(img.pixels().iter().filter(|&&p| p > 0.0).count() > 500);
        }
    }

    #[test]
    fn rig_matches_goal_geometry() {
        let cams = stereo_rig(&CameraSection::default()).unwrap();
        let views: Vec<CameraView> = cams.iter().map(|c| CameraView::from_model(c).unwrap()).collect();
        let goal = StereoFeature::new(125.0, 89.0, 135.0);
        let p = goal_point(&goal, &views).unwrap();
        let back = stereo_feature(&p, &views[0].projection(), &views[1].projection()).unwrap();
        assert!((back.to_vector() - goal.to_vector()).norm() < 1e-6);
        let depth = views[0].extrinsic.transform_point(&p).z;
        assert!((depth - 320.0 * 0.045 / 36.0).abs() < 1e-9);
    }

    #[test]
    fn ik_reaches_goal() {
        let arm = default_arm();
        let cams = stereo_rig(&CameraSection::default()).unwrap();
        let views: Vec<CameraView> = cams.iter().map(|c| CameraView::from_model(c).unwrap()).collect();
        let p = goal_point(&StereoFeature::new(125.0, 89.0, 135.0), &views).unwrap();
        let row = default_attitude_row(4);
        let q = solve_ik(&arm, &JointConfig(ARM_HOME.to_vec()), &p, row.as_deref(), 0.0).unwrap();
        let reached = forward_kinematics(&arm, &q).unwrap().translation;
        assert!((reached - p).norm() < 1e-9);
        assert!((q.0[1] + q.0[2] + q.0[3]).abs() < 1e-9);
    }

    #[test]
    fn cartesian_move_follows_command_without_bias() {
        let arm = default_arm();
        let cams = stereo_rig(&CameraSection::default()).unwrap();
        let mut world = World::new(
            arm,
            JointConfig(ARM_HOME.to_vec()),
            EncoderBias::zero(4),
            cams,
            default_hand(),
        )
        .unwrap();
        let before = world.true_ee_pose().position;
        let v = Vector3::new(0.002, -0.001, 0.003);
        world.move_cartesian(&v, 1.0).unwrap();
        let moved = world.true_ee_pose().position - before;
        // One linearized step: second-order terms remain.
        assert!((moved - v).norm() < 0.02 * v.norm(), "{moved:?}");
    }

    #[test]
    fn trial_setup_is_deterministic() {
        let cfg = Config {
            seed: 11,
            ..Config::default()
        };
        let a = prepare_trial(&cfg, Task::Clutter, 3).unwrap();
        let b = prepare_trial(&cfg, Task::Clutter, 3).unwrap();
        assert_eq!(a.start, b.start);
        assert_eq!(a.world.true_joints(), b.world.true_joints());
        assert_eq!(a.world.clutter.len(), b.world.clutter.len());
        let (mut wa, mut wb) = (a.world, b.world);
        assert_eq!(wa.observe().0[0].to_bytes(), wb.observe().0[0].to_bytes());
        assert!((5..=15).contains(&wa.clutter.len()));
    }

    #[test]
    fn mean_std_examples() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert!((m - 2.0).abs() < 1e-15 && (s - 1.0).abs() < 1e-15);
        assert!(mean_std(&[]).0.is_nan());
    }
}
