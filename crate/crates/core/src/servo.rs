//! Endpoint closed-loop stereo visual servoing.
//!
//! The controlled feature is `[u_l, u_r, v_l]`: the end-effector origin as
//! projected by the left and right cameras. The law is proportional in the
//! pixel error, mapped to a Cartesian velocity through the inverse of the
//! stereo image Jacobian and saturated at a speed cap.

use std::time::{Duration, Instant};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{image_jacobian, project_point, triangulate, CameraError, CameraView, StereoFeature};
use crate::filter::{FilterConfig, FilterError, StageTimings, Tracker};
use crate::kinematics::{DhChain, JointConfig, Pose};
use crate::renderer::{Image, Scene};

/// Condition number at which the Jacobian is treated as singular.
pub const MAX_CONDITION: f64 = 1e8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ServoError {
    #[error("image Jacobian is singular (condition number {0:e})")]
    SingularJacobian(f64),
    #[error("invalid servo configuration: {0}")]
    InvalidConfig(String),
    #[error("not converged after {} iterations (final error {:.3} px)", .0.iterations, .0.final_error)]
    NotConverged(Box<ServoResult>),
    #[error("stereo pair needs exactly two cameras, got {0}")]
    CameraCount(usize),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error("plant failure: {0}")]
    Plant(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServoConfig {
    /// Proportional gain `K` (1/s).
    pub gain: f64,
    /// Saturation of the commanded Cartesian speed (m/s).
    pub max_speed: f64,
    pub convergence_px: f64,
    pub max_iters: usize,
    /// Control period (s).
    pub dt: f64,
    /// Filter-only iterations run before the first command, so the tracker
    /// can absorb the kinematic bias while the arm is at rest.
    pub settle_iters: usize,
    /// Below this visibility evidence the track counts as lost: the arm holds
    /// still and convergence is not declared.
    pub min_evidence: f64,
    /// Consecutive lost iterations after which the trial is abandoned as not
    /// converged.
    pub lost_patience: usize,
}

impl Default for ServoConfig {
    fn default() -> Self {
        Self {
            gain: 1.0,
            max_speed: 0.005,
            convergence_px: 1.0,
            max_iters: 500,
            dt: 0.5,
            settle_iters: 10,
            min_evidence: 0.5,
            lost_patience: 10,
        }
    }
}

impl ServoConfig {
    pub fn validate(&self) -> Result<(), ServoError> {
        let bad = |m: &str| Err(ServoError::InvalidConfig(m.into()));
        if !(self.gain > 0.0 && self.gain.is_finite()) {
            return bad("gain must be positive");
        }
        if !(self.max_speed > 0.0) {
            return bad("max_speed must be positive");
        }
        if !(self.convergence_px > 0.0) {
            return bad("convergence_px must be positive");
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be positive");
        }
        if self.min_evidence.is_nan() {
            return bad("min_evidence must be a number");
        }
        if self.lost_patience == 0 {
            return bad("lost_patience must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServoState {
    pub u_e: StereoFeature,
    pub u_g: StereoFeature,
    pub e: Vector3<f64>,
    pub iteration: usize,
}

impl ServoState {
    pub fn new(u_g: StereoFeature, u_e: StereoFeature, iteration: usize) -> Self {
        Self {
            u_e,
            u_g,
            e: compute_error(&u_g, &u_e),
            iteration,
        }
    }
}

/// `e = u_g - u_e`.
pub fn compute_error(u_g: &StereoFeature, u_e: &StereoFeature) -> Vector3<f64> {
    u_g.to_vector() - u_e.to_vector()
}

pub fn is_converged(e: &Vector3<f64>, cfg: &ServoConfig) -> bool {
    e.norm() < cfg.convergence_px
}

/// `v = K J^-1 e`, scaled down to `max_speed` if faster.
pub fn control_velocity(j: &Matrix3<f64>, e: &Vector3<f64>, cfg: &ServoConfig) -> Result<Vector3<f64>, ServoError> {
    let sv = j.singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(cond < MAX_CONDITION) {
        return Err(ServoError::SingularJacobian(cond));
    }
    let inv = j.try_inverse().ok_or(ServoError::SingularJacobian(cond))?;
    let v = inv * e * cfg.gain;
    let speed = v.norm();
    Ok(if speed > cfg.max_speed {
        v * (cfg.max_speed / speed)
    } else {
        v
    })
}

/// What a servo loop can do with the robot: look, and move the hand.
///
/// `observe` returns the camera images and the *reported* joint angles; true
/// joint angles never pass through this interface.
pub trait Plant {
    fn chain(&self) -> &DhChain;
    fn scene(&self) -> &Scene;
    fn cameras(&self) -> Vec<CameraView>;
    fn observe(&mut self) -> (Vec<Image>, JointConfig);
    /// Moves the end-effector origin by `velocity * dt`, holding orientation.
    fn move_cartesian(&mut self, velocity: &Vector3<f64>, dt: f64) -> Result<(), ServoError>;
}

/// Test-bench access to the true end-effector pose.
pub trait GroundTruth {
    fn true_pose(&self) -> Pose;
}

/// Where the loop gets the end-effector pose from.
#[derive(Debug, Clone, PartialEq)]
pub enum Feedback {
    /// Particle-filter estimates, one per camera.
    Filter { config: FilterConfig, seed: u64 },
    /// The true pose; bypasses vision entirely.
    Oracle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub u_e: StereoFeature,
    pub e: Vector3<f64>,
    pub error_norm: f64,
    /// Estimate used for the left camera (the only one in oracle mode).
    pub eap_left: Pose,
    pub eap_right: Pose,
    /// 3D estimate: the point whose stereo projection is `u_e`.
    pub estimate: Vector3<f64>,
    /// Truth, recorded for evaluation when the plant exposes it.
    pub true_position: Option<Vector3<f64>>,
    /// Position predicted by the reported kinematics.
    pub kinematic_position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub ess: Vec<f64>,
    /// Visibility evidence of each filter (see `StepReport::evidence`).
    pub evidence: Vec<f64>,
    pub reinitialized: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServoResult {
    pub converged: bool,
    pub final_error: f64,
    /// Control iterations executed (excluding the settle phase).
    pub iterations: usize,
    pub trace: Vec<TraceRow>,
    pub reinitializations: usize,
    pub filter_time: Duration,
    pub timings: StageTimings,
}

impl ServoResult {
    pub fn last(&self) -> Option<&TraceRow> {
        self.trace.last()
    }
}

/// Stereo feature of two per-camera position estimates.
pub fn feature_from_estimates(
    left_pose: &Pose,
    right_pose: &Pose,
    left: &CameraView,
    right: &CameraView,
) -> Result<StereoFeature, CameraError> {
    let l = project_point(&left.projection(), &left_pose.position)?;
    let r = project_point(&right.projection(), &right_pose.position)?;
    Ok(StereoFeature::new(l.u, r.u, l.v))
}

struct Estimate {
    left: Pose,
    right: Pose,
    ess: Vec<f64>,
    evidence: Vec<f64>,
    reinitialized: bool,
    elapsed: Duration,
}

/// Observes once and updates the tracker (or reads the truth in oracle mode).
/// `q_prev` advances to the reported joints of this observation.
fn observe_and_estimate<P: Plant + GroundTruth>(
    plant: &mut P,
    tracker: Option<&mut Tracker>,
    cameras: &[CameraView],
    q_prev: &mut JointConfig,
    timings: &mut StageTimings,
) -> Result<Estimate, ServoError> {
    let (images, q) = plant.observe();
    let est = match tracker {
        Some(t) => {
            let t0 = Instant::now();
            let r = t.step(plant.chain(), q_prev, &q, &images, cameras, plant.scene())?;
            timings.accumulate(&r.timings);
            Estimate {
                left: r.estimates[0],
                right: r.estimates[1],
                ess: r.ess,
                evidence: r.evidence,
                reinitialized: r.reinitialized,
                elapsed: t0.elapsed(),
            }
        }
        None => {
            let p = plant.true_pose();
            Estimate {
                left: p,
                right: p,
                ess: Vec::new(),
                evidence: Vec::new(),
                reinitialized: false,
                elapsed: Duration::ZERO,
            }
        }
    };
    *q_prev = q;
    Ok(est)
}

/// Runs the loop until `||e|| < convergence_px` or `max_iters` commands.
///
/// Each iteration observes, updates the pose estimate, forms the error and
/// either stops or commands a velocity for one period. Convergence is checked
/// before moving, so a start at the goal converges at iteration 0. While the
/// tracker reports too little visibility evidence the arm holds still; after
/// `lost_patience` such iterations in a row the loop gives up with
/// `NotConverged`.
pub fn servo_loop<P: Plant + GroundTruth>(
    plant: &mut P,
    feedback: &Feedback,
    u_g: &StereoFeature,
    cfg: &ServoConfig,
) -> Result<ServoResult, ServoError> {
    cfg.validate()?;
    let cameras = plant.cameras();
    if cameras.len() != 2 {
        return Err(ServoError::CameraCount(cameras.len()));
    }
    let (left, right) = (cameras[0], cameras[1]);
    let (pl, pr) = (left.projection(), right.projection());

    let (_, mut q_prev) = plant.observe();
    let mut tracker = match feedback {
        Feedback::Filter { config, seed } => Some(Tracker::new(
            plant.chain(),
            &q_prev,
            &cameras,
            plant.scene(),
            config.clone(),
            *seed,
        )?),
        Feedback::Oracle => None,
    };
    let mut trace = Vec::new();
    let mut timings = StageTimings::default();
    let mut filter_time = Duration::ZERO;

    for _ in 0..cfg.settle_iters {
        let Some(t) = tracker.as_mut() else { break };
        let est = observe_and_estimate(plant, Some(t), &cameras, &mut q_prev, &mut timings)?;
        filter_time += est.elapsed;
    }

    let mut iteration = 0;
    let mut lost_run = 0;
    loop {
        let est = observe_and_estimate(plant, tracker.as_mut(), &cameras, &mut q_prev, &mut timings)?;
        filter_time += est.elapsed;
        let Estimate {
            left: eap_l,
            right: eap_r,
            ess,
            evidence,
            reinitialized,
            ..
        } = est;
        let u_e = feature_from_estimates(&eap_l, &eap_r, &left, &right)?;
        let e = compute_error(u_g, &u_e);
        let point = triangulate(&u_e, &pl, &pr).unwrap_or(eap_l.position);
        let kinematic_position = crate::kinematics::forward_kinematics(plant.chain(), &q_prev)
            .map_err(FilterError::from)?
            .translation;
        let lost = evidence.iter().any(|v| !(*v >= cfg.min_evidence));
        lost_run = if lost { lost_run + 1 } else { 0 };
        let done = is_converged(&e, cfg) && !lost;
        let give_up = iteration >= cfg.max_iters || lost_run >= cfg.lost_patience;
        let velocity = if done || give_up || lost {
            Vector3::zeros()
        } else {
            let j = image_jacobian(&point, &pl, &pr)?;
            control_velocity(&j, &e, cfg)?
        };
        trace.push(TraceRow {
            iteration,
            u_e,
            e,
            error_norm: e.norm(),
            eap_left: eap_l,
            eap_right: eap_r,
            estimate: point,
            true_position: Some(plant.true_pose().position),
            kinematic_position,
            velocity,
            ess,
            evidence,
            reinitialized,
        });
        if done || give_up {
            let result = ServoResult {
                converged: done,
                final_error: e.norm(),
                iterations: iteration,
                trace,
                reinitializations: tracker.as_ref().map_or(0, |t| t.reinitializations()),
                filter_time,
                timings,
            };
            return if done {
                Ok(result)
            } else {
                Err(ServoError::NotConverged(Box::new(result)))
            };
        }
        plant.move_cartesian(&velocity, cfg.dt)?;
        iteration += 1;
    }
}
