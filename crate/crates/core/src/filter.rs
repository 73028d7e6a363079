//! Bootstrap particle filter over end-effector poses.
//!
//! Particles are propagated with the arm's reported joint motion plus
//! position and spherical-cap orientation noise, weighted by comparing HOG
//! descriptors of the camera image against a rendering of each particle, and
//! resampled systematically when the effective sample size drops below the
//! threshold.

use std::time::{Duration, Instant};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::CameraView;
use crate::hog::{compute_hog, l1_distance, Descriptor, HogError, HogParams};
use crate::kinematics::{
    forward_kinematics, pose_from_transform, relative_motion, rotation_vector_from_quaternion, transform_from_pose,
    DhChain, HomogeneousTransform, JointConfig, KinematicsError, Pose,
};
use crate::renderer::{render, Image, Scene};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error("all particle weights vanished")]
    AllWeightsZero,
    #[error("weighted quaternion sum is degenerate")]
    DegenerateOrientation,
    #[error("expected {expected} rendered descriptors, got {got}")]
    DescriptorCount { expected: usize, got: usize },
    #[error("invalid filter configuration: {0}")]
    InvalidConfig(String),
    #[error("one camera image is required per camera view")]
    CameraCount,
    #[error(transparent)]
    Hog(#[from] HogError),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseParams {
    /// Position noise standard deviation (m).
    pub sigma_p: f64,
    /// Rotation-angle noise standard deviation (deg).
    pub sigma_theta: f64,
    /// Spherical-cap aperture standard deviation (deg).
    pub sigma_alpha: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            sigma_p: 0.005,
            sigma_theta: 3.0,
            sigma_alpha: 1.5,
        }
    }
}

impl NoiseParams {
    /// Noise-free propagation, for deterministic checks.
    pub fn zero() -> Self {
        Self {
            sigma_p: 0.0,
            sigma_theta: 0.0,
            sigma_alpha: 0.0,
        }
    }
}

/// How a stereo rig is filtered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraMode {
    /// One independent filter per camera.
    PerCamera,
    /// A single filter whose likelihood multiplies the per-camera terms.
    Fused,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub n_particles: usize,
    /// Resample when the effective sample size falls below this.
    pub n_threshold: f64,
    /// Likelihood scale; `None` calibrates it from the initial pose.
    pub sigma_lik: Option<f64>,
    /// Displacement (m) whose rendering costs one e-fold of likelihood when
    /// calibrating `sigma_lik`.
    pub calibration_offset: f64,
    pub noise: NoiseParams,
    pub hog: HogParams,
    pub mode: CameraMode,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            n_particles: 100,
            n_threshold: 10.0,
            sigma_lik: None,
            calibration_offset: 0.001,
            noise: NoiseParams::default(),
            hog: HogParams::default(),
            mode: CameraMode::Fused,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), FilterError> {
        let bad = |m: &str| Err(FilterError::InvalidConfig(m.to_string()));
        if self.n_particles < 2 {
            return bad("at least two particles are required");
        }
        if !(self.n_threshold >= 1.0 && self.n_threshold <= self.n_particles as f64) {
            return bad("resampling threshold must lie in [1, N]");
        }
        if let Some(s) = self.sigma_lik {
            if !(s > 0.0) {
                return bad("likelihood scale must be positive");
            }
        }
        let n = &self.noise;
        if [n.sigma_p, n.sigma_theta, n.sigma_alpha].iter().any(|s| !(*s >= 0.0)) {
            return bad("noise deviations must be non-negative");
        }
        self.hog.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Particle {
    pub state: Pose,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    pub particles: Vec<Particle>,
    pub rng_seed: u64,
    /// Number of completed filter steps; part of every random stream key.
    pub step_index: u64,
}

impl ParticleSet {
    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.particles.iter().map(|p| p.weight).collect()
    }

    pub fn uniform(poses: Vec<Pose>, rng_seed: u64) -> Self {
        let w = 1.0 / poses.len() as f64;
        Self {
            particles: poses.into_iter().map(|state| Particle { state, weight: w }).collect(),
            rng_seed,
            step_index: 0,
        }
    }
}

/// Independent random stream for `(seed, step, index, purpose)`.
pub fn stream_rng(seed: u64, step: u64, index: u64, purpose: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (chunk, word) in key.chunks_exact_mut(8).zip([seed, step, index, purpose]) {
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

const STREAM_PREDICT: u64 = 1;
const STREAM_RESAMPLE: u64 = 2;

pub fn initialize(
    chain: &DhChain,
    q0: &JointConfig,
    cfg: &FilterConfig,
    rng_seed: u64,
) -> Result<ParticleSet, FilterError> {
    cfg.validate()?;
    let pose = pose_from_transform(&forward_kinematics(chain, q0)?);
    Ok(ParticleSet::uniform(vec![pose; cfg.n_particles], rng_seed))
}

/// A sampled spherical-cap orientation perturbation.
///
/// The rotation axis is tilted by `cap_angle` towards `azimuth` (measured in
/// the plane orthogonal to the axis) and the rotation angle is offset by
/// `angle_delta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientationNoise {
    pub cap_angle: f64,
    pub azimuth: f64,
    pub angle_delta: f64,
}

impl OrientationNoise {
    pub fn identity() -> Self {
        Self {
            cap_angle: 0.0,
            azimuth: 0.0,
            angle_delta: 0.0,
        }
    }

    /// Perturbs a scaled axis-angle vector. A null rotation uses `+z` as its axis.
    pub fn apply(&self, orientation: &Vector3<f64>) -> Vector3<f64> {
        let angle = orientation.norm();
        let axis = if angle > 1e-12 {
            orientation / angle
        } else {
            Vector3::z()
        };
        let (u, v) = orthonormal_complement(&axis);
        let (sa, ca) = self.cap_angle.sin_cos();
        let (sp, cp) = self.azimuth.sin_cos();
        let tilted = axis * ca + (u * cp + v * sp) * sa;
        tilted * (angle + self.angle_delta)
    }

    /// The rotation `R_new * R_old^T` this perturbation applies to `orientation`.
    pub fn delta_rotation(&self, orientation: &Vector3<f64>) -> nalgebra::Matrix3<f64> {
        let new = crate::kinematics::exp_so3(&self.apply(orientation));
        new * crate::kinematics::exp_so3(orientation).transpose()
    }
}

fn orthonormal_complement(axis: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if axis.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let u = axis.cross(&helper).normalize();
    let v = axis.cross(&u);
    (u, v)
}

/// Draws cap aperture `|N(0, sigma_alpha)|`, uniform azimuth and angle offset
/// `N(0, sigma_theta)`. Deviations are in radians.
pub fn sample_orientation_noise(rng: &mut impl Rng, sigma_theta: f64, sigma_alpha: f64) -> OrientationNoise {
    let n1: f64 = StandardNormal.sample(rng);
    let n2: f64 = StandardNormal.sample(rng);
    OrientationNoise {
        cap_angle: (n1 * sigma_alpha).abs(),
        azimuth: rng.random_range(0.0..std::f64::consts::TAU),
        angle_delta: n2 * sigma_theta,
    }
}

/// Propagates one pose through the world-frame motion `delta` and the noise model.
pub fn propagate(pose: &Pose, delta: &HomogeneousTransform, noise: &NoiseParams, rng: &mut impl Rng) -> Pose {
    let moved = pose_from_transform(&(delta * &transform_from_pose(pose)));
    let dp = Vector3::from_fn(|_, _| {
        let n: f64 = StandardNormal.sample(rng);
        n * noise.sigma_p
    });
    let o = sample_orientation_noise(rng, noise.sigma_theta.to_radians(), noise.sigma_alpha.to_radians());
    Pose::new(moved.position + dp, o.apply(&moved.orientation))
}

/// Samples every particle from the transition density; weights are kept.
pub fn predict(set: &ParticleSet, delta: &HomogeneousTransform, noise: &NoiseParams) -> ParticleSet {
    let seed = set.rng_seed;
    let step = set.step_index;
    let particles = set
        .particles
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut rng = stream_rng(seed, step, i as u64, STREAM_PREDICT);
            Particle {
                state: propagate(&p.state, delta, noise, &mut rng),
                weight: p.weight,
            }
        })
        .collect();
    ParticleSet {
        particles,
        rng_seed: seed,
        step_index: step,
    }
}

pub fn likelihood(y: &Descriptor, y_hat: &Descriptor, sigma: f64) -> Result<f64, FilterError> {
    Ok((-l1_distance(&y.values, &y_hat.values)? / sigma).exp())
}

/// Multiplies weights by the descriptor likelihood of each particle and normalizes.
pub fn update_weights(
    set: &mut ParticleSet,
    camera_descriptor: &Descriptor,
    rendered: &[Descriptor],
    sigma: f64,
) -> Result<(), FilterError> {
    if rendered.len() != set.len() {
        return Err(FilterError::DescriptorCount {
            expected: set.len(),
            got: rendered.len(),
        });
    }
    let distances = rendered
        .iter()
        .map(|d| l1_distance(&camera_descriptor.values, &d.values))
        .collect::<Result<Vec<_>, _>>()?;
    update_weights_from_distances(set, &distances, sigma)
}

/// `w_i <- w_i * exp(-d_i / sigma)`, normalized.
///
/// Evaluated in the log domain with the maximum subtracted, which leaves the
/// normalized weights unchanged while avoiding underflow of the raw products.
pub fn update_weights_from_distances(set: &mut ParticleSet, distances: &[f64], sigma: f64) -> Result<(), FilterError> {
    if distances.len() != set.len() {
        return Err(FilterError::DescriptorCount {
            expected: set.len(),
            got: distances.len(),
        });
    }
    let log_w: Vec<f64> = set
        .particles
        .iter()
        .zip(distances)
        .map(|(p, d)| p.weight.ln() - d / sigma)
        .collect();
    if log_w.iter().any(|l| l.is_nan()) {
        return Err(FilterError::AllWeightsZero);
    }
    let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(FilterError::AllWeightsZero);
    }
    let unnormalized: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = unnormalized.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(FilterError::AllWeightsZero);
    }
    for (p, w) in set.particles.iter_mut().zip(unnormalized) {
        p.weight = w / total;
    }
    Ok(())
}

pub fn effective_sample_size(set: &ParticleSet) -> f64 {
    1.0 / set.particles.iter().map(|p| p.weight * p.weight).sum::<f64>()
}

/// Indices picked by systematic resampling with offset `u` in `[0, 1)`.
pub fn systematic_indices(weights: &[f64], u: f64) -> Vec<usize> {
    let n = weights.len();
    // Rounding can leave the cumulative sum just short of 1; never walk past
    // the last particle that carries weight.
    let last = weights.iter().rposition(|w| *w > 0.0).unwrap_or(n - 1);
    let mut out = Vec::with_capacity(n);
    let mut cumulative = weights[0];
    let mut j = 0;
    for i in 0..n {
        let position = (i as f64 + u) / n as f64;
        while position >= cumulative && j < last {
            j += 1;
            cumulative += weights[j];
        }
        out.push(j);
    }
    out
}

pub fn systematic_resample(set: &ParticleSet, rng: &mut impl Rng) -> ParticleSet {
    let u: f64 = rng.random_range(0.0..1.0);
    let indices = systematic_indices(&set.weights(), u);
    let w = 1.0 / set.len() as f64;
    ParticleSet {
        particles: indices
            .into_iter()
            .map(|i| Particle {
                state: set.particles[i].state,
                weight: w,
            })
            .collect(),
        rng_seed: set.rng_seed,
        step_index: set.step_index,
    }
}

/// Weighted mean pose; orientation via the sign-aligned weighted quaternion mean.
pub fn eap_estimate(set: &ParticleSet) -> Result<Pose, FilterError> {
    let position: Vector3<f64> = set.particles.iter().map(|p| p.state.position * p.weight).sum();
    let reference = set
        .particles
        .iter()
        .max_by(|a, b| a.weight.total_cmp(&b.weight))
        .ok_or(FilterError::DegenerateOrientation)?
        .state
        .quaternion();
    let mut acc = Quaternion::new(0.0, 0.0, 0.0, 0.0);
    for p in &set.particles {
        let q: UnitQuaternion<f64> = p.state.quaternion();
        let q = if q.coords.dot(&reference.coords) < 0.0 {
            -q.into_inner()
        } else {
            q.into_inner()
        };
        acc += q * p.weight;
    }
    let norm = acc.norm();
    if !(norm >= 1e-9) {
        return Err(FilterError::DegenerateOrientation);
    }
    Ok(Pose::new(position, rotation_vector_from_quaternion(&(acc / norm))))
}

/// What one camera contributes to a step.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub image: &'a Image,
    pub camera: &'a CameraView,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    pub predict: Duration,
    pub render: Duration,
    pub hog: Duration,
    pub weight: Duration,
    pub resample: Duration,
}

impl StageTimings {
    pub fn total(&self) -> Duration {
        self.predict + self.render + self.hog + self.weight + self.resample
    }

    pub fn accumulate(&mut self, other: &StageTimings) {
        self.predict += other.predict;
        self.render += other.render;
        self.hog += other.hog;
        self.weight += other.weight;
        self.resample += other.resample;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub estimate: Pose,
    /// Effective sample size after the weight update, before resampling.
    pub ess: f64,
    pub resampled: bool,
    /// How much better the best particle explains the images than an empty
    /// rendering, in units of the likelihood scale. A constant image has an
    /// all-zero descriptor, so the empty rendering's distance is the L1 mass
    /// of the observed descriptors. Near or below zero the model is not
    /// visible where the particles put it.
    pub evidence: f64,
    pub timings: StageTimings,
}

/// Sum over cameras of the descriptor distance for one hypothesis.
fn particle_distance(
    pose: &Pose,
    scene: &Scene,
    observed: &[(Descriptor, &CameraView)],
    hog: &HogParams,
    timings: &mut StageTimings,
) -> Result<f64, FilterError> {
    let mut total = 0.0;
    for (y, camera) in observed {
        let t0 = Instant::now();
        let predicted = render(scene, pose, camera);
        let t1 = Instant::now();
        let y_hat = compute_hog(&predicted, hog)?;
        let t2 = Instant::now();
        total += l1_distance(&y.values, &y_hat.values)?;
        timings.render += t1 - t0;
        timings.hog += t2 - t1;
        timings.weight += t2.elapsed();
    }
    Ok(total)
}

/// One filter cycle for joint motion `q_prev -> q_curr`.
///
/// Prediction, rendering, HOG and distance run in parallel over particles;
/// normalization, the degeneracy test, resampling and the estimate are
/// sequential. Stage timings are summed across worker threads.
#[allow(clippy::too_many_arguments)]
pub fn step(
    set: &ParticleSet,
    chain: &DhChain,
    q_prev: &JointConfig,
    q_curr: &JointConfig,
    observations: &[Observation<'_>],
    scene: &Scene,
    cfg: &FilterConfig,
    sigma: f64,
) -> Result<(ParticleSet, StepReport), FilterError> {
    if observations.is_empty() {
        return Err(FilterError::CameraCount);
    }
    let delta = relative_motion(chain, q_prev, q_curr)?;
    let mut timings = StageTimings::default();

    let t0 = Instant::now();
    let observed = observations
        .iter()
        .map(|o| Ok((compute_hog(o.image, &cfg.hog)?, o.camera)))
        .collect::<Result<Vec<_>, FilterError>>()?;
    timings.hog += t0.elapsed();

    let seed = set.rng_seed;
    let step_index = set.step_index;
    let results: Vec<Result<(Particle, f64, StageTimings), FilterError>> = set
        .particles
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut local = StageTimings::default();
            let t = Instant::now();
            let mut rng = stream_rng(seed, step_index, i as u64, STREAM_PREDICT);
            let state = propagate(&p.state, &delta, &cfg.noise, &mut rng);
            local.predict += t.elapsed();
            let d = particle_distance(&state, scene, &observed, &cfg.hog, &mut local)?;
            Ok((
                Particle {
                    state,
                    weight: p.weight,
                },
                d,
                local,
            ))
        })
        .collect();

    let mut particles = Vec::with_capacity(set.len());
    let mut distances = Vec::with_capacity(set.len());
    for r in results {
        let (p, d, t) = r?;
        particles.push(p);
        distances.push(d);
        timings.accumulate(&t);
    }
    let blank: f64 = observed
        .iter()
        .map(|(y, _)| y.values.iter().map(|v| v.abs()).sum::<f64>())
        .sum();
    let best = distances.iter().cloned().fold(f64::INFINITY, f64::min);
    let evidence = (blank - best) / sigma;
    let mut next = ParticleSet {
        particles,
        rng_seed: seed,
        step_index,
    };
    let t = Instant::now();
    update_weights_from_distances(&mut next, &distances, sigma)?;
    let ess = effective_sample_size(&next);
    timings.weight += t.elapsed();

    let t = Instant::now();
    let resampled = ess < cfg.n_threshold;
    if resampled {
        let mut rng = stream_rng(seed, step_index, 0, STREAM_RESAMPLE);
        next = systematic_resample(&next, &mut rng);
    }
    timings.resample += t.elapsed();
    let estimate = eap_estimate(&next)?;
    next.step_index = step_index + 1;
    Ok((
        next,
        StepReport {
            estimate,
            ess,
            resampled,
            evidence,
            timings,
        },
    ))
}

/// Likelihood scale such that a hypothesis displaced by `offset` metres costs
/// one e-fold: the mean descriptor distance between the rendering at `pose`
/// and renderings displaced by `offset` along each world axis (both signs),
/// summed over cameras.
pub fn calibrate_sigma(
    scene: &Scene,
    pose: &Pose,
    cameras: &[&CameraView],
    hog: &HogParams,
    offset: f64,
) -> Result<f64, FilterError> {
    let mut total = 0.0;
    for camera in cameras {
        let base = compute_hog(&render(scene, pose, camera), hog)?;
        let mut sum = 0.0;
        for axis in 0..3 {
            for sign in [-1.0, 1.0] {
                let mut p = *pose;
                p.position[axis] += sign * offset;
                let d = compute_hog(&render(scene, &p, camera), hog)?;
                sum += l1_distance(&base.values, &d.values)?;
            }
        }
        total += sum / 6.0;
    }
    if !(total > 0.0) {
        return Err(FilterError::InvalidConfig(
            "cannot calibrate the likelihood scale: the model is not visible".into(),
        ));
    }
    Ok(total)
}

/// Runs one filter per camera, or a single fused filter, and reinitializes
/// from the reported kinematics when the weights collapse.
#[derive(Debug, Clone)]
pub struct Tracker {
    pub cfg: FilterConfig,
    filters: Vec<ParticleSet>,
    sigmas: Vec<f64>,
    estimates: Vec<Pose>,
    reinitializations: usize,
    collapsed_last_step: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerReport {
    /// One estimate per camera; in fused mode every entry is the same pose.
    pub estimates: Vec<Pose>,
    pub ess: Vec<f64>,
    pub resampled: Vec<bool>,
    /// [`StepReport::evidence`] per filter; NaN after a reinitialization.
    pub evidence: Vec<f64>,
    pub reinitialized: bool,
    pub timings: StageTimings,
}

impl Tracker {
    /// Particles start at `FK(q0)`; the likelihood scale is calibrated there
    /// unless configured.
    pub fn new(
        chain: &DhChain,
        q0: &JointConfig,
        cameras: &[CameraView],
        scene: &Scene,
        cfg: FilterConfig,
        seed: u64,
    ) -> Result<Self, FilterError> {
        cfg.validate()?;
        if cameras.is_empty() {
            return Err(FilterError::CameraCount);
        }
        let start = pose_from_transform(&forward_kinematics(chain, q0)?);
        let groups = Self::groups(cfg.mode, cameras.len());
        let mut filters = Vec::with_capacity(groups.len());
        let mut sigmas = Vec::with_capacity(groups.len());
        for (g, members) in groups.iter().enumerate() {
            filters.push(initialize(chain, q0, &cfg, seed.wrapping_add(g as u64 * 0x9E37_79B9))?);
            let sigma = match cfg.sigma_lik {
                Some(s) => s,
                None => {
                    let views: Vec<&CameraView> = members.iter().map(|&c| &cameras[c]).collect();
                    calibrate_sigma(scene, &start, &views, &cfg.hog, cfg.calibration_offset)?
                }
            };
            sigmas.push(sigma);
        }
        Ok(Self {
            cfg,
            filters,
            sigmas,
            estimates: vec![start; cameras.len()],
            reinitializations: 0,
            collapsed_last_step: false,
        })
    }

    fn groups(mode: CameraMode, n_cameras: usize) -> Vec<Vec<usize>> {
        match mode {
            CameraMode::PerCamera => (0..n_cameras).map(|c| vec![c]).collect(),
            CameraMode::Fused => vec![(0..n_cameras).collect()],
        }
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn filters(&self) -> &[ParticleSet] {
        &self.filters
    }

    pub fn estimates(&self) -> &[Pose] {
        &self.estimates
    }

    pub fn reinitializations(&self) -> usize {
        self.reinitializations
    }

    /// Advances every filter with the reported joint motion and new images
    /// (one per camera). A collapse right after a reinitialization is
    /// returned as `AllWeightsZero` instead of being absorbed again.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &mut self,
        chain: &DhChain,
        q_prev: &JointConfig,
        q_curr: &JointConfig,
        images: &[Image],
        cameras: &[CameraView],
        scene: &Scene,
    ) -> Result<TrackerReport, FilterError> {
        if images.len() != cameras.len() || cameras.len() != self.estimates.len() {
            return Err(FilterError::CameraCount);
        }
        let groups = Self::groups(self.cfg.mode, cameras.len());
        let mut report = TrackerReport {
            estimates: vec![Pose::default(); cameras.len()],
            ess: Vec::new(),
            resampled: Vec::new(),
            evidence: Vec::new(),
            reinitialized: false,
            timings: StageTimings::default(),
        };
        for (g, members) in groups.iter().enumerate() {
            let obs: Vec<Observation<'_>> = members
                .iter()
                .map(|&c| Observation {
                    image: &images[c],
                    camera: &cameras[c],
                })
                .collect();
            let current = &self.filters[g];
            match step(current, chain, q_prev, q_curr, &obs, scene, &self.cfg, self.sigmas[g]) {
                Ok((next, r)) => {
                    self.filters[g] = next;
                    for &c in members {
                        report.estimates[c] = r.estimate;
                    }
                    report.ess.push(r.ess);
                    report.resampled.push(r.resampled);
                    report.evidence.push(r.evidence);
                    report.timings.accumulate(&r.timings);
                }
                Err(FilterError::AllWeightsZero) if self.collapsed_last_step => {
                    return Err(FilterError::AllWeightsZero);
                }
                Err(FilterError::AllWeightsZero) => {
                    let seed = current.rng_seed;
                    let step_index = current.step_index + 1;
                    let mut fresh = initialize(chain, q_curr, &self.cfg, seed)?;
                    fresh.step_index = step_index;
                    let estimate = fresh.particles[0].state;
                    self.filters[g] = fresh;
                    for &c in members {
                        report.estimates[c] = estimate;
                    }
                    report.ess.push(self.cfg.n_particles as f64);
                    report.resampled.push(false);
                    report.evidence.push(f64::NAN);
                    report.reinitialized = true;
                    self.reinitializations += 1;
                }
                Err(e) => return Err(e),
            }
        }
        self.collapsed_last_step = report.reinitialized;
        self.estimates = report.estimates.clone();
        Ok(report)
    }
}
