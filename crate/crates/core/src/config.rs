//! TOML file formats: the run configuration, kinematic chains and scenes.
//!
//! Chains use standard (distal) Denavit-Hartenberg parameters: each link is
//! `Rz(theta + theta_offset) * Tz(d) * Tx(a) * Rx(alpha)`, lengths in metres
//! and angles in radians. A chain file looks like
//!
//! ```toml
//! [base]
//! translation = [0.35, -0.45, 0.05]
//! rotation = [0.0, 0.0, 0.0]        # scaled axis-angle
//!
//! [[links]]
//! a = 0.0
//! alpha = 1.5707963267948966
//! d = 0.0
//! joint_kind = "revolute"           # or "fixed"; theta_offset defaults to 0
//! ```
//!
//! A scene file lists rigid parts with an OBJ mesh path (relative to the scene
//! file), an offset from the end-effector frame and an albedo:
//!
//! ```toml
//! light_dir = [-0.3, -0.5, -1.0]
//!
//! [[parts]]
//! name = "palm"
//! mesh = "palm.obj"
//! translation = [-0.09, 0.0, 0.0]
//! rotation = [0.0, 0.0, 0.0]
//! albedo = 0.8
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::Intrinsics;
use crate::filter::FilterConfig;
use crate::hog::HogParams;
use crate::kinematics::{exp_so3, DhChain, DhLink, HomogeneousTransform, KinematicsError};
use crate::renderer::{default_light_dir, load_mesh, MeshError, Scene};
use crate::servo::ServoConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse<T: for<'de> Deserialize<'de>>(path: &Path, text: &str) -> Result<T, ConfigError> {
    toml::from_str(text).map_err(|e| ConfigError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// A rigid transform written as translation plus scaled axis-angle rotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct TransformSpec {
    pub translation: [f64; 3],
    pub rotation: [f64; 3],
}

impl TransformSpec {
    pub fn to_transform(&self) -> HomogeneousTransform {
        HomogeneousTransform {
            rotation: exp_so3(&Vector3::from(self.rotation)),
            translation: Vector3::from(self.translation),
        }
    }

    pub fn from_transform(t: &HomogeneousTransform) -> Self {
        Self {
            translation: t.translation.into(),
            rotation: crate::kinematics::log_so3(&t.rotation).into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainFile {
    #[serde(default)]
    pub base: TransformSpec,
    pub links: Vec<DhLink>,
}

impl ChainFile {
    pub fn from_chain(chain: &DhChain) -> Self {
        Self {
            base: TransformSpec::from_transform(chain.base()),
            links: chain.links().to_vec(),
        }
    }

    pub fn build(&self) -> Result<DhChain, ConfigError> {
        Ok(DhChain::new(self.base.to_transform(), self.links.clone())?)
    }
}

pub fn parse_chain(text: &str) -> Result<DhChain, ConfigError> {
    parse::<ChainFile>(Path::new("<chain>"), text)?.build()
}

pub fn load_chain(path: impl AsRef<Path>) -> Result<DhChain, ConfigError> {
    let path = path.as_ref();
    parse::<ChainFile>(path, &read(path)?)?.build()
}

pub fn chain_to_toml(chain: &DhChain) -> String {
    toml::to_string(&ChainFile::from_chain(chain)).expect("chain serializes")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartSpec {
    pub name: String,
    pub mesh: PathBuf,
    #[serde(default)]
    pub translation: [f64; 3],
    #[serde(default)]
    pub rotation: [f64; 3],
    #[serde(default = "default_albedo")]
    pub albedo: f64,
}

fn default_albedo() -> f64 {
    0.8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    #[serde(default = "default_light")]
    pub light_dir: [f64; 3],
    pub parts: Vec<PartSpec>,
}

fn default_light() -> [f64; 3] {
    default_light_dir().into()
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene, ConfigError> {
    let path = path.as_ref();
    let file: SceneFile = parse(path, &read(path)?)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut scene = Scene::new(Vec::new(), Vector3::from(file.light_dir));
    for part in &file.parts {
        if !(0.0..=1.0).contains(&part.albedo) {
            return Err(ConfigError::Invalid(format!(
                "albedo of part {} outside [0, 1]",
                part.name
            )));
        }
        let mesh = load_mesh(dir.join(&part.mesh))?;
        let offset = TransformSpec {
            translation: part.translation,
            rotation: part.rotation,
        };
        scene.push(&part.name, Arc::new(mesh), offset.to_transform(), part.albedo);
    }
    Ok(scene)
}

/// Writes `scene` as a scene file plus one OBJ per part into `dir`.
pub fn save_scene(scene: &Scene, dir: impl AsRef<Path>, file_name: &str) -> std::io::Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut parts = Vec::new();
    for part in &scene.parts {
        let mesh = PathBuf::from(format!("{}.obj", part.name));
        std::fs::write(dir.join(&mesh), part.mesh.to_obj())?;
        let t = TransformSpec::from_transform(&part.offset);
        parts.push(PartSpec {
            name: part.name.clone(),
            mesh,
            translation: t.translation,
            rotation: t.rotation,
            albedo: part.albedo,
        });
    }
    let file = SceneFile {
        light_dir: scene.light_dir.into(),
        parts,
    };
    let path = dir.join(file_name);
    std::fs::write(&path, toml::to_string(&file).expect("scene serializes"))?;
    Ok(path)
}

/// Stereo rig: a left camera placed by look-at and a right camera offset by
/// `baseline` along the left camera's x axis, both carried by a pan/tilt head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraSection {
    pub intrinsics: Intrinsics,
    pub baseline: f64,
    /// Left camera centre in the world.
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    /// Head chain file; a built-in pan/tilt head is used when absent.
    pub head_chain: Option<PathBuf>,
    pub head_joints: Vec<f64>,
}

impl Default for CameraSection {
    fn default() -> Self {
        Self {
            intrinsics: Intrinsics::default(),
            baseline: 0.045,
            position: [-0.05, 0.034, 0.45],
            look_at: [0.45, -0.1, 0.1],
            head_chain: None,
            head_joints: vec![0.1, -0.35],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClutterSection {
    /// Adds clutter to the plain reaching task; the clutter scenario has its
    /// own switch.
    pub enabled: bool,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Objects are kept at least this far (horizontally) from the target.
    pub keep_out: f64,
    /// Amplitude of the low-frequency background pattern.
    pub background_amplitude: f64,
    pub background_level: f64,
    /// Height of the table surface the objects rest on.
    pub table_height: f64,
}

impl Default for ClutterSection {
    fn default() -> Self {
        Self {
            enabled: false,
            min_objects: 5,
            max_objects: 15,
            keep_out: 0.09,
            background_amplitude: 0.15,
            background_level: 0.35,
            table_height: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSection {
    /// Encoder bias magnitude per arm joint (degrees).
    pub bias_deg: f64,
    /// Draw an independent sign per joint and trial instead of all positive.
    pub random_bias_sign: bool,
    /// Slow bias drift (degrees per second of simulated time).
    pub bias_drift_deg_per_s: f64,
    /// Additive Gaussian pixel noise (intensity units).
    pub pixel_noise: f64,
    /// Per-axis standard deviation of the coarse target estimate (m).
    pub target_sigma: f64,
    /// Distance of the starting points from the coarse target (m).
    pub start_spread: f64,
    /// Arm chain file; the built-in 4-DoF arm is used when absent.
    pub arm_chain: Option<PathBuf>,
    /// Hand scene file; the built-in hand is used when absent.
    pub scene: Option<PathBuf>,
    /// Preferred sum of the arm's pitch joints (hand attitude) for the approach.
    pub approach_pitch: f64,
    pub clutter: ClutterSection,
}

impl Default for WorldSection {
    fn default() -> Self {
        Self {
            bias_deg: 2.0,
            random_bias_sign: true,
            bias_drift_deg_per_s: 0.0,
            pixel_noise: 0.0,
            target_sigma: 0.01,
            start_spread: 0.03,
            arm_chain: None,
            scene: None,
            approach_pitch: 0.0,
            clutter: ClutterSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FeedbackMode {
    #[default]
    Filter,
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    /// Goal feature `[u_l, u_r, v_l]` in pixels.
    pub goal: [f64; 3],
    pub trials: usize,
    /// Speed caps of the Task-1 runs (m/s).
    pub task1_speeds: Vec<f64>,
    pub task2_speed: f64,
    /// Pixel noise used by the clutter scenario.
    pub task2_pixel_noise: f64,
    /// Whether the clutter scenario adds clutter and a textured background.
    pub task2_clutter: bool,
    pub feedback: FeedbackMode,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        Self {
            goal: [125.0, 89.0, 135.0],
            trials: 10,
            task1_speeds: vec![0.005, 0.02],
            task2_speed: 0.005,
            task2_pixel_noise: 0.01,
            task2_clutter: true,
            feedback: FeedbackMode::Filter,
        }
    }
}

/// Everything a run needs. Missing sections take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct Config {
    pub seed: u64,
    pub world: WorldSection,
    pub cameras: CameraSection,
    pub filter: FilterConfig,
    /// Overrides `filter.hog` when present.
    pub hog: Option<HogParams>,
    pub servo: ServoConfig,
    pub scenario: ScenarioSection,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Self::from_toml_at(text, Path::new("<config>"))
    }

    /// Parses a configuration; relative file paths inside resolve against the
    /// directory of `path`.
    fn from_toml_at(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let mut cfg: Config = parse(path, text)?;
        if let Some(hog) = cfg.hog.take() {
            cfg.filter.hog = hog;
        }
        let dir = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.world.arm_chain,
            &mut cfg.world.scene,
            &mut cfg.cameras.head_chain,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        Self::from_toml_at(&read(path)?, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.filter
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.servo.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.cameras
            .intrinsics
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let w = &self.world;
        for (name, v) in [
            ("bias_deg", w.bias_deg),
            ("pixel_noise", w.pixel_noise),
            ("target_sigma", w.target_sigma),
            ("start_spread", w.start_spread),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ConfigError::Invalid(format!("world.{name} must be finite and >= 0")));
            }
        }
        if w.clutter.min_objects > w.clutter.max_objects {
            return Err(ConfigError::Invalid("clutter.min_objects > clutter.max_objects".into()));
        }
        if !(self.cameras.baseline > 0.0) {
            return Err(ConfigError::Invalid("cameras.baseline must be positive".into()));
        }
        if self.scenario.task1_speeds.iter().any(|s| !(*s > 0.0)) || !(self.scenario.task2_speed > 0.0) {
            return Err(ConfigError::Invalid("speed caps must be positive".into()));
        }
        Ok(())
    }
}
