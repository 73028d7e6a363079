//! Software rendering of the end-effector model: the predicted image of a
//! pose hypothesis as seen by one camera.

mod mesh;
mod raster;

pub use mesh::{area_weighted_normals, load_mesh, parse_obj, MeshError, TriangleMesh};
pub use raster::{rasterize_triangle, DepthBuffer, Image};

use std::sync::Arc;

use nalgebra::Vector3;

use crate::camera::CameraView;
use crate::kinematics::{transform_from_pose, HomogeneousTransform, Pose};

/// Camera-frame depth of the near clipping plane (m).
pub const NEAR_PLANE: f64 = 1e-3;

/// Ambient term of the Lambertian model.
pub const AMBIENT: f64 = 0.25;

/// One rigid part of an assembly.
#[derive(Debug, Clone)]
pub struct ScenePart {
    pub name: String,
    pub mesh: Arc<TriangleMesh>,
    /// Part frame relative to the assembly (end-effector) frame.
    pub offset: HomogeneousTransform,
    /// Lambertian albedo in `[0, 1]`.
    pub albedo: f64,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub parts: Vec<ScenePart>,
    /// Unit direction towards the light, expressed in the camera frame.
    pub light_dir: Vector3<f64>,
}

impl Default for Scene {
    fn default() -> Self {
        Self {
            parts: Vec::new(),
            light_dir: default_light_dir(),
        }
    }
}

pub fn default_light_dir() -> Vector3<f64> {
    // Up-left of the optical axis, shining back into the scene.
    Vector3::new(-0.3, -0.5, -1.0).normalize()
}

impl Scene {
    pub fn new(parts: Vec<ScenePart>, light_dir: Vector3<f64>) -> Self {
        Self {
            parts,
            light_dir: light_dir.normalize(),
        }
    }

    pub fn push(&mut self, name: &str, mesh: Arc<TriangleMesh>, offset: HomogeneousTransform, albedo: f64) {
        self.parts.push(ScenePart {
            name: name.to_string(),
            mesh,
            offset,
            albedo,
        });
    }
}

/// An assembly placed in the world for rendering.
#[derive(Debug, Clone, Copy)]
pub struct Placed<'a> {
    pub scene: &'a Scene,
    pub pose: &'a Pose,
}

/// Renders `scene` with its frame at `pose` (world coordinates) into a fresh image.
pub fn render(scene: &Scene, pose: &Pose, camera: &CameraView) -> Image {
    render_placed(&[Placed { scene, pose }], camera, None)
}

/// Renders several assemblies into one z-buffer; empty pixels take the
/// background image (or 0).
pub fn render_placed(items: &[Placed<'_>], camera: &CameraView, background: Option<&Image>) -> Image {
    let k = &camera.intrinsics;
    let mut image = match background {
        Some(bg) => {
            assert_eq!((bg.width(), bg.height()), (k.width, k.height));
            bg.clone()
        }
        None => Image::new(k.width, k.height),
    };
    let mut depth = DepthBuffer::new(k.width, k.height);
    for item in items {
        draw_scene(&mut image, &mut depth, item.scene, item.pose, camera);
    }
    image
}

fn draw_scene(image: &mut Image, depth: &mut DepthBuffer, scene: &Scene, pose: &Pose, camera: &CameraView) {
    let world_from_ee = transform_from_pose(pose);
    let cam_from_ee = camera.extrinsic * world_from_ee;
    let k = &camera.intrinsics;
    let mut cam_pts: Vec<Vector3<f64>> = Vec::new();
    for part in &scene.parts {
        let cam_from_part = cam_from_ee * part.offset;
        let mesh = &part.mesh;
        cam_pts.clear();
        cam_pts.extend(mesh.vertices().iter().map(|v| cam_from_part.transform_point(v)));
        for tri in mesh.triangles() {
            let idx = tri.map(|i| i as usize);
            let normal: Vector3<f64> = idx.iter().map(|&i| mesh.normals()[i]).sum();
            let normal = cam_from_part.transform_vector(&normal);
            let n_len = normal.norm();
            let lambert = if n_len > 0.0 {
                (normal.dot(&scene.light_dir) / n_len).max(0.0)
            } else {
                0.0
            };
            let shade = (part.albedo * (AMBIENT + (1.0 - AMBIENT) * lambert)).clamp(0.0, 1.0) as f32;
            let corners = idx.map(|i| cam_pts[i]);
            for clipped in clip_near(&corners) {
                let mut screen = [[0.0f64; 2]; 3];
                let mut inv_z = [0.0f64; 3];
                for (j, p) in clipped.iter().enumerate() {
                    screen[j] = [k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy];
                    inv_z[j] = 1.0 / p.z;
                }
                rasterize_triangle(image, depth, &screen, &inv_z, shade);
            }
        }
    }
}

/// Clips a camera-frame triangle against `z = NEAR_PLANE`, returning 0-2 triangles.
fn clip_near(tri: &[Vector3<f64>; 3]) -> Vec<[Vector3<f64>; 3]> {
    let inside = tri.map(|p| p.z >= NEAR_PLANE);
    let count = inside.iter().filter(|b| **b).count();
    if count == 3 {
        return vec![*tri];
    }
    if count == 0 {
        return Vec::new();
    }
    let mut poly: Vec<Vector3<f64>> = Vec::with_capacity(4);
    for i in 0..3 {
        let a = tri[i];
        let b = tri[(i + 1) % 3];
        if inside[i] {
            poly.push(a);
        }
        if inside[i] != inside[(i + 1) % 3] {
            let t = (NEAR_PLANE - a.z) / (b.z - a.z);
            let mut p = a + (b - a) * t;
            p.z = NEAR_PLANE;
            poly.push(p);
        }
    }
    (1..poly.len() - 1).map(|i| [poly[0], poly[i], poly[i + 1]]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{project_point, Intrinsics};

    fn front_camera() -> CameraView {
        CameraView {
            intrinsics: Intrinsics::default(),
            extrinsic: HomogeneousTransform::identity(),
        }
    }

    fn triangle_scene() -> (Scene, Vec<Vector3<f64>>) {
        let verts = vec![
            Vector3::new(-0.05, -0.04, 0.0),
            Vector3::new(0.06, -0.03, 0.0),
            Vector3::new(0.0, 0.06, 0.0),
        ];
        // Winding gives a normal along -z, towards the camera.
        let mesh = TriangleMesh::new(verts.clone(), vec![[0, 2, 1]], None).unwrap();
        let mut scene = Scene::default();
        scene.push("tri", Arc::new(mesh), HomogeneousTransform::identity(), 1.0);
        (scene, verts)
    }

    #[test]
    fn empty_scene_is_background() {
        let img = render(&Scene::default(), &Pose::default(), &front_camera());
        assert!(img.pixels().iter().all(|&p| p == 0.0));
        assert_eq!((img.width(), img.height()), (320, 240));
    }

    #[test]
    fn triangle_corners_are_on_the_silhouette() {
        let (scene, verts) = triangle_scene();
        let pose = Pose::new(Vector3::new(0.0, 0.0, 0.5), Vector3::zeros());
        let cam = front_camera();
        let img = render(&scene, &pose, &cam);
        let pi = cam.projection();
        for v in verts {
            let px = project_point(&pi, &(v + pose.position)).unwrap();
            // Distance from the corner to the nearest foreground pixel square.
            let mut best = f64::INFINITY;
            for y in 0..img.height() {
                for x in 0..img.width() {
                    if img.get(x, y) > 0.0 {
                        let dx = (x as f64 - px.u).max(px.u - (x + 1) as f64).max(0.0);
                        let dy = (y as f64 - px.v).max(px.v - (y + 1) as f64).max(0.0);
                        best = best.min(dx.hypot(dy));
                    }
                }
            }
            assert!(best <= 0.5, "corner {px:?} at {best}");
        }
    }

    #[test]
    fn translation_shifts_centroid() {
        let (scene, verts) = triangle_scene();
        let cam = front_camera();
        let centroid = |img: &Image| {
            let (mut sx, mut n) = (0.0, 0.0);
            for y in 0..img.height() {
                for x in 0..img.width() {
                    if img.get(x, y) > 0.0 {
                        sx += x as f64 + 0.5;
                        n += 1.0;
                    }
                }
            }
            sx / n
        };
        let p0 = Pose::new(Vector3::new(0.0, 0.0, 0.5), Vector3::zeros());
        let p1 = Pose::new(Vector3::new(0.02, 0.0, 0.5), Vector3::zeros());
        let shift = centroid(&render(&scene, &p1, &cam)) - centroid(&render(&scene, &p0, &cam));
        let c: Vector3<f64> = verts.iter().sum::<Vector3<f64>>() / 3.0;
        let pi = cam.projection();
        let expected =
            project_point(&pi, &(c + p1.position)).unwrap().u - project_point(&pi, &(c + p0.position)).unwrap().u;
        assert!((shift - expected).abs() <= 0.5, "{shift} vs {expected}");
    }

    #[test]
    fn fully_behind_camera_renders_nothing() {
        let (scene, _) = triangle_scene();
        let pose = Pose::new(Vector3::new(0.0, 0.0, -0.5), Vector3::zeros());
        let img = render(&scene, &pose, &front_camera());
        assert!(img.pixels().iter().all(|&p| p == 0.0));
    }

    #[test]
    fn straddling_near_plane_is_clipped() {
        let tri = [
            Vector3::new(0.0, 0.0, -1.0),
            Vector3::new(1.0, 0.0, 1.0),
            Vector3::new(0.0, 1.0, 1.0),
        ];
        let out = clip_near(&tri);
        assert_eq!(out.len(), 2);
        assert!(out.iter().flatten().all(|p| p.z >= NEAR_PLANE - 1e-15));
    }

    #[test]
    fn renders_are_deterministic_and_bounded() {
        let mut scene = Scene::default();
        scene.push(
            "box",
            Arc::new(TriangleMesh::cuboid(Vector3::new(0.05, 0.04, 0.03))),
            HomogeneousTransform::identity(),
            0.9,
        );
        let pose = Pose::new(Vector3::new(0.01, 0.0, 0.4), Vector3::new(0.3, 0.5, 0.1));
        let a = render(&scene, &pose, &front_camera());
        let b = render(&scene, &pose, &front_camera());
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert!(a.pixels().iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert!(a.pixels().iter().any(|&p| p > 0.0));
    }
}
