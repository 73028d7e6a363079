//! Triangle meshes and a reader for the triangulated Wavefront OBJ subset.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: face has {count} vertices, only triangles are supported")]
    NonTriangulatedFace { line: usize, count: usize },
    #[error("invalid mesh: {0}")]
    Invalid(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Indexed triangle mesh in its local frame (metres), one unit normal per vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    vertices: Vec<Vector3<f64>>,
    normals: Vec<Vector3<f64>>,
    triangles: Vec<[u32; 3]>,
}

impl TriangleMesh {
    /// Validates indices and normals. Pass `None` to derive area-weighted normals.
    pub fn new(
        vertices: Vec<Vector3<f64>>,
        triangles: Vec<[u32; 3]>,
        normals: Option<Vec<Vector3<f64>>>,
    ) -> Result<Self, MeshError> {
        if triangles.is_empty() {
            return Err(MeshError::Invalid("mesh has no triangles".into()));
        }
        if let Some(t) = triangles
            .iter()
            .find(|t| t.iter().any(|&i| i as usize >= vertices.len()))
        {
            return Err(MeshError::Invalid(format!(
                "triangle {t:?} indexes past {} vertices",
                vertices.len()
            )));
        }
        if vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(MeshError::Invalid("non-finite vertex".into()));
        }
        let normals = match normals {
            Some(n) => {
                if n.len() != vertices.len() {
                    return Err(MeshError::Invalid(format!(
                        "{} normals for {} vertices",
                        n.len(),
                        vertices.len()
                    )));
                }
                if n.iter().any(|n| (n.norm() - 1.0).abs() > 1e-6) {
                    return Err(MeshError::Invalid("normals must be unit length".into()));
                }
                n
            }
            None => area_weighted_normals(&vertices, &triangles),
        };
        Ok(Self {
            vertices,
            normals,
            triangles,
        })
    }

    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }

    pub fn normals(&self) -> &[Vector3<f64>] {
        &self.normals
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    pub fn centroid(&self) -> Vector3<f64> {
        self.vertices.iter().sum::<Vector3<f64>>() / self.vertices.len() as f64
    }

    /// Axis-aligned box centred on the origin with flat-shaded faces.
    pub fn cuboid(size: Vector3<f64>) -> Self {
        let h = size / 2.0;
        let faces: [(Vector3<f64>, Vector3<f64>, Vector3<f64>); 6] = [
            (Vector3::x(), Vector3::y(), Vector3::z()),
            (-Vector3::x(), Vector3::z(), Vector3::y()),
            (Vector3::y(), Vector3::z(), Vector3::x()),
            (-Vector3::y(), Vector3::x(), Vector3::z()),
            (Vector3::z(), Vector3::x(), Vector3::y()),
            (-Vector3::z(), Vector3::y(), Vector3::x()),
        ];
        let mut vertices = Vec::with_capacity(24);
        let mut normals = Vec::with_capacity(24);
        let mut triangles = Vec::with_capacity(12);
        for (n, a, b) in faces {
            let base = vertices.len() as u32;
            let c = n.component_mul(&h);
            let a = a.component_mul(&h);
            let b = b.component_mul(&h);
            for (sa, sb) in [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)] {
                vertices.push(c + a * sa + b * sb);
                normals.push(n);
            }
            triangles.push([base, base + 1, base + 2]);
            triangles.push([base, base + 2, base + 3]);
        }
        Self {
            vertices,
            normals,
            triangles,
        }
    }

    /// Octahedron with the given semi-axes, flat shaded.
    pub fn octahedron(radii: Vector3<f64>) -> Self {
        let vertices = [
            Vector3::new(radii.x, 0.0, 0.0),
            Vector3::new(-radii.x, 0.0, 0.0),
            Vector3::new(0.0, radii.y, 0.0),
            Vector3::new(0.0, -radii.y, 0.0),
            Vector3::new(0.0, 0.0, radii.z),
            Vector3::new(0.0, 0.0, -radii.z),
        ];
        let faces = [
            [0, 2, 4],
            [2, 1, 4],
            [1, 3, 4],
            [3, 0, 4],
            [2, 0, 5],
            [1, 2, 5],
            [3, 1, 5],
            [0, 3, 5],
        ];
        // Split vertices per face so each face is flat shaded.
        let mut verts = Vec::with_capacity(24);
        let mut normals = Vec::with_capacity(24);
        let mut tris = Vec::with_capacity(8);
        for f in faces {
            let p: Vec<Vector3<f64>> = f.iter().map(|&i| vertices[i]).collect();
            let n = (p[1] - p[0]).cross(&(p[2] - p[0])).normalize();
            let base = verts.len() as u32;
            verts.extend(p);
            normals.extend([n; 3]);
            tris.push([base, base + 1, base + 2]);
        }
        Self {
            vertices: verts,
            normals,
            triangles: tris,
        }
    }

    pub fn to_obj(&self) -> String {
        let mut out = String::new();
        for v in &self.vertices {
            let _ = writeln!(out, "v {} {} {}", v.x, v.y, v.z);
        }
        for n in &self.normals {
            let _ = writeln!(out, "vn {} {} {}", n.x, n.y, n.z);
        }
        for t in &self.triangles {
            let [a, b, c] = t.map(|i| i + 1);
            let _ = writeln!(out, "f {a}//{a} {b}//{b} {c}//{c}");
        }
        out
    }
}

/// Per-vertex normals as the normalized sum of adjacent face normals weighted by area.
pub fn area_weighted_normals(vertices: &[Vector3<f64>], triangles: &[[u32; 3]]) -> Vec<Vector3<f64>> {
    let mut acc = vec![Vector3::zeros(); vertices.len()];
    for t in triangles {
        let [a, b, c] = t.map(|i| vertices[i as usize]);
        // |cross| is twice the area, so the raw cross product is already area weighted.
        let n = (b - a).cross(&(c - a));
        for &i in t {
            acc[i as usize] += n;
        }
    }
    acc.into_iter()
        .map(|n| {
            let len = n.norm();
            if len > 0.0 {
                n / len
            } else {
                Vector3::z()
            }
        })
        .collect()
}

pub fn load_mesh(path: impl AsRef<Path>) -> Result<TriangleMesh, MeshError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| MeshError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_obj(&text)
}

/// Parses `v`, `vn` and triangular `f` records; everything else is skipped.
pub fn parse_obj(text: &str) -> Result<TriangleMesh, MeshError> {
    let mut positions: Vec<Vector3<f64>> = Vec::new();
    let mut file_normals: Vec<Vector3<f64>> = Vec::new();
    // (position index, normal index) -> mesh vertex
    let mut remap: HashMap<(usize, Option<usize>), u32> = HashMap::new();
    let mut corners: Vec<(usize, Option<usize>)> = Vec::new();
    let mut triangles: Vec<[u32; 3]> = Vec::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        let mut tokens = content.split_whitespace();
        let Some(tag) = tokens.next() else { continue };
        match tag {
            "v" | "vn" => {
                let vals: Vec<f64> = tokens
                    .map(|t| {
                        t.parse::<f64>().map_err(|_| MeshError::Parse {
                            line,
                            message: format!("bad number {t:?}"),
                        })
                    })
                    .collect::<Result<_, _>>()?;
                if vals.len() < 3 {
                    return Err(MeshError::Parse {
                        line,
                        message: format!("`{tag}` needs 3 components"),
                    });
                }
                let v = Vector3::new(vals[0], vals[1], vals[2]);
                if tag == "v" {
                    positions.push(v);
                } else {
                    let len = v.norm();
                    if !(len > 0.0) {
                        return Err(MeshError::Parse {
                            line,
                            message: "zero-length normal".into(),
                        });
                    }
                    file_normals.push(v / len);
                }
            }
            "f" => {
                let refs: Vec<&str> = tokens.collect();
                if refs.len() != 3 {
                    return Err(MeshError::NonTriangulatedFace {
                        line,
                        count: refs.len(),
                    });
                }
                let mut tri = [0u32; 3];
                for (slot, r) in tri.iter_mut().zip(&refs) {
                    let key = parse_face_ref(r, positions.len(), file_normals.len(), line)?;
                    let next = remap.len() as u32;
                    *slot = *remap.entry(key).or_insert_with(|| {
                        corners.push(key);
                        next
                    });
                }
                triangles.push(tri);
            }
            _ => {}
        }
    }

    if triangles.is_empty() {
        return Err(MeshError::Invalid("no faces".into()));
    }
    let vertices: Vec<Vector3<f64>> = corners.iter().map(|(p, _)| positions[*p]).collect();
    // Corners without a `vn` reference fall back to geometric normals, computed
    // on the position-shared mesh so splitting by normal index has no effect.
    let shared = if corners.iter().any(|(_, n)| n.is_none()) {
        let shared_tris: Vec<[u32; 3]> = triangles
            .iter()
            .map(|t| t.map(|i| corners[i as usize].0 as u32))
            .collect();
        area_weighted_normals(&positions, &shared_tris)
    } else {
        Vec::new()
    };
    let normals = corners
        .iter()
        .map(|(p, n)| match n {
            Some(n) => file_normals[*n],
            None => shared[*p],
        })
        .collect();
    TriangleMesh::new(vertices, triangles, Some(normals))
}

fn parse_face_ref(r: &str, n_pos: usize, n_norm: usize, line: usize) -> Result<(usize, Option<usize>), MeshError> {
    let mut parts = r.split('/');
    let bad = |message: String| MeshError::Parse { line, message };
    let pos = parts.next().unwrap_or("");
    let _tex = parts.next();
    let norm = parts.next().filter(|s| !s.is_empty());
    let resolve = |s: &str, count: usize| -> Result<usize, MeshError> {
        let i: i64 = s.parse().map_err(|_| bad(format!("bad face index {s:?}")))?;
        let idx = if i > 0 {
            i - 1
        } else if i < 0 {
            count as i64 + i
        } else {
            -1
        };
        if idx < 0 || idx as usize >= count {
            return Err(bad(format!("face index {i} out of range")));
        }
        Ok(idx as usize)
    };
    let p = resolve(pos, n_pos)?;
    let n = norm.map(|s| resolve(s, n_norm)).transpose()?;
    Ok((p, n))
}
