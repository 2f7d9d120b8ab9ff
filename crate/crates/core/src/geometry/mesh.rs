use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Vec3;

use super::field::Aabb;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    pub vertex_colors: Vec<[f64; 3]>,
    pub subject_name: String,
}

const DEFAULT_VERTEX_COLOR: [f64; 3] = [0.7, 0.7, 0.7];

impl TriangleMesh {
    pub fn new(
        vertices: Vec<Vec3>,
        faces: Vec<[u32; 3]>,
        vertex_colors: Vec<[f64; 3]>,
        subject_name: impl Into<String>,
    ) -> Result<Self> {
        let mesh = Self { vertices, faces, vertex_colors, subject_name: subject_name.into() };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vertex_colors.len() != self.vertices.len() {
            return Err(Error::invalid(format!(
                "{} vertex colours for {} vertices",
                self.vertex_colors.len(),
                self.vertices.len()
            )));
        }
        let n = self.vertices.len() as u32;
        if let Some(f) = self.faces.iter().find(|f| f.iter().any(|&i| i >= n)) {
            return Err(Error::invalid(format!("face {f:?} indexes past {n} vertices")));
        }
        if self.vertex_colors.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::invalid("vertex colours must lie in [0, 1]"));
        }
        if self.vertices.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite vertex position"));
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn bounding_box(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(lo, hi), &v| (lo.min(v), hi.max(v))))
    }

    /// Rejects meshes without faces or with a collapsed bounding box.
    pub fn ensure_nondegenerate(&self) -> Result<()> {
        if self.faces.is_empty() {
            return Err(Error::invalid(format!("mesh '{}' has no faces", self.subject_name)));
        }
        let (lo, hi) = self.bounding_box().expect("faces imply vertices");
        let e = hi - lo;
        if e.x.max(e.y).max(e.z) <= 1e-12 {
            return Err(Error::invalid(format!(
                "mesh '{}' has a zero-size bounding box",
                self.subject_name
            )));
        }
        Ok(())
    }

    /// Cubic box around the mesh with the given relative padding.
    pub fn padded_cube_bounds(&self, padding: f64) -> Result<Aabb> {
        self.ensure_nondegenerate()?;
        let (lo, hi) = self.bounding_box().expect("checked");
        let e = (hi - lo) * 0.5;
        let half = e.x.max(e.y).max(e.z) * (1.0 + padding);
        Aabb::cube((lo + hi) * 0.5, half)
    }

    /// Recentres on the bounding-box centre and scales so every vertex lies
    /// within `radius` of the origin.
    pub fn normalized(&self, radius: f64) -> Result<TriangleMesh> {
        self.ensure_nondegenerate()?;
        let (lo, hi) = self.bounding_box().expect("checked");
        let c = (lo + hi) * 0.5;
        let r = self.vertices.iter().map(|&v| (v - c).norm()).fold(0.0, f64::max);
        let s = radius / r;
        Ok(TriangleMesh {
            vertices: self.vertices.iter().map(|&v| (v - c) * s).collect(),
            ..self.clone()
        })
    }

    pub fn face_normal(&self, f: usize) -> Vec3 {
        let [a, b, c] = self.faces[f].map(|i| self.vertices[i as usize]);
        (b - a).cross(c - a).normalized()
    }

    /// Signed volume by the divergence theorem; positive for outward
    /// winding.
    pub fn signed_volume(&self) -> f64 {
        self.faces
            .iter()
            .map(|f| {
                let [a, b, c] = f.map(|i| self.vertices[i as usize]);
                a.dot(b.cross(c)) / 6.0
            })
            .sum()
    }

    pub fn parse_obj(text: &str, subject_name: &str) -> Result<Self> {
        let mut vertices = Vec::new();
        let mut colors = Vec::new();
        let mut faces = Vec::new();
        let mut name = subject_name.to_string();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            let mut it = line.split_whitespace();
            let err = |msg: &str| Error::format("OBJ", format!("line {}: {msg}", lineno + 1));
            match it.next() {
                Some("v") => {
                    let vals: Vec<f64> = it
                        .map(|t| t.parse::<f64>().map_err(|_| err("bad number")))
                        .collect::<Result<_>>()?;
                    match vals.len() {
                        3 => colors.push(DEFAULT_VERTEX_COLOR),
                        6 | 7 => colors.push([vals[3], vals[4], vals[5]]),
                        4 => colors.push(DEFAULT_VERTEX_COLOR),
                        _ => return Err(err("vertex needs 3 or 6 values")),
                    }
                    vertices.push(Vec3::new(vals[0], vals[1], vals[2]));
                }
                Some("f") => {
                    let idx: Vec<u32> = it
                        .map(|t| {
                            let head = t.split('/').next().unwrap_or("");
                            let i: i64 = head.parse().map_err(|_| err("bad face index"))?;
                            let n = vertices.len() as i64;
                            let resolved = if i < 0 { n + i } else { i - 1 };
                            if resolved < 0 || resolved >= n {
                                return Err(err("face index out of range"));
                            }
                            Ok(resolved as u32)
                        })
                        .collect::<Result<_>>()?;
                    if idx.len() < 3 {
                        return Err(err("face needs at least 3 vertices"));
                    }
                    for k in 1..idx.len() - 1 {
                        faces.push([idx[0], idx[k], idx[k + 1]]);
                    }
                }
                Some("o") => {
                    let rest: Vec<&str> = it.collect();
                    if !rest.is_empty() {
                        name = rest.join(" ");
                    }
                }
                _ => {}
            }
        }
        Self::new(vertices, faces, colors, name)
    }

    pub fn load_obj(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("mesh");
        Self::parse_obj(&text, stem)
    }

    /// ASCII OBJ with `v x y z r g b` lines; fixed precision so identical
    /// meshes produce identical bytes.
    pub fn to_obj_string(&self) -> String {
        let mut s = String::with_capacity(64 * (self.vertices.len() + self.faces.len()));
        let _ = writeln!(s, "o {}", self.subject_name);
        for (v, c) in self.vertices.iter().zip(&self.vertex_colors) {
            let _ = writeln!(
                s,
                "v {:.6} {:.6} {:.6} {:.4} {:.4} {:.4}",
                v.x, v.y, v.z, c[0], c[1], c[2]
            );
        }
        for f in &self.faces {
            let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
        }
        s
    }

    pub fn save_obj(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_obj_string())?;
        Ok(())
    }
}
