//! Procedural meshes: the toy exemplar set and the shape corpus the toy
//! denoiser is pre-trained on.

use std::f64::consts::PI;

use rand::Rng;

use crate::diffusion::{Condition, Modality};
use crate::error::Result;
use crate::geometry::{sample_camera, CameraDefaults, CameraMode, TriangleMesh};
use crate::image::Image;
use crate::math::Vec3;
use crate::render::rasterize;

/// Latitude/longitude sphere; `color` is evaluated at each unit normal.
pub fn uv_sphere(
    radius: f64,
    segments: usize,
    rings: usize,
    color: impl Fn(Vec3) -> [f64; 3],
) -> TriangleMesh {
    let mut vertices = Vec::new();
    let mut colors = Vec::new();
    for i in 0..=rings {
        let theta = PI * i as f64 / rings as f64;
        for j in 0..segments {
            let phi = 2.0 * PI * j as f64 / segments as f64;
            let n = Vec3::new(theta.sin() * phi.cos(), theta.cos(), theta.sin() * phi.sin());
            vertices.push(n * radius);
            colors.push(color(n));
        }
    }
    let mut faces = Vec::new();
    let idx = |i: usize, j: usize| (i * segments + j % segments) as u32;
    for i in 0..rings {
        for j in 0..segments {
            let (a, b, c, d) = (idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1));
            if i != 0 {
                faces.push([a, d, c]);
            }
            if i + 1 != rings {
                faces.push([a, c, b]);
            }
        }
    }
    TriangleMesh::new(vertices, faces, colors, "sphere").expect("valid by construction")
}

/// Axis-aligned box centred at the origin with outward winding.
pub fn box_mesh(half: Vec3, color: [f64; 3]) -> TriangleMesh {
    let mut vertices = Vec::new();
    for k in 0..8 {
        let s = |bit: usize| if k >> bit & 1 == 1 { 1.0 } else { -1.0 };
        vertices.push(Vec3::new(s(0) * half.x, s(1) * half.y, s(2) * half.z));
    }
    let quads = [
        [0, 2, 3, 1], // -z
        [4, 5, 7, 6], // +z
        [0, 1, 5, 4], // -y
        [2, 6, 7, 3], // +y
        [0, 4, 6, 2], // -x
        [1, 3, 7, 5], // +x
    ];
    let faces = quads
        .iter()
        .flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]])
        .collect();
    TriangleMesh::new(vertices, faces, vec![color; 8], "box").expect("valid by construction")
}

/// Closed cylinder (or cone when `top_radius` is 0) along +y.
pub fn cylinder(
    bottom_radius: f64,
    top_radius: f64,
    height: f64,
    segments: usize,
    color: impl Fn(Vec3) -> [f64; 3],
) -> TriangleMesh {
    let mut vertices = Vec::new();
    let h = height / 2.0;
    for j in 0..segments {
        let phi = 2.0 * PI * j as f64 / segments as f64;
        vertices.push(Vec3::new(bottom_radius * phi.cos(), -h, bottom_radius * phi.sin()));
    }
    for j in 0..segments {
        let phi = 2.0 * PI * j as f64 / segments as f64;
        vertices.push(Vec3::new(top_radius * phi.cos(), h, top_radius * phi.sin()));
    }
    let bottom_c = vertices.len() as u32;
    vertices.push(Vec3::new(0.0, -h, 0.0));
    let top_c = vertices.len() as u32;
    vertices.push(Vec3::new(0.0, h, 0.0));
    let s = segments as u32;
    let mut faces = Vec::new();
    for j in 0..s {
        let k = (j + 1) % s;
        faces.push([j, s + j, s + k]);
        faces.push([j, s + k, k]);
        faces.push([bottom_c, j, k]);
        faces.push([top_c, s + k, s + j]);
    }
    let colors = vertices.iter().map(|&v| color(v)).collect();
    TriangleMesh::new(vertices, faces, colors, "cylinder").expect("valid by construction")
}

/// Appends `other` to `mesh`, offset by `shift`.
pub fn merge(mesh: &TriangleMesh, other: &TriangleMesh, shift: Vec3) -> TriangleMesh {
    let base = mesh.vertices.len() as u32;
    let mut out = mesh.clone();
    out.vertices.extend(other.vertices.iter().map(|&v| v + shift));
    out.vertex_colors.extend(other.vertex_colors.iter().copied());
    out.faces.extend(other.faces.iter().map(|f| f.map(|i| i + base)));
    out
}

/// A small two-part "creature": body sphere plus head sphere, tinted by
/// `palette` (body, head). Used as a toy exemplar.
pub fn creature(palette: [[f64; 3]; 2], name: &str) -> TriangleMesh {
    let body = uv_sphere(0.55, 24, 16, |n| shade(palette[0], 0.85 + 0.15 * n.y));
    let head = uv_sphere(0.32, 20, 12, |n| shade(palette[1], 0.85 + 0.15 * n.y));
    let mut m = merge(&body, &head, Vec3::new(0.0, 0.62, 0.15));
    m.subject_name = name.to_string();
    m.normalized(0.8).expect("non-degenerate")
}

fn shade(c: [f64; 3], s: f64) -> [f64; 3] {
    c.map(|v| (v * s).clamp(0.0, 1.0))
}

/// Shape classes of the pre-training corpus; the class index doubles as
/// the subject token.
pub const CORPUS_CLASSES: usize = 4;

pub fn corpus_shape(class: usize, color: [f64; 3]) -> TriangleMesh {
    let m = match class % CORPUS_CLASSES {
        0 => uv_sphere(0.7, 24, 16, |_| color),
        1 => box_mesh(Vec3::new(0.5, 0.45, 0.4), color),
        2 => cylinder(0.45, 0.45, 1.1, 24, |_| color),
        _ => creature([color, shade(color, 0.7)], "creature"),
    };
    m.normalized(0.8).expect("non-degenerate")
}

/// Renders the procedural pre-training corpus: `n_shapes` random shapes,
/// `views` exemplar-style views each, every view contributing a colour image
/// and a normal map with the matching modality token. Subject token is the
/// shape class + 1; style token 0 (no style).
pub fn pretraining_corpus(
    n_shapes: usize,
    views: usize,
    camera: &CameraDefaults,
    rng: &mut impl Rng,
) -> Result<Vec<(Image, Condition)>> {
    let mut out = Vec::with_capacity(2 * n_shapes * views);
    for s in 0..n_shapes {
        let class = s % CORPUS_CLASSES;
        let color = [rng.random_range(0.1..0.95), rng.random_range(0.1..0.95), rng.random_range(0.1..0.95)];
        let mesh = corpus_shape(class, color);
        for _ in 0..views {
            let elev = if rng.random_bool(0.5) { 0.0 } else { 20.0 };
            let cam = sample_camera(CameraMode::Exemplar, rng, elev, camera)?;
            let view = rasterize(&mesh, &cam, [1.0; 3])?;
            let base = Condition::new(class as u16 + 1, 0, Modality::Color).with_camera(&cam);
            out.push((view.color, base));
            out.push((view.normal.encode_normals(), base.with_modality(Modality::Normal)));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_are_closed_and_outward() {
        let s = uv_sphere(1.0, 32, 16, |_| [0.5; 3]);
        let v = s.signed_volume();
        assert!((v - 4.0 / 3.0 * PI).abs() / (4.0 / 3.0 * PI) < 0.05, "{v}");
        let b = box_mesh(Vec3::new(0.5, 1.0, 1.5), [0.5; 3]);
        assert!((b.signed_volume() - 6.0).abs() < 1e-12);
        let c = cylinder(1.0, 1.0, 2.0, 64, |_| [0.5; 3]);
        assert!((c.signed_volume() - 2.0 * PI).abs() / (2.0 * PI) < 0.01, "{}", c.signed_volume());
    }

    #[test]
    fn creature_fits_unit_sphere() {
        let m = creature([[0.8, 0.2, 0.1], [0.9, 0.6, 0.1]], "owl");
        assert!(m.vertices.iter().all(|v| v.norm() <= 0.8 + 1e-9));
        assert_eq!(m.subject_name, "owl");
    }
}
