use crate::error::{Error, Result};
use crate::geometry::{Camera, TriangleMesh};
use crate::image::Image;

use super::RenderedView;

/// Z-buffered perspective rasterization with perspective-correct vertex
/// colour interpolation. Normals are flat face normals turned towards the
/// viewer and expressed in camera space. Colours are unshaded albedo.
pub fn rasterize(mesh: &TriangleMesh, camera: &Camera, background: [f64; 3]) -> Result<RenderedView> {
    if mesh.is_empty() {
        return Err(Error::invalid(format!("cannot rasterize empty mesh '{}'", mesh.subject_name)));
    }
    camera.validate()?;
    let (w, h) = (camera.width, camera.height);
    let mut color = Image::from_fn(w, h, 3, |_, _, c| background[c]);
    let mut normal = Image::from_fn(w, h, 3, |_, _, c| if c == 2 { 1.0 } else { 0.0 });
    let mut mask = Image::zeros(w, h, 1);
    let mut depth = vec![f64::INFINITY; w * h];

    let projected: Vec<Option<(f64, f64, f64)>> =
        mesh.vertices.iter().map(|&v| camera.project(v)).collect();
    let eye = camera.position();

    for (fi, face) in mesh.faces.iter().enumerate() {
        let [Some(p0), Some(p1), Some(p2)] = face.map(|i| projected[i as usize]) else {
            continue;
        };
        let area = edge(p0, p1, p2.0, p2.1);
        if area.abs() < 1e-14 {
            continue;
        }
        let n_world = mesh.face_normal(fi);
        let a = mesh.vertices[face[0] as usize];
        let n_world = if n_world.dot(eye - a) < 0.0 { -n_world } else { n_world };
        let n_cam = camera.dir_to_camera(n_world);
        let cols = face.map(|i| mesh.vertex_colors[i as usize]);

        let xmin = p0.0.min(p1.0).min(p2.0).floor().max(0.0) as usize;
        let xmax = (p0.0.max(p1.0).max(p2.0).ceil().max(0.0) as usize).min(w);
        let ymin = p0.1.min(p1.1).min(p2.1).floor().max(0.0) as usize;
        let ymax = (p0.1.max(p1.1).max(p2.1).ceil().max(0.0) as usize).min(h);
        for py in ymin..ymax {
            for px in xmin..xmax {
                let (u, v) = (px as f64 + 0.5, py as f64 + 0.5);
                let b0 = edge(p1, p2, u, v) / area;
                let b1 = edge(p2, p0, u, v) / area;
                let b2 = edge(p0, p1, u, v) / area;
                if b0 < 0.0 || b1 < 0.0 || b2 < 0.0 {
                    continue;
                }
                // Perspective-correct weights: interpolate 1/z in screen space.
                let q = [b0 / p0.2, b1 / p1.2, b2 / p2.2];
                let inv_z = q[0] + q[1] + q[2];
                let z = 1.0 / inv_z;
                let pi = py * w + px;
                if z >= depth[pi] {
                    continue;
                }
                depth[pi] = z;
                for c in 0..3 {
                    let val = (q[0] * cols[0][c] + q[1] * cols[1][c] + q[2] * cols[2][c]) * z;
                    color.set(px, py, c, val.clamp(0.0, 1.0));
                }
                for (c, v) in n_cam.to_array().into_iter().enumerate() {
                    normal.set(px, py, c, v);
                }
                mask.set(px, py, 0, 1.0);
            }
        }
    }
    Ok(RenderedView { color, normal, mask, camera: *camera })
}

fn edge(a: (f64, f64, f64), b: (f64, f64, f64), x: f64, y: f64) -> f64 {
    (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0)
}
