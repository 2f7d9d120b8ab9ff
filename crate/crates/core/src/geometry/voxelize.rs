//! Mesh to voxel-grid conversion by ray-parity inside tests with a
//! three-axis majority vote.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::math::Vec3;

use super::field::{Aabb, VoxelRadianceField, DEFAULT_SIGMA_OCC};
use super::mesh::TriangleMesh;

/// Approximate relative padding of the cube placed around a mesh by
/// [`voxelize_mesh`]; rounded to whole voxels per side.
pub const VOXELIZE_PADDING: f64 = 0.1;

// Irrational sub-voxel offsets keep parity rays off shared edges and vertices.
const RAY_JITTER: (f64, f64) = (1.234_567e-7, 2.718_281e-7);

/// Voxelizes into a padded cube around the mesh.
pub fn voxelize_mesh(mesh: &TriangleMesh, resolution: usize) -> Result<VoxelRadianceField> {
    let bounds = voxel_aligned_bounds(mesh, resolution)?;
    voxelize_mesh_in(mesh, resolution, bounds, DEFAULT_SIGMA_OCC)
}

/// Cube around the mesh whose longest bounding-box extent spans a whole
/// number of voxels, with an integer voxel margin on each side.
pub fn voxel_aligned_bounds(mesh: &TriangleMesh, resolution: usize) -> Result<Aabb> {
    mesh.ensure_nondegenerate()?;
    if resolution < 8 {
        return Err(Error::invalid(format!("voxelization needs resolution >= 8, got {resolution}")));
    }
    let (lo, hi) = mesh.bounding_box().expect("checked");
    let e = hi - lo;
    let extent = e.x.max(e.y).max(e.z);
    let margin = ((resolution as f64 * VOXELIZE_PADDING / 2.0).ceil() as usize).max(1);
    let half = 0.5 * extent * resolution as f64 / (resolution - 2 * margin) as f64;
    Aabb::cube((lo + hi) * 0.5, half)
}

/// Voxelizes into the given bounds. Inside voxels get `sigma_occ`; surface
/// voxels take the interpolated colour of the nearest face point and every
/// other voxel inherits the colour of its nearest surface voxel.
pub fn voxelize_mesh_in(
    mesh: &TriangleMesh,
    resolution: usize,
    bounds: Aabb,
    sigma_occ: f64,
) -> Result<VoxelRadianceField> {
    if resolution < 8 {
        return Err(Error::invalid(format!("voxelization needs resolution >= 8, got {resolution}")));
    }
    mesh.ensure_nondegenerate()?;
    mesh.validate()?;
    let mut field = VoxelRadianceField::new(resolution, bounds)?;
    let inside = parity_votes(mesh, &field);
    for (d, &occ) in field.density.iter_mut().zip(&inside) {
        *d = if occ { sigma_occ } else { 0.0 };
    }
    assign_colors(mesh, &mut field, &inside);
    Ok(field)
}

fn parity_votes(mesh: &TriangleMesh, field: &VoxelRadianceField) -> Vec<bool> {
    let r = field.resolution();
    let mut votes = vec![0u8; r * r * r];
    let b = *field.bounds();
    let size = field.voxel_size();
    for axis in 0..3 {
        let (ua, va) = ((axis + 1) % 3, (axis + 2) % 3);
        // Crossing coordinates along `axis` for each (u, v) column.
        let mut columns: Vec<Vec<f64>> = vec![Vec::new(); r * r];
        let center = |a: usize, i: usize| b.min[a] + (i as f64 + 0.5) * size[a];
        for f in &mesh.faces {
            let p = f.map(|i| mesh.vertices[i as usize]);
            let (umin, umax) = min_max(p.iter().map(|q| q[ua]));
            let (vmin, vmax) = min_max(p.iter().map(|q| q[va]));
            let Some((iu0, iu1)) = index_span(umin, umax, b.min[ua], size[ua], r) else {
                continue;
            };
            let Some((iv0, iv1)) = index_span(vmin, vmax, b.min[va], size[va], r) else {
                continue;
            };
            for iu in iu0..=iu1 {
                for iv in iv0..=iv1 {
                    let cu = center(ua, iu) + RAY_JITTER.0;
                    let cv = center(va, iv) + RAY_JITTER.1;
                    if let Some(bary) = barycentric_2d(
                        (p[0][ua], p[0][va]),
                        (p[1][ua], p[1][va]),
                        (p[2][ua], p[2][va]),
                        (cu, cv),
                    ) {
                        let hit = bary[0] * p[0][axis] + bary[1] * p[1][axis] + bary[2] * p[2][axis];
                        columns[iu + r * iv].push(hit);
                    }
                }
            }
        }
        for iu in 0..r {
            for iv in 0..r {
                let col = &mut columns[iu + r * iv];
                if col.is_empty() {
                    continue;
                }
                col.sort_by(|a, b| a.total_cmp(b));
                let mut k = 0;
                for ia in 0..r {
                    let c = center(axis, ia);
                    while k < col.len() && col[k] < c {
                        k += 1;
                    }
                    if k % 2 == 1 {
                        let mut ijk = [0usize; 3];
                        ijk[axis] = ia;
                        ijk[ua] = iu;
                        ijk[va] = iv;
                        votes[field.index(ijk[0], ijk[1], ijk[2])] += 1;
                    }
                }
            }
        }
    }
    votes.into_iter().map(|v| v >= 2).collect()
}

fn min_max(it: impl Iterator<Item = f64>) -> (f64, f64) {
    it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// Range of voxel-centre indices whose centres fall in [lo, hi].
fn index_span(lo: f64, hi: f64, origin: f64, step: f64, r: usize) -> Option<(usize, usize)> {
    let a = ((lo - origin) / step - 0.5).ceil().max(0.0);
    let b = ((hi - origin) / step - 0.5).floor().min((r - 1) as f64);
    (a <= b).then_some((a as usize, b as usize))
}

fn barycentric_2d(
    a: (f64, f64),
    b: (f64, f64),
    c: (f64, f64),
    p: (f64, f64),
) -> Option<[f64; 3]> {
    let det = (b.1 - c.1) * (a.0 - c.0) + (c.0 - b.0) * (a.1 - c.1);
    if det.abs() < 1e-18 {
        return None;
    }
    let l0 = ((b.1 - c.1) * (p.0 - c.0) + (c.0 - b.0) * (p.1 - c.1)) / det;
    let l1 = ((c.1 - a.1) * (p.0 - c.0) + (a.0 - c.0) * (p.1 - c.1)) / det;
    let l2 = 1.0 - l0 - l1;
    (l0 >= 0.0 && l1 >= 0.0 && l2 >= 0.0).then_some([l0, l1, l2])
}

/// Closest point on triangle `abc` to `p`, as barycentric weights.
pub(crate) fn closest_point_barycentric(p: Vec3, a: Vec3, b: Vec3, c: Vec3) -> [f64; 3] {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(ap);
    let d2 = ac.dot(ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return [1.0, 0.0, 0.0];
    }
    let bp = p - b;
    let d3 = ab.dot(bp);
    let d4 = ac.dot(bp);
    if d3 >= 0.0 && d4 <= d3 {
        return [0.0, 1.0, 0.0];
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return [1.0 - v, v, 0.0];
    }
    let cp = p - c;
    let d5 = ab.dot(cp);
    let d6 = ac.dot(cp);
    if d6 >= 0.0 && d5 <= d6 {
        return [0.0, 0.0, 1.0];
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return [1.0 - w, 0.0, w];
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return [0.0, 1.0 - w, w];
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    [1.0 - v - w, v, w]
}

/// Uniform bucket grid over face bounding boxes for nearest-face queries.
struct FaceGrid<'a> {
    mesh: &'a TriangleMesh,
    origin: Vec3,
    cell: f64,
    dims: usize,
    cells: Vec<Vec<u32>>,
}

impl<'a> FaceGrid<'a> {
    fn new(mesh: &'a TriangleMesh, bounds: &Aabb, dims: usize) -> Self {
        let e = bounds.extent();
        let cell = e.x.max(e.y).max(e.z) / dims as f64;
        let origin = bounds.min;
        let mut cells = vec![Vec::new(); dims * dims * dims];
        let to_cell = |v: f64, a: usize| {
            (((v - origin[a]) / cell).floor().max(0.0) as usize).min(dims - 1)
        };
        for (fi, f) in mesh.faces.iter().enumerate() {
            let p = f.map(|i| mesh.vertices[i as usize]);
            let lo = p[0].min(p[1]).min(p[2]);
            let hi = p[0].max(p[1]).max(p[2]);
            for z in to_cell(lo.z, 2)..=to_cell(hi.z, 2) {
                for y in to_cell(lo.y, 1)..=to_cell(hi.y, 1) {
                    for x in to_cell(lo.x, 0)..=to_cell(hi.x, 0) {
                        cells[x + dims * (y + dims * z)].push(fi as u32);
                    }
                }
            }
        }
        Self { mesh, origin, cell, dims, cells }
    }

    /// Nearest face and barycentric weights of the closest point.
    fn nearest(&self, p: Vec3) -> (usize, [f64; 3]) {
        let d = self.dims as isize;
        let c: Vec<isize> = (0..3)
            .map(|a| (((p[a] - self.origin[a]) / self.cell).floor() as isize).clamp(0, d - 1))
            .collect();
        let mut best = (f64::INFINITY, 0usize, [1.0, 0.0, 0.0]);
        for ring in 0..=d {
            for z in (c[2] - ring).max(0)..=(c[2] + ring).min(d - 1) {
                for y in (c[1] - ring).max(0)..=(c[1] + ring).min(d - 1) {
                    for x in (c[0] - ring).max(0)..=(c[0] + ring).min(d - 1) {
                        let on_shell = (x - c[0]).abs() == ring
                            || (y - c[1]).abs() == ring
                            || (z - c[2]).abs() == ring;
                        if !on_shell {
                            continue;
                        }
                        let cell = &self.cells[(x + d * (y + d * z)) as usize];
                        for &fi in cell {
                            let f = self.mesh.faces[fi as usize];
                            let [a, b, cc] = f.map(|i| self.mesh.vertices[i as usize]);
                            let w = closest_point_barycentric(p, a, b, cc);
                            let q = a * w[0] + b * w[1] + cc * w[2];
                            let dist = (q - p).norm();
                            if dist < best.0 || (dist == best.0 && (fi as usize) < best.1) {
                                best = (dist, fi as usize, w);
                            }
                        }
                    }
                }
            }
            if best.0 <= ring as f64 * self.cell {
                break;
            }
        }
        (best.1, best.2)
    }
}

fn assign_colors(mesh: &TriangleMesh, field: &mut VoxelRadianceField, inside: &[bool]) {
    let r = field.resolution();
    let grid = FaceGrid::new(mesh, field.bounds(), 16.min(r));
    let mut assigned = vec![false; inside.len()];
    let mut queue = VecDeque::new();
    let neighbors = |x: usize, y: usize, z: usize| {
        let mut out = Vec::with_capacity(6);
        if x > 0 {
            out.push((x - 1, y, z));
        }
        if x + 1 < r {
            out.push((x + 1, y, z));
        }
        if y > 0 {
            out.push((x, y - 1, z));
        }
        if y + 1 < r {
            out.push((x, y + 1, z));
        }
        if z > 0 {
            out.push((x, y, z - 1));
        }
        if z + 1 < r {
            out.push((x, y, z + 1));
        }
        out
    };
    for z in 0..r {
        for y in 0..r {
            for x in 0..r {
                let i = field.index(x, y, z);
                if !inside[i] {
                    continue;
                }
                let boundary = x == 0
                    || y == 0
                    || z == 0
                    || x + 1 == r
                    || y + 1 == r
                    || z + 1 == r
                    || neighbors(x, y, z).iter().any(|&(a, b, c)| !inside[field.index(a, b, c)]);
                if !boundary {
                    continue;
                }
                let (fi, w) = grid.nearest(field.voxel_center(x, y, z));
                let f = mesh.faces[fi];
                let mut col = [0.0; 3];
                for k in 0..3 {
                    let vc = mesh.vertex_colors[f[k] as usize];
                    for ch in 0..3 {
                        col[ch] += w[k] * vc[ch];
                    }
                }
                field.color[3 * i..3 * i + 3].copy_from_slice(&col.map(|c| c.clamp(0.0, 1.0)));
                assigned[i] = true;
                queue.push_back(i);
            }
        }
    }
    // Multi-source BFS: every remaining voxel copies its nearest surface
    // voxel's colour (in 6-connected hops).
    while let Some(i) = queue.pop_front() {
        let (x, y, z) = field.coords(i);
        let col = field.color_at(i);
        for (a, b, c) in neighbors(x, y, z) {
            let j = field.index(a, b, c);
            if !assigned[j] {
                assigned[j] = true;
                field.color[3 * j..3 * j + 3].copy_from_slice(&col);
                queue.push_back(j);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{box_mesh, uv_sphere};

    fn occupied(f: &VoxelRadianceField) -> usize {
        f.density.iter().filter(|&&d| d > 0.0).count()
    }

    #[test]
    fn unit_cube_volume_ratio() {
        let cube = box_mesh(Vec3::splat(0.5), [0.2, 0.6, 0.9]);
        let f = voxelize_mesh(&cube, 32).unwrap();
        let expected = 32f64.powi(3) * (1.0 / f.bounds().volume());
        assert!((f.bounds().volume() - 1.0).abs() > 0.1, "bounds are padded");
        let got = occupied(&f) as f64;
        assert!((got - expected).abs() / expected < 0.05, "{got} vs {expected}");
        // Surface colour comes from the vertex colours.
        let i = f.index(16, 16, 16);
        let c = f.color_at(i);
        assert!((c[0] - 0.2).abs() < 1e-9 && (c[2] - 0.9).abs() < 1e-9);
    }

    #[test]
    fn sphere_fraction_of_bounding_cube() {
        let s = uv_sphere(1.0, 48, 32, |_| [0.5, 0.5, 0.5]);
        let f = voxelize_mesh(&s, 64).unwrap();
        let vox = f.voxel_size();
        let vol = occupied(&f) as f64 * vox.x * vox.y * vox.z;
        let frac = vol / 8.0;
        let target = std::f64::consts::PI / 6.0;
        assert!((frac - target).abs() / target < 0.03, "{frac} vs {target}");
    }

    #[test]
    fn empty_mesh_rejected() {
        let m = TriangleMesh::new(vec![Vec3::ZERO], vec![], vec![[0.5; 3]], "empty").unwrap();
        assert!(matches!(voxelize_mesh(&m, 16), Err(Error::InvalidInput(_))));
        let cube = box_mesh(Vec3::splat(0.5), [0.5; 3]);
        assert!(voxelize_mesh(&cube, 4).is_err());
    }

    #[test]
    fn closest_point_regions() {
        let (a, b, c) = (Vec3::ZERO, Vec3::X, Vec3::Y);
        assert_eq!(closest_point_barycentric(Vec3::new(-1.0, -1.0, 0.0), a, b, c), [1.0, 0.0, 0.0]);
        let w = closest_point_barycentric(Vec3::new(0.25, 0.25, 3.0), a, b, c);
        assert!((w[1] - 0.25).abs() < 1e-12 && (w[2] - 0.25).abs() < 1e-12);
    }
}
