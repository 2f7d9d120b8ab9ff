//! Isosurface extraction by naive surface nets over the voxel-centre
//! lattice. The lattice is padded with one layer of zero density so the
//! output is closed even when the object touches the grid boundary.

use crate::error::{Error, Result};
use crate::math::Vec3;

use super::field::VoxelRadianceField;
use super::mesh::TriangleMesh;

pub fn export_mesh(field: &VoxelRadianceField, iso: f64) -> Result<TriangleMesh> {
    let (lo, hi) = field
        .density
        .iter()
        .fold((0.0f64, 0.0f64), |(lo, hi), &d| (lo.min(d), hi.max(d)));
    if !(iso > lo && iso < hi) {
        return Err(Error::EmptyMesh(format!("iso {iso} outside density range [{lo}, {hi}]")));
    }

    let r = field.resolution() as isize;
    // Padded lattice coordinates run over -1..=r.
    let n = (r + 2) as usize;
    let lattice = |x: isize, y: isize, z: isize| -> f64 {
        if x < 0 || y < 0 || z < 0 || x >= r || y >= r || z >= r {
            0.0
        } else {
            field.density[field.index(x as usize, y as usize, z as usize)]
        }
    };
    let size = field.voxel_size();
    let to_world = |p: [f64; 3]| {
        field.bounds().min
            + Vec3::new((p[0] + 0.5) * size.x, (p[1] + 0.5) * size.y, (p[2] + 0.5) * size.z)
    };

    // One vertex per sign-changing cell; cell (x, y, z) spans lattice
    // points x..=x+1 etc., for x in -1..r.
    let cells = n - 1;
    let cell_id = |x: isize, y: isize, z: isize| {
        ((x + 1) as usize) + cells * (((y + 1) as usize) + cells * ((z + 1) as usize))
    };
    let mut cell_vertex = vec![u32::MAX; cells * cells * cells];
    let mut vertices = Vec::new();
    let mut colors = Vec::new();
    const EDGES: [([usize; 3], [usize; 3]); 12] = [
        ([0, 0, 0], [1, 0, 0]),
        ([0, 1, 0], [1, 1, 0]),
        ([0, 0, 1], [1, 0, 1]),
        ([0, 1, 1], [1, 1, 1]),
        ([0, 0, 0], [0, 1, 0]),
        ([1, 0, 0], [1, 1, 0]),
        ([0, 0, 1], [0, 1, 1]),
        ([1, 0, 1], [1, 1, 1]),
        ([0, 0, 0], [0, 0, 1]),
        ([1, 0, 0], [1, 0, 1]),
        ([0, 1, 0], [0, 1, 1]),
        ([1, 1, 0], [1, 1, 1]),
    ];
    for z in -1..r {
        for y in -1..r {
            for x in -1..r {
                let mut acc = [0.0f64; 3];
                let mut count = 0;
                for (a, b) in EDGES {
                    let pa = [x + a[0] as isize, y + a[1] as isize, z + a[2] as isize];
                    let pb = [x + b[0] as isize, y + b[1] as isize, z + b[2] as isize];
                    let va = lattice(pa[0], pa[1], pa[2]);
                    let vb = lattice(pb[0], pb[1], pb[2]);
                    if (va > iso) != (vb > iso) {
                        let t = (iso - va) / (vb - va);
                        for k in 0..3 {
                            acc[k] += pa[k] as f64 + t * (pb[k] - pa[k]) as f64;
                        }
                        count += 1;
                    }
                }
                if count > 0 {
                    let p = to_world(acc.map(|v| v / count as f64));
                    cell_vertex[cell_id(x, y, z)] = vertices.len() as u32;
                    vertices.push(p);
                    colors.push(field.sample_color(p).map(|c| c.clamp(0.0, 1.0)));
                }
            }
        }
    }

    // One quad per sign-changing lattice edge, joining the four cells
    // around it and oriented so normals point from inside to outside.
    let mut faces = Vec::new();
    for z in -1..=r {
        for y in -1..=r {
            for x in -1..=r {
                let p = [x, y, z];
                let v0 = lattice(x, y, z);
                for axis in 0..3 {
                    let mut q = p;
                    q[axis] += 1;
                    if q[axis] > r {
                        continue;
                    }
                    let v1 = lattice(q[0], q[1], q[2]);
                    if (v0 > iso) == (v1 > iso) {
                        continue;
                    }
                    let (b, c) = ((axis + 1) % 3, (axis + 2) % 3);
                    let corner = |db: isize, dc: isize| {
                        let mut cc = p;
                        cc[b] += db;
                        cc[c] += dc;
                        cc
                    };
                    let quad = [corner(-1, -1), corner(0, -1), corner(0, 0), corner(-1, 0)];
                    if quad.iter().any(|cc| cc.iter().any(|&v| v < -1 || v >= r)) {
                        continue;
                    }
                    let ids = quad.map(|cc| cell_vertex[cell_id(cc[0], cc[1], cc[2])]);
                    if ids.contains(&u32::MAX) {
                        continue;
                    }
                    if v0 > iso {
                        faces.push([ids[0], ids[1], ids[2]]);
                        faces.push([ids[0], ids[2], ids[3]]);
                    } else {
                        faces.push([ids[0], ids[2], ids[1]]);
                        faces.push([ids[0], ids[3], ids[2]]);
                    }
                }
            }
        }
    }

    if faces.is_empty() {
        return Err(Error::EmptyMesh(format!("no surface at iso {iso}")));
    }
    TriangleMesh::new(vertices, faces, colors, "isosurface")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::uv_sphere;
    use crate::geometry::field::{Aabb, DEFAULT_SIGMA_OCC};
    use crate::geometry::voxelize::voxelize_mesh_in;

    fn sphere(res: usize, r: f64) -> VoxelRadianceField {
        VoxelRadianceField::from_fn(res, Aabb::unit(), |p| {
            (if p.norm() < r { DEFAULT_SIGMA_OCC } else { 0.0 }, [0.3, 0.6, 0.9])
        })
        .unwrap()
    }

    #[test]
    fn sphere_vertices_near_radius() {
        let f = sphere(48, 0.6);
        let m = export_mesh(&f, DEFAULT_SIGMA_OCC / 2.0).unwrap();
        let vox = f.voxel_size().x;
        for v in &m.vertices {
            assert!((v.norm() - 0.6).abs() < 2.0 * vox, "radius {}", v.norm());
        }
        assert!(m.signed_volume() > 0.0, "outward orientation");
        assert!((m.vertex_colors[0][1] - 0.6).abs() < 1e-9);
    }

    #[test]
    fn zero_field_is_empty() {
        let f = VoxelRadianceField::new(8, Aabb::unit()).unwrap();
        assert!(matches!(export_mesh(&f, 1.0), Err(Error::EmptyMesh(_))));
    }

    #[test]
    fn export_is_deterministic() {
        let f = sphere(24, 0.5);
        let a = export_mesh(&f, 20.0).unwrap().to_obj_string();
        let b = export_mesh(&f, 20.0).unwrap().to_obj_string();
        assert_eq!(a.as_bytes(), b.as_bytes());
    }

    #[test]
    fn closed_even_when_touching_boundary() {
        let f = VoxelRadianceField::filled(8, Aabb::unit(), 10.0, [0.5; 3]).unwrap();
        let m = export_mesh(&f, 5.0).unwrap();
        // Faces sit on the bounds (a cube of side 2); edges and corners are
        // chamfered by the vertex averaging.
        let v = m.signed_volume();
        assert!(v < 8.0 && (8.0 - v) / 8.0 < 0.05, "{v}");
    }

    #[test]
    fn voxelize_then_export_preserves_sphere_volume() {
        let s = uv_sphere(0.7, 64, 48, |_| [0.5; 3]);
        let f = voxelize_mesh_in(&s, 64, Aabb::unit(), DEFAULT_SIGMA_OCC).unwrap();
        let m = export_mesh(&f, DEFAULT_SIGMA_OCC / 2.0).unwrap();
        let v = m.signed_volume();
        let target = 4.0 / 3.0 * std::f64::consts::PI * 0.7f64.powi(3);
        assert!((v - target).abs() / target < 0.10, "{v} vs {target}");
    }
}
