use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Vec3;

/// Density assigned to occupied voxels, per unit length.
pub const DEFAULT_SIGMA_OCC: f64 = 40.0;

/// Grid container magic; followed by a one-byte format version.
pub const GRID_MAGIC: &[u8; 8] = b"TFGRID\0\0";
pub const GRID_VERSION: u8 = 1;

/// Below this gradient norm a normal is undefined and the sentinel is used.
pub const NORMAL_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        let b = Self { min, max };
        b.validate()?;
        Ok(b)
    }

    pub fn cube(center: Vec3, half: f64) -> Result<Self> {
        Self::new(center - Vec3::splat(half), center + Vec3::splat(half))
    }

    /// The default scene box, [-1, 1]^3.
    pub fn unit() -> Self {
        Self { min: Vec3::splat(-1.0), max: Vec3::splat(1.0) }
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.extent();
        if !(e.x > 0.0 && e.y > 0.0 && e.z > 0.0) || !e.is_finite() {
            return Err(Error::invalid("bounds must have positive finite extent on all axes"));
        }
        Ok(())
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn volume(&self) -> f64 {
        let e = self.extent();
        e.x * e.y * e.z
    }

    pub fn contains(&self, p: Vec3, eps: f64) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] - eps && p[i] <= self.max[i] + eps)
    }

    /// Slab-method ray intersection, returning the parametric interval.
    pub fn intersect(&self, origin: Vec3, dir: Vec3) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            if dir[i].abs() < 1e-15 {
                if origin[i] < self.min[i] || origin[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[i];
            let (mut a, mut b) = ((self.min[i] - origin[i]) * inv, (self.max[i] - origin[i]) * inv);
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
        }
        (t1 > t0).then_some((t0, t1))
    }

    /// Distances from `p` to the nearest and farthest points of the box.
    pub fn distance_range(&self, p: Vec3) -> (f64, f64) {
        let mut near = 0.0;
        let mut far = 0.0;
        for i in 0..3 {
            let d = if p[i] < self.min[i] {
                self.min[i] - p[i]
            } else if p[i] > self.max[i] {
                p[i] - self.max[i]
            } else {
                0.0
            };
            near += d * d;
            let f = (p[i] - self.min[i]).abs().max((p[i] - self.max[i]).abs());
            far += f * f;
        }
        (near.sqrt(), far.sqrt())
    }
}

/// Trilinear stencil: eight voxel indices and their weights.
#[derive(Debug, Clone, Copy)]
pub struct Trilinear {
    pub idx: [usize; 8],
    pub w: [f64; 8],
}

/// Density and colour grids over an axis-aligned box. Voxel `(x, y, z)`
/// lives at flat index `x + R * (y + R * z)`; colour is RGB-interleaved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelRadianceField {
    resolution: usize,
    bounds: Aabb,
    pub density: Vec<f64>,
    pub color: Vec<f64>,
}

/// Gradient grids with the same layout as a [`VoxelRadianceField`].
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrad {
    pub density: Vec<f64>,
    pub color: Vec<f64>,
}

impl FieldGrad {
    pub fn zeros(resolution: usize) -> Self {
        let n = resolution.pow(3);
        Self { density: vec![0.0; n], color: vec![0.0; 3 * n] }
    }

    pub fn zeros_like(field: &VoxelRadianceField) -> Self {
        Self::zeros(field.resolution())
    }

    pub fn add_scaled(&mut self, other: &FieldGrad, s: f64) {
        for (a, b) in self.density.iter_mut().zip(&other.density) {
            *a += s * b;
        }
        for (a, b) in self.color.iter_mut().zip(&other.color) {
            *a += s * b;
        }
    }

    pub fn scaled(&self, s: f64) -> FieldGrad {
        FieldGrad {
            density: self.density.iter().map(|v| v * s).collect(),
            color: self.color.iter().map(|v| v * s).collect(),
        }
    }

    /// Elementwise `a * self + b * other`, evaluated per entry in that order.
    pub fn combine(&self, a: f64, other: &FieldGrad, b: f64) -> FieldGrad {
        FieldGrad {
            density: self.density.iter().zip(&other.density).map(|(x, y)| a * x + b * y).collect(),
            color: self.color.iter().zip(&other.color).map(|(x, y)| a * x + b * y).collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.density.iter().chain(&self.color).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.density.iter().chain(&self.color).all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.density.iter().chain(&self.color).all(|&v| v == 0.0)
    }
}

impl VoxelRadianceField {
    pub fn new(resolution: usize, bounds: Aabb) -> Result<Self> {
        Self::filled(resolution, bounds, 0.0, [0.5; 3])
    }

    pub fn filled(resolution: usize, bounds: Aabb, density: f64, color: [f64; 3]) -> Result<Self> {
        if resolution < 2 {
            return Err(Error::invalid(format!("resolution must be >= 2, got {resolution}")));
        }
        bounds.validate()?;
        let n = resolution.pow(3);
        let field = Self {
            resolution,
            bounds,
            density: vec![density; n],
            color: color.iter().copied().cycle().take(3 * n).collect(),
        };
        field.validate()?;
        Ok(field)
    }

    /// Builds a field from a per-voxel-centre closure returning
    /// (density, colour).
    pub fn from_fn(
        resolution: usize,
        bounds: Aabb,
        f: impl Fn(Vec3) -> (f64, [f64; 3]),
    ) -> Result<Self> {
        let mut field = Self::new(resolution, bounds)?;
        for z in 0..resolution {
            for y in 0..resolution {
                for x in 0..resolution {
                    let i = field.index(x, y, z);
                    let (d, c) = f(field.voxel_center(x, y, z));
                    field.density[i] = d;
                    field.color[3 * i..3 * i + 3].copy_from_slice(&c);
                }
            }
        }
        field.validate()?;
        Ok(field)
    }

    /// Solid sphere with a partial-volume boundary: density ramps from
    /// `sigma` to 0 across one voxel width around `radius`.
    pub fn solid_sphere(
        resolution: usize,
        bounds: Aabb,
        center: Vec3,
        radius: f64,
        sigma: f64,
        color: [f64; 3],
    ) -> Result<Self> {
        let vox = bounds.extent().x.min(bounds.extent().y).min(bounds.extent().z) / resolution as f64;
        Self::from_fn(resolution, bounds, |p| {
            let cover = (0.5 - ((p - center).norm() - radius) / vox).clamp(0.0, 1.0);
            (sigma * cover, color)
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn bounds(&self) -> &Aabb {
        &self.bounds
    }

    pub fn voxel_count(&self) -> usize {
        self.density.len()
    }

    pub fn voxel_size(&self) -> Vec3 {
        self.bounds.extent() * (1.0 / self.resolution as f64)
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.resolution * (y + self.resolution * z)
    }

    pub fn coords(&self, i: usize) -> (usize, usize, usize) {
        let r = self.resolution;
        (i % r, (i / r) % r, i / (r * r))
    }

    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> Vec3 {
        let s = self.voxel_size();
        self.bounds.min
            + Vec3::new((x as f64 + 0.5) * s.x, (y as f64 + 0.5) * s.y, (z as f64 + 0.5) * s.z)
    }

    pub fn color_at(&self, i: usize) -> [f64; 3] {
        [self.color[3 * i], self.color[3 * i + 1], self.color[3 * i + 2]]
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(d) = self.density.iter().find(|d| !(**d >= 0.0) || !d.is_finite()) {
            return Err(Error::invalid(format!("density must be finite and >= 0, found {d}")));
        }
        if let Some(c) = self.color.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(Error::invalid(format!("colour components must lie in [0, 1], found {c}")));
        }
        self.bounds.validate()
    }

    /// Restores the invariants after an unconstrained parameter update.
    pub fn project_to_valid(&mut self) {
        for d in &mut self.density {
            *d = if d.is_finite() { d.max(0.0) } else { 0.0 };
        }
        for c in &mut self.color {
            *c = if c.is_finite() { c.clamp(0.0, 1.0) } else { 0.5 };
        }
    }

    pub fn all_finite(&self) -> bool {
        self.density.iter().chain(&self.color).all(|v| v.is_finite())
    }

    /// Trilinear stencil over voxel centres, clamped to the grid.
    #[inline]
    pub fn trilinear(&self, p: Vec3) -> Trilinear {
        let r = self.resolution;
        let s = self.voxel_size();
        let mut i0 = [0usize; 3];
        let mut f = [0.0f64; 3];
        for a in 0..3 {
            let u = ((p[a] - self.bounds.min[a]) / s[a] - 0.5).clamp(0.0, (r - 1) as f64);
            let base = (u.floor() as usize).min(r - 2);
            i0[a] = base;
            f[a] = u - base as f64;
        }
        let mut idx = [0usize; 8];
        let mut w = [0.0f64; 8];
        for k in 0..8 {
            let (dx, dy, dz) = (k & 1, (k >> 1) & 1, (k >> 2) & 1);
            idx[k] = self.index(i0[0] + dx, i0[1] + dy, i0[2] + dz);
            let wx = if dx == 1 { f[0] } else { 1.0 - f[0] };
            let wy = if dy == 1 { f[1] } else { 1.0 - f[1] };
            let wz = if dz == 1 { f[2] } else { 1.0 - f[2] };
            w[k] = wx * wy * wz;
        }
        Trilinear { idx, w }
    }

    pub fn sample_density(&self, p: Vec3) -> f64 {
        let t = self.trilinear(p);
        (0..8).map(|k| t.w[k] * self.density[t.idx[k]]).sum()
    }

    pub fn sample_color(&self, p: Vec3) -> [f64; 3] {
        let t = self.trilinear(p);
        let mut c = [0.0; 3];
        for k in 0..8 {
            let i = 3 * t.idx[k];
            for ch in 0..3 {
                c[ch] += t.w[k] * self.color[i + ch];
            }
        }
        c
    }

    /// Central-difference step used for normals: one voxel width.
    pub fn normal_step(&self) -> f64 {
        let s = self.voxel_size();
        s.x.min(s.y).min(s.z)
    }

    /// Unnormalised density gradient by central differences of the
    /// trilinear interpolant.
    pub fn density_gradient(&self, p: Vec3) -> Vec3 {
        let h = self.normal_step();
        let mut g = [0.0; 3];
        for (a, ga) in g.iter_mut().enumerate() {
            let e = Vec3::axis(a) * h;
            *ga = (self.sample_density(p + e) - self.sample_density(p - e)) / (2.0 * h);
        }
        Vec3::from_array(g)
    }

    /// Occupancy mask at a density threshold.
    pub fn occupancy(&self, iso: f64) -> Vec<bool> {
        self.density.iter().map(|&d| d > iso).collect()
    }

    /// Resamples onto another grid (trilinear), used to compare fields with
    /// different bounds or resolution.
    pub fn resample(&self, resolution: usize, bounds: Aabb) -> Result<Self> {
        Self::from_fn(resolution, bounds, |p| {
            if self.bounds.contains(p, 0.0) {
                let c = self.sample_color(p);
                (self.sample_density(p).max(0.0), c.map(|v| v.clamp(0.0, 1.0)))
            } else {
                (0.0, [0.5; 3])
            }
        })
    }

    pub fn same_grid(&self, other: &Self) -> bool {
        self.resolution == other.resolution && self.bounds == other.bounds
    }

    /// Writes the binary grid container: magic, version byte, resolution
    /// (u32 LE), bounds (6 x f64 LE: min xyz then max xyz), density
    /// (R^3 x f32 LE), colour (R^3 x RGB f32 LE), x-fastest order.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(GRID_MAGIC)?;
        w.write_all(&[GRID_VERSION])?;
        w.write_all(&(self.resolution as u32).to_le_bytes())?;
        for v in [self.bounds.min, self.bounds.max] {
            for a in 0..3 {
                w.write_all(&v[a].to_le_bytes())?;
            }
        }
        let mut buf = Vec::with_capacity(4 * (self.density.len() + self.color.len()));
        for v in self.density.iter().chain(&self.color) {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != GRID_MAGIC {
            return Err(Error::format("grid container", "bad magic"));
        }
        let mut ver = [0u8; 1];
        r.read_exact(&mut ver)?;
        if ver[0] != GRID_VERSION {
            return Err(Error::format("grid container", format!("unsupported version {}", ver[0])));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let resolution = u32::from_le_bytes(b4) as usize;
        if !(2..=1024).contains(&resolution) {
            return Err(Error::format("grid container", format!("resolution {resolution}")));
        }
        let mut b8 = [0u8; 8];
        let mut vals = [0.0f64; 6];
        for v in &mut vals {
            r.read_exact(&mut b8)?;
            *v = f64::from_le_bytes(b8);
        }
        let bounds = Aabb::new(
            Vec3::new(vals[0], vals[1], vals[2]),
            Vec3::new(vals[3], vals[4], vals[5]),
        )?;
        let n = resolution.pow(3);
        let mut buf = vec![0u8; 4 * 4 * n];
        r.read_exact(&mut buf)?;
        let floats: Vec<f64> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let field = Self {
            resolution,
            bounds,
            density: floats[..n].to_vec(),
            color: floats[n..].to_vec(),
        };
        field.validate()?;
        Ok(field)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save_atomic(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        self.save(&tmp)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }

    /// Rounds every value through f32, matching what a save/load cycle
    /// produces.
    pub fn quantized(&self) -> Self {
        let mut f = self.clone();
        for v in f.density.iter_mut().chain(f.color.iter_mut()) {
            *v = *v as f32 as f64;
        }
        f
    }
}

/// Outward surface normals `-grad(density) / |grad(density)|` at the given
/// points; points where the gradient vanishes get the sentinel (0, 0, 1).
pub fn density_normals(field: &VoxelRadianceField, points: &[Vec3]) -> Result<Vec<Vec3>> {
    let eps = 1e-9 * field.bounds().extent().norm();
    points
        .iter()
        .map(|&p| {
            if !field.bounds().contains(p, eps) {
                return Err(Error::invalid(format!(
                    "point ({}, {}, {}) lies outside the field bounds",
                    p.x, p.y, p.z
                )));
            }
            let g = field.density_gradient(p);
            let n = g.norm();
            Ok(if n > NORMAL_EPS { g * (-1.0 / n) } else { Vec3::Z })
        })
        .collect()
}
