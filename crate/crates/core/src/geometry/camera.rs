use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Vec3;

/// Orbit camera looking at `target` from (elevation, azimuth, radius).
///
/// Azimuth 0 places the camera on +z; elevation rotates towards +y.
/// Camera space follows the usual right/up/back convention, so a surface
/// facing the camera has camera-space normal (0, 0, 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub elevation: f64,
    pub azimuth: f64,
    pub radius: f64,
    pub fov: f64,
    pub width: usize,
    pub height: usize,
    pub target: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraDefaults {
    pub radius: f64,
    pub fov: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for CameraDefaults {
    fn default() -> Self {
        Self { radius: 3.0, fov: 40.0, width: 64, height: 64 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraMode {
    /// Fixed elevation (0 or 20 degrees), random azimuth.
    Exemplar,
    /// Random elevation in [-10, 45] and random azimuth.
    Optimization,
}

pub const OPTIMIZATION_ELEVATION: (f64, f64) = (-10.0, 45.0);

pub fn sample_camera(
    mode: CameraMode,
    rng: &mut impl Rng,
    elevation_choice: f64,
    defaults: &CameraDefaults,
) -> Result<Camera> {
    let (elevation, azimuth) = match mode {
        CameraMode::Exemplar => {
            if elevation_choice != 0.0 && elevation_choice != 20.0 {
                return Err(Error::invalid(format!(
                    "exemplar elevation must be 0 or 20, got {elevation_choice}"
                )));
            }
            (elevation_choice, rng.random_range(0.0..360.0))
        }
        CameraMode::Optimization => {
            let (lo, hi) = OPTIMIZATION_ELEVATION;
            let el = rng.random_range(lo..=hi);
            (el, rng.random_range(0.0..360.0))
        }
    };
    Camera::new(elevation, azimuth, defaults.radius, defaults.fov, defaults.width, defaults.height)
}

impl Camera {
    pub fn new(
        elevation: f64,
        azimuth: f64,
        radius: f64,
        fov: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cam = Self { elevation, azimuth, radius, fov, width, height, target: Vec3::ZERO };
        cam.validate()?;
        Ok(cam)
    }

    pub fn with_defaults(elevation: f64, azimuth: f64, defaults: &CameraDefaults) -> Result<Self> {
        Self::new(elevation, azimuth, defaults.radius, defaults.fov, defaults.width, defaults.height)
    }

    pub fn looking_at(mut self, target: Vec3) -> Self {
        self.target = target;
        self
    }

    pub fn with_resolution(mut self, width: usize, height: usize) -> Self {
        self.width = width;
        self.height = height;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fov > 0.0 && self.fov < 180.0) {
            return Err(Error::invalid(format!("fov must lie in (0, 180), got {}", self.fov)));
        }
        if !(self.radius > 0.0) {
            return Err(Error::invalid(format!("radius must be positive, got {}", self.radius)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera resolution must be positive"));
        }
        if !self.elevation.is_finite() || !self.azimuth.is_finite() {
            return Err(Error::invalid("camera angles must be finite"));
        }
        Ok(())
    }

    /// Unit vector from the target towards the camera.
    pub fn back(&self) -> Vec3 {
        let (el, az) = (self.elevation.to_radians(), self.azimuth.to_radians());
        Vec3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos())
    }

    pub fn position(&self) -> Vec3 {
        self.target + self.back() * self.radius
    }

    /// Orthonormal (right, up, back) basis.
    pub fn basis(&self) -> (Vec3, Vec3, Vec3) {
        let back = self.back();
        let world_up = if back.y.abs() > 0.999 { Vec3::Z } else { Vec3::Y };
        let right = world_up.cross(back).normalized();
        let up = back.cross(right);
        (right, up, back)
    }

    fn tan_half_fov(&self) -> f64 {
        (self.fov.to_radians() * 0.5).tan()
    }

    fn aspect(&self) -> f64 {
        self.width as f64 / self.height as f64
    }

    /// World-space ray through continuous pixel coordinates (u right, v down).
    pub fn ray(&self, u: f64, v: f64) -> (Vec3, Vec3) {
        let (right, up, back) = self.basis();
        let th = self.tan_half_fov();
        let x = (u / self.width as f64 * 2.0 - 1.0) * th * self.aspect();
        let y = (1.0 - v / self.height as f64 * 2.0) * th;
        let dir = (right * x + up * y - back).normalized();
        (self.position(), dir)
    }

    /// Ray through the centre of pixel (px, py).
    pub fn pixel_ray(&self, px: usize, py: usize) -> (Vec3, Vec3) {
        self.ray(px as f64 + 0.5, py as f64 + 0.5)
    }

    /// World point to camera space (x right, y up, z towards the viewer).
    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        let (right, up, back) = self.basis();
        let d = p - self.position();
        Vec3::new(d.dot(right), d.dot(up), d.dot(back))
    }

    pub fn dir_to_camera(&self, n: Vec3) -> Vec3 {
        let (right, up, back) = self.basis();
        Vec3::new(n.dot(right), n.dot(up), n.dot(back))
    }

    pub fn dir_from_camera(&self, n: Vec3) -> Vec3 {
        let (right, up, back) = self.basis();
        right * n.x + up * n.y + back * n.z
    }

    /// Projects a world point to continuous pixel coordinates and view
    /// depth; `None` when the point is behind the camera.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64, f64)> {
        let c = self.to_camera(p);
        let depth = -c.z;
        if depth <= 1e-9 {
            return None;
        }
        let th = self.tan_half_fov();
        let xn = c.x / (depth * th * self.aspect());
        let yn = c.y / (depth * th);
        let u = (xn + 1.0) * 0.5 * self.width as f64;
        let v = (1.0 - yn) * 0.5 * self.height as f64;
        Some((u, v, depth))
    }

    /// World-space size of one pixel at the target distance.
    pub fn pixel_size_at_target(&self) -> f64 {
        2.0 * self.radius * self.tan_half_fov() / self.height as f64
    }

    /// (sin az, cos az, sin el, cos el), the camera condition embedding.
    pub fn embedding(&self) -> [f64; 4] {
        let (az, el) = (self.azimuth.to_radians(), self.elevation.to_radians());
        [az.sin(), az.cos(), el.sin(), el.cos()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn exemplar_mode_fixes_elevation() {
        let mut rng = seeded(7);
        let cam = sample_camera(CameraMode::Exemplar, &mut rng, 20.0, &CameraDefaults::default())
            .unwrap();
        assert_eq!(cam.elevation, 20.0);
        assert!((0.0..360.0).contains(&cam.azimuth));

        let again = sample_camera(
            CameraMode::Exemplar,
            &mut seeded(7),
            20.0,
            &CameraDefaults::default(),
        )
        .unwrap();
        assert_eq!(cam, again);
    }

    #[test]
    fn exemplar_mode_rejects_other_elevations() {
        let err = sample_camera(CameraMode::Exemplar, &mut seeded(1), 10.0, &Default::default());
        assert!(matches!(err, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn optimization_azimuth_is_uniform() {
        // Chi-squared against a uniform law over 36 bins; each bin count is
        // also within 3 sigma of its multinomial expectation.
        let mut rng = seeded(3);
        let n = 10_000;
        let bins = 36;
        let mut counts = vec![0usize; bins];
        for _ in 0..n {
            let cam = sample_camera(CameraMode::Optimization, &mut rng, 0.0, &Default::default())
                .unwrap();
            assert!((-10.0..=45.0).contains(&cam.elevation));
            assert!((0.0..360.0).contains(&cam.azimuth));
            counts[(cam.azimuth / 10.0) as usize] += 1;
        }
        let p = 1.0 / bins as f64;
        let expected = n as f64 * p;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        let mut chi2 = 0.0;
        for &c in &counts {
            assert!((c as f64 - expected).abs() < 3.0 * sigma + 1.0, "bin count {c}");
            chi2 += (c as f64 - expected).powi(2) / expected;
        }
        // 35 dof: mean 35, sd ~8.4.
        assert!(chi2 < 35.0 + 3.0 * (70f64).sqrt(), "chi2 = {chi2}");
    }

    #[test]
    fn frontal_projection_of_target_hits_image_centre() {
        let cam = Camera::new(20.0, 30.0, 3.0, 40.0, 64, 48).unwrap();
        let (u, v, d) = cam.project(Vec3::ZERO).unwrap();
        assert!((u - 32.0).abs() < 1e-9 && (v - 24.0).abs() < 1e-9);
        assert!((d - 3.0).abs() < 1e-9);
        let (o, dir) = cam.ray(u, v);
        assert!((o + dir * 3.0).norm() < 1e-9);
    }

    #[test]
    fn invalid_camera_rejected() {
        assert!(Camera::new(0.0, 0.0, 3.0, 180.0, 8, 8).is_err());
        assert!(Camera::new(0.0, 0.0, 0.0, 40.0, 8, 8).is_err());
        assert!(Camera::new(0.0, 0.0, 1.0, 40.0, 0, 8).is_err());
    }
}
