use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, FieldGrad, Trilinear, VoxelRadianceField};
use crate::image::Image;
use crate::math::Vec3;
use crate::rng::derive;

use super::RenderedView;

/// Fixed number of row chunks in the backward pass. Gradients are reduced
/// chunk by chunk in index order, so results do not depend on the thread
/// count.
const BACKWARD_CHUNKS: usize = 8;

const NORMAL_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderSettings {
    pub samples_per_ray: usize,
    /// Jitter sample positions within their strata (per-pixel seeded).
    pub step_jitter: bool,
    pub background: [f64; 3],
    pub near: f64,
    pub far: f64,
    /// Seed for the per-pixel jitter streams.
    pub seed: u64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            samples_per_ray: 64,
            step_jitter: false,
            background: [1.0, 1.0, 1.0],
            near: 0.05,
            far: 20.0,
            seed: 0,
        }
    }
}

impl RenderSettings {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_ray < 16 {
            return Err(Error::invalid(format!(
                "samples_per_ray must be >= 16, got {}",
                self.samples_per_ray
            )));
        }
        if !(self.near < self.far) || !(self.near >= 0.0) {
            return Err(Error::invalid(format!(
                "need 0 <= near < far, got near {} far {}",
                self.near, self.far
            )));
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::invalid("background colour must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Upstream gradient of a scalar loss with respect to a rendered view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewGrad {
    pub color: Image,
    pub normal: Image,
    pub mask: Image,
}

impl ViewGrad {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            color: Image::zeros(width, height, 3),
            normal: Image::zeros(width, height, 3),
            mask: Image::zeros(width, height, 1),
        }
    }

    fn check(&self, camera: &Camera) -> Result<()> {
        let (w, h) = (camera.width, camera.height);
        for (img, c, name) in [(&self.color, 3, "colour"), (&self.normal, 3, "normal"), (&self.mask, 1, "mask")] {
            if img.width() != w || img.height() != h || img.channels() != c {
                return Err(Error::ShapeMismatch {
                    expected: format!("{name} gradient {w}x{h}x{c}"),
                    got: format!("{}x{}x{}", img.width(), img.height(), img.channels()),
                });
            }
        }
        Ok(())
    }
}

struct Sample {
    p: Vec3,
    tri: Trilinear,
    sigma: f64,
    /// Transmittance before this sample.
    trans: f64,
    alpha: f64,
    color: [f64; 3],
    /// World-space normal and gradient norm, `None` for the sentinel.
    normal: Option<(Vec3, f64)>,
    normal_cam: Vec3,
}

struct Ray {
    samples: Vec<Sample>,
    delta: f64,
    /// Final transmittance.
    trans: f64,
}

struct Tracer<'a> {
    field: &'a VoxelRadianceField,
    camera: &'a Camera,
    settings: &'a RenderSettings,
    basis: (Vec3, Vec3, Vec3),
    h: f64,
}

impl<'a> Tracer<'a> {
    fn new(field: &'a VoxelRadianceField, camera: &'a Camera, settings: &'a RenderSettings) -> Result<Self> {
        settings.validate()?;
        camera.validate()?;
        let (dmin, dmax) = field.bounds().distance_range(camera.position());
        if settings.far <= dmin || settings.near >= dmax {
            return Err(Error::invalid(format!(
                "near/far [{}, {}] excludes the field bounds (distance range [{dmin:.3}, {dmax:.3}])",
                settings.near, settings.far
            )));
        }
        Ok(Self { field, camera, settings, basis: camera.basis(), h: field.normal_step() })
    }

    fn density(&self, tri: &Trilinear) -> f64 {
        (0..8).map(|k| tri.w[k] * self.field.density[tri.idx[k]]).sum()
    }

    fn gradient(&self, p: Vec3) -> Vec3 {
        let mut g = [0.0; 3];
        for (a, ga) in g.iter_mut().enumerate() {
            let e = Vec3::axis(a) * self.h;
            let plus = self.density(&self.field.trilinear(p + e));
            let minus = self.density(&self.field.trilinear(p - e));
            *ga = (plus - minus) / (2.0 * self.h);
        }
        Vec3::from_array(g)
    }

    fn to_cam(&self, n: Vec3) -> Vec3 {
        let (r, u, b) = self.basis;
        Vec3::new(n.dot(r), n.dot(u), n.dot(b))
    }

    fn cam_to_world(&self, n: Vec3) -> Vec3 {
        let (r, u, b) = self.basis;
        r * n.x + u * n.y + b * n.z
    }

    fn trace(&self, px: usize, py: usize) -> Ray {
        let (origin, dir) = self.camera.pixel_ray(px, py);
        let n = self.settings.samples_per_ray;
        let Some((t0, t1)) = self.field.bounds().intersect(origin, dir) else {
            return Ray { samples: Vec::new(), delta: 0.0, trans: 1.0 };
        };
        let (t0, t1) = (t0.max(self.settings.near), t1.min(self.settings.far));
        if t1 <= t0 {
            return Ray { samples: Vec::new(), delta: 0.0, trans: 1.0 };
        }
        let delta = (t1 - t0) / n as f64;
        let mut jitter = self
            .settings
            .step_jitter
            .then(|| derive(self.settings.seed, (py * self.camera.width + px) as u64));
        let mut samples = Vec::with_capacity(n);
        let mut trans = 1.0;
        for i in 0..n {
            let off = jitter.as_mut().map_or(0.5, |r| r.random::<f64>());
            let p = origin + dir * (t0 + (i as f64 + off) * delta);
            let tri = self.field.trilinear(p);
            let sigma = self.density(&tri);
            let alpha = 1.0 - (-sigma * delta).exp();
            // Colour and normal are needed even where sigma = 0: the
            // derivative with respect to sigma there is still non-zero.
            let mut color = [0.0; 3];
            for k in 0..8 {
                let j = 3 * tri.idx[k];
                for (ch, cv) in color.iter_mut().enumerate() {
                    *cv += tri.w[k] * self.field.color[j + ch];
                }
            }
            let g = self.gradient(p);
            let gn = g.norm();
            let (normal, normal_cam) = if gn > NORMAL_EPS {
                let nw = g * (-1.0 / gn);
                (Some((nw, gn)), self.to_cam(nw))
            } else {
                (None, Vec3::Z)
            };
            samples.push(Sample { p, tri, sigma, trans, alpha, color, normal, normal_cam });
            trans *= (-sigma * delta).exp();
        }
        Ray { samples, delta, trans }
    }

    fn shade(&self, ray: &Ray) -> ([f64; 3], Vec3, Vec3, f64) {
        let bg = self.settings.background;
        let mut c = [0.0; 3];
        let mut v = Vec3::ZERO;
        for s in &ray.samples {
            let w = s.trans * s.alpha;
            for ch in 0..3 {
                c[ch] += w * s.color[ch];
            }
            v += s.normal_cam * w;
        }
        for ch in 0..3 {
            c[ch] += ray.trans * bg[ch];
        }
        v += Vec3::Z * ray.trans;
        let vn = v.norm();
        let n = if vn > 1e-12 { v * (1.0 / vn) } else { Vec3::Z };
        (c, n, v, 1.0 - ray.trans)
    }
}

/// Emission-absorption volume rendering of colour, normals and alpha.
///
/// Samples are stratified along the ray segment inside the bounds with step
/// `delta = length / samples_per_ray`; opacity is `1 - exp(-sigma delta)` and
/// transmittance is the running product. The normal channel composites
/// camera-space `-grad(sigma) / |grad(sigma)|` with the background normal
/// (0, 0, 1) weighted by the final transmittance, then renormalises.
pub fn volume_render(
    field: &VoxelRadianceField,
    camera: &Camera,
    settings: &RenderSettings,
) -> Result<RenderedView> {
    let tracer = Tracer::new(field, camera, settings)?;
    let (w, h) = (camera.width, camera.height);
    let pixels: Vec<([f64; 3], Vec3, f64)> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let ray = tracer.trace(i % w, i / w);
            let (c, n, _, m) = tracer.shade(&ray);
            (c, n, m)
        })
        .collect();
    let mut color = Vec::with_capacity(3 * w * h);
    let mut normal = Vec::with_capacity(3 * w * h);
    let mut mask = Vec::with_capacity(w * h);
    for (c, n, m) in pixels {
        color.extend_from_slice(&c);
        normal.extend_from_slice(&n.to_array());
        mask.push(m);
    }
    let view = RenderedView {
        color: Image::from_vec(w, h, 3, color)?,
        normal: Image::from_vec(w, h, 3, normal)?,
        mask: Image::from_vec(w, h, 1, mask)?,
        camera: *camera,
    };
    if !view.all_finite() {
        return Err(Error::Numeric("volume render produced non-finite values".into()));
    }
    Ok(view)
}

/// Vector-Jacobian product of [`volume_render`]: given the gradient of a
/// scalar loss with respect to the rendered colour, normal and mask images,
/// returns its gradient with respect to the density and colour grids.
pub fn volume_render_backward(
    field: &VoxelRadianceField,
    camera: &Camera,
    settings: &RenderSettings,
    upstream: &ViewGrad,
) -> Result<FieldGrad> {
    let tracer = Tracer::new(field, camera, settings)?;
    upstream.check(camera)?;
    let (w, h) = (camera.width, camera.height);
    let chunks = BACKWARD_CHUNKS.min(h);
    let rows_per = h.div_ceil(chunks);
    let partials: Vec<FieldGrad> = (0..chunks)
        .into_par_iter()
        .map(|ci| {
            let mut g = FieldGrad::zeros_like(field);
            for py in ci * rows_per..((ci + 1) * rows_per).min(h) {
                for px in 0..w {
                    backward_pixel(&tracer, upstream, px, py, &mut g);
                }
            }
            g
        })
        .collect();
    let mut iter = partials.into_iter();
    let mut total = iter.next().expect("at least one chunk");
    for g in iter {
        total.add_scaled(&g, 1.0);
    }
    if !total.all_finite() {
        return Err(Error::Numeric("volume render gradient is non-finite".into()));
    }
    Ok(total)
}

fn backward_pixel(tracer: &Tracer, up: &ViewGrad, px: usize, py: usize, g: &mut FieldGrad) {
    let dc = up.color.pixel(px, py);
    let dc = [dc[0], dc[1], dc[2]];
    let dm = up.mask.get(px, py, 0);
    let dn = up.normal.pixel(px, py);
    let dn = Vec3::new(dn[0], dn[1], dn[2]);
    if dc.iter().all(|&v| v == 0.0) && dm == 0.0 && dn == Vec3::ZERO {
        return;
    }
    let ray = tracer.trace(px, py);
    if ray.samples.is_empty() {
        return;
    }
    let (_, n_out, v, _) = tracer.shade(&ray);
    let vn = v.norm();
    let dv = if vn > 1e-12 { (dn - n_out * n_out.dot(dn)) * (1.0 / vn) } else { Vec3::ZERO };
    let bg = tracer.settings.background;
    let dot3 = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];

    let mut rest = ray.trans * (dot3(dc, bg) + dv.z);
    let delta = ray.delta;
    let field = tracer.field;
    for s in ray.samples.iter().rev() {
        let wgt = s.trans * s.alpha;
        let uf = dot3(dc, s.color) + dm + dv.dot(s.normal_cam);
        let trans_next = s.trans * (-s.sigma * delta).exp();
        let dsigma = delta * (trans_next * uf - rest);
        rest += wgt * uf;
        for k in 0..8 {
            g.density[s.tri.idx[k]] += s.tri.w[k] * dsigma;
        }
        if wgt != 0.0 {
            for k in 0..8 {
                let j = 3 * s.tri.idx[k];
                for ch in 0..3 {
                    g.color[j + ch] += s.tri.w[k] * wgt * dc[ch];
                }
            }
        }
        if let Some((nw, gn)) = s.normal {
            if wgt != 0.0 && dv != Vec3::ZERO {
                let dn_w = tracer.cam_to_world(dv * wgt);
                let dgrad = (dn_w - nw * nw.dot(dn_w)) * (-1.0 / gn);
                for a in 0..3 {
                    let coeff = dgrad[a] / (2.0 * tracer.h);
                    if coeff == 0.0 {
                        continue;
                    }
                    let e = Vec3::axis(a) * tracer.h;
                    let plus = field.trilinear(s.p + e);
                    let minus = field.trilinear(s.p - e);
                    for k in 0..8 {
                        g.density[plus.idx[k]] += plus.w[k] * coeff;
                        g.density[minus.idx[k]] -= minus.w[k] * coeff;
                    }
                }
            }
        }
    }
}
