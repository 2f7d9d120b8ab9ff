use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{FieldGrad, VoxelRadianceField, DEFAULT_SIGMA_OCC};
use crate::image::Image;

/// Smoothing of the anisotropic L1 penalty: `sqrt(d^2 + eps^2) - eps`.
pub const TV_EPS: f64 = 1e-3;

/// Total variation over the density and colour grids: the smoothed
/// absolute difference of every pair of axis neighbours, summed. Density
/// differences are measured in units of the occupied density so both grids
/// contribute on the same scale.
pub fn tv_loss(field: &VoxelRadianceField) -> (f64, FieldGrad) {
    let r = field.resolution();
    let mut g = FieldGrad::zeros_like(field);
    let mut loss = 0.0;
    let rho = |d: f64| ((d * d + TV_EPS * TV_EPS).sqrt() - TV_EPS, d / (d * d + TV_EPS * TV_EPS).sqrt());
    let ds = 1.0 / DEFAULT_SIGMA_OCC;
    for z in 0..r {
        for y in 0..r {
            for x in 0..r {
                let i = field.index(x, y, z);
                for axis in 0..3 {
                    let (nx, ny, nz) = match axis {
                        0 => (x + 1, y, z),
                        1 => (x, y + 1, z),
                        _ => (x, y, z + 1),
                    };
                    if nx >= r || ny >= r || nz >= r {
                        continue;
                    }
                    let j = field.index(nx, ny, nz);
                    let (l, dl) = rho((field.density[j] - field.density[i]) * ds);
                    loss += l;
                    g.density[j] += dl * ds;
                    g.density[i] -= dl * ds;
                    for c in 0..3 {
                        let (l, dl) = rho(field.color[3 * j + c] - field.color[3 * i + c]);
                        loss += l;
                        g.color[3 * j + c] += dl;
                        g.color[3 * i + c] -= dl;
                    }
                }
            }
        }
    }
    (loss, g)
}

/// Row-major `n x dim` feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Maps an image to a set of feature vectors, with the adjoint for
/// back-propagation.
pub trait FeatureExtractor: Sync {
    fn name(&self) -> String;
    fn features(&self, img: &Image) -> Result<FeatureMap>;
    /// Gradient with respect to `img` of `<grad, features(img)>`.
    fn backward(&self, img: &Image, grad: &FeatureMap) -> Result<Image>;
}

/// Raw `size x size` patches (all channels) on a `stride` lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchFeatures {
    pub size: usize,
    pub stride: usize,
}

impl Default for PatchFeatures {
    fn default() -> Self {
        Self { size: 5, stride: 2 }
    }
}

impl PatchFeatures {
    fn origins(&self, img: &Image) -> Result<Vec<(usize, usize)>> {
        if self.size == 0 || self.stride == 0 {
            return Err(Error::invalid("patch size and stride must be >= 1"));
        }
        if img.width() < self.size || img.height() < self.size {
            return Err(Error::invalid(format!(
                "image {}x{} is smaller than a {}x{} patch",
                img.width(),
                img.height(),
                self.size,
                self.size
            )));
        }
        let mut out = Vec::new();
        for y in (0..=img.height() - self.size).step_by(self.stride) {
            for x in (0..=img.width() - self.size).step_by(self.stride) {
                out.push((x, y));
            }
        }
        Ok(out)
    }
}

impl FeatureExtractor for PatchFeatures {
    fn name(&self) -> String {
        format!("patch{}s{}", self.size, self.stride)
    }

    fn features(&self, img: &Image) -> Result<FeatureMap> {
        let origins = self.origins(img)?;
        let dim = self.size * self.size * img.channels();
        let mut data = Vec::with_capacity(origins.len() * dim);
        for (ox, oy) in origins {
            for y in oy..oy + self.size {
                for x in ox..ox + self.size {
                    data.extend_from_slice(img.pixel(x, y));
                }
            }
        }
        Ok(FeatureMap { dim, data })
    }

    fn backward(&self, img: &Image, grad: &FeatureMap) -> Result<Image> {
        let origins = self.origins(img)?;
        let ch = img.channels();
        if grad.dim != self.size * self.size * ch || grad.len() != origins.len() {
            return Err(Error::invalid("feature gradient does not match the patch layout"));
        }
        let mut out = Image::zeros_like(img);
        for (k, (ox, oy)) in origins.into_iter().enumerate() {
            let row = grad.row(k);
            let mut o = 0;
            for y in oy..oy + self.size {
                for x in ox..ox + self.size {
                    for c in 0..ch {
                        let idx = out.index(x, y, c);
                        out.data_mut()[idx] += row[o];
                        o += 1;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Bandwidth `h` of the contextual affinity.
pub const CONTEXTUAL_BANDWIDTH: f64 = 0.5;
const CX_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

fn center_normalize(f: &FeatureMap, mean: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut out = f.data.clone();
    let mut norms = Vec::with_capacity(f.len());
    for row in out.chunks_mut(f.dim) {
        for (v, m) in row.iter_mut().zip(mean) {
            *v -= m;
        }
        let n = (row.iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
        for v in row.iter_mut() {
            *v /= n;
        }
        norms.push(n);
    }
    (out, norms)
}

/// Contextual loss `-log CX(X, Y)` between render features `x` and target
/// features `y`: both are centred on the target mean and normalized; cosine
/// distances `d_ij` are made relative to each row minimum, turned into
/// affinities `exp((1 - d~_ij) / h)`, normalized over `j`, and
/// `CX = mean_j max_i CX_ij`. Returns the loss and, when asked, its
/// gradient with respect to `x`.
pub fn contextual_pair(x: &FeatureMap, y: &FeatureMap, want_grad: bool) -> Result<(f64, Option<FeatureMap>)> {
    if x.dim != y.dim || x.is_empty() || y.is_empty() {
        return Err(Error::invalid("contextual loss needs non-empty feature sets of equal dimension"));
    }
    let (dim, nx, ny) = (x.dim, x.len(), y.len());
    let mut mean = vec![0.0; dim];
    for row in y.data.chunks(dim) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= ny as f64;
    }
    let (xh, xn) = center_normalize(x, &mean);
    let (yh, _) = center_normalize(y, &mean);
    let h = CONTEXTUAL_BANDWIDTH;
    // Per row i: distances, argmin, row-normalized affinities.
    struct Row {
        d: Vec<f64>,
        kmin: usize,
        dmin: f64,
        cx: Vec<f64>,
    }
    let rows: Vec<Row> = (0..nx)
        .into_par_iter()
        .map(|i| {
            let xi = &xh[i * dim..(i + 1) * dim];
            let d: Vec<f64> = yh.chunks(dim).map(|yj| 1.0 - xi.iter().zip(yj).map(|(a, b)| a * b).sum::<f64>()).collect();
            let (kmin, dmin) = d.iter().enumerate().fold((0, f64::INFINITY), |acc, (k, &v)| if v < acc.1 { (k, v) } else { acc });
            let a: Vec<f64> = d.iter().map(|&dij| (1.0 - dij / (dmin + CX_EPS)) / h).collect();
            let amax = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = a.iter().map(|&v| (v - amax).exp()).collect();
            let s: f64 = e.iter().sum();
            Row { d, kmin, dmin, cx: e.into_iter().map(|v| v / s).collect() }
        })
        .collect();
    let mut best = vec![(0usize, f64::NEG_INFINITY); ny];
    for (i, r) in rows.iter().enumerate() {
        for (j, &c) in r.cx.iter().enumerate() {
            if c > best[j].1 {
                best[j] = (i, c);
            }
        }
    }
    let cx = best.iter().map(|b| b.1).sum::<f64>() / ny as f64;
    let loss = -cx.ln();
    if !want_grad {
        return Ok((loss, None));
    }
    // dL/dCX_{i*(j), j} = -1 / (cx ny).
    let gscale = -1.0 / (cx * ny as f64);
    let mut g_cx_rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); nx];
    for (j, &(i, _)) in best.iter().enumerate() {
        g_cx_rows[i].push((j, gscale));
    }
    let grads: Vec<Vec<f64>> = rows
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let mut gx = vec![0.0; dim];
            if g_cx_rows[i].is_empty() {
                return gx;
            }
            // Softmax backward over j.
            let dot: f64 = g_cx_rows[i].iter().map(|&(j, g)| g * r.cx[j]).sum();
            let mut g_a: Vec<f64> = r.cx.iter().map(|&c| -c * dot).collect();
            for &(j, g) in &g_cx_rows[i] {
                g_a[j] += g * r.cx[j];
            }
            let den = r.dmin + CX_EPS;
            let mut g_d: Vec<f64> = g_a.iter().map(|&ga| -ga / (h * den)).collect();
            let via_min: f64 = g_a.iter().zip(&r.d).map(|(&ga, &dij)| ga * dij / (h * den * den)).sum();
            g_d[r.kmin] += via_min;
            // d_ij = 1 - xh_i . yh_j
            let mut g_xh = vec![0.0; dim];
            for (j, &gd) in g_d.iter().enumerate() {
                if gd != 0.0 {
                    for (g, yv) in g_xh.iter_mut().zip(&yh[j * dim..(j + 1) * dim]) {
                        *g -= gd * yv;
                    }
                }
            }
            let xi = &xh[i * dim..(i + 1) * dim];
            let n = xn[i];
            // xh = x' / n with n = sqrt(|x'|^2 + eps): project out the radial part.
            let radial: f64 = xi.iter().zip(&g_xh).map(|(a, b)| a * b).sum();
            for k in 0..dim {
                gx[k] = (g_xh[k] - xi[k] * radial) / n;
            }
            gx
        })
        .collect();
    Ok((loss, Some(FeatureMap { dim, data: grads.concat() })))
}

fn check_targets(render: &Image, targets: &[Image]) -> Result<()> {
    if targets.is_empty() {
        return Err(Error::invalid("contextual loss needs at least one target"));
    }
    for t in targets {
        render.check_same_shape(t)?;
    }
    Ok(())
}

/// Contextual loss of `render` against the nearest of `targets`.
pub fn contextual_loss(render: &Image, targets: &[Image], fx: &dyn FeatureExtractor) -> Result<f64> {
    check_targets(render, targets)?;
    let xf = fx.features(render)?;
    let mut best = f64::INFINITY;
    for t in targets {
        best = best.min(contextual_pair(&xf, &fx.features(t)?, false)?.0);
    }
    Ok(best)
}

/// [`contextual_loss`] with its gradient with respect to `render`.
pub fn contextual_loss_grad(render: &Image, targets: &[Image], fx: &dyn FeatureExtractor) -> Result<(f64, Image)> {
    check_targets(render, targets)?;
    let xf = fx.features(render)?;
    let mut best: Option<(f64, FeatureMap)> = None;
    for t in targets {
        let yf = fx.features(t)?;
        let (l, _) = contextual_pair(&xf, &yf, false)?;
        if best.as_ref().is_none_or(|b| l < b.0) {
            let (l, g) = contextual_pair(&xf, &yf, true)?;
            best = Some((l, g.expect("requested")));
        }
    }
    let (loss, g) = best.expect("non-empty targets");
    Ok((loss, fx.backward(render, &g)?))
}
