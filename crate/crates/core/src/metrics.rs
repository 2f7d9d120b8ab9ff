//! Evaluation metrics: semantic similarity to the input view, pixel-level
//! contextual distance, volumetric and perceptual diversity, and an
//! aesthetic score. Learned components (embedder, perceptual metric,
//! aesthetic scorer) are traits; the bundled defaults are deterministic
//! desk-scale stand-ins.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Camera, CameraDefaults, VoxelRadianceField};
use crate::image::Image;
use crate::pipeline::{contextual_pair, FeatureExtractor};
use crate::render::{volume_render, RenderSettings};
use crate::rng::{normal, seeded};

/// Maps an image to a unit-norm feature vector.
pub trait Embedder: Sync {
    fn name(&self) -> String;
    fn embed(&self, img: &Image) -> Result<Vec<f64>>;
}

/// Non-negative, symmetric image distance with `dist(x, x) = 0`.
pub trait PerceptualMetric: Sync {
    fn name(&self) -> String;
    fn dist(&self, a: &Image, b: &Image) -> Result<f64>;
}

/// Scalar image quality predictor.
pub trait AestheticScorer: Sync {
    fn name(&self) -> String;
    fn score(&self, img: &Image) -> Result<f64>;
}

/// Fixed Gaussian random projection of the image resampled to
/// `grid x grid`, centred on mid-gray, with a bias feature so that no input
/// embeds to zero.
#[derive(Debug, Clone)]
pub struct RandomProjectionEmbedder {
    pub dim: usize,
    pub grid: usize,
    pub seed: u64,
    matrix: Vec<f64>,
}

impl RandomProjectionEmbedder {
    pub fn new(dim: usize, grid: usize, seed: u64) -> Result<Self> {
        if dim == 0 || grid == 0 {
            return Err(Error::invalid("embedder dim and grid must be >= 1"));
        }
        let inputs = grid * grid * 3 + 1;
        let mut rng = seeded(seed);
        let matrix = (0..dim * inputs).map(|_| normal(&mut rng)).collect();
        Ok(Self { dim, grid, seed, matrix })
    }
}

impl Default for RandomProjectionEmbedder {
    fn default() -> Self {
        Self::new(64, 16, 0).expect("valid defaults")
    }
}

impl Embedder for RandomProjectionEmbedder {
    fn name(&self) -> String {
        format!("random_projection(dim={}, grid={}, seed={})", self.dim, self.grid, self.seed)
    }

    fn embed(&self, img: &Image) -> Result<Vec<f64>> {
        if img.channels() != 3 {
            return Err(Error::invalid(format!("embedder expects RGB images, got {} channels", img.channels())));
        }
        let g = self.grid;
        let (sx, sy) = (img.width() as f64 / g as f64, img.height() as f64 / g as f64);
        let mut x = Vec::with_capacity(g * g * 3 + 1);
        for y in 0..g {
            for xx in 0..g {
                for c in 0..3 {
                    x.push(img.sample_bilinear((xx as f64 + 0.5) * sx, (y as f64 + 0.5) * sy, c) - 0.5);
                }
            }
        }
        x.push(1.0);
        let mut out: Vec<f64> =
            self.matrix.chunks_exact(x.len()).map(|row| row.iter().zip(&x).map(|(a, b)| a * b).sum()).collect();
        let n = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::Numeric(format!("embedding norm {n}")));
        }
        out.iter_mut().for_each(|v| *v /= n);
        Ok(out)
    }
}

/// Multi-scale patch statistics: at each of `scales` dyadic scales, the
/// per-channel mean and standard deviation over `window x window` windows
/// on a half-window lattice; the distance is the mean over scales of the
/// RMS difference of those statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchStatsMetric {
    pub scales: usize,
    pub window: usize,
}

impl Default for PatchStatsMetric {
    fn default() -> Self {
        Self { scales: 3, window: 4 }
    }
}

impl PatchStatsMetric {
    fn stats(&self, img: &Image) -> Vec<f64> {
        let win = self.window.min(img.width()).min(img.height()).max(1);
        let stride = (win / 2).max(1);
        let mut out = Vec::new();
        for y in (0..=img.height() - win).step_by(stride) {
            for x in (0..=img.width() - win).step_by(stride) {
                for c in 0..img.channels() {
                    let (mut s, mut s2) = (0.0, 0.0);
                    for yy in y..y + win {
                        for xx in x..x + win {
                            let v = img.get(xx, yy, c);
                            s += v;
                            s2 += v * v;
                        }
                    }
                    let n = (win * win) as f64;
                    let m = s / n;
                    out.push(m);
                    out.push((s2 / n - m * m).max(0.0).sqrt());
                }
            }
        }
        out
    }
}

impl PerceptualMetric for PatchStatsMetric {
    fn name(&self) -> String {
        format!("patch_stats(scales={}, window={})", self.scales, self.window)
    }

    fn dist(&self, a: &Image, b: &Image) -> Result<f64> {
        a.check_same_shape(b)?;
        if self.scales == 0 || self.window == 0 {
            return Err(Error::invalid("patch statistics need scales >= 1 and window >= 1"));
        }
        let (mut a, mut b) = (a.clone(), b.clone());
        let mut total = 0.0;
        for s in 0..self.scales {
            if s > 0 {
                a = a.downsample(2);
                b = b.downsample(2);
            }
            let (fa, fb) = (self.stats(&a), self.stats(&b));
            let mse = fa.iter().zip(&fb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / fa.len() as f64;
            total += mse.sqrt();
        }
        Ok(total / self.scales as f64)
    }
}

/// Cosine similarity, exactly 1 for identical non-zero vectors.
fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let aa: f64 = a.iter().map(|x| x * x).sum();
    let bb: f64 = b.iter().map(|x| x * x).sum();
    (dot / (aa * bb).sqrt()).clamp(-1.0, 1.0)
}

fn need(n: usize, min: usize, what: &str) -> Result<()> {
    if n < min {
        return Err(Error::invalid(format!("{what} needs at least {min} inputs, got {n}")));
    }
    Ok(())
}

/// Order-independent mean: values are sorted before summation so any
/// permutation of the inputs gives a bit-identical result.
fn sorted_mean(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

fn pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
}

fn mean_pairwise<T: Sync>(items: &[T], f: impl Fn(&T, &T) -> Result<f64> + Sync) -> Result<f64> {
    let d = pairs(items.len()).into_par_iter().map(|(i, j)| f(&items[i], &items[j])).collect::<Result<Vec<_>>>()?;
    Ok(sorted_mean(d))
}

/// Mean cosine similarity between the input view embedding and each model
/// view embedding.
pub fn clip_score(input_view: &Image, model_views: &[Image], embedder: &dyn Embedder) -> Result<f64> {
    need(model_views.len(), 1, "clip_score")?;
    let e = embedder.embed(input_view)?;
    let sims = model_views.iter().map(|v| Ok(cosine(&e, &embedder.embed(v)?))).collect::<Result<Vec<_>>>()?;
    Ok(sorted_mean(sims))
}

/// Mean contextual loss of each model view against the input view (the
/// input is the target). Directional: swapping the roles changes the value.
pub fn contextual_distance(input_view: &Image, model_views: &[Image], fx: &dyn FeatureExtractor) -> Result<f64> {
    need(model_views.len(), 1, "contextual_distance")?;
    let target = fx.features(input_view)?;
    let d = model_views
        .par_iter()
        .map(|v| {
            v.check_same_shape(input_view)?;
            Ok(contextual_pair(&fx.features(v)?, &target, false)?.0)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(sorted_mean(d))
}

/// Volumetric IoU of two fields' occupancies; `b` is resampled onto `a`'s
/// grid when they differ. Two empty occupancies have IoU 1.
pub fn volume_iou(a: &VoxelRadianceField, b: &VoxelRadianceField, iso: f64) -> Result<f64> {
    let resampled;
    let b = if !a.same_grid(b) {
        resampled = b.resample(a.resolution(), *a.bounds())?;
        &resampled
    } else {
        b
    };
    Ok(crate::render::mask_iou(&a.occupancy(iso), &b.occupancy(iso)))
}

/// Mean over unordered model pairs of 1 - IoU of thresholded occupancy.
pub fn visual_diversity(models: &[VoxelRadianceField], iso: f64) -> Result<f64> {
    need(models.len(), 2, "visual_diversity")?;
    mean_pairwise(models, |a, b| Ok(1.0 - volume_iou(a, b, iso)?))
}

/// `n` cameras evenly spaced in azimuth at a fixed elevation.
pub fn evaluation_cameras(n: usize, elevation: f64, defaults: &CameraDefaults) -> Result<Vec<Camera>> {
    (0..n).map(|i| Camera::with_defaults(elevation, 360.0 * i as f64 / n as f64, defaults)).collect()
}

/// Per camera, the mean pairwise perceptual distance between the models'
/// encoded normal maps.
pub fn geometry_diversity_per_camera(
    models: &[VoxelRadianceField],
    cameras: &[Camera],
    settings: &RenderSettings,
    metric: &dyn PerceptualMetric,
) -> Result<Vec<f64>> {
    need(models.len(), 2, "geometry_diversity")?;
    need(cameras.len(), 1, "geometry_diversity cameras")?;
    cameras
        .iter()
        .map(|cam| {
            let maps = models
                .par_iter()
                .map(|m| Ok(volume_render(m, cam, settings)?.normal.encode_normals()))
                .collect::<Result<Vec<_>>>()?;
            mean_pairwise(&maps, |a, b| metric.dist(a, b))
        })
        .collect()
}

/// [`geometry_diversity_per_camera`] averaged over cameras.
pub fn geometry_diversity(
    models: &[VoxelRadianceField],
    cameras: &[Camera],
    settings: &RenderSettings,
    metric: &dyn PerceptualMetric,
) -> Result<f64> {
    Ok(sorted_mean(geometry_diversity_per_camera(models, cameras, settings, metric)?))
}

/// Mean pairwise perceptual distance between images.
pub fn concept_diversity(images: &[Image], metric: &dyn PerceptualMetric) -> Result<f64> {
    need(images.len(), 2, "concept_diversity")?;
    mean_pairwise(images, |a, b| metric.dist(a, b))
}

/// Mean scorer output; an explicit error when no scorer is configured.
pub fn aesthetic_score(images: &[Image], scorer: Option<&dyn AestheticScorer>) -> Result<f64> {
    let scorer = scorer.ok_or_else(|| Error::Unavailable("aesthetic_score: no aesthetic scorer configured".into()))?;
    need(images.len(), 1, "aesthetic_score")?;
    let s = images.iter().map(|i| scorer.score(i)).collect::<Result<Vec<_>>>()?;
    Ok(sorted_mean(s))
}

/// Report labels of the two diversity metrics: 1-IoU first, perceptual
/// normal-map distance second, optionally swapped.
pub fn diversity_labels(swap: bool) -> (&'static str, &'static str) {
    if swap {
        ("geometry_diversity", "visual_diversity")
    } else {
        ("visual_diversity", "geometry_diversity")
    }
}

/// Metric settings of an evaluation run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Occupancy threshold on density for 1-IoU.
    pub iso: f64,
    /// Evaluation cameras for per-view metrics.
    pub cameras: usize,
    pub elevation: f64,
    pub embed_dim: usize,
    pub embed_grid: usize,
    pub embed_seed: u64,
    pub perceptual: PatchStatsMetric,
    /// Swaps the 1-IoU and perceptual diversity labels in reports.
    pub swap_diversity_labels: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            iso: 0.5 * crate::geometry::DEFAULT_SIGMA_OCC,
            cameras: 8,
            elevation: 20.0,
            embed_dim: 64,
            embed_grid: 16,
            embed_seed: 0,
            perceptual: PatchStatsMetric::default(),
            swap_diversity_labels: false,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, why: &str| Err(Error::Config(format!("metrics.{k}: {why}")));
        if !(self.iso >= 0.0 && self.iso.is_finite()) {
            return bad("iso", "must be finite and >= 0");
        }
        if self.cameras == 0 {
            return bad("cameras", "must be >= 1");
        }
        if self.embed_dim == 0 || self.embed_grid == 0 {
            return bad("embed_dim", "embedder dim and grid must be >= 1");
        }
        if self.perceptual.scales == 0 || self.perceptual.window == 0 {
            return bad("perceptual", "scales and window must be >= 1");
        }
        Ok(())
    }

    pub fn embedder(&self) -> Result<RandomProjectionEmbedder> {
        RandomProjectionEmbedder::new(self.embed_dim, self.embed_grid, self.embed_seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Aabb;
    use crate::math::Vec3;

    fn noisy(seed: u64, w: usize) -> Image {
        let mut r = seeded(seed);
        Image::from_fn(w, w, 3, |_, _, _| 0.5 + 0.2 * normal(&mut r))
    }

    #[test]
    fn perceptual_metric_is_a_symmetric_semi_metric() {
        let m = PatchStatsMetric::default();
        let (a, b) = (noisy(1, 16), noisy(2, 16));
        assert_eq!(m.dist(&a, &a).unwrap(), 0.0);
        assert_eq!(m.dist(&a, &b).unwrap(), m.dist(&b, &a).unwrap());
        assert!(m.dist(&a, &b).unwrap() > 0.0);
        assert!(m.dist(&a, &noisy(1, 8)).is_err());
    }

    #[test]
    fn embeddings_are_unit_norm_and_self_similar() {
        let e = RandomProjectionEmbedder::default();
        for img in [noisy(3, 16), Image::filled(16, 16, 3, 0.5), noisy(4, 40)] {
            let v = e.embed(&img).unwrap();
            assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(clip_score(&img, std::slice::from_ref(&img), &e).unwrap(), 1.0);
        }
    }

    #[test]
    fn aesthetic_score_requires_a_scorer() {
        struct Const(f64);
        impl AestheticScorer for Const {
            fn name(&self) -> String {
                "const".into()
            }
            fn score(&self, _: &Image) -> Result<f64> {
                Ok(self.0)
            }
        }
        let imgs = vec![noisy(1, 4), noisy(2, 4)];
        assert_eq!(aesthetic_score(&imgs, Some(&Const(0.75))).unwrap(), 0.75);
        assert!(matches!(aesthetic_score(&imgs, None), Err(Error::Unavailable(_))));
    }

    #[test]
    fn visual_diversity_extremes() {
        let b = Aabb::unit();
        let left = VoxelRadianceField::solid_sphere(16, b, Vec3::new(-0.5, 0.0, 0.0), 0.3, 40.0, [1.0; 3]).unwrap();
        let right = VoxelRadianceField::solid_sphere(16, b, Vec3::new(0.5, 0.0, 0.0), 0.3, 40.0, [1.0; 3]).unwrap();
        assert_eq!(visual_diversity(&[left.clone(), left.clone()], 20.0).unwrap(), 0.0);
        assert_eq!(visual_diversity(&[left.clone(), right.clone()], 20.0).unwrap(), 1.0);
        assert!(visual_diversity(&[left], 20.0).is_err());
    }

    #[test]
    fn too_few_inputs_are_rejected() {
        let m = PatchStatsMetric::default();
        assert!(concept_diversity(&[noisy(1, 8)], &m).is_err());
        assert!(clip_score(&noisy(1, 8), &[], &RandomProjectionEmbedder::default()).is_err());
    }
}
