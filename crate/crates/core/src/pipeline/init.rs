use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::geometry::{voxelize_mesh_in, Aabb, Camera, TriangleMesh, VoxelRadianceField, DEFAULT_SIGMA_OCC};
use crate::image::Image;

/// Turns a concept image into an initial radiance field.
pub trait Initializer {
    fn name(&self) -> String;
    fn initialize(&self, concept: &Image, mask: &Image, camera: &Camera, resolution: usize) -> Result<VoxelRadianceField>;
}

/// Single-view visual hull. Every voxel projecting inside the mask is
/// occupied within a depth slab centred on the camera target whose
/// half-thickness inflates the silhouette: at a pixel with distance `d` to
/// the background and maximal distance `D`, the half-depth is
/// `sqrt(d (2D - d))`, exact for a sphere seen as a disc. Density ramps up
/// over the outermost voxel inside the mask so interpolation does not grow the silhouette.
/// Colours are
/// back-projected from the concept image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisualHull {
    pub sigma_occ: f64,
    /// Half side of the cubic bounds around the camera target.
    pub bounds_half: f64,
}

impl Default for VisualHull {
    fn default() -> Self {
        Self { sigma_occ: DEFAULT_SIGMA_OCC, bounds_half: 1.0 }
    }
}

/// Distance in pixels from each foreground pixel centre to the boundary of
/// the background set; infinite when there is no background.
fn inside_distance(mask: &[bool], w: usize, h: usize) -> Vec<f64> {
    let bg: Vec<(f64, f64)> = (0..w * h).filter(|&i| !mask[i]).map(|i| ((i % w) as f64, (i / w) as f64)).collect();
    (0..w * h)
        .map(|i| {
            if !mask[i] {
                return 0.0;
            }
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            let m = bg.iter().map(|&(bx, by)| (bx - x).powi(2) + (by - y).powi(2)).fold(f64::INFINITY, f64::min);
            m.sqrt() - 0.5
        })
        .collect()
}

impl Initializer for VisualHull {
    fn name(&self) -> String {
        "visual_hull".into()
    }

    fn initialize(&self, concept: &Image, mask: &Image, camera: &Camera, resolution: usize) -> Result<VoxelRadianceField> {
        let (w, h) = (mask.width(), mask.height());
        let inside: Vec<bool> = mask.data().iter().map(|&a| a > 0.5).collect();
        let dist = inside_distance(&inside, w, h);
        let dmax = dist.iter().copied().fold(0.0, f64::max);
        let px = camera.pixel_size_at_target();
        let half_depth: Vec<f64> = dist
            .iter()
            .map(|&d| if d.is_infinite() { f64::INFINITY } else { (d * (2.0 * dmax - d)).max(0.0).sqrt() * px })
            .collect();
        let bounds = Aabb::cube(camera.target, self.bounds_half)?;
        let target_depth = camera.radius;
        let mut field = VoxelRadianceField::filled(resolution, bounds, 0.0, [0.5; 3])?;
        let vox = field.voxel_size().x;
        for z in 0..resolution {
            for y in 0..resolution {
                for x in 0..resolution {
                    let p = field.voxel_center(x, y, z);
                    let Some((u, v, depth)) = camera.project(p) else { continue };
                    if !(u >= 0.0 && v >= 0.0 && u < w as f64 && v < h as f64) {
                        continue;
                    }
                    let pi = (u as usize) + w * (v as usize);
                    let i = field.index(x, y, z);
                    for c in 0..3 {
                        field.color[3 * i + c] = concept.sample_bilinear(u, v, c).clamp(0.0, 1.0);
                    }
                    if !inside[pi] {
                        continue;
                    }
                    let cover = (0.5 + (half_depth[pi] - (depth - target_depth).abs()) / vox).clamp(0.0, 1.0);
                    let lateral = (dist[pi] * px / vox - 0.5).clamp(0.0, 1.0);
                    field.density[i] = self.sigma_occ * cover * lateral;
                }
            }
        }
        Ok(field)
    }
}

/// Ingests an externally produced initial model: an OBJ mesh (voxelized
/// into the hull bounds) or a grid container (resampled into them).
#[derive(Debug, Clone, PartialEq)]
pub struct FileInitializer {
    pub path: PathBuf,
    pub sigma_occ: f64,
    pub bounds_half: f64,
}

impl Initializer for FileInitializer {
    fn name(&self) -> String {
        format!("file:{}", self.path.display())
    }

    fn initialize(&self, _concept: &Image, _mask: &Image, camera: &Camera, resolution: usize) -> Result<VoxelRadianceField> {
        let bounds = Aabb::cube(camera.target, self.bounds_half)?;
        let is_obj = self.path.extension().is_some_and(|e| e.eq_ignore_ascii_case("obj"));
        if is_obj {
            let mesh = TriangleMesh::load_obj(&self.path)?;
            voxelize_mesh_in(&mesh, resolution, bounds, self.sigma_occ)
        } else {
            VoxelRadianceField::load(&self.path)?.resample(resolution, bounds)
        }
    }
}

/// Alpha mask of the pixels whose colour departs from `background` by more
/// than `threshold` in any channel.
pub fn foreground_mask(image: &Image, background: [f64; 3], threshold: f64) -> Image {
    Image::from_fn(image.width(), image.height(), 1, |x, y, _| {
        let p = image.pixel(x, y);
        let dev = (0..3).map(|c| (p[c] - background[c]).abs()).fold(0.0, f64::max);
        if dev > threshold {
            1.0
        } else {
            0.0
        }
    })
}

/// Builds the initial field from a concept image and its mask.
pub fn init_model(
    concept: &Image,
    mask: &Image,
    camera: &Camera,
    resolution: usize,
    initializer: &dyn Initializer,
) -> Result<VoxelRadianceField> {
    if mask.channels() != 1 || (mask.width(), mask.height()) != (concept.width(), concept.height()) {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}x1 mask aligned with the concept image", concept.width(), concept.height()),
            got: format!("{}x{}x{}", mask.width(), mask.height(), mask.channels()),
        });
    }
    if (camera.width, camera.height) != (concept.width(), concept.height()) {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{} camera", concept.width(), concept.height()),
            got: format!("{}x{}", camera.width, camera.height),
        });
    }
    if !mask.data().iter().any(|&a| a > 0.5) {
        return Err(Error::invalid("concept mask is empty"));
    }
    if resolution < 2 {
        return Err(Error::invalid(format!("field resolution must be >= 2, got {resolution}")));
    }
    let field = initializer.initialize(concept, mask, camera, resolution)?;
    if field.resolution() != resolution {
        return Err(Error::ShapeMismatch {
            expected: format!("resolution {resolution} from initializer {}", initializer.name()),
            got: format!("{}", field.resolution()),
        });
    }
    field.validate()?;
    Ok(field)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CameraDefaults;
    use crate::render::{mask_iou, volume_render, RenderSettings};

    fn cam() -> Camera {
        Camera::with_defaults(10.0, 30.0, &CameraDefaults { width: 32, height: 32, ..Default::default() }).unwrap()
    }

    fn disc_mask(r: f64) -> Image {
        Image::from_fn(32, 32, 1, |x, y, _| {
            let (dx, dy) = (x as f64 + 0.5 - 16.0, y as f64 + 0.5 - 16.0);
            if (dx * dx + dy * dy).sqrt() < r {
                1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn hull_is_silhouette_consistent() {
        let concept = Image::filled(32, 32, 3, 0.3);
        let mask = disc_mask(9.0);
        let f = init_model(&concept, &mask, &cam(), 32, &VisualHull::default()).unwrap();
        let view = volume_render(&f, &cam(), &RenderSettings::default()).unwrap();
        let m: Vec<bool> = mask.data().iter().map(|&a| a > 0.5).collect();
        let iou = mask_iou(&view.silhouette(), &m);
        assert!(iou >= 0.9, "{iou}");
        assert!((view.color.get(16, 16, 0) - 0.3).abs() < 0.02);
    }

    #[test]
    fn full_frame_mask_fills_the_frustum() {
        let concept = Image::filled(32, 32, 3, 0.3);
        let mask = Image::filled(32, 32, 1, 1.0);
        let c = cam();
        let f = init_model(&concept, &mask, &c, 16, &VisualHull::default()).unwrap();
        for i in 0..f.voxel_count() {
            let (x, y, z) = f.coords(i);
            let p = f.voxel_center(x, y, z);
            let (u, v, _) = c.project(p).unwrap();
            let visible = u >= 0.0 && v >= 0.0 && u < 32.0 && v < 32.0;
            assert_eq!(f.density[i] > 0.0, visible);
        }
    }

    #[test]
    fn empty_and_misaligned_masks_are_rejected() {
        let concept = Image::filled(32, 32, 3, 0.3);
        assert!(matches!(
            init_model(&concept, &Image::zeros(32, 32, 1), &cam(), 16, &VisualHull::default()),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            init_model(&concept, &Image::filled(16, 32, 1, 1.0), &cam(), 16, &VisualHull::default()),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn foreground_mask_thresholds_against_background() {
        let img = Image::from_fn(2, 1, 3, |x, _, _| if x == 0 { 1.0 } else { 0.5 });
        assert_eq!(foreground_mask(&img, [1.0; 3], 0.05).data(), &[0.0, 1.0]);
    }
}
