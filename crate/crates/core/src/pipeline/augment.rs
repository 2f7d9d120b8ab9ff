use rand::RngCore;

use crate::diffusion::{tag_camera, translate, Condition, PosedImage, PriorHandle};
use crate::error::{Error, Result};
use crate::geometry::{Camera, VoxelRadianceField};
use crate::image::Image;
use crate::render::{volume_render, RenderSettings, RenderedView};

/// Image-to-image operator turning renders of the initial model into
/// pseudo multi-view images.
pub trait ViewAugmenter: Sync {
    fn name(&self) -> String;
    fn augment(&self, theme: &PriorHandle, view: &RenderedView, cond: &Condition, rng: &mut dyn RngCore) -> Result<Image>;
}

/// Translation by partial diffusion: noise to `strength * T`, then denoise
/// with the theme prior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartialDiffusion {
    pub strength: f64,
    pub guidance_scale: f64,
    pub steps: usize,
}

impl ViewAugmenter for PartialDiffusion {
    fn name(&self) -> String {
        format!("partial_diffusion(strength={})", self.strength)
    }

    fn augment(&self, theme: &PriorHandle, view: &RenderedView, cond: &Condition, rng: &mut dyn RngCore) -> Result<Image> {
        let mut rng = rng;
        let cond = tag_camera(&theme.backend, *cond, &view.camera);
        Ok(translate(theme, &view.color, self.strength, &cond, self.guidance_scale, self.steps, &mut rng)?.clamp(0.0, 1.0))
    }
}

/// `n` cameras at the elevation of `concept_camera`, evenly spaced in
/// azimuth starting at the concept view.
pub fn augment_cameras(concept_camera: &Camera, n: usize) -> Vec<Camera> {
    (0..n)
        .map(|i| Camera { azimuth: (concept_camera.azimuth + 360.0 * i as f64 / n as f64) % 360.0, ..*concept_camera })
        .collect()
}

/// Renders `n` views of the initial field around the concept camera and
/// augments each with `augmenter` under the prompt `cond`.
#[allow(clippy::too_many_arguments)]
pub fn augment_views(
    init_field: &VoxelRadianceField,
    theme: &PriorHandle,
    n: usize,
    augmenter: &dyn ViewAugmenter,
    cond: &Condition,
    concept_camera: &Camera,
    settings: &RenderSettings,
    rng: &mut dyn RngCore,
) -> Result<Vec<PosedImage>> {
    if n == 0 {
        return Err(Error::invalid("augmentation needs at least one view"));
    }
    augment_cameras(concept_camera, n)
        .into_iter()
        .map(|cam| {
            let view = volume_render(init_field, &cam, settings)?;
            let image = augmenter.augment(theme, &view, cond, rng)?;
            Ok(PosedImage { image, camera: cam })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{
        analytic_gaussian_backend, make_schedule, DenoiserBackend, Modality, PriorRole, STYLE_THEME,
    };
    use crate::geometry::{Aabb, CameraDefaults};
    use crate::math::Vec3;
    use crate::rng::seeded;

    #[test]
    fn weak_strength_is_a_no_op() {
        let s = make_schedule(1000, 1e-4, 2e-2).unwrap();
        let theme = PriorHandle::new(
            DenoiserBackend::Analytic(analytic_gaussian_backend(Image::filled(8, 8, 3, 0.5), 0.05, s).unwrap()),
            PriorRole::Theme,
            vec![],
        );
        let f = VoxelRadianceField::solid_sphere(16, Aabb::unit(), Vec3::ZERO, 0.5, 40.0, [0.8, 0.3, 0.2]).unwrap();
        let cam = Camera::with_defaults(0.0, 0.0, &CameraDefaults { width: 8, height: 8, ..Default::default() }).unwrap();
        let settings = RenderSettings::default();
        let cond = Condition::new(0, STYLE_THEME, Modality::Color);
        let aug = PartialDiffusion { strength: 1e-4, guidance_scale: 7.5, steps: 50 };
        let out = augment_views(&f, &theme, 4, &aug, &cond, &cam, &settings, &mut seeded(0)).unwrap();
        assert_eq!(out.len(), 4);
        for p in &out {
            let raw = volume_render(&f, &p.camera, &settings).unwrap().color;
            let rms = p.image.rms_diff(&raw).unwrap() / (raw.data().iter().map(|v| v * v).sum::<f64>() / raw.len() as f64).sqrt();
            assert!(rms < 0.01, "{rms}");
        }
        assert_eq!(out[0].camera.azimuth, 0.0);
        assert_eq!(out[1].camera.azimuth, 90.0);
    }
}
