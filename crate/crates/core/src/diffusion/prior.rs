use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::image::Image;
use crate::render::RenderedView;

use super::backend::{DenoiserBackend, TuneParams};
use super::condition::{Condition, Modality};
use super::schedule::DiffusionSchedule;
use super::toy::{ToyConfig, ToyDenoiser};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorRole {
    Theme,
    Concept,
    Reference,
}

impl PriorRole {
    pub fn name(self) -> &'static str {
        match self {
            PriorRole::Theme => "theme",
            PriorRole::Concept => "concept",
            PriorRole::Reference => "reference",
        }
    }
}

/// A tuned denoiser together with the prompts it was tuned on.
#[derive(Debug, Clone)]
pub struct PriorHandle {
    pub backend: DenoiserBackend,
    pub role: PriorRole,
    /// The prompt templates (without camera) used during tuning.
    pub vocab: Vec<Condition>,
}

impl PriorHandle {
    pub fn new(backend: DenoiserBackend, role: PriorRole, vocab: Vec<Condition>) -> Self {
        Self { backend, role, vocab }
    }

    pub fn expect_role(&self, role: PriorRole) -> Result<()> {
        if self.role != role {
            return Err(Error::invalid(format!("expected a {} prior, got a {} prior", role.name(), self.role.name())));
        }
        Ok(())
    }
}

/// An image tagged with the camera it was rendered from or conditioned on.
#[derive(Debug, Clone, PartialEq)]
pub struct PosedImage {
    pub image: Image,
    pub camera: Camera,
}

fn check_shapes(backend: &DenoiserBackend, images: &[&Image]) -> Result<()> {
    let (w, h, c) = backend.image_shape();
    for img in images {
        if (img.width(), img.height(), img.channels()) != (w, h, c) {
            return Err(Error::ShapeMismatch {
                expected: format!("{w}x{h}x{c} (backend image shape)"),
                got: format!("{}x{}x{}", img.width(), img.height(), img.channels()),
            });
        }
    }
    Ok(())
}

/// Attaches the camera embedding unless the backend is known to ignore it.
pub fn tag_camera(backend: &DenoiserBackend, cond: Condition, camera: &Camera) -> Condition {
    if backend.camera_conditioned() || matches!(backend.base(), DenoiserBackend::Analytic(_)) {
        cond.with_camera(camera)
    } else {
        cond
    }
}

/// Stage I tuning: colour renders of the exemplars under one shared theme
/// prompt plus each view's camera embedding.
pub fn finetune_theme(
    base: &DenoiserBackend,
    views: &[RenderedView],
    prompt: Condition,
    params: &TuneParams,
    rng: &mut impl Rng,
) -> Result<PriorHandle> {
    if views.is_empty() {
        return Err(Error::invalid("theme tuning needs at least one exemplar view"));
    }
    let prompt = prompt.without_camera().with_modality(Modality::Color);
    check_shapes(base, &views.iter().map(|v| &v.color).collect::<Vec<_>>())?;
    let data: Vec<(Image, Condition)> =
        views.iter().map(|v| (v.color.clone(), tag_camera(base, prompt, &v.camera))).collect();
    let backend = base.finetune(&data, params, rng)?;
    Ok(PriorHandle::new(backend, PriorRole::Theme, vec![prompt]))
}

/// Concept prior: the concept image plus the augmented renders of the
/// initial model, all under the concept identifier prompt.
pub fn finetune_concept(
    base: &DenoiserBackend,
    concept: &PosedImage,
    augmented: &[PosedImage],
    prompt: Condition,
    params: &TuneParams,
    rng: &mut impl Rng,
) -> Result<PriorHandle> {
    if augmented.is_empty() {
        return Err(Error::invalid("concept tuning needs at least one augmented view"));
    }
    let prompt = prompt.without_camera().with_modality(Modality::Color);
    let mut images = vec![&concept.image];
    images.extend(augmented.iter().map(|p| &p.image));
    check_shapes(base, &images)?;
    let data: Vec<(Image, Condition)> = std::iter::once(concept)
        .chain(augmented)
        .map(|p| (p.image.clone(), tag_camera(base, prompt, &p.camera)))
        .collect();
    let backend = base.finetune(&data, params, rng)?;
    Ok(PriorHandle::new(backend, PriorRole::Concept, vec![prompt]))
}

/// Reference prior: exemplar colour renders under `prompts.0` and encoded
/// normal maps under `prompts.1`, tuned jointly into one backend.
pub fn finetune_reference(
    base: &DenoiserBackend,
    color_views: &[PosedImage],
    normal_views: &[PosedImage],
    prompts: (Condition, Condition),
    params: &TuneParams,
    rng: &mut impl Rng,
) -> Result<PriorHandle> {
    if color_views.is_empty() || normal_views.is_empty() {
        return Err(Error::invalid("reference tuning needs both colour and normal views"));
    }
    let (yx, yn) = (prompts.0.without_camera(), prompts.1.without_camera());
    if yx.modality == yn.modality {
        return Err(Error::invalid("colour and normal prompts must carry distinct modality tokens"));
    }
    let images: Vec<&Image> = color_views.iter().chain(normal_views).map(|p| &p.image).collect();
    check_shapes(base, &images)?;
    let data: Vec<(Image, Condition)> = color_views
        .iter()
        .map(|p| (p.image.clone(), tag_camera(base, yx, &p.camera)))
        .chain(normal_views.iter().map(|p| (p.image.clone(), tag_camera(base, yn, &p.camera))))
        .collect();
    let backend = base.finetune(&data, params, rng)?;
    Ok(PriorHandle::new(backend, PriorRole::Reference, vec![yx, yn]))
}

/// Trains a fresh toy denoiser on `dataset` with the epsilon-matching
/// objective; the returned backend carries the loss curve.
pub fn train_toy_denoiser(
    dataset: &[(Image, Condition)],
    schedule: &DiffusionSchedule,
    config: ToyConfig,
    steps: usize,
    lr: f64,
    rng: &mut impl Rng,
) -> Result<DenoiserBackend> {
    let Some((first, _)) = dataset.first() else {
        return Err(Error::invalid("training set is empty"));
    };
    let mut toy = ToyDenoiser::new(first.width(), first.height(), first.channels(), config, schedule.clone(), rng)?;
    toy.train(dataset, steps, config.batch, lr, rng)?;
    Ok(DenoiserBackend::Toy(toy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::analytic::analytic_gaussian_backend;
    use crate::diffusion::condition::{STYLE_CONCEPT, STYLE_THEME};
    use crate::diffusion::schedule::make_schedule;
    use crate::geometry::CameraDefaults;
    use crate::rng::seeded;

    fn cam(az: f64) -> Camera {
        Camera::with_defaults(0.0, az, &CameraDefaults { width: 4, height: 4, ..Default::default() }).unwrap()
    }

    #[test]
    fn empty_inputs_and_token_collisions_are_rejected() {
        let s = make_schedule(10, 1e-3, 0.05).unwrap();
        let base = DenoiserBackend::Analytic(analytic_gaussian_backend(Image::filled(4, 4, 3, 0.5), 0.1, s).unwrap());
        let p = TuneParams { iters: 1, batch: 1, lr: 1.0, lr_multiplier: 1.0 };
        let mut rng = seeded(0);
        let prompt = Condition::new(0, STYLE_THEME, Modality::Color);
        assert!(finetune_theme(&base, &[], prompt, &p, &mut rng).is_err());
        let img = PosedImage { image: Image::filled(4, 4, 3, 0.2), camera: cam(0.0) };
        let c = Condition::new(0, STYLE_CONCEPT, Modality::Color);
        assert!(finetune_concept(&base, &img, &[], c, &p, &mut rng).is_err());
        let views = vec![img.clone()];
        assert!(matches!(
            finetune_reference(&base, &views, &views, (c, c), &p, &mut rng),
            Err(Error::InvalidInput(_))
        ));
        assert!(finetune_reference(&base, &views, &[], (c, c.with_modality(Modality::Normal)), &p, &mut rng).is_err());
        let wrong = PosedImage { image: Image::filled(5, 4, 3, 0.2), camera: cam(0.0) };
        assert!(matches!(
            finetune_concept(&base, &wrong, &views, c, &p, &mut rng),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn reference_prior_routes_by_modality() {
        let s = make_schedule(100, 1e-3, 0.05).unwrap();
        let base = DenoiserBackend::Analytic(analytic_gaussian_backend(Image::filled(4, 4, 3, 0.5), 0.01, s).unwrap());
        let color: Vec<PosedImage> =
            (0..3).map(|i| PosedImage { image: Image::filled(4, 4, 3, 0.9), camera: cam(120.0 * i as f64) }).collect();
        let normal: Vec<PosedImage> =
            (0..3).map(|i| PosedImage { image: Image::filled(4, 4, 3, 0.1), camera: cam(120.0 * i as f64) }).collect();
        let yx = Condition::new(1, 0, Modality::Color);
        let p = TuneParams { iters: 1, batch: 1, lr: 1.0, lr_multiplier: 1.0 };
        let h = finetune_reference(&base, &color, &normal, (yx, yx.with_modality(Modality::Normal)), &p, &mut seeded(1))
            .unwrap();
        assert_eq!(h.role, PriorRole::Reference);
        let mut rng = seeded(2);
        let eps = crate::rng::normal_image(&mut rng, 4, 4, 3);
        let t = 30;
        let xt = crate::diffusion::schedule::add_noise(&normal[0].image, t, &eps, h.backend.schedule()).unwrap();
        let loss = |m: Modality| {
            let c = yx.with_modality(m).with_camera(&cam(0.0));
            h.backend.predict(&xt, t, &c).unwrap().rms_diff(&eps).unwrap()
        };
        assert!(loss(Modality::Normal) < loss(Modality::Color));
    }
}
