use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    finetune_theme, sample_image, tag_camera, Condition, DenoiserBackend, Modality, PosedImage, PriorHandle,
    TuneParams, ATTRIBUTE_NONE, DEFAULT_SAMPLING_STEPS, STYLE_THEME, SUBJECT_GENERIC,
};
use crate::error::{Error, Result};
use crate::geometry::{sample_camera, CameraDefaults, CameraMode, TriangleMesh};
use crate::render::{rasterize, RenderedView};

use super::ViewConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageIConfig {
    /// Renders per exemplar for theme tuning.
    pub views_per_exemplar: usize,
    /// Fixed exemplar elevation in degrees, 0 or 20.
    pub elevation: f64,
    /// Tuning iterations with a single exemplar.
    pub iters_single: usize,
    /// Tuning iterations with several exemplars.
    pub iters_group: usize,
    pub batch: usize,
    /// Nominal learning rate of a large pre-trained model.
    pub lr: f64,
    /// Factor applied to `lr` by the local backends.
    pub lr_multiplier: f64,
    pub cfg_scale: f64,
    pub n_concepts: usize,
    pub sampling_steps: usize,
    /// Subject token of the exemplars in the shared theme prompt.
    pub subject_token: u16,
    /// Subject token used when sampling concepts (defaults to
    /// `subject_token`); selects a different subject in the theme's style.
    pub sample_subject_token: Option<u16>,
    /// Attribute token used when sampling concepts.
    pub attribute_token: u16,
}

impl Default for StageIConfig {
    fn default() -> Self {
        Self {
            views_per_exemplar: 20,
            elevation: 0.0,
            iters_single: 200,
            iters_group: 400,
            batch: 8,
            lr: 2e-6,
            lr_multiplier: 100.0,
            cfg_scale: 7.5,
            n_concepts: 4,
            sampling_steps: DEFAULT_SAMPLING_STEPS,
            subject_token: SUBJECT_GENERIC,
            sample_subject_token: None,
            attribute_token: ATTRIBUTE_NONE,
        }
    }
}

impl StageIConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, why: &str| Err(Error::Config(format!("stage1.{k}: {why}")));
        if self.views_per_exemplar == 0 {
            return bad("views_per_exemplar", "must be >= 1");
        }
        if self.elevation != 0.0 && self.elevation != 20.0 {
            return bad("elevation", "must be 0 or 20");
        }
        if self.batch == 0 {
            return bad("batch", "must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if !(self.lr_multiplier > 0.0 && self.lr_multiplier.is_finite()) {
            return bad("lr_multiplier", "must be positive");
        }
        if !self.cfg_scale.is_finite() {
            return bad("cfg_scale", "must be finite");
        }
        if self.sampling_steps == 0 {
            return bad("sampling_steps", "must be >= 1");
        }
        Ok(())
    }

    /// Iteration count for a given number of exemplars.
    pub fn iters_for(&self, exemplars: usize) -> usize {
        if exemplars <= 1 {
            self.iters_single
        } else {
            self.iters_group
        }
    }

    pub fn tune_params(&self, exemplars: usize) -> TuneParams {
        TuneParams { iters: self.iters_for(exemplars), batch: self.batch, lr: self.lr, lr_multiplier: self.lr_multiplier }
    }
}

/// The shared theme prompt ("in the style of [V]") used for tuning.
pub fn theme_prompt(cfg: &StageIConfig) -> Condition {
    Condition::new(cfg.subject_token, STYLE_THEME, Modality::Color)
}

pub struct Stage1Output {
    pub theme: PriorHandle,
    pub exemplar_views: Vec<RenderedView>,
    /// Concept images with the camera each was conditioned on.
    pub concepts: Vec<PosedImage>,
    pub iters_used: usize,
}

/// Rasterizes `views` exemplar-style renders (fixed elevation, random
/// azimuth) of every mesh, mesh by mesh.
pub fn render_exemplar_views(
    exemplars: &[TriangleMesh],
    views: usize,
    elevation: f64,
    camera: &CameraDefaults,
    background: [f64; 3],
    rng: &mut impl Rng,
) -> Result<Vec<RenderedView>> {
    let mut out = Vec::with_capacity(exemplars.len() * views);
    for mesh in exemplars {
        for _ in 0..views {
            let cam = sample_camera(CameraMode::Exemplar, rng, elevation, camera)?;
            out.push(rasterize(mesh, &cam, background)?);
        }
    }
    Ok(out)
}

/// Draws one concept image from the theme prior at a random exemplar-style
/// camera, clipped to [0, 1].
pub fn sample_concept(
    theme: &PriorHandle,
    cfg: &StageIConfig,
    camera: &CameraDefaults,
    rng: &mut impl Rng,
) -> Result<PosedImage> {
    let cam = sample_camera(CameraMode::Exemplar, rng, cfg.elevation, camera)?;
    let cond = Condition::new(cfg.sample_subject_token.unwrap_or(cfg.subject_token), STYLE_THEME, Modality::Color)
        .with_attribute(cfg.attribute_token);
    let cond = tag_camera(&theme.backend, cond, &cam);
    let image = sample_image(theme, &cond, cfg.cfg_scale, cfg.sampling_steps, rng)?.clamp(0.0, 1.0);
    Ok(PosedImage { image, camera: cam })
}

pub(crate) fn check_backend_resolution(backend: &DenoiserBackend, camera: &CameraDefaults) -> Result<()> {
    let (w, h, c) = backend.image_shape();
    if (w, h, c) != (camera.width, camera.height, 3) {
        return Err(Error::ShapeMismatch {
            expected: format!("{w}x{h}x{c} renders for backend {}", backend.name()),
            got: format!("{}x{}x3 (camera resolution)", camera.width, camera.height),
        });
    }
    Ok(())
}

/// Renders the exemplars, tunes the theme prior on them under the shared
/// theme prompt, and samples `n_concepts` concept images.
pub fn stage1(
    exemplars: &[TriangleMesh],
    base: &DenoiserBackend,
    cfg: &StageIConfig,
    view: &ViewConfig,
    rng: &mut impl Rng,
) -> Result<Stage1Output> {
    cfg.validate()?;
    if exemplars.is_empty() {
        return Err(Error::invalid("stage 1 needs at least one exemplar"));
    }
    check_backend_resolution(base, &view.camera)?;
    let views = render_exemplar_views(
        exemplars,
        cfg.views_per_exemplar,
        cfg.elevation,
        &view.camera,
        view.render.background,
        rng,
    )?;
    let params = cfg.tune_params(exemplars.len());
    let theme = finetune_theme(base, &views, theme_prompt(cfg), &params, rng)?;
    let concepts =
        (0..cfg.n_concepts).map(|_| sample_concept(&theme, cfg, &view.camera, rng)).collect::<Result<Vec<_>>>()?;
    Ok(Stage1Output { theme, exemplar_views: views, concepts, iters_used: params.iters })
}
