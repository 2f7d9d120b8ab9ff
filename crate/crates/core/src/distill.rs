//! Score-distillation gradient estimators and the noise-level scheduler
//! behind dual score distillation.
//!
//! Every estimator renders the field, perturbs the render to a timestep,
//! queries a denoiser, and back-propagates a weighted noise residual through
//! the renderer only; the denoiser is a constant in the backward pass.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    add_noise, cfg_predict, tag_camera, Condition, DenoiserBackend, DenoisingExample, DiffusionSchedule, Modality,
    PriorHandle, PriorRole,
};
use crate::error::{Error, Result};
use crate::geometry::{Camera, FieldGrad, VoxelRadianceField};
use crate::image::Image;
use crate::render::{volume_render, volume_render_backward, RenderSettings, RenderedView, ViewGrad};
use crate::rng::normal_image;

/// Closed interval `[lo, hi]` of timesteps as fractions of `T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimestepBand {
    pub lo: f64,
    pub hi: f64,
}

impl TimestepBand {
    pub const FULL: TimestepBand = TimestepBand { lo: 0.0, hi: 1.0 };

    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        let b = Self { lo, hi };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.lo && self.lo < self.hi && self.hi <= 1.0) {
            return Err(Error::Config(format!("timestep band needs 0 <= lo < hi <= 1, got [{}, {}]", self.lo, self.hi)));
        }
        Ok(())
    }

    /// Integer timesteps `ceil(lo T) ..= floor(hi T)`, capped at `T - 1`.
    pub fn integer_range(&self, steps: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let lo = (self.lo * steps as f64).ceil() as usize;
        let hi = ((self.hi * steps as f64).floor() as usize).min(steps - 1);
        if lo > hi {
            return Err(Error::Config(format!("timestep band [{}, {}] holds no integer step of T = {steps}", self.lo, self.hi)));
        }
        Ok((lo, hi))
    }

    /// Uniform integer draw from [`Self::integer_range`].
    pub fn sample(&self, steps: usize, rng: &mut impl Rng) -> Result<usize> {
        let (lo, hi) = self.integer_range(steps)?;
        Ok(rng.random_range(lo..=hi))
    }

    /// True when the open interiors intersect.
    pub fn overlaps(&self, other: &TimestepBand) -> bool {
        self.lo < other.hi && other.lo < self.hi
    }

    pub fn contains_step(&self, t: usize, steps: usize) -> bool {
        let x = t as f64;
        x >= self.lo * steps as f64 && x <= self.hi * steps as f64
    }
}

impl fmt::Display for TimestepBand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.lo, self.hi)
    }
}

/// The timestep weighting `w(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `1 - alpha_bar_t`.
    OneMinusAlphaBar,
    /// `1`.
    Constant,
}

impl Weighting {
    pub fn weight(self, schedule: &DiffusionSchedule, t: usize) -> f64 {
        match self {
            Weighting::OneMinusAlphaBar => 1.0 - schedule.alpha_bar(t),
            Weighting::Constant => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillationConfig {
    /// Weight of the concept term.
    pub alpha: f64,
    /// Weight of the reference term.
    pub beta: f64,
    /// Band the concept prior draws from.
    pub band_h: TimestepBand,
    /// Band the reference prior draws from.
    pub band_l: TimestepBand,
    pub weighting: Weighting,
    pub guidance_scale: f64,
    pub mc_samples: usize,
    /// Permit overlapping bands (ablations only).
    pub allow_band_overlap: bool,
    /// Include the normal-map term of the reference prior.
    pub normal_term: bool,
}

impl Default for DistillationConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            beta: 1.0,
            band_h: TimestepBand { lo: 0.5, hi: 0.75 },
            band_l: TimestepBand { lo: 0.1, hi: 0.25 },
            weighting: Weighting::OneMinusAlphaBar,
            guidance_scale: 7.5,
            mc_samples: 1,
            allow_band_overlap: false,
            normal_term: true,
        }
    }
}

impl DistillationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha.is_finite() && self.beta.is_finite()) {
            return Err(Error::Config(format!("alpha and beta must be finite and >= 0, got {} and {}", self.alpha, self.beta)));
        }
        self.band_h.validate()?;
        self.band_l.validate()?;
        if self.mc_samples == 0 {
            return Err(Error::Config("mc_samples must be >= 1".into()));
        }
        if !self.guidance_scale.is_finite() {
            return Err(Error::Config("guidance_scale must be finite".into()));
        }
        if !self.allow_band_overlap && self.band_h.overlaps(&self.band_l) {
            return Err(Error::Config(format!(
                "concept band {} overlaps reference band {}; set allow_band_overlap for ablations",
                self.band_h, self.band_l
            )));
        }
        Ok(())
    }
}

/// The five prior/noise-level arrangements compared in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Concept prior over all noise levels, no reference prior.
    Baseline,
    /// Both priors over all noise levels.
    Naive,
    /// Concept prior at high noise, reference prior at low noise.
    Dsd,
    /// Concept prior at low noise, reference prior at high noise.
    Reverse,
    /// Concept prior at high noise, reference prior over all noise levels.
    RefDominated,
}

impl AblationMode {
    pub const ALL: [AblationMode; 5] =
        [AblationMode::Baseline, AblationMode::Naive, AblationMode::Dsd, AblationMode::Reverse, AblationMode::RefDominated];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Baseline => "baseline",
            AblationMode::Naive => "naive",
            AblationMode::Dsd => "dsd",
            AblationMode::Reverse => "reverse",
            AblationMode::RefDominated => "ref_dominated",
        }
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown ablation mode '{s}' (expected baseline, naive, dsd, reverse or ref_dominated)")))
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Rewrites the bands and weights of `config` for an ablation setting.
/// `Dsd` restores the default bands; the other modes are defined relative
/// to them.
pub fn ablation_mode(config: &DistillationConfig, mode: AblationMode) -> DistillationConfig {
    let d = DistillationConfig::default();
    let mut c = DistillationConfig { band_h: d.band_h, band_l: d.band_l, allow_band_overlap: false, ..*config };
    match mode {
        AblationMode::Baseline => {
            c.band_h = TimestepBand::FULL;
            c.beta = 0.0;
            c.allow_band_overlap = true;
        }
        AblationMode::Naive => {
            c.band_h = TimestepBand::FULL;
            c.band_l = TimestepBand::FULL;
            c.allow_band_overlap = true;
        }
        AblationMode::Dsd => {}
        AblationMode::Reverse => std::mem::swap(&mut c.band_h, &mut c.band_l),
        AblationMode::RefDominated => {
            c.band_l = TimestepBand::FULL;
            c.allow_band_overlap = true;
        }
    }
    c
}

/// One estimator term of one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermDiagnostic {
    pub role: PriorRole,
    pub modality: Modality,
    pub t: usize,
    pub band: Option<TimestepBand>,
    /// Norm of the field gradient of this term (before alpha / beta).
    pub grad_norm: f64,
    /// Norm of the weighted image-space residual.
    pub residual_norm: f64,
}

/// A field gradient with the draws that produced it.
#[derive(Debug, Clone)]
pub struct GradEstimate {
    pub grad: FieldGrad,
    pub diagnostics: Vec<TermDiagnostic>,
    /// Denoising examples on the current renders, for training an online
    /// adapter.
    pub adapter_examples: Vec<DenoisingExample>,
}

impl GradEstimate {
    pub fn total_norm(&self) -> f64 {
        self.grad.norm()
    }
}

/// Source of the variational `eps_lora` term.
#[derive(Debug, Clone, Copy)]
pub enum LoraTerm<'a> {
    /// Use the sampled noise itself, which reduces the estimate to SDS.
    SampledNoise,
    /// Query an adapted denoiser.
    Adapter(&'a DenoiserBackend),
    /// A given prediction; passing the sampled noise reproduces SDS.
    Fixed(&'a Image),
}

impl<'a> From<Option<&'a DenoiserBackend>> for LoraTerm<'a> {
    fn from(b: Option<&'a DenoiserBackend>) -> Self {
        b.map_or(LoraTerm::SampledNoise, LoraTerm::Adapter)
    }
}

fn modality_image(view: &RenderedView, modality: Modality) -> Image {
    match modality {
        Modality::Color => view.color.clone(),
        Modality::Normal => view.normal.encode_normals(),
    }
}

fn upstream(view: &RenderedView, modality: Modality, residual: Image) -> ViewGrad {
    let mut g = ViewGrad::zeros(view.camera.width, view.camera.height);
    match modality {
        Modality::Color => g.color = residual,
        // The encoded map is n * 0.5 + 0.5.
        Modality::Normal => g.normal = residual.scale(0.5),
    }
    g
}

fn check_render_shape(backend: &DenoiserBackend, camera: &Camera) -> Result<()> {
    let (w, h, c) = backend.image_shape();
    if (camera.width, camera.height, 3) != (w, h, c) {
        return Err(Error::ShapeMismatch {
            expected: format!("{w}x{h}x{c} renders for backend {}", backend.name()),
            got: format!("{}x{}x3", camera.width, camera.height),
        });
    }
    Ok(())
}

fn render_checked(field: &VoxelRadianceField, camera: &Camera, settings: &RenderSettings) -> Result<RenderedView> {
    let view = volume_render(field, camera, settings)?;
    if !view.all_finite() {
        return Err(Error::Numeric(format!(
            "non-finite render at elevation {} azimuth {}",
            camera.elevation, camera.azimuth
        )));
    }
    Ok(view)
}

/// Weighted residual `w(t) (eps_hat - eps_lora)` for one modality of a view.
#[allow(clippy::too_many_arguments)]
fn residual(
    view: &RenderedView,
    modality: Modality,
    backend: &DenoiserBackend,
    lora: LoraTerm<'_>,
    cond: &Condition,
    t: usize,
    eps: &Image,
    weighting: Weighting,
    guidance_scale: f64,
) -> Result<(Image, DenoisingExample)> {
    check_render_shape(backend, &view.camera)?;
    let sched = backend.schedule();
    sched.check_t(t)?;
    let x = modality_image(view, modality);
    let x_t = add_noise(&x, t, eps, sched)?;
    let cond = tag_camera(backend, cond.with_modality(modality), &view.camera);
    let eps_hat = cfg_predict(backend, &x_t, t, &cond, guidance_scale)?;
    let w = weighting.weight(sched, t);
    let r = match lora {
        LoraTerm::SampledNoise => eps_hat.zip_map(eps, |a, b| w * (a - b))?,
        LoraTerm::Adapter(ad) => {
            let lc = tag_camera(ad, cond, &view.camera);
            let e_lora = ad.predict(&x_t, t, &lc)?;
            eps_hat.zip_map(&e_lora, |a, b| w * (a - b))?
        }
        LoraTerm::Fixed(p) => eps_hat.zip_map(p, |a, b| w * (a - b))?,
    };
    if !r.all_finite() {
        return Err(Error::Numeric(format!("non-finite residual at t = {t} ({} prior)", backend.name())));
    }
    Ok((r, DenoisingExample { x_t, t, cond, eps: eps.clone() }))
}

#[allow(clippy::too_many_arguments)]
fn term(
    field: &VoxelRadianceField,
    view: &RenderedView,
    settings: &RenderSettings,
    modality: Modality,
    backend: &DenoiserBackend,
    lora: LoraTerm<'_>,
    cond: &Condition,
    t: usize,
    eps: &Image,
    weighting: Weighting,
    guidance_scale: f64,
) -> Result<(FieldGrad, f64, DenoisingExample)> {
    let (r, ex) = residual(view, modality, backend, lora, cond, t, eps, weighting, guidance_scale)?;
    let rn = r.l2_norm();
    let g = volume_render_backward(field, &view.camera, settings, &upstream(view, modality, r))?;
    if !g.all_finite() {
        return Err(Error::Numeric(format!("non-finite gradient at t = {t}")));
    }
    Ok((g, rn, ex))
}

/// Score distillation: `w(t) (eps_hat(x_t; y, t) - eps) dx/dtheta` on the
/// render of `field` (the modality of `cond` selects colour or encoded
/// normals).
#[allow(clippy::too_many_arguments)]
pub fn sds_grad(
    field: &VoxelRadianceField,
    camera: &Camera,
    settings: &RenderSettings,
    backend: &DenoiserBackend,
    cond: &Condition,
    t: usize,
    eps: &Image,
    weighting: Weighting,
    guidance_scale: f64,
) -> Result<GradEstimate> {
    vsd_grad(field, camera, settings, backend, LoraTerm::SampledNoise, cond, t, eps, weighting, guidance_scale)
}

/// Variational score distillation: the residual is `eps_hat - eps_lora`.
/// The returned estimate carries the adapter's denoising example on the
/// current render.
#[allow(clippy::too_many_arguments)]
pub fn vsd_grad(
    field: &VoxelRadianceField,
    camera: &Camera,
    settings: &RenderSettings,
    backend: &DenoiserBackend,
    lora: LoraTerm<'_>,
    cond: &Condition,
    t: usize,
    eps: &Image,
    weighting: Weighting,
    guidance_scale: f64,
) -> Result<GradEstimate> {
    check_render_shape(backend, camera)?;
    let view = render_checked(field, camera, settings)?;
    let (grad, rn, ex) = term(field, &view, settings, cond.modality, backend, lora, cond, t, eps, weighting, guidance_scale)?;
    Ok(GradEstimate {
        diagnostics: vec![TermDiagnostic {
            role: PriorRole::Concept,
            modality: cond.modality,
            t,
            band: None,
            grad_norm: grad.norm(),
            residual_norm: rn,
        }],
        grad,
        adapter_examples: vec![ex],
    })
}

fn mean_of(mut parts: Vec<FieldGrad>) -> FieldGrad {
    let k = parts.len();
    let mut acc = parts.remove(0);
    for p in &parts {
        acc.add_scaled(p, 1.0);
    }
    if k > 1 {
        acc = acc.scaled(1.0 / k as f64);
    }
    acc
}

#[allow(clippy::too_many_arguments)]
fn concept_on_view(
    field: &VoxelRadianceField,
    view: &RenderedView,
    settings: &RenderSettings,
    concept: &PriorHandle,
    lora: LoraTerm<'_>,
    cond_y: &Condition,
    config: &DistillationConfig,
    rng: &mut impl Rng,
) -> Result<GradEstimate> {
    concept.expect_role(PriorRole::Concept)?;
    let backend = &concept.backend;
    check_render_shape(backend, &view.camera)?;
    let steps = backend.schedule().len();
    config.band_h.integer_range(steps)?;
    let (w, h) = (view.camera.width, view.camera.height);
    let mut parts = Vec::with_capacity(config.mc_samples);
    let mut diagnostics = Vec::new();
    let mut examples = Vec::new();
    for _ in 0..config.mc_samples.max(1) {
        let t = config.band_h.sample(steps, rng)?;
        let eps = normal_image(rng, w, h, 3);
        let (g, rn, ex) =
            term(field, view, settings, Modality::Color, backend, lora, cond_y, t, &eps, config.weighting, config.guidance_scale)?;
        diagnostics.push(TermDiagnostic {
            role: PriorRole::Concept,
            modality: Modality::Color,
            t,
            band: Some(config.band_h),
            grad_norm: g.norm(),
            residual_norm: rn,
        });
        parts.push(g);
        examples.push(ex);
    }
    Ok(GradEstimate { grad: mean_of(parts), diagnostics, adapter_examples: examples })
}

#[allow(clippy::too_many_arguments)]
fn reference_on_view(
    field: &VoxelRadianceField,
    view: &RenderedView,
    settings: &RenderSettings,
    reference: &PriorHandle,
    lora: LoraTerm<'_>,
    cond_yx: &Condition,
    cond_yn: &Condition,
    config: &DistillationConfig,
    rng: &mut impl Rng,
) -> Result<GradEstimate> {
    reference.expect_role(PriorRole::Reference)?;
    if cond_yx.modality == cond_yn.modality {
        return Err(Error::invalid("reference prompts must carry distinct modality tokens"));
    }
    let backend = &reference.backend;
    check_render_shape(backend, &view.camera)?;
    let steps = backend.schedule().len();
    config.band_l.integer_range(steps)?;
    let (w, h) = (view.camera.width, view.camera.height);
    let mut parts = Vec::with_capacity(config.mc_samples);
    let mut diagnostics = Vec::new();
    let mut examples = Vec::new();
    for _ in 0..config.mc_samples.max(1) {
        let t = config.band_l.sample(steps, rng)?;
        let eps_x = normal_image(rng, w, h, 3);
        let eps_n = normal_image(rng, w, h, 3);
        let (gx, rx, ex) =
            term(field, view, settings, Modality::Color, backend, lora, cond_yx, t, &eps_x, config.weighting, config.guidance_scale)?;
        diagnostics.push(TermDiagnostic {
            role: PriorRole::Reference,
            modality: Modality::Color,
            t,
            band: Some(config.band_l),
            grad_norm: gx.norm(),
            residual_norm: rx,
        });
        examples.push(ex);
        let g = if config.normal_term {
            let (gn, rn, en) = term(
                field,
                view,
                settings,
                Modality::Normal,
                backend,
                lora,
                cond_yn,
                t,
                &eps_n,
                config.weighting,
                config.guidance_scale,
            )?;
            diagnostics.push(TermDiagnostic {
                role: PriorRole::Reference,
                modality: Modality::Normal,
                t,
                band: Some(config.band_l),
                grad_norm: gn.norm(),
                residual_norm: rn,
            });
            examples.push(en);
            gx.combine(1.0, &gn, 1.0)
        } else {
            gx
        };
        parts.push(g);
    }
    Ok(GradEstimate { grad: mean_of(parts), diagnostics, adapter_examples: examples })
}

/// Concept-prior term: timesteps from `band_h`, colour render, concept
/// prompt, variational residual.
#[allow(clippy::too_many_arguments)]
pub fn concept_grad(
    field: &VoxelRadianceField,
    camera: &Camera,
    settings: &RenderSettings,
    concept: &PriorHandle,
    lora: LoraTerm<'_>,
    cond_y: &Condition,
    config: &DistillationConfig,
    rng: &mut impl Rng,
) -> Result<GradEstimate> {
    check_render_shape(&concept.backend, camera)?;
    let view = render_checked(field, camera, settings)?;
    concept_on_view(field, &view, settings, concept, lora, cond_y, config, rng)
}

/// Reference-prior term: one timestep from `band_l` shared by a colour term
/// (prompt `cond_yx`) and a normal-map term (prompt `cond_yn`), summed.
#[allow(clippy::too_many_arguments)]
pub fn reference_grad(
    field: &VoxelRadianceField,
    camera: &Camera,
    settings: &RenderSettings,
    reference: &PriorHandle,
    lora: LoraTerm<'_>,
    cond_yx: &Condition,
    cond_yn: &Condition,
    config: &DistillationConfig,
    rng: &mut impl Rng,
) -> Result<GradEstimate> {
    check_render_shape(&reference.backend, camera)?;
    let view = render_checked(field, camera, settings)?;
    reference_on_view(field, &view, settings, reference, lora, cond_yx, cond_yn, config, rng)
}

/// The three prompts of a distillation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DsdPrompts {
    /// Concept identifier prompt.
    pub y: Condition,
    /// Reference colour prompt.
    pub yx: Condition,
    /// Reference normal-map prompt.
    pub yn: Condition,
}

/// `alpha * concept + beta * reference`. The concept term draws first, then
/// the reference term; a term whose weight is zero is skipped entirely.
#[allow(clippy::too_many_arguments)]
pub fn dsd_grad(
    field: &VoxelRadianceField,
    camera: &Camera,
    settings: &RenderSettings,
    concept: &PriorHandle,
    reference: &PriorHandle,
    lora: LoraTerm<'_>,
    prompts: &DsdPrompts,
    config: &DistillationConfig,
    rng: &mut impl Rng,
) -> Result<GradEstimate> {
    config.validate()?;
    let view = render_checked(field, camera, settings)?;
    dsd_grad_view(field, &view, settings, concept, reference, lora, prompts, config, rng)
}

/// [`dsd_grad`] on an existing render of `field` (whose camera is used), so
/// callers that also need the render for other losses render once.
#[allow(clippy::too_many_arguments)]
pub fn dsd_grad_view(
    field: &VoxelRadianceField,
    view: &RenderedView,
    settings: &RenderSettings,
    concept: &PriorHandle,
    reference: &PriorHandle,
    lora: LoraTerm<'_>,
    prompts: &DsdPrompts,
    config: &DistillationConfig,
    rng: &mut impl Rng,
) -> Result<GradEstimate> {
    config.validate()?;
    if !view.all_finite() {
        return Err(Error::Numeric("non-finite render passed to dsd".into()));
    }
    let c = if config.alpha != 0.0 {
        Some(concept_on_view(field, view, settings, concept, lora, &prompts.y, config, rng)?)
    } else {
        None
    };
    let r = if config.beta != 0.0 {
        Some(reference_on_view(field, view, settings, reference, lora, &prompts.yx, &prompts.yn, config, rng)?)
    } else {
        None
    };
    let (grad, diagnostics, adapter_examples) = match (c, r) {
        (Some(c), Some(r)) => (
            c.grad.combine(config.alpha, &r.grad, config.beta),
            [c.diagnostics, r.diagnostics].concat(),
            [c.adapter_examples, r.adapter_examples].concat(),
        ),
        (Some(c), None) => (c.grad.scaled(config.alpha), c.diagnostics, c.adapter_examples),
        (None, Some(r)) => (r.grad.scaled(config.beta), r.diagnostics, r.adapter_examples),
        (None, None) => (FieldGrad::zeros_like(field), Vec::new(), Vec::new()),
    };
    Ok(GradEstimate { grad, diagnostics, adapter_examples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{analytic_gaussian_backend, make_schedule, ScheduleConfig, STYLE_CONCEPT};
    use crate::geometry::{Aabb, CameraDefaults};
    use crate::rng::seeded;

    fn small_field() -> VoxelRadianceField {
        VoxelRadianceField::from_fn(4, Aabb::unit(), |p| (3.0 + p.x, [0.3, 0.4 + 0.1 * p.y, 0.5])).unwrap()
    }

    fn cam() -> Camera {
        Camera::with_defaults(15.0, 30.0, &CameraDefaults { width: 3, height: 3, radius: 3.0, fov: 40.0 }).unwrap()
    }

    fn settings() -> RenderSettings {
        RenderSettings { samples_per_ray: 24, ..Default::default() }
    }

    fn handle(role: PriorRole, mu: f64, sigma2: f64) -> PriorHandle {
        let s = ScheduleConfig::default().build().unwrap();
        PriorHandle::new(
            DenoiserBackend::Analytic(analytic_gaussian_backend(Image::filled(3, 3, 3, mu), sigma2, s).unwrap()),
            role,
            vec![],
        )
    }

    #[test]
    fn bands_integerize_and_detect_overlap() {
        let b = TimestepBand::new(0.5, 0.75).unwrap();
        assert_eq!(b.integer_range(1000).unwrap(), (500, 750));
        assert_eq!(TimestepBand::FULL.integer_range(1000).unwrap(), (0, 999));
        assert!(matches!(TimestepBand::new(0.501, 0.502).unwrap().integer_range(100), Err(Error::Config(_))));
        assert!(TimestepBand::new(0.3, 0.3).is_err());
        assert!(!b.overlaps(&TimestepBand { lo: 0.1, hi: 0.25 }));
        assert!(b.overlaps(&TimestepBand::FULL));
        let mut rng = seeded(1);
        for _ in 0..10_000 {
            let t = b.sample(1000, &mut rng).unwrap();
            assert!((500..=750).contains(&t));
        }
    }

    #[test]
    fn overlapping_bands_need_the_override() {
        let mut c = DistillationConfig { band_l: TimestepBand { lo: 0.4, hi: 0.6 }, ..Default::default() };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.allow_band_overlap = true;
        c.validate().unwrap();
    }

    #[test]
    fn ablation_modes() {
        let base = DistillationConfig::default();
        let d = ablation_mode(&base, AblationMode::Dsd);
        assert_eq!((d.band_h, d.band_l), (base.band_h, base.band_l));
        let b = ablation_mode(&base, AblationMode::Baseline);
        assert_eq!((b.beta, b.band_h), (0.0, TimestepBand::FULL));
        let r = ablation_mode(&base, AblationMode::Reverse);
        assert_eq!((r.band_h, r.band_l), (base.band_l, base.band_h));
        let n = ablation_mode(&base, AblationMode::Naive);
        assert_eq!((n.band_h, n.band_l), (TimestepBand::FULL, TimestepBand::FULL));
        let rd = ablation_mode(&base, AblationMode::RefDominated);
        assert_eq!((rd.band_h, rd.band_l), (base.band_h, TimestepBand::FULL));
        for m in AblationMode::ALL {
            ablation_mode(&base, m).validate().unwrap();
            assert_eq!(m.name().parse::<AblationMode>().unwrap(), m);
        }
        assert!(matches!("fancy".parse::<AblationMode>(), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn residual_free_prior_gives_zero_gradient() {
        // With sigma2 = 0 and the prior mean equal to the render, the
        // analytic prediction recovers the sampled noise exactly.
        let f = small_field();
        let view = volume_render(&f, &cam(), &settings()).unwrap();
        let s = make_schedule(1000, 1e-4, 2e-2).unwrap();
        let b = DenoiserBackend::Analytic(analytic_gaussian_backend(view.color.clone(), 0.0, s).unwrap());
        let eps = normal_image(&mut seeded(2), 3, 3, 3);
        let c = Condition::new(0, STYLE_CONCEPT, Modality::Color);
        let g = sds_grad(&f, &cam(), &settings(), &b, &c, 10, &eps, Weighting::Constant, 1.0).unwrap();
        assert!(g.grad.norm() < 1e-9, "{}", g.grad.norm());
    }

    #[test]
    fn role_and_shape_checks() {
        let f = small_field();
        let mut rng = seeded(0);
        let y = Condition::new(0, STYLE_CONCEPT, Modality::Color);
        let wrong = handle(PriorRole::Reference, 0.5, 0.1);
        let cfg = DistillationConfig::default();
        assert!(concept_grad(&f, &cam(), &settings(), &wrong, LoraTerm::SampledNoise, &y, &cfg, &mut rng).is_err());
        let big = cam().with_resolution(4, 4);
        let ok = handle(PriorRole::Concept, 0.5, 0.1);
        assert!(matches!(
            concept_grad(&f, &big, &settings(), &ok, LoraTerm::SampledNoise, &y, &cfg, &mut rng),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
