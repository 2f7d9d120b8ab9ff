use std::fs::File;
use std::path::Path;

use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    attach_lora, finetune_concept, finetune_reference, BackendKind, Condition, DenoiserBackend, Modality, PosedImage,
    PriorHandle, PriorRole, TuneParams, DEFAULT_SAMPLING_STEPS, STYLE_CONCEPT, STYLE_THEME, SUBJECT_GENERIC,
};
use crate::distill::{dsd_grad_view, DistillationConfig, DsdPrompts, GradEstimate, LoraTerm};
use crate::error::{Error, Result};
use crate::geometry::{
    export_mesh, sample_camera, Camera, CameraMode, TriangleMesh, VoxelRadianceField, DEFAULT_SIGMA_OCC,
};
use crate::image::Image;
use crate::optim::Adam;
use crate::render::{mask_iou, rasterize, volume_render, volume_render_backward, RenderSettings, ViewGrad};
use crate::rng::seeded;

use super::augment::{augment_views, PartialDiffusion};
use super::manifest::write_atomic;
use super::regularize::{contextual_loss_grad, tv_loss, PatchFeatures};
use super::stage1::check_backend_resolution;
use super::ViewConfig;

pub const STEPS_FILE: &str = "steps.csv";
pub const LOSSES_FILE: &str = "losses.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageIIConfig {
    /// Voxel resolution of the optimized field.
    pub resolution: usize,
    /// Half side of the cubic field bounds around the camera target.
    pub bounds_half: f64,
    /// Density of occupied voxels in the initial model.
    pub init_sigma: f64,
    /// Channel deviation from the background that marks concept foreground.
    pub mask_threshold: f64,
    pub aug_views: usize,
    pub aug_strength: f64,
    pub aug_steps: usize,
    pub ref_color_views: usize,
    pub ref_normal_views: usize,
    pub concept_iters: usize,
    pub reference_iters: usize,
    pub prior_batch: usize,
    /// Nominal prior learning rate of a large pre-trained model.
    pub prior_lr: f64,
    pub lr_multiplier: f64,
    pub subject_token: u16,
    pub total_steps: usize,
    pub distill: DistillationConfig,
    pub tv_weight: f64,
    pub ctx_weight: f64,
    pub contextual: PatchFeatures,
    /// Adam step size on the colour grid.
    pub lr: f64,
    /// Multiplier of `lr` on the density grid.
    pub density_lr_scale: f64,
    /// Cameras per optimization step.
    pub views_per_step: usize,
    /// Rank of the shared online adapter; 0 uses the sampled noise instead.
    pub lora_rank: usize,
    pub lora_lr: f64,
    pub checkpoint_every: usize,
}

impl Default for StageIIConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            bounds_half: 1.0,
            init_sigma: DEFAULT_SIGMA_OCC,
            mask_threshold: 0.05,
            aug_views: 20,
            aug_strength: 0.5,
            aug_steps: DEFAULT_SAMPLING_STEPS,
            ref_color_views: 30,
            ref_normal_views: 30,
            concept_iters: 400,
            reference_iters: 400,
            prior_batch: 8,
            prior_lr: 2e-6,
            lr_multiplier: 100.0,
            subject_token: SUBJECT_GENERIC,
            total_steps: 5000,
            distill: DistillationConfig::default(),
            tv_weight: 1e-3,
            ctx_weight: 1e-2,
            contextual: PatchFeatures::default(),
            lr: 1e-2,
            density_lr_scale: 0.3,
            views_per_step: 1,
            lora_rank: 4,
            lora_lr: 1e-3,
            checkpoint_every: 500,
        }
    }
}

impl StageIIConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, why: &str| Err(Error::Config(format!("stage2.{k}: {why}")));
        let pos = |v: f64| v > 0.0 && v.is_finite();
        let nonneg = |v: f64| v >= 0.0 && v.is_finite();
        if self.resolution < 2 {
            return bad("resolution", "must be >= 2");
        }
        if !pos(self.bounds_half) {
            return bad("bounds_half", "must be positive");
        }
        if !pos(self.init_sigma) {
            return bad("init_sigma", "must be positive");
        }
        if !(self.mask_threshold > 0.0 && self.mask_threshold < 1.0) {
            return bad("mask_threshold", "must lie in (0, 1)");
        }
        for (k, v) in [
            ("aug_views", self.aug_views),
            ("aug_steps", self.aug_steps),
            ("ref_color_views", self.ref_color_views),
            ("ref_normal_views", self.ref_normal_views),
            ("prior_batch", self.prior_batch),
            ("views_per_step", self.views_per_step),
            ("checkpoint_every", self.checkpoint_every),
        ] {
            if v == 0 {
                return bad(k, "must be >= 1");
            }
        }
        if !(self.aug_strength > 0.0 && self.aug_strength < 1.0) {
            return bad("aug_strength", "must lie in (0, 1)");
        }
        if !pos(self.prior_lr) || !pos(self.lr_multiplier) || !pos(self.lr) || !pos(self.density_lr_scale) {
            return bad("lr", "learning rates and multipliers must be positive");
        }
        if !nonneg(self.tv_weight) || !nonneg(self.ctx_weight) {
            return bad("tv_weight", "regularizer weights must be finite and >= 0");
        }
        if self.lora_rank > 0 && !pos(self.lora_lr) {
            return bad("lora_lr", "must be positive");
        }
        self.distill.validate().map_err(|e| Error::Config(format!("stage2.distill: {e}")))
    }

    fn tune(&self, iters: usize) -> TuneParams {
        TuneParams { iters, batch: self.prior_batch, lr: self.prior_lr, lr_multiplier: self.lr_multiplier }
    }
}

/// One estimator term of one optimization step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub prior: PriorRole,
    pub modality: Modality,
    pub t: usize,
    pub band_lo: f64,
    pub band_hi: f64,
    pub term_norm: f64,
    pub residual_norm: f64,
    pub total_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub grad_norm: f64,
    pub tv_loss: f64,
    pub ctx_loss: f64,
    pub lora_loss: f64,
}

/// The learned priors and guidance data of a Stage II run.
#[derive(Debug, Clone)]
pub struct Stage2Setup {
    pub concept: PriorHandle,
    pub reference: PriorHandle,
    pub augmented: Vec<PosedImage>,
    /// Shared online adapter on the base backend.
    pub lora: Option<DenoiserBackend>,
    pub prompts: DsdPrompts,
}

pub struct Stage2Output {
    pub field: VoxelRadianceField,
    pub steps: Vec<StepRecord>,
    pub losses: Vec<LossRecord>,
    pub init_iou: f64,
    pub final_iou: f64,
}

/// Binary silhouette IoU of the field's render from `camera` against `mask`.
pub fn silhouette_iou(field: &VoxelRadianceField, camera: &Camera, settings: &RenderSettings, mask: &Image) -> Result<f64> {
    let view = volume_render(field, camera, settings)?;
    let m: Vec<bool> = mask.data().iter().map(|&a| a > 0.5).collect();
    Ok(mask_iou(&view.silhouette(), &m))
}

/// The view whose camera azimuth is circularly closest to `camera`'s.
pub fn nearest_by_azimuth<'a>(views: &'a [PosedImage], camera: &Camera) -> Option<&'a PosedImage> {
    let gap = |a: f64| {
        let d = (a - camera.azimuth).rem_euclid(360.0);
        d.min(360.0 - d)
    };
    views.iter().fold(None, |best: Option<&PosedImage>, v| match best {
        Some(b) if gap(b.camera.azimuth) <= gap(v.camera.azimuth) => Some(b),
        _ => Some(v),
    })
}

/// Learns the concept prior (concept image plus augmented initial views)
/// and the reference prior (exemplar colour and normal renders), and
/// attaches the shared adapter.
#[allow(clippy::too_many_arguments)]
pub fn prepare_stage2(
    concept: &PosedImage,
    init_field: &VoxelRadianceField,
    augment_prior: &PriorHandle,
    exemplars: &[TriangleMesh],
    base: &DenoiserBackend,
    cfg: &StageIIConfig,
    view: &ViewConfig,
    rng: &mut impl Rng,
) -> Result<Stage2Setup> {
    cfg.validate()?;
    if exemplars.is_empty() {
        return Err(Error::invalid("stage 2 needs at least one exemplar"));
    }
    check_backend_resolution(base, &view.camera)?;
    let theme_cond = Condition::new(cfg.subject_token, STYLE_THEME, Modality::Color);
    let augmenter = PartialDiffusion { strength: cfg.aug_strength, guidance_scale: cfg.distill.guidance_scale, steps: cfg.aug_steps };
    let augmented = augment_views(
        init_field,
        augment_prior,
        cfg.aug_views,
        &augmenter,
        &theme_cond,
        &concept.camera,
        &view.render,
        rng as &mut dyn RngCore,
    )?;
    let y = Condition::new(cfg.subject_token, STYLE_CONCEPT, Modality::Color);
    let concept_prior = finetune_concept(base, concept, &augmented, y, &cfg.tune(cfg.concept_iters), rng)?;

    let n = cfg.ref_color_views.max(cfg.ref_normal_views);
    let mut color = Vec::with_capacity(cfg.ref_color_views);
    let mut normal = Vec::with_capacity(cfg.ref_normal_views);
    for k in 0..n {
        let elevation = if rng.random_bool(0.5) { 0.0 } else { 20.0 };
        let cam = sample_camera(CameraMode::Exemplar, rng, elevation, &view.camera)?;
        let v = rasterize(&exemplars[k % exemplars.len()], &cam, view.render.background)?;
        if k < cfg.ref_color_views {
            color.push(PosedImage { image: v.color.clone(), camera: cam });
        }
        if k < cfg.ref_normal_views {
            normal.push(PosedImage { image: v.normal.encode_normals(), camera: cam });
        }
    }
    let yx = Condition::new(cfg.subject_token, STYLE_THEME, Modality::Color);
    let yn = yx.with_modality(Modality::Normal);
    let reference = finetune_reference(base, &color, &normal, (yx, yn), &cfg.tune(cfg.reference_iters), rng)?;

    let lora = if cfg.lora_rank > 0 && base.kind() != BackendKind::External {
        Some(attach_lora(base.base(), cfg.lora_rank, rng)?)
    } else {
        None
    };
    Ok(Stage2Setup { concept: concept_prior, reference, augmented, lora, prompts: DsdPrompts { y, yx, yn } })
}

struct Sinks {
    steps: csv::Writer<File>,
    losses: csv::Writer<File>,
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::format("csv", format!("{other:?}")),
    }
}

fn open_sinks(dir: &Path) -> Result<Sinks> {
    std::fs::create_dir_all(dir.join(CHECKPOINT_DIR))?;
    Ok(Sinks {
        steps: csv::Writer::from_path(dir.join(STEPS_FILE)).map_err(csv_err)?,
        losses: csv::Writer::from_path(dir.join(LOSSES_FILE)).map_err(csv_err)?,
    })
}

fn checkpoint_path(dir: &Path, step: usize) -> std::path::PathBuf {
    dir.join(CHECKPOINT_DIR).join(format!("step_{step:06}.grid"))
}

/// Runs `cfg.total_steps` distillation steps from `init_field`: per camera
/// a DSD estimate plus the contextual-loss gradient against the nearest
/// augmented view, averaged over cameras, plus the TV gradient, then one
/// Adam update and one adapter update. With `out`, streams `steps.csv` and
/// `losses.csv` and writes atomic grid checkpoints; on failure the last
/// good checkpoint is written to `checkpoints/last_good.grid`.
#[allow(clippy::too_many_arguments)]
pub fn optimize(
    setup: &mut Stage2Setup,
    init_field: &VoxelRadianceField,
    concept: &PosedImage,
    mask: &Image,
    cfg: &StageIIConfig,
    view: &ViewConfig,
    rng: &mut impl Rng,
    out: Option<&Path>,
) -> Result<Stage2Output> {
    cfg.validate()?;
    let mut sinks = out.map(open_sinks).transpose()?;
    if let Some(dir) = out {
        init_field.save_atomic(checkpoint_path(dir, 0))?;
    }
    let init_iou = silhouette_iou(init_field, &concept.camera, &view.render, mask)?;
    let mut field = init_field.clone();
    let mut last_good = (0usize, init_field.clone());
    let mut steps = Vec::new();
    let mut losses = Vec::new();
    let mut opt = Adam::new(cfg.lr);
    let mut lora_opt = Adam::new(cfg.lora_lr);
    for step in 0..cfg.total_steps {
        let r = run_step(setup, &mut field, &mut opt, &mut lora_opt, cfg, view, step, rng);
        let (recs, loss) = match r {
            Ok(v) => v,
            Err(e) => {
                if let Some(dir) = out {
                    last_good.1.save_atomic(dir.join(CHECKPOINT_DIR).join("last_good.grid"))?;
                }
                return Err(match e {
                    Error::Numeric(m) => {
                        Error::Numeric(format!("step {step}: {m}; last good state is step {}", last_good.0))
                    }
                    other => other,
                });
            }
        };
        if let Some(s) = sinks.as_mut() {
            for rec in &recs {
                s.steps.serialize(rec).map_err(csv_err)?;
            }
            s.losses.serialize(&loss).map_err(csv_err)?;
        }
        steps.extend(recs);
        losses.push(loss);
        if (step + 1) % cfg.checkpoint_every == 0 {
            last_good = (step + 1, field.clone());
            if let Some(dir) = out {
                field.save_atomic(checkpoint_path(dir, step + 1))?;
            }
        }
    }
    if let Some(mut s) = sinks {
        s.steps.flush()?;
        s.losses.flush()?;
    }
    let final_iou = silhouette_iou(&field, &concept.camera, &view.render, mask)?;
    Ok(Stage2Output { field, steps, losses, init_iou, final_iou })
}

#[allow(clippy::too_many_arguments)]
fn run_step(
    setup: &mut Stage2Setup,
    field: &mut VoxelRadianceField,
    opt: &mut Adam,
    lora_opt: &mut Adam,
    cfg: &StageIIConfig,
    view: &ViewConfig,
    step: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<StepRecord>, LossRecord)> {
    let seeds: Vec<u64> = (0..cfg.views_per_step).map(|_| rng.random()).collect();
    let (w, h) = (view.camera.width, view.camera.height);
    let lora = LoraTerm::from(setup.lora.as_ref());
    let snapshot = &*field;
    let setup_ref = &*setup;
    let per_camera: Vec<Result<(GradEstimate, f64)>> = seeds
        .par_iter()
        .map(|&s| {
            let mut r = seeded(s);
            let cam = sample_camera(CameraMode::Optimization, &mut r, 0.0, &view.camera)?;
            let rv = volume_render(snapshot, &cam, &view.render)?;
            let mut est = dsd_grad_view(
                snapshot,
                &rv,
                &view.render,
                &setup_ref.concept,
                &setup_ref.reference,
                lora,
                &setup_ref.prompts,
                &cfg.distill,
                &mut r,
            )?;
            let mut ctx = 0.0;
            if cfg.ctx_weight != 0.0 {
                let target = nearest_by_azimuth(&setup_ref.augmented, &cam).expect("augmented views are non-empty");
                let (l, g) = contextual_loss_grad(&rv.color, std::slice::from_ref(&target.image), &cfg.contextual)?;
                let mut vg = ViewGrad::zeros(w, h);
                vg.color = g;
                let fg = volume_render_backward(snapshot, &cam, &view.render, &vg)?;
                est.grad.add_scaled(&fg, cfg.ctx_weight);
                ctx = l;
            }
            Ok((est, ctx))
        })
        .collect();
    let per_camera = per_camera.into_iter().collect::<Result<Vec<_>>>()?;
    let k = per_camera.len();
    let mut iter = per_camera.into_iter();
    let (first, mut ctx_sum) = iter.next().expect("views_per_step >= 1");
    let mut grad = first.grad;
    let mut diagnostics = first.diagnostics;
    let mut examples = first.adapter_examples;
    for (est, ctx) in iter {
        grad.add_scaled(&est.grad, 1.0);
        diagnostics.extend(est.diagnostics);
        examples.extend(est.adapter_examples);
        ctx_sum += ctx;
    }
    if k > 1 {
        grad = grad.scaled(1.0 / k as f64);
    }
    let mut tv = 0.0;
    if cfg.tv_weight != 0.0 {
        let (l, g) = tv_loss(field);
        grad.add_scaled(&g, cfg.tv_weight);
        tv = l;
    }
    if !grad.all_finite() {
        return Err(Error::Numeric("non-finite field gradient".into()));
    }
    opt.step_scaled(
        &mut [&mut field.density, &mut field.color],
        &[&grad.density, &grad.color],
        &[cfg.density_lr_scale, 1.0],
    );
    if !field.all_finite() {
        return Err(Error::Numeric("non-finite field after update".into()));
    }
    field.project_to_valid();
    let mut lora_loss = f64::NAN;
    if let Some(ad) = setup.lora.as_mut() {
        if !examples.is_empty() {
            lora_loss = ad.adapter_step(lora_opt, &examples)?;
        }
    }
    let total_norm = grad.norm();
    let recs = diagnostics
        .into_iter()
        .map(|d| StepRecord {
            step,
            prior: d.role,
            modality: d.modality,
            t: d.t,
            band_lo: d.band.map_or(0.0, |b| b.lo),
            band_hi: d.band.map_or(1.0, |b| b.hi),
            term_norm: d.grad_norm,
            residual_norm: d.residual_norm,
            total_norm,
        })
        .collect();
    Ok((recs, LossRecord { step, grad_norm: total_norm, tv_loss: tv, ctx_loss: ctx_sum / k as f64, lora_loss }))
}

/// Full Stage II: priors, then optimization. With `out`, also writes the
/// prior checkpoints and augmented views.
#[allow(clippy::too_many_arguments)]
pub fn stage2(
    concept: &PosedImage,
    mask: &Image,
    exemplars: &[TriangleMesh],
    base: &DenoiserBackend,
    augment_prior: &PriorHandle,
    init_field: &VoxelRadianceField,
    cfg: &StageIIConfig,
    view: &ViewConfig,
    rng: &mut impl Rng,
    out: Option<&Path>,
) -> Result<(Stage2Setup, Stage2Output)> {
    let mut setup = prepare_stage2(concept, init_field, augment_prior, exemplars, base, cfg, view, rng)?;
    if let Some(dir) = out {
        let priors = dir.join("priors");
        std::fs::create_dir_all(&priors)?;
        for (name, h) in [("concept", &setup.concept), ("reference", &setup.reference)] {
            if h.backend.kind() != BackendKind::External {
                write_atomic(priors.join(format!("{name}.ckpt")), &h.backend.to_checkpoint()?)?;
            }
        }
        let aug = dir.join("augmented");
        std::fs::create_dir_all(&aug)?;
        for (i, p) in setup.augmented.iter().enumerate() {
            p.image.save_png(aug.join(format!("view_{i:02}.png")))?;
        }
    }
    let output = optimize(&mut setup, init_field, concept, mask, cfg, view, rng, out)?;
    Ok((setup, output))
}

/// Horizontal strip of `n` volume renders at elevation 20 around the field.
pub fn turntable(field: &VoxelRadianceField, view: &ViewConfig, n: usize) -> Result<Image> {
    let (w, h) = (view.camera.width, view.camera.height);
    let frames = (0..n)
        .map(|i| {
            let cam = Camera::with_defaults(20.0, 360.0 * i as f64 / n as f64, &view.camera)?;
            Ok(volume_render(field, &cam, &view.render)?.color)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Image::from_fn(w * n, h, 3, |x, y, c| frames[x / w].get(x % w, y, c).clamp(0.0, 1.0)))
}

/// Writes `final/field.grid`, `final/model.obj` (isosurface at half the
/// occupied density, empty when nothing crosses it) and
/// `final/turntable.png`.
pub fn write_final(dir: &Path, field: &VoxelRadianceField, view: &ViewConfig) -> Result<()> {
    let fin = dir.join("final");
    std::fs::create_dir_all(&fin)?;
    field.save_atomic(fin.join("field.grid"))?;
    let mesh = match export_mesh(field, 0.5 * DEFAULT_SIGMA_OCC) {
        Ok(m) => m,
        Err(Error::EmptyMesh(_)) => TriangleMesh { vertices: vec![], faces: vec![], vertex_colors: vec![], subject_name: "empty".into() },
        Err(e) => return Err(e),
    };
    write_atomic(fin.join("model.obj"), mesh.to_obj_string().as_bytes())?;
    turntable(field, view, 8)?.save_png(fin.join("turntable.png"))?;
    Ok(())
}
