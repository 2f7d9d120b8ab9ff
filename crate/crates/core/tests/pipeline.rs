use std::time::Instant;

use rand::Rng;
use themeforge::corpus::creature;
use themeforge::diffusion::{PosedImage, PriorHandle, PriorRole, ScheduleConfig};
use themeforge::distill::{dsd_grad, AblationMode, DistillationConfig, LoraTerm};
use themeforge::geometry::{sample_camera, Camera, CameraDefaults, CameraMode, TriangleMesh, VoxelRadianceField};
use themeforge::optim::Adam;
use themeforge::pipeline::*;
use themeforge::render::{rasterize, RenderSettings};
use themeforge::rng::seeded;
use themeforge::Image;

fn view(size: usize) -> ViewConfig {
    ViewConfig {
        camera: CameraDefaults { width: size, height: size, ..Default::default() },
        render: RenderSettings { samples_per_ray: 24, ..Default::default() },
    }
}

fn tiny_cfg() -> StageIIConfig {
    StageIIConfig {
        resolution: 12,
        aug_views: 4,
        aug_steps: 10,
        ref_color_views: 4,
        ref_normal_views: 4,
        concept_iters: 20,
        reference_iters: 20,
        total_steps: 6,
        checkpoint_every: 3,
        ..Default::default()
    }
}

struct Fixture {
    exemplars: Vec<TriangleMesh>,
    base: themeforge::diffusion::DenoiserBackend,
    concept: PosedImage,
    mask: Image,
    init: VoxelRadianceField,
    view: ViewConfig,
}

fn fixture(size: usize, resolution: usize) -> Fixture {
    let view = view(size);
    let exemplars = vec![creature([[0.85, 0.1, 0.1], [0.9, 0.3, 0.2]], "red")];
    let base = analytic_base(&PretrainConfig::default(), &view.camera).unwrap();
    let cam = Camera::with_defaults(0.0, 30.0, &view.camera).unwrap();
    let image = rasterize(&exemplars[0], &cam, view.render.background).unwrap().color;
    let mask = foreground_mask(&image, view.render.background, 0.05);
    let init = init_model(&image, &mask, &cam, resolution, &VisualHull::default()).unwrap();
    Fixture { exemplars, base, concept: PosedImage { image, camera: cam }, mask, init, view }
}

fn theme(f: &Fixture) -> PriorHandle {
    PriorHandle::new(f.base.clone(), PriorRole::Theme, vec![])
}

fn run(f: &Fixture, cfg: &StageIIConfig, seed: u64, out: Option<&std::path::Path>) -> (Stage2Setup, Stage2Output) {
    stage2(&f.concept, &f.mask, &f.exemplars, &f.base, &theme(f), &f.init, cfg, &f.view, &mut seeded(seed), out).unwrap()
}

#[test]
fn zero_steps_returns_the_initial_field() {
    let f = fixture(16, 12);
    let cfg = StageIIConfig { total_steps: 0, ..tiny_cfg() };
    let (_, out) = run(&f, &cfg, 1, None);
    assert_eq!(out.field, f.init);
    assert!(out.steps.is_empty() && out.losses.is_empty());
    assert_eq!(out.init_iou, out.final_iou);
}

#[test]
fn runs_are_deterministic_and_write_the_run_layout() {
    let f = fixture(16, 12);
    let dir = tempfile::tempdir().unwrap();
    let (_, a) = run(&f, &tiny_cfg(), 7, Some(dir.path()));
    let (_, b) = run(&f, &tiny_cfg(), 7, None);
    assert_eq!(a.field, b.field);
    assert_eq!(a.steps, b.steps);
    for p in ["steps.csv", "losses.csv", "priors/concept.ckpt", "priors/reference.ckpt", "augmented/view_00.png"] {
        assert!(dir.path().join(p).is_file(), "{p}");
    }
    for s in [0, 3, 6] {
        let p = dir.path().join(CHECKPOINT_DIR).join(format!("step_{s:06}.grid"));
        assert!(p.is_file(), "{}", p.display());
    }
    let last = VoxelRadianceField::load(dir.path().join("checkpoints/step_000006.grid")).unwrap();
    assert_eq!(last, a.field.quantized());
    let rows = std::fs::read_to_string(dir.path().join(STEPS_FILE)).unwrap();
    assert_eq!(rows.lines().count(), 1 + a.steps.len());
    write_final(dir.path(), &a.field, &f.view).unwrap();
    for p in ["final/field.grid", "final/model.obj", "final/turntable.png"] {
        assert!(dir.path().join(p).is_file(), "{p}");
    }
}

#[test]
fn every_step_logs_one_entry_per_prior_term_inside_its_band() {
    let f = fixture(16, 12);
    let cfg = StageIIConfig { total_steps: 20, ..tiny_cfg() };
    let (_, out) = run(&f, &cfg, 3, None);
    let d = cfg.distill;
    for step in 0..cfg.total_steps {
        let recs: Vec<_> = out.steps.iter().filter(|r| r.step == step).collect();
        assert_eq!(recs.len(), 3, "concept + reference colour + reference normal");
        for r in recs {
            let band = if r.prior == PriorRole::Concept { d.band_h } else { d.band_l };
            assert!(band.contains_step(r.t, 1000), "{r:?}");
        }
    }
}

#[test]
fn without_regularizers_and_reference_stage2_is_plain_concept_distillation() {
    let f = fixture(16, 12);
    let cfg = StageIIConfig {
        tv_weight: 0.0,
        ctx_weight: 0.0,
        lora_rank: 0,
        distill: DistillationConfig { beta: 0.0, ..Default::default() },
        total_steps: 5,
        ..tiny_cfg()
    };
    let mut rng = seeded(21);
    let mut setup = prepare_stage2(&f.concept, &f.init, &theme(&f), &f.exemplars, &f.base, &cfg, &f.view, &mut rng).unwrap();
    let mut manual_rng = rng.clone();
    let out = optimize(&mut setup, &f.init, &f.concept, &f.mask, &cfg, &f.view, &mut rng, None).unwrap();

    let mut field = f.init.clone();
    let mut opt = Adam::new(cfg.lr);
    for _ in 0..cfg.total_steps {
        let mut r = seeded(manual_rng.random());
        let cam = sample_camera(CameraMode::Optimization, &mut r, 0.0, &f.view.camera).unwrap();
        let est = dsd_grad(
            &field,
            &cam,
            &f.view.render,
            &setup.concept,
            &setup.reference,
            LoraTerm::SampledNoise,
            &setup.prompts,
            &cfg.distill,
            &mut r,
        )
        .unwrap();
        opt.step_scaled(
            &mut [&mut field.density, &mut field.color],
            &[&est.grad.density, &est.grad.color],
            &[cfg.density_lr_scale, 1.0],
        );
        field.project_to_valid();
    }
    assert_eq!(out.field, field);
}

#[test]
fn ablation_modes_log_only_the_priors_they_use() {
    let f = fixture(16, 12);
    for mode in [AblationMode::Baseline, AblationMode::Reverse] {
        let cfg = StageIIConfig { total_steps: 4, distill: themeforge::distill::ablation_mode(&Default::default(), mode), ..tiny_cfg() };
        let (_, out) = run(&f, &cfg, 5, None);
        let has_ref = out.steps.iter().any(|r| r.prior == PriorRole::Reference);
        assert_eq!(has_ref, mode != AblationMode::Baseline);
    }
}

#[test]
fn invalid_stage2_config_is_reported_with_its_key() {
    let cfg = StageIIConfig { aug_views: 0, ..Default::default() };
    let e = cfg.validate().unwrap_err().to_string();
    assert!(e.contains("stage2.aug_views"), "{e}");
    let cfg = StageIIConfig { distill: DistillationConfig { band_l: themeforge::distill::TimestepBand::new(0.4, 0.6).unwrap(), ..Default::default() }, ..Default::default() };
    assert!(cfg.validate().is_err());
}

#[test]
fn stage1_uses_the_single_exemplar_iteration_count() {
    let v = view(16);
    let base = analytic_base(&PretrainConfig { schedule: ScheduleConfig::default(), ..Default::default() }, &v.camera).unwrap();
    let ex = vec![creature([[0.1, 0.2, 0.85], [0.2, 0.3, 0.9]], "blue")];
    let cfg = StageIConfig { views_per_exemplar: 4, n_concepts: 2, sampling_steps: 10, ..Default::default() };
    let out = stage1(&ex, &base, &cfg, &v, &mut seeded(2)).unwrap();
    assert_eq!(out.iters_used, 200);
    assert_eq!(out.concepts.len(), 2);
    assert_eq!(out.exemplar_views.len(), 4);
    let none = stage1(&ex, &base, &StageIConfig { n_concepts: 0, ..cfg }, &v, &mut seeded(2)).unwrap();
    assert!(none.concepts.is_empty());
    let three = [ex[0].clone(), ex[0].clone(), ex[0].clone()];
    assert_eq!(StageIConfig::default().iters_for(three.len()), 400);
    assert!(stage1(&[], &base, &cfg, &v, &mut seeded(2)).is_err());
}

#[test]
fn smoke_run_keeps_the_concept_silhouette() {
    let f = fixture(32, 24);
    let s1 = StageIConfig { n_concepts: 0, ..Default::default() };
    let theme = stage1(&f.exemplars, &f.base, &s1, &f.view, &mut seeded(2)).unwrap().theme;
    let cfg = StageIIConfig { resolution: 24, total_steps: 100, ..tiny_cfg() };
    let t = Instant::now();
    let (_, out) =
        stage2(&f.concept, &f.mask, &f.exemplars, &f.base, &theme, &f.init, &cfg, &f.view, &mut seeded(11), None).unwrap();
    eprintln!("100 steps in {:?}: iou {:.3} -> {:.3}", t.elapsed(), out.init_iou, out.final_iou);
    assert!(out.final_iou >= out.init_iou);
}
