use std::path::{Path, PathBuf};

use themeforge::diffusion::{BackendKind, DenoiserBackend, PosedImage, PriorHandle, PriorRole};
use themeforge::distill::{ablation_mode, AblationMode};
use themeforge::geometry::{Camera, TriangleMesh};
use themeforge::pipeline::{
    foreground_mask, init_model, render_exemplar_views, stage1, stage2, theme_prompt, write_final, FileInitializer,
    RunManifest, RunStatus, Stage1Output, Stage2Output, StepRecord, VisualHull,
};
use themeforge::rng::derive;
use themeforge::Image;

use crate::args::{ConceptArgs, ExemplarArgs, Stage2Args, TokenArgs};
use crate::backend::build_base;
use crate::config::ProjectConfig;
use crate::error::{CliError, CliResult};
use crate::run::{collect_objs, hash_file, input_key, load_exemplars, recorded_exemplars, verify_input, Run};

use super::evaluate::{band_plots, fidelity, UNAVAILABLE_QUALITY};

/// Random stream of Stage I within a run's master seed.
const STAGE1_STREAM: u64 = 1;
/// Stage II of concept `k` uses stream `STAGE2_STREAM + k`, so a standalone
/// Stage II run on concept `k` draws the same numbers as inside `generate`.
const STAGE2_STREAM: u64 = 100;

pub const CONCEPTS_DIR: &str = "concepts";
pub const CONCEPTS_INDEX: &str = "concepts/concepts.csv";
pub const THEME_CKPT: &str = "priors/theme.ckpt";

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct ConceptRow {
    index: usize,
    file: String,
    elevation: f64,
    azimuth: f64,
}

#[derive(Debug, serde::Serialize)]
struct ViewRow {
    mesh: String,
    view: usize,
    elevation: f64,
    azimuth: f64,
    radius: f64,
    fov: f64,
    width: usize,
    height: usize,
    color: String,
    normal: String,
    mask: String,
}

fn csv_error(e: csv::Error) -> CliError {
    CliError::runtime(format!("csv: {e}"))
}

fn save_png(img: &Image, dir: &Path, rel: &str) -> CliResult<()> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    img.save_png(&path).map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}

pub fn render_exemplars(cfg: &ProjectConfig, out: &Path, args: &[String], input: &Path) -> CliResult<()> {
    if !input.is_dir() {
        return Err(CliError::validation(format!("--input {} is not a directory", input.display())));
    }
    let files = collect_objs(&[input.to_path_buf()])?;
    if files.is_empty() {
        return Err(CliError::validation(format!("no OBJ files in {} (0 inputs)", input.display())));
    }
    let mut run = Run::create(out, "render-exemplars", cfg, args)?;
    run.execute(|run| {
        let mut index = csv::Writer::from_path(run.dir.join("views.csv")).map_err(csv_error)?;
        let mut failures = Vec::new();
        for (i, file) in files.iter().enumerate() {
            let mesh = match TriangleMesh::load_obj(file).and_then(|m| m.ensure_nondegenerate().map(|_| m)) {
                Ok(m) => m,
                Err(e) => {
                    log::error!("{}: {e}", file.display());
                    failures.push(format!("{}: {e}", file.display()));
                    continue;
                }
            };
            run.input(input_key("exemplar", file), hash_file(file)?);
            let stem = file.file_stem().map_or_else(|| format!("mesh_{i}"), |s| s.to_string_lossy().into_owned());
            // One stream per input position, so a failing file does not
            // shift the cameras of the others.
            let mut rng = derive(cfg.seed, i as u64 + 1);
            let views = render_exemplar_views(
                std::slice::from_ref(&mesh),
                cfg.stage1.views_per_exemplar,
                cfg.stage1.elevation,
                &cfg.view.camera,
                cfg.view.render.background,
                &mut rng,
            )?;
            for (j, v) in views.iter().enumerate() {
                let row = ViewRow {
                    mesh: stem.clone(),
                    view: j,
                    elevation: v.camera.elevation,
                    azimuth: v.camera.azimuth,
                    radius: v.camera.radius,
                    fov: v.camera.fov,
                    width: v.camera.width,
                    height: v.camera.height,
                    color: format!("{stem}/color_{j:02}.png"),
                    normal: format!("{stem}/normal_{j:02}.png"),
                    mask: format!("{stem}/mask_{j:02}.png"),
                };
                save_png(&v.color, &run.dir, &row.color)?;
                save_png(&v.normal.encode_normals(), &run.dir, &row.normal)?;
                save_png(&v.mask, &run.dir, &row.mask)?;
                index.serialize(&row).map_err(csv_error)?;
            }
            run.artifact(format!("views:{stem}"), stem);
        }
        index.flush()?;
        run.artifact("index", "views.csv");
        if !failures.is_empty() {
            std::fs::write(run.dir.join("failures.txt"), failures.join("\n") + "\n")?;
            run.artifact("failures", "failures.txt");
        }
        if failures.len() == files.len() {
            return Err(CliError::validation(format!("all {} inputs failed: {}", files.len(), failures.join("; "))));
        }
        Ok(())
    })
}

fn apply_stage1_overrides(cfg: &mut ProjectConfig, tokens: &TokenArgs, n_concepts: Option<usize>) {
    if let Some(n) = n_concepts {
        cfg.stage1.n_concepts = n;
    }
    if let Some(s) = tokens.subject_token {
        cfg.stage1.sample_subject_token = Some(s);
    }
    if let Some(a) = tokens.attribute_token {
        cfg.stage1.attribute_token = a;
    }
}

fn apply_stage2_overrides(cfg: &mut ProjectConfig, opts: &Stage2Args) {
    if let Some(s) = opts.steps {
        cfg.stage2.total_steps = s;
    }
}

fn record_backend(run: &mut Run, role: &str, b: &DenoiserBackend) {
    run.manifest.backends.insert(role.into(), b.name());
}

fn run_stage1(run: &mut Run, cfg: &ProjectConfig, meshes: &[TriangleMesh], base: &DenoiserBackend) -> CliResult<Stage1Output> {
    run.manifest.seeds.insert("stage1_stream".into(), STAGE1_STREAM);
    let mut rng = derive(cfg.seed, STAGE1_STREAM);
    log::info!("stage 1: tuning the theme prior on {} exemplar(s)", meshes.len());
    let out = stage1(meshes, base, &cfg.stage1, &cfg.view, &mut rng)?;
    run.metric("theme_iterations", out.iters_used as f64);
    std::fs::create_dir_all(run.dir.join(CONCEPTS_DIR))?;
    let mut index = csv::Writer::from_path(run.dir.join(CONCEPTS_INDEX)).map_err(csv_error)?;
    for (k, c) in out.concepts.iter().enumerate() {
        let file = format!("concept_{k:02}.png");
        save_png(&c.image, &run.dir.join(CONCEPTS_DIR), &file)?;
        index
            .serialize(ConceptRow { index: k, file, elevation: c.camera.elevation, azimuth: c.camera.azimuth })
            .map_err(csv_error)?;
    }
    index.flush()?;
    run.artifact("concepts", CONCEPTS_INDEX);
    record_backend(run, "theme", &out.theme.backend);
    if out.theme.backend.kind() != BackendKind::External {
        std::fs::create_dir_all(run.dir.join("priors"))?;
        themeforge::pipeline::write_atomic(run.dir.join(THEME_CKPT), &out.theme.backend.to_checkpoint()?)?;
        run.artifact("theme_prior", THEME_CKPT);
        if let DenoiserBackend::Toy(t) = &out.theme.backend {
            let mut s = String::from("step,loss\n");
            for (step, loss) in &t.loss_curve {
                s.push_str(&format!("{step},{loss}\n"));
            }
            std::fs::write(run.dir.join("priors/theme_loss.csv"), s)?;
            run.artifact("theme_loss", "priors/theme_loss.csv");
        }
    }
    Ok(out)
}

pub fn cmd_stage1(
    mut cfg: ProjectConfig,
    out: &Path,
    args: &[String],
    exemplars: &ExemplarArgs,
    tokens: &TokenArgs,
    n_concepts: Option<usize>,
) -> CliResult<()> {
    apply_stage1_overrides(&mut cfg, tokens, n_concepts);
    cfg.validate()?;
    let mut run = Run::create(out, "stage1", &cfg, args)?;
    run.execute(|run| {
        let meshes = load_exemplars(&exemplars.paths, run)?;
        let base = build_base(&cfg)?;
        record_backend(run, "base", &base);
        run_stage1(run, &cfg, &meshes, &base)?;
        Ok(())
    })
}

/// The theme prior saved by a Stage I run, if it wrote one.
fn load_theme(dir: &Path, cfg: &ProjectConfig) -> CliResult<Option<PriorHandle>> {
    let ckpt = dir.join(THEME_CKPT);
    if !ckpt.is_file() {
        return Ok(None);
    }
    let backend = DenoiserBackend::from_checkpoint(&std::fs::read(&ckpt)?)?;
    Ok(Some(PriorHandle::new(backend, PriorRole::Theme, vec![theme_prompt(&cfg.stage1)])))
}

/// Everything Stage II needs besides the configuration.
pub struct ConceptInput {
    pub concept: PosedImage,
    pub meshes: Vec<TriangleMesh>,
    pub theme: PriorHandle,
    pub index: usize,
}

/// Resolves the concept, exemplars and augmentation prior from either a
/// Stage I run or explicit files, recording every input in `run`.
fn resolve_concept(cfg: &ProjectConfig, input: &ConceptArgs, base: &DenoiserBackend, run: &mut Run) -> CliResult<ConceptInput> {
    let cam = |el: f64, az: f64| Camera::with_defaults(el, az, &cfg.view.camera).map_err(CliError::from);
    let load_concept = |path: &Path, run: &mut Run| -> CliResult<Image> {
        let img = Image::load_png(path, 3).map_err(|e| CliError::from(e).context(&path.display().to_string()))?;
        let (w, h) = (cfg.view.camera.width, cfg.view.camera.height);
        if (img.width(), img.height()) != (w, h) {
            return Err(CliError::validation(format!(
                "concept {} is {}x{} but view.camera is {w}x{h}",
                path.display(),
                img.width(),
                img.height()
            )));
        }
        run.input(input_key("concept", path), hash_file(path)?);
        Ok(img)
    };
    if let Some(dir) = &input.stage1_run {
        let m = RunManifest::load(dir).map_err(|e| CliError::validation(format!("{}: {e}", dir.display())))?;
        if m.status != RunStatus::Completed {
            return Err(CliError::validation(format!("Stage I run {} did not complete", dir.display())));
        }
        let mut rdr = csv::Reader::from_path(dir.join(CONCEPTS_INDEX))
            .map_err(|e| CliError::validation(format!("{}: {e}", dir.join(CONCEPTS_INDEX).display())))?;
        let rows: Vec<ConceptRow> =
            rdr.deserialize().collect::<Result<_, _>>().map_err(|e| CliError::validation(format!("concept index: {e}")))?;
        let row = rows.iter().find(|r| r.index == input.concept_index).ok_or_else(|| {
            CliError::validation(format!("Stage I run has {} concept(s); no index {}", rows.len(), input.concept_index))
        })?;
        let image = load_concept(&dir.join(CONCEPTS_DIR).join(&row.file), run)?;
        let paths = if input.exemplars.is_empty() { recorded_exemplars(&m.inputs)? } else { input.exemplars.clone() };
        let meshes = load_exemplars(&paths, run)?;
        let theme = match load_theme(dir, cfg)? {
            Some(t) => {
                let ckpt = dir.join(THEME_CKPT);
                run.input(input_key("theme", &ckpt), hash_file(&ckpt)?);
                t
            }
            None => {
                log::warn!("no theme checkpoint in {}; augmenting with the base prior", dir.display());
                PriorHandle::new(base.clone(), PriorRole::Theme, vec![])
            }
        };
        Ok(ConceptInput { concept: PosedImage { image, camera: cam(row.elevation, row.azimuth)? }, meshes, theme, index: row.index })
    } else if let Some(path) = &input.concept {
        let image = load_concept(path, run)?;
        let meshes = load_exemplars(&input.exemplars, run)?;
        let theme = PriorHandle::new(base.clone(), PriorRole::Theme, vec![]);
        Ok(ConceptInput { concept: PosedImage { image, camera: cam(input.elevation, input.azimuth)? }, meshes, theme, index: 0 })
    } else {
        Err(CliError::validation("Stage II needs --stage1-run DIR or --concept PNG with --exemplars"))
    }
}

/// Stage II into `run.dir`: concept, mask, priors, checkpoints, CSV logs
/// and the final artifacts.
fn run_stage2(
    run: &mut Run,
    cfg: &ProjectConfig,
    base: &DenoiserBackend,
    input: &ConceptInput,
    init: Option<&Path>,
) -> CliResult<Stage2Output> {
    let s2 = &cfg.stage2;
    let concept = &input.concept;
    let mask = foreground_mask(&concept.image, cfg.view.render.background, s2.mask_threshold);
    save_png(&concept.image, &run.dir, "concept.png")?;
    save_png(&mask, &run.dir, "concept_mask.png")?;
    run.artifact("concept", "concept.png");
    run.artifact("concept_mask", "concept_mask.png");
    let init_field = match init {
        Some(p) => {
            run.input(input_key("init", p), hash_file(p)?);
            let ini = FileInitializer { path: p.to_path_buf(), sigma_occ: s2.init_sigma, bounds_half: s2.bounds_half };
            init_model(&concept.image, &mask, &concept.camera, s2.resolution, &ini)?
        }
        None => {
            let ini = VisualHull { sigma_occ: s2.init_sigma, bounds_half: s2.bounds_half };
            init_model(&concept.image, &mask, &concept.camera, s2.resolution, &ini)?
        }
    };
    let stream = STAGE2_STREAM + input.index as u64;
    run.manifest.seeds.insert("stage2_stream".into(), stream);
    let mut rng = derive(cfg.seed, stream);
    log::info!("stage 2: {} steps at {}^3", s2.total_steps, s2.resolution);
    run.save()?;
    let (setup, out) =
        stage2(concept, &mask, &input.meshes, base, &input.theme, &init_field, s2, &cfg.view, &mut rng, Some(&run.dir))?;
    record_backend(run, "augment", &input.theme.backend);
    record_backend(run, "concept", &setup.concept.backend);
    record_backend(run, "reference", &setup.reference.backend);
    run.manifest.backends.insert(
        "lora".into(),
        setup.lora.as_ref().map_or_else(|| "none (sampled noise)".into(), |l| l.name()),
    );
    write_final(&run.dir, &out.field, &cfg.view)?;
    for (k, v) in [
        ("steps", "steps.csv"),
        ("losses", "losses.csv"),
        ("checkpoints", "checkpoints"),
        ("augmented", "augmented"),
        ("final_field", "final/field.grid"),
        ("final_mesh", "final/model.obj"),
        ("turntable", "final/turntable.png"),
    ] {
        run.artifact(k, v);
    }
    for (name, h) in [("concept", &setup.concept), ("reference", &setup.reference)] {
        if h.backend.kind() != BackendKind::External {
            run.artifact(format!("{name}_prior"), format!("priors/{name}.ckpt"));
        }
    }
    run.metric("init_iou", out.init_iou);
    run.metric("final_iou", out.final_iou);
    Ok(out)
}

pub fn cmd_stage2(mut cfg: ProjectConfig, out: &Path, args: &[String], input: &ConceptArgs, opts: &Stage2Args) -> CliResult<()> {
    apply_stage2_overrides(&mut cfg, opts);
    cfg.validate()?;
    let mut run = Run::create(out, "stage2", &cfg, args)?;
    run.execute(|run| {
        let base = build_base(&cfg)?;
        record_backend(run, "base", &base);
        let ci = resolve_concept(&cfg, input, &base, run)?;
        run_stage2(run, &cfg, &base, &ci, opts.init.as_deref())?;
        Ok(())
    })
}

pub fn cmd_generate(
    mut cfg: ProjectConfig,
    out: &Path,
    args: &[String],
    exemplars: &ExemplarArgs,
    tokens: &TokenArgs,
    n_concepts: Option<usize>,
    opts: &Stage2Args,
) -> CliResult<()> {
    apply_stage1_overrides(&mut cfg, tokens, n_concepts);
    apply_stage2_overrides(&mut cfg, opts);
    cfg.validate()?;
    let mut top = Run::create(out, "generate", &cfg, args)?;
    top.execute(|top| {
        let meshes = load_exemplars(&exemplars.paths, top)?;
        let base = build_base(&cfg)?;
        record_backend(top, "base", &base);
        let child = |name: &str, top: &Run| -> CliResult<Run> {
            let mut r = Run::create(&top.dir.join(name), &format!("generate/{name}"), &cfg, &[])?;
            r.manifest.inputs = top.manifest.inputs.clone();
            r.manifest.backends = top.manifest.backends.clone();
            Ok(r)
        };
        let mut s1_run = child("stage1", top)?;
        let s1 = s1_run.execute(|r| run_stage1(r, &cfg, &meshes, &base))?;
        top.artifact("stage1", "stage1");
        let theme = load_theme(&s1_run.dir, &cfg)?.unwrap_or_else(|| s1.theme.clone());
        for (k, concept) in s1.concepts.iter().enumerate() {
            let name = format!("concept_{k:02}");
            let mut r = child(&name, top)?;
            // Stage II reads the saved concept and theme checkpoint, as a
            // standalone run on this Stage I directory would.
            let path = s1_run.dir.join(CONCEPTS_DIR).join(format!("concept_{k:02}.png"));
            let image = Image::load_png(&path, 3)?;
            let ci = ConceptInput {
                concept: PosedImage { image, camera: concept.camera },
                meshes: meshes.clone(),
                theme: theme.clone(),
                index: k,
            };
            let o = r.execute(|r| run_stage2(r, &cfg, &base, &ci, opts.init.as_deref()))?;
            top.artifact(name.clone(), name.clone());
            top.metric(format!("{name}/final_iou"), o.final_iou);
            top.save()?;
        }
        Ok(())
    })
}

pub fn parse_modes(s: &str) -> CliResult<Vec<AblationMode>> {
    if s.trim() == "all" {
        return Ok(AblationMode::ALL.to_vec());
    }
    let mut out: Vec<AblationMode> = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let m: AblationMode = part.parse().map_err(CliError::from)?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        return Err(CliError::validation("--modes names no setting"));
    }
    Ok(out)
}

/// Letter of each setting in the usual ablation table order.
pub fn setting_label(m: AblationMode) -> &'static str {
    match m {
        AblationMode::Baseline => "(a) Baseline",
        AblationMode::Naive => "(b) +Ref. naive",
        AblationMode::Dsd => "(c) +Ref. DSD",
        AblationMode::Reverse => "(d) Reverse DSD",
        AblationMode::RefDominated => "(e) Ref. dominated",
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct AblationRow {
    pub setting: String,
    pub mode: String,
    pub seed: u64,
    pub stream: u64,
    pub clip_score: f64,
    pub contextual_distance: f64,
    pub visual_quality: String,
    pub geometry_quality: String,
    pub init_iou: f64,
    pub final_iou: f64,
    pub concept_terms: usize,
    pub reference_terms: usize,
    pub concept_t_min: Option<usize>,
    pub concept_t_max: Option<usize>,
    pub reference_t_min: Option<usize>,
    pub reference_t_max: Option<usize>,
}

fn t_range(recs: &[StepRecord], role: PriorRole) -> (usize, Option<usize>, Option<usize>) {
    let ts: Vec<usize> = recs.iter().filter(|r| r.prior == role).map(|r| r.t).collect();
    (ts.len(), ts.iter().min().copied(), ts.iter().max().copied())
}

pub fn cmd_ablate(
    mut cfg: ProjectConfig,
    out: &Path,
    args: &[String],
    input: &ConceptArgs,
    opts: &Stage2Args,
    modes: &str,
) -> CliResult<()> {
    let modes = parse_modes(modes)?;
    apply_stage2_overrides(&mut cfg, opts);
    cfg.validate()?;
    let mut top = Run::create(out, "ablate", &cfg, args)?;
    top.execute(|top| {
        let base = build_base(&cfg)?;
        record_backend(top, "base", &base);
        let ci = resolve_concept(&cfg, input, &base, top)?;
        let mut rows = Vec::new();
        for &mode in &modes {
            let mut mcfg = cfg.clone();
            mcfg.stage2.distill = ablation_mode(&cfg.stage2.distill, mode);
            let mut r = Run::create(&top.dir.join(mode.name()), &format!("ablate/{}", mode.name()), &mcfg, &[])?;
            r.manifest.inputs = top.manifest.inputs.clone();
            r.manifest.backends = top.manifest.backends.clone();
            log::info!("ablation setting {}", mode.name());
            let o = r.execute(|r| run_stage2(r, &mcfg, &base, &ci, opts.init.as_deref()))?;
            let (clip, ctx) = fidelity(&o.field, &ci.concept.image, &mcfg)?;
            let (nc, cmin, cmax) = t_range(&o.steps, PriorRole::Concept);
            let (nr, rmin, rmax) = t_range(&o.steps, PriorRole::Reference);
            band_plots(&o.steps, base.schedule().len(), &top.dir.join("plots"), mode.name())?;
            rows.push(AblationRow {
                setting: setting_label(mode).into(),
                mode: mode.name().into(),
                seed: cfg.seed,
                stream: STAGE2_STREAM + ci.index as u64,
                clip_score: clip,
                contextual_distance: ctx,
                visual_quality: UNAVAILABLE_QUALITY.into(),
                geometry_quality: UNAVAILABLE_QUALITY.into(),
                init_iou: o.init_iou,
                final_iou: o.final_iou,
                concept_terms: nc,
                reference_terms: nr,
                concept_t_min: cmin,
                concept_t_max: cmax,
                reference_t_min: rmin,
                reference_t_max: rmax,
            });
            top.artifact(mode.name(), mode.name());
            top.metric(format!("{}/clip_score", mode.name()), clip);
            top.metric(format!("{}/contextual_distance", mode.name()), ctx);
            top.save()?;
        }
        let mut w = csv::Writer::from_path(top.dir.join("ablation.csv")).map_err(csv_error)?;
        for r in &rows {
            w.serialize(r).map_err(csv_error)?;
        }
        w.flush()?;
        std::fs::write(top.dir.join("ablation.txt"), ablation_table(&rows))?;
        top.artifact("table", "ablation.csv");
        top.artifact("table_text", "ablation.txt");
        Ok(())
    })
}

/// Metrics as rows and settings as columns.
fn ablation_table(rows: &[AblationRow]) -> String {
    let mut cols: Vec<Vec<String>> = vec![vec![String::new()]];
    cols[0].extend(["CLIP (higher is better)", "Contextual (lower is better)", "Visual Quality", "Geometry Quality", "Final IoU"].map(String::from));
    for r in rows {
        cols.push(vec![
            r.setting.clone(),
            format!("{:.4}", r.clip_score),
            format!("{:.4}", r.contextual_distance),
            r.visual_quality.clone(),
            r.geometry_quality.clone(),
            format!("{:.4}", r.final_iou),
        ]);
    }
    let widths: Vec<usize> = cols.iter().map(|c| c.iter().map(|s| s.len()).max().unwrap_or(0)).collect();
    let mut s = String::new();
    for line in 0..cols[0].len() {
        let cells: Vec<String> = cols.iter().zip(&widths).map(|(c, w)| format!("{:<w$}", c[line], w = *w)).collect();
        s.push_str(cells.join("  ").trim_end());
        s.push('\n');
    }
    s
}

/// Paths of all Stage II runs below `dir` (itself included).
pub fn find_model_runs(dir: &Path) -> Vec<PathBuf> {
    if dir.join("final/field.grid").is_file() {
        return vec![dir.to_path_buf()];
    }
    let mut subs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map(|rd| rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect())
        .unwrap_or_default();
    subs.sort();
    subs.iter().filter(|p| p.join("final/field.grid").is_file()).cloned().collect()
}

/// Paths of all Stage I runs below `dir` (itself included).
pub fn find_concept_runs(dir: &Path) -> Vec<PathBuf> {
    if dir.join(CONCEPTS_INDEX).is_file() {
        return vec![dir.to_path_buf()];
    }
    let mut subs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map(|rd| rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect())
        .unwrap_or_default();
    subs.sort();
    subs.iter().filter(|p| p.join(CONCEPTS_INDEX).is_file()).cloned().collect()
}

/// Concept images of a Stage I run, in index order.
pub fn load_concepts(dir: &Path) -> CliResult<Vec<Image>> {
    let mut rdr = csv::Reader::from_path(dir.join(CONCEPTS_INDEX)).map_err(|e| CliError::validation(e.to_string()))?;
    let mut rows: Vec<ConceptRow> =
        rdr.deserialize().collect::<Result<_, _>>().map_err(|e| CliError::validation(format!("concept index: {e}")))?;
    rows.sort_by_key(|r| r.index);
    rows.iter()
        .map(|r| Image::load_png(dir.join(CONCEPTS_DIR).join(&r.file), 3).map_err(CliError::from))
        .collect()
}

pub fn verify_recorded_inputs(m: &RunManifest) -> CliResult<()> {
    for (key, hash) in &m.inputs {
        if let Some((_, path)) = key.split_once(':') {
            verify_input(Path::new(path), hash)?;
        }
    }
    Ok(())
}
