use std::path::{Path, PathBuf};

use themeforge::geometry::VoxelRadianceField;
use themeforge::metrics::{
    aesthetic_score, clip_score, concept_diversity, contextual_distance, diversity_labels, evaluation_cameras,
    geometry_diversity, visual_diversity,
};
use themeforge::pipeline::{hash_bytes, LossRecord, RunManifest, StepRecord, LOSSES_FILE, STEPS_FILE};
use themeforge::render::volume_render;
use themeforge::Image;

use crate::config::ProjectConfig;
use crate::error::{CliError, CliResult};
use crate::plot::{line_panels, BandHistogram};
use crate::run::{hash_file, input_key, unique_name, Run, CONFIG_FILE};

use super::stage::{find_concept_runs, find_model_runs, load_concepts};

pub const UNAVAILABLE_QUALITY: &str = "unavailable";
const BAND_BINS: usize = 20;

/// Renders of `field` at the evaluation cameras.
fn eval_views(field: &VoxelRadianceField, cfg: &ProjectConfig) -> CliResult<Vec<themeforge::render::RenderedView>> {
    let cams = evaluation_cameras(cfg.metrics.cameras, cfg.metrics.elevation, &cfg.view.camera)?;
    Ok(cams.iter().map(|c| volume_render(field, c, &cfg.view.render)).collect::<Result<Vec<_>, _>>()?)
}

/// CLIP-style similarity and contextual distance of the model's renders to
/// the concept image.
pub fn fidelity(field: &VoxelRadianceField, concept: &Image, cfg: &ProjectConfig) -> CliResult<(f64, f64)> {
    let views: Vec<Image> = eval_views(field, cfg)?.into_iter().map(|v| v.color).collect();
    let clip = clip_score(concept, &views, &cfg.metrics.embedder()?)?;
    let ctx = contextual_distance(concept, &views, &cfg.stage2.contextual)?;
    Ok((clip, ctx))
}

/// `<name>_bands.png` and `<name>_bands.csv`: drawn timesteps per prior.
pub fn band_plots(steps: &[StepRecord], schedule_len: usize, dir: &Path, name: &str) -> CliResult<()> {
    std::fs::create_dir_all(dir)?;
    let h = BandHistogram::from_records(steps, schedule_len, BAND_BINS);
    std::fs::write(dir.join(format!("{name}_bands.csv")), h.to_csv())?;
    h.render(400, 100)
        .save_png(dir.join(format!("{name}_bands.png")))
        .map_err(|e| CliError::runtime(e.to_string()))
}

fn loss_plot(losses: &[LossRecord], path: &Path) -> CliResult<()> {
    let col = |f: fn(&LossRecord) -> f64| losses.iter().map(|l| (l.step as f64, f(l))).collect::<Vec<_>>();
    let series = [
        ("grad_norm", col(|l| l.grad_norm)),
        ("tv_loss", col(|l| l.tv_loss)),
        ("ctx_loss", col(|l| l.ctx_loss)),
        ("lora_loss", col(|l| l.lora_loss)),
    ];
    line_panels(&series, 400, 80).save_png(path).map_err(|e| CliError::runtime(e.to_string()))
}

fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<Vec<T>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
    rdr.deserialize().collect::<Result<_, _>>().map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Unavailable,
    Skipped,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ReportRow {
    pub metric: String,
    pub label: String,
    pub scope: String,
    pub value: Option<f64>,
    pub status: Status,
    pub inputs_hash: String,
    pub backends: String,
    pub detail: String,
}

struct ModelRun {
    name: String,
    field: VoxelRadianceField,
    hash: String,
    backends: String,
}

fn backends_of(m: &RunManifest) -> String {
    m.backends.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";")
}

fn combined_hash(hashes: &[&str]) -> String {
    hash_bytes(hashes.join(",").as_bytes())
}

fn row(metric: &str, label: &str, scope: &str, r: Result<f64, CliError>, hash: &str, backends: &str) -> ReportRow {
    let (value, status, detail) = match r {
        Ok(v) => (Some(v), Status::Ok, String::new()),
        Err(e) if e.kind == crate::error::ExitKind::StrictMetricMissing => (None, Status::Unavailable, e.message),
        Err(e) => (None, Status::Skipped, e.message),
    };
    ReportRow {
        metric: metric.into(),
        label: label.into(),
        scope: scope.into(),
        value,
        status,
        inputs_hash: hash.into(),
        backends: backends.into(),
        detail,
    }
}

pub fn cmd_evaluate(cfg: ProjectConfig, out: &Path, args: &[String], strict: bool, runs: &[PathBuf]) -> CliResult<()> {
    let mut model_dirs = Vec::new();
    let mut concept_dirs = Vec::new();
    for r in runs {
        if !r.is_dir() {
            return Err(CliError::validation(format!("{} is not a run directory", r.display())));
        }
        let (m, c) = (find_model_runs(r), find_concept_runs(r));
        if m.is_empty() && c.is_empty() {
            return Err(CliError::validation(format!("no finished runs found in {}", r.display())));
        }
        model_dirs.extend(m);
        concept_dirs.extend(c);
    }
    let mut run = Run::create(out, "evaluate", &cfg, args)?;
    let rows = run.execute(|run| evaluate_into(run, &cfg, &model_dirs, &concept_dirs))?;
    let missing: Vec<String> =
        rows.iter().filter(|r| r.status == Status::Unavailable).map(|r| format!("{} ({})", r.label, r.scope)).collect();
    if strict && !missing.is_empty() {
        return Err(CliError::strict(format!("unavailable metrics: {}", missing.join(", "))));
    }
    Ok(())
}

fn evaluate_into(run: &mut Run, cfg: &ProjectConfig, model_dirs: &[PathBuf], concept_dirs: &[PathBuf]) -> CliResult<Vec<ReportRow>> {
    let plots = run.dir.join("plots");
    std::fs::create_dir_all(&plots)?;
    let mut taken = Vec::new();
    let mut rows = Vec::new();
    let mut models = Vec::new();
    for dir in model_dirs {
        let name = unique_name(dir, &mut taken);
        let manifest = RunManifest::load(dir).map_err(|e| CliError::validation(format!("{}: {e}", dir.display())))?;
        let run_cfg = ProjectConfig::load(&dir.join(CONFIG_FILE))?;
        let field_path = dir.join("final/field.grid");
        let concept_path = dir.join("concept.png");
        let field = VoxelRadianceField::load(&field_path).map_err(|e| CliError::from(e).context(&field_path.display().to_string()))?;
        let concept = Image::load_png(&concept_path, 3).map_err(|e| CliError::from(e).context(&concept_path.display().to_string()))?;
        let hf = hash_file(&field_path)?;
        let hc = hash_file(&concept_path)?;
        run.input(input_key("field", &field_path), hf.clone());
        run.input(input_key("concept", &concept_path), hc.clone());
        let hash = combined_hash(&[&hf, &hc]);
        let backends = backends_of(&manifest);
        // Views follow the run's own camera; the metric settings are the
        // evaluation's.
        let mut view_cfg = cfg.clone();
        view_cfg.view = run_cfg.view;
        view_cfg.stage2.contextual = run_cfg.stage2.contextual;
        let views = eval_views(&field, &view_cfg)?;
        let colors: Vec<Image> = views.iter().map(|v| v.color.clone()).collect();
        let normals: Vec<Image> = views.iter().map(|v| v.normal.encode_normals()).collect();
        let clip = cfg.metrics.embedder().map_err(CliError::from).and_then(|e| Ok(clip_score(&concept, &colors, &e)?));
        let ctx = contextual_distance(&concept, &colors, &view_cfg.stage2.contextual).map_err(CliError::from);
        rows.push(row("clip_score", "clip_score", &name, clip, &hash, &backends));
        rows.push(row("contextual_distance", "contextual_distance", &name, ctx, &hash, &backends));
        rows.push(row("visual_quality", "visual_quality", &name, aesthetic_score(&colors, None).map_err(CliError::from), &hash, &backends));
        rows.push(row("geometry_quality", "geometry_quality", &name, aesthetic_score(&normals, None).map_err(CliError::from), &hash, &backends));
        if dir.join(LOSSES_FILE).is_file() {
            loss_plot(&read_csv::<LossRecord>(&dir.join(LOSSES_FILE))?, &plots.join(format!("{name}_losses.png")))?;
        }
        if dir.join(STEPS_FILE).is_file() {
            let steps: Vec<StepRecord> = read_csv(&dir.join(STEPS_FILE))?;
            // External backends may use another schedule; never bin past it.
            let len = steps.iter().map(|r| r.t + 1).max().unwrap_or(0).max(run_cfg.pretrain.schedule.steps);
            band_plots(&steps, len, &plots, &name)?;
        }
        models.push(ModelRun { name, field, hash, backends });
    }

    let (first, second) = diversity_labels(cfg.metrics.swap_diversity_labels);
    let all_hash = combined_hash(&models.iter().map(|m| m.hash.as_str()).collect::<Vec<_>>());
    let scope = format!("{} models", models.len());
    let fields: Vec<VoxelRadianceField> = models.iter().map(|m| m.field.clone()).collect();
    let joined_backends = {
        let mut b: Vec<&str> = models.iter().map(|m| m.backends.as_str()).collect();
        b.sort();
        b.dedup();
        b.join(" | ")
    };
    if !models.is_empty() {
        let vd = visual_diversity(&fields, cfg.metrics.iso).map_err(CliError::from);
        rows.push(row("volume_iou_diversity", first, &scope, vd, &all_hash, &joined_backends));
        let gd = evaluation_cameras(cfg.metrics.cameras, cfg.metrics.elevation, &cfg.view.camera)
            .map_err(CliError::from)
            .and_then(|cams| Ok(geometry_diversity(&fields, &cams, &cfg.view.render, &cfg.metrics.perceptual)?));
        rows.push(row("normal_map_diversity", second, &scope, gd, &all_hash, &joined_backends));
    }
    for dir in concept_dirs {
        let name = unique_name(dir, &mut taken);
        let images = load_concepts(dir)?;
        let manifest = RunManifest::load(dir).ok();
        let backends = manifest.as_ref().map(backends_of).unwrap_or_default();
        let hashes: Vec<String> = images.iter().map(|i| hash_bytes(&i.data().iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>())).collect();
        let hash = combined_hash(&hashes.iter().map(String::as_str).collect::<Vec<_>>());
        let cd = concept_diversity(&images, &cfg.metrics.perceptual).map_err(CliError::from);
        rows.push(row("concept_diversity", "concept_diversity", &name, cd, &hash, &backends));
    }

    write_reports(run, &rows, &models)?;
    for r in &rows {
        if let Some(v) = r.value {
            run.metric(format!("{}/{}", r.scope, r.label), v);
        }
    }
    Ok(rows)
}

fn fmt_value(r: &ReportRow) -> String {
    match (r.status, r.value) {
        (Status::Ok, Some(v)) => format!("{v:.6}"),
        (Status::Unavailable, _) => "unavailable".into(),
        _ => "skipped".into(),
    }
}

fn write_reports(run: &mut Run, rows: &[ReportRow], models: &[ModelRun]) -> CliResult<()> {
    let csv_err = |e: csv::Error| CliError::runtime(format!("csv: {e}"));
    let mut w = csv::Writer::from_path(run.dir.join("report.csv")).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;

    let get = |scope: &str, label: &str| {
        rows.iter().find(|r| r.scope == scope && r.label == label).map_or_else(|| "skipped".into(), fmt_value)
    };
    let mut w = csv::Writer::from_path(run.dir.join("table_fidelity.csv")).map_err(csv_err)?;
    w.write_record(["run", "clip_score", "contextual_distance", "visual_quality", "geometry_quality"]).map_err(csv_err)?;
    for m in models {
        let cells = ["clip_score", "contextual_distance", "visual_quality", "geometry_quality"].map(|l| get(&m.name, l));
        w.write_record(std::iter::once(m.name.clone()).chain(cells)).map_err(csv_err)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(run.dir.join("table_diversity.csv")).map_err(csv_err)?;
    w.write_record(["metric", "scope", "value"]).map_err(csv_err)?;
    for r in rows.iter().filter(|r| r.metric.ends_with("diversity")) {
        w.write_record([r.label.as_str(), r.scope.as_str(), fmt_value(r).as_str()]).map_err(csv_err)?;
    }
    w.flush()?;

    let width = rows.iter().map(|r| r.label.len() + r.scope.len() + 3).max().unwrap_or(0);
    let mut text = String::new();
    for r in rows {
        let key = format!("{} [{}]", r.label, r.scope);
        text.push_str(&format!("{key:<width$}  {}", fmt_value(r)));
        if !r.detail.is_empty() {
            text.push_str(&format!("  ({})", r.detail));
        }
        text.push('\n');
    }
    std::fs::write(run.dir.join("report.txt"), text)?;
    for (k, v) in [
        ("report", "report.csv"),
        ("report_text", "report.txt"),
        ("table_fidelity", "table_fidelity.csv"),
        ("table_diversity", "table_diversity.csv"),
        ("plots", "plots"),
    ] {
        run.artifact(k, v);
    }
    Ok(())
}
