mod common;

use std::path::Path;

use common::*;
use tempfile::tempdir;
use themeforge::geometry::VoxelRadianceField;

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn config_round_trips_to_an_identical_document() {
    let d = tempdir().unwrap();
    let cfg = write_config(d.path(), "c.toml", SMOKE);
    let first = run_in(d.path(), &["--config", s(&cfg), "config"]);
    assert_eq!(code(&first), 0);
    let again = write_config(d.path(), "again.toml", &String::from_utf8(first.stdout.clone()).unwrap());
    let second = run_in(d.path(), &["--config", s(&again), "config"]);
    assert_eq!(first.stdout, second.stdout);
    let text = String::from_utf8(first.stdout).unwrap();
    assert!(text.contains("[stage2.distill]") && text.contains("total_steps = 12"), "{text}");
}

#[test]
fn validation_errors_exit_with_code_one_and_name_the_key() {
    let d = tempdir().unwrap();
    let bad = write_config(d.path(), "bad.toml", "[stage2]\ntotal_stepz = 3\n");
    let o = run_in(d.path(), &["--config", s(&bad), "config"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("stage2") && stderr(&o).contains("total_stepz"), "{}", stderr(&o));

    let bands = write_config(d.path(), "bands.toml", "[stage2.distill.band_h]\nlo = 0.2\nhi = 0.3\n");
    let o = run_in(d.path(), &["--config", s(&bands), "config"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("overlaps"), "{}", stderr(&o));

    assert_eq!(code(&run_in(d.path(), &["--backend", "gpu", "config"])), 1);
    assert_eq!(code(&run_in(d.path(), &["--config", "/nonexistent.toml", "config"])), 1);
    assert_eq!(code(&run_in(d.path(), &["stage1", "--exemplars", "x.obj"])), 1, "missing --out");
    assert_eq!(code(&run_in(d.path(), &["no-such-command"])), 1);
    assert_eq!(code(&run_in(d.path(), &["--help"])), 0);
    assert_eq!(code(&run_in(d.path(), &["--out", s(&d.path().join("r")), "stage1", "--exemplars", s(&d.path().join("missing.obj"))])), 1);
}

#[test]
fn render_exemplars_writes_twenty_views_per_mesh_reproducibly() {
    let d = tempdir().unwrap();
    let ex = exemplars(d.path(), 1);
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    assert_eq!(code(&run_in(d.path(), &["--seed", "3", "--out", s(&a), "render-exemplars", "--input", s(&ex)])), 0);
    assert_eq!(code(&run_in(d.path(), &["--seed", "3", "--out", s(&b), "render-exemplars", "--input", s(&ex)])), 0);
    let files = outputs(&a);
    let count = |p: &str| files.keys().filter(|k| k.starts_with(&format!("ex0/{p}_")) && k.ends_with(".png")).count();
    assert_eq!((count("color"), count("normal"), count("mask")), (20, 20, 20));
    assert_eq!(files, outputs(&b), "same seed gives byte-identical outputs");
    let (header, rows) = read_csv(&a.join("views.csv"));
    assert_eq!(header[..4], ["mesh", "view", "elevation", "azimuth"]);
    assert_eq!(rows.len(), 20);
    assert_eq!(manifest(&a)["status"], "completed");
}

#[test]
fn render_exemplars_reports_empty_and_broken_inputs() {
    let d = tempdir().unwrap();
    let empty = d.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let o = run_in(d.path(), &["--out", s(&d.path().join("r0")), "render-exemplars", "--input", s(&empty)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("0 inputs"), "{}", stderr(&o));

    let ex = exemplars(d.path(), 1);
    std::fs::write(ex.join("broken.obj"), "v 0 0 0\nf 1 2 3\n").unwrap();
    let out = d.path().join("r1");
    assert_eq!(code(&run_in(d.path(), &["--out", s(&out), "render-exemplars", "--input", s(&ex)])), 0);
    let failures = std::fs::read_to_string(out.join("failures.txt")).unwrap();
    assert!(failures.contains("broken.obj"));

    let only_broken = d.path().join("only_broken");
    std::fs::create_dir_all(&only_broken).unwrap();
    std::fs::write(only_broken.join("x.obj"), "garbage\n").unwrap();
    let out = d.path().join("r2");
    assert_eq!(code(&run_in(d.path(), &["--out", s(&out), "render-exemplars", "--input", s(&only_broken)])), 1);
    assert_eq!(manifest(&out)["status"], "failed");
}

#[test]
fn zero_steps_leave_the_initial_model_unchanged() {
    let d = tempdir().unwrap();
    let cfg = write_config(d.path(), "c.toml", SMOKE);
    let ex = exemplars(d.path(), 1);
    let views = d.path().join("views");
    assert_eq!(code(&run_in(d.path(), &["--config", s(&cfg), "--out", s(&views), "render-exemplars", "--input", s(&ex)])), 0);
    let out = d.path().join("s2");
    let concept = views.join("ex0/color_00.png");
    let (_, rows) = read_csv(&views.join("views.csv"));
    let o = run_in(
        d.path(),
        &[
            "--config", s(&cfg), "--out", s(&out), "stage2", "--concept", s(&concept), "--exemplars", s(&ex),
            "--azimuth", &rows[0]["azimuth"], "--elevation", &rows[0]["elevation"], "--steps", "0",
        ],
    );
    assert_eq!(code(&o), 0);
    let init = VoxelRadianceField::load(out.join("checkpoints/step_000000.grid")).unwrap();
    let fin = VoxelRadianceField::load(out.join("final/field.grid")).unwrap();
    assert_eq!(init, fin);
    let m = manifest(&out);
    assert_eq!(m["metrics"]["init_iou"], m["metrics"]["final_iou"]);
}

#[test]
fn concept_images_must_match_the_camera() {
    let d = tempdir().unwrap();
    let ex = exemplars(d.path(), 1);
    let png = d.path().join("c.png");
    themeforge::Image::filled(5, 5, 3, 0.5).save_png(&png).unwrap();
    let o = run_in(d.path(), &["--out", s(&d.path().join("r")), "stage2", "--concept", s(&png), "--exemplars", s(&ex)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("5x5"), "{}", stderr(&o));
}

#[test]
fn generate_evaluate_and_rerun_on_the_analytic_backend() {
    let d = tempdir().unwrap();
    let cfg = write_config(d.path(), "c.toml", SMOKE);
    let ex = exemplars(d.path(), 2);
    let gen = d.path().join("gen");
    assert_eq!(code(&run_in(d.path(), &["--config", s(&cfg), "--seed", "5", "--out", s(&gen), "generate", "--exemplars", s(&ex)])), 0);
    for k in ["stage1/concepts/concept_00.png", "stage1/priors/theme.ckpt", "concept_01/final/model.obj", "concept_01/steps.csv"] {
        assert!(gen.join(k).is_file(), "{k}");
    }
    let m = manifest(&gen);
    assert_eq!(m["status"], "completed");
    assert_eq!(m["args"].as_array().unwrap().len(), 9);
    assert_eq!(manifest(&gen.join("concept_00"))["command"], "generate/concept_00");

    // A standalone Stage II on the same concept repeats the generate child.
    let s2 = d.path().join("s2");
    let stage1 = gen.join("stage1");
    let o = run_in(d.path(), &["--config", s(&cfg), "--seed", "5", "--out", s(&s2), "stage2", "--stage1-run", s(&stage1), "--concept-index", "1"]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read(s2.join("final/field.grid")).unwrap(), std::fs::read(gen.join("concept_01/final/field.grid")).unwrap());

    // Rerunning from the manifest alone reproduces every output.
    let again = d.path().join("again");
    assert_eq!(code(&run_in(d.path(), &["--out", s(&again), "rerun", s(&gen)])), 0);
    let strip = |t: std::collections::BTreeMap<String, Vec<u8>>| {
        t.into_iter().filter(|(k, _)| !k.ends_with("config.toml")).collect::<std::collections::BTreeMap<_, _>>()
    };
    assert_eq!(strip(outputs(&gen)), strip(outputs(&again)));
    assert_eq!(manifest(&again)["args"], manifest(&gen)["args"]);
    assert_eq!(code(&run_in(d.path(), &["--out", s(&again), "rerun", s(&gen.join("stage1"))])), 1, "children are not rerun alone");

    // Evaluating a set against a copy of itself gives zero diversity.
    let ev = d.path().join("ev");
    let one = gen.join("concept_00");
    let o = run_in(d.path(), &["--config", s(&cfg), "--out", s(&ev), "evaluate", s(&one), s(&one)]);
    assert_eq!(code(&o), 0);
    let (header, rows) = read_csv(&ev.join("report.csv"));
    assert_eq!(header, ["metric", "label", "scope", "value", "status", "inputs_hash", "backends", "detail"]);
    for label in ["visual_diversity", "geometry_diversity"] {
        let r = rows.iter().find(|r| r["label"] == label).unwrap();
        assert_eq!((r["value"].as_str(), r["status"].as_str()), ("0.0", "ok"), "{label}");
    }
    for r in &rows {
        assert!(["ok", "unavailable", "skipped"].contains(&r["status"].as_str()));
        assert!(!r["inputs_hash"].is_empty());
    }
    let q = rows.iter().find(|r| r["label"] == "visual_quality").unwrap();
    assert_eq!(q["status"], "unavailable");
    assert!(ev.join("report.txt").is_file() && ev.join("table_fidelity.csv").is_file() && ev.join("table_diversity.csv").is_file());
    assert!(ev.join("plots/concept_00_losses.png").is_file() && ev.join("plots/concept_00_bands.png").is_file());

    // The whole generate run: two models and one concept set.
    let ev2 = d.path().join("ev2");
    assert_eq!(code(&run_in(d.path(), &["--config", s(&cfg), "--out", s(&ev2), "evaluate", s(&gen)])), 0);
    let (_, rows) = read_csv(&ev2.join("report.csv"));
    let cd = rows.iter().find(|r| r["label"] == "concept_diversity").unwrap();
    assert_eq!(cd["status"], "ok");
    assert!(cd["value"].parse::<f64>().unwrap() > 0.0);

    let strict = d.path().join("strict");
    let o = run_in(d.path(), &["--config", s(&cfg), "--strict", "--out", s(&strict), "evaluate", s(&gen)]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("visual_quality"));
    assert!(strict.join("report.csv").is_file(), "reports are written before the strict failure");

    // Nothing under the inputs changed.
    let before = outputs(&stage1);
    assert_eq!(before, outputs(&gen.join("stage1")));
}

#[test]
fn stage2_does_not_touch_stage1_artifacts() {
    let d = tempdir().unwrap();
    let cfg = write_config(d.path(), "c.toml", SMOKE);
    let ex = exemplars(d.path(), 1);
    let s1 = d.path().join("s1");
    assert_eq!(code(&run_in(d.path(), &["--config", s(&cfg), "--out", s(&s1), "stage1", "--exemplars", s(&ex), "--n-concepts", "1"])), 0);
    let before = tree(&s1);
    let exemplar_before = tree(&ex);
    let s2 = d.path().join("s2");
    assert_eq!(code(&run_in(d.path(), &["--config", s(&cfg), "--out", s(&s2), "stage2", "--stage1-run", s(&s1)])), 0);
    assert_eq!(before, tree(&s1));
    assert_eq!(exemplar_before, tree(&ex));
    let inputs = manifest(&s2)["inputs"].as_object().unwrap().clone();
    assert!(inputs.keys().any(|k| k.starts_with("exemplar:")) && inputs.keys().any(|k| k.starts_with("theme:")));

    // A changed exemplar is detected when the run is reproduced.
    let obj = ex.join("ex0.obj");
    let mut text = std::fs::read_to_string(&obj).unwrap();
    text.push_str("# edited\n");
    std::fs::write(&obj, text).unwrap();
    let o = run_in(d.path(), &["--out", s(&d.path().join("again")), "rerun", s(&s2)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("changed"), "{}", stderr(&o));
}

#[test]
fn ablate_runs_the_requested_settings_with_shared_seeds() {
    let d = tempdir().unwrap();
    let cfg = write_config(d.path(), "c.toml", SMOKE);
    let ex = exemplars(d.path(), 1);
    let s1 = d.path().join("s1");
    assert_eq!(code(&run_in(d.path(), &["--config", s(&cfg), "--out", s(&s1), "stage1", "--exemplars", s(&ex), "--n-concepts", "1"])), 0);

    let one = d.path().join("one");
    assert_eq!(code(&run_in(d.path(), &["--config", s(&cfg), "--out", s(&one), "ablate", "--stage1-run", s(&s1), "--modes", "dsd"])), 0);
    let (_, rows) = read_csv(&one.join("ablation.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["mode"], "dsd");

    let two = d.path().join("two");
    let o = run_in(d.path(), &["--config", s(&cfg), "--out", s(&two), "ablate", "--stage1-run", s(&s1), "--modes", "baseline,reverse"]);
    assert_eq!(code(&o), 0);
    let (_, rows) = read_csv(&two.join("ablation.csv"));
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["reference_terms"], "0");
    assert_eq!((rows[0]["seed"].as_str(), rows[0]["stream"].as_str()), (rows[1]["seed"].as_str(), rows[1]["stream"].as_str()));
    let (_, steps) = read_csv(&two.join("baseline/steps.csv"));
    assert!(steps.iter().all(|r| r["prior"] == "concept"));
    let table = std::fs::read_to_string(two.join("ablation.txt")).unwrap();
    assert!(table.contains("(a) Baseline") && table.contains("(d) Reverse DSD"), "{table}");

    let o = run_in(d.path(), &["--config", s(&cfg), "--out", s(&d.path().join("bad")), "ablate", "--stage1-run", s(&s1), "--modes", "dsd,bogus"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn toy_runs_are_reproducible_from_their_manifest() {
    let d = tempdir().unwrap();
    let cfg = write_config(d.path(), "c.toml", &format!("{TINY_TOY}{SMOKE}"));
    let ex = exemplars(d.path(), 1);
    let a = d.path().join("a");
    let o = run_in(d.path(), &["--config", s(&cfg), "--out", s(&a), "generate", "--exemplars", s(&ex), "--n-concepts", "1"]);
    assert_eq!(code(&o), 0);
    assert!(std::fs::read_dir(d.path()).unwrap().any(|e| e.unwrap().file_name().to_string_lossy().starts_with("toy-")), "base cached");
    let b = d.path().join("b");
    assert_eq!(code(&run_in(d.path(), &["--out", s(&b), "rerun", s(&a)])), 0);
    let strip = |t: std::collections::BTreeMap<String, Vec<u8>>| {
        t.into_iter().filter(|(k, _)| !k.ends_with("config.toml")).collect::<std::collections::BTreeMap<_, _>>()
    };
    assert_eq!(strip(outputs(&a)), strip(outputs(&b)));
    assert!(b.join("stage1/priors/theme_loss.csv").is_file());
}

#[cfg(unix)]
#[test]
fn external_backends_speak_to_a_served_local_backend() {
    use std::os::unix::fs::PermissionsExt;
    let d = tempdir().unwrap();
    let cfg = write_config(d.path(), "c.toml", SMOKE);
    let server = d.path().join("server.sh");
    std::fs::write(
        &server,
        format!("#!/bin/sh\nexec '{}' --config '{}' --backend analytic serve-backend\n", env!("CARGO_BIN_EXE_themeforge"), s(&cfg)),
    )
    .unwrap();
    std::fs::set_permissions(&server, std::fs::Permissions::from_mode(0o755)).unwrap();
    let ex = exemplars(d.path(), 1);
    let spec = format!("external:{}", s(&server));
    let out = d.path().join("ext");
    let o = run_in(d.path(), &["--config", s(&cfg), "--backend", &spec, "--out", s(&out), "generate", "--exemplars", s(&ex), "--n-concepts", "1"]);
    assert_eq!(code(&o), 0);
    assert!(out.join("concept_00/final/field.grid").is_file());
    assert!(!out.join("concept_00/priors/concept.ckpt").exists(), "external priors are not checkpointed");
    assert!(manifest(&out)["backends"]["base"].as_str().unwrap().contains("external"));

    let dead = d.path().join("dead.sh");
    std::fs::write(&dead, "#!/bin/sh\nexit 1\n").unwrap();
    std::fs::set_permissions(&dead, std::fs::Permissions::from_mode(0o755)).unwrap();
    let out = d.path().join("dead");
    let o = run_in(d.path(), &["--config", s(&cfg), "--backend", &format!("external:{}", s(&dead)), "--out", s(&out), "stage1", "--exemplars", s(&ex)]);
    assert_eq!(code(&o), 2);
    assert_eq!(manifest(&out)["status"], "failed");
}
