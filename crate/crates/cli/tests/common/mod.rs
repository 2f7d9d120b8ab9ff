#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use themeforge::corpus::creature;

/// Small analytic-backend settings that keep every command to seconds.
pub const SMOKE: &str = r#"
[view.camera]
width = 16
height = 16

[stage1]
n_concepts = 2
iters_single = 10
iters_group = 10
views_per_exemplar = 4
sampling_steps = 10

[stage2]
resolution = 16
total_steps = 12
checkpoint_every = 6
aug_views = 3
aug_steps = 10
ref_color_views = 3
ref_normal_views = 3
concept_iters = 10
reference_iters = 10

[metrics]
cameras = 4
"#;

/// A toy backend small enough to pre-train in seconds.
pub const TINY_TOY: &str = r#"
backend = "toy"

[pretrain]
shapes = 4
views = 2
steps = 40

[pretrain.toy]
hidden = 8
rank = 2
"#;

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_themeforge"))
}

/// Runs the binary with a private backend cache under `cache`.
pub fn run_in(cache: &Path, args: &[&str]) -> Output {
    let out = bin().args(args).env("THEMEFORGE_CACHE", cache).env_remove("RUST_LOG").output().expect("binary runs");
    if !out.status.success() {
        eprintln!("themeforge {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

/// Writes `n` procedural exemplar meshes into `dir/exemplars`.
pub fn exemplars(dir: &Path, n: usize) -> PathBuf {
    let d = dir.join("exemplars");
    std::fs::create_dir_all(&d).unwrap();
    let palettes = [
        [[0.85, 0.35, 0.15], [0.95, 0.75, 0.3]],
        [[0.25, 0.55, 0.25], [0.6, 0.8, 0.35]],
        [[0.3, 0.5, 0.85], [0.85, 0.9, 0.95]],
    ];
    for (i, p) in palettes.iter().take(n).enumerate() {
        creature(*p, &format!("ex{i}")).save_obj(d.join(format!("ex{i}.obj"))).unwrap();
    }
    d
}

/// Relative path to contents of every file below `dir`.
pub fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, d: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in std::fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// `tree` without manifests and config snapshots, whose recorded paths
/// differ between output directories.
pub fn outputs(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut t = tree(dir);
    t.retain(|k, _| !k.ends_with("manifest.json"));
    t
}

pub fn read_csv(path: &Path) -> (Vec<String>, Vec<BTreeMap<String, String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| header.iter().cloned().zip(rec.unwrap().iter().map(String::from)).collect())
        .collect();
    (header, rows)
}

pub fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(dir.join("manifest.json")).unwrap()).unwrap()
}
