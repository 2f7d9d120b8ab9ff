use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use themeforge::geometry::TriangleMesh;
use themeforge::pipeline::{hash_bytes, write_atomic, RunManifest, RunStatus};

use crate::args::GlobalArgs;
use crate::config::ProjectConfig;
use crate::error::{CliError, CliResult};

pub const CONFIG_FILE: &str = "config.toml";

/// Effective configuration: the file (or defaults) with the command-line
/// overrides applied, validated.
pub fn load_config(global: &GlobalArgs) -> CliResult<ProjectConfig> {
    let mut cfg = match &global.config {
        Some(p) => ProjectConfig::load(p)?,
        None => ProjectConfig::default(),
    };
    if let Some(s) = global.seed {
        cfg.seed = s;
    }
    if let Some(b) = &global.backend {
        cfg.backend = b.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn require_out(global: &GlobalArgs) -> CliResult<PathBuf> {
    global.out.clone().ok_or_else(|| CliError::validation("--out DIR is required for this command"))
}

/// A run directory and its manifest.
pub struct Run {
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

impl Run {
    /// Creates the directory, writes the config snapshot and a manifest in
    /// the running state.
    pub fn create(dir: &Path, command: &str, cfg: &ProjectConfig, args: &[String]) -> CliResult<Self> {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::runtime(format!("cannot create run directory {}: {e}", dir.display())))?;
        write_atomic(dir.join(CONFIG_FILE), cfg.to_toml().as_bytes())?;
        let snapshot = serde_json::to_value(cfg).expect("config serializes");
        let mut manifest = RunManifest::new(command, cfg.seed, snapshot);
        manifest.args = args.to_vec();
        manifest.artifacts.insert("config".into(), CONFIG_FILE.into());
        let run = Self { dir: dir.to_path_buf(), manifest };
        run.save()?;
        Ok(run)
    }

    pub fn save(&self) -> CliResult<()> {
        Ok(self.manifest.save(&self.dir)?)
    }

    pub fn artifact(&mut self, key: impl Into<String>, rel: impl Into<String>) {
        self.manifest.artifacts.insert(key.into(), rel.into());
    }

    pub fn input(&mut self, key: impl Into<String>, hash: impl Into<String>) {
        self.manifest.inputs.insert(key.into(), hash.into());
    }

    pub fn metric(&mut self, key: impl Into<String>, value: f64) {
        self.manifest.metrics.insert(key.into(), value);
    }

    /// Runs `body`, then marks the manifest completed or failed.
    pub fn execute<T>(&mut self, body: impl FnOnce(&mut Run) -> CliResult<T>) -> CliResult<T> {
        let result = body(self);
        match &result {
            Ok(_) => {
                self.manifest.status = RunStatus::Completed;
                self.manifest.error = None;
            }
            Err(e) => {
                self.manifest.status = RunStatus::Failed;
                self.manifest.error = Some(e.message.clone());
            }
        }
        self.save()?;
        result
    }
}

/// OBJ files named directly or found (non-recursively) in directories,
/// in sorted order within each directory.
pub fn collect_objs(paths: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| CliError::validation(format!("cannot list {}: {e}", p.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.is_file() && f.extension().is_some_and(|x| x.eq_ignore_ascii_case("obj")))
                .collect();
            found.sort();
            out.extend(found);
        } else if p.is_file() {
            out.push(p.clone());
        } else {
            return Err(CliError::validation(format!("no such file or directory: {}", p.display())));
        }
    }
    Ok(out)
}

/// Key under which an input file is recorded in manifests.
pub fn input_key(kind: &str, path: &Path) -> String {
    let abs = std::fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf());
    format!("{kind}:{}", abs.display())
}

pub fn hash_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::validation(format!("cannot read {}: {e}", path.display())))?;
    Ok(hash_bytes(&bytes))
}

/// Loads every exemplar, recording each file's hash.
pub fn load_exemplars(paths: &[PathBuf], run: &mut Run) -> CliResult<Vec<TriangleMesh>> {
    let files = collect_objs(paths)?;
    if files.is_empty() {
        return Err(CliError::validation("no exemplar OBJ files found (0 inputs)"));
    }
    let mut meshes = Vec::with_capacity(files.len());
    for f in &files {
        let mesh = TriangleMesh::load_obj(f).map_err(|e| CliError::from(e).context(&f.display().to_string()))?;
        mesh.ensure_nondegenerate().map_err(|e| CliError::from(e).context(&f.display().to_string()))?;
        run.input(input_key("exemplar", f), hash_file(f)?);
        meshes.push(mesh);
    }
    Ok(meshes)
}

/// Exemplar paths recorded in a manifest, checked against their hashes.
pub fn recorded_exemplars(inputs: &BTreeMap<String, String>) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for (key, hash) in inputs {
        let Some(path) = key.strip_prefix("exemplar:") else { continue };
        let path = PathBuf::from(path);
        verify_input(&path, hash)?;
        out.push(path);
    }
    Ok(out)
}

pub fn verify_input(path: &Path, hash: &str) -> CliResult<()> {
    let now = hash_file(path)?;
    if now != hash {
        return Err(CliError::validation(format!("input {} changed since it was recorded", path.display())));
    }
    Ok(())
}

/// A name for `dir` that is unique among `taken`.
pub fn unique_name(dir: &Path, taken: &mut Vec<String>) -> String {
    let base = dir
        .canonicalize()
        .ok()
        .and_then(|p| p.file_name().map(|s| s.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "run".into());
    let mut name = base.clone();
    let mut k = 2;
    while taken.contains(&name) {
        name = format!("{base}_{k}");
        k += 1;
    }
    taken.push(name.clone());
    name
}
