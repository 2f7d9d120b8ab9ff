use std::path::Path;

use serde::{Deserialize, Serialize};
use themeforge::geometry::Camera;
use themeforge::metrics::MetricsConfig;
use themeforge::pipeline::{PretrainConfig, StageIConfig, StageIIConfig, ViewConfig};

use crate::error::CliError;

/// The whole configuration document. Every key is optional; missing keys
/// take the documented defaults and unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectConfig {
    /// Master seed of a run (overridden by `--seed`).
    pub seed: u64,
    /// Seed of the toy base pre-training, kept apart from the run seed so
    /// that cached base models are shared between runs.
    pub pretrain_seed: u64,
    /// Base backend: `analytic`, `toy` or `external:PATH` (overridden by
    /// `--backend`).
    pub backend: String,
    pub view: ViewConfig,
    pub pretrain: PretrainConfig,
    pub stage1: StageIConfig,
    pub stage2: StageIIConfig,
    pub metrics: MetricsConfig,
}

impl Default for ProjectConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            pretrain_seed: 0,
            backend: "analytic".into(),
            view: ViewConfig::default(),
            pretrain: PretrainConfig::default(),
            stage1: StageIConfig::default(),
            stage2: StageIIConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

impl ProjectConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = toml::Deserializer::new(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let msg = inner.message().trim().to_string();
            match path.as_str() {
                "" | "." => CliError::validation(format!("config: {msg}")),
                _ => CliError::validation(format!("config key {path}: {msg}")),
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| e.context(&path.display().to_string()))
    }

    /// The normalized document: every key spelled out with its value.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        crate::backend::BackendSpec::parse(&self.backend).map_err(|e| e.context("backend"))?;
        let checks = [
            Camera::with_defaults(0.0, 0.0, &self.view.camera).map(|_| ()),
            self.view.render.validate(),
            self.stage1.validate(),
            self.stage2.validate(),
            self.metrics.validate(),
        ];
        for r in checks {
            r.map_err(CliError::from)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ProjectConfig::default();
        let text = cfg.to_toml();
        let back = ProjectConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = ProjectConfig::parse("seed = 4\n[stage2]\ntotal_steps = 7\n[stage2.distill]\nalpha = 0.5\n").unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.stage2.total_steps, 7);
        assert_eq!(cfg.stage2.distill.alpha, 0.5);
        assert_eq!(cfg.stage2.distill.beta, 1.0);
        assert_eq!(cfg.stage1, StageIConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_path() {
        let e = ProjectConfig::parse("[stage2]\ntotal_stepz = 3\n").unwrap_err();
        assert!(e.message.contains("total_stepz"), "{}", e.message);
        assert!(e.message.contains("stage2"), "{}", e.message);
    }
}
