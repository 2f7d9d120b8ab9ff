use std::path::PathBuf;

use themeforge::diffusion::{DenoiserBackend, ExternalBackend};
use themeforge::pipeline::{analytic_base, pretrained_toy_cached};

use crate::config::ProjectConfig;
use crate::error::{CliError, CliResult};

/// Environment variable naming the directory of cached pre-trained bases.
pub const CACHE_ENV: &str = "THEMEFORGE_CACHE";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSpec {
    Analytic,
    Toy,
    External(PathBuf),
}

impl BackendSpec {
    pub fn parse(s: &str) -> CliResult<Self> {
        match s {
            "analytic" => Ok(BackendSpec::Analytic),
            "toy" => Ok(BackendSpec::Toy),
            _ => match s.strip_prefix("external:") {
                Some(p) if !p.is_empty() => Ok(BackendSpec::External(PathBuf::from(p))),
                _ => Err(CliError::validation(format!(
                    "unknown backend '{s}' (expected analytic, toy or external:PATH)"
                ))),
            },
        }
    }
}

pub fn cache_dir() -> Option<PathBuf> {
    std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

/// Builds the base denoiser named by the configuration. Toy bases are
/// pre-trained on the procedural corpus, through the cache when set.
pub fn build_base(cfg: &ProjectConfig) -> CliResult<DenoiserBackend> {
    match BackendSpec::parse(&cfg.backend)? {
        BackendSpec::Analytic => Ok(analytic_base(&cfg.pretrain, &cfg.view.camera)?),
        BackendSpec::Toy => {
            let cache = cache_dir();
            log::info!("preparing toy base ({})", cache.as_ref().map_or("no cache".into(), |c| format!("cache {}", c.display())));
            let (b, hit) = pretrained_toy_cached(&cfg.pretrain, &cfg.view.camera, cfg.pretrain_seed, cache.as_deref())?;
            log::info!("toy base {}", if hit { "loaded from cache" } else { "trained" });
            Ok(b)
        }
        BackendSpec::External(path) => {
            let ext = ExternalBackend::spawn(&path).map_err(|e| CliError::runtime(e.to_string()))?;
            let (w, h, _) = ext.image_shape();
            let (cw, ch) = (cfg.view.camera.width, cfg.view.camera.height);
            if (w, h) != (cw, ch) {
                return Err(CliError::validation(format!(
                    "external backend works at {w}x{h} but view.camera is {cw}x{ch}"
                )));
            }
            Ok(DenoiserBackend::External(ext))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specs_parse() {
        assert_eq!(BackendSpec::parse("toy").unwrap(), BackendSpec::Toy);
        assert_eq!(BackendSpec::parse("external:/bin/x").unwrap(), BackendSpec::External("/bin/x".into()));
        assert!(BackendSpec::parse("external:").is_err());
        assert!(BackendSpec::parse("gpu").is_err());
    }
}
