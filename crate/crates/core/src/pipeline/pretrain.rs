use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::pretraining_corpus;
use crate::diffusion::{analytic_gaussian_backend, train_toy_denoiser, DenoiserBackend, ScheduleConfig, ToyConfig};
use crate::error::Result;
use crate::geometry::CameraDefaults;
use crate::image::Image;
use crate::rng::derive;

use super::manifest::{hash_bytes, write_atomic};

/// Pre-training of the toy base denoiser on the procedural shape corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub shapes: usize,
    pub views: usize,
    pub steps: usize,
    pub lr: f64,
    pub toy: ToyConfig,
    pub schedule: ScheduleConfig,
    /// Data variance of the analytic base.
    pub analytic_sigma2: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            shapes: 24,
            views: 6,
            steps: 1500,
            lr: 1e-2,
            toy: ToyConfig::default(),
            schedule: ScheduleConfig::default(),
            analytic_sigma2: 0.05,
        }
    }
}

const CORPUS_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;

/// Cache key over everything that determines the pre-trained parameters.
pub fn pretrain_cache_key(cfg: &PretrainConfig, camera: &CameraDefaults, seed: u64) -> String {
    let doc = serde_json::json!({
        "format": crate::diffusion::CHECKPOINT_VERSION,
        "version": env!("CARGO_PKG_VERSION"),
        "pretrain": cfg,
        "camera": camera,
        "seed": seed,
    });
    hash_bytes(doc.to_string().as_bytes())
}

/// Renders the corpus and trains a toy denoiser on it. The result is passed
/// through its checkpoint encoding, so a cached copy is bit-identical.
pub fn pretrain_toy(cfg: &PretrainConfig, camera: &CameraDefaults, seed: u64) -> Result<DenoiserBackend> {
    let data = pretraining_corpus(cfg.shapes, cfg.views, camera, &mut derive(seed, CORPUS_STREAM))?;
    let schedule = cfg.schedule.build()?;
    let backend = train_toy_denoiser(&data, &schedule, cfg.toy, cfg.steps, cfg.lr, &mut derive(seed, TRAIN_STREAM))?;
    DenoiserBackend::from_checkpoint(&backend.to_checkpoint()?)
}

/// [`pretrain_toy`] through an on-disk cache directory. Returns the
/// backend and whether it came from the cache; unreadable cache entries are
/// retrained and overwritten.
pub fn pretrained_toy_cached(
    cfg: &PretrainConfig,
    camera: &CameraDefaults,
    seed: u64,
    cache: Option<&Path>,
) -> Result<(DenoiserBackend, bool)> {
    let Some(dir) = cache else {
        return Ok((pretrain_toy(cfg, camera, seed)?, false));
    };
    let path = dir.join(format!("toy-{}.ckpt", pretrain_cache_key(cfg, camera, seed)));
    if let Ok(bytes) = std::fs::read(&path) {
        match DenoiserBackend::from_checkpoint(&bytes) {
            Ok(b) => return Ok((b, true)),
            Err(e) => log::warn!("ignoring unreadable cache entry {}: {e}", path.display()),
        }
    }
    let backend = pretrain_toy(cfg, camera, seed)?;
    std::fs::create_dir_all(dir)?;
    write_atomic(&path, &backend.to_checkpoint()?)?;
    Ok((backend, false))
}

/// Analytic base: a mid-gray mean with variance `analytic_sigma2`.
pub fn analytic_base(cfg: &PretrainConfig, camera: &CameraDefaults) -> Result<DenoiserBackend> {
    let mu = Image::filled(camera.width, camera.height, 3, 0.5);
    Ok(DenoiserBackend::Analytic(analytic_gaussian_backend(mu, cfg.analytic_sigma2, cfg.schedule.build()?)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cache_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PretrainConfig { shapes: 2, views: 2, steps: 5, toy: ToyConfig { hidden: 4, ..Default::default() }, ..Default::default() };
        let cam = CameraDefaults { width: 8, height: 8, ..Default::default() };
        let (a, hit_a) = pretrained_toy_cached(&cfg, &cam, 3, Some(dir.path())).unwrap();
        let (b, hit_b) = pretrained_toy_cached(&cfg, &cam, 3, Some(dir.path())).unwrap();
        let c = pretrain_toy(&cfg, &cam, 3).unwrap();
        assert!(!hit_a && hit_b);
        assert_eq!(a.to_checkpoint().unwrap(), b.to_checkpoint().unwrap());
        assert_eq!(a.to_checkpoint().unwrap(), c.to_checkpoint().unwrap());
        assert_ne!(pretrain_cache_key(&cfg, &cam, 3), pretrain_cache_key(&cfg, &cam, 4));
    }
}
