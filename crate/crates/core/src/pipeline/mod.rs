//! Stage I (theme-driven concept generation) and Stage II (initialization,
//! prior learning and dual score distillation with regularizers).

mod augment;
mod init;
mod manifest;
mod pretrain;
mod regularize;
mod stage1;
mod stage2;

use serde::{Deserialize, Serialize};

use crate::geometry::CameraDefaults;
use crate::render::RenderSettings;

pub use augment::{augment_cameras, augment_views, PartialDiffusion, ViewAugmenter};
pub use init::{foreground_mask, init_model, FileInitializer, Initializer, VisualHull};
pub use manifest::{
    hash_bytes, hash_field, hash_image, hash_mesh, write_atomic, RunManifest, RunStatus, MANIFEST_FILE,
};
pub use pretrain::{analytic_base, pretrain_cache_key, pretrain_toy, pretrained_toy_cached, PretrainConfig};
pub use regularize::{
    contextual_loss, contextual_loss_grad, contextual_pair, tv_loss, FeatureExtractor, FeatureMap, PatchFeatures,
    CONTEXTUAL_BANDWIDTH, TV_EPS,
};
pub use stage1::{render_exemplar_views, sample_concept, stage1, theme_prompt, Stage1Output, StageIConfig};
pub use stage2::{
    nearest_by_azimuth, optimize, prepare_stage2, silhouette_iou, stage2, turntable, write_final, LossRecord,
    Stage2Output, Stage2Setup, StageIIConfig, StepRecord, CHECKPOINT_DIR, LOSSES_FILE, STEPS_FILE,
};

/// Camera intrinsics and volume-render settings shared by both stages.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViewConfig {
    pub camera: CameraDefaults,
    pub render: RenderSettings,
}
