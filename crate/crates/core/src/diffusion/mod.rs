//! Noise schedules, denoiser backends, fine-tuning and guided sampling.

mod analytic;
mod backend;
mod checkpoint;
mod condition;
mod external;
mod lora;
mod prior;
mod sample;
mod schedule;
mod toy;

pub use analytic::{analytic_gaussian_backend, AnalyticBackend, AnalyticEntry, ANALYTIC_FEATURES, DEFAULT_CAMERA_BANDWIDTH};
pub use backend::{attach_lora, BackendKind, DenoiserBackend, DenoisingExample, TuneParams};
pub use checkpoint::{decode_tensors, encode_tensors, Tensor, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use condition::{
    Condition, Modality, Vocab, ATTRIBUTE_NONE, STYLE_CONCEPT, STYLE_NONE, STYLE_THEME, SUBJECT_GENERIC,
};
pub use external::{serve, BackendInfo, ExternalBackend, Request, Response, TuneSample};
pub use lora::{AdapterPair, LowRankAdapter};
pub use prior::{
    finetune_concept, finetune_reference, finetune_theme, tag_camera, train_toy_denoiser, PosedImage, PriorHandle, PriorRole,
};
pub use sample::{cfg_combine, cfg_predict, sample_image, translate, DEFAULT_SAMPLING_STEPS};
pub use schedule::{add_noise, make_schedule, DiffusionSchedule, ScheduleConfig};
pub use toy::{ToyConfig, ToyDenoiser, TOY_TENSOR_NAMES};
