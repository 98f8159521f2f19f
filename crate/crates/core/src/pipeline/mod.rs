//! End-to-end orchestration: run configuration, the synthetic training
//! corpus, the assembled model, staged training, and file-to-file rescaling.

mod config;
mod corpus;
mod infer;
mod model;
mod train;

pub use config::{
    apply_overrides, default_keys, load_config, CorpusConfig, RunConfig, StagesConfig,
};
pub use corpus::{desk_corpus, desk_image};
pub use infer::{
    enhance_tiled, read_meta, rescale_down, rescale_up, roundtrip_files, sidecar_path,
    DownReport, Restored, StoredMeta, META_KEY,
};
pub use model::{Model, Phase};
pub use train::{
    calibrate_latent_scale, degrade_corpus, encode_corpus, eval_rescale_loss, load_checkpoint,
    save_checkpoint, stage_optimizer, train_codec, train_denoiser, train_full, train_stage1,
    train_stage2, train_stage3, LossTrace, Resumed, TrainOptions, TrainReport,
};
