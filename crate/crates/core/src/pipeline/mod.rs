//! Joint training of prior extractor, diffusion denoiser and U-net; end-to-end
//! separation; checkpoints.

pub mod checkpoint;
mod model;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use model::{separate, Model, ModelConfig, Separation};
pub use train::{
    loss_tm, sample_graph, train_step, SampleGraph, SampleNoise, StepLosses, TrainConfig, Trainer,
};
