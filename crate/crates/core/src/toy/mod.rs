//! A small pre-norm transformer trained on chained addition, with the three
//! generation-time interventions studied on real reasoning models.

pub mod config;
pub mod experiments;
pub mod generate;
pub mod grad;
pub mod model;
pub mod task;
pub mod train;
pub mod weights;

pub use config::ToyConfig;
pub use generate::{
    apply_suppression, argmax, decode_representation, generate, softmax, ttts_generate, GenerationSession,
    InterventionConfig, StopReason,
};
pub use grad::{loss, loss_and_grad, TrainExample};
pub use model::{ForwardOutput, TensorInfo, ToyTransformer};
pub use task::{make_task, TaskInstance, TaskKind, TaskSpec};
pub use train::{train_toy, TrainConfig, TrainReport};
pub use weights::{decode_weights, encode_weights, read_weights_file, write_weights_file};
