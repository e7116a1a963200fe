//! 3D residual attention networks for micro-expression recognition:
//! tensor kernels, reverse-mode differentiation, channel and
//! spatio-temporal attention, clip preprocessing, training, and
//! gradient-based saliency. Everything is f32 storage with f64
//! accumulation in the reductions, deterministic in the configured seeds
//! at any thread count.

pub mod attention;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod model;
pub mod saliency;
pub mod tensor;
pub mod training;

pub use attention::{ChannelAttentionParams, ChannelVariant, STAttentionParams};
pub use autodiff::{GradientStore, Tape, Var};
pub use error::{Error, Result};
pub use model::{build_model, Model, ModelConfig, ModelVariant, ResidualProjection};
pub use tensor::{BatchNormParams, BnMode, ConvParams, Tensor};
pub use training::{cosine_lr, evaluate, fit, xavier_uniform, TrainConfig};
