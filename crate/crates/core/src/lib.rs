//! Desk-scale latent-diffusion editing: DDIM inversion and sampling,
//! self-attention key/value injection from the inversion trajectory,
//! mask-guided attention concatenation and layout conditioning, on a small
//! trainable noise predictor.

pub mod attention_control;
pub mod autodiff;
pub mod denoiser;
pub mod error;
pub mod image_io;
pub mod latent_codec;
pub mod matrix;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod schedule;
pub mod synth_data;
pub mod tensor;
pub mod tensor_io;
pub mod vocab;

pub use error::{Error, Result};
pub use latent_codec::{CodecMode, LatentCodec};
pub use matrix::Matrix;
pub use schedule::{NoiseSchedule, ScheduleConfig};
pub use tensor::{ImageTensor, LatentTensor};
pub use vocab::Prompt;
pub use attention_control::{AttentionPlan, ControllerPolicy, EditMask, KVCache, PolicyKind};
pub use denoiser::{AnalyticGaussian, DenoiserConfig, LayoutMap, NoisePredictor, ToyDenoiser};
pub use pipeline::{InversionResult, SamplerRun};
