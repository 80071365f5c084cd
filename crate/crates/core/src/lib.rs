//! CLUDI: clustering by conditional diffusion.
//!
//! A small MLP denoiser is trained, by teacher/student self-distillation, to
//! generate *assignment embeddings* conditioned on a feature vector. A linear
//! logit head with a tempered softmax turns each embedding into cluster
//! probabilities, and classification averages those probabilities over several
//! independent stochastic reverse chains.
//!
//! Module map:
//! - [`diffusion`]: sqrt noise schedule, forward noising, Min-SNR weights and
//!   the stochastic DDIM sampler.
//! - [`denoiser`]: the conditional MLP, its exact reverse-mode gradients and Adam.
//! - [`heads`]: logit head `L` and target-embedding head `E`.
//! - [`losses`]: diffusion MSE, the batch-regularized symmetric cross-entropy,
//!   and the weighted total objective.
//! - [`trainer`]: the self-distillation loop.
//! - [`inference`]: Monte-Carlo classification and embedding export.
//! - [`metrics`]: NMI, Hungarian-matched accuracy and ARI.
//! - [`data`]: CLDF/CSV feature files and the synthetic mixture generator.
//! - [`checkpoint`]: the CLDM model file.

pub mod checkpoint;
pub mod data;
pub mod denoiser;
pub mod diffusion;
mod error;
pub mod heads;
pub mod inference;
pub mod losses;
pub mod metrics;
mod par;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};

pub use data::{FeatureDataset, MixtureSpec};
pub use denoiser::{Activation, AdamState, DenoiserParams, Gradients};
pub use diffusion::{NoiseSchedule, NoiseScale, SnrClipMode, TimeGrid};
pub use heads::{ClusterProbs, HeadParams};
pub use inference::{InferenceConfig, Prediction};
pub use losses::{LossConfig, LossWeights};
pub use metrics::{EvalReport, Labeling};
pub use trainer::{CludiModel, History, TrainConfig, Trainer};
