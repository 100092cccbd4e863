//! Multi-source sequence-to-sequence speech synthesis: a text encoder and
//! a spectrogram encoder feed one decoder through two attention modules.
//! Either input can be masked, so one model serves text-to-speech, voice
//! conversion and both together.
//!
//! Every layer carries a hand-written backward pass; [`checks`] verifies
//! them against central differences.

pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod masking;
pub mod model;
pub mod numerics;
pub mod training;

pub use checkpoint::Checkpoint;
pub use config::{DecoderConfig, EncoderConfig, ModelConfig, Preset, RunConfig, TrainConfig};
pub use data::{Corpus, EvalReport, Utterance};
pub use decoder::{AlignmentTrace, GenerateOptions};
pub use error::{Error, Result};
pub use masking::{MaskPolicy, MaskSelection};
pub use model::{Model, ModelKind};
pub use numerics::{NumArray, SeededRng};
pub use training::{LossRecord, Stage, StageReport, TrainOptions};
