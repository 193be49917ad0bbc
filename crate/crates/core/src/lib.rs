//! Reconstruction-based multimodal adapters for a small frozen dual encoder.
//!
//! The crate is `no_std` + `alloc`. Enable the `std` feature when linking
//! into a hosted binary, and `serde` for (de)serializable configuration types.

#![cfg_attr(not(feature = "std"), no_std)]
// `!(x > 0.0)` style checks also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod adapter;
pub mod autodiff;
pub mod encoder;
pub mod error;
pub mod fewshot;
pub mod gradcheck;
mod init;
pub mod objectives;
pub mod optim;
pub mod pretrain;
pub mod tensor;
pub mod world;

pub use adapter::{
    attach, parameter_count, AdaptedModel, AdapterParams, AdapterPlacement, Branches, RecDepth,
    SharingMode,
};
pub use autodiff::{AttentionGeometry, Gradients, Tape, Var};
pub use encoder::{ClassPromptSet, DualEncoderModel, EncoderConfig, Tower};
pub use error::{Error, Result};
pub use fewshot::{
    ablate, adapt, evaluate, harmonic_mean, train_adapters, train_adapters_with, validate_world,
    AblationMatrix, AblationTable, EvalReport, TrainConfig, Variant,
};
pub use gradcheck::{gradcheck, GradCheckOptions, GradEntry, GradReport};
pub use objectives::{LossBreakdown, LossWeights};
pub use optim::{AdamW, AdamWConfig};
pub use pretrain::{
    contrastive_pretrain, contrastive_pretrain_with, ImageTextPair, PretrainConfig,
};
pub use tensor::Tensor;
pub use world::{generate_world, FewShotTask, Sample, SyntheticWorld, WorldConfig};
