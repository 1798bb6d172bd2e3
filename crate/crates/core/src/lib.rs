//! LoRA adapter merging and learnable calibration for compositional multi-tasking.
//!
//! The crate covers the full pipeline on a desk-scale testbed:
//!
//! - [`tensor`] and [`rng`]: deterministic dense `f32` arithmetic and seeded randomness.
//! - [`adapter`] and [`safetensors`]: LoRA adapters and their on-disk format.
//! - [`merge`]: linear, concatenation, TIES, DARE, Slerp, LoraHub, LM-Cocktail and DAM merges.
//! - [`calibration`]: bias and low-rank calibration parameters shared across layers.
//! - [`model`]: a small frozen-base decoder with a manual backward pass, Adam,
//!   adapter and calibration training, greedy decoding and strategy evaluation.
//! - [`tasks`]: composable string tasks and JSONL datasets.
//! - [`metrics`]: ROUGE-N, ROUGE-L and Weighted ROUGE.
//! - [`cli`]: the `loracal` command line.

pub mod adapter;
pub mod calibration;
pub mod cli;
pub mod error;
pub mod experiment;
pub mod inspect;
pub mod merge;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod safetensors;
pub mod tasks;
pub mod tensor;

pub use adapter::{Adapter, AdapterConfig, ComponentKind, LoraPair, ModelSpec};
pub use error::{Error, Result};
pub use rng::SeededRng;
pub use tensor::{Init, TensorF32};
