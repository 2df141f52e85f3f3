//! Cross-modal augmentation for few-shot multimodal classification over
//! precomputed text and image embeddings.
//!
//! Each record yields five features (text, image, their normalized
//! concatenation, and two cross-attended views). Every feature gets its own
//! linear probe, and a meta-linear head combines the probe outputs. The
//! [`harness`] module runs the episodic evaluation protocol on top.

pub mod checkpoint;
pub mod cmaf;
pub mod config;
pub mod datastore;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod heads;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod synth;

pub use datastore::{Episode, FeatureRecord, FeatureStore};
pub use error::{Error, ErrorClass, FormatError, Result};
pub use model::{cma_backward, cma_forward, CmaModel, ModelConfig, Prediction, Variant};
pub use optim::{init_model, initialize, train_episode, InitScheme, TrainConfig};
