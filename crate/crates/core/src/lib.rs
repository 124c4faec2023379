//! Image-level multi-label prediction followed by rank-adaptive,
//! selected-label pixel classification, with the training, evaluation and
//! ablation machinery around it.

pub mod tensor;
pub mod nn;
pub mod error;
pub mod head;
pub mod loss;
pub mod metrics;
pub mod data;
pub mod experiment;
