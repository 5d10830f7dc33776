//! Item-based collaborative filtering for implicit feedback.
//!
//! Three learned models share one code path: FISM (factored item similarity),
//! DeepICF (a ReLU tower over pooled pairwise item interactions) and
//! DeepICF+a (the same with attention pooling). Gradients are derived by hand
//! and trained with per-instance Adagrad. Evaluation follows the
//! leave-one-out protocol with 99 sampled negatives, reporting HR@k and
//! NDCG@k, and includes ItemPop and ItemKNN baselines.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod math;
pub mod model;
pub mod train;

pub use data::{InteractionDataset, LineFormat, LooSplit, TrainInstance};
pub use error::{Error, Result};
pub use eval::EvalReport;
pub use math::{DenseMatrix, SeededRng};
pub use model::{ModelConfig, ModelParams, Variant};
