//! Weight-space merging of a quick-thinking and a slow-thinking checkpoint,
//! plus long-to-short analysis of response corpora.
//!
//! Mergers operate on [`TensorMap`]s held in FP32. The families covered are
//! plain averaging, task arithmetic, TIES, DARE (and its TA/TIES
//! compositions), truncated-SVD merging, LoRE-style low-rank estimation,
//! activation-guided protection and sensitivity-derived layer coefficients.

pub mod activation;
pub mod error;
pub mod linalg;
pub mod lowrank;
pub mod merge;
pub mod metrics;
pub mod recipe;
pub mod rng;
pub mod task_vectors;
pub mod tensor_store;

pub use error::{Error, Result};
pub use task_vectors::{
    apply_task_vectors, compute_task_vector, Coefficients, LayerAssigner, LayerId, SkipList,
    TaskVector,
};
pub use tensor_store::{load_checkpoint, write_checkpoint, DType, DtypePolicy, Tensor, TensorMap};
