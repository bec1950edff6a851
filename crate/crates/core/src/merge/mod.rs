//! Element-wise mergers: plain averaging, task arithmetic, TIES and DARE.
//!
//! Per-tensor work is independent and runs in parallel across names; every
//! reduction inside a tensor walks the task vectors in sorted model-id order,
//! so the output bits never depend on the thread count.

mod average;
mod dare;
mod ties;

pub use average::average_merge;
pub use dare::{dare_drop, dare_ta, dare_ties, DareParams, DropStats};
pub use ties::{elect_sign, ties_merge, trim, trim_count, trim_slice, TiesParams};

use crate::error::Result;
use crate::task_vectors::{apply_task_vectors, Coefficients, TaskVector};
use crate::tensor_store::TensorMap;

/// Task arithmetic: `θ_0 + Σ_k λ_k δ_k`.
pub fn task_arithmetic(
    base: &TensorMap,
    vectors: &[TaskVector],
    coeffs: &Coefficients,
) -> Result<TensorMap> {
    apply_task_vectors(base, vectors, coeffs)
}
