use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ties::{ties_merge, TiesParams};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::task_vectors::{apply_task_vectors, Coefficients, TaskVector};
use crate::tensor_store::TensorMap;

const CHUNK: usize = 1 << 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DareParams {
    /// Probability of dropping each delta entry, in `[0, 1)`.
    pub drop_rate: f64,
    pub seed: u64,
}

impl DareParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.drop_rate) {
            return Err(Error::validation(
                "params.p",
                format!("drop rate {} must lie in [0, 1)", self.drop_rate),
            ));
        }
        Ok(())
    }

    /// Parameters for the task vector at `position` in sorted model-id order.
    /// The first vector uses the seed as given; later ones offset it so that
    /// different experts get independent masks.
    pub fn for_position(&self, position: usize) -> Self {
        Self {
            seed: self.seed.wrapping_add(position as u64),
            ..*self
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropStats {
    pub kept: u64,
    pub dropped: u64,
}

impl std::ops::AddAssign for DropStats {
    fn add_assign(&mut self, rhs: Self) {
        self.kept += rhs.kept;
        self.dropped += rhs.dropped;
    }
}

fn drop_slice(values: &mut [f32], name: &str, params: &DareParams) -> DropStats {
    let start = SplitMix64::for_tensor(params.seed, name).state();
    let p = params.drop_rate;
    let scale = 1.0 / (1.0 - p);
    let counts: Vec<u64> = values
        .par_chunks_mut(CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut rng = SplitMix64::new(0);
            rng.skip_to(start, (c * CHUNK) as u64);
            let mut kept = 0u64;
            for v in chunk.iter_mut() {
                if rng.next_unit() >= p {
                    *v = (*v as f64 * scale) as f32;
                    kept += 1;
                } else {
                    *v = 0.0;
                }
            }
            kept
        })
        .collect();
    let kept: u64 = counts.iter().sum();
    DropStats {
        kept,
        dropped: values.len() as u64 - kept,
    }
}

/// Drop each delta entry with probability `p` and rescale survivors by
/// `1/(1−p)`. The mask is a pure function of `(seed, tensor name, flat index)`.
pub fn dare_drop(vector: &TaskVector, params: &DareParams) -> Result<(TaskVector, DropStats)> {
    params.validate()?;
    let entries: Vec<_> = vector.deltas.iter().collect();
    let results: Vec<_> = entries
        .into_par_iter()
        .map(|(name, t)| {
            let mut data = t.data().to_vec();
            let stats = drop_slice(&mut data, name, params);
            (name.clone(), t.like(data), stats)
        })
        .collect();
    let mut total = DropStats::default();
    let mut deltas = std::collections::BTreeMap::new();
    for (name, t, s) in results {
        total += s;
        deltas.insert(name, t);
    }
    Ok((vector.with_deltas(deltas), total))
}

fn drop_all(vectors: &[TaskVector], params: &DareParams) -> Result<(Vec<TaskVector>, DropStats)> {
    params.validate()?;
    let mut order: Vec<&TaskVector> = vectors.iter().collect();
    order.sort_by(|a, b| a.model_id.cmp(&b.model_id));
    let mut total = DropStats::default();
    let mut out = Vec::with_capacity(order.len());
    for (pos, v) in order.into_iter().enumerate() {
        let (dropped, stats) = dare_drop(v, &params.for_position(pos))?;
        total += stats;
        out.push(dropped);
    }
    Ok((out, total))
}

/// DARE followed by task arithmetic.
pub fn dare_ta(
    base: &TensorMap,
    vectors: &[TaskVector],
    dare: &DareParams,
    coeffs: &Coefficients,
) -> Result<(TensorMap, DropStats)> {
    let (dropped, stats) = drop_all(vectors, dare)?;
    Ok((apply_task_vectors(base, &dropped, coeffs)?, stats))
}

/// DARE followed by TIES.
pub fn dare_ties(
    base: &TensorMap,
    vectors: &[TaskVector],
    dare: &DareParams,
    ties: &TiesParams,
) -> Result<(TensorMap, DropStats)> {
    let (dropped, stats) = drop_all(vectors, dare)?;
    Ok((ties_merge(base, &dropped, ties)?, stats))
}
