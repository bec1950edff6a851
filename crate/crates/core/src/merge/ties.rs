use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task_vectors::{sorted_vectors, TaskVector};
use crate::tensor_store::{Tensor, TensorMap};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TiesParams {
    /// Fraction of smallest-magnitude entries zeroed per tensor, in `[0, 1)`.
    pub trim_ratio: f64,
    /// Scale applied to the merged delta.
    pub alpha: f64,
}

impl TiesParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.trim_ratio) {
            return Err(Error::validation(
                "params.k",
                format!("trim ratio {} must lie in [0, 1)", self.trim_ratio),
            ));
        }
        if !self.alpha.is_finite() {
            return Err(Error::validation("params.alpha", "must be finite"));
        }
        Ok(())
    }
}

/// Number of entries zeroed for a tensor of `n` entries: `⌊k·n⌋`.
pub fn trim_count(n: usize, k: f64) -> usize {
    // guard against k·n landing a hair below an integer, e.g. 0.7·10
    let m = (k * n as f64 + 1e-9).floor() as usize;
    m.min(n)
}

/// Zero the `⌊k·n⌋` smallest-magnitude entries in place. Among equal
/// magnitudes the higher flat index is zeroed first.
pub fn trim_slice(values: &mut [f32], k: f64) {
    let m = trim_count(values.len(), k);
    if m == 0 {
        return;
    }
    let mut mags: Vec<f32> = values.iter().map(|v| v.abs()).collect();
    let (_, threshold, _) = mags.select_nth_unstable_by(m - 1, |a, b| a.total_cmp(b));
    let threshold = *threshold;
    drop(mags);

    let mut below = 0usize;
    for v in values.iter_mut() {
        if v.abs().total_cmp(&threshold).is_lt() {
            *v = 0.0;
            below += 1;
        }
    }
    let mut remaining = m - below;
    for v in values.iter_mut().rev() {
        if remaining == 0 {
            break;
        }
        if v.abs().total_cmp(&threshold).is_eq() {
            *v = 0.0;
            remaining -= 1;
        }
    }
}

pub fn trim(delta: &Tensor, k: f64) -> Tensor {
    let mut data = delta.data().to_vec();
    trim_slice(&mut data, k);
    delta.like(data)
}

/// Per-element sign of `Σ_k δ̂_k` (FP64, in the given order): the sign with the
/// larger total magnitude, or 0 on exact cancellation.
pub fn elect_sign(trimmed: &[&[f32]]) -> Vec<i8> {
    let n = trimmed.first().map_or(0, |t| t.len());
    assert!(trimmed.iter().all(|t| t.len() == n), "sign election needs equal shapes");
    (0..n)
        .map(|i| {
            let s: f64 = trimmed.iter().map(|t| t[i] as f64).sum();
            if s > 0.0 {
                1
            } else if s < 0.0 {
                -1
            } else {
                0
            }
        })
        .collect()
}

fn disjoint_merge(base: &[f32], trimmed: &[&[f32]], signs: &[i8], alpha: f64) -> Vec<f32> {
    base.iter()
        .enumerate()
        .map(|(i, &b)| {
            let elected = signs[i];
            if elected == 0 {
                return b;
            }
            let mut sum = 0.0f64;
            let mut count = 0u32;
            for t in trimmed {
                let x = t[i];
                if x != 0.0 && (x > 0.0) == (elected > 0) {
                    sum += x as f64;
                    count += 1;
                }
            }
            if count == 0 {
                return b;
            }
            (b as f64 + alpha * (sum / count as f64)) as f32
        })
        .collect()
}

/// TIES merging: trim each task vector per tensor, elect a sign per entry,
/// average the entries that agree with it and add `α ×` that mean to the base.
pub fn ties_merge(base: &TensorMap, vectors: &[TaskVector], params: &TiesParams) -> Result<TensorMap> {
    params.validate()?;
    if vectors.is_empty() {
        return Err(Error::validation("experts", "TIES needs at least one task vector"));
    }
    let sorted = sorted_vectors(base, vectors)?;
    base.try_par_map(|name, b| {
        if sorted[0].skipped.contains(name) {
            return Ok(b.clone());
        }
        let trimmed: Vec<Vec<f32>> = sorted
            .iter()
            .map(|v| {
                let mut d = v.deltas[name].data().to_vec();
                trim_slice(&mut d, params.trim_ratio);
                d
            })
            .collect();
        let views: Vec<&[f32]> = trimmed.iter().map(Vec::as_slice).collect();
        let signs = elect_sign(&views);
        Ok(b.like(disjoint_merge(b.data(), &views, &signs, params.alpha)))
    })
}
