//! Low-rank mergers: truncated-SVD compression of task vectors before task
//! arithmetic, and low-rank estimation of a shared base plus nuclear-norm
//! penalized deltas by coordinate descent with singular value thresholding.
//!
//! Matrices whose smaller side is at most `SvdOptions::dense_cap` get an exact
//! one-sided Jacobi SVD in FP64. Larger ones go through a randomized range
//! finder, which only sees the leading `sketch_rank` directions when the full
//! spectrum is needed (energy truncation, thresholding).

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{jacobi_svd, randomized_svd, Matrix, SvdFactors};
use crate::task_vectors::{apply_task_vectors, sorted_vectors, Coefficients, TaskVector};
use crate::tensor_store::{Tensor, TensorMap};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvdOptions {
    pub dense_cap: usize,
    pub sketch_rank: usize,
    pub oversample: usize,
    pub power_iters: usize,
    pub seed: u64,
}

impl Default for SvdOptions {
    fn default() -> Self {
        Self {
            dense_cap: 512,
            sketch_rank: 128,
            oversample: 8,
            power_iters: 2,
            seed: 0x5eed,
        }
    }
}

impl SvdOptions {
    fn dense(&self, a: &Matrix, rank: usize) -> bool {
        let k = a.rows().min(a.cols());
        k <= self.dense_cap || rank + self.oversample >= k
    }
}

/// Best rank-`min(rank, rank(A))` factorization of `a`.
pub fn truncated_svd(a: &Matrix, rank: usize, opts: &SvdOptions) -> Result<SvdFactors> {
    if rank == 0 {
        return Err(Error::validation("rank", "rank must be at least 1"));
    }
    Ok(if opts.dense(a, rank) {
        jacobi_svd(a).truncate(rank)
    } else {
        randomized_svd(a, rank, opts.oversample, opts.power_iters, opts.seed)
    })
}

/// The full spectrum for small matrices, the leading `sketch_rank` part otherwise.
pub fn spectrum(a: &Matrix, opts: &SvdOptions) -> SvdFactors {
    if opts.dense(a, opts.sketch_rank) {
        jacobi_svd(a)
    } else {
        randomized_svd(a, opts.sketch_rank, opts.oversample, opts.power_iters, opts.seed)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(Error::validation("params.tau", format!("threshold {tau} must be finite and >= 0")));
    }
    Ok(())
}

/// Returns the thresholded matrix and its nuclear norm (0 when `tau` is 0).
fn svt_with_norm(a: &Matrix, tau: f64, opts: &SvdOptions) -> (Matrix, f64) {
    if tau == 0.0 {
        return (a.clone(), 0.0);
    }
    let f = spectrum(a, opts);
    let shrunk: Vec<f64> = f.s.iter().map(|s| (s - tau).max(0.0)).collect();
    let norm = shrunk.iter().sum::<f64>();
    (f.reconstruct_with(&shrunk), norm)
}

/// Singular value thresholding `U max(S − τ, 0) Vᵀ`: the proximal operator of `τ‖·‖_*`.
pub fn svt(a: &Matrix, tau: f64, opts: &SvdOptions) -> Result<Matrix> {
    check_tau(tau)?;
    Ok(svt_with_norm(a, tau, opts).0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankSpec {
    /// Keep a fixed number of singular triplets.
    Fixed(usize),
    /// Keep the smallest rank whose squared singular values reach this
    /// fraction of the total energy `‖A‖_F²`.
    Energy(f64),
}

impl RankSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            RankSpec::Fixed(0) => Err(Error::validation("params.rank", "rank must be at least 1")),
            RankSpec::Energy(e) if !(e > 0.0 && e <= 1.0) => Err(Error::validation(
                "params.energy",
                format!("energy fraction {e} must lie in (0, 1]"),
            )),
            _ => Ok(()),
        }
    }
}

/// Compress one matrix according to `spec`; returns the approximation and the rank kept.
pub fn compress(a: &Matrix, spec: RankSpec, opts: &SvdOptions) -> Result<(Matrix, usize)> {
    spec.validate()?;
    let f = match spec {
        RankSpec::Fixed(r) => truncated_svd(a, r, opts)?,
        RankSpec::Energy(e) => {
            let f = spectrum(a, opts);
            let target = e * a.frobenius_sq() * (1.0 - 1e-12);
            let mut acc = 0.0;
            let mut r = f.rank();
            for (i, s) in f.s.iter().enumerate() {
                acc += s * s;
                if acc >= target {
                    r = i + 1;
                    break;
                }
            }
            f.truncate(r)
        }
    };
    let r = f.rank();
    Ok((f.reconstruct(), r))
}

#[derive(Clone, Debug)]
pub struct TwinOutcome {
    pub merged: TensorMap,
    /// Rank kept per 2-D tensor, one entry per task vector in sorted model-id order.
    pub ranks: BTreeMap<String, Vec<usize>>,
}

/// Replace every 2-D delta by its low-rank approximation (1-D deltas pass
/// through), then apply task arithmetic with `coeffs`.
pub fn twin_merge(
    base: &TensorMap,
    vectors: &[TaskVector],
    spec: RankSpec,
    coeffs: &Coefficients,
    opts: &SvdOptions,
) -> Result<TwinOutcome> {
    spec.validate()?;
    let sorted = sorted_vectors(base, vectors)?;
    let mut compressed = Vec::with_capacity(sorted.len());
    let mut ranks: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for v in sorted {
        let entries: Vec<_> = v.deltas.iter().collect();
        let done = entries
            .into_par_iter()
            .map(|(name, t)| {
                if !t.is_matrix() {
                    return Ok((name.clone(), t.clone(), None));
                }
                let a = Matrix::from_tensor(name, t)?;
                let (approx, r) = compress(&a, spec, opts)?;
                Ok((name.clone(), approx.to_tensor(t), Some(r)))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut deltas = BTreeMap::new();
        for (name, t, r) in done {
            if let Some(r) = r {
                ranks.entry(name.clone()).or_default().push(r);
            }
            deltas.insert(name, t);
        }
        compressed.push(v.with_deltas(deltas));
    }
    Ok(TwinOutcome {
        merged: apply_task_vectors(base, &compressed, coeffs)?,
        ranks,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauSpec {
    Absolute(f64),
    /// Fraction of the largest singular value among the centered inputs of
    /// each tensor, so one setting works across tensors of different scale.
    RelativeToSigmaMax(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoreParams {
    pub tau: TauSpec,
    pub max_iters: usize,
    /// Stop once the relative decrease of the objective falls below this;
    /// 0 runs all `max_iters` sweeps.
    pub tol: f64,
    /// Scale on `Σ_k δ̂_k` in the returned model.
    pub lambda: f64,
}

impl Default for LoreParams {
    fn default() -> Self {
        Self {
            tau: TauSpec::RelativeToSigmaMax(0.05),
            max_iters: 50,
            tol: 1e-6,
            lambda: 1.0,
        }
    }
}

impl LoreParams {
    pub fn validate(&self) -> Result<()> {
        match self.tau {
            TauSpec::Absolute(t) | TauSpec::RelativeToSigmaMax(t) => check_tau(t)?,
        }
        if self.max_iters == 0 {
            return Err(Error::validation("params.max_iters", "must be positive"));
        }
        if !(self.tol >= 0.0 && self.tol.is_finite()) {
            return Err(Error::validation("params.tol", "must be finite and >= 0"));
        }
        if !self.lambda.is_finite() {
            return Err(Error::validation("params.lore_lambda", "must be finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LoreOutcome {
    pub merged: TensorMap,
    /// Objective summed over tensors; entry 0 is the initial point, entry `i`
    /// the value after sweep `i`.
    pub objective: Vec<f64>,
    pub iterations: usize,
    /// Threshold used per 2-D tensor.
    pub taus: BTreeMap<String, f64>,
}

struct TensorLore {
    merged: Vec<f32>,
    objective: Vec<f64>,
    tau: Option<f64>,
}

fn lore_tensor(name: &str, inputs: &[&Tensor], params: &LoreParams, opts: &SvdOptions) -> Result<TensorLore> {
    let k = inputs.len() as f64;
    let n = inputs[0].numel();
    let xs: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.data().iter().map(|&x| x as f64).collect())
        .collect();
    let dims = inputs[0].matrix_dims();

    let mean = |deltas: &[Vec<f64>]| -> Vec<f64> {
        (0..n)
            .map(|i| xs.iter().zip(deltas).map(|(x, d)| x[i] - d[i]).sum::<f64>() / k)
            .collect()
    };
    let residual = |x: &[f64], base: &[f64]| -> Vec<f64> { x.iter().zip(base).map(|(a, b)| a - b).collect() };

    let mut deltas = vec![vec![0.0; n]; xs.len()];
    let mut base = mean(&deltas);

    let tau = match dims {
        None => None,
        Some((r, c)) => Some(match params.tau {
            TauSpec::Absolute(t) => t,
            TauSpec::RelativeToSigmaMax(frac) => {
                let mut smax = 0.0f64;
                for x in &xs {
                    let m = Matrix::from_vec(r, c, residual(x, &base));
                    let top = truncated_svd(&m, 1, opts)?;
                    smax = smax.max(top.s.first().copied().unwrap_or(0.0));
                }
                frac * smax
            }
        }),
    };

    let fit = |base: &[f64], deltas: &[Vec<f64>]| -> f64 {
        xs.iter()
            .zip(deltas)
            .map(|(x, d)| (0..n).map(|i| (x[i] - base[i] - d[i]).powi(2)).sum::<f64>())
            .sum()
    };

    let mut objective = vec![fit(&base, &deltas)];
    for it in 1..=params.max_iters {
        if it > 1 {
            base = mean(&deltas);
        }
        let mut penalty = 0.0;
        for (x, d) in xs.iter().zip(deltas.iter_mut()) {
            let res = residual(x, &base);
            *d = match (dims, tau) {
                (Some((r, c)), Some(t)) => {
                    // argmin_δ ‖R − δ‖² + τ‖δ‖_* thresholds at τ/2
                    let (m, norm) = svt_with_norm(&Matrix::from_vec(r, c, res), t / 2.0, opts);
                    penalty += t * norm;
                    m.data().to_vec()
                }
                _ => res,
            };
        }
        let j = fit(&base, &deltas) + penalty;
        if !j.is_finite() {
            return Err(Error::Numerical {
                tensor: name.to_string(),
                message: format!("objective became {j} at sweep {it}"),
            });
        }
        let prev = *objective.last().unwrap();
        objective.push(j);
        if j == 0.0 || (prev - j) / prev < params.tol {
            break;
        }
    }

    let merged = (0..n)
        .map(|i| (base[i] + params.lambda * deltas.iter().map(|d| d[i]).sum::<f64>()) as f32)
        .collect();
    Ok(TensorLore {
        merged,
        objective,
        tau,
    })
}

/// Low-rank estimation merge over `models` (no external base):
/// minimize `Σ_k ‖θ_k − θ̂_0 − δ̂_k‖_F² + τ Σ_k ‖δ̂_k‖_*` by alternating an
/// exact mean update of `θ̂_0` with exact updates `δ̂_k = svt(θ_k − θ̂_0, τ/2)`,
/// starting from the plain mean and zero deltas, and return
/// `θ̂_0 + λ Σ_k δ̂_k`. The objective separates over tensors, so each tensor
/// runs its own sweeps; tensors that are not 2-D carry no penalty.
pub fn lore_merge(models: &[&TensorMap], params: &LoreParams, opts: &SvdOptions) -> Result<LoreOutcome> {
    params.validate()?;
    let [first, rest @ ..] = models else {
        return Err(Error::validation("models", "LoRE merging needs at least two models"));
    };
    if rest.is_empty() {
        return Err(Error::validation("models", "LoRE merging needs at least two models"));
    }
    for (i, m) in rest.iter().enumerate() {
        first.check_same_manifest(m, &format!("model #{}", i + 1))?;
    }

    let names: Vec<&String> = first.names().collect();
    let per_tensor: Vec<TensorLore> = names
        .par_iter()
        .map(|name| {
            let inputs: Vec<&Tensor> = models.iter().map(|m| m.get(name).unwrap()).collect();
            lore_tensor(name, &inputs, params, opts)
        })
        .collect::<Result<_>>()?;

    let iterations = per_tensor.iter().map(|t| t.objective.len() - 1).max().unwrap_or(0);
    let objective = (0..=iterations)
        .map(|i| {
            per_tensor
                .iter()
                .map(|t| t.objective[i.min(t.objective.len() - 1)])
                .sum()
        })
        .collect();

    let mut merged = TensorMap::new();
    *merged.metadata_mut() = first.metadata().clone();
    let mut taus = BTreeMap::new();
    for (name, t) in names.into_iter().zip(per_tensor) {
        if let Some(tau) = t.tau {
            taus.insert(name.clone(), tau);
        }
        merged.insert(name.clone(), first.get(name).unwrap().like(t.merged));
    }
    Ok(LoreOutcome {
        merged,
        objective,
        iterations,
        taus,
    })
}
