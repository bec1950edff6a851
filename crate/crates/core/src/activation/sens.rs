use serde::{Deserialize, Serialize};

use super::CalibrationStats;
use crate::error::{Error, Result};
use crate::task_vectors::{apply_task_vectors, Coefficients, LayerAssigner, LayerId, TaskVector};
use crate::tensor_store::TensorMap;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensParams {
    /// Mean target coefficient.
    pub alpha: f64,
    pub temperature: f64,
}

impl SensParams {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() {
            return Err(Error::validation("params.alpha", "must be finite"));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::validation(
                "params.temperature",
                format!("temperature {} must be a positive finite number", self.temperature),
            ));
        }
        Ok(())
    }
}

/// `exp(x_l / T)` normalized over `l`, computed after subtracting the maximum.
pub fn softmax_tempered(scores: &[f64], temperature: f64) -> Vec<f64> {
    let top = scores.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let e: Vec<f64> = scores.iter().map(|&x| ((x - top) / temperature).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|x| x / total).collect()
}

/// Layer-wise coefficients `λ_{k,l} = α · L · softmax_T(s_k)_l · g_k`.
///
/// Layer scores are divided by the model's largest score before the softmax,
/// so only their relative sizes matter; an all-zero row yields the uniform
/// distribution. `g_k` is the task score rescaled to mean 1 over `model_ids`.
pub fn sens_coefficients<S: AsRef<str>>(
    stats: &CalibrationStats,
    params: &SensParams,
    model_ids: &[S],
    layer_ids: &[LayerId],
) -> Result<Coefficients> {
    params.validate()?;
    stats.validate()?;
    if layer_ids.is_empty() {
        return Err(Error::validation("layers", "no layers to weight"));
    }
    let mut task = Vec::with_capacity(model_ids.len());
    for id in model_ids {
        let id = id.as_ref();
        let t = stats
            .task_sensitivity
            .get(id)
            .ok_or_else(|| Error::Stats(format!("task_sensitivity has no score for model `{id}`")))?;
        task.push(*t);
    }
    let task_total: f64 = task.iter().sum();
    if task_total <= 0.0 {
        return Err(Error::Stats("task sensitivities of the merged models are all zero".into()));
    }
    let k = model_ids.len() as f64;
    let l = layer_ids.len() as f64;

    let mut coeffs = Coefficients::new();
    for (id, t) in model_ids.iter().zip(&task) {
        let id = id.as_ref();
        let row = stats.layer_sensitivity.get(id);
        let mut scores = Vec::with_capacity(layer_ids.len());
        for layer in layer_ids {
            let s = row.and_then(|r| r.get(layer)).ok_or_else(|| {
                Error::Stats(format!("layer_sensitivity has no score for model `{id}`, layer {layer}"))
            })?;
            scores.push(*s);
        }
        let top = scores.iter().fold(0.0f64, |m, &x| m.max(x));
        if top > 0.0 {
            scores.iter_mut().for_each(|x| *x /= top);
        }
        let g = t * k / task_total;
        for (layer, p) in layer_ids.iter().zip(softmax_tempered(&scores, params.temperature)) {
            coeffs.set_layer(id, layer.clone(), params.alpha * (l * p) * g);
        }
    }
    Ok(coeffs)
}

/// Task arithmetic with coefficients from [`sens_coefficients`]; layers are
/// taken from the base tensor names under `layers`.
pub fn sens_merge(
    base: &TensorMap,
    vectors: &[TaskVector],
    stats: &CalibrationStats,
    params: &SensParams,
    layers: &LayerAssigner,
) -> Result<(TensorMap, Coefficients)> {
    let mut ids: Vec<&str> = vectors.iter().map(|v| v.model_id.as_str()).collect();
    ids.sort_unstable();
    let layer_ids: Vec<LayerId> = layers.layers(base.names()).into_iter().collect();
    let mut coeffs = sens_coefficients(stats, params, &ids, &layer_ids)?;
    coeffs.set_layer_assigner(layers.clone());
    let merged = apply_task_vectors(base, vectors, &coeffs)?;
    Ok((merged, coeffs))
}
